//! Minimal layer toolkit over `candle_core` autodiff tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and kept in
//! sorted order, so initialization, checkpoints and optimizer updates are
//! all deterministic given a seed.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Weight initialization schemes. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, std); the GAN convention uses std = 0.02.
    Normal(f64),
    /// N(0, 2 / fan_in).
    HeNormal,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Creates a `k x k` convolution with bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Conv2d> {
        let fan_in = in_ch * kernel * kernel;
        let std = match init {
            Init::Normal(s) => s,
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let n = out_ch * fan_in;
        let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        let weight = self.add(format!("{name}.weight"), w, &[out_ch, in_ch, kernel, kernel])?;
        let bias = self.add(format!("{name}.bias"), vec![0.0; out_ch], &[out_ch])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors file. Names and shapes
    /// must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        self.assign_all(&loaded, &path.display().to_string())
    }

    pub fn assign_all(&mut self, tensors: &HashMap<String, Tensor>, what: &str) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: holds {} tensors, architecture expects {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{what}: missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{what}: tensor `{name}` has shape {:?}, architecture expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Zero-padded convolution lowered to one matrix product (im2col), so
    /// the backward pass is matmuls and slices as well.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let (b, c, h, w) = x.dims4()?;
        if c != in_ch {
            return Err(Error::Shape(format!("convolution expects {in_ch} input channels, got {c}")));
        }
        let (p, s) = (self.padding, self.stride);
        let (ho, wo) = match ((h + 2 * p).checked_sub(k), (w + 2 * p).checked_sub(k)) {
            (Some(dh), Some(dw)) => (dh / s + 1, dw / s + 1),
            _ => return Err(Error::Shape(format!("{h}x{w} input is smaller than the {k}x{k} kernel"))),
        };
        let x = if p > 0 { x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)? } else { x.clone() };
        let cols = if k == 1 && s == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let dev = x.device();
            let taps = |off: usize, n: usize| -> Result<Option<Tensor>> {
                if s == 1 {
                    return Ok(None);
                }
                let idx: Vec<u32> = (0..n).map(|i| (off + s * i) as u32).collect();
                Ok(Some(Tensor::new(idx.as_slice(), dev)?))
            };
            let mut patches = Vec::with_capacity(k * k);
            for ky in 0..k {
                let rows = match taps(ky, ho)? {
                    Some(idx) => x.index_select(&idx, 2)?,
                    None => x.narrow(2, ky, ho)?,
                };
                for kx in 0..k {
                    let patch = match taps(kx, wo)? {
                        Some(idx) => rows.index_select(&idx, 3)?,
                        None => rows.narrow(3, kx, wo)?,
                    };
                    patches.push(patch);
                }
            }
            Tensor::stack(&patches, 2)?.reshape((b, c * k * k, ho * wo))?
        };
        let wmat = self.weight.as_tensor().reshape((out_ch, in_ch * k * k))?;
        let y = wmat.broadcast_matmul(&cols)?.reshape((b, out_ch, ho, wo))?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out_ch, 1, 1))?)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

/// Per-sample, per-channel normalization over the spatial axes, without
/// affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    let denom = (var + INSTANCE_NORM_EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&denom)?)
}

fn reflect_indices(len: usize, pad: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(len + 2 * pad);
    idx.extend((1..=pad).rev().map(|i| i as u32));
    idx.extend((0..len).map(|i| i as u32));
    idx.extend((0..pad).map(|i| (len - 2 - i) as u32));
    idx
}

/// Mirror padding on both spatial axes (edge pixel not repeated).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::Shape(format!(
            "reflection padding {pad} needs spatial dims > {pad}, got {h}x{w}"
        )));
    }
    let dev = x.device();
    let rows = Tensor::new(reflect_indices(h, pad).as_slice(), dev)?;
    let cols = Tensor::new(reflect_indices(w, pad).as_slice(), dev)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // (1 - s) relu(x) + s x
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

/// Logistic function via tanh, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_conv_matches_direct_conv() {
        let dev = Device::Cpu;
        for (k, stride, pad, hw) in [(1, 1, 0, 5), (3, 1, 1, 6), (3, 2, 1, 7), (4, 2, 1, 8), (4, 1, 1, 9), (7, 1, 0, 10), (2, 1, 0, 4)] {
            let mut ps = ParamStore::new(k as u64);
            let conv = ps.conv2d("c", 3, 5, k, stride, pad, Init::Normal(0.3)).unwrap();
            ps.get("c.bias").unwrap().set(&Tensor::new(&[0.1f32, -0.2, 0.3, 0.0, 0.5], &dev).unwrap()).unwrap();
            let x = Tensor::randn(0f32, 1.0, (2, 3, hw, hw), &dev).unwrap();
            let ours = conv.forward(&x).unwrap();
            let direct = x
                .conv2d(conv.weight.as_tensor(), pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.as_tensor().reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), direct.dims(), "k{k} s{stride} p{pad}");
            let diff = (ours - direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-4, "k{k} s{stride} p{pad}: {diff}");
        }
    }

    #[test]
    fn upsample2x_repeats_pixels() {
        let x = Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y: Vec<f32> = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn reflect_pad_matches_mirror_rule() {
        let x = Tensor::arange(0f32, 4., &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let x = x.broadcast_as((1, 1, 3, 4)).unwrap().contiguous().unwrap();
        let y = reflect_pad(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 7, 8]);
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![2., 1., 0., 1., 2., 3., 2., 1.]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::randn(3f32, 2., (2, 3, 5, 5), &Device::Cpu).unwrap();
        let y = instance_norm(&x).unwrap();
        let m: Vec<f32> = y.mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        let v: Vec<f32> = y.sqr().unwrap().mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn same_seed_same_init() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        let ca = a.conv2d("c", 2, 4, 3, 1, 1, Init::Normal(0.02)).unwrap();
        let cb = b.conv2d("c", 2, 4, 3, 1, 1, Init::Normal(0.02)).unwrap();
        let va: Vec<f32> = ca.weight.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = cb.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.parameter_count(), 4 * 2 * 9 + 4);
    }

    #[test]
    fn sigmoid_and_leaky_relu_values() {
        let x = Tensor::new(&[-2f64, 0., 3.], &Device::Cpu).unwrap();
        let s: Vec<f64> = sigmoid(&x).unwrap().to_vec1().unwrap();
        for (got, xv) in s.iter().zip([-2f64, 0., 3.]) {
            assert!((got - 1.0 / (1.0 + (-xv).exp())).abs() < 1e-12);
        }
        let l: Vec<f64> = leaky_relu(&x, 0.2).unwrap().to_vec1().unwrap();
        assert!((l[0] + 0.4).abs() < 1e-12 && l[1] == 0.0 && (l[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.safetensors");
        let mut a = ParamStore::new(0);
        a.conv2d("c", 1, 4, 3, 1, 1, Init::HeNormal).unwrap();
        a.save(&p).unwrap();
        let mut b = ParamStore::new(0);
        b.conv2d("c", 1, 8, 3, 1, 1, Init::HeNormal).unwrap();
        assert!(matches!(b.load(&p), Err(Error::Checkpoint(_))));
    }
}
