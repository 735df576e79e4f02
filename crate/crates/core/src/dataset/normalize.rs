use super::{ImageSlice, RawSlice};
use crate::error::{Error, Result};

fn max_value(bit_depth: u8) -> Result<f64> {
    match bit_depth {
        8 | 12 | 16 => Ok(((1u32 << bit_depth) - 1) as f64),
        other => Err(Error::InvalidInput(format!(
            "unsupported bit depth {other} (expected 8, 12 or 16)"
        ))),
    }
}

/// Maps raw intensities `v` in `[0, 2^d - 1]` to `2 v / (2^d - 1) - 1`.
pub fn normalize_slice(raw: &RawSlice, bit_depth: u8, slice_id: &str) -> Result<Vec<f32>> {
    let max = max_value(bit_depth)?;
    raw.data
        .iter()
        .map(|&v| {
            if f64::from(v) > max {
                Err(Error::Data(format!(
                    "slice {slice_id}: value {v} exceeds the {bit_depth}-bit range"
                )))
            } else {
                Ok((2.0 * f64::from(v) / max - 1.0) as f32)
            }
        })
        .collect()
}

/// Inverse of the normalization map, rounded to the nearest integer and
/// clamped to the representable range.
pub fn denormalize_value(v: f32, bit_depth: u8) -> u16 {
    let max = max_value(bit_depth).unwrap_or(65535.0);
    ((f64::from(v) + 1.0) * 0.5 * max).round().clamp(0.0, max) as u16
}

pub fn denormalize_slice(slice: &ImageSlice, bit_depth: u8) -> RawSlice {
    RawSlice {
        width: slice.width,
        height: slice.height,
        data: slice
            .pixels
            .iter()
            .map(|&v| denormalize_value(v, bit_depth))
            .collect(),
    }
}

/// Resamples to `target_size x target_size`: bilinear for intensities,
/// nearest-neighbour for the mask. Pixel centres are aligned
/// (`src = (dst + 0.5) * scale - 0.5`), so equal sizes are an exact identity.
pub fn resample_slice(slice: &ImageSlice, target_size: u32) -> Result<ImageSlice> {
    if target_size == 0 {
        return Err(Error::InvalidInput("resample target size must be > 0".into()));
    }
    let (sw, sh) = (slice.width as usize, slice.height as usize);
    let t = target_size as usize;
    if (sw, sh) == (t, t) {
        return Ok(slice.clone());
    }
    let sx = sw as f64 / t as f64;
    let sy = sh as f64 / t as f64;

    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };

    let mut pixels = Vec::with_capacity(t * t);
    for y in 0..t {
        let (y0, y1, fy) = axis(y, sy, sh);
        for x in 0..t {
            let (x0, x1, fx) = axis(x, sx, sw);
            let p = |yy: usize, xx: usize| f64::from(slice.pixels[yy * sw + xx]);
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            let v = (top * (1.0 - fy) + bot * fy).clamp(-1.0, 1.0);
            pixels.push(v as f32);
        }
    }

    let mask = slice.mask.as_ref().map(|m| {
        let mut out = Vec::with_capacity(t * t);
        for y in 0..t {
            let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(sh - 1);
            for x in 0..t {
                let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(sw - 1);
                out.push(m[yy * sw + xx]);
            }
        }
        out
    });

    ImageSlice::new(slice.id.clone(), target_size, target_size, pixels, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(data: Vec<u16>) -> RawSlice {
        RawSlice {
            width: data.len() as u32,
            height: 1,
            data,
        }
    }

    #[test]
    fn endpoints_map_to_unit_interval() {
        let v = normalize_slice(&raw(vec![0, 4095]), 12, "s").unwrap();
        assert_eq!(v, vec![-1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_midpoint_is_near_zero() {
        let v = normalize_slice(&raw(vec![32767]), 16, "s").unwrap();
        assert!(v[0].abs() <= 1.0 / 65535.0, "{}", v[0]);
    }

    #[test]
    fn out_of_range_value_names_slice() {
        let err = normalize_slice(&raw(vec![4096]), 12, "slice-17").unwrap_err();
        assert!(err.to_string().contains("slice-17"));
    }

    #[test]
    fn identity_resample_is_pixel_identical() {
        let n = 16usize;
        let pixels: Vec<f32> = (0..n * n).map(|i| (i as f32 / (n * n) as f32) * 2.0 - 1.0).collect();
        let mask: Vec<u8> = (0..n * n).map(|i| (i % 3 == 0) as u8).collect();
        let s = ImageSlice::new("s", n as u32, n as u32, pixels, Some(mask)).unwrap();
        assert_eq!(resample_slice(&s, n as u32).unwrap(), s);
    }

    #[test]
    fn downsample_keeps_mask_binary_and_all_ones_stays_all_ones() {
        let n = 32usize;
        let pixels: Vec<f32> = (0..n * n).map(|i| ((i * 7919) % 200) as f32 / 100.0 - 1.0).collect();
        let s = ImageSlice::new("s", n as u32, n as u32, pixels.clone(), Some(vec![1; n * n])).unwrap();
        let r = resample_slice(&s, 16).unwrap();
        assert_eq!(r.width, 16);
        assert!(r.mask.as_ref().unwrap().iter().all(|&v| v == 1));

        let mask: Vec<u8> = (0..n * n).map(|i| (i / n + i % n).is_multiple_of(5) as u8).collect();
        let s = ImageSlice::new("s", n as u32, n as u32, pixels, Some(mask)).unwrap();
        for t in [7, 16, 45] {
            let r = resample_slice(&s, t).unwrap();
            assert!(r.mask.unwrap().iter().all(|&v| v <= 1));
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trips(v in 0u16..=65535, depth in prop::sample::select(vec![8u8, 12, 16])) {
            let max = (1u32 << depth) - 1;
            let v = (u32::from(v) % (max + 1)) as u16;
            let n = normalize_slice(&raw(vec![v]), depth, "p").unwrap();
            prop_assert!((-1.0..=1.0).contains(&n[0]));
            prop_assert_eq!(denormalize_value(n[0], depth), v);
        }

        #[test]
        fn nearest_mask_resampling_stays_binary(
            w in 1u32..20, h in 1u32..20, t in 1u32..40, seed in any::<u64>()
        ) {
            let n = (w * h) as usize;
            let mask: Vec<u8> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let s = ImageSlice::new("p", w, h, vec![0.0; n], Some(mask)).unwrap();
            let r = resample_slice(&s, t).unwrap();
            prop_assert!(r.mask.unwrap().iter().all(|&v| v <= 1));
            prop_assert!(r.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
