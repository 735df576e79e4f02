//! Synthetic abdominal phantoms for desk-scale runs.
//!
//! Each slice holds a body ellipse, a bright posterior disc standing in for
//! the spine and an elliptical liver blob. `A` style renders tissue values
//! directly (liver brighter than body). `B` style passes the same anatomy
//! through a different monotone intensity curve and multiplies by a smooth
//! bias field.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ensure_dir, write_gray16_png, write_mask_png, DatasetManifest, Modality, RawSlice, SliceEntry,
    IMAGES_DIR, MASKS_DIR,
};
use crate::error::{Error, Result};

const MAX_PLACEMENT_TRIES: usize = 32;
const MAX_POSE_REGENERATIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastStyle {
    #[serde(rename = "A_style")]
    A,
    #[serde(rename = "B_style")]
    B,
}

impl ContrastStyle {
    pub fn modality(self) -> Modality {
        match self {
            ContrastStyle::A => Modality::ACt,
            ContrastStyle::B => Modality::BMr,
        }
    }
}

impl std::str::FromStr for ContrastStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "a_style" | "ct" => Ok(ContrastStyle::A),
            "b" | "b_style" | "mr" => Ok(ContrastStyle::B),
            other => Err(Error::InvalidInput(format!("unknown phantom style `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: u32,
    pub n_slices: usize,
    /// Liver semi-axis range as fractions of the image size.
    pub liver_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub modality_contrast: ContrastStyle,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_slices: 20,
            liver_radius_range: (0.10, 0.20),
            noise_sigma: 0.02,
            modality_contrast: ContrastStyle::A,
        }
    }
}

impl PhantomSpec {
    pub fn new(image_size: u32, n_slices: usize, style: ContrastStyle) -> Self {
        Self {
            image_size,
            n_slices,
            modality_contrast: style,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidInput("phantom image_size must be >= 16".into()));
        }
        if self.n_slices < 1 {
            return Err(Error::InvalidInput("phantom n_slices must be >= 1".into()));
        }
        let (lo, hi) = self.liver_radius_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.3) {
            return Err(Error::InvalidInput(
                "liver_radius_range must satisfy 0 < lo <= hi < 0.3".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomOutcome {
    pub manifest: DatasetManifest,
    /// Poses discarded because the liver could not be placed inside the body.
    pub regenerations: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn boundary(&self, k: usize, n: usize) -> (f64, f64) {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.a * t.cos(), self.b * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

struct Pose {
    body: Ellipse,
    spine: Ellipse,
    liver: Ellipse,
    bias: [f64; 4],
}

fn sample_pose(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Option<Pose> {
    let n = f64::from(spec.image_size);
    let body = Ellipse {
        cx: n * (0.5 + rng.random_range(-0.04..0.04)),
        cy: n * (0.5 + rng.random_range(-0.04..0.04)),
        a: n * rng.random_range(0.38..0.45),
        b: n * rng.random_range(0.28..0.36),
        theta: rng.random_range(-0.15..0.15),
    };
    let spine = Ellipse {
        cx: body.cx,
        cy: body.cy + body.b * 0.6,
        a: n * 0.06,
        b: n * 0.06,
        theta: 0.0,
    };
    let (lo, hi) = spec.liver_radius_range;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let liver = Ellipse {
            cx: body.cx + rng.random_range(-0.6..0.6) * body.a,
            cy: body.cy + rng.random_range(-0.6..0.4) * body.b,
            a: n * rng.random_range(lo..=hi),
            b: n * rng.random_range(lo..=hi),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let inner = Ellipse {
            a: body.a * 0.92,
            b: body.b * 0.92,
            ..body
        };
        let inside = (0..48).all(|k| {
            let (x, y) = liver.boundary(k, 48);
            inner.contains(x, y) && !spine.contains(x, y)
        });
        if inside {
            let bias = [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
            return Some(Pose {
                body,
                spine,
                liver,
                bias,
            });
        }
    }
    None
}

fn render(
    rng: &mut ChaCha8Rng,
    spec: &PhantomSpec,
    pose: &Pose,
    noise: &Normal<f64>,
) -> (Vec<f64>, Vec<u8>) {
    let n = spec.image_size as usize;
    let mut img = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let liver = pose.liver.contains(px, py);
            let tissue: f64 = if liver {
                0.62
            } else if pose.spine.contains(px, py) {
                0.88
            } else if pose.body.contains(px, py) {
                0.32
            } else {
                0.02
            };
            let v = match spec.modality_contrast {
                ContrastStyle::A => tissue,
                ContrastStyle::B => {
                    let (u, w) = (px / n as f64 - 0.5, py / n as f64 - 0.5);
                    let [bx, by, bq, phase] = pose.bias;
                    let field = 1.0 + bx * u + by * w + bq * (std::f64::consts::TAU * (u + w) + phase).sin();
                    0.85 * tissue.powf(0.45) * field
                }
            };
            img.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            mask.push(u8::from(liver));
        }
    }
    (img, mask)
}

/// Writes `spec.n_slices` phantom slices under `out_dir`. Output is a pure
/// function of `(spec, seed)`.
pub fn generate_phantom_dataset(spec: &PhantomSpec, seed: u64, out_dir: &Path) -> Result<PhantomOutcome> {
    spec.validate()?;
    ensure_dir(&out_dir.join(IMAGES_DIR))?;
    ensure_dir(&out_dir.join(MASKS_DIR))?;
    let modality = spec.modality_contrast.modality();
    let bit_depth = modality.default_bit_depth();
    let max = f64::from((1u32 << bit_depth) - 1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::new(out_dir, modality);
    manifest.seed = Some(seed);
    let mut regenerations = 0;

    for i in 0..spec.n_slices {
        let id = format!("phantom_{i:04}");
        let mut attempts = 0;
        let pose = loop {
            if let Some(p) = sample_pose(&mut rng, spec) {
                break p;
            }
            regenerations += 1;
            attempts += 1;
            log::debug!("phantom {id}: liver did not fit, regenerating pose");
            if attempts > MAX_POSE_REGENERATIONS {
                return Err(Error::InvalidInput(format!(
                    "phantom {id}: could not place the liver inside the body"
                )));
            }
        };
        let (img, mask) = render(&mut rng, spec, &pose, &noise);
        let raw = RawSlice {
            width: spec.image_size,
            height: spec.image_size,
            data: img.iter().map(|v| (v * max).round() as u16).collect(),
        };
        let image_rel = PathBuf::from(IMAGES_DIR).join(format!("{id}.png"));
        let mask_rel = PathBuf::from(MASKS_DIR).join(format!("{id}.png"));
        write_gray16_png(out_dir.join(&image_rel), &raw)?;
        write_mask_png(out_dir.join(&mask_rel), spec.image_size, spec.image_size, &mask)?;
        manifest.entries.push(SliceEntry {
            id: id.clone(),
            image_path: image_rel,
            mask_path: Some(mask_rel),
            width: spec.image_size,
            height: spec.image_size,
            source_bit_depth: bit_depth,
            liver_visible: mask.contains(&1),
            subject_id: id,
            synthetic: false,
        });
    }
    if regenerations > 0 {
        log::info!("phantom generation regenerated {regenerations} pose(s)");
    }
    manifest.save()?;
    Ok(PhantomOutcome {
        manifest,
        regenerations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = walk(dir);
        files.sort();
        files
            .into_iter()
            .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
            .collect()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(64, 20, ContrastStyle::A);
        let m1 = generate_phantom_dataset(&spec, 7, d1.path()).unwrap().manifest;
        let m2 = generate_phantom_dataset(&spec, 7, d2.path()).unwrap().manifest;
        assert_eq!(m1.entries, m2.entries);
        assert_eq!(read_all(d1.path()), read_all(d2.path()));
    }

    #[test]
    fn every_entry_visible_and_manifest_valid() {
        let d = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(32, 6, ContrastStyle::B);
        let m = generate_phantom_dataset(&spec, 3, d.path()).unwrap().manifest;
        assert_eq!(m.modality, Modality::BMr);
        assert!(m.entries.iter().all(|e| e.liver_visible && e.source_bit_depth == 12));
        assert!(m.validate().is_empty(), "{:?}", m.validate());
    }

    #[test]
    fn a_style_liver_is_brighter_than_body() {
        let d = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(64, 20, ContrastStyle::A);
        let m = generate_phantom_dataset(&spec, 11, d.path()).unwrap().manifest;
        let (mut liver, mut nl, mut body, mut nb) = (0.0f64, 0usize, 0.0f64, 0usize);
        for e in &m.entries {
            let s = m.load_slice(e).unwrap();
            let mask = s.mask.as_ref().unwrap();
            for (p, &k) in s.pixels.iter().zip(mask) {
                // body background: inside the body but outside the liver
                if k == 1 {
                    liver += f64::from(*p);
                    nl += 1;
                } else if *p > -0.6 && *p < 0.0 {
                    body += f64::from(*p);
                    nb += 1;
                }
            }
        }
        assert!(liver / nl as f64 > body / nb as f64 + 0.2);
    }

    #[test]
    fn rejects_tiny_images() {
        let d = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::new(8, 1, ContrastStyle::A);
        assert!(generate_phantom_dataset(&spec, 0, d.path()).is_err());
    }
}
