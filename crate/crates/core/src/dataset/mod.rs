//! Canonical on-disk datasets of 2-D slices.
//!
//! A dataset root looks like
//!
//! ```text
//! <root>/manifest.json      schema_version, modality, entries[]
//! <root>/images/<id>.png    16-bit grayscale, raw integer intensities
//! <root>/masks/<id>.png     8-bit grayscale, liver = 255, background = 0
//! ```
//!
//! Raw intensities are kept as integers on disk together with their source
//! bit depth; [`normalize_slice`] maps them into `[-1, 1]` when a slice is
//! loaded.

mod io;
mod normalize;
mod phantom;
mod prepare;
mod sampler;

pub use io::{decode_gray_png, read_gray_png, write_gray16_png, write_mask_png, RawSlice};
pub use normalize::{denormalize_slice, denormalize_value, normalize_slice, resample_slice};
pub use phantom::{generate_phantom_dataset, ContrastStyle, PhantomOutcome, PhantomSpec};
pub use prepare::{prepare_dataset, LabelRange, PrepOptions, PrepOutcome, SliceError};
pub use sampler::{
    derive_seed, sample_unpaired_batch, EpochShuffler, SamplerState, StreamCursor, UnpairedSampler,
};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

/// Working resolution every slice is brought to on ingestion.
pub const CANONICAL_SIZE: u32 = 256;

pub fn tool_version() -> String {
    format!("xmod {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "A_CT")]
    ACt,
    #[serde(rename = "B_MR")]
    BMr,
}

impl Modality {
    /// Bit depth assumed for 16-bit containers of this modality.
    pub fn default_bit_depth(self) -> u8 {
        match self {
            Modality::ACt => 16,
            Modality::BMr => 12,
        }
    }

    /// Label intensity band selecting the liver.
    pub fn default_liver_range(self) -> LabelRange {
        match self {
            Modality::ACt => LabelRange { lo: 1, hi: 255 },
            Modality::BMr => LabelRange { lo: 55, hi: 70 },
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" | "a" | "a_ct" => Ok(Modality::ACt),
            "mr" | "mri" | "b" | "b_mr" => Ok(Modality::BMr),
            other => Err(Error::InvalidInput(format!(
                "unknown modality `{other}` (expected ct or mr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub source_bit_depth: u8,
    pub liver_visible: bool,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl SliceEntry {
    /// Eligible for training and evaluation by default: liver visible, or
    /// unlabeled (nothing says the liver is absent).
    pub fn is_trainable(&self) -> bool {
        self.liver_visible || self.mask_path.is_none()
    }

    fn check_fields(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("entry with empty id".into());
        }
        if ![8u8, 12, 16].contains(&self.source_bit_depth) {
            return Err(format!(
                "entry {}: source_bit_depth {} not in {{8, 12, 16}}",
                self.id, self.source_bit_depth
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(format!("entry {}: zero-sized slice", self.id));
        }
        for p in std::iter::once(&self.image_path).chain(self.mask_path.as_ref()) {
            if p.is_absolute() || p.components().any(|c| c == std::path::Component::ParentDir) {
                return Err(format!(
                    "entry {}: path {} escapes the dataset root",
                    self.id,
                    p.display()
                ));
            }
        }
        Ok(())
    }
}

/// Index of a canonical dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Set from the directory the manifest was loaded from; not serialized.
    #[serde(skip)]
    pub root_path: PathBuf,
    pub modality: Modality,
    pub entries: Vec<SliceEntry>,
    pub created_by: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, modality: Modality) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            root_path: root.into(),
            modality,
            entries: Vec::new(),
            created_by: tool_version(),
            seed: None,
        }
    }

    /// Parses manifest JSON and checks the structural invariants that do not
    /// need the filesystem.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut manifest: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::json("manifest.json", e))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "manifest schema_version {} is not supported (expected {})",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        manifest.root_path = root.into();
        manifest.check_structure().map_err(Error::Data)?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text, root)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root_path).map_err(|e| Error::io(&self.root_path, e))?;
        let path = self.root_path.join(MANIFEST_FILE);
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }

    fn check_structure(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            e.check_fields()?;
            if !seen.insert(e.id.as_str()) {
                return Err(format!("duplicate entry id `{}`", e.id));
            }
        }
        Ok(())
    }

    /// Full invariant check against the files on disk. Returns one message
    /// per violation.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if let Err(msg) = self.check_structure() {
            problems.push(msg);
        }
        for e in &self.entries {
            let img_path = self.root_path.join(&e.image_path);
            let img = match read_gray_png(&img_path) {
                Ok((raw, _)) => raw,
                Err(err) => {
                    problems.push(format!("entry {}: {err}", e.id));
                    continue;
                }
            };
            if (img.width, img.height) != (e.width, e.height) {
                problems.push(format!(
                    "entry {}: image is {}x{}, manifest says {}x{}",
                    e.id, img.width, img.height, e.width, e.height
                ));
            }
            match &e.mask_path {
                Some(mp) => match read_gray_png(self.root_path.join(mp)) {
                    Ok((mask, _)) => {
                        if (mask.width, mask.height) != (img.width, img.height) {
                            problems.push(format!("entry {}: mask and image sizes differ", e.id));
                        }
                        let nonempty = mask.data.iter().any(|&v| v > 0);
                        if nonempty != e.liver_visible {
                            problems.push(format!(
                                "entry {}: liver_visible={} but mask {} foreground",
                                e.id,
                                e.liver_visible,
                                if nonempty { "has" } else { "has no" }
                            ));
                        }
                    }
                    Err(err) => problems.push(format!("entry {}: {err}", e.id)),
                },
                None if e.liver_visible => problems.push(format!(
                    "entry {}: liver_visible without a mask",
                    e.id
                )),
                None => {}
            }
        }
        problems
    }

    pub fn liver_visible(&self) -> impl Iterator<Item = &SliceEntry> {
        self.entries.iter().filter(|e| e.liver_visible)
    }

    pub fn entry(&self, id: &str) -> Option<&SliceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Reads and normalizes one entry. The mask, when present, is binarized
    /// (any nonzero pixel is foreground).
    pub fn load_slice(&self, entry: &SliceEntry) -> Result<ImageSlice> {
        let (raw, _) = read_gray_png(self.root_path.join(&entry.image_path))?;
        let pixels = normalize_slice(&raw, entry.source_bit_depth, &entry.id)?;
        let mask = match &entry.mask_path {
            Some(mp) => {
                let (m, _) = read_gray_png(self.root_path.join(mp))?;
                if (m.width, m.height) != (raw.width, raw.height) {
                    return Err(Error::Data(format!(
                        "entry {}: mask and image sizes differ",
                        entry.id
                    )));
                }
                Some(m.data.iter().map(|&v| u8::from(v > 0)).collect())
            }
            None => None,
        };
        ImageSlice::new(entry.id.clone(), raw.width, raw.height, pixels, mask)
    }

    /// Loads every entry matching `keep`, resampled to `size` when given.
    pub fn load_slices(
        &self,
        keep: impl Fn(&SliceEntry) -> bool,
        size: Option<u32>,
    ) -> Result<Vec<ImageSlice>> {
        self.entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| {
                let s = self.load_slice(e)?;
                Ok(match size {
                    Some(t) if t != s.width || t != s.height => resample_slice(&s, t)?,
                    _ => s,
                })
            })
            .collect()
    }
}

/// One normalized single-channel slice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl ImageSlice {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<f32>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        let id = id.into();
        let n = width as usize * height as usize;
        if n == 0 {
            return Err(Error::InvalidInput(format!("slice {id}: zero-sized")));
        }
        if pixels.len() != n {
            return Err(Error::Shape(format!(
                "slice {id}: {} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "slice {id}: pixel value {v} outside [-1, 1]"
            )));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::Shape(format!("slice {id}: mask size mismatch")));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput(format!("slice {id}: mask is not binary")));
            }
        }
        Ok(Self {
            id,
            width,
            height,
            pixels,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&v| v == 1).count())
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> SliceEntry {
        SliceEntry {
            id: id.into(),
            image_path: format!("images/{id}.png").into(),
            mask_path: Some(format!("masks/{id}.png").into()),
            width: 4,
            height: 4,
            source_bit_depth: 16,
            liver_visible: true,
            subject_id: "s0".into(),
            synthetic: false,
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let mut m = DatasetManifest::new("/tmp/x", Modality::BMr);
        m.entries.push(entry("a"));
        let mut e = entry("b");
        e.synthetic = true;
        e.mask_path = None;
        e.liver_visible = false;
        m.entries.push(e);
        m.seed = Some(9);
        let back = DatasetManifest::from_json(&m.to_json(), "/tmp/x").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = DatasetManifest::new("/tmp/x", Modality::ACt);
        m.entries.push(entry("a"));
        m.entries.push(entry("a"));
        assert!(DatasetManifest::from_json(&m.to_json(), "/tmp/x").is_err());
    }

    #[test]
    fn bad_bit_depth_and_escaping_paths_rejected() {
        let mut m = DatasetManifest::new("/tmp/x", Modality::ACt);
        let mut e = entry("a");
        e.source_bit_depth = 10;
        m.entries.push(e);
        assert!(DatasetManifest::from_json(&m.to_json(), "/tmp/x").is_err());

        let mut m = DatasetManifest::new("/tmp/x", Modality::ACt);
        let mut e = entry("a");
        e.image_path = "../../etc/passwd".into();
        m.entries.push(e);
        assert!(DatasetManifest::from_json(&m.to_json(), "/tmp/x").is_err());
    }

    #[test]
    fn modality_serializes_with_spec_names() {
        assert_eq!(serde_json::to_string(&Modality::ACt).unwrap(), "\"A_CT\"");
        assert_eq!(serde_json::to_string(&Modality::BMr).unwrap(), "\"B_MR\"");
    }

    #[test]
    fn image_slice_rejects_out_of_range_and_non_binary() {
        assert!(ImageSlice::new("x", 2, 1, vec![0.0, 1.5], None).is_err());
        assert!(ImageSlice::new("x", 2, 1, vec![0.0, 0.5], Some(vec![0, 2])).is_err());
        assert!(ImageSlice::new("x", 2, 1, vec![-1.0, 1.0], Some(vec![0, 1])).is_ok());
    }
}
