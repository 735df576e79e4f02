//! Ingestion of per-slice raster exports into the canonical layout.
//!
//! Accepted source layouts (PNG only; DICOM series are converted beforehand):
//!
//! ```text
//! <src>/images/<stem>.png  +  <src>/labels/<stem>.png            one subject
//! <src>/<subject>/images/<stem>.png  +  <src>/<subject>/labels/<stem>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    denormalize_slice, ensure_dir, normalize_slice, read_gray_png, resample_slice, write_gray16_png,
    write_mask_png, DatasetManifest, ImageSlice, Modality, SliceEntry, CANONICAL_SIZE, IMAGES_DIR,
    MASKS_DIR,
};
use crate::error::{Error, Result};

/// Closed label-intensity interval selecting liver pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRange {
    pub lo: u16,
    pub hi: u16,
}

impl LabelRange {
    pub fn contains(&self, v: u16) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

impl FromStr for LabelRange {
    type Err = Error;

    /// Parses `LO:HI`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("label range `{s}` is not of the form LO:HI"));
        let (lo, hi) = s.trim().split_once(':').ok_or_else(bad)?;
        let lo: u16 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u16 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(Error::InvalidInput(format!(
                "label range `{s}`: lower bound exceeds upper bound"
            )));
        }
        Ok(LabelRange { lo, hi })
    }
}

#[derive(Clone, Debug)]
pub struct PrepOptions {
    pub source_dir: PathBuf,
    pub modality: Modality,
    pub liver_range: LabelRange,
    pub out_dir: PathBuf,
    /// Square working size; slices of other sizes are resampled.
    pub target_size: u32,
}

impl PrepOptions {
    pub fn new(source_dir: impl Into<PathBuf>, modality: Modality, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            source_dir: source_dir.into(),
            modality,
            liver_range: modality.default_liver_range(),
            out_dir: out_dir.into(),
            target_size: CANONICAL_SIZE,
        }
    }
}

/// A slice that was skipped during ingestion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceError {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PrepOutcome {
    pub manifest: DatasetManifest,
    pub errors: Vec<SliceError>,
}

struct SourceSlice {
    subject: String,
    stem: String,
    image: PathBuf,
    labels_dir: PathBuf,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn collect_subject(subject: &str, dir: &Path, out: &mut Vec<SourceSlice>) -> Result<()> {
    for image in sorted_dir(&dir.join("images"))? {
        if !is_png(&image) {
            continue;
        }
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(SourceSlice {
            subject: subject.to_string(),
            stem,
            image,
            labels_dir: dir.join("labels"),
        });
    }
    Ok(())
}

fn discover(source_dir: &Path) -> Result<Vec<SourceSlice>> {
    if !source_dir.is_dir() {
        return Err(Error::Data(format!(
            "source directory {} does not exist",
            source_dir.display()
        )));
    }
    let mut slices = Vec::new();
    if source_dir.join("images").is_dir() {
        let subject = source_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "0".into());
        collect_subject(&subject, source_dir, &mut slices)?;
    } else {
        for sub in sorted_dir(source_dir)? {
            if sub.join("images").is_dir() {
                let subject = sub
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                collect_subject(&subject, &sub, &mut slices)?;
            }
        }
    }
    Ok(slices)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn ingest_one(src: &SourceSlice, id: &str, opts: &PrepOptions) -> std::result::Result<SliceEntry, String> {
    let (raw, container_depth) = read_gray_png(&src.image).map_err(|e| e.to_string())?;
    let label_path = src.labels_dir.join(format!("{}.png", src.stem));
    if !label_path.is_file() {
        return Err(format!("missing label file {}", label_path.display()));
    }
    let (label, _) = read_gray_png(&label_path).map_err(|e| e.to_string())?;
    if (label.width, label.height) != (raw.width, raw.height) {
        return Err(format!(
            "label is {}x{} but image is {}x{}",
            label.width, label.height, raw.width, raw.height
        ));
    }
    let bit_depth = if container_depth == 8 { 8 } else { opts.modality.default_bit_depth() };
    let pixels = normalize_slice(&raw, bit_depth, id).map_err(|e| e.to_string())?;
    let mask: Vec<u8> = label.data.iter().map(|&v| u8::from(opts.liver_range.contains(v))).collect();
    let mut slice = ImageSlice::new(id, raw.width, raw.height, pixels, Some(mask)).map_err(|e| e.to_string())?;
    if (slice.width, slice.height) != (opts.target_size, opts.target_size) {
        slice = resample_slice(&slice, opts.target_size).map_err(|e| e.to_string())?;
    }

    let image_rel = PathBuf::from(IMAGES_DIR).join(format!("{id}.png"));
    let mask_rel = PathBuf::from(MASKS_DIR).join(format!("{id}.png"));
    write_gray16_png(opts.out_dir.join(&image_rel), &denormalize_slice(&slice, bit_depth))
        .map_err(|e| e.to_string())?;
    let mask = slice.mask.as_deref().unwrap_or_default();
    write_mask_png(opts.out_dir.join(&mask_rel), slice.width, slice.height, mask).map_err(|e| e.to_string())?;

    Ok(SliceEntry {
        id: id.to_string(),
        image_path: image_rel,
        mask_path: Some(mask_rel),
        width: slice.width,
        height: slice.height,
        source_bit_depth: bit_depth,
        liver_visible: mask.contains(&1),
        subject_id: src.subject.clone(),
        synthetic: false,
    })
}

/// Converts a source tree into the canonical layout. Every ingested slice is
/// listed; `liver_visible` marks slices whose binarized mask is nonempty.
/// Slices with a missing or mismatched label are reported in
/// [`PrepOutcome::errors`] (and `prep_errors.json`) and left out.
pub fn prepare_dataset(opts: &PrepOptions) -> Result<PrepOutcome> {
    if opts.target_size == 0 {
        return Err(Error::InvalidInput("target size must be > 0".into()));
    }
    let sources = discover(&opts.source_dir)?;
    if sources.is_empty() {
        return Err(Error::Data(format!(
            "no slices found under {}",
            opts.source_dir.display()
        )));
    }
    ensure_dir(&opts.out_dir.join(IMAGES_DIR))?;
    ensure_dir(&opts.out_dir.join(MASKS_DIR))?;

    let mut manifest = DatasetManifest::new(&opts.out_dir, opts.modality);
    let mut errors = Vec::new();
    for src in &sources {
        let id = format!("{}_{}", sanitize(&src.subject), sanitize(&src.stem));
        match ingest_one(src, &id, opts) {
            Ok(entry) => manifest.entries.push(entry),
            Err(reason) => {
                log::warn!("skipping slice {id}: {reason}");
                errors.push(SliceError { id, reason });
            }
        }
    }
    manifest.save()?;
    let err_path = opts.out_dir.join("prep_errors.json");
    if errors.is_empty() {
        let _ = fs::remove_file(&err_path);
    } else {
        let text = serde_json::to_string_pretty(&errors).map_err(|e| Error::json("prep_errors", e))?;
        fs::write(&err_path, text).map_err(|e| Error::io(&err_path, e))?;
    }
    Ok(PrepOutcome { manifest, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{write_gray16_png, RawSlice};
    use image::{ImageBuffer, Luma};

    fn write_label(path: &Path, w: u32, h: u32, data: Vec<u8>) {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w, h, data).unwrap();
        buf.save(path).unwrap();
    }

    fn write_source(root: &Path, stem: &str, w: u32, label: Option<(u32, Vec<u8>)>) {
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("labels")).unwrap();
        let raw = RawSlice {
            width: w,
            height: w,
            data: (0..w * w).map(|i| (i * 13 % 4096) as u16).collect(),
        };
        write_gray16_png(root.join("images").join(format!("{stem}.png")), &raw).unwrap();
        if let Some((lw, data)) = label {
            write_label(&root.join("labels").join(format!("{stem}.png")), lw, lw, data);
        }
    }

    #[test]
    fn label_range_parses() {
        assert_eq!("55:70".parse::<LabelRange>().unwrap(), LabelRange { lo: 55, hi: 70 });
        assert!("70:55".parse::<LabelRange>().is_err());
        assert!("55-70".parse::<LabelRange>().is_err());
        assert!(":".parse::<LabelRange>().is_err());
    }

    #[test]
    fn all_background_label_gives_one_invisible_entry() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_source(src.path(), "s1", 8, Some((8, vec![0; 64])));
        let mut opts = PrepOptions::new(src.path(), Modality::BMr, out.path());
        opts.target_size = 8;
        let res = prepare_dataset(&opts).unwrap();
        assert_eq!(res.manifest.entries.len(), 1);
        assert!(!res.manifest.entries[0].liver_visible);
        assert!(res.errors.is_empty());
        assert!(res.manifest.validate().is_empty());
    }

    #[test]
    fn mr_liver_band_selected_and_bad_slices_skipped() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let root = src.path().join("subj7");
        let mut label = vec![0u8; 64];
        label[10] = 63; // liver band
        label[11] = 126; // another organ
        write_source(&root, "a", 8, Some((8, label)));
        write_source(&root, "b", 8, None);
        write_source(&root, "c", 8, Some((4, vec![0; 16])));
        let mut opts = PrepOptions::new(src.path(), Modality::BMr, out.path());
        opts.target_size = 16;
        let res = prepare_dataset(&opts).unwrap();
        assert_eq!(res.manifest.entries.len(), 1);
        assert_eq!(res.errors.len(), 2);
        let e = &res.manifest.entries[0];
        assert_eq!(e.id, "subj7_a");
        assert_eq!(e.subject_id, "subj7");
        assert_eq!(e.source_bit_depth, 12);
        assert_eq!((e.width, e.height), (16, 16));
        assert!(e.liver_visible);
        let s = res.manifest.load_slice(e).unwrap();
        assert_eq!(s.foreground_count(), 4); // one source pixel -> 2x2 after upsampling
        assert!(out.path().join("prep_errors.json").is_file());
        assert!(res.manifest.validate().is_empty());
    }

    #[test]
    fn empty_source_is_fatal() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let opts = PrepOptions::new(src.path(), Modality::ACt, out.path());
        assert!(prepare_dataset(&opts).is_err());
    }
}
