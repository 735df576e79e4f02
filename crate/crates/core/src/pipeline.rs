//! End-to-end run: data check, synthesis training, synthesis, the U-Net
//! sweep over arrangements, evaluation and tables.
//!
//! Layout under `<out_root>/<run_id>/`:
//! `config.json`, `data/` (phantoms only), `split.json`, `essnet/`,
//! `synth/`, `unet_<N>/`, `reports/`. A stage whose `DONE` marker exists is
//! skipped on re-runs; training stages also resume from their checkpoints.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, ExperimentConfig};
use crate::dataset::{
    derive_seed, generate_phantom_dataset, ContrastStyle, DatasetManifest, Modality, PhantomSpec, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    arrangement_label, evaluate_segmentation_with_roc, reproduce_tables, MetricsReport, SynthesisSource, Tables,
    DEFAULT_THRESHOLD,
};
use crate::training::{synthesize, train_essnet, train_unet};

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const LOCK_FILE: &str = "pipeline.lock";
pub const DONE_MARKER: &str = "DONE";
pub const REPORTS_DIR: &str = "reports";
pub const OBSERVATION_FILE: &str = "observation.txt";

const STREAM_SPLIT: u64 = 0x5350_4C54;
const STREAM_PHANTOM_A: u64 = 0x5048_4141;
const STREAM_PHANTOM_B: u64 = 0x5048_4142;

/// A failed pipeline stage.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error}")]
pub struct PipelineError {
    pub stage: String,
    #[source]
    pub error: Error,
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

trait StageResult<T> {
    fn stage(self, name: &str) -> std::result::Result<T, PipelineError>;
}

impl<T> StageResult<T> for Result<T> {
    fn stage(self, name: &str) -> std::result::Result<T, PipelineError> {
        self.map_err(|error| PipelineError {
            stage: name.to_string(),
            error,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub tables: Tables,
    /// Stages skipped because their artifacts were already complete.
    pub skipped: Vec<String>,
}

struct RunLock {
    _file: File,
}

fn acquire_lock(run_dir: &Path) -> Result<RunLock> {
    let path = run_dir.join(LOCK_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    match file.try_lock() {
        Ok(()) => Ok(RunLock { _file: file }),
        Err(std::fs::TryLockError::WouldBlock) => Err(Error::Config(format!(
            "{} is in use by another pipeline process",
            run_dir.display()
        ))),
        Err(std::fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
    }
}

fn is_done(dir: &Path) -> bool {
    dir.join(DONE_MARKER).is_file()
}

fn mark_done(dir: &Path) -> Result<()> {
    let p = dir.join(DONE_MARKER);
    std::fs::write(&p, "done\n").map_err(|e| Error::io(&p, e))
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a prepared dataset and checks it against the files on disk.
pub fn load_dataset(dir: &Path, side: &str, modality: Modality) -> Result<DatasetManifest> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::Data(format!(
            "{side} dataset {} has no {MANIFEST_FILE}; run `xmod prep` on the raw slices first",
            dir.display()
        )));
    }
    let m = DatasetManifest::load(dir)?;
    if m.modality != modality {
        return Err(Error::Data(format!("{side} dataset {} has modality {:?}, expected {modality:?}", dir.display(), m.modality)));
    }
    let problems = m.validate();
    if !problems.is_empty() {
        let shown: Vec<&str> = problems.iter().take(5).map(String::as_str).collect();
        return Err(Error::Data(format!(
            "{side} dataset {}: {} problem(s): {}",
            dir.display(),
            problems.len(),
            shown.join("; ")
        )));
    }
    Ok(m)
}

fn phantom_dataset(cfg: &ExperimentConfig, dir: &Path, style: ContrastStyle, count: usize, stream: u64) -> Result<DatasetManifest> {
    if is_done(dir) {
        return DatasetManifest::load(dir);
    }
    let spec = PhantomSpec::new(cfg.image_size, count, style);
    let out = generate_phantom_dataset(&spec, derive_seed(cfg.seed, stream, 0), dir)?;
    mark_done(dir)?;
    Ok(out.manifest)
}

/// Loads (or, for phantom configs, generates) the A and B datasets.
pub fn prepare_inputs(cfg: &ExperimentConfig, config_dir: &Path, run_dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    match (&cfg.data.a_dir, &cfg.data.b_dir, &cfg.data.phantom) {
        (Some(a), Some(b), _) => Ok((
            load_dataset(&resolve_path(config_dir, a), "A", Modality::ACt)?,
            load_dataset(&resolve_path(config_dir, b), "B", Modality::BMr)?,
        )),
        (None, None, Some(p)) => {
            let data = run_dir.join("data");
            Ok((
                phantom_dataset(cfg, &data.join("a"), ContrastStyle::A, p.count_a, STREAM_PHANTOM_A)?,
                phantom_dataset(cfg, &data.join("b"), ContrastStyle::B, p.count_b, STREAM_PHANTOM_B)?,
            ))
        }
        _ => Err(Error::Data(
            "no input data: set both data.a_dir and data.b_dir to prepared dataset directories, or data.phantom for synthetic data"
                .into(),
        )),
    }
}

/// Subject-level split of the B dataset: the configured test subjects, or a
/// seeded shuffle holding out `test_fraction` of them (at least one subject
/// on each side).
pub fn split_subjects(cfg: &ExperimentConfig, b: &DatasetManifest) -> Result<SubjectSplit> {
    let mut subjects: Vec<String> = b.entries.iter().map(|e| e.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::Data(format!(
            "B dataset has {} subject(s); a train/test split needs at least 2",
            subjects.len()
        )));
    }
    let test: Vec<String> = match &cfg.data.test_subjects {
        Some(t) => {
            if let Some(s) = t.iter().find(|s| !subjects.contains(s)) {
                return Err(Error::Data(format!("test subject `{s}` is not in the B dataset")));
            }
            let mut t = t.clone();
            t.sort();
            t.dedup();
            t
        }
        None => {
            let n = subjects.len();
            let n_test = ((n as f64 * cfg.data.test_fraction).round() as usize).clamp(1, n - 1);
            let mut shuffled = subjects.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPLIT, 0)));
            let mut t = shuffled[..n_test].to_vec();
            t.sort();
            t
        }
    };
    let train: Vec<String> = subjects.into_iter().filter(|s| !test.contains(s)).collect();
    if train.is_empty() {
        return Err(Error::Data("every B subject is held out for testing".into()));
    }
    Ok(SubjectSplit {
        train_subjects: train,
        test_subjects: test,
    })
}

fn subset(m: &DatasetManifest, subjects: &[String]) -> DatasetManifest {
    let mut out = m.clone();
    out.entries.retain(|e| subjects.contains(&e.subject_id));
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn observation(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let Some(base) = reports.iter().find(|r| r.n_synthetic == 0) else {
        return "no real-only arrangement to compare against\n".into();
    };
    for r in reports.iter().filter(|r| r.n_synthetic > 0) {
        let verdict = if r.dice >= base.dice { "at least as high as" } else { "lower than" };
        out.push_str(&format!(
            "{}: Dice {:.4} is {verdict} {} Dice {:.4} (observational, not a test)\n",
            r.arrangement, r.dice, base.arrangement, base.dice
        ));
    }
    if out.is_empty() {
        out.push_str("no combined arrangement to compare\n");
    }
    out
}

/// Runs every stage for the config at `config_path` under `out_root`.
pub fn run_pipeline(config_path: &Path, out_root: &Path) -> std::result::Result<PipelineOutcome, PipelineError> {
    let cfg = load_config(config_path).stage("config")?;
    let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    run_pipeline_with(&cfg, &config_dir, out_root)
}

/// As [`run_pipeline`] for an already resolved config; relative data paths
/// are taken against `config_dir`.
pub fn run_pipeline_with(
    cfg: &ExperimentConfig,
    config_dir: &Path,
    out_root: &Path,
) -> std::result::Result<PipelineOutcome, PipelineError> {
    let snapshot = cfg.snapshot();
    let run_dir = out_root.join(cfg.run_id());
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e)).stage("setup")?;
    let _lock = acquire_lock(&run_dir).stage("setup")?;
    write_text(&run_dir.join(CONFIG_FILE), &snapshot).stage("setup")?;
    let mut skipped = Vec::new();

    let (data_a, data_b) = prepare_inputs(cfg, config_dir, &run_dir).stage("prep-check")?;
    let split = split_subjects(cfg, &data_b).stage("prep-check")?;
    let split_json = serde_json::to_string_pretty(&split).expect("split serializes") + "\n";
    write_text(&run_dir.join(SPLIT_FILE), &split_json).stage("prep-check")?;
    let b_train = subset(&data_b, &split.train_subjects);
    let b_test = subset(&data_b, &split.test_subjects);
    let n_real = b_train.liver_visible().count();
    log::info!(
        "prep-check: A {} slices, B train {} / test {} slices",
        data_a.entries.len(),
        b_train.entries.len(),
        b_test.entries.len()
    );

    let needs_synthetic = cfg.arrangements.iter().any(|&n| n > 0);
    let essnet_dir = run_dir.join("essnet");
    let synth_dir = run_dir.join("synth");
    let mut synthetic = None;
    if needs_synthetic {
        if is_done(&essnet_dir) {
            skipped.push("essnet".into());
        } else {
            train_essnet(&cfg.essnet_train_config(), &data_a, &b_train, &essnet_dir).stage("essnet")?;
            mark_done(&essnet_dir).stage("essnet")?;
        }
        let manifest = if is_done(&synth_dir) {
            skipped.push("synthesize".into());
            DatasetManifest::load(&synth_dir).stage("synthesize")?
        } else {
            let m = synthesize(&essnet_dir, &data_a, &synth_dir).stage("synthesize")?;
            mark_done(&synth_dir).stage("synthesize")?;
            m
        };
        synthetic = Some(manifest);
    }

    let reports_dir = run_dir.join(REPORTS_DIR);
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e)).stage("evaluate")?;
    let source = if cfg.essnet.ablation_no_seg { SynthesisSource::Cyclegan } else { SynthesisSource::Essnet };
    let mut reports = Vec::new();
    for &n in &cfg.arrangements {
        let name = format!("unet_{n}");
        let dir = run_dir.join(&name);
        if is_done(&dir) {
            skipped.push(name.clone());
        } else {
            let synth = if n > 0 { synthetic.as_ref() } else { None };
            train_unet(&cfg.unet_train_config(), &b_train, synth, (n > 0).then_some(n), &dir).stage(&name)?;
            mark_done(&dir).stage(&name)?;
        }
        let report_path = reports_dir.join(format!("{name}.json"));
        let report = if report_path.is_file() {
            skipped.push(format!("evaluate {name}"));
            MetricsReport::load(&report_path).stage("evaluate")?
        } else {
            let (mut report, roc) = evaluate_segmentation_with_roc(&dir, &b_test, DEFAULT_THRESHOLD).stage("evaluate")?;
            report.run_id = cfg.run_id();
            report.n_real = n_real;
            report.n_synthetic = n;
            report.synthesis = if n > 0 { source } else { SynthesisSource::None };
            report.arrangement = arrangement_label(n_real, n);
            if let Some(roc) = roc {
                write_text(&reports_dir.join(format!("{name}_roc.csv")), &roc.to_csv()).stage("evaluate")?;
            }
            report.save(&report_path).stage("evaluate")?;
            report
        };
        reports.push(report);
    }

    let tables = reproduce_tables(&reports).stage("report")?;
    let mut files = vec![("arrangements.csv", tables.arrangements_csv.clone()), ("arrangements.txt", tables.arrangements_text.clone())];
    if let (Some(c), Some(t)) = (&tables.ablation_csv, &tables.ablation_text) {
        files.push(("ablation.csv", c.clone()));
        files.push(("ablation.txt", t.clone()));
    }
    files.push((OBSERVATION_FILE, observation(&reports)));
    for (f, text) in files {
        write_text(&reports_dir.join(f), &text).stage("report")?;
    }
    Ok(PipelineOutcome {
        run_dir,
        reports,
        tables,
        skipped,
    })
}
