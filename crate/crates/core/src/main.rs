use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xmod::config::{apply_deterministic_env, load_config, validate_config, ExperimentConfig};
use xmod::dataset::{generate_phantom_dataset, prepare_dataset, ContrastStyle, LabelRange, Modality, PhantomSpec, PrepOptions};
use xmod::evaluation::{
    arrangement_label, evaluate_segmentation_with_roc, reproduce_tables, MetricsReport, SynthesisSource, DEFAULT_THRESHOLD,
};
use xmod::models::{analytic_parameter_count, format_layer_table, layer_table, ArchConfig};
use xmod::pipeline::{load_dataset, run_pipeline};
use xmod::training::{synthesize_with_stats, train_essnet, train_unet, Stage, TrainingRun};
use xmod::{Error, Result};

#[derive(Parser)]
#[command(name = "xmod", version, about = "CT to MR synthesis and liver segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Txt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Essnet,
    Cyclegan,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw grayscale slices and label images into a dataset directory.
    Prep {
        #[arg(long)]
        src: PathBuf,
        /// ct or mr
        #[arg(long)]
        modality: Modality,
        /// Label intensity band selecting the liver, LO:HI (default per modality).
        #[arg(long)]
        liver_range: Option<LabelRange>,
        #[arg(long, default_value_t = xmod::dataset::CANONICAL_SIZE)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic phantom dataset.
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// a (CT-like) or b (MR-like)
        #[arg(long)]
        style: ContrastStyle,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer tables and parameter totals of the configured networks.
    Summary {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the synthesis networks.
    TrainEssnet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_a: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the segmentation branch (plain cycle GAN).
        #[arg(long)]
        ablation_no_seg: bool,
    },
    /// Translate the A dataset with a trained A→B generator.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_a: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a U-Net on real (plus optionally synthetic) slices.
    TrainUnet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Number of synthetic slices to add (default: all).
        #[arg(long, requires = "synthetic")]
        take: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a U-Net checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ROC curve as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Row label; derived from the training record when omitted.
        #[arg(long)]
        label: Option<String>,
        /// Origin of the synthetic training slices.
        #[arg(long, value_enum, default_value_t = Source::Essnet)]
        synthesis: Source,
    },
    /// Tabulate metric reports.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Txt)]
        format: Format,
    },
    /// Run every stage for a config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file; prints one diagnostic per line.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print_summary(cfg: &ExperimentConfig) -> Result<()> {
    let e = cfg.essnet_train_config();
    let s = cfg.image_size as usize;
    let nets = [
        ("G1 / G2 (generator)", ArchConfig::Generator(e.generator_config())),
        ("S (segmentor)", ArchConfig::Generator(e.segmentor_config())),
        ("D1 / D2 (discriminator)", ArchConfig::Discriminator(e.discriminator_config())),
        ("U-Net", ArchConfig::UNet(cfg.unet_train_config().model_config())),
    ];
    let mut counts = Vec::new();
    for (title, arch) in &nets {
        println!("{}", format_layer_table(title, &layer_table(arch, s, s)?));
        counts.push(analytic_parameter_count(arch));
    }
    let (g, seg, d, u) = (counts[0], counts[1], counts[2], counts[3]);
    println!("synthesis networks, G1+G2+D1+D2: {}", 2 * g + 2 * d);
    println!("synthesis networks with S:       {}", 2 * g + seg + 2 * d);
    println!("U-Net:                           {u}");
    Ok(())
}

/// Fills arrangement fields from the `run.json` next to a U-Net checkpoint.
fn annotate(report: &mut MetricsReport, ckpt: &Path, source: Source, label: Option<String>) {
    let candidates = [Some(ckpt), ckpt.parent().and_then(Path::parent)];
    let run = candidates
        .into_iter()
        .flatten()
        .find_map(|d| TrainingRun::load(d).ok().filter(|r| r.stage == Stage::Unet));
    if let Some(run) = &run {
        let n = |k: &str| run.config.get(k).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        report.n_real = n("real_images");
        report.n_synthetic = n("synthetic_images");
        report.run_id = run.run_id.clone();
    }
    if report.n_synthetic > 0 {
        report.synthesis = match source {
            Source::Essnet => SynthesisSource::Essnet,
            Source::Cyclegan => SynthesisSource::Cyclegan,
        };
    }
    report.arrangement = label.unwrap_or_else(|| arrangement_label(report.n_real, report.n_synthetic));
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prep {
            src,
            modality,
            liver_range,
            size,
            out,
        } => {
            let mut opts = PrepOptions::new(src, modality, out);
            if let Some(r) = liver_range {
                opts.liver_range = r;
            }
            opts.target_size = size;
            let outcome = prepare_dataset(&opts)?;
            for e in &outcome.errors {
                eprintln!("skipped {}: {}", e.id, e.reason);
            }
            println!(
                "{} slices ({} liver-visible), {} skipped",
                outcome.manifest.entries.len(),
                outcome.manifest.liver_visible().count(),
                outcome.errors.len()
            );
        }
        Command::Phantom {
            size,
            count,
            style,
            seed,
            out,
        } => {
            let o = generate_phantom_dataset(&PhantomSpec::new(size, count, style), seed, &out)?;
            println!("{} phantom slices written to {}", o.manifest.entries.len(), out.display());
        }
        Command::Summary { config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::defaults(None),
            };
            print_summary(&cfg)?;
        }
        Command::TrainEssnet {
            config,
            data_a,
            data_b,
            out,
            ablation_no_seg,
        } => {
            let mut cfg = load_config(&config)?.essnet_train_config();
            cfg.ablation_no_seg |= ablation_no_seg;
            let a = load_dataset(&data_a, "A", Modality::ACt)?;
            let b = load_dataset(&data_b, "B", Modality::BMr)?;
            let run = train_essnet(&cfg, &a, &b, &out)?;
            println!("{} steps; log {}", run.steps, run.loss_log.display());
        }
        Command::Synthesize { ckpt, data_a, out } => {
            let a = load_dataset(&data_a, "A", Modality::ACt)?;
            let o = synthesize_with_stats(&ckpt, &a, &out)?;
            println!("{} synthetic slices, {:.1} frames/s", o.manifest.entries.len(), o.frames_per_second);
        }
        Command::TrainUnet {
            config,
            real,
            synthetic,
            take,
            out,
        } => {
            let cfg = load_config(&config)?.unet_train_config();
            let real = load_dataset(&real, "real", Modality::BMr)?;
            let synth = synthetic.map(|p| load_dataset(&p, "synthetic", Modality::BMr)).transpose()?;
            let run = train_unet(&cfg, &real, synth.as_ref(), take, &out)?;
            println!("{} steps; log {}", run.steps, run.loss_log.display());
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            roc,
            threshold,
            label,
            synthesis,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
            }
            let test = load_dataset(&data, "test", Modality::BMr)?;
            let (mut report, curve) = evaluate_segmentation_with_roc(&ckpt, &test, threshold)?;
            annotate(&mut report, &ckpt, synthesis, label);
            write(&out, &report.to_json())?;
            if let (Some(path), Some(curve)) = (roc, curve) {
                write(&path, &curve.to_csv())?;
            }
            let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!("{}: Dice {:.4}  IoU {:.4}  AUC {auc}", report.arrangement, report.dice, report.iou);
        }
        Command::Report { runs, format } => {
            let reports = runs.iter().map(|p| MetricsReport::load(p)).collect::<Result<Vec<_>>>()?;
            let t = reproduce_tables(&reports)?;
            match format {
                Format::Csv => {
                    print!("{}", t.arrangements_csv);
                    if let Some(c) = t.ablation_csv {
                        print!("\n{c}");
                    }
                }
                Format::Txt => {
                    print!("{}", t.arrangements_text);
                    if let Some(c) = t.ablation_text {
                        print!("\n{c}");
                    }
                }
            }
        }
        Command::Pipeline { .. } | Command::Validate { .. } => unreachable!("handled in main"),
    }
    Ok(())
}

fn main() -> ExitCode {
    apply_deterministic_env();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { config } => {
            let diags = validate_config(&config);
            for d in &diags {
                println!("{d}");
            }
            if diags.is_empty() {
                0
            } else {
                2
            }
        }
        Command::Pipeline { config, out } => match run_pipeline(&config, &out) {
            Ok(o) => {
                print!("{}", o.tables.arrangements_text);
                println!("run directory: {}", o.run_dir.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        cmd => match run(cmd) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
