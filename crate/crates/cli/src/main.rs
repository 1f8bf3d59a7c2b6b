use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use motionbev::checks::{self, CheckOptions, Suite};
use motionbev::ingest::{self, load_config, read_labels, read_scan, write_atomic, PipelineConfig};
use motionbev::motion::{FeatureMode, MotionFeatures};
use motionbev::par::Exec;
use motionbev::pipeline::{self, class_color, residual_colors, write_ply};
use motionbev::synth::{self, build_samples, load_dataset, save_params, toy_train, BenchmarkSpec, Split, ToyConfig};

#[derive(Parser)]
#[command(name = "motionbev", version, about = "Polar BEV motion features and moving object segmentation tools")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Complete,
    DelayFree,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Geometry,
    Motion,
    Gradients,
    Loss,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write one motion-feature file per finished frame plus manifest.json.
    Featurize {
        scan_dir: PathBuf,
        pose_file: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "complete")]
        mode: Mode,
    },
    /// Run self-checks; exit status 1 if any fails.
    Check {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Random draws per gradient check.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
    /// Moving-class IoU of predicted label files against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic dataset tree from a scene or benchmark spec.
    Synth {
        spec_file: PathBuf,
        out_dir: PathBuf,
        /// Added to every sequence seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy model on a synthetic dataset tree.
    ToyTrain {
        data_dir: PathBuf,
        config: PathBuf,
        out_model: PathBuf,
        /// Per-epoch history as JSON; defaults to `<out_model>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the appearance-only ablation.
        #[arg(long)]
        no_motion: bool,
    },
    /// Write an ASCII PLY colored by class or by motion residual.
    ExportPly {
        scan: PathBuf,
        out: PathBuf,
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        labels: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failed checks exit with 1, everything else that goes wrong with 2.
struct ChecksFailed(usize);

fn config_or_default(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn featurize(
    exec: Exec,
    scan_dir: &Path,
    pose_file: &Path,
    out_dir: &Path,
    calib: Option<&Path>,
    config: Option<&Path>,
    mode: Mode,
) -> Result<()> {
    let cfg = config_or_default(config)?;
    let mode = match mode {
        Mode::Complete => FeatureMode::Complete,
        Mode::DelayFree => FeatureMode::DelayFree,
    };
    let (manifest, timings) = pipeline::featurize(scan_dir, pose_file, calib, &cfg.grid, out_dir, mode, exec)?;
    for w in &manifest.warnings {
        warn!("{w}");
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&out_dir.join("manifest.json"), &json)?;
    println!(
        "{} frames read, {} feature files, {} warm-up",
        manifest.frames_read,
        manifest.featurized.len(),
        manifest.warm_up.len()
    );
    println!(
        "timings: read {:.1} ms, features {:.1} ms, write {:.1} ms, mean {:.2} ms/frame",
        timings.read.as_secs_f64() * 1e3,
        timings.features.as_secs_f64() * 1e3,
        timings.write.as_secs_f64() * 1e3,
        timings.per_frame(manifest.frames_read).as_secs_f64() * 1e3
    );
    Ok(())
}

fn check(suite: SuiteArg, seeds: u64) -> Result<Option<ChecksFailed>> {
    let suite = match suite {
        SuiteArg::Geometry => Suite::Geometry,
        SuiteArg::Motion => Suite::Motion,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Loss => Suite::Loss,
        SuiteArg::All => Suite::All,
    };
    let opts = CheckOptions {
        seeds,
        ..CheckOptions::default()
    };
    let results = checks::run(suite, &opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok((failed > 0).then_some(ChecksFailed(failed)))
}

fn eval(pred: &Path, gt: &Path, config: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let cfg = config_or_default(config)?;
    let report = pipeline::evaluate_label_dirs(pred, gt, &cfg.labels)?;
    print!("{}", report.to_text());
    if let Some(path) = json {
        write_atomic(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn synth_cmd(spec_file: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_file).with_context(|| format!("reading {}", spec_file.display()))?;
    let mut spec = BenchmarkSpec::from_toml(&text)?;
    if let Some(s) = seed {
        for e in &mut spec.sequences {
            e.scene.seed = e.scene.seed.wrapping_add(s);
        }
    }
    let seqs = spec.generate()?;
    let index = synth::export_dataset(&seqs, out_dir)?;
    println!(
        "wrote {} sequences ({} train, {} val) to {}",
        seqs.len(),
        index.train.len(),
        index.val.len(),
        out_dir.display()
    );
    Ok(())
}

fn toy_train_cmd(
    exec: Exec,
    data_dir: &Path,
    config: &Path,
    out_model: &Path,
    history: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    no_motion: bool,
) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let (cfg, warnings) = ingest::parse_config(&text)?;
    for w in warnings {
        warn!("{}: {w}", config.display());
    }
    let mut train_cfg = ToyConfig::from_document(&text)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    train_cfg.use_motion = !no_motion;

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (split, name, seq) in load_dataset(data_dir)? {
        let samples = build_samples(&seq.clouds, &seq.poses, &seq.labels, &cfg.grid, &cfg.labels, exec)
            .with_context(|| format!("sequence {name}"))?;
        info!("sequence {name}: {} samples", samples.len());
        match split {
            Split::Train => train.extend(samples),
            Split::Val => val.extend(samples),
        }
    }
    if val.is_empty() {
        bail!("{} has no validation sequences", data_dir.display());
    }
    let run = toy_train(&train, &val, &cfg.grid, &train_cfg, exec)?;
    save_params(&run.model, out_model)?;
    let history_path = history.map_or_else(
        || {
            let mut name = out_model.as_os_str().to_os_string();
            name.push(".history.json");
            PathBuf::from(name)
        },
        Path::to_path_buf,
    );
    write_atomic(&history_path, &serde_json::to_vec_pretty(&run.history)?)?;
    for h in &run.history {
        println!("epoch {:>3}  lr {:.5}  loss {:.4}  val IoU {:.4}", h.epoch, h.lr, h.train_loss, h.val_iou);
    }
    Ok(())
}

fn export_ply(scan: &Path, out: &Path, labels: Option<&Path>, features: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let cloud = read_scan(scan)?;
    let cfg = config_or_default(config)?;
    let colors = match (labels, features) {
        (Some(l), _) => {
            let codes = ingest::pair_labels(&cloud, read_labels(l, &cfg.labels)?)?;
            codes.iter().map(|c| class_color(c.class)).collect()
        }
        (None, Some(f)) => residual_colors(&cloud, &MotionFeatures::read(f)?, &cfg.grid)?,
        (None, None) => bail!("one of --labels or --features is required"),
    };
    write_ply(&cloud, &colors, out)?;
    println!("wrote {} vertices to {}", cloud.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Option<ChecksFailed>> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Featurize {
            scan_dir,
            pose_file,
            out_dir,
            calib,
            config,
            mode,
        } => featurize(exec, &scan_dir, &pose_file, &out_dir, calib.as_deref(), config.as_deref(), mode)?,
        Command::Check { suite, seeds } => return check(suite, seeds),
        Command::Eval {
            pred_dir,
            gt_dir,
            config,
            json,
        } => eval(&pred_dir, &gt_dir, config.as_deref(), json.as_deref())?,
        Command::Synth { spec_file, out_dir, seed } => synth_cmd(&spec_file, &out_dir, seed)?,
        Command::ToyTrain {
            data_dir,
            config,
            out_model,
            history,
            seed,
            epochs,
            no_motion,
        } => toy_train_cmd(
            exec,
            &data_dir,
            &config,
            &out_model,
            history.as_deref(),
            seed,
            epochs,
            no_motion,
        )?,
        Command::ExportPly {
            scan,
            out,
            labels,
            features,
            config,
        } => export_ply(&scan, &out, labels.as_deref(), features.as_deref(), config.as_deref())?,
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(ChecksFailed(n))) => {
            eprintln!("{n} checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
