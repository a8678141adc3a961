use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nvsdepth::data::{
    generate_dataset, load_dataset, load_sample, save_dataset, write_pfm, write_pgm, write_ppm, Dataset, SceneConfig,
    Split,
};
use nvsdepth::geometry::relative_pose;
use nvsdepth::metrics::{EvalRange, MetricsReport};
use nvsdepth::trainer::{
    evaluate, evaluate_ground_truth, gradcheck, run_ablation, train, GradcheckConfig, Mode, ParamGroup, TrainConfig,
    TrainedModel,
};
use nvsdepth::warp::forward_warp;
use nvsdepth::Error;

const EXIT_NUMERIC: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_INPUT: u8 = 66;

/// Placeholder checkpoint name for scoring ground truth against itself.
const GT_ORACLE: &str = "gt-oracle";

const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Monocular depth training with view-synthesis consistency losses.
#[derive(Parser, Debug)]
#[command(name = "nvsdepth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of image pairs with exact depth.
    GenData {
        /// key = value file; `scene.*` keys set the generator.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs, split 80/10/10 into train/val/test.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train DepNet (and SynNet, depending on the mode) on a dataset.
    Train {
        /// key = value training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// depnet_only, depnet_synnet or full; overrides the config.
        #[arg(long)]
        mode: Option<String>,
        /// Receives checkpoints/ and logs/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint's DepNet on one split and print the metrics as JSON.
    Eval {
        /// Checkpoint file, or `gt-oracle` to score ground truth itself.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// nyu, kitti, or `MIN,MAX` in meters.
        #[arg(long, default_value = "nyu")]
        range: String,
    },
    /// Forward-warp a sample's first view into its second camera.
    Warp {
        /// Sample directory (rgb1.ppm, depth1.pfm, intrinsics.txt, pose files).
        #[arg(long)]
        sample: PathBuf,
        /// Receives warped.ppm, warped.pfm and mask.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare pipeline gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train all three modes with identical seeds and tabulate test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Receives ablation.csv and one log/checkpoint directory per mode.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Config(_) => EXIT_USAGE,
            Error::Ingestion { .. } | Error::Degenerate(_) => EXIT_INPUT,
            Error::Io { .. } | Error::Contract(_) => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_config_text(path: Option<&Path>) -> Result<String, Failure> {
    match path {
        None => Ok(String::new()),
        Some(p) => fs::read_to_string(p).map_err(|e| Failure {
            code: EXIT_INPUT,
            message: format!("{}: {e}", p.display()),
        }),
    }
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    load_dataset(dir).map_err(|e| match e {
        Error::Io { .. } => Failure {
            code: EXIT_INPUT,
            message: e.to_string(),
        },
        other => other.into(),
    })
}

fn train_config(path: Option<&Path>, mode: Option<&str>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::from_kv_text(&read_config_text(path)?)?;
    if let Some(m) = mode {
        cfg.mode = Mode::parse(m).map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn parse_range(text: &str) -> Result<EvalRange, Failure> {
    match text {
        "nyu" => Ok(EvalRange::nyu()),
        "kitti" => Ok(EvalRange::kitti()),
        _ => {
            let bad = || Failure::usage(format!("--range expects nyu, kitti or MIN,MAX, got {text}"));
            let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            EvalRange::new(lo, hi).map_err(|e| Failure::usage(e.to_string()))
        }
    }
}

fn print_metrics(report: &MetricsReport) {
    println!("{}", report.to_json());
}

fn gen_data(config: Option<&Path>, out: &Path, count: u64, seed: u64) -> CmdResult {
    let scene = SceneConfig::from_kv_text(&read_config_text(config)?)?;
    let count = usize::try_from(count).map_err(|_| Failure::usage("--count is too large"))?;
    let ds = generate_dataset(&scene, count, seed)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        ds.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, mode: Option<&str>, out: &Path) -> CmdResult {
    let mut cfg = train_config(config, mode)?;
    cfg.checkpoint_dir = Some(out.join("checkpoints"));
    cfg.log_dir = Some(out.join("logs"));
    let ds = load_data(data)?;
    let outcome = train(&cfg, &ds)?;
    if let Some(last) = outcome.record.steps.last() {
        let r = &last.report;
        println!(
            "mode {} | {} steps | final l1 {:.6} l2 {:.6} l3 {:.6} total {:.6}",
            cfg.mode.as_str(),
            outcome.record.steps.len(),
            r.l1,
            r.l2,
            r.l3,
            r.total
        );
    }
    if let Some(m) = outcome.record.epochs.last().and_then(|e| e.metrics) {
        println!("validation rmse_log {:.6} rel {:.6}", m.rmse_log, m.rel);
    }
    if let Some(path) = &outcome.checkpoint {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

fn eval_cmd(checkpoint: &str, data: &Path, split: &str, range: &str) -> CmdResult {
    let split = Split::parse(split).map_err(|e| Failure::usage(e.to_string()))?;
    let range = parse_range(range)?;
    let ds = load_data(data)?;
    let samples = ds.split(split);
    let report = if checkpoint == GT_ORACLE {
        evaluate_ground_truth(samples, &range)?
    } else {
        let model = TrainedModel::<f32>::load(Path::new(checkpoint))?;
        evaluate(&model.depnet, samples, &range)?
    };
    print_metrics(&report);
    Ok(())
}

fn warp_cmd(sample: &Path, out: &Path) -> CmdResult {
    let s = load_sample(sample).map_err(|e| match e {
        Error::Io { .. } => Failure {
            code: EXIT_INPUT,
            message: e.to_string(),
        },
        other => other.into(),
    })?;
    let rel = relative_pose(&s.pose1, &s.pose2);
    let result = forward_warp(&s.rgb1, &s.depth1, &s.intrinsics, &rel)?;
    fs::create_dir_all(out).map_err(|e| {
        Failure::from(Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
    })?;
    write_ppm(&out.join("warped.ppm"), &result.image_buffer())?;
    write_pfm(&out.join("warped.pfm"), &result.depth_map())?;
    let mask: Vec<u8> = result.hit_mask.iter().map(|&hit| if hit { 255 } else { 0 }).collect();
    write_pgm(&out.join("mask.pgm"), result.width, result.height, &mask)?;
    println!(
        "{} of {} target pixels hit; wrote {}",
        result.hit_count(),
        result.width * result.height,
        out.display()
    );
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> CmdResult {
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    for group in [
        ParamGroup::DepnetWeight,
        ParamGroup::SynnetWeight,
        ParamGroup::SourceDepth,
    ] {
        let worst = report
            .entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.rel_dev)
            .fold(0.0, f64::max);
        println!(
            "{:<14} {:>3} samples, max rel deviation {worst:.3e}",
            group.as_str(),
            report.count(group)
        );
    }
    println!("skipped (branch flips): {}", report.skipped);
    println!("max relative deviation {:.3e}", report.max_rel_dev);
    if report.passed(&cfg, GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check failed: max relative deviation {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
            report.max_rel_dev
        )))
    }
}

fn ablate_cmd(config: Option<&Path>, data: &Path, out: &Path) -> CmdResult {
    let mut cfg = train_config(config, None)?;
    cfg.checkpoint_dir = Some(out.to_path_buf());
    cfg.log_dir = Some(out.to_path_buf());
    let ds = load_data(data)?;
    let result = run_ablation(&cfg, &ds)?;
    let csv = result.to_csv();
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| {
        Failure::from(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => gen_data(config.as_deref(), &out, count, seed),
        Command::Train {
            config,
            data,
            mode,
            out,
        } => train_cmd(config.as_deref(), &data, mode.as_deref(), &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            range,
        } => eval_cmd(&checkpoint, &data, &split, &range),
        Command::Warp { sample, out } => warp_cmd(&sample, &out),
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
        Command::Ablate { config, data, out } => ablate_cmd(config.as_deref(), &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
