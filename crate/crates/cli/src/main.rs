//! `aggdet`: data generation, training, inference, evaluation and
//! self-checks for the aggregated 3-D detector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggdet_core::config::RunConfig;
use aggdet_core::eval::{evaluate, threshold_for_sensitivity, EvalSet};
use aggdet_core::infer::infer_scan;
use aggdet_core::io::{self, DatasetManifest, PredictionRow, Split};
use aggdet_core::model::Detector;
use aggdet_core::nn::load_checkpoint;
use aggdet_core::synth::generate_dataset;
use aggdet_core::train::{run_training, TrainScan};
use aggdet_core::verify::{gradcheck, oracles, CheckReport};
use aggdet_core::Error;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "aggdet", version, about = "Two-branch 3-D lesion detector on synthetic CT phantoms")]
struct Cli {
    /// Base seed for data generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` config file; `AGGDET_<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic phantom dataset.
    GenData,
    /// Train a detector on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect lesions on one split of a dataset.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// FROC, bucket sensitivities and TNP for a predictions CSV.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Dataset manifest fixing the evaluated scans (lesion-free scans
        /// included); otherwise every scan named in either CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Finite-difference gradient checks of every differentiable kernel.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Brute-force oracle comparisons.
    Selftest,
    /// Print every config key with its default.
    ConfigTemplate,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// A check that ran to completion and reported failure.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check suite(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input (including a named file that does not exist) or failed
/// checks, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ChecksFailed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::InvalidArgument { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Shape { .. }
            | Error::UndefinedMetric(_)
            | Error::DegenerateBatch(_),
        ) => 1,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn invalid(arg: &'static str, reason: &str) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_env()?,
    })
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let d = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// Writes `run_manifest.txt`: a valid config file (the effective settings)
/// headed by comments naming the command, seed, version and config hash.
fn write_manifest(dir: &Path, command: &str, seed: u64, cfg: &RunConfig) -> Result<()> {
    let canonical = cfg.canonical();
    let hash = Sha256::digest(canonical.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let mut s = String::new();
    let _ = writeln!(s, "# command = {command}");
    let _ = writeln!(s, "# seed = {seed}");
    let _ = writeln!(s, "# version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# config_sha256 = {hex}");
    s.push_str(&canonical);
    let p = dir.join("run_manifest.txt");
    fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn print_reports(reports: &[CheckReport]) -> Result<()> {
    for r in reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, seed: u64, path: &Path) -> Result<Detector<f32>> {
    let mut m = Detector::<f32>::new(cfg.model_config()?, seed)?;
    load_checkpoint(path, &mut m)?;
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Cmd::GenData => {
            let dir = out_dir(&cli, "data")?;
            let m = generate_dataset(&dir, cli.seed, cfg.n_train()?, cfg.n_test()?, &cfg.dataset_spec()?)?;
            write_manifest(&dir, "gen-data", cli.seed, &cfg)?;
            println!("wrote {} scans to {}", m.entries.len(), dir.display());
        }
        Cmd::Train { data } => {
            let dir = out_dir(&cli, "run")?;
            let ds = DatasetManifest::load(data)?;
            let gt = ds.ground_truth()?;
            let scans = ds
                .split(Split::Train)
                .map(|e| {
                    Ok(TrainScan {
                        id: e.scan_id.clone(),
                        volume: ds.load_volume(e)?,
                        gts: gt.get(&e.scan_id).cloned().unwrap_or_default(),
                    })
                })
                .collect::<aggdet_core::Result<Vec<_>>>()?;
            if scans.is_empty() {
                bail!(invalid("data", "dataset has no training scans"));
            }
            write_manifest(&dir, "train", cli.seed, &cfg)?;
            let out = run_training(&scans, &cfg.model_config()?, &cfg.train_config()?, cli.seed, Some(&dir))?;
            let last = out.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            println!("trained {} iterations, final loss {last:.6}, checkpoint {}", out.log.len(), dir.join("model.ckpt").display());
        }
        Cmd::Infer { data, checkpoint, split } => {
            let dir = out_dir(&cli, "predictions")?;
            let ds = DatasetManifest::load(data)?;
            let icfg = cfg.infer_config()?;
            let mut primary = load_model(&cfg, cli.seed, checkpoint)?;
            let mut second = cfg.ensemble_checkpoint().map(|p| load_model(&cfg, cli.seed, &p)).transpose()?;
            let (mut fused, mut rpn) = (Vec::new(), Vec::new());
            let mut n = 0;
            for e in ds.split((*split).into()) {
                let vol = ds.load_volume(e)?;
                let det = match second.as_mut() {
                    Some(s) => infer_scan(&mut [&mut primary, s], &vol, &icfg)?,
                    None => infer_scan(&mut [&mut primary], &vol, &icfg)?,
                };
                let row = |p| PredictionRow {
                    scan_id: e.scan_id.clone(),
                    proposal: p,
                };
                fused.extend(det.fused.into_iter().map(row));
                rpn.extend(det.rpn.into_iter().map(row));
                n += 1;
            }
            io::write_predictions(&dir.join("predictions.csv"), &fused)?;
            io::write_predictions(&dir.join("predictions_rpn.csv"), &rpn)?;
            write_manifest(&dir, "infer", cli.seed, &cfg)?;
            println!("{} detections on {n} scans, written to {}", fused.len(), dir.join("predictions.csv").display());
        }
        Cmd::Eval {
            predictions,
            annotations,
            manifest,
            split,
        } => {
            let rows = io::parse_predictions(predictions)?;
            let preds = io::group_predictions(&rows);
            let gts = io::parse_annotations(annotations)?;
            let ids: Vec<String> = match manifest {
                Some(m) => {
                    let ds = DatasetManifest::load(m)?;
                    ds.entries
                        .iter()
                        .filter(|e| split.map_or(true, |s| e.split == s.into()))
                        .map(|e| e.scan_id.clone())
                        .collect()
                }
                None => {
                    let mut all: Vec<String> = gts.keys().chain(preds.keys()).cloned().collect();
                    all.sort();
                    all.dedup();
                    all
                }
            };
            let preds: BTreeMap<_, _> = preds.into_iter().filter(|(k, _)| ids.contains(k)).collect();
            let set = EvalSet::new(&ids, &preds, &gts)?;
            let tnp_t = match cfg.tnp_threshold()? {
                Some(t) => Some(t),
                None => threshold_for_sensitivity(&set, 0.95)?,
            };
            let report = evaluate(&set, tnp_t)?;
            let text = io::format_eval_report(&report);
            print!("{text}");
            if let Some(d) = &cli.out_dir {
                fs::create_dir_all(d)?;
                io::write_eval_report(&d.join("eval.csv"), &report)?;
                write_manifest(d, "eval", cli.seed, &cfg)?;
            }
        }
        Cmd::Gradcheck { cases } => {
            if *cases == 0 {
                bail!(invalid("cases", "must be >= 1"));
            }
            print_reports(&gradcheck::run_all(*cases, cli.seed)?)?;
        }
        Cmd::Selftest => print_reports(&oracles::run_all(cli.seed)?)?,
        Cmd::ConfigTemplate => print!("{}", RunConfig::template()),
    }
    Ok(())
}
