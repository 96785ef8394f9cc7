use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use smoothseg::commands::{
    cmd_eval, cmd_export, cmd_phantom, cmd_train, ExportCmdConfig, PhantomCmdConfig, TrainCmdConfig,
};
use smoothseg::experiments::{cmd_sweep, cmd_vessel_exp, SweepConfig, VesselExpConfig};

/// Smoothness-regularized layer segmentation experiments on synthetic phantoms.
#[derive(Parser)]
#[command(name = "smoothseg", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON file with the command's configuration; missing fields keep the command's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volumes with ground-truth masks.
    Phantom,
    /// Train one segmenter and write a checkpoint.
    Train,
    /// Train one model per smoothness weight and compare them.
    Sweep,
    /// Score a predicted mask file against a ground-truth mask file.
    Eval {
        /// Predicted mask, path without extension.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth mask, path without extension.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Vessel detection with and without epidermis masking.
    VesselExp {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write graymaps of one phantom slice.
    Export {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        volume: Option<u32>,
        #[arg(long)]
        slice: Option<usize>,
    },
}

/// The command's defaults with the JSON file laid over them; nested objects
/// merge key by key, so a partial section keeps the remaining defaults.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let mut merged = serde_json::to_value(T::default())?;
    merge(&mut merged, user);
    serde_json::from_value(merged).with_context(|| format!("invalid configuration in {}", p.display()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let config = g.config.as_deref();
    match cli.command {
        Command::Phantom => {
            let mut cfg: PhantomCmdConfig = load_config(config)?;
            if let Some(seed) = g.seed {
                cfg.phantom.seed = seed;
                cfg.dataset.split_seed = seed;
            }
            if let Some(out) = &g.out {
                cfg.out_dir = out.clone();
            }
            let manifest = cmd_phantom(&cfg)?;
            print(&json!({
                "command": "phantom",
                "out_dir": cfg.out_dir,
                "n_volumes": manifest.volumes.len(),
                "split": manifest.split,
            }))
        }
        Command::Train => {
            let mut cfg: TrainCmdConfig = load_config(config)?;
            if let Some(seed) = g.seed {
                cfg.phantom.seed = seed;
                cfg.dataset.split_seed = seed;
                cfg.model_seed = seed;
                cfg.train.seed = seed;
            }
            if let Some(out) = &g.out {
                cfg.out_dir = out.clone();
            }
            let s = cmd_train(&cfg)?;
            print(&json!({
                "command": "train",
                "checkpoint": s.checkpoint,
                "smoothness_weight": cfg.train.loss.smoothness_weight,
                "best_epoch": s.record.best_epoch,
                "epochs_run": s.record.epochs.len(),
                "stopped_early": s.record.stopped_early,
                "test_dice": s.test_dice,
                "test_ra": s.test_ra,
                "train_config": cfg.train,
            }))
        }
        Command::Sweep => {
            let mut cfg: SweepConfig = load_config(config)?;
            if let Some(seed) = g.seed {
                cfg.phantom.seed = seed;
                cfg.dataset.split_seed = seed;
                cfg.model_seed = seed;
                cfg.train.seed = seed;
            }
            if let Some(out) = &g.out {
                cfg.out_dir = out.clone();
            }
            let report = cmd_sweep(&cfg, g.threads)?;
            print(&json!({
                "command": "sweep",
                "out_dir": cfg.out_dir,
                "n_test_slices": report.n_test_slices,
                "split": report.split,
                "train_config": cfg.train,
                "rows": report.rows,
            }))
        }
        Command::Eval { pred, gt } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("out/eval"));
            let report = cmd_eval(&pred, &gt, &out)?;
            print(&json!({
                "command": "eval",
                "out_dir": out,
                "overall": report.overall,
            }))
        }
        Command::VesselExp { model } => {
            let mut cfg: VesselExpConfig = load_config(config)?;
            if let Some(seed) = g.seed {
                cfg.phantom.seed = seed;
            }
            if let Some(out) = &g.out {
                cfg.out_dir = out.clone();
            }
            if model.is_some() {
                cfg.model = model;
            }
            let report = cmd_vessel_exp(&cfg)?;
            print(&json!({
                "command": "vessel-exp",
                "out_dir": cfg.out_dir,
                "report": report,
            }))
        }
        Command::Export {
            model,
            volume,
            slice,
        } => {
            let mut cfg: ExportCmdConfig = load_config(config)?;
            if let Some(seed) = g.seed {
                cfg.phantom.seed = seed;
            }
            if let Some(out) = &g.out {
                cfg.out_dir = out.clone();
            }
            if model.is_some() {
                cfg.model = model;
            }
            cfg.volume = volume.unwrap_or(cfg.volume);
            cfg.slice = slice.unwrap_or(cfg.slice);
            let files = cmd_export(&cfg)?;
            print(&json!({
                "command": "export",
                "out_dir": cfg.out_dir,
                "files": files,
            }))
        }
    }
}
