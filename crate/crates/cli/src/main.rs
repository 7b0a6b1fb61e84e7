use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use videolights::data::{load_dataset, FeatureSource};
use videolights::metrics::write_predictions;
use videolights::train::{
    datagen_file, evaluate, prepare_items, train, write_report, Checkpoint, DatagenOptions, TrainOptions,
};
use videolights::ModelConfig;

#[derive(Parser)]
#[command(name = "videolights", version, about = "Moment retrieval and highlight detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Qvhighlights,
    QvhighlightsBlip,
    CharadesSta,
    Tacos,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Qvhighlights => ModelConfig::default(),
            Preset::QvhighlightsBlip => ModelConfig::qvhighlights_blip(),
            Preset::CharadesSta => ModelConfig::charades_sta(),
            Preset::Tacos => ModelConfig::tacos(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a JSONL dataset; writes log.jsonl, best.ckpt, last.ckpt and
    /// report.json under --out.
    Train {
        /// JSON model config; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        data: PathBuf,
        /// Explicit validation split; otherwise val_fraction of --data is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from the weights of a checkpoint, matched by name and shape.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Directory of VLFT feature files; pseudo features when absent.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        eval_every: usize,
        #[arg(long, value_enum, default_value = "cpu")]
        device: Device,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint; prints the report and optionally writes it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Predictions JSONL path.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cpu")]
        device: Device,
    },
    /// Synthetic caption-scored annotations for every video in a manifest of
    /// {"vid", "duration"} lines.
    Datagen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        clip_len: f64,
        #[arg(long, default_value_t = 10.0)]
        interval: f64,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 0)]
        first_qid: i64,
    },
}

fn source(dir: Option<PathBuf>) -> FeatureSource {
    dir.map_or(FeatureSource::Pseudo, FeatureSource::Dir)
}

fn load(path: &Path) -> Result<Vec<videolights::data::Annotation>> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            preset,
            data,
            val,
            out,
            seed,
            epochs,
            init_from,
            features,
            eval_every,
            device: Device::Cpu,
            quiet,
        } => {
            let mut cfg = match &config {
                Some(p) => ModelConfig::load(p).with_context(|| format!("config {}", p.display()))?,
                None => preset.config(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let src = source(features);
            let items = prepare_items(&cfg, &load(&data)?, &src)?;
            let val = match &val {
                Some(p) => Some(prepare_items(&cfg, &load(p)?, &src)?),
                None => None,
            };
            let init = match &init_from {
                Some(p) => Some(Checkpoint::load(p)?.model.store),
                None => None,
            };
            fs::create_dir_all(&out)?;
            cfg.save(out.join("config.json"))?;
            let outcome = train(
                &cfg,
                &items,
                TrainOptions {
                    out_dir: Some(out.clone()),
                    val,
                    init_from: init,
                    eval_every,
                    verbose: !quiet,
                },
            )?;
            write_report(out.join("report.json"), &outcome.best_report)?;
            println!("{}", serde_json::to_string_pretty(&outcome.best_report)?);
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            predictions,
            features,
            device: Device::Cpu,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let items = prepare_items(&ck.model.cfg, &load(&data)?, &source(features))?;
            let (report, preds) = evaluate(&ck.model, &items)?;
            if let Some(p) = &out {
                write_report(p, &report)?;
            }
            if let Some(p) = &predictions {
                write_predictions(BufWriter::new(File::create(p)?), &preds)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Datagen {
            manifest,
            out,
            clip_len,
            interval,
            embed_dim,
            first_qid,
        } => {
            if embed_dim == 0 {
                bail!("--embed-dim must be positive");
            }
            let mut opts = DatagenOptions {
                clip_len,
                embed_dim,
                first_qid,
                ..Default::default()
            };
            opts.synth.interval_len = interval;
            let n = datagen_file(&manifest, &out, &opts)?;
            eprintln!("wrote {n} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
