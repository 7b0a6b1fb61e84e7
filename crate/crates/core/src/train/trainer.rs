use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{build_features, Annotation, FeatureBundle, FeatureSource, LEVEL_MAX};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossComponents;
use crate::metrics::{compute_report, MetricReport, QueryPrediction};
use crate::model::VideoLights;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::train::checkpoint::{quantize, Checkpoint};
use crate::train::optim::{clip_global_norm, AdamW, AdamWConfig};

/// One query with its model inputs.
#[derive(Clone, Debug)]
pub struct Item {
    pub ann: Annotation,
    pub bundle: FeatureBundle,
}

pub fn prepare_items(cfg: &ModelConfig, anns: &[Annotation], source: &FeatureSource) -> Result<Vec<Item>> {
    anns.iter()
        .map(|a| {
            let bundle = build_features(a, &cfg.video_parts, &cfg.text_parts, cfg.n_max, source)?;
            Ok(Item { ann: a.clone(), bundle })
        })
        .collect()
}

/// Seeded `(train, val)` index split; `val` gets `round(fraction * n)`
/// items but never all of them.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Epoch means of every loss term, as composed into the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub rank: f64,
    pub cont: f64,
    /// Epoch-weighted.
    pub hard_pos: f64,
    pub hard_neg: f64,
    /// Before the epoch weight.
    pub hard_pos_raw: f64,
    pub hard_neg_raw: f64,
    pub ts: f64,
    pub tc: f64,
    pub align: f64,
    pub total: f64,
}

impl LossLog {
    fn add(&mut self, c: &LossComponents<f64>, hp_raw: f64, hn_raw: f64, total: f64) {
        self.l1 += c.l1;
        self.giou += c.giou;
        self.cls += c.cls;
        self.rank += c.rank;
        self.cont += c.cont;
        self.hard_pos += c.hard_pos;
        self.hard_neg += c.hard_neg;
        self.hard_pos_raw += hp_raw;
        self.hard_neg_raw += hn_raw;
        self.ts += c.ts;
        self.tc += c.tc;
        self.align += c.align;
        self.total += total;
    }

    fn scale(&mut self, k: f64) {
        for v in [
            &mut self.l1,
            &mut self.giou,
            &mut self.cls,
            &mut self.rank,
            &mut self.cont,
            &mut self.hard_pos,
            &mut self.hard_neg,
            &mut self.hard_pos_raw,
            &mut self.hard_neg_raw,
            &mut self.ts,
            &mut self.tc,
            &mut self.align,
            &mut self.total,
        ] {
            *v *= k;
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossLog>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossLog,
    /// Validation report, when evaluated this epoch.
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `log.jsonl`, `best.ckpt` and `last.ckpt` go; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    /// Explicit validation items. When `None`, a `val_fraction` split of the
    /// training items is held out; when that split is empty the training
    /// items are evaluated instead.
    pub val: Option<Vec<Item>>,
    /// Starting weights, copied by name and shape.
    pub init_from: Option<ParamStore>,
    /// Evaluate every this many epochs (and after the last); 0 means 1.
    pub eval_every: usize,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights at full precision.
    pub model: VideoLights,
    pub optimizer: AdamW,
    /// Best validation checkpoint by `map_avg`.
    pub best: Checkpoint,
    pub best_report: MetricReport,
    pub history: Vec<EpochRecord>,
    pub train_qids: Vec<i64>,
    pub val_qids: Vec<i64>,
}

impl TrainOutcome {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss.total).collect()
    }
}

/// Predictions and report for `items` with dropout off.
pub fn evaluate(model: &VideoLights, items: &[Item]) -> Result<(MetricReport, Vec<QueryPrediction>)> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let preds = items
        .iter()
        .map(|it| model.predict_query(&it.bundle, &it.ann))
        .collect::<Result<Vec<_>>>()?;
    let anns: Vec<Annotation> = items.iter().map(|it| it.ann.clone()).collect();
    let report = compute_report(&preds, &anns, LEVEL_MAX)?;
    Ok((report, preds))
}

struct Logger {
    out: Option<BufWriter<File>>,
}

impl Logger {
    fn line(&mut self, l: &LogLine) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, l)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

fn save_to(dir: &Option<PathBuf>, name: &str, ck: &Checkpoint) -> Result<()> {
    match dir {
        Some(d) => ck.save(d.join(name)),
        None => Ok(()),
    }
}

fn add_grads(acc: &mut [Option<Vec<f64>>], g: Vec<Option<Vec<f64>>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Fresh model from `seed`, optionally overwritten by name and shape from
/// `init_from`; a donor sharing nothing is refused.
pub fn init_model(cfg: &ModelConfig, seed: u64, init_from: Option<&ParamStore>) -> Result<VideoLights> {
    let mut model = VideoLights::new(cfg.clone(), seed)?;
    if let Some(src) = init_from {
        if model.store.load_matching(src) == 0 {
            return Err(Error::Checkpoint("initial weights share no parameter with this model".into()));
        }
    }
    Ok(model)
}

/// Full training run. Epoch `j` (from 0) weights the hard losses by `j + 1`.
pub fn train(cfg: &ModelConfig, items: &[Item], opts: TrainOptions) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    cfg.validate()?;
    let mut model = init_model(cfg, cfg.seed, opts.init_from.as_ref())?;

    let (train_items, val_items): (Vec<Item>, Vec<Item>) = match opts.val {
        Some(v) => (items.to_vec(), v),
        None => {
            let (tr, va) = split_indices(items.len(), cfg.val_fraction, cfg.seed);
            (
                tr.iter().map(|&i| items[i].clone()).collect(),
                va.iter().map(|&i| items[i].clone()).collect(),
            )
        }
    };
    let eval_items = if val_items.is_empty() { &train_items } else { &val_items };

    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d)?;
    }
    let mut log = Logger {
        out: match &opts.out_dir {
            Some(d) => Some(BufWriter::new(File::create(d.join("log.jsonl"))?)),
            None => None,
        },
    };

    let mut opt = AdamW::new(&model.store, AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);

    let every = opts.eval_every.max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, MetricReport)> = None;
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossLog::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
            for &i in batch {
                let it = &train_items[i];
                let mut g = Graph::new();
                let mut ctx = Ctx::train(&mut g, &model.store, &mut drop_rng);
                let out = model.forward(&mut ctx, &it.bundle)?;
                let loss = model.item_loss(&mut ctx, &out, &it.bundle, &it.ann, epoch, &mut rng)?;
                let total = ctx.g.scalar(loss.total);
                if !total.is_finite() {
                    let ck = Checkpoint::capture(&model, Some(&opt), epoch, Some(&rng), best.as_ref().map(|b| b.1.map_avg));
                    save_to(&opts.out_dir, "last.ckpt", &ck)?;
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("loss is {total} on qid {}", it.ann.qid),
                    });
                }
                let comps = loss.components.map(|v| ctx.g.scalar(v));
                let (hp, hn) = (ctx.g.scalar(loss.hard_pos_raw), ctx.g.scalar(loss.hard_neg_raw));
                epoch_loss.add(&comps, hp, hn, total);
                let grads = ctx.g.backward(loss.total)?;
                let pg = ctx.param_grads(&grads);
                add_grads(&mut acc, pg);
            }
            let k = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut acc, c);
            }
            if let Err(e) = opt.step(&mut model.store, &acc) {
                let ck = Checkpoint::capture(&model, Some(&opt), epoch, Some(&rng), best.as_ref().map(|b| b.1.map_avg));
                save_to(&opts.out_dir, "last.ckpt", &ck)?;
                return Err(Error::Diverged {
                    epoch,
                    message: e.to_string(),
                });
            }
        }
        epoch_loss.scale(1.0 / train_items.len() as f64);
        log.line(&LogLine {
            epoch,
            split: "train".into(),
            loss: Some(epoch_loss),
            metrics: None,
        })?;

        let last = epoch + 1 == cfg.epochs;
        let mut val = None;
        if (epoch + 1) % every == 0 || last {
            // evaluate exactly what a checkpoint would hold
            let mut snap = model.clone();
            quantize(&mut snap.store);
            let (report, _) = evaluate(&snap, eval_items)?;
            log.line(&LogLine {
                epoch,
                split: "val".into(),
                loss: None,
                metrics: Some(report),
            })?;
            if best.as_ref().is_none_or(|(_, b)| report.map_avg > b.map_avg) {
                let ck = Checkpoint::capture(&model, Some(&opt), epoch + 1, Some(&rng), Some(report.map_avg));
                save_to(&opts.out_dir, "best.ckpt", &ck)?;
                best = Some((ck, report));
            }
            val = Some(report);
        }
        if opts.verbose {
            match &val {
                Some(r) => eprintln!(
                    "epoch {epoch:>4}  loss {:.5}  val r1@0.5 {:.3}  mAP {:.3}  HIT@1 {:.3}",
                    epoch_loss.total, r.r1_050, r.map_avg, r.hit_at_1
                ),
                None => eprintln!("epoch {epoch:>4}  loss {:.5}", epoch_loss.total),
            }
        }
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            val,
        });
    }

    let ck = Checkpoint::capture(&model, Some(&opt), cfg.epochs, Some(&rng), best.as_ref().map(|b| b.1.map_avg));
    save_to(&opts.out_dir, "last.ckpt", &ck)?;
    let (best, best_report) = best.expect("the final epoch is always evaluated");
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        best,
        best_report,
        history,
        train_qids: train_items.iter().map(|it| it.ann.qid).collect(),
        val_qids: val_items.iter().map(|it| it.ann.qid).collect(),
    })
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}
