//! The full network and its per-item training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bicmf::Bicmf;
use crate::config::ModelConfig;
use crate::data::{Annotation, FeatureBundle};
use crate::error::{Error, Result};
use crate::fra::{alignment_loss, Fra, FraConfig, LinearProjection, Modality};
use crate::graph::{Graph, Var};
use crate::heads::{foreground_prob, hungarian_match, moment_loss, Decoder, Encoder, Moment, PredictionSet, SaliencyHead};
use crate::losses::{
    compose_total_graph, contrastive_loss, epoch_weight, hard_neg_base, hard_pos_base, rank_loss, sample_rank_pair,
    task_coupled_loss, task_specific_loss, GruScorer, LossComponents,
};
use crate::metrics::QueryPrediction;
use crate::nn::Ctx;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub enum Projection {
    Fra(Fra),
    Linear(LinearProjection),
}

#[derive(Clone, Debug)]
pub struct Modules {
    pub projection: Projection,
    pub fusion: Bicmf,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub saliency: SaliencyHead,
    pub gru: GruScorer,
}

#[derive(Clone, Debug)]
pub struct VideoLights {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub modules: Modules,
}

/// Intermediate and output nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub v_bar: Var,
    pub t_bar: Var,
    pub v_r: Var,
    pub fused: Var,
    pub memory: Var,
    /// `L x 1`.
    pub saliency: Var,
    pub logits: Var,
    pub moments: Var,
}

/// Loss nodes for one item. `hard_pos_raw` / `hard_neg_raw` are the terms
/// before the epoch weight.
#[derive(Clone, Copy, Debug)]
pub struct ItemLoss {
    pub components: LossComponents<Var>,
    pub hard_pos_raw: Var,
    pub hard_neg_raw: Var,
    pub total: Var,
}

impl VideoLights {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let projection = if cfg.use_fra {
            Projection::Fra(Fra::new(&mut store, "fra", cfg.d_v(), cfg.d_t(), FraConfig::from_model(&cfg), &mut rng)?)
        } else {
            Projection::Linear(LinearProjection::new(
                &mut store,
                "proj",
                cfg.d_v(),
                cfg.d_t(),
                d,
                cfg.dropout_in,
                &mut rng,
            )?)
        };
        let fusion = Bicmf::new(
            &mut store,
            "bicmf",
            d,
            cfg.heads,
            cfg.l_max,
            cfg.n_max,
            cfg.bicmf_layers,
            cfg.cross_modal,
            cfg.dropout_tx,
            &mut rng,
        )?;
        let encoder = Encoder::new(
            &mut store,
            "encoder",
            d,
            cfg.heads,
            cfg.ffn_dim,
            cfg.enc_layers,
            cfg.l_max,
            cfg.dropout_tx,
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            d,
            cfg.heads,
            cfg.ffn_dim,
            cfg.dec_layers,
            cfg.n_queries,
            cfg.dropout_tx,
            &mut rng,
        )?;
        let saliency = SaliencyHead::new(&mut store, "saliency", d, &mut rng)?;
        let gru = GruScorer::new(&mut store, "gru", d, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            modules: Modules {
                projection,
                fusion,
                encoder,
                decoder,
                saliency,
                gru,
            },
        })
    }

    fn check_bundle(&self, b: &FeatureBundle) -> Result<()> {
        b.validate()?;
        let (dv, dt) = (b.video_feats.cols(), b.text_feats.cols());
        if dv != self.cfg.d_v() || dt != self.cfg.d_t() {
            return Err(Error::Config(format!(
                "features are {dv}/{dt} wide, model expects {}/{}",
                self.cfg.d_v(),
                self.cfg.d_t()
            )));
        }
        if b.num_clips() > self.cfg.l_max || b.num_tokens() > self.cfg.n_max {
            return Err(Error::Config(format!(
                "{} clips / {} tokens exceed l_max = {} / n_max = {}",
                b.num_clips(),
                b.num_tokens(),
                self.cfg.l_max,
                self.cfg.n_max
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, b: &FeatureBundle) -> Result<ForwardOutput> {
        self.check_bundle(b)?;
        let m = &self.modules;
        let (cm, tm) = (&b.video_mask[..], &b.text_mask[..]);
        let v = ctx.g.constant(b.video_feats.clone());
        let t = ctx.g.constant(b.text_feats.clone());
        let (v_bar, t_bar, v_r) = match &m.projection {
            Projection::Fra(fra) => {
                let v_bar = fra.project(ctx, v, Modality::Video, cm)?;
                let t_bar = fra.project(ctx, t, Modality::Text, tm)?;
                let r = fra.refine(ctx, v_bar, t_bar, tm, cm)?;
                (v_bar, t_bar, r.v_r)
            }
            Projection::Linear(p) => {
                let v_bar = p.project(ctx, v, Modality::Video, cm)?;
                let t_bar = p.project(ctx, t, Modality::Text, tm)?;
                (v_bar, t_bar, v_bar)
            }
        };
        let fused = m.fusion.fuse(ctx, v_r, t_bar, cm, tm)?;
        let memory = m.encoder.forward(ctx, fused, cm)?;
        let saliency = m.saliency.forward(ctx, memory, cm)?;
        let pos = m.encoder.positions(ctx, b.num_clips())?;
        let dec = m.decoder.forward(ctx, memory, pos, cm)?;
        Ok(ForwardOutput {
            v_bar,
            t_bar,
            v_r,
            fused,
            memory,
            saliency,
            logits: dec.logits,
            moments: dec.moments,
        })
    }

    /// Every loss term for one item at epoch `epoch`; `rng` draws the rank pair.
    pub fn item_loss<R: Rng + ?Sized>(
        &self,
        ctx: &mut Ctx,
        out: &ForwardOutput,
        b: &FeatureBundle,
        ann: &Annotation,
        epoch: usize,
        rng: &mut R,
    ) -> Result<ItemLoss> {
        let w = &self.cfg.losses;
        let cm = &b.video_mask[..];
        let l = b.num_clips();
        if ann.num_clips() != l {
            return Err(Error::Invalid(format!(
                "qid {}: annotation has {} clips, features {l}",
                ann.qid,
                ann.num_clips()
            )));
        }
        let gts = ann.gt_moments();
        let preds = moments_of(ctx.g, out.moments);
        let fg = foreground_prob(ctx.g.value(out.logits));
        let matching = hungarian_match(&preds, &fg, &gts, w.l1, w.giou, w.cls);
        let mr = moment_loss(
            ctx.g,
            out.logits,
            out.moments,
            &gts,
            &matching,
            w.l1,
            w.giou,
            w.cls,
            self.cfg.bg_weight,
        )?;

        let s = out.saliency;
        let levels = &ann.saliency_levels;
        let target = ann.target_saliency();
        let pos = ann.positive_mask();
        let pos: Vec<bool> = pos.iter().zip(cm).map(|(&p, &m)| p && m).collect();
        let neg: Vec<bool> = pos.iter().zip(cm).map(|(&p, &m)| !p && m).collect();

        let rank = match sample_rank_pair(levels, cm, rng) {
            Some((hi, lo)) => rank_loss(ctx.g, s, hi, lo, w.margin)?,
            None => ctx.g.constant(crate::tensor::Tensor::scalar(0.0)),
        };
        let cont = contrastive_loss(ctx.g, s, levels, cm, self.cfg.tau)?;
        let hard_pos_raw = hard_pos_base(ctx.g, s, &target, &pos)?;
        let hard_neg_raw = hard_neg_base(ctx.g, s, &neg)?;
        let hard_pos = ctx.g.scale(hard_pos_raw, epoch_weight(epoch))?;
        let hard_neg = ctx.g.scale(hard_neg_raw, epoch_weight(epoch))?;
        let ts = task_specific_loss(ctx.g, s, &target, cm)?;
        let (tc, _) = task_coupled_loss(ctx, &self.modules.gru, out.memory, &target, cm)?;
        let align = match &self.modules.projection {
            Projection::Fra(_) => alignment_loss(ctx.g, out.t_bar, out.v_r, &target, &b.text_mask, cm)?,
            Projection::Linear(_) => ctx.g.constant(crate::tensor::Tensor::scalar(0.0)),
        };
        let components = LossComponents {
            l1: mr.l1,
            giou: mr.giou,
            cls: mr.cls,
            rank,
            cont,
            hard_pos,
            hard_neg,
            ts,
            tc,
            align,
        };
        let total = compose_total_graph(ctx.g, &components, w)?;
        Ok(ItemLoss {
            components,
            hard_pos_raw,
            hard_neg_raw,
            total,
        })
    }

    /// Evaluation-mode prediction for one item.
    pub fn predict(&self, b: &FeatureBundle) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &self.store);
        let out = self.forward(&mut ctx, b)?;
        Ok(PredictionSet {
            moments: moments_of(ctx.g, out.moments),
            class_logits: ctx.g.value(out.logits).clone(),
            saliency: ctx.g.value(out.saliency).data().to_vec(),
        })
    }

    /// Prediction converted to seconds and ranked by foreground probability.
    pub fn predict_query(&self, b: &FeatureBundle, ann: &Annotation) -> Result<QueryPrediction> {
        let p = self.predict(b)?;
        Ok(QueryPrediction {
            qid: ann.qid,
            pred_relevant_windows: p
                .ranked()
                .into_iter()
                .map(|(m, score)| {
                    let [s, e] = m.to_seconds(ann.duration);
                    [s, e, score]
                })
                .collect(),
            pred_saliency_scores: p.saliency,
        })
    }
}

fn moments_of(g: &Graph, moments: Var) -> Vec<Moment> {
    let t = g.value(moments);
    (0..t.rows()).map(|i| Moment::new(t.at(i, 0), t.at(i, 1))).collect()
}
