//! Feature refinement and alignment: convolutional projection of both
//! modalities, correspondence-map refinement of the video stream, and the
//! video-text alignment loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::cosine_loss;
use crate::nn::{zero_masked_rows, Conv1d, Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FraConfig {
    pub d: usize,
    pub ffcnn_layers: usize,
    pub kernel: usize,
    pub refine_kernel: usize,
    pub n_max: usize,
    pub dropout_in: f64,
}

impl FraConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            d: cfg.d,
            ffcnn_layers: cfg.ffcnn_layers,
            kernel: cfg.kernel,
            refine_kernel: cfg.refine_kernel,
            n_max: cfg.n_max,
            dropout_in: cfg.dropout_in,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.refine_kernel.is_multiple_of(2) {
            return Err(Error::Config("FRA kernels must be odd".into()));
        }
        if self.n_max == 0 || self.ffcnn_layers == 0 || self.d == 0 {
            return Err(Error::Config("FRA needs d, n_max and ffcnn_layers >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_in) {
            return Err(Error::Config(format!("dropout_in must lie in [0, 1), got {}", self.dropout_in)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
}

/// Stacked same-padding convolutions `d_in -> d -> ... -> d` with ReLU
/// after every layer.
#[derive(Clone, Debug)]
pub struct Ffcnn {
    pub layers: Vec<Conv1d>,
    pub d_in: usize,
}

impl Ffcnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        cfg: &FraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..cfg.ffcnn_layers)
            .map(|i| {
                let c_in = if i == 0 { d_in } else { cfg.d };
                Conv1d::new(store, &format!("{name}.{i}"), cfg.kernel, c_in, cfg.d, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, d_in })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: &[bool], dropout: f64) -> Result<Var> {
        let cols = ctx.g.value(x).cols();
        if cols != self.d_in {
            return Err(Error::Config(format!(
                "projection expects {} input channels, features have {cols}",
                self.d_in
            )));
        }
        let mut h = ctx.dropout(x, dropout)?;
        h = zero_masked_rows(ctx.g, h, Some(mask))?;
        for conv in &self.layers {
            h = conv.forward(ctx, h)?;
            h = ctx.g.relu(h)?;
            h = zero_masked_rows(ctx.g, h, Some(mask))?;
        }
        Ok(h)
    }
}

/// Everything computed by [`Fra::refine`].
#[derive(Clone, Copy, Debug)]
pub struct Refinement {
    /// `L x n_max` correspondence map, zero beyond the real tokens.
    pub v_q: Var,
    /// `1 x d` pooled sentence feature.
    pub s: Var,
    /// `L x 1` clip-sentence similarity.
    pub v_s: Var,
    /// `L x d`, `s` repeated for every clip.
    pub s_v: Var,
    /// `L x (2d + n_max + 1)` input of the refinement convolution.
    pub concat: Var,
    pub v_r: Var,
}

/// Masked mean over rows: `1 x d`.
pub fn masked_mean_rows(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyQuery);
    }
    let x = zero_masked_rows(g, x, Some(mask))?;
    let s = g.sum_rows(x)?;
    g.scale(s, 1.0 / n as f64)
}

#[derive(Clone, Debug)]
pub struct Fra {
    pub cfg: FraConfig,
    pub video: Ffcnn,
    pub text: Ffcnn,
    pub refine: Conv1d,
}

impl Fra {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_v: usize,
        d_t: usize,
        cfg: FraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let video = Ffcnn::new(store, &format!("{name}.video_proj"), d_v, &cfg, rng)?;
        let text = Ffcnn::new(store, &format!("{name}.text_proj"), d_t, &cfg, rng)?;
        let refine = Conv1d::new(
            store,
            &format!("{name}.refine"),
            cfg.refine_kernel,
            2 * cfg.d + cfg.n_max + 1,
            cfg.d,
            rng,
        )?;
        Ok(Self {
            cfg,
            video,
            text,
            refine,
        })
    }

    pub fn project(&self, ctx: &mut Ctx, x: Var, which: Modality, mask: &[bool]) -> Result<Var> {
        let net = match which {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        };
        net.forward(ctx, x, mask, self.cfg.dropout_in)
    }

    pub fn refine(
        &self,
        ctx: &mut Ctx,
        v_bar: Var,
        t_bar: Var,
        text_mask: &[bool],
        clip_mask: &[bool],
    ) -> Result<Refinement> {
        let g = &mut *ctx.g;
        let (l, d) = g.value(v_bar).dims2()?;
        let (n, dt) = g.value(t_bar).dims2()?;
        if d != self.cfg.d || dt != self.cfg.d {
            return dim_err(format!("refine expects width {}, got {d} and {dt}", self.cfg.d));
        }
        if n > self.cfg.n_max {
            return Err(Error::Config(format!("{n} query tokens exceed n_max = {}", self.cfg.n_max)));
        }
        if text_mask.len() != n || clip_mask.len() != l {
            return dim_err("refine masks must match feature lengths");
        }
        let s = masked_mean_rows(g, t_bar, text_mask)?;
        let t = zero_masked_rows(g, t_bar, Some(text_mask))?;
        let tt = g.transpose(t)?;
        let map = g.matmul(v_bar, tt)?;
        let v_q = if n < self.cfg.n_max {
            let pad = g.constant(Tensor::zeros(&[l, self.cfg.n_max - n]));
            g.concat_cols(&[map, pad])?
        } else {
            map
        };
        let st = g.transpose(s)?;
        let v_s = g.matmul(v_bar, st)?;
        let ones = g.constant(Tensor::ones(&[l, 1]));
        let s_v = g.matmul(ones, s)?;
        let concat = g.concat_cols(&[v_bar, v_q, v_s, s_v])?;
        let concat = zero_masked_rows(g, concat, Some(clip_mask))?;
        let v_r = self.refine.forward(ctx, concat)?;
        let v_r = zero_masked_rows(ctx.g, v_r, Some(clip_mask))?;
        Ok(Refinement {
            v_q,
            s,
            v_s,
            s_v,
            concat,
            v_r,
        })
    }
}

/// Linear per-clip projection followed by ReLU; the non-convolutional
/// alternative to [`Ffcnn`] used when refinement is switched off.
#[derive(Clone, Debug)]
pub struct LinearProjection {
    pub video: Linear,
    pub text: Linear,
    pub dropout_in: f64,
    d_v: usize,
    d_t: usize,
}

impl LinearProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_v: usize,
        d_t: usize,
        d: usize,
        dropout_in: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            video: Linear::new(store, &format!("{name}.video_proj"), d_v, d, rng)?,
            text: Linear::new(store, &format!("{name}.text_proj"), d_t, d, rng)?,
            dropout_in,
            d_v,
            d_t,
        })
    }

    pub fn project(&self, ctx: &mut Ctx, x: Var, which: Modality, mask: &[bool]) -> Result<Var> {
        let (lin, d_in) = match which {
            Modality::Video => (&self.video, self.d_v),
            Modality::Text => (&self.text, self.d_t),
        };
        let cols = ctx.g.value(x).cols();
        if cols != d_in {
            return Err(Error::Config(format!("projection expects {d_in} input channels, features have {cols}")));
        }
        let h = ctx.dropout(x, self.dropout_in)?;
        let h = lin.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        zero_masked_rows(ctx.g, h, Some(mask))
    }
}

/// Row-wise L2 norms `n x 1`, floored so zero rows stay differentiable.
fn row_norms(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let s = g.sum_cols(sq)?;
    let s = g.clamp(s, 1e-24, f64::INFINITY)?;
    g.sqrt(s)
}

/// Per-clip cosine between the pooled query and each refined clip: `L x 1`.
pub fn clip_query_similarity(g: &mut Graph, t_bar: Var, v_r: Var, text_mask: &[bool]) -> Result<Var> {
    let pooled = masked_mean_rows(g, t_bar, text_mask)?;
    let pt = g.transpose(pooled)?;
    let dots = g.matmul(v_r, pt)?;
    let nv = row_norms(g, v_r)?;
    let nt = row_norms(g, pooled)?;
    let den = g.mul(nv, nt)?;
    g.div(dots, den)
}

/// `1 - cos(s_hat, s_gt)` over unmasked clips, with `s_hat` from
/// [`clip_query_similarity`].
pub fn alignment_loss(
    g: &mut Graph,
    t_bar: Var,
    v_r: Var,
    gt_saliency: &[f64],
    text_mask: &[bool],
    clip_mask: &[bool],
) -> Result<Var> {
    let s_hat = clip_query_similarity(g, t_bar, v_r, text_mask)?;
    let gt = g.constant(Tensor::new(&[gt_saliency.len(), 1], gt_saliency.to_vec())?);
    cosine_loss(g, s_hat, gt, Some(clip_mask))
}
