//! Highlight-detection losses, the joint-task feedback losses and the total
//! objective.
//!
//! Saliency vectors are `L x 1` columns on the graph. Masks select the clips
//! that take part; everything else is ignored.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Flag, Graph, Var};
use crate::nn::{Ctx, Linear};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub sal: f64,
    pub rank: f64,
    pub cont: f64,
    pub hdl: f64,
    pub ts: f64,
    pub tc: f64,
    pub align: f64,
    /// Margin of the ranking hinge.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::qvhighlights()
    }
}

impl LossWeights {
    pub fn qvhighlights() -> Self {
        Self {
            l1: 10.0,
            giou: 1.0,
            cls: 4.0,
            sal: 1.0,
            rank: 1.0,
            cont: 1.0,
            hdl: 10.0,
            ts: 1.0,
            tc: 1.0,
            align: 0.01,
            margin: 0.2,
        }
    }

    /// QVHighlights with BLIP features in both modalities.
    pub fn qvhighlights_blip() -> Self {
        Self {
            align: 0.2,
            ..Self::qvhighlights()
        }
    }

    pub fn charades_sta() -> Self {
        Self {
            align: 0.3,
            ..Self::qvhighlights()
        }
    }

    pub fn tacos() -> Self {
        Self {
            align: 0.002,
            hdl: 1.0,
            ..Self::qvhighlights()
        }
    }

    pub fn nlq() -> Self {
        Self::tacos()
    }

    pub fn zeros() -> Self {
        Self {
            l1: 0.0,
            giou: 0.0,
            cls: 0.0,
            sal: 0.0,
            rank: 0.0,
            cont: 0.0,
            hdl: 0.0,
            ts: 0.0,
            tc: 0.0,
            align: 0.0,
            margin: 0.2,
        }
    }
}

/// Every loss term that enters the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub l1: T,
    pub giou: T,
    pub cls: T,
    pub rank: T,
    pub cont: T,
    pub hard_pos: T,
    pub hard_neg: T,
    pub ts: T,
    pub tc: T,
    pub align: T,
}

impl<T: Copy> LossComponents<T> {
    pub fn named(&self) -> [(&'static str, T); 10] {
        [
            ("l1", self.l1),
            ("giou", self.giou),
            ("cls", self.cls),
            ("rank", self.rank),
            ("cont", self.cont),
            ("hard_pos", self.hard_pos),
            ("hard_neg", self.hard_neg),
            ("ts", self.ts),
            ("tc", self.tc),
            ("align", self.align),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossComponents<U> {
        LossComponents {
            l1: f(self.l1),
            giou: f(self.giou),
            cls: f(self.cls),
            rank: f(self.rank),
            cont: f(self.cont),
            hard_pos: f(self.hard_pos),
            hard_neg: f(self.hard_neg),
            ts: f(self.ts),
            tc: f(self.tc),
            align: f(self.align),
        }
    }
}

/// Coefficient of each component in the expanded total
/// `sal * (rank + cont + hdl * (pos + neg) + ts + tc) + (l1 + giou + cls) + align`.
pub fn coefficients(w: &LossWeights) -> LossComponents<f64> {
    LossComponents {
        l1: w.l1,
        giou: w.giou,
        cls: w.cls,
        rank: w.sal * w.rank,
        cont: w.sal * w.cont,
        hard_pos: w.sal * w.hdl,
        hard_neg: w.sal * w.hdl,
        ts: w.sal * w.ts,
        tc: w.sal * w.tc,
        align: w.align,
    }
}

/// Saliency, moment and total losses composed from plain numbers.
pub fn compose_total(c: &LossComponents<f64>, w: &LossWeights) -> Result<f64> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::Composition(name));
        }
    }
    let hdl = c.hard_pos + c.hard_neg;
    let uni_jfm = w.ts * c.ts + w.tc * c.tc;
    let hl = w.rank * c.rank + w.cont * c.cont + w.hdl * hdl + uni_jfm;
    let mr = w.l1 * c.l1 + w.giou * c.giou + w.cls * c.cls;
    Ok(w.sal * hl + mr + w.align * c.align)
}

/// Graph version of [`compose_total`]; terms with a zero coefficient are dropped.
pub fn compose_total_graph(g: &mut Graph, c: &LossComponents<Var>, w: &LossWeights) -> Result<Var> {
    for (name, v) in c.named() {
        if !g.value(v).is_finite() {
            return Err(Error::Composition(name));
        }
    }
    let coef = coefficients(w);
    let mut total: Option<Var> = None;
    for ((_, v), (_, k)) in c.named().into_iter().zip(coef.named()) {
        if k == 0.0 {
            continue;
        }
        let term = g.scale(v, k)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

fn check_len(g: &Graph, s: Var, n: usize, what: &str) -> Result<()> {
    if g.value(s).len() != n {
        return dim_err(format!("{what}: saliency has {} entries, expected {n}", g.value(s).len()));
    }
    Ok(())
}

fn as_column(g: &mut Graph, s: Var) -> Result<Var> {
    let (r, c) = g.value(s).dims2()?;
    if c == 1 {
        Ok(s)
    } else if r == 1 {
        g.transpose(s)
    } else {
        dim_err(format!("saliency must be a vector, got {r} x {c}"))
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// `max(0, margin + s[low] - s[high])`.
pub fn rank_loss(g: &mut Graph, s: Var, high: usize, low: usize, margin: f64) -> Result<Var> {
    let s = as_column(g, s)?;
    let n = g.value(s).rows();
    if high >= n || low >= n {
        return dim_err(format!("rank pair ({high}, {low}) out of {n} clips"));
    }
    let hi = g.slice_rows(s, high, 1)?;
    let lo = g.slice_rows(s, low, 1)?;
    let diff = g.sub(lo, hi)?;
    let m = g.add_scalar(diff, margin)?;
    g.relu(m)
}

/// One `(high, low)` pair: `high` drawn from clips at the top level present,
/// `low` from clips at the lowest level. `None` when all levels are equal.
pub fn sample_rank_pair<R: Rng + ?Sized>(levels: &[u8], mask: &[bool], rng: &mut R) -> Option<(usize, usize)> {
    let live: Vec<usize> = (0..levels.len()).filter(|&i| mask.get(i).copied().unwrap_or(true)).collect();
    let top = live.iter().map(|&i| levels[i]).max()?;
    let bottom = live.iter().map(|&i| levels[i]).min()?;
    if top == bottom {
        return None;
    }
    let highs: Vec<usize> = live.iter().copied().filter(|&i| levels[i] == top).collect();
    let lows: Vec<usize> = live.iter().copied().filter(|&i| levels[i] == bottom).collect();
    Some((highs[rng.gen_range(0..highs.len())], lows[rng.gen_range(0..lows.len())]))
}

/// `log sum exp` of the selected rows with a constant shift.
fn logsumexp_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
    let sel = g.select_rows(x, rows)?;
    let shift = g
        .value(sel)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.add_scalar(sel, -shift)?;
    let e = g.exp(shifted)?;
    let s = g.sum(e)?;
    let l = g.ln(s)?;
    g.add_scalar(l, shift)
}

/// Rank-contrastive loss: for each level threshold `r` with at least one clip
/// at or above it, `-log(sum_{gt >= r} e^{s/tau} / sum_all e^{s/tau})`,
/// averaged over active thresholds.
pub fn contrastive_loss(g: &mut Graph, s: Var, levels: &[u8], mask: &[bool], tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("contrastive temperature must be > 0, got {tau}")));
    }
    let s = as_column(g, s)?;
    check_len(g, s, levels.len(), "contrastive_loss")?;
    let live = indices(mask);
    if live.is_empty() {
        return Ok(zero(g));
    }
    let scaled = g.scale(s, 1.0 / tau)?;
    let all = logsumexp_rows(g, scaled, &live)?;
    let mut terms = Vec::new();
    for r in 1..=crate::data::LEVEL_MAX {
        let pos: Vec<usize> = live.iter().copied().filter(|&i| levels[i] >= r).collect();
        if pos.is_empty() {
            continue;
        }
        let p = logsumexp_rows(g, scaled, &pos)?;
        terms.push(g.sub(all, p)?);
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    let cat = g.concat_rows(&terms)?;
    g.mean(cat)
}

/// Unweighted hard-negative term `sum_{neg} |s_i|`.
pub fn hard_neg_base(g: &mut Graph, s: Var, neg_mask: &[bool]) -> Result<Var> {
    let s = as_column(g, s)?;
    check_len(g, s, neg_mask.len(), "hard_neg_loss")?;
    let idx = indices(neg_mask);
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let sel = g.select_rows(s, &idx)?;
    let a = g.abs(sel)?;
    g.sum(a)
}

/// `(j + 1) * sum_{neg} |s_i|`.
pub fn hard_neg_loss(g: &mut Graph, s: Var, neg_mask: &[bool], epoch: usize) -> Result<Var> {
    let base = hard_neg_base(g, s, neg_mask)?;
    g.scale(base, epoch_weight(epoch))
}

/// Unweighted hard-positive term `mean_{pos} (gt_i - s_i)^2`.
pub fn hard_pos_base(g: &mut Graph, s: Var, gt: &[f64], pos_mask: &[bool]) -> Result<Var> {
    let s = as_column(g, s)?;
    check_len(g, s, gt.len(), "hard_pos_loss")?;
    check_len(g, s, pos_mask.len(), "hard_pos_loss")?;
    let idx = indices(pos_mask);
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let sel = g.select_rows(s, &idx)?;
    let target = g.constant(Tensor::new(&[idx.len(), 1], idx.iter().map(|&i| gt[i]).collect())?);
    let d = g.sub(target, sel)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// `(j + 1) * mean_{pos} (gt_i - s_i)^2`.
pub fn hard_pos_loss(g: &mut Graph, s: Var, gt: &[f64], pos_mask: &[bool], epoch: usize) -> Result<Var> {
    let base = hard_pos_base(g, s, gt, pos_mask)?;
    g.scale(base, epoch_weight(epoch))
}

/// Epoch weight `W_j = j + 1`.
pub fn epoch_weight(epoch: usize) -> f64 {
    (epoch + 1) as f64
}

/// `1 - cos(a, b)` over the masked entries of two vectors. A zero-norm operand
/// makes the loss 1 and raises [`Flag::ZeroNorm`].
pub fn cosine_loss(g: &mut Graph, a: Var, b: Var, mask: Option<&[bool]>) -> Result<Var> {
    let a = as_column(g, a)?;
    let b = as_column(g, b)?;
    let n = g.value(a).rows();
    check_len(g, b, n, "cosine_loss")?;
    let (a, b) = match mask {
        Some(m) if m.len() != n => return dim_err("cosine_loss mask length"),
        Some(m) if m.iter().any(|&k| !k) => {
            let idx = indices(m);
            if idx.is_empty() {
                g.raise(Flag::ZeroNorm);
                return Ok(g.constant(Tensor::scalar(1.0)));
            }
            (g.select_rows(a, &idx)?, g.select_rows(b, &idx)?)
        }
        _ => (a, b),
    };
    let na: f64 = g.value(a).data().iter().map(|v| v * v).sum();
    let nb: f64 = g.value(b).data().iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        g.raise(Flag::ZeroNorm);
        return Ok(g.constant(Tensor::scalar(1.0)));
    }
    let p = g.mul(a, b)?;
    let dot = g.sum(p)?;
    let a2 = g.square(a)?;
    let a2 = g.sum(a2)?;
    let b2 = g.square(b)?;
    let b2 = g.sum(b2)?;
    let den = g.mul(a2, b2)?;
    let den = g.sqrt(den)?;
    let cos = g.div(dot, den)?;
    let neg = g.neg(cos)?;
    g.add_scalar(neg, 1.0)
}

/// Task-specific loss `1 - cos(S_pred, S_gt)`.
pub fn task_specific_loss(g: &mut Graph, s_pred: Var, s_gt: &[f64], mask: &[bool]) -> Result<Var> {
    let gt = g.constant(Tensor::new(&[s_gt.len(), 1], s_gt.to_vec())?);
    cosine_loss(g, s_pred, gt, Some(mask))
}

/// GRU that scans moment features clip by clip and reads out one saliency
/// score per hidden state.
#[derive(Clone, Debug)]
pub struct GruScorer {
    pub update: ParamId,
    pub update_bias: ParamId,
    pub reset: ParamId,
    pub reset_bias: ParamId,
    pub candidate: ParamId,
    pub candidate_bias: ParamId,
    pub readout: Linear,
    pub d: usize,
}

impl GruScorer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let mut gate = |gate: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.register(format!("{name}.{gate}.weight"), &[2 * d, d], InitScheme::XavierUniform, rng)?,
                store.register(format!("{name}.{gate}.bias"), &[d], InitScheme::Zeros, rng)?,
            ))
        };
        let (update, update_bias) = gate("update")?;
        let (reset, reset_bias) = gate("reset")?;
        let (candidate, candidate_bias) = gate("candidate")?;
        let readout = Linear::new(store, &format!("{name}.readout"), d, 1, rng)?;
        Ok(Self {
            update,
            update_bias,
            reset,
            reset_bias,
            candidate,
            candidate_bias,
            readout,
            d,
        })
    }

    fn gate(&self, ctx: &mut Ctx, xh: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = ctx.p(w);
        let b = ctx.p(b);
        let y = ctx.g.matmul(xh, w)?;
        ctx.g.add(y, b)
    }

    /// Saliency `L x 1` from `features: L x d`, scanning unmasked clips left
    /// to right from a zero state. Masked rows score 0.
    pub fn forward(&self, ctx: &mut Ctx, features: Var, mask: &[bool]) -> Result<Var> {
        let (l, d) = ctx.g.value(features).dims2()?;
        if d != self.d || mask.len() != l {
            return dim_err(format!("GRU expects L x {} features with an L mask", self.d));
        }
        let mut h = ctx.g.constant(Tensor::zeros(&[1, d]));
        let mut rows = Vec::with_capacity(l);
        for (t, &keep) in mask.iter().enumerate() {
            if !keep {
                rows.push(ctx.g.constant(Tensor::zeros(&[1, d])));
                continue;
            }
            let x = ctx.g.slice_rows(features, t, 1)?;
            let xh = ctx.g.concat_cols(&[x, h])?;
            let z = self.gate(ctx, xh, self.update, self.update_bias)?;
            let z = ctx.g.sigmoid(z)?;
            let r = self.gate(ctx, xh, self.reset, self.reset_bias)?;
            let r = ctx.g.sigmoid(r)?;
            let rh = ctx.g.mul(r, h)?;
            let xrh = ctx.g.concat_cols(&[x, rh])?;
            let c = self.gate(ctx, xrh, self.candidate, self.candidate_bias)?;
            let c = ctx.g.tanh(c)?;
            let delta = ctx.g.sub(c, h)?;
            let step = ctx.g.mul(z, delta)?;
            h = ctx.g.add(h, step)?;
            rows.push(h);
        }
        let hs = ctx.g.concat_rows(&rows)?;
        let s = self.readout.forward(ctx, hs)?;
        crate::nn::zero_masked_rows(ctx.g, s, Some(mask))
    }
}

/// Task-coupled loss `1 - cos(S_mr, S_gt)` with `S_mr` from the GRU scorer.
pub fn task_coupled_loss(
    ctx: &mut Ctx,
    gru: &GruScorer,
    moment_features: Var,
    s_gt: &[f64],
    mask: &[bool],
) -> Result<(Var, Var)> {
    let s_mr = gru.forward(ctx, moment_features, mask)?;
    let loss = task_specific_loss(ctx.g, s_mr, s_gt, mask)?;
    Ok((loss, s_mr))
}
