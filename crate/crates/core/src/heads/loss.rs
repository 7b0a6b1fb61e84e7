use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::heads::matching::MatchResult;
use crate::heads::moment::{span_giou_graph, Moment};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct MomentLosses {
    pub l1: Var,
    pub giou: Var,
    pub cls: Var,
    /// `w_l1 * l1 + w_giou * giou + w_cls * cls`.
    pub total: Var,
}

/// Set-prediction loss over decoder outputs.
///
/// `l1` averages `|dc| + |dw|` over matched pairs, `giou` averages
/// `1 - gIoU` over matched pairs, `cls` averages the weighted cross-entropy
/// over all queries (matched queries are foreground, the rest background with
/// weight `bg_weight`).
#[allow(clippy::too_many_arguments)]
pub fn moment_loss(
    g: &mut Graph,
    logits: Var,
    moments: Var,
    gts: &[Moment],
    matching: &MatchResult,
    w_l1: f64,
    w_giou: f64,
    w_cls: f64,
    bg_weight: f64,
) -> Result<MomentLosses> {
    let (n_q, c) = g.value(logits).dims2()?;
    if c != 2 || g.value(moments).dims2()? != (n_q, 2) {
        return dim_err("moment_loss expects n_q x 2 logits and moments");
    }
    let pairs = &matching.pairs;
    let (l1, giou) = if pairs.is_empty() {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let matched: Vec<Moment> = pairs.iter().map(|p| gts[p.1]).collect();
        let sel = g.select_rows(moments, &rows)?;
        let target = g.constant(Tensor::new(
            &[rows.len(), 2],
            matched.iter().flat_map(|m| [m.center, m.width]).collect(),
        )?);
        let diff = g.sub(sel, target)?;
        let ad = g.abs(diff)?;
        let s = g.sum(ad)?;
        let l1 = g.scale(s, 1.0 / rows.len() as f64)?;
        let gi = span_giou_graph(g, sel, &matched)?;
        let one_minus = g.neg(gi)?;
        let one_minus = g.add_scalar(one_minus, 1.0)?;
        (l1, g.mean(one_minus)?)
    };

    let mut pick = vec![0.0; n_q * 2];
    for i in 0..n_q {
        if matching.gt_for(i).is_some() {
            pick[i * 2] = 1.0;
        } else {
            pick[i * 2 + 1] = bg_weight;
        }
    }
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.mul_const(logp, &Tensor::new(&[n_q, 2], pick)?)?;
    let s = g.sum(picked)?;
    let cls = g.scale(s, -1.0 / n_q as f64)?;

    let a = g.scale(l1, w_l1)?;
    let b = g.scale(giou, w_giou)?;
    let c = g.scale(cls, w_cls)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(MomentLosses { l1, giou, cls, total })
}
