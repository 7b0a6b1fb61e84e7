use crate::heads::moment::{span_iou_giou, Moment};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(pred_idx, gt_idx)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions without a ground truth; trained as background.
    pub unmatched_preds: Vec<usize>,
}

impl MatchResult {
    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Minimum-cost assignment on a rectangular cost matrix given as rows.
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut p: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(j, i)| (i, j)).collect();
        p.sort_unstable();
        return p;
    }
    // shortest augmenting paths with potentials; rows 1..=n, cols 1..=m
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Foreground probability of each row of `n_q x 2` logits (foreground first).
pub fn foreground_prob(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            1.0 / (1.0 + (r[1] - r[0]).exp())
        })
        .collect()
}

/// `cost[p][g] = l1 * (|dc| + |dw|) + giou * (1 - gIoU) - cls * p_fg`.
pub fn match_cost(
    preds: &[Moment],
    fg_prob: &[f64],
    gts: &[Moment],
    w_l1: f64,
    w_giou: f64,
    w_cls: f64,
) -> Vec<Vec<f64>> {
    preds
        .iter()
        .zip(fg_prob)
        .map(|(p, &pf)| {
            gts.iter()
                .map(|g| {
                    let l1 = (p.center - g.center).abs() + (p.width - g.width).abs();
                    let (_, giou) = span_iou_giou(p, g);
                    w_l1 * l1 + w_giou * (1.0 - giou) - w_cls * pf
                })
                .collect()
        })
        .collect()
}

pub fn hungarian_match(
    preds: &[Moment],
    fg_prob: &[f64],
    gts: &[Moment],
    w_l1: f64,
    w_giou: f64,
    w_cls: f64,
) -> MatchResult {
    let pairs = if gts.is_empty() {
        Vec::new()
    } else {
        hungarian(&match_cost(preds, fg_prob, gts, w_l1, w_giou, w_cls))
    };
    let unmatched_preds = (0..preds.len()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    MatchResult { pairs, unmatched_preds }
}

/// Sum of `cost[row][col]` over the pairs, accumulated in column order.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut by_col = pairs.to_vec();
    by_col.sort_unstable_by_key(|p| p.1);
    by_col.iter().map(|&(r, c)| cost[r][c]).sum()
}
