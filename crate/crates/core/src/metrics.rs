//! Moment-retrieval and highlight-detection metrics.
//!
//! Predicted windows are `[start, end, score]`; ties in score always go to
//! the lower index.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};

pub type Window = [f64; 2];
pub type ScoredWindow = [f64; 3];

fn check(a: &Window) -> Result<()> {
    if !(a[0].is_finite() && a[1].is_finite() && a[0] < a[1]) {
        return Err(Error::Invalid(format!("degenerate interval {a:?}")));
    }
    Ok(())
}

pub fn iou_1d(a: &Window, b: &Window) -> Result<f64> {
    check(a)?;
    check(b)?;
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    Ok(inter / union)
}

/// The enclosure exceeds the union by exactly the gap between the intervals,
/// so the gap is used directly: overlapping or touching pairs get
/// `giou == iou` with no rounding residue.
pub fn giou_1d(a: &Window, b: &Window) -> Result<f64> {
    let iou = iou_1d(a, b)?;
    let gap = (a[0].max(b[0]) - a[1].min(b[1])).max(0.0);
    let encl = a[1].max(b[1]) - a[0].min(b[0]);
    Ok(iou - gap / encl)
}

/// IoU that scores malformed predictions as no overlap.
fn iou_or_zero(p: &[f64], g: &Window) -> f64 {
    iou_1d(&[p[0], p[1]], g).unwrap_or(0.0)
}

/// Indices by decreasing score, ties to the lower index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn top1(preds: &[ScoredWindow]) -> Option<&ScoredWindow> {
    let scores: Vec<f64> = preds.iter().map(|p| p[2]).collect();
    rank_desc(&scores).first().map(|&i| &preds[i])
}

fn best_iou(p: &ScoredWindow, gts: &[Window]) -> f64 {
    gts.iter().map(|g| iou_or_zero(p, g)).fold(0.0, f64::max)
}

pub fn recall_at_1(preds: &[Vec<ScoredWindow>], gts: &[Vec<Window>], thr: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| top1(p).is_some_and(|t| best_iou(t, g) >= thr))
        .count();
    hits as f64 / preds.len() as f64
}

pub fn mean_iou(preds: &[Vec<ScoredWindow>], gts: &[Vec<Window>]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| top1(p).map_or(0.0, |t| best_iou(t, g)))
        .sum();
    total / preds.len() as f64
}

/// Area under the precision envelope of a ranked hit list, normalised by
/// `n_pos`.
fn interpolated_ap(hits: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_pos as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Average precision of one query at one IoU threshold. Each prediction, in
/// rank order, claims the unclaimed ground truth it overlaps most if that
/// overlap reaches `thr`.
pub fn average_precision(preds: &[ScoredWindow], gts: &[Window], thr: f64) -> f64 {
    let scores: Vec<f64> = preds.iter().map(|p| p[2]).collect();
    let mut taken = vec![false; gts.len()];
    let hits: Vec<bool> = rank_desc(&scores)
        .into_iter()
        .map(|i| {
            let best = (0..gts.len())
                .filter(|&j| !taken[j])
                .map(|j| (j, iou_or_zero(&preds[i], &gts[j])))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= thr => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    interpolated_ap(&hits, gts.len())
}

pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAp {
    pub ap_at: Vec<(f64, f64)>,
    pub avg: f64,
}

impl MeanAp {
    pub fn at(&self, thr: f64) -> Option<f64> {
        self.ap_at.iter().find(|(t, _)| (t - thr).abs() < 1e-9).map(|x| x.1)
    }
}

/// Per-threshold AP averaged over queries with at least one ground truth,
/// and the mean over thresholds.
pub fn mean_ap(preds: &[Vec<ScoredWindow>], gts: &[Vec<Window>], thresholds: &[f64]) -> MeanAp {
    let queries: Vec<usize> = (0..preds.len().min(gts.len())).filter(|&q| !gts[q].is_empty()).collect();
    let ap_at: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let s: f64 = queries.iter().map(|&q| average_precision(&preds[q], &gts[q], t)).sum();
            (t, if queries.is_empty() { 0.0 } else { s / queries.len() as f64 })
        })
        .collect();
    let avg = if ap_at.is_empty() {
        0.0
    } else {
        ap_at.iter().map(|x| x.1).sum::<f64>() / ap_at.len() as f64
    };
    MeanAp { ap_at, avg }
}

/// 1 when the top-scored clip reaches `very_good`.
pub fn hit_at_1(pred: &[f64], levels: &[u8], very_good: u8) -> f64 {
    match rank_desc(pred).first() {
        Some(&i) if levels.get(i).is_some_and(|&l| l >= very_good) => 1.0,
        _ => 0.0,
    }
}

/// Mean of the precision at each positive when clips are ranked by `pred`.
pub fn saliency_ap(pred: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    if pred.len() != positive.len() {
        return Some(0.0);
    }
    let mut tp = 0;
    let mut total = 0.0;
    for (rank, i) in rank_desc(pred).into_iter().enumerate() {
        if positive[i] {
            tp += 1;
            total += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

/// Highlight mAP; queries without a positive clip are skipped. `None` when
/// no query has one.
pub fn hd_map(preds: &[Vec<f64>], levels: &[Vec<u8>], very_good: u8) -> Option<f64> {
    let aps: Vec<f64> = preds
        .iter()
        .zip(levels)
        .filter_map(|(p, l)| {
            let pos: Vec<bool> = l.iter().map(|&v| v >= very_good).collect();
            saliency_ap(p, &pos)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Top-5 mAP: for each annotator the top half of clips by that annotator's
/// scores are positive; the model's five best clips are scored by AP,
/// normalised by the positives retrieved among them.
pub fn top5_map_tvsum(pred: &[f64], annotator_scores: &[Vec<f64>]) -> f64 {
    if annotator_scores.is_empty() || pred.is_empty() {
        return 0.0;
    }
    let l = pred.len();
    let k = l.min(5);
    let top = &rank_desc(pred)[..k];
    let total: f64 = annotator_scores
        .iter()
        .map(|scores| {
            let mut pos = vec![false; l];
            for &i in &rank_desc(scores)[..l.div_ceil(2)] {
                pos[i] = true;
            }
            let mut tp = 0;
            let mut sum = 0.0;
            for (r, &i) in top.iter().enumerate() {
                if pos[i] {
                    tp += 1;
                    sum += tp as f64 / (r + 1) as f64;
                }
            }
            if tp == 0 {
                0.0
            } else {
                sum / tp as f64
            }
        })
        .sum();
    total / annotator_scores.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r1_050: f64,
    pub r1_070: f64,
    pub map_050: f64,
    pub map_075: f64,
    pub map_avg: f64,
    pub hd_map: f64,
    pub hit_at_1: f64,
    pub miou: f64,
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub qid: i64,
    pub pred_relevant_windows: Vec<ScoredWindow>,
    pub pred_saliency_scores: Vec<f64>,
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[QueryPrediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<QueryPrediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Every report metric; `very_good` is the highlight level threshold.
pub fn compute_report(preds: &[QueryPrediction], anns: &[Annotation], very_good: u8) -> Result<MetricReport> {
    if anns.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let by_qid: HashMap<i64, &QueryPrediction> = preds.iter().map(|p| (p.qid, p)).collect();
    let mut windows = Vec::with_capacity(anns.len());
    let mut gts = Vec::with_capacity(anns.len());
    let mut sal = Vec::with_capacity(anns.len());
    let mut levels = Vec::with_capacity(anns.len());
    let mut hits = 0.0;
    for a in anns {
        let p = by_qid.get(&a.qid).copied();
        windows.push(p.map(|p| p.pred_relevant_windows.clone()).unwrap_or_default());
        gts.push(a.relevant_windows.clone());
        let s = p.map(|p| p.pred_saliency_scores.clone()).unwrap_or_default();
        hits += hit_at_1(&s, &a.saliency_levels, very_good);
        sal.push(s);
        levels.push(a.saliency_levels.clone());
    }
    let m = mean_ap(&windows, &gts, &default_thresholds());
    Ok(MetricReport {
        r1_050: recall_at_1(&windows, &gts, 0.5),
        r1_070: recall_at_1(&windows, &gts, 0.7),
        map_050: m.at(0.5).unwrap_or(0.0),
        map_075: m.at(0.75).unwrap_or(0.0),
        map_avg: m.avg,
        hd_map: hd_map(&sal, &levels, very_good).unwrap_or(0.0),
        hit_at_1: hits / anns.len() as f64,
        miou: mean_iou(&windows, &gts),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
