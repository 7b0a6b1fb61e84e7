use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Narrowest span used when comparing moments.
pub const MIN_WIDTH: f64 = 1e-4;
const AREA_FLOOR: f64 = 1e-12;

/// Temporal span normalised by video duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub center: f64,
    pub width: f64,
}

impl Moment {
    pub fn new(center: f64, width: f64) -> Self {
        Self { center, width }
    }

    pub fn from_span(start: f64, end: f64) -> Self {
        Self {
            center: 0.5 * (start + end),
            width: end - start,
        }
    }

    pub fn span(&self) -> [f64; 2] {
        [self.center - 0.5 * self.width, self.center + 0.5 * self.width]
    }

    /// Span clipped to `[0, 1]` with the width floored first; same arithmetic
    /// as [`span_giou_graph`].
    pub fn clipped_span(&self) -> [f64; 2] {
        let w = self.width.max(MIN_WIDTH);
        [
            (self.center - 0.5 * w).clamp(0.0, 1.0),
            (self.center + 0.5 * w).clamp(0.0, 1.0),
        ]
    }

    /// Span in seconds for a video of `duration`.
    pub fn to_seconds(&self, duration: f64) -> [f64; 2] {
        let [s, e] = self.clipped_span();
        [s * duration, e * duration]
    }
}

/// IoU and gIoU of two clipped spans, tolerant of degenerate inputs.
pub fn span_iou_giou(a: &Moment, b: &Moment) -> (f64, f64) {
    let [s1, e1] = a.clipped_span();
    let [s2, e2] = b.clipped_span();
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = ((e1 - s1) + (e2 - s2) - inter).max(AREA_FLOOR);
    let encl = (e1.max(e2) - s1.min(s2)).max(AREA_FLOOR);
    let iou = inter / union;
    (iou, iou - (encl - union) / encl)
}

/// Differentiable gIoU between rows of `pred: n x 2` (center, width) and the
/// fixed moments `gt` (one per row). Returns `n x 1`.
pub fn span_giou_graph(g: &mut Graph, pred: Var, gt: &[Moment]) -> Result<Var> {
    let n = gt.len();
    let c = g.slice_cols(pred, 0, 1)?;
    let w = g.slice_cols(pred, 1, 1)?;
    let w = g.clamp(w, MIN_WIDTH, f64::INFINITY)?;
    let half = g.scale(w, 0.5)?;
    let s1 = g.sub(c, half)?;
    let s1 = g.clamp(s1, 0.0, 1.0)?;
    let e1 = g.add(c, half)?;
    let e1 = g.clamp(e1, 0.0, 1.0)?;
    let spans: Vec<[f64; 2]> = gt.iter().map(Moment::clipped_span).collect();
    let s2 = g.constant(Tensor::new(&[n, 1], spans.iter().map(|s| s[0]).collect())?);
    let e2 = g.constant(Tensor::new(&[n, 1], spans.iter().map(|s| s[1]).collect())?);

    let lo = g.maximum(s1, s2)?;
    let hi = g.minimum(e1, e2)?;
    let inter = g.sub(hi, lo)?;
    let inter = g.relu(inter)?;
    let len1 = g.sub(e1, s1)?;
    let len2 = g.sub(e2, s2)?;
    let sum = g.add(len1, len2)?;
    let union = g.sub(sum, inter)?;
    let union = g.clamp(union, AREA_FLOOR, f64::INFINITY)?;
    let el = g.minimum(s1, s2)?;
    let eh = g.maximum(e1, e2)?;
    let encl = g.sub(eh, el)?;
    let encl = g.clamp(encl, AREA_FLOOR, f64::INFINITY)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(encl, union)?;
    let gap = g.div(gap, encl)?;
    g.sub(iou, gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_round_trip() {
        let m = Moment::from_span(0.3, 0.7);
        assert!((m.center - 0.5).abs() < 1e-15 && (m.width - 0.4).abs() < 1e-15);
        let [s, e] = m.span();
        assert!((s - 0.3).abs() < 1e-15 && (e - 0.7).abs() < 1e-15);
        assert_eq!(Moment::new(0.5, 0.2).to_seconds(10.0), [4.0, 6.0]);
    }

    #[test]
    fn clipping_keeps_spans_in_range() {
        let [s, e] = Moment::new(0.95, 0.3).clipped_span();
        assert_eq!(e, 1.0);
        assert!((s - 0.8).abs() < 1e-12);
        let [s, e] = Moment::new(0.5, 0.0).clipped_span();
        assert!((e - s - MIN_WIDTH).abs() < 1e-15);
    }

    #[test]
    fn giou_example() {
        let (iou, giou) = span_iou_giou(&Moment::new(0.5, 0.2), &Moment::new(0.5, 0.4));
        assert!((iou - 0.5).abs() < 1e-12 && (giou - 0.5).abs() < 1e-12);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::matrix(2, 2, vec![0.5, 0.2, 0.1, 0.1]).unwrap());
        let gts = [Moment::new(0.5, 0.4), Moment::new(0.8, 0.2)];
        let out = span_giou_graph(&mut g, p, &gts).unwrap();
        for (i, gt) in gts.iter().enumerate() {
            let row = g.value(p).row(i);
            let (_, want) = span_iou_giou(&Moment::new(row[0], row[1]), gt);
            assert!((g.value(out).at(i, 0) - want).abs() < 1e-15);
        }
    }
}
