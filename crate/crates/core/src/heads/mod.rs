//! Transformer encoder/decoder, prediction heads, set matching and the
//! moment loss.

mod loss;
mod matching;
mod moment;
mod transformer;

pub use loss::{moment_loss, MomentLosses};
pub use matching::{assignment_cost, foreground_prob, hungarian, hungarian_match, match_cost, MatchResult};
pub use moment::{span_giou_graph, span_iou_giou, Moment, MIN_WIDTH};
pub use transformer::{predict_saliency, Decoder, DecoderLayer, DecoderOutput, Encoder, EncoderLayer, SaliencyHead};

use crate::tensor::Tensor;

/// Plain-value model outputs for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub moments: Vec<Moment>,
    /// `n_q x 2`, foreground first.
    pub class_logits: Tensor,
    pub saliency: Vec<f64>,
}

impl PredictionSet {
    pub fn foreground(&self) -> Vec<f64> {
        foreground_prob(&self.class_logits)
    }

    /// `(moment, confidence)` by decreasing confidence, ties to the lower index.
    pub fn ranked(&self) -> Vec<(Moment, f64)> {
        let fg = self.foreground();
        let mut idx: Vec<usize> = (0..self.moments.len()).collect();
        idx.sort_by(|&a, &b| fg[b].total_cmp(&fg[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| (self.moments[i], fg[i])).collect()
    }
}
