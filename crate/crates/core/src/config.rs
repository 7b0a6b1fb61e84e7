use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncoderKind, FeaturePart};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Cross-modal fusion variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossModal {
    /// Three-stage bidirectional fusion.
    Bi,
    /// Single text-to-video cross-attention stage (ablation).
    Uni,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Padded query width; also the width of the correspondence map.
    pub n_max: usize,
    /// Longest video in clips; sizes the video positional table.
    pub l_max: usize,
    pub ffn_dim: usize,
    pub ffcnn_layers: usize,
    pub kernel: usize,
    pub refine_kernel: usize,
    pub bicmf_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub dropout_tx: f64,
    pub dropout_in: f64,
    pub video_parts: Vec<FeaturePart>,
    pub text_parts: Vec<FeaturePart>,
    pub use_fra: bool,
    pub cross_modal: CrossModal,
    pub clip_len: f64,
    pub tau: f64,
    /// Weight of the background class in the classification loss.
    pub bg_weight: f64,
    pub losses: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 8,
            n_max: 32,
            l_max: 75,
            ffn_dim: 1024,
            ffcnn_layers: 2,
            kernel: 3,
            refine_kernel: 3,
            bicmf_layers: 1,
            enc_layers: 3,
            dec_layers: 3,
            n_queries: 10,
            dropout_tx: 0.1,
            dropout_in: 0.5,
            video_parts: vec![
                FeaturePart::new(EncoderKind::ClipV, 512),
                FeaturePart::new(EncoderKind::Slowfast, 2304),
            ],
            text_parts: vec![FeaturePart::new(EncoderKind::ClipT, 512)],
            use_fra: true,
            cross_modal: CrossModal::Bi,
            clip_len: 2.0,
            tau: 0.5,
            bg_weight: 0.1,
            losses: LossWeights::qvhighlights(),
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 32,
            grad_clip: Some(0.1),
            val_fraction: 0.1,
            seed: 2018,
        }
    }
}

impl ModelConfig {
    /// Small model that trains in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            d: 32,
            heads: 2,
            n_max: 8,
            l_max: 16,
            ffn_dim: 64,
            n_queries: 10,
            video_parts: vec![
                FeaturePart::new(EncoderKind::ClipV, 16),
                FeaturePart::new(EncoderKind::Slowfast, 8),
            ],
            text_parts: vec![FeaturePart::new(EncoderKind::ClipT, 16)],
            ..Self::default()
        }
    }

    /// QVHighlights with CLIP + SlowFast + BLIP-2 video and CLIP + BLIP-2 text.
    pub fn qvhighlights_blip() -> Self {
        Self {
            video_parts: vec![
                FeaturePart::new(EncoderKind::ClipV, 512),
                FeaturePart::new(EncoderKind::Slowfast, 2304),
                FeaturePart::new(EncoderKind::BlipV, 768),
            ],
            text_parts: vec![
                FeaturePart::new(EncoderKind::ClipT, 512),
                FeaturePart::new(EncoderKind::BlipT, 768),
            ],
            losses: LossWeights::qvhighlights_blip(),
            ..Self::default()
        }
    }

    pub fn charades_sta() -> Self {
        Self {
            losses: LossWeights::charades_sta(),
            ..Self::default()
        }
    }

    pub fn tacos() -> Self {
        Self {
            losses: LossWeights::tacos(),
            lr: 2e-4,
            epochs: 150,
            ..Self::default()
        }
    }

    pub fn d_v(&self) -> usize {
        self.video_parts.iter().map(|p| p.dim).sum()
    }

    pub fn d_t(&self) -> usize {
        self.text_parts.iter().map(|p| p.dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("n_max", self.n_max),
            ("l_max", self.l_max),
            ("ffn_dim", self.ffn_dim),
            ("ffcnn_layers", self.ffcnn_layers),
            ("bicmf_layers", self.bicmf_layers),
            ("n_queries", self.n_queries),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d = {}", self.heads, self.d));
        }
        if self.kernel.is_multiple_of(2) || self.refine_kernel.is_multiple_of(2) {
            return bad("convolution kernels must be odd".into());
        }
        for (name, p) in [("dropout_tx", self.dropout_tx), ("dropout_in", self.dropout_in)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if self.video_parts.is_empty() || self.text_parts.is_empty() {
            return bad("each modality needs at least one feature part".into());
        }
        if self.video_parts.iter().chain(&self.text_parts).any(|p| p.dim == 0) {
            return bad("feature part dims must be positive".into());
        }
        if !(self.clip_len > 0.0 && self.tau > 0.0 && self.lr > 0.0) {
            return bad("clip_len, tau and lr must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.bg_weight >= 0.0) {
            return bad("weight_decay and bg_weight must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        let w = &self.losses;
        let all = [
            w.l1, w.giou, w.cls, w.sal, w.rank, w.cont, w.hdl, w.ts, w.tc, w.align, w.margin,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let c = ModelConfig::default();
        assert_eq!((c.d, c.bicmf_layers, c.enc_layers, c.dec_layers, c.n_queries), (256, 1, 3, 3, 10));
        assert_eq!((c.dropout_tx, c.dropout_in), (0.1, 0.5));
        assert_eq!((c.lr, c.weight_decay, c.epochs), (1e-4, 1e-4, 200));
        let w = c.losses;
        assert_eq!((w.l1, w.giou, w.cls, w.margin), (10.0, 1.0, 4.0, 0.2));
        assert_eq!((w.align, w.tc, w.hdl, w.ts), (0.01, 1.0, 10.0, 1.0));
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn dataset_presets() {
        assert_eq!(ModelConfig::qvhighlights_blip().losses.align, 0.2);
        assert_eq!(ModelConfig::qvhighlights_blip().d_v(), 3584);
        assert_eq!(ModelConfig::charades_sta().losses.align, 0.3);
        let t = ModelConfig::tacos();
        assert_eq!((t.losses.align, t.losses.hdl, t.lr, t.epochs), (0.002, 1.0, 2e-4, 150));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.kernel = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.dropout_in = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ModelConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let partial: ModelConfig = serde_json::from_str(r#"{"d": 64, "losses": {"align": 0.3}}"#).unwrap();
        assert_eq!(partial.d, 64);
        assert_eq!(partial.heads, 8);
        assert_eq!(partial.losses.align, 0.3);
        assert_eq!(partial.losses.l1, 10.0);
    }
}
