//! Small synthetic dataset whose windows are recoverable from the features.
//!
//! Pseudo features carry no query information, so a copy of the pooled query
//! embedding, scaled by the clip's target, is added inside each window.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{build_features, Annotation, EncoderKind, FeatureSource, LEVEL_MAX};
use crate::error::{Error, Result};
use crate::train::trainer::Item;

const WORDS: &[&str] = &[
    "dog", "runs", "across", "the", "beach", "woman", "cooks", "pasta", "man", "plays", "guitar", "child", "rides",
    "bike", "crowd", "cheers", "car", "drives", "through", "rain", "cat", "jumps", "onto", "table",
];

#[derive(Clone, Copy, Debug)]
pub struct FixtureSpec {
    pub videos: usize,
    pub clips: usize,
    /// Norm of the planted query vector at the top level.
    pub signal: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            videos: 8,
            clips: 16,
            signal: 2.0,
            seed: 7,
        }
    }
}

/// Desk model sized for the fixture: 24-wide video features, 16-wide text.
/// Dropout is off since the point is to memorise; clipping is off because
/// the growing hard-loss gradient would otherwise set the clip factor for
/// every parameter, starving the decoder.
pub fn fixture_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.epochs = 300;
    c.batch_size = 1;
    c.lr = 5e-4;
    c.dropout_tx = 0.0;
    c.dropout_in = 0.0;
    c.grad_clip = None;
    c.val_fraction = 0.0;
    c.seed = 7;
    c
}

/// One window covering half to three quarters of the video, with a tent
/// of real-valued targets whose peak sits off the clip grid so that no two
/// in-window targets tie.
fn annotation(qid: i64, clips: usize, clip_len: f64, rng: &mut ChaCha8Rng) -> Annotation {
    let n_words = rng.gen_range(2..=5);
    let query: Vec<&str> = WORDS.choose_multiple(rng, n_words).copied().collect();
    let width = rng.gen_range((clips / 2).max(3)..=(3 * clips / 4).max(3));
    let start = rng.gen_range(0..=clips - width);
    let peak = start as f64 + rng.gen_range(1..width - 1) as f64 + 0.3;
    let scores: Vec<f64> = (0..clips)
        .map(|c| {
            if c < start || c >= start + width {
                0.0
            } else {
                1.0 - 0.6 * (c as f64 - peak).abs() / width as f64
            }
        })
        .collect();
    let levels = scores
        .iter()
        .map(|&v| if v > 0.0 { (v * LEVEL_MAX as f64).round().max(1.0) as u8 } else { 0 })
        .collect();
    let duration = clips as f64 * clip_len;
    Annotation {
        qid,
        query: query.join(" "),
        vid: format!("fixture{qid}"),
        duration,
        clip_len,
        relevant_windows: vec![[start as f64 * clip_len, (start + width) as f64 * clip_len]],
        saliency_levels: levels,
        relevant_clip_ids: (start..start + width).collect(),
        saliency_scores: Some(scores),
    }
}

/// Items for `spec` under `cfg`. The first video part must be CLIP-like and
/// as wide as the text features; that slice receives the planted signal.
pub fn overfit_fixture(cfg: &ModelConfig, spec: &FixtureSpec) -> Result<Vec<Item>> {
    let dv = cfg.video_parts.first().map(|p| (p.encoder, p.dim));
    if dv != Some((EncoderKind::ClipV, cfg.d_t())) {
        return Err(Error::Config("fixture needs a leading clip_v part as wide as the text features".into()));
    }
    if spec.clips == 0 || spec.clips > cfg.l_max {
        return Err(Error::Config(format!("fixture wants {} clips, l_max = {}", spec.clips, cfg.l_max)));
    }
    let dt = cfg.d_t();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.videos)
        .map(|i| {
            let ann = annotation(i as i64, spec.clips.max(3), cfg.clip_len, &mut rng);
            ann.validate()?;
            let mut bundle = build_features(&ann, &cfg.video_parts, &cfg.text_parts, cfg.n_max, &FeatureSource::Pseudo)?;
            let t = &bundle.text_feats;
            let mut pooled = vec![0.0; dt];
            for r in 0..t.rows() {
                pooled.iter_mut().zip(t.row(r)).for_each(|(p, v)| *p += v);
            }
            let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let dv = bundle.video_feats.cols();
            let data = bundle.video_feats.data_mut();
            for (c, score) in ann.target_saliency().into_iter().enumerate() {
                let k = spec.signal * score / norm;
                for j in 0..dt {
                    data[c * dv + j] += k * pooled[j];
                }
            }
            Ok(Item { ann, bundle })
        })
        .collect()
}
