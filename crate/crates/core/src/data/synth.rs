//! Caption-driven synthetic pretraining data.
//!
//! A video is cut into fixed-length intervals; the middle frame of each is
//! captioned and every frame in the interval is scored by cosine similarity
//! between its embedding and the caption's.

use crate::data::annotation::clip_count;
use crate::data::features::{pseudo_encode, EncoderKind};
use crate::data::{Annotation, LEVEL_MAX};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
}

/// What the embedder is asked to embed.
#[derive(Clone, Copy, Debug)]
pub enum Embeddable<'a> {
    Text(&'a str),
    Frame(&'a Frame),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    pub caption: String,
    pub interval: [f64; 2],
    pub frame_times: Vec<f64>,
    pub saliency: Vec<f64>,
    /// Set when some frame or the caption embedded to a zero vector.
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    pub interval_len: f64,
    /// Spacing of sampled frames, starting at t = 0.
    pub frame_step: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            interval_len: 10.0,
            frame_step: 1.0,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

pub fn generate_synthetic<C, E>(
    duration: f64,
    captioner: C,
    embedder: E,
    opts: SynthOptions,
) -> Result<Vec<SyntheticRecord>>
where
    C: Fn(&Frame) -> String,
    E: Fn(Embeddable<'_>) -> Vec<f64>,
{
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Invalid(format!("duration must be > 0, got {duration}")));
    }
    if !(opts.interval_len > 0.0 && opts.frame_step > 0.0) {
        return Err(Error::Config("interval length and frame step must be positive".into()));
    }
    let n = clip_count(duration, opts.interval_len);
    let frames: Vec<Frame> = (0..)
        .map(|k| Frame {
            index: k,
            time: k as f64 * opts.frame_step,
        })
        .take_while(|f| f.time < duration)
        .collect();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i as f64 * opts.interval_len;
        let end = if i + 1 == n {
            duration
        } else {
            (i + 1) as f64 * opts.interval_len
        };
        let mut inside: Vec<Frame> = frames
            .iter()
            .copied()
            .filter(|f| f.time >= start && f.time < end)
            .collect();
        if inside.is_empty() {
            inside.push(Frame {
                index: frames.len() + i,
                time: 0.5 * (start + end),
            });
        }
        let representative = inside[inside.len() / 2];
        let caption = captioner(&representative);
        let cap_vec = embedder(Embeddable::Text(&caption));
        let mut flagged = false;
        let saliency = inside
            .iter()
            .map(|f| {
                cosine(&cap_vec, &embedder(Embeddable::Frame(f))).unwrap_or_else(|| {
                    flagged = true;
                    0.0
                })
            })
            .collect();
        out.push(SyntheticRecord {
            caption,
            interval: [start, end],
            frame_times: inside.iter().map(|f| f.time).collect(),
            saliency,
            flagged,
        });
    }
    Ok(out)
}

/// Annotation whose query is the caption and whose single window is the
/// interval. Clip targets average the frame scores falling in each clip.
pub fn record_to_annotation(
    record: &SyntheticRecord,
    qid: i64,
    vid: &str,
    duration: f64,
    clip_len: f64,
) -> Result<Annotation> {
    let l = clip_count(duration, clip_len);
    let mut scores = vec![0.0; l];
    let mut levels = vec![0u8; l];
    let mut ids = Vec::new();
    let [s, e] = record.interval;
    for c in 0..l {
        let (cs, ce) = (c as f64 * clip_len, (c + 1) as f64 * clip_len);
        if !(s < ce && e > cs) {
            continue;
        }
        let vals: Vec<f64> = record
            .frame_times
            .iter()
            .zip(&record.saliency)
            .filter(|(t, _)| **t >= cs && **t < ce)
            .map(|(_, v)| *v)
            .collect();
        ids.push(c);
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        scores[c] = mean;
        levels[c] = (mean.max(0.0) * LEVEL_MAX as f64).round() as u8;
    }
    let ann = Annotation {
        qid,
        query: record.caption.clone(),
        vid: vid.to_string(),
        duration,
        clip_len,
        relevant_windows: vec![record.interval],
        saliency_levels: levels,
        relevant_clip_ids: ids,
        saliency_scores: Some(scores),
    };
    ann.validate()?;
    Ok(ann)
}

/// Captioner/embedder pair backed by the pseudo encoders, for runs without
/// real vision-language models.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    pub vid: String,
    pub dim: usize,
}

impl StubEmbedder {
    pub fn new(vid: &str, dim: usize) -> Self {
        Self {
            vid: vid.to_string(),
            dim,
        }
    }

    pub fn caption(&self, f: &Frame) -> String {
        format!("scene from {} at {:.0} seconds", self.vid, f.time)
    }

    pub fn embed(&self, x: Embeddable<'_>) -> Vec<f64> {
        let t = match x {
            Embeddable::Text(s) => pseudo_encode(EncoderKind::ClipT, s, 1, self.dim),
            Embeddable::Frame(f) => {
                pseudo_encode(EncoderKind::ClipV, &format!("{}@{}", self.vid, f.time), 1, self.dim)
            }
        };
        t.map(|t| t.into_data()).unwrap_or_default()
    }
}
