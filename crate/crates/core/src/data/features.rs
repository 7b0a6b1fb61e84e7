use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Frozen encoder a feature block stands in for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ClipV,
    ClipT,
    BlipV,
    BlipT,
    Slowfast,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::ClipV => "clip_v",
            EncoderKind::ClipT => "clip_t",
            EncoderKind::BlipV => "blip_v",
            EncoderKind::BlipT => "blip_t",
            EncoderKind::Slowfast => "slowfast",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePart {
    pub encoder: EncoderKind,
    pub dim: usize,
}

impl FeaturePart {
    pub const fn new(encoder: EncoderKind, dim: usize) -> Self {
        Self { encoder, dim }
    }
}

/// FNV-1a over `kind \0 id`, reduced mod 1000.
pub fn encoder_hash(kind: EncoderKind, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in kind.name().bytes().chain([0u8]).chain(id.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h % 1000
}

/// Deterministic stand-in for a frozen encoder:
/// `value[i][j] = 0.5 * sin(h + i * dim + j)`.
pub fn pseudo_encode(kind: EncoderKind, id: &str, length: usize, dim: usize) -> Result<Tensor> {
    if length == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "pseudo encoder needs length, dim >= 1 (got {length} x {dim})"
        )));
    }
    let h = encoder_hash(kind, id) as f64;
    let data = (0..length * dim)
        .map(|n| {
            let (i, j) = (n / dim, n % dim);
            0.5 * (h + (i * dim) as f64 + j as f64).sin()
        })
        .collect();
    Tensor::new(&[length, dim], data)
}

/// Channel-axis concatenation in part order.
pub fn concat_features(parts: &[Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return dim_err("concat_features needs at least one part");
    };
    let l = first.dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pl, pd) = p.dims2()?;
        if pl != l {
            return dim_err(format!("feature parts disagree on length: {pl} vs {l}"));
        }
        widths.push(pd);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(l * total);
    for i in 0..l {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(&[l, total], data)
}

/// Model inputs for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub video_feats: Tensor,
    pub text_feats: Tensor,
    pub video_mask: Vec<bool>,
    pub text_mask: Vec<bool>,
}

impl FeatureBundle {
    pub fn new(video_feats: Tensor, text_feats: Tensor) -> Result<Self> {
        let l = video_feats.dims2()?.0;
        let n = text_feats.dims2()?.0;
        Ok(Self {
            video_feats,
            text_feats,
            video_mask: vec![true; l],
            text_mask: vec![true; n],
        })
    }

    pub fn num_clips(&self) -> usize {
        self.video_feats.rows()
    }

    pub fn num_tokens(&self) -> usize {
        self.text_feats.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_mask.len() != self.num_clips() || self.text_mask.len() != self.num_tokens() {
            return dim_err("mask lengths must match feature lengths");
        }
        self.video_feats.check_finite("video features")?;
        self.text_feats.check_finite("text features")
    }
}

/// Where feature blocks come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Pseudo,
    /// Directory of `VLFT` files named `<vid>.<encoder>.vlft` for video and
    /// `q<qid>.<encoder>.vlft` for text.
    Dir(PathBuf),
}

/// Query tokens seen by the text encoder: whitespace words, capped at `n_max`.
fn token_count(query: &str, n_max: usize) -> usize {
    query.split_whitespace().count().clamp(1, n_max.max(1))
}

pub fn build_features(
    ann: &Annotation,
    video_parts: &[FeaturePart],
    text_parts: &[FeaturePart],
    n_max: usize,
    source: &FeatureSource,
) -> Result<FeatureBundle> {
    let l = ann.num_clips();
    let n = token_count(&ann.query, n_max);
    let load = |part: &FeaturePart, file: String, len: Option<usize>, id: &str| -> Result<Tensor> {
        let t = match source {
            FeatureSource::Pseudo => pseudo_encode(part.encoder, id, len.unwrap_or(n), part.dim)?,
            FeatureSource::Dir(dir) => read_feature_file(dir.join(file))?,
        };
        let (tl, td) = t.dims2()?;
        if td != part.dim {
            return Err(Error::Config(format!(
                "{} features for {id} have dim {td}, configured {}",
                part.encoder.name(),
                part.dim
            )));
        }
        if let Some(expect) = len {
            if tl != expect {
                return dim_err(format!("{} features for {id}: {tl} rows, expected {expect}", part.encoder.name()));
            }
        }
        Ok(t)
    };
    let video = video_parts
        .iter()
        .map(|p| load(p, format!("{}.{}.vlft", ann.vid, p.encoder.name()), Some(l), &ann.vid))
        .collect::<Result<Vec<_>>>()?;
    let text = text_parts
        .iter()
        .map(|p| {
            let t = load(p, format!("q{}.{}.vlft", ann.qid, p.encoder.name()), None, &ann.query)?;
            // real token streams may exceed the padded query width
            if t.rows() > n_max {
                let d = t.cols();
                return Tensor::new(&[n_max, d], t.data()[..n_max * d].to_vec());
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureBundle::new(concat_features(&video)?, concat_features(&text)?)
}

const MAGIC: &[u8; 4] = b"VLFT";

/// Header: magic `VLFT`, u32 rows, u32 cols, u32 reserved (zero), then
/// row-major little-endian f32 values.
pub fn write_feature_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (l, d) = t.dims2()?;
    let mut buf = Vec::with_capacity(16 + 4 * l * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let err = |m: &str| Error::Feature(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(err("missing VLFT header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (l, d) = (u32_at(4), u32_at(8));
    if l == 0 || d == 0 {
        return Err(err("empty feature block"));
    }
    if bytes.len() != 16 + 4 * l * d {
        return Err(err(&format!("payload size does not match {l} x {d}")));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[l, d], data)
}
