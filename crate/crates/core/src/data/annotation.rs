use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::heads::Moment;

/// Highest saliency level; levels run `0..=LEVEL_MAX`.
pub const LEVEL_MAX: u8 = 4;

fn default_clip_len() -> f64 {
    2.0
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LevelEntry {
    Single(f64),
    Annotators(Vec<f64>),
}

/// Per-clip levels may be given directly or as one list per clip holding
/// every annotator's rating; the latter is reduced by mean then rounding.
fn levels<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
    let raw = Vec::<LevelEntry>::deserialize(de)?;
    Ok(raw
        .into_iter()
        .map(|e| match e {
            LevelEntry::Single(v) => v,
            LevelEntry::Annotators(vs) if vs.is_empty() => f64::NAN,
            LevelEntry::Annotators(vs) => (vs.iter().sum::<f64>() / vs.len() as f64).round(),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    qid: i64,
    query: String,
    vid: String,
    duration: f64,
    #[serde(default = "default_clip_len")]
    clip_len: f64,
    relevant_windows: Vec<[f64; 2]>,
    #[serde(deserialize_with = "levels")]
    saliency_levels: Vec<f64>,
    #[serde(default)]
    relevant_clip_ids: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    saliency_scores: Option<Vec<f64>>,
}

/// One query over one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotation")]
pub struct Annotation {
    pub qid: i64,
    pub query: String,
    pub vid: String,
    pub duration: f64,
    pub clip_len: f64,
    pub relevant_windows: Vec<[f64; 2]>,
    pub saliency_levels: Vec<u8>,
    pub relevant_clip_ids: Vec<usize>,
    /// Real-valued per-clip targets; when absent targets are `level / 4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency_scores: Option<Vec<f64>>,
}

impl TryFrom<RawAnnotation> for Annotation {
    type Error = Error;

    fn try_from(raw: RawAnnotation) -> Result<Self> {
        let qid = raw.qid;
        let bad = |field: &'static str, message: String| Error::Validation {
            qid,
            field,
            message,
        };
        let mut levels = Vec::with_capacity(raw.saliency_levels.len());
        for &v in &raw.saliency_levels {
            if !(v.is_finite() && v >= 0.0 && v <= LEVEL_MAX as f64 && v.fract() == 0.0) {
                return Err(bad(
                    "saliency_levels",
                    format!("level {v} outside integer range 0..={LEVEL_MAX}"),
                ));
            }
            levels.push(v as u8);
        }
        let ids = match raw.relevant_clip_ids {
            Some(ids) => {
                let mut out = Vec::with_capacity(ids.len());
                for id in ids {
                    if id < 0 {
                        return Err(bad("relevant_clip_ids", format!("negative clip id {id}")));
                    }
                    out.push(id as usize);
                }
                out
            }
            None => Vec::new(),
        };
        let mut ann = Annotation {
            qid,
            query: raw.query,
            vid: raw.vid,
            duration: raw.duration,
            clip_len: raw.clip_len,
            relevant_windows: raw.relevant_windows,
            saliency_levels: levels,
            relevant_clip_ids: ids,
            saliency_scores: raw.saliency_scores,
        };
        if ann.relevant_clip_ids.is_empty() {
            ann.relevant_clip_ids = ann.clips_in_windows();
        }
        ann.validate()?;
        Ok(ann)
    }
}

impl Annotation {
    /// `ceil(duration / clip_len)`, tolerant to float noise in the ratio.
    pub fn num_clips(&self) -> usize {
        clip_count(self.duration, self.clip_len)
    }

    /// Clips overlapping any relevant window.
    pub fn clips_in_windows(&self) -> Vec<usize> {
        let l = self.num_clips();
        (0..l)
            .filter(|&i| {
                let (cs, ce) = (i as f64 * self.clip_len, (i + 1) as f64 * self.clip_len);
                self.relevant_windows
                    .iter()
                    .any(|w| w[0] < ce - 1e-9 && w[1] > cs + 1e-9)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: String| Error::Validation {
            qid: self.qid,
            field,
            message,
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(bad("duration", format!("must be > 0, got {}", self.duration)));
        }
        if !(self.clip_len.is_finite() && self.clip_len > 0.0) {
            return Err(bad("clip_len", format!("must be > 0, got {}", self.clip_len)));
        }
        for w in &self.relevant_windows {
            if !(w[0].is_finite() && w[1].is_finite()) || w[0] < 0.0 {
                return Err(bad("relevant_windows", format!("{w:?} violates 0 ≤ start")));
            }
            if w[0] >= w[1] {
                return Err(bad("relevant_windows", format!("{w:?} violates start < end")));
            }
            if w[1] > self.duration + 1e-9 {
                return Err(bad(
                    "relevant_windows",
                    format!("{w:?} violates end ≤ duration ({})", self.duration),
                ));
            }
        }
        let l = self.num_clips();
        if self.saliency_levels.len() != l {
            return Err(bad(
                "saliency_levels",
                format!("expected {l} entries (ceil(duration/clip_len)), got {}", self.saliency_levels.len()),
            ));
        }
        if let Some(&id) = self.relevant_clip_ids.iter().find(|&&id| id >= l) {
            return Err(bad("relevant_clip_ids", format!("clip id {id} not in [0, {l})")));
        }
        if let Some(s) = &self.saliency_scores {
            if s.len() != l || s.iter().any(|v| !v.is_finite()) {
                return Err(bad("saliency_scores", format!("need {l} finite values")));
            }
        }
        Ok(())
    }

    /// Per-clip regression target in the prediction range.
    pub fn target_saliency(&self) -> Vec<f64> {
        match &self.saliency_scores {
            Some(s) => s.clone(),
            None => self
                .saliency_levels
                .iter()
                .map(|&v| v as f64 / LEVEL_MAX as f64)
                .collect(),
        }
    }

    /// Clips inside a relevant window.
    pub fn positive_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_clips()];
        for &i in &self.relevant_clip_ids {
            m[i] = true;
        }
        m
    }

    /// Relevant windows as normalized `(center, width)` moments.
    pub fn gt_moments(&self) -> Vec<Moment> {
        self.relevant_windows
            .iter()
            .map(|w| Moment::from_span(w[0] / self.duration, w[1] / self.duration))
            .collect()
    }

    fn to_raw(&self) -> RawAnnotation {
        RawAnnotation {
            qid: self.qid,
            query: self.query.clone(),
            vid: self.vid.clone(),
            duration: self.duration,
            clip_len: self.clip_len,
            relevant_windows: self.relevant_windows.clone(),
            saliency_levels: self.saliency_levels.iter().map(|&v| v as f64).collect(),
            relevant_clip_ids: Some(self.relevant_clip_ids.iter().map(|&v| v as i64).collect()),
            saliency_scores: self.saliency_scores.clone(),
        }
    }
}

pub(crate) fn clip_count(duration: f64, clip_len: f64) -> usize {
    let ratio = duration / clip_len;
    let n = (ratio - 1e-9).ceil();
    n.max(1.0) as usize
}

/// Parse line-delimited JSON annotations. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Annotation::try_from(raw)?);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn write_dataset<W: Write>(mut w: W, anns: &[Annotation]) -> Result<()> {
    for a in anns {
        serde_json::to_writer(&mut w, &a.to_raw())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, anns: &[Annotation]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, anns)?;
    fs::write(path, buf)?;
    Ok(())
}
