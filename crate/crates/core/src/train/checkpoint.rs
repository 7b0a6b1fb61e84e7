use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::VideoLights;
use crate::params::ParamStore;
use crate::train::optim::{AdamW, AdamWConfig};

const MAGIC: &[u8; 4] = b"VLCK";
pub const VERSION: u32 = 1;

/// Enough of a ChaCha stream to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    cfg: AdamWConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: ModelConfig,
    epoch: usize,
    rng: Option<RngState>,
    best_map_avg: Option<f64>,
    params: Vec<ParamMeta>,
    optimizer: Option<OptimMeta>,
}

/// Model, optimizer and loop state. Values are held as they are stored on
/// disk, i.e. rounded to `f32`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VideoLights,
    pub optimizer: Option<AdamW>,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub best_map_avg: Option<f64>,
}

fn round_f32(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}

/// Round every parameter to the nearest `f32`, which is what a checkpoint
/// keeps.
pub fn quantize(store: &mut ParamStore) {
    for p in store.iter_mut() {
        round_f32(p.tensor.data_mut());
    }
}

impl Checkpoint {
    pub fn capture(
        model: &VideoLights,
        optimizer: Option<&AdamW>,
        epoch: usize,
        rng: Option<&ChaCha8Rng>,
        best_map_avg: Option<f64>,
    ) -> Self {
        let mut model = model.clone();
        quantize(&mut model.store);
        let optimizer = optimizer.map(|o| {
            let mut o = o.clone();
            o.m.iter_mut().chain(o.v.iter_mut()).for_each(|b| round_f32(b));
            o
        });
        Self {
            model,
            optimizer,
            epoch,
            rng: rng.map(RngState::capture),
            best_map_avg,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let meta = Meta {
            version: VERSION,
            config: self.model.cfg.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            best_map_avg: self.best_map_avg,
            params: store
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta { cfg: o.cfg, t: o.t }),
        };
        let json = serde_json::to_vec(&meta)?;
        let n = store.numel();
        let blocks = if self.optimizer.is_some() { 3 } else { 1 };
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * n * blocks);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut put = |xs: &[f64]| {
            for &x in xs {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        for p in store.iter() {
            put(p.tensor.data());
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().for_each(|b| put(b));
            o.v.iter().for_each(|b| put(b));
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err("missing VLCK header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if json_len > body.len() {
            return Err(err("truncated metadata".into()));
        }
        let meta: Meta = serde_json::from_slice(&body[..json_len])?;
        let payload = &body[json_len..];
        if !payload.len().is_multiple_of(4) {
            return Err(err("payload is not a whole number of f32 values".into()));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);

        // the architecture is rebuilt from the config and must line up exactly
        let mut model = VideoLights::new(meta.config, 0)?;
        let store = &mut model.store;
        if store.len() != meta.params.len() {
            return Err(err(format!(
                "checkpoint lists {} parameters, config builds {}",
                meta.params.len(),
                store.len()
            )));
        }
        let n = store.numel();
        let blocks = if meta.optimizer.is_some() { 3 } else { 1 };
        if payload.len() / 4 != n * blocks {
            return Err(err(format!("payload holds {} values, expected {}", payload.len() / 4, n * blocks)));
        }
        for (p, pm) in store.iter_mut().zip(&meta.params) {
            if p.name != pm.name || p.tensor.shape() != &pm.shape[..] {
                return Err(err(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    pm.name,
                    pm.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            for x in p.tensor.data_mut() {
                *x = values.next().unwrap();
            }
        }
        let optimizer = meta.optimizer.map(|om| {
            let mut o = AdamW::new(&model.store, om.cfg);
            o.t = om.t;
            for b in o.m.iter_mut().chain(o.v.iter_mut()) {
                for x in b.iter_mut() {
                    *x = values.next().unwrap();
                }
            }
            o
        });
        Ok(Self {
            model,
            optimizer,
            epoch: meta.epoch,
            rng: meta.rng,
            best_map_avg: meta.best_map_avg,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn bytes_round_trip() {
        let model = VideoLights::new(ModelConfig::desk(), 3).unwrap();
        let mut opt = AdamW::new(&model.store, AdamWConfig::new(1e-3, 1e-4));
        opt.t = 7;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let ck = Checkpoint::capture(&model, Some(&opt), 4, Some(&rng), Some(0.5));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.store.flatten(), ck.model.store.flatten());
        assert_eq!(back.model.cfg, model.cfg);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!((back.epoch, back.best_map_avg), (4, Some(0.5)));
        let mut r2 = back.rng.unwrap().restore().unwrap();
        assert_eq!(r2.next_u64(), rng.next_u64());
    }

    #[test]
    fn capture_matches_f32_rounding() {
        let model = VideoLights::new(ModelConfig::desk(), 3).unwrap();
        let ck = Checkpoint::capture(&model, None, 0, None, None);
        for (a, b) in ck.model.store.flatten().iter().zip(model.store.flatten()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = VideoLights::new(ModelConfig::desk(), 3).unwrap();
        let bytes = Checkpoint::capture(&model, None, 0, None, None).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
