use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, record_to_annotation, save_dataset, Annotation, StubEmbedder, SynthOptions};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub vid: String,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DatagenOptions {
    pub synth: SynthOptions,
    pub clip_len: f64,
    /// Width of the stub caption/frame embeddings.
    pub embed_dim: usize,
    pub first_qid: i64,
}

impl Default for DatagenOptions {
    fn default() -> Self {
        Self {
            synth: SynthOptions::default(),
            clip_len: 2.0,
            embed_dim: 64,
            first_qid: 0,
        }
    }
}

/// One `{"vid", "duration"}` object per line; blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Synthetic annotations for every manifest video, qids numbered in
/// manifest order.
pub fn datagen(manifest: &[ManifestEntry], opts: &DatagenOptions) -> Result<Vec<Annotation>> {
    let mut seen = HashSet::new();
    for e in manifest {
        if !seen.insert(e.vid.as_str()) {
            return Err(Error::Invalid(format!("duplicate vid {:?} in manifest", e.vid)));
        }
    }
    let mut out = Vec::new();
    let mut qid = opts.first_qid;
    for e in manifest {
        let stub = StubEmbedder::new(&e.vid, opts.embed_dim);
        let records = generate_synthetic(e.duration, |f| stub.caption(f), |x| stub.embed(x), opts.synth)?;
        for r in &records {
            out.push(record_to_annotation(r, qid, &e.vid, e.duration, opts.clip_len)?);
            qid += 1;
        }
    }
    Ok(out)
}

/// Read a manifest file and write the synthetic dataset; returns the record
/// count.
pub fn datagen_file(manifest: impl AsRef<Path>, out: impl AsRef<Path>, opts: &DatagenOptions) -> Result<usize> {
    let entries = parse_manifest(&fs::read_to_string(manifest)?)?;
    let anns = datagen(&entries, opts)?;
    save_dataset(out, &anns)?;
    Ok(anns.len())
}
