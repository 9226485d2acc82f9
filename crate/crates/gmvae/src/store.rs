//! On-disk corpus: `manifest.json` plus one `SPEC1` file per example under
//! `spectrograms/`.

use std::fs;
use std::path::{Path, PathBuf};

use gmvae_core::corpus::{Corpus, CorpusConfig, Example, InstrumentArchetype, Split};
use gmvae_core::dsp::NormalizationStats;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::specfile;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "gmvae-corpus/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    /// Relative to the corpus directory.
    pub path: String,
    pub midi: u8,
    pub pitch: usize,
    /// Ground truth, consumed by evaluation only.
    pub instrument: usize,
    /// Present iff the label is visible to training.
    pub instrument_label: Option<usize>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub pitch_classes: usize,
    pub instrument_classes: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: CorpusConfig,
    pub archetypes: Vec<InstrumentArchetype>,
    pub stats: NormalizationStats,
    pub labeled_percent: f64,
    pub examples: Vec<ManifestRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("configuration serializes"))
}

pub fn spectrogram_path(id: usize) -> String {
    format!("spectrograms/{id:05}.spec1")
}

impl CorpusManifest {
    pub fn describe(corpus: &Corpus) -> Self {
        Self {
            format: FORMAT.into(),
            pitch_classes: corpus.pitch_classes(),
            instrument_classes: corpus.instrument_classes(),
            seed: corpus.config.seed,
            config_hash: config_hash(&corpus.config),
            config: corpus.config.clone(),
            archetypes: corpus.archetypes.clone(),
            stats: corpus.stats,
            labeled_percent: corpus.labeled_percent,
            examples: corpus
                .examples
                .iter()
                .map(|e| ManifestRecord {
                    id: e.id,
                    path: spectrogram_path(e.id),
                    midi: e.midi,
                    pitch: e.pitch,
                    instrument: e.instrument,
                    instrument_label: e.instrument_label(),
                    split: e.split,
                    seed: e.seed,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> AppResult<Self> {
        let m: Self = serde_json::from_str(text).map_err(AppError::json(path))?;
        if m.format != FORMAT {
            return Err(AppError::Format { path: path.to_path_buf(), detail: format!("unknown format {}", m.format) });
        }
        Ok(m)
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let val = self.examples.iter().filter(|e| e.split == Split::Val).count();
        (self.examples.len() - val, val)
    }
}

/// Writes the manifest and every spectrogram, creating `dir` as needed.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> AppResult<CorpusManifest> {
    let spec_dir = dir.join("spectrograms");
    fs::create_dir_all(&spec_dir).map_err(AppError::io(&spec_dir))?;
    let manifest = CorpusManifest::describe(corpus);
    for (e, r) in corpus.examples.iter().zip(&manifest.examples) {
        specfile::write(&dir.join(&r.path), &e.spectrogram)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_json()).map_err(AppError::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> AppResult<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(AppError::io(&path))?;
    CorpusManifest::from_json(&text, &path)
}

pub fn load_corpus(dir: &Path) -> AppResult<Corpus> {
    let manifest = read_manifest(dir)?;
    let mut examples = Vec::with_capacity(manifest.examples.len());
    for (i, r) in manifest.examples.iter().enumerate() {
        let path: PathBuf = dir.join(&r.path);
        if r.id != i {
            return Err(AppError::Format { path, detail: format!("record {i} carries id {}", r.id) });
        }
        examples.push(Example {
            id: r.id,
            midi: r.midi,
            pitch: r.pitch,
            instrument: r.instrument,
            labeled: r.instrument_label.is_some(),
            split: r.split,
            seed: r.seed,
            spectrogram: specfile::read(&path)?,
        });
    }
    Ok(Corpus {
        config: manifest.config,
        archetypes: manifest.archetypes,
        stats: manifest.stats,
        examples,
        labeled_percent: manifest.labeled_percent,
    })
}
