//! Dialog and region-feature files.
//!
//! Dialogs are one JSON document. Region features are a JSON manifest next to
//! a blob of little-endian `f32`, each image contributing `K × V` values in
//! row-major order starting at its `byte_offset`.

pub mod oracle;
pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_ROUNDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
    /// History index of the planted antecedent (0 is the caption).
    pub antecedent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogInstance {
    pub image_id: String,
    pub caption: Vec<String>,
    pub rounds: Vec<Round>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogSet {
    pub vocabulary: Vocabulary,
    pub dialogs: Vec<DialogInstance>,
}

impl DialogSet {
    pub fn candidate_count(&self) -> Option<usize> {
        self.dialogs
            .iter()
            .flat_map(|d| d.rounds.first())
            .map(|r| r.candidates.len())
            .next()
    }

    pub fn round_count(&self) -> usize {
        self.dialogs.iter().map(|d| d.rounds.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct RoundRecord {
    question: String,
    candidates: Vec<String>,
    gt_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    antecedent: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    image_id: String,
    caption: String,
    rounds: Vec<RoundRecord>,
}

#[derive(Serialize, Deserialize)]
struct DialogFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary: Option<Vec<String>>,
    dialogs: Vec<DialogRecord>,
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

pub fn dialogs_to_json(set: &DialogSet) -> Result<String> {
    let file = DialogFile {
        version: FORMAT_VERSION,
        vocabulary: Some(set.vocabulary.tokens().to_vec()),
        dialogs: set
            .dialogs
            .iter()
            .map(|d| DialogRecord {
                image_id: d.image_id.clone(),
                caption: join(&d.caption),
                rounds: d
                    .rounds
                    .iter()
                    .map(|r| RoundRecord {
                        question: join(&r.question),
                        candidates: r.candidates.iter().map(|c| join(c)).collect(),
                        gt_index: r.gt_index,
                        relevance: r.relevance.clone(),
                        antecedent: r.antecedent,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::json("<dialogs>", e))?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates a dialogs document. `source` names it in errors.
pub fn dialogs_from_json(text: &str, source: &str) -> Result<DialogSet> {
    let file: DialogFile = serde_json::from_str(text).map_err(|e| Error::json(source, e))?;
    if file.version != FORMAT_VERSION {
        return Err(Error::format(source, "version", format!("unsupported version {}", file.version)));
    }
    let mut dialogs = Vec::with_capacity(file.dialogs.len());
    let mut candidates: Option<usize> = None;
    for (di, d) in file.dialogs.into_iter().enumerate() {
        let record = format!("{source}: dialog {di} ({})", d.image_id);
        if d.rounds.is_empty() || d.rounds.len() > MAX_ROUNDS {
            return Err(Error::format(
                &record,
                "rounds",
                format!("expected 1..={MAX_ROUNDS} rounds, got {}", d.rounds.len()),
            ));
        }
        let caption = tokenize(&d.caption);
        if caption.is_empty() {
            return Err(Error::format(&record, "caption", "empty"));
        }
        let mut rounds = Vec::with_capacity(d.rounds.len());
        for (ri, r) in d.rounds.into_iter().enumerate() {
            let rec = format!("{record} round {}", ri + 1);
            let a = r.candidates.len();
            if a < 2 {
                return Err(Error::format(&rec, "candidates", "need at least 2 candidates"));
            }
            match candidates {
                None => candidates = Some(a),
                Some(n) if n != a => {
                    return Err(Error::format(&rec, "candidates", format!("expected {n} candidates, got {a}")))
                }
                _ => {}
            }
            if r.gt_index >= a {
                return Err(Error::format(&rec, "gt_index", format!("{} outside {a} candidates", r.gt_index)));
            }
            if let Some(rel) = &r.relevance {
                if rel.len() != a {
                    return Err(Error::format(&rec, "relevance", format!("expected {a} values, got {}", rel.len())));
                }
                if rel.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::format(&rec, "relevance", "values must lie in [0, 1]"));
                }
                if !rel.iter().any(|&x| x > 0.0) {
                    return Err(Error::format(&rec, "relevance", "no relevant candidate"));
                }
            }
            if let Some(i) = r.antecedent {
                if i > ri {
                    return Err(Error::format(&rec, "antecedent", format!("history index {i} not before this round")));
                }
            }
            let question = tokenize(&r.question);
            let cands: Vec<Vec<String>> = r.candidates.iter().map(|c| tokenize(c)).collect();
            if question.is_empty() || cands.iter().any(Vec::is_empty) {
                return Err(Error::format(&rec, "question", "question and candidates must be non-empty"));
            }
            rounds.push(Round {
                question,
                candidates: cands,
                gt_index: r.gt_index,
                relevance: r.relevance,
                antecedent: r.antecedent,
            });
        }
        dialogs.push(DialogInstance {
            image_id: d.image_id,
            caption,
            rounds,
        });
    }
    let vocabulary = match file.vocabulary {
        Some(list) => Vocabulary::from_list(list)?,
        None => build_vocabulary(&dialogs),
    };
    Ok(DialogSet { vocabulary, dialogs })
}

/// Every token in first-seen order: captions, questions, candidates.
pub fn build_vocabulary(dialogs: &[DialogInstance]) -> Vocabulary {
    let mut tokens: Vec<&str> = Vec::new();
    for d in dialogs {
        tokens.extend(d.caption.iter().map(String::as_str));
        for r in &d.rounds {
            tokens.extend(r.question.iter().map(String::as_str));
            for c in &r.candidates {
                tokens.extend(c.iter().map(String::as_str));
            }
        }
    }
    Vocabulary::build(tokens)
}

pub fn read_dialogs(path: &Path) -> Result<DialogSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dialogs_from_json(&text, &path.display().to_string())
}

pub fn write_dialogs(path: &Path, set: &DialogSet) -> Result<()> {
    fs::write(path, dialogs_to_json(set)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub image_id: String,
    pub k: usize,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    pub feature_dim: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub images: Vec<FeatureEntry>,
}

/// Region features of every image, `K × V` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub feature_dim: usize,
    pub k_min: usize,
    pub k_max: usize,
    images: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl FeaturePack {
    pub fn new(feature_dim: usize, k_min: usize, k_max: usize) -> Self {
        FeaturePack {
            feature_dim,
            k_min,
            k_max,
            images: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, image_id: String, regions: Tensor) -> Result<()> {
        let (k, v) = regions.dims2();
        if regions.shape().len() != 2 || v != self.feature_dim {
            return Err(Error::format(&image_id, "features", format!("expected K × {}", self.feature_dim)));
        }
        if k < self.k_min || k > self.k_max {
            return Err(Error::format(
                &image_id,
                "k",
                format!("{k} regions outside [{}, {}]", self.k_min, self.k_max),
            ));
        }
        if self.index.contains_key(&image_id) {
            return Err(Error::format(&image_id, "image_id", "duplicate image"));
        }
        self.index.insert(image_id.clone(), self.images.len());
        self.images.push((image_id, regions));
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&Tensor> {
        self.index.get(image_id).map(|&i| &self.images[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.images.iter().map(|(id, t)| (id.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Manifest and blob bytes; the manifest refers to the blob as `blob_name`.
    pub fn encode(&self, blob_name: &str) -> (FeatureManifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut images = Vec::with_capacity(self.images.len());
        for (id, t) in &self.images {
            images.push(FeatureEntry {
                image_id: id.clone(),
                k: t.shape()[0],
                byte_offset: blob.len() as u64,
            });
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = FeatureManifest {
            version: FORMAT_VERSION,
            feature_dim: self.feature_dim,
            k_min: self.k_min,
            k_max: self.k_max,
            blob: blob_name.to_string(),
            images,
        };
        (manifest, blob)
    }

    pub fn decode(manifest: &FeatureManifest, blob: &[u8], source: &str) -> Result<Self> {
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(source, "version", format!("unsupported version {}", manifest.version)));
        }
        if manifest.feature_dim == 0 || manifest.k_min == 0 || manifest.k_min > manifest.k_max {
            return Err(Error::format(source, "k_min", "need 1 <= k_min <= k_max and feature_dim >= 1"));
        }
        let mut pack = FeaturePack::new(manifest.feature_dim, manifest.k_min, manifest.k_max);
        let mut end = 0u64;
        for e in &manifest.images {
            let rec = format!("{source}: image {}", e.image_id);
            if e.byte_offset < end {
                return Err(Error::format(&rec, "byte_offset", "offsets must be ascending and non-overlapping"));
            }
            let len = (e.k as u64)
                .checked_mul(manifest.feature_dim as u64 * 4)
                .ok_or_else(|| Error::format(&rec, "k", "size overflow"))?;
            let stop = e
                .byte_offset
                .checked_add(len)
                .ok_or_else(|| Error::format(&rec, "byte_offset", "offset overflow"))?;
            if stop > blob.len() as u64 {
                return Err(Error::format(
                    &rec,
                    "byte_offset",
                    format!("needs bytes up to {stop} but the blob has {}", blob.len()),
                ));
            }
            if e.k < manifest.k_min || e.k > manifest.k_max {
                return Err(Error::format(
                    &rec,
                    "k",
                    format!("{} outside [{}, {}]", e.k, manifest.k_min, manifest.k_max),
                ));
            }
            let bytes = &blob[e.byte_offset as usize..stop as usize];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(&rec, "blob", "non-finite feature value"));
            }
            let t = Tensor::new(vec![e.k, manifest.feature_dim], data)?;
            pack.push(e.image_id.clone(), t).map_err(|err| match err {
                Error::Format { field, reason, .. } => Error::format(&rec, field, reason),
                other => other,
            })?;
            end = stop;
        }
        Ok(pack)
    }
}

/// Writes `<manifest>` and the blob beside it, named after the manifest.
pub fn write_features(manifest_path: &Path, pack: &FeaturePack) -> Result<()> {
    let blob_path = blob_path_for(manifest_path);
    let blob_name = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, blob) = pack.encode(&blob_name);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    text.push('\n');
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

fn blob_path_for(manifest_path: &Path) -> PathBuf {
    let name = manifest_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    manifest_path.with_file_name(format!("{stem}.bin"))
}

pub fn read_features(manifest_path: &Path) -> Result<FeaturePack> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    FeaturePack::decode(&manifest, &blob, &manifest_path.display().to_string())
}

/// Dialogs plus the features of every image they mention.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dialogs: DialogSet,
    pub features: FeaturePack,
}

impl Dataset {
    pub fn new(dialogs: DialogSet, features: FeaturePack) -> Result<Self> {
        for d in &dialogs.dialogs {
            if features.get(&d.image_id).is_none() {
                return Err(Error::format(&d.image_id, "image_id", "no region features for this image"));
            }
        }
        Ok(Dataset { dialogs, features })
    }

    pub fn load(dialogs: &Path, features: &Path) -> Result<Self> {
        Dataset::new(read_dialogs(dialogs)?, read_features(features)?)
    }

    pub fn regions(&self, dialog: &DialogInstance) -> &Tensor {
        self.features.get(&dialog.image_id).expect("checked at construction")
    }

    /// The split files of `dir`: `<split>.dialogs.json`, `<split>.features.json`.
    pub fn paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{split}.dialogs.json")),
            dir.join(format!("{split}.features.json")),
        )
    }

    pub fn load_split(dir: &Path, split: &str) -> Result<Self> {
        let (d, f) = Dataset::paths(dir, split);
        Dataset::load(&d, &f)
    }

    pub fn save_split(&self, dir: &Path, split: &str) -> Result<()> {
        let (d, f) = Dataset::paths(dir, split);
        write_dialogs(&d, &self.dialogs)?;
        write_features(&f, &self.features)
    }
}
