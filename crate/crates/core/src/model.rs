//! The full encoder-decoder: encoders, REFER, FIND and the candidate scorer.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DialogInstance};
use crate::decoder::{candidate_logits, rank_candidates, ScoreDistribution};
use crate::encoders::{encode_batch, history_element, EmbeddingTable, Lstm, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::find::{find_forward_with, FindParams};
use crate::layers::Linear;
use crate::params::{ParamBuilder, ParamStore};
use crate::refer::{refer_forward, HistoryAttention, ReferConfig, ReferParams};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LSTM_DEPTH: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modules {
    Both,
    /// No image: `e_ref` projected to `L` is decoded directly.
    Refer,
    /// No history: the question vector stands in for `e_ref`.
    Find,
}

/// How region features reach FIND: one row per object, or mean-pooled into a
/// coarse 4-cell grid that no longer isolates objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionProfile {
    Object,
    Grid,
}

pub const GRID_CELLS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub d_ref: usize,
    pub d_find: usize,
    pub heads: usize,
    pub layers: usize,
    pub residual: bool,
    pub modules: Modules,
    pub region_profile: RegionProfile,
}

impl Default for ModelConfig {
    /// The toy profile.
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden: 64,
            feature_dim: 64,
            d_ref: 16,
            d_find: 64,
            heads: 4,
            layers: 1,
            residual: true,
            modules: Modules::Both,
            region_profile: RegionProfile::Object,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.embed_dim, self.hidden, self.feature_dim, self.d_find].contains(&0) {
            return Err(Error::config("embed_dim, hidden, feature_dim and d_find must be positive"));
        }
        self.refer().validate()
    }

    fn refer(&self) -> ReferConfig {
        ReferConfig {
            hidden: self.hidden,
            d_ref: self.d_ref,
            heads: self.heads,
            layers: self.layers,
            residual: self.residual,
        }
    }
}

/// Parameter handles of every module, in registration order.
#[derive(Clone, Debug)]
pub struct DanLayout {
    pub embedding: EmbeddingTable,
    pub question: Lstm,
    pub history: Option<Lstm>,
    pub candidate: Lstm,
    pub refer: Option<ReferParams>,
    pub find: Option<FindParams>,
    pub project: Option<Linear>,
}

impl DanLayout {
    /// Registers every tensor. Without an RNG the store holds zeros and only
    /// describes names and shapes.
    pub fn build<T: Scalar>(
        config: &ModelConfig,
        vocab_size: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let (e, l) = (config.embed_dim, config.hidden);
        let mut b = ParamBuilder::new(rng);
        let embedding = EmbeddingTable::register(&mut b, "embed", vocab_size, e)?;
        let question = Lstm::register(&mut b, "q_lstm", e, l, LSTM_DEPTH)?;
        let uses_refer = config.modules != Modules::Find;
        let uses_find = config.modules != Modules::Refer;
        let history = if uses_refer {
            Some(Lstm::register(&mut b, "h_lstm", e, l, LSTM_DEPTH)?)
        } else {
            None
        };
        let candidate = Lstm::register(&mut b, "c_lstm", e, l, LSTM_DEPTH)?;
        let refer = if uses_refer {
            Some(ReferParams::register(&mut b, "refer", config.refer())?)
        } else {
            None
        };
        let find = if uses_find {
            let ref_dim = if uses_refer { 2 * l } else { l };
            Some(FindParams::register(&mut b, "find", config.feature_dim, ref_dim, config.d_find, l)?)
        } else {
            None
        };
        let project = if uses_find {
            None
        } else {
            Some(Linear::register(&mut b, "project", 2 * l, l, true)?)
        };
        let layout = DanLayout {
            embedding,
            question,
            history,
            candidate,
            refer,
            find,
            project,
        };
        Ok((layout, b.finish()))
    }
}

/// Token ids of one dialog, ready for the encoders.
#[derive(Clone, Debug)]
pub struct EncodedDialog {
    pub questions: Vec<Vec<usize>>,
    /// `H_0` (caption) through `H_{T-1}`.
    pub history: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<Vec<usize>>>,
    pub gt: Vec<usize>,
}

impl EncodedDialog {
    pub fn new(dialog: &DialogInstance, vocab: &Vocabulary) -> Self {
        let questions: Vec<Vec<usize>> = dialog.rounds.iter().map(|r| vocab.ids(&r.question)).collect();
        let mut history = vec![vocab.ids(&dialog.caption)];
        for (r, q) in dialog.rounds.iter().zip(&questions).take(dialog.rounds.len().saturating_sub(1)) {
            history.push(history_element(q, &vocab.ids(&r.candidates[r.gt_index])));
        }
        EncodedDialog {
            candidates: dialog
                .rounds
                .iter()
                .map(|r| r.candidates.iter().map(|c| vocab.ids(c)).collect())
                .collect(),
            gt: dialog.rounds.iter().map(|r| r.gt_index).collect(),
            questions,
            history,
        }
    }

    pub fn rounds(&self) -> usize {
        self.questions.len()
    }
}

/// Mean-pools `K` regions into at most [`GRID_CELLS`] contiguous groups.
pub fn grid_pool<T: Scalar>(regions: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, v) = regions.dims2();
    let cells = k.min(GRID_CELLS);
    let mut out = vec![T::zero(); cells * v];
    for c in 0..cells {
        let (lo, hi) = (c * k / cells, (c + 1) * k / cells);
        let n = T::from_usize(hi - lo).unwrap_or_else(T::one);
        for j in lo..hi {
            for (o, &x) in out[c * v..(c + 1) * v].iter_mut().zip(regions.row_slice(j)) {
                *o = *o + x / n;
            }
        }
    }
    Tensor::new(vec![cells, v], out)
}

pub struct RoundVars {
    /// `1 × A`.
    pub logits: Var,
    pub history: Vec<HistoryAttention>,
    pub alpha: Option<Vec<f64>>,
    pub top5: Option<Vec<usize>>,
}

/// Records the whole dialog on `g`. Each distinct sequence is encoded once:
/// round `t` reads the first `t` history rows and `f_v(v)` is shared by all
/// rounds.
pub fn dialog_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    config: &ModelConfig,
    layout: &DanLayout,
    enc: &EncodedDialog,
    regions: &Tensor<T>,
) -> Result<Vec<RoundVars>> {
    let n = enc.rounds();
    if n == 0 {
        return Err(Error::usage("dialog has no rounds"));
    }
    let table = &layout.embedding;
    let questions = encode_batch(g, table, &layout.question, &enc.questions)?;
    let history = match &layout.history {
        Some(lstm) => Some(encode_batch(g, table, lstm, &enc.history)?),
        None => None,
    };
    let flat: Vec<Vec<usize>> = enc.candidates.iter().flatten().cloned().collect();
    let a = enc.candidates[0].len();
    if enc.candidates.iter().any(|c| c.len() != a) {
        return Err(Error::usage("rounds of one dialog must have the same candidate count"));
    }
    let candidates = encode_batch(g, table, &layout.candidate, &flat)?;

    let regions = match (&layout.find, config.region_profile) {
        (None, _) => None,
        (Some(find), profile) => {
            let r = match profile {
                RegionProfile::Object => regions.clone(),
                RegionProfile::Grid => grid_pool(regions)?,
            };
            let v = g.constant(r);
            let fv = find.project_regions(g, v)?;
            Some((v, fv))
        }
    };

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let q = g.narrow(questions, 0, t, 1)?;
        let (e_ref, attention) = match (&layout.refer, history) {
            (Some(refer), Some(h)) => {
                let m = g.narrow(h, 0, 0, t + 1)?;
                let r = refer_forward(g, refer, q, m)?;
                (r.e_ref, r.attention)
            }
            _ => (q, Vec::new()),
        };
        let (e_find, alpha, top5) = match (&layout.find, regions) {
            (Some(find), Some((v, fv))) => {
                let f = find_forward_with(g, find, v, fv, e_ref)?;
                (f.e_find, Some(f.alpha), Some(f.top5))
            }
            _ => {
                let project = layout.project.as_ref().expect("refer-only layout has a projection");
                (project.forward(g, e_ref)?, None, None)
            }
        };
        let o = g.narrow(candidates, 0, t * a, a)?;
        let logits = candidate_logits(g, e_find, o)?;
        out.push(RoundVars {
            logits,
            history: attention,
            alpha,
            top5,
        });
    }
    Ok(out)
}

/// Sum over rounds of the cross-entropy, as a scalar on `g`.
pub fn dialog_loss<T: Scalar>(g: &mut Graph<'_, T>, rounds: &[RoundVars], gt: &[usize]) -> Result<Var> {
    let losses = rounds
        .iter()
        .zip(gt)
        .map(|(r, &y)| g.cross_entropy(r.logits, y))
        .collect::<Result<Vec<_>>>()?;
    let stacked = if losses.len() == 1 {
        losses[0]
    } else {
        let rows = losses
            .iter()
            .map(|&l| g.reshape(l, vec![1]))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 0)?
    };
    g.sum(stacked)
}

/// Per-round attention and the top-ranked answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub image_id: String,
    pub round: usize,
    pub question: String,
    /// One entry per REFER layer; empty without REFER.
    pub history: Vec<HistoryAttention>,
    pub alpha: Option<Vec<f64>>,
    pub top5: Option<Vec<usize>>,
    pub top_answer: String,
    pub gt_answer: String,
    pub distribution: ScoreDistribution,
}

#[derive(Clone, Debug)]
pub struct DanModel {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub layout: DanLayout,
    pub params: ParamStore<f32>,
}

impl DanModel {
    pub fn new(config: ModelConfig, vocabulary: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = DanLayout::build(&config, vocabulary.len(), Some(&mut rng))?;
        Ok(DanModel {
            config,
            vocabulary,
            layout,
            params,
        })
    }

    pub fn encode(&self, dialog: &DialogInstance) -> EncodedDialog {
        EncodedDialog::new(dialog, &self.vocabulary)
    }

    fn check_features(&self, regions: &Tensor) -> Result<()> {
        let v = regions.dims2().1;
        if v != self.config.feature_dim {
            return Err(Error::Checkpoint {
                names: vec!["feature_dim".into()],
                reason: format!("model expects {} region features, data has {v}", self.config.feature_dim),
            });
        }
        Ok(())
    }

    /// Inference-mode forward over every round of one dialog.
    pub fn trace_dialog(&self, data: &Dataset, dialog: &DialogInstance) -> Result<Vec<AttentionTrace>> {
        let regions = data.regions(dialog);
        self.check_features(regions)?;
        let enc = self.encode(dialog);
        let mut g = Graph::inference(&self.params);
        let rounds = dialog_graph(&mut g, &self.config, &self.layout, &enc, regions)?;
        rounds
            .into_iter()
            .zip(&dialog.rounds)
            .enumerate()
            .map(|(t, (r, round))| {
                let dist = ScoreDistribution::from_logits(g.value(r.logits).to_f64_vec())?;
                let top = rank_candidates(&dist).order[0];
                Ok(AttentionTrace {
                    image_id: dialog.image_id.clone(),
                    round: t + 1,
                    question: round.question.join(" "),
                    history: r.history,
                    alpha: r.alpha,
                    top5: r.top5,
                    top_answer: round.candidates[top].join(" "),
                    gt_answer: round.candidates[round.gt_index].join(" "),
                    distribution: dist,
                })
            })
            .collect()
    }

    /// Summed round loss of one dialog and its dense gradient.
    pub fn dialog_gradients(&self, data: &Dataset, dialog: &DialogInstance) -> Result<(f64, Vec<Tensor>)> {
        let regions = data.regions(dialog);
        self.check_features(regions)?;
        let enc = self.encode(dialog);
        let mut g = Graph::new(&self.params);
        let rounds = dialog_graph(&mut g, &self.config, &self.layout, &enc, regions)?;
        let loss = dialog_loss(&mut g, &rounds, &enc.gt)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        Ok((value, grads.dense(&self.params)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.vocabulary, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

impl Scorer for DanModel {
    fn score_dialog(&self, data: &Dataset, dialog: &DialogInstance) -> Result<Vec<ScoreDistribution>> {
        Ok(self
            .trace_dialog(data, dialog)?
            .into_iter()
            .map(|t| t.distribution)
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

pub fn save_checkpoint(dir: &Path, config: &ModelConfig, vocab: &Vocabulary, params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocabulary: vocab.tokens().to_vec(),
        tensors: params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(params.total_elements() * 4);
    for (_, _, t) in params.iter() {
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<DanModel> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            names: vec!["format_version".into()],
            reason: format!("unsupported version {}", manifest.format_version),
        });
    }
    let vocabulary = Vocabulary::from_list(manifest.vocabulary)?;
    let (layout, mut params) = DanLayout::build::<f32>(&manifest.config, vocabulary.len(), None)?;

    let mut bad = Vec::new();
    let expected: Vec<(String, Vec<usize>)> = params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match manifest.tensors.get(i) {
            Some(e) if &e.name == name && &e.shape == shape => {}
            _ => bad.push(name.clone()),
        }
    }
    bad.extend(manifest.tensors.iter().skip(expected.len()).map(|e| e.name.clone()));
    if !bad.is_empty() {
        return Err(Error::Checkpoint {
            names: bad,
            reason: "tensor names or shapes do not match the configuration".into(),
        });
    }

    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() != params.total_elements() * 4 {
        return Err(Error::Checkpoint {
            names: vec![PARAMS_FILE.into()],
            reason: format!("expected {} bytes, found {}", params.total_elements() * 4, blob.len()),
        });
    }
    let mut chunks = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in params.get_mut(id).data_mut() {
            *x = chunks.next().expect("length checked");
        }
    }
    Ok(DanModel {
        config: manifest.config,
        vocabulary,
        layout,
        params,
    })
}
