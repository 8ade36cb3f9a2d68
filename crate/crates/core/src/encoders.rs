//! Token embeddings and the LSTM sentence encoders.
//!
//! The question, every history element and every candidate answer are turned
//! into one `L`-wide vector: embed the tokens with the shared table, run a
//! stacked LSTM left to right from a zero state, and keep the top layer's last
//! hidden state. The three encoders share the embedding table and nothing else.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Joins a question to its answer inside a history element.
pub const SEP: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Index ↔ token bijection with reserved ids `0=<pad>`, `1=<unk>`, `2=<sep>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.into_iter().chain(tokens) {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    /// Rebuilds a vocabulary from a stored list, which must start with the
    /// reserved tokens and contain no duplicates.
    pub fn from_list(list: Vec<String>) -> Result<Self> {
        if list.len() < RESERVED.len() || list.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::format(
                "vocabulary",
                "vocabulary",
                format!("must start with {RESERVED:?}"),
            ));
        }
        let mut index = HashMap::with_capacity(list.len());
        for (i, t) in list.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", "vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: list, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Embedding table `[|vocab| × E]`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub rows: usize,
    pub width: usize,
}

impl EmbeddingTable {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, rows: usize, width: usize) -> Result<Self> {
        let weight = b.add(format!("{name}.weight"), &[rows, width], Init::Xavier)?;
        b.set_range(weight, PAD * width..(PAD + 1) * width, 0.0);
        Ok(EmbeddingTable { weight, rows, width })
    }
}

/// Looks up one row per token; the result is `[T × E]`.
pub fn embed_tokens<T: Scalar>(g: &mut Graph<'_, T>, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::usage("embed_tokens: empty token list"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows) {
        return Err(Error::Vocabulary {
            id: bad,
            size: table.rows,
        });
    }
    let w = g.param(table.weight);
    g.gather_rows(w, ids)
}

/// One LSTM layer; gates are packed `[i | f | g | o]` along the columns.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let w_ih = b.add(format!("{name}.w_ih"), &[input, 4 * hidden], Init::Xavier)?;
        let w_hh = b.add(format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::Xavier)?;
        let bias = b.add(format!("{name}.bias"), &[4 * hidden], Init::Zeros)?;
        b.set_range(bias, hidden..2 * hidden, 1.0);
        Ok(LstmLayer {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| {
                let width = if k == 0 { input } else { hidden };
                LstmLayer::register(b, &format!("{name}.l{k}"), width, hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Lstm { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }
}

/// One step of a standard LSTM cell over a batch of rows `[N × in]`.
///
/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &LstmLayer,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let l = layer.hidden;
    let w_ih = g.param(layer.w_ih);
    let w_hh = g.param(layer.w_hh);
    let bias = g.param(layer.bias);
    let xw = g.matmul(x, w_ih)?;
    let hw = g.matmul(h_prev, w_hh)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_row(pre, bias)?;

    let i_pre = g.narrow(pre, 1, 0, l)?;
    let f_pre = g.narrow(pre, 1, l, l)?;
    let g_pre = g.narrow(pre, 1, 2 * l, l)?;
    let o_pre = g.narrow(pre, 1, 3 * l, l)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(g_pre)?;
    let o = g.sigmoid(o_pre)?;

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.mul(o, c_act)?;
    Ok((h, c))
}

/// Runs the stacked LSTM over sequences of equal length given as per-step
/// inputs `[N × E]`, returning the top layer's final hidden state `[N × L]`.
fn run_stack<T: Scalar>(g: &mut Graph<'_, T>, lstm: &Lstm, steps: &[Var], n: usize) -> Result<Var> {
    let l = lstm.hidden();
    let zero = g.constant(Tensor::zeros(vec![n, l]));
    let mut state: Vec<(Var, Var)> = vec![(zero, zero); lstm.layers.len()];
    for &x in steps {
        let mut input = x;
        for (layer, s) in lstm.layers.iter().zip(state.iter_mut()) {
            let (h, c) = lstm_step(g, layer, input, s.0, s.1)?;
            *s = (h, c);
            input = h;
        }
    }
    Ok(state.last().expect("at least one layer").0)
}

/// Encodes one token sequence to a `1 × L` vector.
pub fn encode_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    lstm: &Lstm,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::usage("encode_sequence: empty sequence"));
    }
    let emb = embed_tokens(g, table, ids)?;
    let steps = (0..ids.len())
        .map(|t| g.narrow(emb, 0, t, 1))
        .collect::<Result<Vec<_>>>()?;
    run_stack(g, lstm, &steps, 1)
}

/// Encodes many sequences into the rows of an `[N × L]` matrix, in input order.
///
/// Sequences of equal length are stepped together; each row is computed with
/// exactly the same arithmetic as [`encode_sequence`] on that sequence alone.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    lstm: &Lstm,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::usage("encode_batch: no sequences"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::usage(format!("encode_batch: sequence {i} is empty")));
        }
        groups.entry(s.len()).or_default().push(i);
    }

    let mut blocks = Vec::with_capacity(groups.len());
    let mut placed = Vec::with_capacity(seqs.len());
    for (len, members) in &groups {
        let steps = (0..*len)
            .map(|t| {
                let ids: Vec<usize> = members.iter().map(|&m| seqs[m][t]).collect();
                embed_tokens(g, table, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(run_stack(g, lstm, &steps, members.len())?);
        placed.extend_from_slice(members);
    }
    let stacked = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 0)?
    };
    let mut order = vec![0; seqs.len()];
    for (row, &orig) in placed.iter().enumerate() {
        order[orig] = row;
    }
    if order.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(stacked);
    }
    g.gather_rows(stacked, &order)
}

/// Token ids of history element `H_i = Q_i <sep> A_i`.
pub fn history_element(question: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(question.len() + answer.len() + 1);
    ids.extend_from_slice(question);
    ids.push(SEP);
    ids.extend_from_slice(answer);
    ids
}

/// History rows `{h_i}` for `i = 0..t`: caption first, then each `(Q_i, A_i)`.
pub fn encode_history<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    lstm: &Lstm,
    history: &[Vec<usize>],
) -> Result<Var> {
    encode_batch(g, table, lstm, history)
}

/// Candidate rows `{o_t^i}`.
pub fn encode_candidates<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    lstm: &Lstm,
    candidates: &[Vec<usize>],
) -> Result<Var> {
    encode_batch(g, table, lstm, candidates)
}
