//! Multi-head attention of the question over the dialog history.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferConfig {
    pub hidden: usize,
    pub d_ref: usize,
    pub heads: usize,
    pub layers: usize,
    /// Residual connections around attention and the feed-forward block.
    pub residual: bool,
}

impl ReferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("refer needs at least one layer"));
        }
        if self.heads < 1 || self.d_ref < 1 {
            return Err(Error::config("refer needs heads >= 1 and d_ref >= 1"));
        }
        if self.hidden < 2 {
            return Err(Error::config("refer hidden width must be at least 2 for layer norm"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub wq: ParamId,
    pub wm: ParamId,
}

#[derive(Clone, Debug)]
pub struct ReferLayer {
    pub heads: Vec<Head>,
    pub wo: ParamId,
    pub ln_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ReferParams {
    pub config: ReferConfig,
    pub layers: Vec<ReferLayer>,
}

impl ReferParams {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, config: ReferConfig) -> Result<Self> {
        config.validate()?;
        let (l, d) = (config.hidden, config.d_ref);
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let p = format!("{name}.l{k}");
            let heads = (0..config.heads)
                .map(|n| {
                    Ok(Head {
                        wq: b.add(format!("{p}.h{n}.wq"), &[l, d], Init::Xavier)?,
                        wm: b.add(format!("{p}.h{n}.wm"), &[l, d], Init::Xavier)?,
                    })
                })
                .collect::<Result<_>>()?;
            layers.push(ReferLayer {
                heads,
                wo: b.add(format!("{p}.wo"), &[config.heads * d, l], Init::Xavier)?,
                ln_attn: LayerNorm::register(b, &format!("{p}.ln1"), l)?,
                ffn_in: Linear::register(b, &format!("{p}.ffn1"), l, 2 * l, true)?,
                ffn_out: Linear::register(b, &format!("{p}.ffn2"), 2 * l, l, true)?,
                ln_ffn: LayerNorm::register(b, &format!("{p}.ln2"), l)?,
            });
        }
        Ok(ReferParams { config, layers })
    }
}

/// Attention weights over the history for one layer: a row per head, plus
/// the head average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryAttention {
    pub heads: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl HistoryAttention {
    fn from_heads(heads: Vec<Vec<f64>>) -> Self {
        let t = heads[0].len();
        let n = heads.len() as f64;
        let mean = (0..t).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / n).collect();
        HistoryAttention { heads, mean }
    }
}

pub struct ReferOutput {
    /// `ĉ ⊕ q_t`, `1 × 2L`.
    pub e_ref: Var,
    /// Last layer's contextual vector `ĉ`, `1 × L`.
    pub context: Var,
    pub attention: Vec<HistoryAttention>,
}

/// `softmax(q·Bᵀ/√d)·B` with `q` of shape `1 × d` and `B` of shape `t × d`.
/// Returns `(weights 1 × t, out 1 × d)`.
pub fn scaled_dot_attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, b: Var) -> Result<(Var, Var)> {
    let shape = g.shape(b).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::usage("scaled_dot_attention: empty history"));
    }
    let d = shape[1] as f64;
    let bt = g.transpose(b)?;
    let logits = g.matmul(q, bt)?;
    let logits = g.scale(logits, 1.0 / d.sqrt())?;
    let w = g.softmax(logits)?;
    let out = g.matmul(w, b)?;
    Ok((w, out))
}

/// `x_t = (head_1 ⊕ … ⊕ head_h)·W^o` with `head_n = Attention(q W_n^q, M W_n^m)`.
pub fn multi_head<T: Scalar>(g: &mut Graph<'_, T>, layer: &ReferLayer, q: Var, m: Var) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let wq = g.param(head.wq);
        let wm = g.param(head.wm);
        let qp = g.matmul(q, wq)?;
        let mp = g.matmul(m, wm)?;
        let (w, out) = scaled_dot_attention(g, qp, mp)?;
        outs.push(out);
        weights.push(w);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let wo = g.param(layer.wo);
    let x = g.matmul(cat, wo)?;
    Ok((x, weights))
}

/// One REFER block: attention, residual + norm, feed-forward, residual + norm.
pub fn refer_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &ReferLayer,
    residual: bool,
    q: Var,
    m: Var,
) -> Result<(Var, HistoryAttention)> {
    let (x, weights) = multi_head(g, layer, q, m)?;
    let x = if residual { g.add(x, q)? } else { x };
    let x_hat = layer.ln_attn.forward(g, x)?;
    let h = layer.ffn_in.forward(g, x_hat)?;
    let h = g.relu(h)?;
    let c = layer.ffn_out.forward(g, h)?;
    let c = if residual { g.add(c, x_hat)? } else { c };
    let c_hat = layer.ln_ffn.forward(g, c)?;
    let heads = weights.iter().map(|&w| g.value(w).to_f64_vec()).collect();
    Ok((c_hat, HistoryAttention::from_heads(heads)))
}

/// Runs the stack; layer `k > 1` takes the previous layer's `ĉ` as its query,
/// and the original question is concatenated onto the final `ĉ`.
pub fn refer_forward<T: Scalar>(g: &mut Graph<'_, T>, params: &ReferParams, q: Var, m: Var) -> Result<ReferOutput> {
    if params.layers.is_empty() {
        return Err(Error::config("refer needs at least one layer"));
    }
    let mut query = q;
    let mut attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (c_hat, att) = refer_layer(g, layer, params.config.residual, query, m)?;
        attention.push(att);
        query = c_hat;
    }
    let e_ref = g.concat(&[query, q], 1)?;
    Ok(ReferOutput {
        e_ref,
        context: query,
        attention,
    })
}
