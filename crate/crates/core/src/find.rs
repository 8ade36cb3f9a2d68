//! Grounding of the reference-aware question in the image regions.

use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::ParamBuilder;
use crate::tensor::{Graph, Scalar, Tensor, Var};

const MASK: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct FindParams {
    pub f_v: Mlp,
    pub f_ref: Mlp,
    pub f_v2: Mlp,
    pub f_ref2: Mlp,
    pub w_r: Linear,
    pub w_z: Linear,
    pub feature_dim: usize,
    pub ref_dim: usize,
}

impl FindParams {
    /// `ref_dim` is the width of the query vector: `2L` normally, `L` when
    /// the question is fed directly.
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        feature_dim: usize,
        ref_dim: usize,
        d_find: usize,
        hidden: usize,
    ) -> Result<Self> {
        if d_find == 0 {
            return Err(Error::config("d_find must be positive"));
        }
        Ok(FindParams {
            f_v: Mlp::register(b, &format!("{name}.f_v"), feature_dim, d_find, d_find)?,
            f_ref: Mlp::register(b, &format!("{name}.f_ref"), ref_dim, d_find, d_find)?,
            f_v2: Mlp::register(b, &format!("{name}.f_v2"), feature_dim, d_find, d_find)?,
            f_ref2: Mlp::register(b, &format!("{name}.f_ref2"), ref_dim, d_find, d_find)?,
            w_r: Linear::register(b, &format!("{name}.w_r"), d_find, 1, true)?,
            w_z: Linear::register(b, &format!("{name}.w_z"), d_find, hidden, true)?,
            feature_dim,
            ref_dim,
        })
    }

    /// `f_v(v)`; depends only on the image, so one dialog can reuse it.
    pub fn project_regions<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        self.f_v.forward(g, v)
    }
}

pub struct FindOutput {
    /// `1 × L`.
    pub e_find: Var,
    pub alpha: Vec<f64>,
    pub top5: Vec<usize>,
}

/// Indices of the (up to) five largest weights, largest first, ties by index.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_regions<T: Scalar>(g: &Graph<'_, T>, p: &FindParams, v: Var) -> Result<usize> {
    match *g.shape(v) {
        [k, w] if w == p.feature_dim => {
            if k == 0 {
                Err(Error::usage("find: no regions"))
            } else {
                Ok(k)
            }
        }
        ref s => Err(Error::Dimension {
            op: "find",
            lhs: s.to_vec(),
            rhs: vec![0, p.feature_dim],
        }),
    }
}

/// `alpha = softmax(r W^r + b^r)` over the regions, with
/// `r = f_v(v) ⊙ f_ref(e_ref)`. `fv` is [`FindParams::project_regions`] of `v`.
/// Returns `alpha` as a `1 × K` row.
pub fn find_attention<T: Scalar>(g: &mut Graph<'_, T>, p: &FindParams, fv: Var, e_ref: Var) -> Result<Var> {
    let fr = p.f_ref.forward(g, e_ref)?;
    let r = g.mul_row(fv, fr)?;
    let logits = p.w_r.forward(g, r)?;
    let logits = g.transpose(logits)?;
    g.softmax(logits)
}

/// Full FIND over one image with exactly its own `K` regions.
pub fn find_forward<T: Scalar>(g: &mut Graph<'_, T>, p: &FindParams, v: Var, e_ref: Var) -> Result<FindOutput> {
    check_regions(g, p, v)?;
    let fv = p.project_regions(g, v)?;
    find_forward_with(g, p, v, fv, e_ref)
}

/// As [`find_forward`], reusing a precomputed `f_v(v)`.
pub fn find_forward_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FindParams,
    v: Var,
    fv: Var,
    e_ref: Var,
) -> Result<FindOutput> {
    check_regions(g, p, v)?;
    let alpha = find_attention(g, p, fv, e_ref)?;
    let v_hat = g.matmul(alpha, v)?;
    let a = p.f_v2.forward(g, v_hat)?;
    let b = p.f_ref2.forward(g, e_ref)?;
    let z = g.mul(a, b)?;
    let e_find = p.w_z.forward(g, z)?;
    let alpha = g.value(alpha).to_f64_vec();
    let top5 = top_k(&alpha, 5);
    Ok(FindOutput { e_find, alpha, top5 })
}

pub struct BatchedFind {
    /// `B × L`, one row per instance.
    pub e_find: Var,
    /// Per instance, the weights over its own regions only.
    pub alpha: Vec<Vec<f64>>,
}

/// FIND for several instances at once. Region sets are padded to the largest
/// `K` and padded logits receive an additive `-1e9` before the softmax.
pub fn find_batched<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FindParams,
    regions: &[Tensor<T>],
    e_refs: Var,
) -> Result<BatchedFind> {
    let n = regions.len();
    if n == 0 {
        return Err(Error::usage("find_batched: empty batch"));
    }
    if g.shape(e_refs) != [n, p.ref_dim] {
        return Err(Error::Dimension {
            op: "find_batched",
            lhs: g.shape(e_refs).to_vec(),
            rhs: vec![n, p.ref_dim],
        });
    }
    let mut ks = Vec::with_capacity(n);
    for r in regions {
        match *r.shape() {
            [k, w] if w == p.feature_dim && k > 0 => ks.push(k),
            ref s => {
                return Err(Error::Dimension {
                    op: "find_batched",
                    lhs: s.to_vec(),
                    rhs: vec![0, p.feature_dim],
                })
            }
        }
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let vd = p.feature_dim;

    let mut padded = vec![T::zero(); n * k_max * vd];
    let mut mask = vec![T::zero(); n * k_max];
    for (b, r) in regions.iter().enumerate() {
        let start = b * k_max * vd;
        padded[start..start + ks[b] * vd].copy_from_slice(r.data());
        for m in &mut mask[b * k_max + ks[b]..(b + 1) * k_max] {
            *m = T::from_f64_lossy(MASK);
        }
    }
    let v = g.constant(Tensor::new(vec![n * k_max, vd], padded)?);
    let mask = g.constant(Tensor::new(vec![n, k_max], mask)?);

    let fv = p.f_v.forward(g, v)?;
    let fr = p.f_ref.forward(g, e_refs)?;
    let spread: Vec<usize> = (0..n * k_max).map(|i| i / k_max).collect();
    let fr = g.gather_rows(fr, &spread)?;
    let r = g.mul(fv, fr)?;
    let logits = p.w_r.forward(g, r)?;
    let logits = g.reshape(logits, vec![n, k_max])?;
    let logits = g.add(logits, mask)?;
    let alpha = g.softmax(logits)?;

    // v̂_b = Σ_k alpha[b,k] v[b,k], as a block-sum matmul over the weighted rows.
    let flat = g.reshape(alpha, vec![n * k_max])?;
    let weighted = g.mul_col(v, flat)?;
    let mut block = vec![T::zero(); n * n * k_max];
    for b in 0..n {
        for k in 0..k_max {
            block[b * n * k_max + b * k_max + k] = T::one();
        }
    }
    let block = g.constant(Tensor::new(vec![n, n * k_max], block)?);
    let v_hat = g.matmul(block, weighted)?;

    let a = p.f_v2.forward(g, v_hat)?;
    let b = p.f_ref2.forward(g, e_refs)?;
    let z = g.mul(a, b)?;
    let e_find = p.w_z.forward(g, z)?;

    let av = g.value(alpha);
    let alpha = (0..n).map(|b| av.row_slice(b)[..ks[b]].iter().map(|x| x.to_f64_lossy()).collect()).collect();
    Ok(BatchedFind { e_find, alpha })
}
