use super::kernels::{log_sum_exp, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, softmax_row};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward is one reverse sweep.
pub struct Graph<'p, T: Scalar = f32> {
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    track: bool,
}

impl<T: Scalar> Graph<'static, T> {
    /// A tape with no parameter store, for free-standing computations.
    pub fn standalone() -> Self {
        Graph {
            params: None,
            bound: Vec::new(),
            nodes: Vec::new(),
            track: true,
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            bound: vec![None; params.len()],
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph {
            track: false,
            ..Graph::new(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.track && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter on first use; later calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.params.expect("bound slot implies a parameter store");
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [n, m] => Ok((*n, *m)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul")?;
        let (k2, m) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg)
    }

    /// `x·W (+ b)` with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, d_in) = self.matrix(x, "linear")?;
        let (w_in, _) = self.matrix(w, "linear")?;
        if d_in != w_in {
            return Err(self.dim_err("linear", x, w));
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    fn row_broadcast(&self, a: Var, r: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, m) = self.value(a).dims2();
        if self.value(r).numel() != m || self.shape(a).is_empty() {
            return Err(self.dim_err(op, a, r));
        }
        Ok((n, m))
    }

    /// `a[N×D] + r[D]`, broadcasting `r` over every row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, m) = self.row_broadcast(a, r, "add_row")?;
        let rv = self.value(r).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % m])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, r]);
        self.push(t, Op::AddRow(a, r), rg)
    }

    /// `a[N×D] ⊙ r[D]`, broadcasting `r` over every row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, m) = self.row_broadcast(a, r, "mul_row")?;
        let rv = self.value(r).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % m])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, r]);
        self.push(t, Op::MulRow(a, r), rg)
    }

    /// `a[N×D] ⊙ c[N]`, broadcasting `c` over every column.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2();
        if self.value(c).numel() != n {
            return Err(self.dim_err("mul_col", a, c));
        }
        let cv = self.value(c).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / m])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, c]);
        self.push(t, Op::MulCol(a, c), rg)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).is_empty() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let (n, k) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            softmax_row(&src[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, l) = self.value(x).dims2();
        if l < 2 || self.shape(x).is_empty() {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![2],
            });
        }
        if self.value(gain).numel() != l {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != l {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let eps = T::from_f64_lossy(eps);
        let len = T::from_usize(l).unwrap_or_else(T::one);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * l];
        let mut xhat = vec![T::zero(); n * l];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = &src[i * l..(i + 1) * l];
            let mean = row.iter().copied().sum::<T>() / len;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..l {
                let h = (row[j] - mean) * r;
                xhat[i * l + j] = h;
                out[i * l + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(t, op, rg)
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(self.dim_err("concat", first, p));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.numel() / outer;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push(t, op, rg)
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Narrow { x, axis, start }, rg)
    }

    /// Rows of a matrix picked by index; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix(x, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::usage("gather_rows: empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: vec![n, m],
                rhs: vec![bad],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let t = Tensor::new(vec![index.len(), m], out)?;
        let rg = self.rg(&[x]);
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.push(t, op, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `-log softmax(logits)[target]` for a single row of logits, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (n, a) = self.value(logits).dims2();
        if n != 1 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![1, a],
            });
        }
        if target >= a {
            return Err(Error::usage(format!(
                "cross_entropy: target {target} outside {a} candidates"
            )));
        }
        let z = self.value(logits).data();
        let lse = log_sum_exp(z);
        let loss = lse - z[target];
        let probs = z.iter().map(|&v| (v - lse).exp()).collect();
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            target,
            probs,
        };
        self.push(Tensor::scalar(loss), op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(Error::usage("backward on an inference graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient has the value's shape")
                })
            })
            .collect();
        Ok(Gradients {
            nodes,
            bound: self.bound.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2();
                let m = self.value(*b).dims2().1;
                if let Some(da) = self.slot(grads, *a) {
                    matmul_nt_acc(g, val(*b), da, n, k, m);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_tn_acc(val(*a), g, db, n, k, m);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(d, g);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g);
                }
                if let Some(dr) = self.slot(grads, *r) {
                    let m = dr.len();
                    for (i, &gv) in g.iter().enumerate() {
                        dr[i % m] = dr[i % m] + gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d = *d + gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                let m = rv.len();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        *d = *d + gv * rv[i % m];
                    }
                }
                if let Some(dr) = self.slot(grads, *r) {
                    for (i, (&gv, &av)) in g.iter().zip(val(*a)).enumerate() {
                        dr[i % m] = dr[i % m] + gv * av;
                    }
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                let m = out.numel() / cv.len();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        *d = *d + gv * cv[i / m];
                    }
                }
                if let Some(dc) = self.slot(grads, *c) {
                    for (i, (&gv, &av)) in g.iter().zip(val(*a)).enumerate() {
                        dc[i / m] = dc[i / m] + gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv * *c;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + gv * (T::one() - y * y);
                    }
                }
            }
            Op::Softmax(a) => {
                let (n, k) = out.dims2();
                let y = out.data();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..n {
                        let row = i * k..(i + 1) * k;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(&gv, &yv)| gv * yv)
                            .sum();
                        for j in row {
                            da[j] = da[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, l) = out.dims2();
                let gv = val(*gain);
                let len = T::from_usize(l).unwrap_or_else(T::one);
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); l];
                    for i in 0..n {
                        let row = i * l;
                        for j in 0..l {
                            dxhat[j] = g[row + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / len;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[row..row + l])
                            .map(|(&d, &h)| d * h)
                            .sum::<T>()
                            / len;
                        for j in 0..l {
                            let h = xhat[row + j];
                            dx[row + j] = dx[row + j] + rstd[i] * (dxhat[j] - mean_d - h * mean_dx);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % l] = dg[i % l] + gv * h;
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % l] = db[i % l] + gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let out_chunk = out.numel() / outer;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).numel() / outer;
                    if let Some(dp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                            axpy(&mut dp[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.value(*x).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let full = src_shape[*axis];
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        axpy(&mut dx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let m = out.dims2().1;
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut dx[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if let Some(dz) = self.slot(grads, *logits) {
                    for (j, (d, &p)) in dz.iter_mut().zip(probs).enumerate() {
                        let y = if j == *target { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - y);
                    }
                }
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients<T: Scalar> {
    nodes: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any differentiable node; `None` if the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound[id.index()].and_then(|v| self.wrt(v))
    }

    /// One gradient per parameter in store order, zeros where unreachable.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, value)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()))
            })
            .collect()
    }
}
