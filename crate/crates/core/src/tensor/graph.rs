//! Tape-based reverse-mode autodiff over row-major 2-D tensors.
//!
//! Values are computed eagerly as ops are pushed; `backward` walks the tape in
//! reverse. All shapes are `(rows, cols)`; scalars are `(1, 1)`. Every op
//! validates shapes up front and checks its output for non-finite values, so a
//! NaN surfaces at the op that produced it rather than in a later loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::kernels::{log_sum_exp, mm_nn, mm_nt, mm_tn, softmax_rows_inplace, transpose_into};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: bad argument: {detail}")]
    BadArgument { op: &'static str, detail: String },
    #[error("{op}: row index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: (usize, usize),
    },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    MatMul,
    MatMulNT,
    Transpose,
    ConcatRows,
    ConcatCols,
    GatherRows,
    SumAll,
    MeanAll,
    Square,
    Relu,
    LayerNorm,
    SoftmaxRows,
    Dropout,
    Attention {
        heads: usize,
        groups: usize,
        lq: usize,
        lk: usize,
        shared_kv: bool,
    },
    CrossEntropyMean,
    MseMean,
    L2NormRows,
    Detach,
}

/// Per-node saved state needed by the backward pass.
#[derive(Debug, Clone)]
enum Aux<E> {
    None,
    /// Dropout keep-mask, already scaled by 1/(1-p).
    Mask(Vec<E>),
    /// Softmax probabilities (softmax_rows and cross-entropy).
    Probs(Vec<E>),
    Ce {
        probs: Vec<E>,
        targets: Vec<usize>,
    },
    LayerNorm {
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    /// Per-row L2 norms (with eps folded in).
    Norms(Vec<E>),
    Indices(Vec<usize>),
    /// Row or column counts of concatenated parts.
    Splits(Vec<usize>),
    /// Attention probabilities, `groups*heads*lq*lk`.
    Attn(Vec<E>),
}

struct Node<E> {
    op: Op,
    shape: (usize, usize),
    value: Vec<E>,
    inputs: Vec<TensorId>,
    requires_grad: bool,
    aux: Aux<E>,
}

/// A single computation tape. Build ops eagerly, call [`Graph::backward`] on a
/// scalar, then read gradients via [`Graph::grad`].
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    rng: ChaCha8Rng,
    training: bool,
}

fn check_finite<E: Real>(op: &'static str, data: &[E]) -> Result<(), TensorError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// The seed only affects stochastic ops (dropout).
    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training: false,
        }
    }

    /// Toggles train-time behaviour (dropout). Off by default.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `id`, if one was computed.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        op: Op,
        shape: (usize, usize),
        value: Vec<E>,
        inputs: Vec<TensorId>,
        requires_grad: bool,
        aux: Aux<E>,
    ) -> TensorId {
        debug_assert_eq!(value.len(), shape.0 * shape.1);
        self.nodes.push(Node {
            op,
            shape,
            value,
            inputs,
            requires_grad,
            aux,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[TensorId]) -> bool {
        inputs.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf: gradients never flow into it.
    pub fn input(&mut self, data: &[E], rows: usize, cols: usize) -> Result<TensorId, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                op: "input",
                len: data.len(),
                shape: (rows, cols),
            });
        }
        check_finite("input", data)?;
        Ok(self.push(Op::Leaf, (rows, cols), data.to_vec(), vec![], false, Aux::None))
    }

    /// Trainable leaf; used by `ParamStore::bind`.
    pub fn leaf_param(
        &mut self,
        data: &[E],
        rows: usize,
        cols: usize,
    ) -> Result<TensorId, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                op: "leaf_param",
                len: data.len(),
                shape: (rows, cols),
            });
        }
        check_finite("leaf_param", data)?;
        Ok(self.push(Op::Leaf, (rows, cols), data.to_vec(), vec![], true, Aux::None))
    }

    pub fn scalar(&mut self, x: E) -> Result<TensorId, TensorError> {
        self.input(&[x], 1, 1)
    }

    fn binary_elementwise(
        &mut self,
        op: Op,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(E, E) -> E,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, sa, value, vec![a, b], rg, Aux::None))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        let ce = E::from_f64(c);
        let value: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x * ce).collect();
        check_finite("scale", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(c), s, value, vec![a], rg, Aux::None))
    }

    /// `a` is `(m, n)`, `bias` is `(1, n)`; adds the bias row to every row.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: (m, n),
                rhs: sb,
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..m {
            for (v, &b) in value[r * n..(r + 1) * n].iter_mut().zip(&self.nodes[bias.0].value) {
                *v += b;
            }
        }
        check_finite("add_bias", &value)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Op::AddBias, (m, n), value, vec![a, bias], rg, Aux::None))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut value = vec![E::ZERO; m * n];
        mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        check_finite("matmul", &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul, (m, n), value, vec![a, b], rg, Aux::None))
    }

    /// `a (m, k)` times `b (n, k)` transposed: pairwise row dot products.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: (m, k),
                rhs: (n, k2),
            });
        }
        let mut value = vec![E::ZERO; m * n];
        mm_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        check_finite("matmul_nt", &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMulNT, (m, n), value, vec![a, b], rg, Aux::None))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        let mut value = vec![E::ZERO; m * n];
        transpose_into(&self.nodes[a.0].value, m, n, &mut value);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Transpose, (n, m), value, vec![a], rg, Aux::None))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadArgument {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let n = self.shape(parts[0]).1;
        let mut value = Vec::new();
        let mut splits = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, n),
                    rhs: s,
                });
            }
            value.extend_from_slice(&self.nodes[p.0].value);
            splits.push(s.0);
            rows += s.0;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatRows,
            (rows, n),
            value,
            parts.to_vec(),
            rg,
            Aux::Splits(splits),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadArgument {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let m = self.shape(parts[0]).0;
        let mut splits = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (m, total),
                    rhs: s,
                });
            }
            splits.push(s.1);
            total += s.1;
        }
        let mut value = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let w = self.shape(p).1;
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatCols,
            (m, total),
            value,
            parts.to_vec(),
            rg,
            Aux::Splits(splits),
        ))
    }

    /// Selects rows of `a` by index; repeats allowed. Backward scatter-adds,
    /// which makes this double as an embedding lookup.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        for &i in indices {
            if i >= m {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    rows: m,
                });
            }
        }
        let mut value = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            value.extend_from_slice(&self.nodes[a.0].value[i * n..(i + 1) * n]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::GatherRows,
            (indices.len(), n),
            value,
            vec![a],
            rg,
            Aux::Indices(indices.to_vec()),
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let mut s = E::ZERO;
        for &x in &self.nodes[a.0].value {
            s += x;
        }
        check_finite("sum_all", &[s])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SumAll, (1, 1), vec![s], vec![a], rg, Aux::None))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        let mut s = E::ZERO;
        for &x in &self.nodes[a.0].value {
            s += x;
        }
        let v = s / E::from_f64((m * n) as f64);
        check_finite("mean_all", &[v])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::MeanAll, (1, 1), vec![v], vec![a], rg, Aux::None))
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        let value: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x * x).collect();
        check_finite("square", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Square, s, value, vec![a], rg, Aux::None))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x.maximum(E::ZERO))
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Relu, s, value, vec![a], rg, Aux::None))
    }

    /// Row-wise layer norm with learned `gamma`/`beta`, both `(1, n)`.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        for (&p, name) in [(gamma, "layer_norm gamma"), (beta, "layer_norm beta")]
            .iter()
            .map(|(p, s)| (p, *s))
        {
            let sp = self.shape(p);
            if sp != (1, n) {
                return Err(TensorError::ShapeMismatch {
                    op: if name.ends_with("gamma") {
                        "layer_norm(gamma)"
                    } else {
                        "layer_norm(beta)"
                    },
                    lhs: (m, n),
                    rhs: sp,
                });
            }
        }
        let epse = E::from_f64(eps);
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut value = vec![E::ZERO; m * n];
        let mut xhat = vec![E::ZERO; m * n];
        let mut inv_std = vec![E::ZERO; m];
        {
            let x = &self.nodes[a.0].value;
            let g = &self.nodes[gamma.0].value;
            let b = &self.nodes[beta.0].value;
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let mut mu = E::ZERO;
                for &v in row {
                    mu += v;
                }
                mu = mu * inv_n;
                let mut var = E::ZERO;
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var = var * inv_n;
                let is = E::ONE / (var + epse).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let xh = (row[j] - mu) * is;
                    xhat[r * n + j] = xh;
                    value[r * n + j] = g[j] * xh + b[j];
                }
            }
        }
        check_finite("layer_norm", &value)?;
        let rg = self.any_grad(&[a, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm,
            (m, n),
            value,
            vec![a, gamma, beta],
            rg,
            Aux::LayerNorm { xhat, inv_std },
        ))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        let mut value = self.nodes[a.0].value.clone();
        softmax_rows_inplace(&mut value, m, n);
        check_finite("softmax_rows", &value)?;
        let rg = self.any_grad(&[a]);
        let aux = Aux::Probs(value.clone());
        Ok(self.push(Op::SoftmaxRows, (m, n), value, vec![a], rg, aux))
    }

    /// Inverted dropout: identity unless the graph is in training mode.
    pub fn dropout(&mut self, a: TensorId, p: f64) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadArgument {
                op: "dropout",
                detail: format!("p must be in [0, 1), got {p}"),
            });
        }
        let s = self.shape(a);
        let rg = self.any_grad(&[a]);
        if !self.training || p == 0.0 {
            let value = self.nodes[a.0].value.clone();
            let mask = vec![E::ONE; s.0 * s.1];
            return Ok(self.push(Op::Dropout, s, value, vec![a], rg, Aux::Mask(mask)));
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..s.0 * s.1)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    E::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        check_finite("dropout", &value)?;
        Ok(self.push(Op::Dropout, s, value, vec![a], rg, Aux::Mask(mask)))
    }

    /// Fused scaled-dot-product multi-head attention over `groups` independent
    /// segments (one per batch sample).
    ///
    /// * `q` is `(groups * lq, d)`.
    /// * `k`, `v` are `(lk, d)` when `shared_kv` (one memory attended to by
    ///   every group) or `(groups * lk, d)` otherwise.
    /// * `d` must be divisible by `heads`; scaling is `1/sqrt(d/heads)`.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        groups: usize,
        shared_kv: bool,
    ) -> Result<TensorId, TensorError> {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let sv = self.shape(v);
        if heads == 0 || groups == 0 {
            return Err(TensorError::BadArgument {
                op: "attention",
                detail: format!("heads={heads}, groups={groups} must be positive"),
            });
        }
        if d % heads != 0 {
            return Err(TensorError::BadArgument {
                op: "attention",
                detail: format!("model dim {d} not divisible by {heads} heads"),
            });
        }
        if dk != d {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: (qr, d),
                rhs: (kr, dk),
            });
        }
        if sv != (kr, d) {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: (kr, d),
                rhs: sv,
            });
        }
        if qr % groups != 0 {
            return Err(TensorError::BadArgument {
                op: "attention",
                detail: format!("query rows {qr} not divisible by {groups} groups"),
            });
        }
        let kv_groups = if shared_kv { 1 } else { groups };
        if kr % kv_groups != 0 {
            return Err(TensorError::BadArgument {
                op: "attention",
                detail: format!("key rows {kr} not divisible by {kv_groups} kv groups"),
            });
        }
        let lq = qr / groups;
        let lk = kr / kv_groups;
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());

        let mut value = vec![E::ZERO; qr * d];
        let mut probs = vec![E::ZERO; groups * heads * lq * lk];
        let mut qh = vec![E::ZERO; lq * dh];
        let mut kh = vec![E::ZERO; lk * dh];
        let mut vh = vec![E::ZERO; lk * dh];
        let mut oh = vec![E::ZERO; lq * dh];
        {
            let qv = &self.nodes[q.0].value;
            let kv = &self.nodes[k.0].value;
            let vv = &self.nodes[v.0].value;
            for g in 0..groups {
                let kg = if shared_kv { 0 } else { g };
                for h in 0..heads {
                    let co = h * dh;
                    for i in 0..lq {
                        let src = (g * lq + i) * d + co;
                        qh[i * dh..(i + 1) * dh].copy_from_slice(&qv[src..src + dh]);
                    }
                    for i in 0..lk {
                        let src = (kg * lk + i) * d + co;
                        kh[i * dh..(i + 1) * dh].copy_from_slice(&kv[src..src + dh]);
                        vh[i * dh..(i + 1) * dh].copy_from_slice(&vv[src..src + dh]);
                    }
                    let pg = &mut probs[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
                    pg.fill(E::ZERO);
                    mm_nt(&qh, &kh, lq, dh, lk, pg);
                    for s in pg.iter_mut() {
                        *s = *s * scale;
                    }
                    softmax_rows_inplace(pg, lq, lk);
                    oh.fill(E::ZERO);
                    mm_nn(pg, &vh, lq, lk, dh, &mut oh);
                    for i in 0..lq {
                        let dst = (g * lq + i) * d + co;
                        value[dst..dst + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                    }
                }
            }
        }
        check_finite("attention", &value)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Op::Attention {
                heads,
                groups,
                lq,
                lk,
                shared_kv,
            },
            (qr, d),
            value,
            vec![q, k, v],
            rg,
            Aux::Attn(probs),
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Stable via
    /// log-sum-exp; softmax probabilities are cached for the backward pass.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (m, c) = self.shape(logits);
        if targets.len() != m {
            return Err(TensorError::BadArgument {
                op: "cross_entropy_mean",
                detail: format!("{} targets for {m} rows", targets.len()),
            });
        }
        for &t in targets {
            if t >= c {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy_mean",
                    index: t,
                    rows: c,
                });
            }
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut loss = E::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.nodes[logits.0].value[r * c..(r + 1) * c];
            loss += log_sum_exp(row) - row[t];
        }
        softmax_rows_inplace(&mut probs, m, c);
        let v = loss / E::from_f64(m as f64);
        check_finite("cross_entropy_mean", &[v])?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropyMean,
            (1, 1),
            vec![v],
            vec![logits],
            rg,
            Aux::Ce {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over every element of `(a - b)^2`.
    pub fn mse_mean(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mse_mean",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut s = E::ZERO;
        for (&x, &y) in self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value) {
            let d = x - y;
            s += d * d;
        }
        let v = s / E::from_f64((sa.0 * sa.1) as f64);
        check_finite("mse_mean", &[v])?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MseMean, (1, 1), vec![v], vec![a, b], rg, Aux::None))
    }

    /// Scales each row to unit L2 norm, with `norm = sqrt(sum(x^2) + eps)`.
    pub fn l2_normalize_rows(&mut self, a: TensorId, eps: f64) -> Result<TensorId, TensorError> {
        let (m, n) = self.shape(a);
        let epse = E::from_f64(eps);
        let mut value = vec![E::ZERO; m * n];
        let mut norms = vec![E::ZERO; m];
        for r in 0..m {
            let row = &self.nodes[a.0].value[r * n..(r + 1) * n];
            let mut s = E::ZERO;
            for &x in row {
                s += x * x;
            }
            let nr = (s + epse).sqrt();
            norms[r] = nr;
            for j in 0..n {
                value[r * n + j] = row[j] / nr;
            }
        }
        check_finite("l2_normalize_rows", &value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::L2NormRows, (m, n), value, vec![a], rg, Aux::Norms(norms)))
    }

    /// Copies the value and blocks gradient flow.
    pub fn detach(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(Op::Detach, s, value, vec![a], false, Aux::None))
    }

    /// Reverse pass from a scalar loss. Gradients for every node that needs
    /// one are retained and readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[loss.0] = Some(vec![E::ONE]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let needs: Vec<bool> = inputs
            .iter()
            .map(|i| self.nodes[i.0].requires_grad)
            .collect();
        if !needs.iter().any(|&b| b) {
            return Ok(());
        }
        let ensure = |grads: &mut [Option<Vec<E>>], idx: usize| {
            let sz = self.nodes[idx].shape.0 * self.nodes[idx].shape.1;
            grads[idx].get_or_insert_with(|| vec![E::ZERO; sz]);
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add => {
                for (slot, &inp) in needs.iter().zip(inputs) {
                    if *slot {
                        ensure(grads, inp.0);
                        let dst = grads[inp.0].as_mut().unwrap();
                        for (d, &x) in dst.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if needs[1] {
                    ensure(grads, inputs[1].0);
                    let dst = grads[inputs[1].0].as_mut().unwrap();
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs[0] {
                    ensure(grads, a.0);
                    let bv = &self.nodes[b.0].value;
                    let dst = grads[a.0].as_mut().unwrap();
                    for ((d, &x), &y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if needs[1] {
                    ensure(grads, b.0);
                    let av = &self.nodes[a.0].value;
                    let dst = grads[b.0].as_mut().unwrap();
                    for ((d, &x), &y) in dst.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(c) => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let ce = E::from_f64(*c);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x * ce;
                    }
                }
            }
            Op::AddBias => {
                let (m, n) = node.shape;
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for (d, &x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if needs[1] {
                    ensure(grads, inputs[1].0);
                    let dst = grads[inputs[1].0].as_mut().unwrap();
                    for r in 0..m {
                        for j in 0..n {
                            dst[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = self.nodes[a.0].shape;
                let n = self.nodes[b.0].shape.1;
                if needs[0] {
                    ensure(grads, a.0);
                    let bv = &self.nodes[b.0].value;
                    mm_nt(g, bv, m, n, k, grads[a.0].as_mut().unwrap());
                }
                if needs[1] {
                    ensure(grads, b.0);
                    let av = &self.nodes[a.0].value;
                    mm_tn(av, g, k, m, n, grads[b.0].as_mut().unwrap());
                }
            }
            Op::MatMulNT => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = self.nodes[a.0].shape;
                let n = self.nodes[b.0].shape.0;
                if needs[0] {
                    ensure(grads, a.0);
                    let bv = &self.nodes[b.0].value;
                    mm_nn(g, bv, m, n, k, grads[a.0].as_mut().unwrap());
                }
                if needs[1] {
                    ensure(grads, b.0);
                    let av = &self.nodes[a.0].value;
                    mm_tn(g, av, n, m, k, grads[b.0].as_mut().unwrap());
                }
            }
            Op::Transpose => {
                if needs[0] {
                    let (n, m) = node.shape;
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for i in 0..n {
                        for j in 0..m {
                            dst[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::ConcatRows => {
                let n = node.shape.1;
                let splits = match &node.aux {
                    Aux::Splits(s) => s,
                    _ => unreachable!(),
                };
                let mut row = 0;
                for (idx, (&inp, &rows)) in inputs.iter().zip(splits).enumerate() {
                    if needs[idx] {
                        ensure(grads, inp.0);
                        let dst = grads[inp.0].as_mut().unwrap();
                        let src = &g[row * n..(row + rows) * n];
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                    row += rows;
                }
            }
            Op::ConcatCols => {
                let (m, total) = node.shape;
                let splits = match &node.aux {
                    Aux::Splits(s) => s,
                    _ => unreachable!(),
                };
                let mut col = 0;
                for (idx, (&inp, &w)) in inputs.iter().zip(splits).enumerate() {
                    if needs[idx] {
                        ensure(grads, inp.0);
                        let dst = grads[inp.0].as_mut().unwrap();
                        for r in 0..m {
                            for j in 0..w {
                                dst[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows => {
                if needs[0] {
                    let n = node.shape.1;
                    let indices = match &node.aux {
                        Aux::Indices(i) => i,
                        _ => unreachable!(),
                    };
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            dst[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SumAll => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    let scale = g[0] / E::from_f64(dst.len() as f64);
                    for d in dst.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::Square => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let av = &self.nodes[inputs[0].0].value;
                    let two = E::from_f64(2.0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for ((d, &x), &a) in dst.iter_mut().zip(g).zip(av) {
                        *d += two * a * x;
                    }
                }
            }
            Op::Relu => {
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let av = &self.nodes[inputs[0].0].value;
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for ((d, &x), &a) in dst.iter_mut().zip(g).zip(av) {
                        if a > E::ZERO {
                            *d += x;
                        }
                    }
                }
            }
            Op::LayerNorm => {
                let (m, n) = node.shape;
                let (xhat, inv_std) = match &node.aux {
                    Aux::LayerNorm { xhat, inv_std } => (xhat, inv_std),
                    _ => unreachable!(),
                };
                let gamma = &self.nodes[inputs[1].0].value;
                let inv_n = E::from_f64(1.0 / n as f64);
                if needs[0] {
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut sum_dxhat = E::ZERO;
                        let mut sum_dxhat_x = E::ZERO;
                        for j in 0..n {
                            let dxh = gr[j] * gamma[j];
                            sum_dxhat += dxh;
                            sum_dxhat_x += dxh * xr[j];
                        }
                        let mean_dxhat = sum_dxhat * inv_n;
                        let mean_dxhat_x = sum_dxhat_x * inv_n;
                        for j in 0..n {
                            let dxh = gr[j] * gamma[j];
                            dst[r * n + j] +=
                                inv_std[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_x);
                        }
                    }
                }
                if needs[1] {
                    ensure(grads, inputs[1].0);
                    let dst = grads[inputs[1].0].as_mut().unwrap();
                    for r in 0..m {
                        for j in 0..n {
                            dst[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if needs[2] {
                    ensure(grads, inputs[2].0);
                    let dst = grads[inputs[2].0].as_mut().unwrap();
                    for r in 0..m {
                        for j in 0..n {
                            dst[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows => {
                if needs[0] {
                    let (m, n) = node.shape;
                    let p = match &node.aux {
                        Aux::Probs(p) => p,
                        _ => unreachable!(),
                    };
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let pr = &p[r * n..(r + 1) * n];
                        let mut dot = E::ZERO;
                        for j in 0..n {
                            dot += gr[j] * pr[j];
                        }
                        for j in 0..n {
                            dst[r * n + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout => {
                if needs[0] {
                    let mask = match &node.aux {
                        Aux::Mask(m) => m,
                        _ => unreachable!(),
                    };
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for ((d, &x), &m) in dst.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            Op::Attention {
                heads,
                groups,
                lq,
                lk,
                shared_kv,
            } => {
                let (heads, groups, lq, lk) = (*heads, *groups, *lq, *lk);
                let d = node.shape.1;
                let dh = d / heads;
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                let probs = match &node.aux {
                    Aux::Attn(p) => p,
                    _ => unreachable!(),
                };
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                for (i, need) in needs.iter().enumerate() {
                    if *need {
                        ensure(grads, inputs[i].0);
                    }
                }
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;

                let mut qh = vec![E::ZERO; lq * dh];
                let mut kh = vec![E::ZERO; lk * dh];
                let mut vh = vec![E::ZERO; lk * dh];
                let mut goh = vec![E::ZERO; lq * dh];
                let mut dprobs = vec![E::ZERO; lq * lk];
                let mut dscores = vec![E::ZERO; lq * lk];
                let mut dqh = vec![E::ZERO; lq * dh];
                let mut dkh = vec![E::ZERO; lk * dh];
                let mut dvh = vec![E::ZERO; lk * dh];

                for grp in 0..groups {
                    let kg = if *shared_kv { 0 } else { grp };
                    for h in 0..heads {
                        let co = h * dh;
                        for i in 0..lq {
                            let src = (grp * lq + i) * d + co;
                            qh[i * dh..(i + 1) * dh].copy_from_slice(&qv[src..src + dh]);
                            goh[i * dh..(i + 1) * dh].copy_from_slice(&g[src..src + dh]);
                        }
                        for i in 0..lk {
                            let src = (kg * lk + i) * d + co;
                            kh[i * dh..(i + 1) * dh].copy_from_slice(&kv[src..src + dh]);
                            vh[i * dh..(i + 1) * dh].copy_from_slice(&vv[src..src + dh]);
                        }
                        let pg = &probs[(grp * heads + h) * lq * lk..(grp * heads + h + 1) * lq * lk];

                        // d probs = g_out V^T
                        dprobs.fill(E::ZERO);
                        mm_nt(&goh, &vh, lq, dh, lk, &mut dprobs);
                        // softmax backward into dscores (then scale)
                        for r in 0..lq {
                            let pr = &pg[r * lk..(r + 1) * lk];
                            let dp = &dprobs[r * lk..(r + 1) * lk];
                            let mut dot = E::ZERO;
                            for j in 0..lk {
                                dot += dp[j] * pr[j];
                            }
                            for j in 0..lk {
                                dscores[r * lk + j] = pr[j] * (dp[j] - dot) * scale;
                            }
                        }
                        if needs[0] {
                            dqh.fill(E::ZERO);
                            mm_nn(&dscores, &kh, lq, lk, dh, &mut dqh);
                            let dst = grads[q.0].as_mut().unwrap();
                            for i in 0..lq {
                                let dsti = (grp * lq + i) * d + co;
                                for c in 0..dh {
                                    dst[dsti + c] += dqh[i * dh + c];
                                }
                            }
                        }
                        if needs[1] {
                            dkh.fill(E::ZERO);
                            mm_tn(&dscores, &qh, lk, lq, dh, &mut dkh);
                            let dst = grads[k.0].as_mut().unwrap();
                            for i in 0..lk {
                                let dsti = (kg * lk + i) * d + co;
                                for c in 0..dh {
                                    dst[dsti + c] += dkh[i * dh + c];
                                }
                            }
                        }
                        if needs[2] {
                            dvh.fill(E::ZERO);
                            mm_tn(pg, &goh, lk, lq, dh, &mut dvh);
                            let dst = grads[v.0].as_mut().unwrap();
                            for i in 0..lk {
                                let dsti = (kg * lk + i) * d + co;
                                for c in 0..dh {
                                    dst[dsti + c] += dvh[i * dh + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyMean => {
                if needs[0] {
                    let (probs, targets) = match &node.aux {
                        Aux::Ce { probs, targets } => (probs, targets),
                        _ => unreachable!(),
                    };
                    let c = self.nodes[inputs[0].0].shape.1;
                    let m = targets.len();
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    let scale = g[0] / E::from_f64(m as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { E::ONE } else { E::ZERO };
                            dst[r * c + j] += (probs[r * c + j] - ind) * scale;
                        }
                    }
                }
            }
            Op::MseMean => {
                let (a, b) = (inputs[0], inputs[1]);
                let len = self.nodes[a.0].value.len();
                let scale = g[0] * E::from_f64(2.0 / len as f64);
                if needs[0] {
                    ensure(grads, a.0);
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let dst = grads[a.0].as_mut().unwrap();
                    for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                        *d += (x - y) * scale;
                    }
                }
                if needs[1] {
                    ensure(grads, b.0);
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let dst = grads[b.0].as_mut().unwrap();
                    for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                        *d -= (x - y) * scale;
                    }
                }
            }
            Op::L2NormRows => {
                if needs[0] {
                    let (m, n) = node.shape;
                    let norms = match &node.aux {
                        Aux::Norms(nr) => nr,
                        _ => unreachable!(),
                    };
                    let y = &node.value;
                    ensure(grads, inputs[0].0);
                    let dst = grads[inputs[0].0].as_mut().unwrap();
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mut dot = E::ZERO;
                        for j in 0..n {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..n {
                            dst[r * n + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}
