//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and the handles of its inputs; [`Graph::backward`]
//! walks the nodes in reverse creation order and accumulates vector-Jacobian
//! products. Parents always precede children, so the creation order is a valid
//! topological order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

/// Probability floor for negative log-likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    PairwiseSim {
        q: Var,
        p: Var,
        w: Var,
        b: Var,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::PairwiseSim { .. } => "pairwise_sim",
            Op::Nll { .. } => "nll",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients or is not connected to the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Tape of recorded operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
    scope: String,
    dropout: Option<(f64, ChaCha8Rng)>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            scope: String::new(),
            dropout: None,
        }
    }

    /// Graph whose [`Graph::dropout`] zeroes entries with probability `rate`,
    /// drawing masks from a generator seeded with `seed`.
    pub fn with_dropout(rate: f64, seed: u64) -> Self {
        let mut g = Self::new();
        if rate > 0.0 {
            g.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        g
    }

    /// Prefix prepended to every name passed to [`Graph::param`]; returns the
    /// previous scope.
    pub fn set_scope(&mut self, scope: impl Into<String>) -> String {
        std::mem::replace(&mut self.scope, scope.into())
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|&p| self.needs(p));
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Bind a named parameter as a gradient-tracking leaf. Repeated calls with
    /// the same name return the same handle. The current scope is prepended.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let scoped;
        let name = if self.scope.is_empty() {
            name
        } else {
            scoped = format!("{}{name}", self.scope);
            &scoped
        };
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let mut value = t.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            va.data(),
            k,
            1,
            vb.data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transposed()?;
        let shape = t.shape().to_vec();
        Ok(self.derived(shape, t.into_data(), Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.derived(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let vb = self.value(bias);
        if vb.len() != c || vb.shape().len() > 2 || (vb.shape().len() == 2 && vb.shape()[0] != 1) {
            return Err(Error::dim("add_row", self.value(a).shape(), vb.shape()));
        }
        let b = vb.data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (x, &y) in data[i * c..(i + 1) * c].iter_mut().zip(&b) {
                *x += y;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.derived(shape, data, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let shape = v.shape().to_vec();
        self.derived(shape, v.into_data(), Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(a).map(f);
        let shape = v.shape().to_vec();
        self.derived(shape, v.into_data(), op, &[a])
    }

    /// Inverted dropout; the identity unless built by [`Graph::with_dropout`].
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let keep = T::lit(1.0 / (1.0 - *rate));
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < *rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            Op::Relu(a),
            |x| if x > T::zero() { x } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if c == 0 {
            return Err(Error::Domain {
                op: "softmax_last_axis",
                msg: "empty last axis".into(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c).take(r) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.derived(shape, data, Op::Softmax(x), &[x]))
    }

    /// Softmax down each column of a matrix (each column sums to one).
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let t = self.transpose(x)?;
        let s = self.softmax_last_axis(t)?;
        self.transpose(s)
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(Error::dim(
                    "layer_norm",
                    self.value(x).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let eps = T::lit(LN_EPS);
        let n = T::from_usize(c).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.derived(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r || self.value(p).shape().len() != 2 {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.derived(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.derived(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start + len > r {
            return Err(Error::dim(
                "slice_rows",
                self.value(a).shape(),
                &[start, len],
            ));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        Ok(self.derived(vec![len, c], out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                self.value(a).shape(),
                &[start, len],
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.derived(vec![r, len], out, Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::contract(format!(
                    "row id {id} out of range for table with {r} rows"
                )));
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        Ok(self.derived(
            vec![ids.len(), c],
            out,
            Op::Gather(table, ids.to_vec()),
            &[table],
        ))
    }

    /// Pairwise scores `u[i][j] = w · [q_i, p_j, |q_i − p_j|, q_i ⊙ p_j] + b`.
    ///
    /// `q` is `m×d`, `p` is `n×d`, `w` holds `4d` weights and `b` one bias.
    pub fn pairwise_similarity(&mut self, q: Var, p: Var, w: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims(q)?;
        let (n, dp) = self.dims(p)?;
        if d != dp {
            return Err(Error::dim(
                "pairwise_similarity",
                self.value(q).shape(),
                self.value(p).shape(),
            ));
        }
        if self.value(w).len() != 4 * d || self.value(b).len() != 1 {
            return Err(Error::dim(
                "pairwise_similarity",
                &[4 * d, 1],
                &[self.value(w).len(), self.value(b).len()],
            ));
        }
        let (qs, ps, ws) = (
            self.value(q).data(),
            self.value(p).data(),
            self.value(w).data(),
        );
        let bias = self.value(b).data()[0];
        let (wa, rest) = ws.split_at(d);
        let (wb, rest) = rest.split_at(d);
        let (wc, wd) = rest.split_at(d);
        let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
        let q_part: Vec<T> = (0..m).map(|i| dot(&qs[i * d..(i + 1) * d], wa)).collect();
        let p_part: Vec<T> = (0..n).map(|j| dot(&ps[j * d..(j + 1) * d], wb)).collect();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let qi = &qs[i * d..(i + 1) * d];
            for j in 0..n {
                let pj = &ps[j * d..(j + 1) * d];
                let mut acc = q_part[i] + p_part[j] + bias;
                for k in 0..d {
                    acc += wc[k] * (qi[k] - pj[k]).abs() + wd[k] * qi[k] * pj[k];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.derived(
            vec![m, n],
            out,
            Op::PairwiseSim { q, p, w, b },
            &[q, p, w, b],
        ))
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.derived(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Domain {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.value(a).data().iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        Ok(self.derived(Vec::new(), vec![s], Op::Mean(a), &[a]))
    }

    /// Mean over rows of `−ln max(p[row][target], LOG_FLOOR)`.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(probs)?;
        if targets.len() != r || r == 0 {
            return Err(Error::dim(
                "nll",
                self.value(probs).shape(),
                &[targets.len()],
            ));
        }
        let floor = T::lit(LOG_FLOOR);
        let data = self.value(probs).data();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::contract(format!(
                    "target class {t} out of range for {c} classes"
                )));
            }
            total -= data[i * c + t].max(floor).ln();
        }
        let loss = total / T::from_usize(r).unwrap();
        Ok(self.derived(
            Vec::new(),
            vec![loss],
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
        ))
    }

    /// Describe the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let names: BTreeMap<usize, &str> =
            self.bound.iter().map(|(k, v)| (v.0, k.as_str())).collect();
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| match names.get(&i) {
                Some(name) => format!("parameter `{name}` (node {i})"),
                None => format!(
                    "{} output (node {i}, shape {:?})",
                    n.op.name(),
                    n.value.shape()
                ),
            })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Run backward and add `scale * ∂loss/∂param` into the store for every
    /// bound parameter. Bound parameters unreachable from the loss receive an
    /// explicit zero gradient.
    pub fn backward_into(
        &self,
        loss: Var,
        store: &mut ParamStore<T>,
        scale: T,
    ) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (name, &v) in &self.bound {
            let t = store.get_mut(name).ok_or_else(|| {
                Error::contract(format!("parameter `{name}` vanished from store"))
            })?;
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g, scale)?,
                None => {
                    let zeros = vec![T::zero(); t.len()];
                    t.accumulate_grad(&zeros, scale)?
                }
            }
        }
        Ok(grads)
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.acc_with(grads, *a, |da| {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n,
                        1,
                        vb.data(),
                        1,
                        n,
                        T::one(),
                        da,
                        k,
                        1,
                    );
                });
                self.acc_with(grads, *b, |db| {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k,
                        g,
                        n,
                        1,
                        T::one(),
                        db,
                        n,
                        1,
                    );
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                self.acc_with(grads, *a, |da| {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
                self.acc_with(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
                self.acc_with(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let c = self.value(*bias).len();
                self.acc_with(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
                self.acc_with(grads, *bias, |db| {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc_with(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s)
                });
            }
            Op::Tanh(a) => {
                self.acc_with(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * (T::one() - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc_with(grads, *a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        if v > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc_with(grads, *a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        *d += x * gelu_parts(v).1;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                self.acc_with(grads, *a, |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                        for ((d, &x), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let n = T::from_usize(c).unwrap();
                let gm = self.value(*gamma).data();
                self.acc_with(grads, *x, |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gm[j];
                            dx[r * c + j] += *rs / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                self.acc_with(grads, *gamma, |dg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &x), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += x * h;
                        }
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for grow in g.chunks(c) {
                        db.iter_mut().zip(grow).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_with(grads, p, |dp| {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_with(grads, p, |dp| {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &x)| *d += x);
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                self.acc_with(grads, *a, |da| {
                    da[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &x)| *d += x);
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let w = node.value.cols();
                self.acc_with(grads, *a, |da| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        da[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let c = node.value.cols();
                self.acc_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::PairwiseSim { q, p, w, b } => {
                let (m, d) = self.value(*q).dims2().unwrap();
                let n = self.value(*p).rows();
                let (qs, ps, ws) = (
                    self.value(*q).data(),
                    self.value(*p).data(),
                    self.value(*w).data(),
                );
                let (wa, rest) = ws.split_at(d);
                let (wb, rest) = rest.split_at(d);
                let (wc, wd) = rest.split_at(d);
                let row_sum: Vec<T> = (0..m)
                    .map(|i| g[i * n..(i + 1) * n].iter().copied().sum())
                    .collect();
                let col_sum: Vec<T> = (0..n).map(|j| (0..m).map(|i| g[i * n + j]).sum()).collect();
                let sign = |x: T| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                self.acc_with(grads, *q, |dq| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for k in 0..d {
                                let s = sign(qs[i * d + k] - ps[j * d + k]);
                                dq[i * d + k] += gij * (wc[k] * s + wd[k] * ps[j * d + k]);
                            }
                        }
                        for k in 0..d {
                            dq[i * d + k] += row_sum[i] * wa[k];
                        }
                    }
                });
                self.acc_with(grads, *p, |dp| {
                    for j in 0..n {
                        for i in 0..m {
                            let gij = g[i * n + j];
                            for k in 0..d {
                                let s = sign(qs[i * d + k] - ps[j * d + k]);
                                dp[j * d + k] += gij * (wd[k] * qs[i * d + k] - wc[k] * s);
                            }
                        }
                        for k in 0..d {
                            dp[j * d + k] += col_sum[j] * wb[k];
                        }
                    }
                });
                self.acc_with(grads, *w, |dw| {
                    for i in 0..m {
                        for k in 0..d {
                            dw[k] += row_sum[i] * qs[i * d + k];
                        }
                    }
                    for j in 0..n {
                        for k in 0..d {
                            dw[d + k] += col_sum[j] * ps[j * d + k];
                        }
                    }
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for k in 0..d {
                                let (a, b) = (qs[i * d + k], ps[j * d + k]);
                                dw[2 * d + k] += gij * (a - b).abs();
                                dw[3 * d + k] += gij * a * b;
                            }
                        }
                    }
                });
                self.acc_with(grads, *b, |db| db[0] += g.iter().copied().sum::<T>());
            }
            Op::Nll { probs, targets } => {
                let c = self.value(*probs).cols();
                let data = self.value(*probs).data();
                let floor = T::lit(LOG_FLOOR);
                let r = T::from_usize(targets.len()).unwrap();
                self.acc_with(grads, *probs, |dp| {
                    for (i, &t) in targets.iter().enumerate() {
                        let p = data[i * c + t];
                        if p > floor {
                            dp[i * c + t] -= g[0] / (p * r);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                self.acc_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::xavier_init;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let a = xavier_init::<f64>(&[3, 3], 5);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let id = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(va, id).unwrap();
        assert_eq!(g.value(c).data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = xavier_init::<f64>(&[3, 4], 1).with_requires_grad(true);
        let b0 = xavier_init::<f64>(&[4, 2], 2);
        let f = |a: &Tensor<f64>| {
            let mut g = Graph::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b0.clone());
            let c = g.matmul(va, vb).unwrap();
            let s = g.sum(c);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let va = g.leaf(a0.clone());
        let vb = g.constant(b0.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(rel_err(grads.get(va).unwrap(), &numeric_grad(&a0, &f)) <= 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_last_axis(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax_last_axis(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1] >= 0.0);
        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax_last_axis(e), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_gradient() {
        let x0 = xavier_init::<f64>(&[5], 3)
            .map(|v| v * 4.0)
            .with_requires_grad(true);
        let weights = t(&[5], &[0.3, -1.0, 2.0, 0.7, -0.2]);
        let f = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let w = g.constant(weights.clone());
            let y = g.softmax_last_axis(v).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let v = g.leaf(x0.clone());
        let w = g.constant(weights.clone());
        let y = g.softmax_last_axis(v).unwrap();
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(rel_err(grads.get(v).unwrap(), &numeric_grad(&x0, &f)) <= 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[1, 4], &[5.0; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        // (x − 0) / sqrt(1 + 1e-5)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - want).abs() < 1e-12);
        assert!((g.value(y).data()[1] + want).abs() < 1e-12);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.layer_norm(x, bad, beta),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn layer_norm_gradient() {
        let x0 = xavier_init::<f64>(&[2, 6], 7)
            .map(|v| v * 3.0)
            .with_requires_grad(true);
        let gm0 = xavier_init::<f64>(&[6], 8)
            .map(|v| v + 1.0)
            .with_requires_grad(true);
        let bt0 = xavier_init::<f64>(&[6], 9).with_requires_grad(true);
        let w = xavier_init::<f64>(&[2, 6], 10);
        let run = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut g = Graph::new();
            let (vx, vg, vb) = (g.leaf(x.clone()), g.leaf(gm.clone()), g.leaf(bt.clone()));
            let vw = g.constant(w.clone());
            let y = g.layer_norm(vx, vg, vb).unwrap();
            let p = g.mul(y, vw).unwrap();
            let s = g.sum(p);
            let val = g.value(s).item();
            let grads = g.backward(s).unwrap();
            (
                val,
                grads.get(vx).unwrap().to_vec(),
                grads.get(vg).unwrap().to_vec(),
                grads.get(vb).unwrap().to_vec(),
            )
        };
        let (_, dx, dg, db) = run(&x0, &gm0, &bt0);
        assert!(rel_err(&dx, &numeric_grad(&x0, &|x| run(x, &gm0, &bt0).0)) <= 1e-5);
        assert!(rel_err(&dg, &numeric_grad(&gm0, &|gm| run(&x0, gm, &bt0).0)) <= 1e-5);
        assert!(rel_err(&db, &numeric_grad(&bt0, &|bt| run(&x0, &gm0, bt).0)) <= 1e-5);
    }

    #[test]
    fn backward_square_and_independence() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let p = g.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
        assert!(grads.get(p).is_none());

        let mut store = ParamStore::new();
        store.insert("p", t(&[1], &[3.0])).unwrap();
        store.insert("x", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(&store, "x").unwrap();
        let _p = g.param(&store, "p").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store, 1.0).unwrap();
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[0.0]);
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_branches() {
        // y = sum(tanh(x)) + sum(x ⊙ w): gradient is the sum of both branches
        let x0 = t(&[3], &[0.2, -0.5, 1.1]).with_requires_grad(true);
        let w = t(&[3], &[2.0, 3.0, -1.0]);
        let branch = |use_a: bool, use_b: bool| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let vw = g.constant(w.clone());
            let mut parts = Vec::new();
            if use_a {
                let a = g.tanh(x);
                parts.push(g.sum(a));
            }
            if use_b {
                let b = g.mul(x, vw).unwrap();
                parts.push(g.sum(b));
            }
            let loss = if parts.len() == 2 {
                g.add(parts[0], parts[1]).unwrap()
            } else {
                parts[0]
            };
            g.backward(loss).unwrap().get(x).unwrap().to_vec()
        };
        let both = branch(true, true);
        let a = branch(true, false);
        let b = branch(false, true);
        for i in 0..3 {
            assert!((both[i] - (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn structural_op_gradients() {
        let a0 = xavier_init::<f64>(&[3, 4], 11).with_requires_grad(true);
        let b0 = xavier_init::<f64>(&[3, 2], 12);
        let w = xavier_init::<f64>(&[4, 7], 13);
        let f = |a: &Tensor<f64>| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let va = g.leaf(a.clone());
            let vb = g.constant(b0.clone());
            let cat = g.concat_cols(&[va, vb]).unwrap();
            let sc = g.slice_cols(cat, 1, 4).unwrap();
            let rows = g.concat_rows(&[sc, va]).unwrap();
            let sr = g.slice_rows(rows, 1, 4).unwrap();
            let tr = g.transpose(sr).unwrap();
            let gat = g.gather_rows(tr, &[0, 3, 3, 1]).unwrap();
            let ge = g.gelu(gat);
            let rl = g.relu(ge);
            let vw = g.constant(w.clone());
            let m = g.matmul(rl, vw).unwrap();
            let ms = g.scale(m, 0.5);
            let sub = g.sub(ms, m).unwrap();
            let mean = g.mean(sub).unwrap();
            let val = g.value(mean).item();
            let grads = g.backward(mean).unwrap();
            (val, grads.get(va).unwrap().to_vec())
        };
        let (_, an) = f(&a0);
        assert!(rel_err(&an, &numeric_grad(&a0, &|a| f(a).0)) <= 1e-6);
    }

    #[test]
    fn pairwise_similarity_matches_concat_definition_and_gradients() {
        let (m, n, d) = (3, 4, 5);
        let q0 = xavier_init::<f64>(&[m, d], 21).with_requires_grad(true);
        let p0 = xavier_init::<f64>(&[n, d], 22).with_requires_grad(true);
        let w0 = xavier_init::<f64>(&[4 * d], 23).with_requires_grad(true);
        let b0 = t(&[1], &[0.3]).with_requires_grad(true);
        let mix = xavier_init::<f64>(&[m, n], 24);

        // Reference: explicit feature concatenation per pair.
        let mut g = Graph::new();
        let (q, p, w, b) = (
            g.leaf(q0.clone()),
            g.leaf(p0.clone()),
            g.leaf(w0.clone()),
            g.leaf(b0.clone()),
        );
        let u = g.pairwise_similarity(q, p, w, b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let (qi, pj) = (q0.row(i), p0.row(j));
                let feats: Vec<f64> = qi
                    .iter()
                    .chain(pj)
                    .copied()
                    .chain(qi.iter().zip(pj).map(|(a, b)| (a - b).abs()))
                    .chain(qi.iter().zip(pj).map(|(a, b)| a * b))
                    .collect();
                let want: f64 = feats.iter().zip(w0.data()).map(|(f, w)| f * w).sum::<f64>() + 0.3;
                assert!((g.value(u).at(i, j) - want).abs() < 1e-12);
            }
        }
        let vm = g.constant(mix.clone());
        let prod = g.mul(u, vm).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();

        let eval = |q: &Tensor<f64>, p: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new();
            let (q, p, w, b) = (
                g.constant(q.clone()),
                g.constant(p.clone()),
                g.constant(w.clone()),
                g.constant(b.clone()),
            );
            let u = g.pairwise_similarity(q, p, w, b).unwrap();
            let vm = g.constant(mix.clone());
            let prod = g.mul(u, vm).unwrap();
            let s = g.sum(prod);
            g.value(s).item()
        };
        assert!(
            rel_err(
                grads.get(q).unwrap(),
                &numeric_grad(&q0, &|x| eval(x, &p0, &w0, &b0))
            ) <= 1e-6
        );
        assert!(
            rel_err(
                grads.get(p).unwrap(),
                &numeric_grad(&p0, &|x| eval(&q0, x, &w0, &b0))
            ) <= 1e-6
        );
        assert!(
            rel_err(
                grads.get(w).unwrap(),
                &numeric_grad(&w0, &|x| eval(&q0, &p0, x, &b0))
            ) <= 1e-6
        );
        assert!(
            rel_err(
                grads.get(b).unwrap(),
                &numeric_grad(&b0, &|x| eval(&q0, &p0, &w0, x))
            ) <= 1e-6
        );
    }

    #[test]
    fn nll_and_diagnostics() {
        let mut g = Graph::<f64>::new();
        let probs = g.leaf(t(&[2, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).with_requires_grad(true));
        let l = g.nll(probs, &[2, 0]).unwrap();
        assert!((g.value(l).item() - (-(0.5f64).ln() / 2.0)).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(probs).unwrap(), &[0.0, 0.0, -1.0, -0.5, 0.0, 0.0]);
        assert!(g.nll(probs, &[3, 0]).is_err());
        assert!(g.first_non_finite().is_none());
        let bad = g.constant(t(&[1], &[f64::NAN]));
        let _ = g.tanh(bad);
        assert!(g.first_non_finite().unwrap().contains("leaf"));
    }

    #[test]
    fn generic_over_f32() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(
            Tensor::from_f64(vec![1, 2], &[1.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = g.softmax_last_axis(a).unwrap();
        let l = g.nll(s, &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get(a).unwrap();
        assert!((d[0] + d[1]).abs() < 1e-6);
    }

    #[test]
    fn dropout_is_identity_by_default() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.dropout(x).unwrap(), x);
        let mut g = Graph::<f64>::with_dropout(0.0, 1);
        let x = g.constant(t(&[1, 1], &[1.0]));
        assert_eq!(g.dropout(x).unwrap(), x);
    }

    #[test]
    fn dropout_masks_and_rescales() {
        let run = |seed| {
            let mut g = Graph::<f64>::with_dropout(0.25, seed);
            let x = g.leaf(
                Tensor::from_f64(vec![1, 4000], &[1.0; 4000])
                    .unwrap()
                    .with_requires_grad(true),
            );
            let y = g.dropout(x).unwrap();
            let s = g.sum(y);
            let grad = g.backward(s).unwrap().get(x).unwrap().to_vec();
            (g.value(y).data().to_vec(), grad)
        };
        let (y, grad) = run(3);
        assert_eq!(y, grad);
        assert!(y
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let dropped = y.iter().filter(|&&v| v == 0.0).count() as f64 / 4000.0;
        assert!((dropped - 0.25).abs() < 0.03, "{dropped}");
        assert_eq!(run(3).0, y);
        assert_ne!(run(4).0, y);
    }
}
