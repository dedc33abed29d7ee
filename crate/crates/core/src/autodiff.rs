//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and accumulates gradients additively into each input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{dot, Gemm};
use crate::tensor::{numel, Float, Tensor};

/// Index of a parameter inside a [`crate::params::ParamStore`].
pub type ParamId = usize;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention visibility mask of shape `[batch, tq, tk]`, shared by all heads.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Keys at positions `>= key_lens[b]` are hidden; optionally causal.
    pub fn new(key_lens: &[usize], tq: usize, tk: usize, causal: bool) -> Self {
        let batch = key_lens.len();
        let mut allowed = vec![false; batch * tq * tk];
        for (b, &len) in key_lens.iter().enumerate() {
            for i in 0..tq {
                for j in 0..tk.min(len) {
                    if !causal || j <= i {
                        allowed[(b * tq + i) * tk + j] = true;
                    }
                }
            }
        }
        Self {
            batch,
            tq,
            tk,
            allowed,
        }
    }

    pub fn from_fn(batch: usize, tq: usize, tk: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(batch * tq * tk);
        for b in 0..batch {
            for i in 0..tq {
                for j in 0..tk {
                    allowed.push(f(b, i, j));
                }
            }
        }
        Self {
            batch,
            tq,
            tk,
            allowed,
        }
    }

    #[inline]
    fn row(&self, b: usize, i: usize) -> &[bool] {
        let s = (b * self.tq + i) * self.tk;
        &self.allowed[s..s + self.tk]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    /// Divide the summed loss by the number of scored positions.
    Mean,
    /// Divide the summed loss by a caller-provided count.
    Normalizer(f64),
}

enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, batch_b: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var },
    Scale { x: Var, c: T },
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: T, norm: T, probs: Vec<T> },
    Reshape(Var),
    SwapAxes12 { x: Var, dims: [usize; 4] },
    GatherRows { table: Var, idx: Vec<usize> },
    RowDot { a: Var, b: Var, k: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    RelGather { p: Var, n: usize, tq: usize, tk: usize, max_dist: usize },
    Unfold { x: Var, lens: Vec<usize>, t: usize, c: usize, kernel: usize, stride: usize },
    MaskRows { x: Var, repl: Var, mask: Vec<bool> },
    Sum(Var),
    StraightThrough { z: Var },
    Dropout { x: Var, keep: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Values are immutable once recorded.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.slots[node].as_deref().map(|g| (pid, g)))
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    /// Records a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            requires_grad,
        )
    }

    /// Records a parameter leaf whose gradient is reported under `id`.
    pub fn param_leaf(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert_eq!(numel(shape), data.len());
        self.push(shape.to_vec(), data, Op::Leaf { param: None }, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf { param: None }, false)
    }

    /// Matrix product. `a` has shape `[..., k]` (leading axes flattened into
    /// rows) and `b` has shape `[k, n]`; the result is `[..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        Gemm::new(m, k, n).run(self.value(a), self.value(b), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product over the leading axis: `a` is `[B, m, k]`, `b` is
    /// `[Bb, k, n]` (or `[Bb, n, k]` with `trans_b`), where `Bb` divides `B`
    /// and batch `i` of `a` pairs with batch `i % Bb` of `b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::dims("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (batch_b, kb, n) = if trans_b {
            (sb[0], sb[2], sb[1])
        } else {
            (sb[0], sb[1], sb[2])
        };
        if kb != k || batch % batch_b != 0 {
            return Err(Error::dims("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let g = Gemm::new(m, k, n).tb(trans_b);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for (i, o) in out.chunks_mut(m * n).enumerate() {
                let j = i % batch_b;
                g.run(&av[i * m * k..(i + 1) * m * k], &bv[j * k * n..(j + 1) * k * n], o);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                batch,
                batch_b,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), ng))
    }

    /// Adds a `[d]` vector to every row of `x: [..., d]`. This is the only
    /// broadcast the graph supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(b) != [d] {
            return Err(Error::dims("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).to_vec();
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(d) {
            add_into(row, &bv);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), v, Op::AddBias { x, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x).iter().map(|&e| e * c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Scale { x, c }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let v = self
            .value(x)
            .iter()
            .map(|&e| half * e * (T::one() + (c * (e + a * e * e * e)).tanh()))
            .collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&e| e.max(T::zero())).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Relu(x), ng)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis of `x: [N, tq, tk]`. Hidden entries get
    /// zero probability; a row with every entry hidden outputs zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let tk = *shape.last().unwrap();
        let tq = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let n = numel(&shape) / (tq * tk);
        if let Some(m) = mask {
            if m.tq != tq || m.tk != tk || !n.is_multiple_of(m.batch) {
                return Err(Error::Dimension(format!(
                    "mask [{}, {}, {}] does not fit scores {shape:?}",
                    m.batch, m.tq, m.tk
                )));
            }
        }
        let heads = mask.map_or(1, |m| n / m.batch);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for i in 0..tq {
                let off = (b * tq + i) * tk;
                let row = &xv[off..off + tk];
                let allowed = mask.map(|m| m.row(b / heads, i));
                let vis = |j: usize| allowed.is_none_or(|a| a[j]);
                let mut mx = T::neg_infinity();
                for (j, &e) in row.iter().enumerate() {
                    if vis(j) && e > mx {
                        mx = e;
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut s = T::zero();
                let o = &mut out[off..off + tk];
                for j in 0..tk {
                    if vis(j) {
                        let e = (row[j] - mx).exp();
                        o[j] = e;
                        s += e;
                    }
                }
                let inv = T::one() / s;
                o.iter_mut().for_each(|e| *e *= inv);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x }, ng))
    }

    /// Label-smoothed negative log-likelihood of `targets` under
    /// `logits: [N, V]`. `None` targets (padding) are skipped. Returns a
    /// scalar: the summed loss divided by the reduction's normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap();
        let rows = numel(&shape) / v;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Parameter(format!("smoothing must be in [0,1), got {smoothing}")));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target id {bad} out of range for vocabulary {v}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let norm = match reduction {
            Reduction::Mean => count.max(1) as f64,
            Reduction::Normalizer(z) => z,
        };
        let eps = T::of(smoothing);
        let vn = T::of(v as f64);
        let xv = self.value(logits);
        let mut probs = vec![T::zero(); xv.len()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &xv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&e| (e - mx).exp()).sum();
            let lse = mx + s.ln();
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut sum_logp = T::zero();
            for j in 0..v {
                let lp = row[j] - lse;
                pr[j] = lp.exp();
                sum_logp += lp;
            }
            let nll = -(row[t] - lse);
            total += (T::one() - eps) * nll - eps * sum_logp / vn;
        }
        let norm = T::of(norm);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![total / norm],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                norm,
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::dims("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("swap_axes12 needs rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let v = swap12(self.value(x), dims);
        let ng = self.ng(x);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], v, Op::SwapAxes12 { x, dims }, ng))
    }

    /// Selects rows of `table: [R, d]`; the result has shape `out_shape`
    /// whose last axis is `d` and which holds `idx.len()` rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize], out_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || out_shape.last() != Some(&st[1]) || numel(out_shape) != idx.len() * st[1] {
            return Err(Error::dims("gather_rows", &st, out_shape));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Data(format!("row index {bad} out of range for {} rows", st[0])));
        }
        let d = st[1];
        let tv = self.value(table);
        let mut v = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            out_shape.to_vec(),
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `out[m, j] = a[m] · b[m * k + j]` for `a: [M, d]`, `b: [M * k, d]`.
    pub fn row_dot(&mut self, a: Var, b: Var, k: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sb[0] != sa[0] * k {
            return Err(Error::dims("row_dot", &sa, &sb));
        }
        let (m, d) = (sa[0], sa[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut v = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                let r = i * k + j;
                v.push(dot(&av[i * d..(i + 1) * d], &bv[r * d..(r + 1) * d]));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, k], v, Op::RowDot { a, b, k }, ng))
    }

    /// Scales every last-axis row to unit Euclidean norm (norms floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().unwrap();
        let eps = T::of(eps);
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut v = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let nrm = dot(row, row).sqrt().max(eps);
            norms.push(nrm);
            for j in 0..d {
                v[r * d + j] = row[j] / nrm;
            }
        }
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::L2Normalize { x, norms }, ng)
    }

    /// Expands relative-position scores `p: [N, tq, 2D+1]` into absolute
    /// `[N, tq, tk]`: `out[n, i, j] = p[n, i, clamp(j - i, -D, D) + D]`.
    pub fn rel_gather(&mut self, p: Var, tk: usize, max_dist: usize) -> Result<Var> {
        let s = self.shape(p).to_vec();
        let w = 2 * max_dist + 1;
        if s.len() != 3 || s[2] != w {
            return Err(Error::Dimension(format!(
                "rel_gather expects [N, tq, {w}], got {s:?}"
            )));
        }
        let (n, tq) = (s[0], s[1]);
        let pv = self.value(p);
        let mut v = Vec::with_capacity(n * tq * tk);
        for b in 0..n {
            for i in 0..tq {
                let row = &pv[(b * tq + i) * w..(b * tq + i + 1) * w];
                for j in 0..tk {
                    v.push(row[rel_index(i, j, max_dist)]);
                }
            }
        }
        let ng = self.ng(p);
        Ok(self.push(
            vec![n, tq, tk],
            v,
            Op::RelGather {
                p,
                n,
                tq,
                tk,
                max_dist,
            },
            ng,
        ))
    }

    /// Strided window extraction over time for `x: [B, T, C]`: output
    /// `[B, ceil(T / stride), kernel * C]`. Frame indices past an
    /// utterance's length repeat its last valid frame.
    pub fn unfold1d(&mut self, x: Var, lens: &[usize], kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || lens.len() != s[0] || kernel == 0 || stride == 0 {
            return Err(Error::Dimension(format!(
                "unfold1d: input {s:?}, {} lengths, kernel {kernel}, stride {stride}",
                lens.len()
            )));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        if lens.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Data(format!("unfold1d: lengths {lens:?} invalid for T={t}")));
        }
        let t_out = t.div_ceil(stride);
        let xv = self.value(x);
        let mut v = Vec::with_capacity(b * t_out * kernel * c);
        for (bi, &len) in lens.iter().enumerate() {
            for to in 0..t_out {
                for kk in 0..kernel {
                    let src = (to * stride + kk).min(len - 1);
                    let off = (bi * t + src) * c;
                    v.extend_from_slice(&xv[off..off + c]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![b, t_out, kernel * c],
            v,
            Op::Unfold {
                x,
                lens: lens.to_vec(),
                t,
                c,
                kernel,
                stride,
            },
            ng,
        ))
    }

    /// Replaces the last-axis rows of `x` flagged in `mask` by `repl: [d]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool], repl: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        let rows = numel(self.shape(x)) / d;
        if self.shape(repl) != [d] || mask.len() != rows {
            return Err(Error::dims("mask_rows", self.shape(x), self.shape(repl)));
        }
        let mut v = self.value(x).to_vec();
        let rv = self.value(repl).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                v[r * d..(r + 1) * d].copy_from_slice(&rv);
            }
        }
        let ng = self.ng(x) || self.ng(repl);
        Ok(self.push(
            self.shape(x).to_vec(),
            v,
            Op::MaskRows {
                x,
                repl,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Forward value of `e`, gradient routed to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, e: Var) -> Result<Var> {
        self.same_shape("straight_through", z, e)?;
        let v = self.value(e).to_vec();
        let ng = self.ng(z);
        Ok(self.push(self.shape(z).to_vec(), v, Op::StraightThrough { z }, ng))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let v = self.value(x).iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Dropout { x, keep }, ng)
    }

    /// Reverse pass from a scalar `loss`. Every node is visited once, in
    /// reverse recording order; contributions to shared inputs add up.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if node.needs_grad {
                    params.push((pid, i));
                    slots[i] = Some(vec![T::zero(); node.value.len()]);
                }
            }
        }
        if self.nodes[loss.0].needs_grad {
            slots[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop(node, &g, &mut slots);
        }
        Ok(Grads { slots, params })
    }

    fn slot<'s>(&self, slots: &'s mut [Option<Vec<T>>], v: Var) -> Option<&'s mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(slots[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: &Node<T>, g: &[T], slots: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b);
                if let Some(da) = self.slot(slots, *a) {
                    Gemm::new(m, n, k).tb(true).run(g, bv, da);
                }
                let av = self.value(*a);
                if let Some(db) = self.slot(slots, *b) {
                    Gemm::new(k, m, n).ta(true).run(av, g, db);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                batch_b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.slot(slots, *a) {
                    for i in 0..*batch {
                        let j = i % batch_b;
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bj = &bv[j * k * n..(j + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        Gemm::new(m, n, k).tb(!trans_b).run(gi, bj, dai);
                    }
                }
                if let Some(db) = self.slot(slots, *b) {
                    for i in 0..*batch {
                        let j = i % batch_b;
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbj = &mut db[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            Gemm::new(n, m, k).ta(true).run(gi, ai, dbj);
                        } else {
                            Gemm::new(k, m, n).ta(true).run(ai, gi, dbj);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(slots, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(slots, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(slots, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(slots, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                if let Some(da) = self.slot(slots, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                let av = self.value(*a);
                if let Some(db) = self.slot(slots, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::AddBias { x, b } => {
                if let Some(dx) = self.slot(slots, *x) {
                    add_into(dx, g);
                }
                let d = self.value(*b).len();
                if let Some(db) = self.slot(slots, *b) {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(slots, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &e)| *d += e * *c);
                }
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three_a = T::of(3.0 * GELU_A);
                let xv = self.value(*x);
                if let Some(dx) = self.slot(slots, *x) {
                    for ((d, &e), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        let t = (c * (e + a * e * e * e)).tanh();
                        let deriv = half * (T::one() + t)
                            + half * e * (T::one() - t * t) * c * (T::one() + three_a * e * e);
                        *d += gi * deriv;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(slots, *x) {
                    for ((d, &e), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        if e > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma);
                if let Some(dg) = self.slot(slots, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(slots, *beta) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.slot(slots, *x) {
                    let dn = T::of(d as f64);
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            out[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let tk = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(dx) = self.slot(slots, *x) {
                    for ((yr, gr), dr) in y.chunks(tk).zip(g.chunks(tk)).zip(dx.chunks_mut(tk)) {
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..tk {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                norm,
                probs,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *norm;
                let uni = *smoothing / T::of(v as f64);
                let keep = T::one() - *smoothing;
                if let Some(dx) = self.slot(slots, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let pr = &probs[r * v..(r + 1) * v];
                        let dr = &mut dx[r * v..(r + 1) * v];
                        for j in 0..v {
                            let mut e = pr[j] - uni;
                            if j == t {
                                e -= keep;
                            }
                            dr[j] += e * scale;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(slots, *x) {
                    add_into(dx, g);
                }
            }
            Op::SwapAxes12 { x, dims } => {
                if let Some(dx) = self.slot(slots, *x) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(dx, &back);
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(slots, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::RowDot { a, b, k } => {
                let k = *k;
                let d = self.shape(*a)[1];
                let m = self.shape(*a)[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.slot(slots, *a) {
                    for i in 0..m {
                        for j in 0..k {
                            let r = i * k + j;
                            let gij = g[r];
                            for t in 0..d {
                                da[i * d + t] += gij * bv[r * d + t];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(slots, *b) {
                    for i in 0..m {
                        for j in 0..k {
                            let r = i * k + j;
                            let gij = g[r];
                            for t in 0..d {
                                db[r * d + t] += gij * av[i * d + t];
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(dx) = self.slot(slots, *x) {
                    let xv = self.value(*x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let raw = dot(&xv[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]).sqrt();
                        if raw < nrm {
                            // floored: y = x / eps is linear in x
                            for j in 0..d {
                                dx[r * d + j] += gr[j] / nrm;
                            }
                            continue;
                        }
                        let gy = dot(gr, yr);
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * gy) / nrm;
                        }
                    }
                }
            }
            Op::RelGather {
                p,
                n,
                tq,
                tk,
                max_dist,
            } => {
                let w = 2 * max_dist + 1;
                if let Some(dp) = self.slot(slots, *p) {
                    for b in 0..*n {
                        for i in 0..*tq {
                            let base = (b * tq + i) * w;
                            let grow = &g[(b * tq + i) * tk..(b * tq + i + 1) * tk];
                            for (j, &gv) in grow.iter().enumerate() {
                                dp[base + rel_index(i, j, *max_dist)] += gv;
                            }
                        }
                    }
                }
            }
            Op::Unfold {
                x,
                lens,
                t,
                c,
                kernel,
                stride,
            } => {
                let t_out = t.div_ceil(*stride);
                if let Some(dx) = self.slot(slots, *x) {
                    let mut o = 0;
                    for (bi, &len) in lens.iter().enumerate() {
                        for to in 0..t_out {
                            for kk in 0..*kernel {
                                let src = (to * stride + kk).min(len - 1);
                                let off = (bi * t + src) * c;
                                add_into(&mut dx[off..off + c], &g[o..o + c]);
                                o += c;
                            }
                        }
                    }
                }
            }
            Op::MaskRows { x, repl, mask } => {
                let d = self.value(*repl).len();
                if let Some(dx) = self.slot(slots, *x) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut dx[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                if let Some(dr) = self.slot(slots, *repl) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(dr, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(slots, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::StraightThrough { z } => {
                if let Some(dz) = self.slot(slots, *z) {
                    add_into(dz, g);
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(dx) = self.slot(slots, *x) {
                    for ((d, &gi), &k) in dx.iter_mut().zip(g).zip(keep) {
                        *d += gi * k;
                    }
                }
            }
        }
    }
}

#[inline]
fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let rel = j as isize - i as isize;
    let d = max_dist as isize;
    (rel.clamp(-d, d) + d) as usize
}

fn swap12<T: Float>(x: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
