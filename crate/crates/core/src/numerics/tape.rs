//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use super::kernels;
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    PickSum {
        x: Var,
        picks: Vec<(usize, T)>,
    },
}

struct Node<T: Scalar> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    tracked: bool,
    leaf: bool,
    op: Op<T>,
}

/// Recorded computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates but never records backward rules.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), n.value.clone())
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    /// Registers a tensor as an input; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.input(t, t.requires_grad())
    }

    /// Registers a tensor as an input, overriding its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<T>, tracked: bool) -> Var {
        let tracked = tracked && self.grad_enabled;
        self.nodes.push(Node {
            value: t.shared().clone(),
            shape: t.shape().to_vec(),
            tracked,
            leaf: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: Arc::new(value),
            shape,
            tracked,
            leaf: false,
            op: if tracked { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout of a linear layer with weight `[d_out, d_in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_t(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(row) != [n] {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += *b;
            }
        }
        Ok(self.push(out, vec![m, n], Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization of `[m,n]` with `[n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [n] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [n] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let nf = T::from_usize(n).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            out,
            vec![m, n],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax of `[m,n]`. Entries where `mask` is false get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: vec![mk.len()],
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mut mx = T::neg_infinity();
            for j in 0..n {
                if allowed(j) {
                    mx = mx.max(x[i * n + j]);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for j in 0..n {
                if allowed(j) {
                    let e = (x[i * n + j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        Ok(self.push(out, vec![m, n], Op::Softmax(a), &[a]))
    }

    /// Log-softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "log_softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let x = self.value(a);
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("log_softmax input contains {bad}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
                let z = (0..len).map(|j| (x[at(j)] - mx).exp()).sum::<T>();
                let lz = mx + z.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lz;
                }
            }
        }
        Ok(self.push(
            out,
            shape,
            Op::LogSoftmax {
                x: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Selects rows of a `[r,n]` table; rows may repeat.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, n) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: vec![r, n],
                rhs: vec![bad],
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            out,
            vec![rows.len(), n],
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + width > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, width],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + width]);
        }
        Ok(self.push(out, vec![m, width], Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, w) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(out, vec![m, total], Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum(a), &[a])
    }

    /// `Σ w · a[flat_index]` over the given picks.
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, T)>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&(bad, _)) = picks.iter().find(|(i, _)| *i >= v.len()) {
            return Err(Error::Dimension {
                op: "pick_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let s = picks.iter().map(|&(i, w)| w * v[i]).sum();
        Ok(self.push(vec![s], vec![], Op::PickSum { x: a, picks }, &[a]))
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if node.leaf && node.tracked {
                    Some(grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        let live = |v: Var| nodes[v.0].tracked;
        // Gradient buffer of an input, allocated on first use.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if live(*a) {
                    kernels::mm_t(g, val(*b), slot!(*a), m, n, k);
                }
                if live(*b) {
                    kernels::t_mm(val(*a), g, slot!(*b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if live(*a) {
                    kernels::mm(g, val(*b), slot!(*a), m, n, k);
                }
                if live(*b) {
                    kernels::t_mm(g, val(*a), slot!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if live(v) {
                        for (d, x) in slot!(v).iter_mut().zip(g) {
                            *d += *x;
                        }
                    }
                }
            }
            Op::AddRow(a, r) => {
                if live(*a) {
                    for (d, x) in slot!(*a).iter_mut().zip(g) {
                        *d += *x;
                    }
                }
                if live(*r) {
                    let n = nodes[r.0].value.len();
                    let d = slot!(*r);
                    for row in g.chunks_exact(n) {
                        for (dj, x) in d.iter_mut().zip(row) {
                            *dj += *x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let bv = val(*b);
                    for ((d, x), y) in slot!(*a).iter_mut().zip(g).zip(bv) {
                        *d += *x * *y;
                    }
                }
                if live(*b) {
                    let av = val(*a);
                    for ((d, x), y) in slot!(*b).iter_mut().zip(g).zip(av) {
                        *d += *x * *y;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, x) in slot!(*a).iter_mut().zip(g) {
                    *d += *x * *c;
                }
            }
            Op::Gelu(a) => {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three = T::lit(3.0);
                let av = val(*a);
                for ((d, x), &z) in slot!(*a).iter_mut().zip(g).zip(av) {
                    let t = (c * (z + k * z * z * z)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * z * z);
                    *d += *x * (half * (T::one() + t) + half * z * dt);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.len();
                let m = rstd.len();
                if live(*gain) {
                    let d = slot!(*gain);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if live(*bias) {
                    let d = slot!(*bias);
                    for row in g.chunks_exact(n) {
                        for (dj, x) in d.iter_mut().zip(row) {
                            *dj += *x;
                        }
                    }
                }
                if live(*x) {
                    let gv = val(*gain);
                    let nf = T::from_usize(n).unwrap();
                    let d = slot!(*x);
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let v = g[i * n + j] * gv[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[i * n + j];
                        }
                        let (s1, s2) = (s1 / nf, s2 / nf);
                        for j in 0..n {
                            d[i * n + j] += rstd[i] * (dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = nodes[a.0].shape[1];
                let y = &node.value;
                let d = slot!(*a);
                for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let s: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let d = slot!(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: T = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] += g[at(j)] - y[at(j)].exp() * s;
                        }
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let n = nodes[table.0].shape[1];
                let d = slot!(*table);
                for (r, &src) in rows.iter().enumerate() {
                    for (dj, x) in d[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *dj += *x;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].shape[1];
                let w = node.shape[1];
                let d = slot!(*x);
                for (i, grow) in g.chunks_exact(w).enumerate() {
                    for (dj, v) in d[i * n + start..i * n + start + w].iter_mut().zip(grow) {
                        *dj += *v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if live(p) {
                        let d = slot!(p);
                        for (i, drow) in d.chunks_exact_mut(w).enumerate() {
                            for (dj, v) in drow.iter_mut().zip(&g[i * total + off..i * total + off + w]) {
                                *dj += *v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                for d in slot!(*a).iter_mut() {
                    *d += s;
                }
            }
            Op::PickSum { x, picks } => {
                let s = g[0];
                let d = slot!(*x);
                for &(i, w) in picks {
                    d[i] += s * w;
                }
            }
        }
    }
}

/// Gradients of tracked leaves, produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Stores the gradient of `v` in `tensor.grad`, replacing any previous value.
    pub fn write_into(&mut self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.take(v) {
            Some(g) => tensor.set_grad(g),
            None => Ok(()),
        }
    }
}
