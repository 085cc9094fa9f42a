use rand::Rng;

use super::kernels::{axpy, dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::Tensor;
use crate::error::{Result, StetError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    /// Elementwise add; rhs may be a suffix-broadcast of lhs.
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product; rhs may be a suffix-broadcast of lhs.
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Pow(Var, f64),
    Gelu(Var),
    Relu(Var),
    ClampMin(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Dropout { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    MaskFill { x: Var, keep: Vec<bool> },
    Unfold { x: Var, window: usize },
    WindowScores { q: Var, kw: Var },
    WindowMix { p: Var, vw: Var },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient for leaves that require it.
    grad: Vec<f64>,
}

/// Linear record of executed operations, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf, if one was requested and computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() {
            None
        } else {
            Some(&n.grad)
        }
    }

    /// `(param id, gradient)` for every bound parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Leaf { param: Some(id) } if !n.grad.is_empty() => Some((id, n.grad.as_slice())),
            _ => None,
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(StetError::dim("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf { param: None }, false))
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, true)
    }

    /// A differentiable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id) }, true)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(StetError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(StetError::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(StetError::dim("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(StetError::dim(op_name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len().max(1);
        let out = va
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % nb]))
            .collect();
        Ok((sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(s, v, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(s, v, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `x^p`, intended for non-negative `x`.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    // ---- structural ----------------------------------------------------

    /// Concatenates 2-D inputs along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| StetError::Config("concat of zero tensors".into()))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(StetError::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(StetError::dim("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(StetError::dim("reshape", self.shape(x), &shape));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, v, Op::Reshape(x), ng))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(StetError::Parameter(format!("dropout rate {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let v: Vec<f64> = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let s = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(s, v, Op::Dropout { x, mask }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(StetError::dim("layer_norm", &s, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d.max(1);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let v = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for r in 0..rows {
                let row = &v[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g[j] + b[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(s, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        if n == 0 {
            return Err(StetError::dim("softmax", &s, &[1]));
        }
        let v = self.value(x);
        let rows = v.len() / n;
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(StetError::DegenerateSlice { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - max).exp();
                sum += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= sum;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(s, out, Op::Softmax(x), ng))
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn mask_fill_neg_inf(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let v = self.value(x);
        if keep.is_empty() || v.len() % keep.len() != 0 {
            return Err(StetError::dim("mask_fill", &s, &[keep.len()]));
        }
        let nk = keep.len();
        let keep_full: Vec<bool> = (0..v.len()).map(|i| keep[i % nk]).collect();
        let out = v
            .iter()
            .zip(&keep_full)
            .map(|(&a, &k)| if k { a } else { f64::NEG_INFINITY })
            .collect();
        let ng = self.ng(x);
        Ok(self.push(s, out, Op::MaskFill { x, keep: keep_full }, ng))
    }

    /// Sliding neighborhoods along the first axis: `[t, d] -> [t, w, d]`.
    ///
    /// Slot `(i, j)` holds row `i - w/2 + j`, zero-filled outside `[0, t)`. The
    /// returned mask (`[t, w]`, row-major) is false on those padded slots.
    pub fn unfold_time(&mut self, x: Var, window: usize) -> Result<(Var, Vec<bool>)> {
        let s = self.shape(x).to_vec();
        if window % 2 == 0 {
            return Err(StetError::Config(format!("window size {window} must be odd")));
        }
        if s.len() != 2 || s[0] == 0 {
            return Err(StetError::dim("unfold_time", &s, &[window]));
        }
        let (t, d) = (s[0], s[1]);
        let (out, mask) = unfold_values(self.value(x), t, d, window);
        let ng = self.ng(x);
        let v = self.push(vec![t, window, d], out, Op::Unfold { x, window }, ng);
        Ok((v, mask))
    }

    /// Per-query scores against its own window: `q: [t, d]`, `kw: [t, w, d]` -> `[t, w]`.
    pub fn window_scores(&mut self, q: Var, kw: Var) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(kw).to_vec());
        if sq.len() != 2 || sk.len() != 3 || sk[0] != sq[0] || sk[2] != sq[1] {
            return Err(StetError::dim("window_scores", &sq, &sk));
        }
        let (t, w, d) = (sk[0], sk[1], sk[2]);
        let (qv, kv) = (self.value(q), self.value(kw));
        let mut out = vec![0.0; t * w];
        for i in 0..t {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..w {
                out[i * w + j] = dot(qi, &kv[(i * w + j) * d..(i * w + j + 1) * d]);
            }
        }
        let ng = self.ng(q) || self.ng(kw);
        Ok(self.push(vec![t, w], out, Op::WindowScores { q, kw }, ng))
    }

    /// Weighted sum of each query's window values: `p: [t, w]`, `vw: [t, w, d]` -> `[t, d]`.
    pub fn window_mix(&mut self, p: Var, vw: Var) -> Result<Var> {
        let (sp, sv) = (self.shape(p).to_vec(), self.shape(vw).to_vec());
        if sp.len() != 2 || sv.len() != 3 || sv[0] != sp[0] || sv[1] != sp[1] {
            return Err(StetError::dim("window_mix", &sp, &sv));
        }
        let (t, w, d) = (sv[0], sv[1], sv[2]);
        let (pv, vv) = (self.value(p), self.value(vw));
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..w {
                axpy(pv[i * w + j], &vv[(i * w + j) * d..(i * w + j + 1) * d], o);
            }
        }
        let ng = self.ng(p) || self.ng(vw);
        Ok(self.push(vec![t, d], out, Op::WindowMix { p, vw }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- reverse pass --------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    /// Returns the number of recorded operations visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(StetError::Rank {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            visited += 1;
            if let Op::Leaf { .. } = self.nodes[idx].op {
                let n = &mut self.nodes[idx];
                if n.grad.is_empty() {
                    n.grad = vec![0.0; n.value.len()];
                }
                axpy(1.0, &g, &mut n.grad);
            } else {
                self.backward_node(idx, &g, &mut grads);
            }
        }
        Ok(visited)
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let needs = |v: Var| nodes[v.0].needs_grad;
        // Lazily-allocated gradient slot for `v`.
        fn slot<'a>(grads: &'a mut [Vec<f64>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            if grads[v.0].is_empty() {
                grads[v.0] = vec![0.0; nodes[v.0].value.len()];
            }
            &mut grads[v.0]
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let bv = &nodes[b.0].value;
                    matmul_nt_into(g, bv, slot(grads, nodes, *a), m, n, k);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let av = &nodes[a.0].value;
                    matmul_tn_into(av, g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if needs(*a) {
                    // dA = dC · B
                    let bv = &nodes[b.0].value;
                    matmul_into(g, bv, slot(grads, nodes, *a), m, n, k);
                }
                if needs(*b) {
                    // dB = dCᵀ · A
                    let av = &nodes[a.0].value;
                    matmul_tn_into(g, av, slot(grads, nodes, *b), m, n, k);
                }
            }
            Op::Transpose(a) => {
                let s = &nodes[a.0].shape;
                let (m, n) = (s[0], s[1]);
                let ga = slot(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    axpy(1.0, g, slot(grads, nodes, *a));
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    let nb = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = bv.len();
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i % nb];
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] += gi * av[i];
                    }
                }
            }
            Op::Scale(a, k) => axpy(*k, g, slot(grads, nodes, *a)),
            Op::AddScalar(a) | Op::Reshape(a) => axpy(1.0, g, slot(grads, nodes, *a)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Pow(a, p) => {
                let x = &nodes[a.0].value;
                let p = *p;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    let d = if x[i] > 0.0 {
                        p * x[i].powf(p - 1.0)
                    } else if p == 1.0 {
                        1.0
                    } else if p > 1.0 || p == 0.0 {
                        0.0
                    } else {
                        // Derivative diverges at 0 for 0 < p < 1; the
                        // subgradient 0 keeps clamped regions inert.
                        0.0
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    let xi = x[i];
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    let d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
                    ga[i] += g[i] * d;
                }
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::ClampMin(a, lo) => {
                let x = &nodes[a.0].value;
                let lo = *lo;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    if x[i] > lo {
                        ga[i] += g[i];
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for x in xs {
                    let w = nodes[x.0].shape[1];
                    if needs(*x) {
                        let gx = slot(grads, nodes, *x);
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                                &mut gx[r * w..(r + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let (rows, len) = (node.shape[0], node.shape[1]);
                let gx = slot(grads, nodes, *x);
                for r in 0..rows {
                    axpy(
                        1.0,
                        &g[r * len..(r + 1) * len],
                        &mut gx[r * cols + start..r * cols + start + len],
                    );
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gv = &nodes[gamma.0].value;
                if needs(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for r in 0..rows {
                        axpy(1.0, &g[r * d..(r + 1) * d], gb);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xh = 0.0;
                        for j in 0..d {
                            let dy = gr[j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xh += dy * xh[j];
                        }
                        for j in 0..d {
                            let dy = gr[j] * gv[j];
                            gx[r * d + j] +=
                                rstd[r] * (dy - inv_d * sum_dy - xh[j] * inv_d * sum_dy_xh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let gx = slot(grads, nodes, *x);
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                let gx = slot(grads, nodes, *x);
                for i in 0..g.len() {
                    if keep[i] {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Unfold { x, window } => {
                let (t, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let w = *window;
                let half = w / 2;
                let gx = slot(grads, nodes, *x);
                for i in 0..t {
                    for j in 0..w {
                        let src = i as isize - half as isize + j as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        axpy(
                            1.0,
                            &g[(i * w + j) * d..(i * w + j + 1) * d],
                            &mut gx[src * d..(src + 1) * d],
                        );
                    }
                }
            }
            Op::WindowScores { q, kw } => {
                let (t, w, d) = (nodes[kw.0].shape[0], nodes[kw.0].shape[1], nodes[kw.0].shape[2]);
                let (qv, kv) = (&nodes[q.0].value, &nodes[kw.0].value);
                if needs(*q) {
                    let gq = slot(grads, nodes, *q);
                    for i in 0..t {
                        for j in 0..w {
                            axpy(
                                g[i * w + j],
                                &kv[(i * w + j) * d..(i * w + j + 1) * d],
                                &mut gq[i * d..(i + 1) * d],
                            );
                        }
                    }
                }
                if needs(*kw) {
                    let gk = slot(grads, nodes, *kw);
                    for i in 0..t {
                        for j in 0..w {
                            axpy(
                                g[i * w + j],
                                &qv[i * d..(i + 1) * d],
                                &mut gk[(i * w + j) * d..(i * w + j + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::WindowMix { p, vw } => {
                let (t, w, d) = (nodes[vw.0].shape[0], nodes[vw.0].shape[1], nodes[vw.0].shape[2]);
                let (pv, vv) = (&nodes[p.0].value, &nodes[vw.0].value);
                if needs(*p) {
                    let gp = slot(grads, nodes, *p);
                    for i in 0..t {
                        for j in 0..w {
                            gp[i * w + j] +=
                                dot(&g[i * d..(i + 1) * d], &vv[(i * w + j) * d..(i * w + j + 1) * d]);
                        }
                    }
                }
                if needs(*vw) {
                    let gv = slot(grads, nodes, *vw);
                    for i in 0..t {
                        for j in 0..w {
                            axpy(
                                pv[i * w + j],
                                &g[i * d..(i + 1) * d],
                                &mut gv[(i * w + j) * d..(i * w + j + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, nodes, *x);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eager version of the unfold used by [`Tape::unfold_time`].
pub(crate) fn unfold_values(x: &[f64], t: usize, d: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let half = w / 2;
    let mut out = vec![0.0; t * w * d];
    let mut mask = vec![false; t * w];
    for i in 0..t {
        for j in 0..w {
            let src = i as isize - half as isize + j as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            mask[i * w + j] = true;
            out[(i * w + j) * d..(i * w + j + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
        }
    }
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(&t2(&[vec![1.0, 2.0]]));
        let col = tape.constant(&t2(&[vec![3.0], vec![4.0]]));
        let p = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(p), &[11.0]);

        let err = tape.matmul(a, p).unwrap_err();
        match err {
            StetError::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![1, 1]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![3], vec![0.0; 3]).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant_from(vec![2], vec![1000.0, 1000.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant_from(vec![2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
        let x = tape
            .constant_from(vec![2, 2], vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY])
            .unwrap();
        assert!(matches!(tape.softmax(x), Err(StetError::DegenerateSlice { row: 1 })));
    }

    #[test]
    fn unfold_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0]]));
        let (u, mask) = tape.unfold_time(x, 3).unwrap();
        assert_eq!(tape.shape(u), &[3, 3, 2]);
        assert_eq!(
            tape.value(u),
            &[
                0.0, 0.0, 1.0, 10.0, 2.0, 20.0, //
                1.0, 10.0, 2.0, 20.0, 3.0, 30.0, //
                2.0, 20.0, 3.0, 30.0, 0.0, 0.0,
            ]
        );
        assert_eq!(mask, vec![false, true, true, true, true, true, true, true, false]);

        let (u1, m1) = tape.unfold_time(x, 1).unwrap();
        assert_eq!(tape.value(u1), tape.value(x));
        assert!(m1.iter().all(|&k| k));

        assert!(matches!(tape.unfold_time(x, 4), Err(StetError::Config(_))));
    }

    #[test]
    fn unfold_wide_window_enumeration() {
        // t=5, w=11: half=5, row i covers indices i-5..=i+5; valid count is 5
        // for every i, the other 6 slots are padding.
        let mut tape = Tape::new();
        let x = tape
            .constant_from(vec![5, 1], (0..5).map(f64::from).collect())
            .unwrap();
        let (u, mask) = tape.unfold_time(x, 11).unwrap();
        for i in 0..5 {
            let row = &mask[i * 11..(i + 1) * 11];
            assert_eq!(row.iter().filter(|&&k| k).count(), 5);
            let vals: Vec<f64> = (0..11)
                .filter(|&j| row[j])
                .map(|j| tape.value(u)[i * 11 + j])
                .collect();
            assert_eq!(vals, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // A second call accumulates.
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);

        assert!(matches!(tape.backward(sq), Err(StetError::Rank { .. })));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let a = tape.sigmoid(x);
        let b = tape.mul(a, x).unwrap();
        let c = tape.add(b, a).unwrap();
        let s = tape.sum(c);
        // leaf + sigmoid + mul + add + sum
        assert_eq!(tape.backward(s).unwrap(), 5);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn structural_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[4, 3]));
        let b = tape.constant(&Tensor::full(&[4, 3], 1.0));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[4, 6]);
        let z = tape.constant_from(vec![], vec![0.0]).unwrap();
        let s = tape.sigmoid(z);
        assert_eq!(tape.scalar(s), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = tape.dropout(c, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(c));
        let bad = tape.constant(&Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, bad), Err(StetError::Dimension { .. })));
        let bias = tape.constant(&Tensor::full(&[3], 2.0));
        let ab = tape.add(a, bias).unwrap();
        assert!(tape.value(ab).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1000], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = tape.dropout(x, 0.2, &mut rng).unwrap();
        let vals = tape.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept), "kept {kept}");
    }
}
