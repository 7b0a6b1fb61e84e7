//! Reverse-mode differentiation over a flat tape.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into a buffer per
//! node. Binary elementwise ops broadcast along any matrix dimension of size 1.

use crate::error::{dim_err, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Non-fatal conditions raised during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flag {
    /// A softmax row had every key masked and was defined as zeros.
    EmptyAttentionRow,
    /// A cosine similarity had a zero-norm operand and was replaced by its convention value.
    ZeroNorm,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flags: Vec<Flag>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("graph values are matrices")
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => dim_err(format!("cannot broadcast {a:?} with {b:?}")),
    }
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flags(&self) -> &[Flag] {
        &self.flags
    }

    pub fn raise(&mut self, flag: Flag) {
        self.flags.push(flag);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).dims2()?;
        let sb = self.value(b).dims2()?;
        let (r, c) = broadcast_shape(sa, sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = da[bidx(sa, i, j)];
                let y = db[bidx(sb, i, j)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Min => x.min(y),
                    Binary::Max => x.max(y),
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// Elementwise product with a constant (broadcast like the binary ops).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let sa = self.value(a).dims2()?;
        let sc = c.dims2()?;
        let (r, cols) = broadcast_shape(sa, sc)?;
        if (r, cols) != sa {
            return dim_err("mul_const may not grow its operand");
        }
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for j in 0..cols {
                out.push(da[i * cols + j] * c.data()[bidx(sc, i, j)]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, cols], out)?, Op::MulConst(a, c.clone()), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, c], data)?, op, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::SumRows(a), rg))
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, 1], out)?, Op::SumCols(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c || len == 0 {
            return dim_err(format!("column slice {start}+{len} out of {c}"));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r || len == 0 {
            return dim_err(format!("row slice {start}+{len} out of {r}"));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[len, c], out)?, Op::SliceRows(a, start), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return dim_err(format!("row selection {idx:?} out of {r} rows"));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], out)?,
            Op::SelectRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Single element `(r, c)` as a `1 x 1` node.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let row = self.select_rows(a, &[r])?;
        self.slice_cols(row, c, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero parts");
        }
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return dim_err(format!("concat_cols leading dims {pr} vs {r}"));
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
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero parts");
        }
        let c = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return dim_err(format!("concat_rows widths {pc} vs {c}"));
            }
            out.extend_from_slice(self.value(p).data());
            r += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row softmax over the unmasked columns. Masked entries are exactly zero;
    /// a row with no unmasked column is all zeros and raises
    /// [`Flag::EmptyAttentionRow`].
    pub fn masked_softmax_rows(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if let Some(m) = col_mask {
            if m.len() != c {
                return dim_err(format!("softmax mask length {} vs {c} columns", m.len()));
            }
        }
        let keep = |j: usize| col_mask.is_none_or(|m| m[j]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut empty = false;
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                empty = true;
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        if empty {
            self.raise(crate::graph::Flag::EmptyAttentionRow);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::LogSoftmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return dim_err(format!("layer norm affine params must have {c} entries"));
        }
        if eps <= 0.0 {
            return Err(crate::Error::Config("layer norm eps must be positive".into()));
        }
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Same-padded cross-correlation along the length axis.
    ///
    /// `x: L x C_in`, `w: k x C_in x C_out`, `b: C_out`; output `L x C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, cin) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let [k, wcin, cout] = ws[..] else {
            return dim_err(format!("conv weight must be rank 3, got {ws:?}"));
        };
        if k % 2 == 0 {
            return Err(crate::Error::Config(format!("conv kernel must be odd, got {k}")));
        }
        if wcin != cin {
            return dim_err(format!("conv expects {wcin} input channels, got {cin}"));
        }
        if self.value(b).len() != cout {
            return dim_err(format!("conv bias must have {cout} entries"));
        }
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(l * cout);
        for _ in 0..l {
            out.extend_from_slice(bd);
        }
        for t in 0..l {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for r in 0..k {
                let src = t as isize + r as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[(r * cin + ci) * cout..(r * cin + ci + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[l, cout], out)?, Op::Conv1d { x, w, b }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err("backward needs a scalar output");
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = val(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = val(*b).data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = val(*a).data();
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = shape2(val(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (r, c) = shape2(out);
                let sa = shape2(val(*a));
                let sb = shape2(val(*b));
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let partial = |x: f64, y: f64, wrt_a: bool| -> f64 {
                    match (kind, wrt_a) {
                        (Binary::Add, _) => 1.0,
                        (Binary::Sub, true) => 1.0,
                        (Binary::Sub, false) => -1.0,
                        (Binary::Mul, true) => y,
                        (Binary::Mul, false) => x,
                        (Binary::Div, true) => 1.0 / y,
                        (Binary::Div, false) => -x / (y * y),
                        (Binary::Min, true) => (x <= y) as u8 as f64,
                        (Binary::Min, false) => (x > y) as u8 as f64,
                        (Binary::Max, true) => (x >= y) as u8 as f64,
                        (Binary::Max, false) => (x < y) as u8 as f64,
                    }
                };
                for wrt_a in [true, false] {
                    let (target, shape) = if wrt_a { (*a, sa) } else { (*b, sb) };
                    if let Some(gt) = self.acc(grads, target) {
                        for i in 0..r {
                            for j in 0..c {
                                let x = ad[bidx(sa, i, j)];
                                let y = bd[bidx(sb, i, j)];
                                gt[bidx(shape, i, j)] += g[i * c + j] * partial(x, y, wrt_a);
                            }
                        }
                    }
                }
            }
            Op::MulConst(a, k) => {
                let (r, c) = shape2(out);
                let sk = shape2(k);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * k.data()[bidx(sk, i, j)];
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Relu(a) | Op::Abs(a) | Op::Square(a) | Op::Ln(a) | Op::Clamp(a, ..) => {
                let x = val(*a).data();
                let op = &node.op;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = match op {
                            Op::Relu(_) => (x[i] > 0.0) as u8 as f64,
                            Op::Abs(_) => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Op::Square(_) => 2.0 * x[i],
                            Op::Ln(_) => 1.0 / x[i],
                            Op::Clamp(_, lo, hi) => (x[i] >= *lo && x[i] <= *hi) as u8 as f64,
                            _ => unreachable!(),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) | Op::Sqrt(a) => {
                let y = out.data();
                let op = &node.op;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = match op {
                            Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                            Op::Tanh(_) => 1.0 - y[i] * y[i],
                            Op::Exp(_) => y[i],
                            Op::Sqrt(_) => 0.5 / y[i],
                            _ => unreachable!(),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumRows(a) => {
                let (r, c) = shape2(val(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j];
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                let (r, c) = shape2(val(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = shape2(val(*a));
                let len = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                let c = val(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = shape2(out);
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        for (o, &gv) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Softmax(a) => {
                let (r, c) = shape2(out);
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (r, c) = shape2(out);
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gs;
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
                let (r, c) = shape2(out);
                let gm = val(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let gh = g[i * c + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let gh = g[i * c + j] * gm[j];
                            gx[i * c + j] +=
                                rstd[i] / n * (n * gh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let (l, cin) = shape2(val(*x));
                let ws = val(*w).shape();
                let (k, cout) = (ws[0], ws[2]);
                let pad = k / 2;
                if let Some(gb) = self.acc(grads, *b) {
                    for t in 0..l {
                        for o in 0..cout {
                            gb[o] += g[t * cout + o];
                        }
                    }
                }
                let xd = val(*x).data();
                let wd = val(*w).data();
                if let Some(gw) = self.acc(grads, *w) {
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for r in 0..k {
                            let src = t as isize + r as isize - pad as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = xd[src as usize * cin + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let base = (r * cin + ci) * cout;
                                for (o, &gv) in gw[base..base + cout].iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for r in 0..k {
                            let src = t as isize + r as isize - pad as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let base = (r * cin + ci) * cout;
                                let s: f64 = wd[base..base + cout]
                                    .iter()
                                    .zip(grow)
                                    .map(|(a, b)| a * b)
                                    .sum();
                                gx[src as usize * cin + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::vector(&[1., 1., 1.]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(grads.get(b).unwrap().shape(), &[3]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1., 2.]));
        let y = g.leaf(Tensor::vector(&[3., 4.]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_are_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.0, -7.0]).unwrap());
        let y = g.masked_softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y).clone();
        for i in 0..2 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(v.at(i, 1), 0.0);
        }
        assert!(g.flags().is_empty());

        let z = g.masked_softmax_rows(x, Some(&[false, false, false])).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.flags(), &[Flag::EmptyAttentionRow]);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4, 2]));
        let w = g.leaf(Tensor::zeros(&[2, 2, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.conv1d(x, w, b), Err(crate::Error::Config(_))));
        let w = g.leaf(Tensor::zeros(&[3, 5, 3]));
        assert!(matches!(g.conv1d(x, w, b), Err(crate::Error::Dimension(_))));
    }
}
