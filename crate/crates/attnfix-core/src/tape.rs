//! Define-by-run reverse-mode autodiff on a recorded tape.
//!
//! Every differentiable computation appends nodes to a [`Tape`]; node ids
//! are topologically ordered by construction, so a backward pass is a
//! single reverse sweep. A tape is single-use: `backward` consumes it
//! (values stay readable, but a second backward is rejected).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// x[.., m] + b[m], broadcast over leading axes.
    AddBias(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Conv2d {
        x: Var,
        kernels: Var,
    },
    Sum(Var),
    Mean(Var),
    /// [n, m] -> [n], sum over the last axis.
    SumRows(Var),
    /// [a, b, c] -> [a, c], mean over the middle axis.
    MeanAxis1(Var),
    /// [n] -> [n, m], repeat along a new last axis.
    BroadcastCol(Var, usize),
    Concat0(Var, Var),
    GatherRows(Var, Vec<usize>),
    /// out_flat[i] = x_flat[indices[i]] — fixed permutations/patchify.
    GatherFlat(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    BceLoss {
        probs: Var,
        labels: Vec<f64>,
    },
    /// InfoNCE over a similarity matrix; each entry is
    /// (anchor row, positive column, negative columns).
    InfoNce {
        sims: Var,
        temperature: f64,
        pairs: Vec<(usize, usize, Vec<usize>)>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Clamp applied to detector probabilities before logs.
pub const PROB_CLIP: f64 = 1e-7;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Records a tensor as a leaf. Gradients flow back to it iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape.clone(),
            tensor.data.clone(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        debug_assert_eq!(numel(shape), data.len());
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    /// Copies the gradient accumulated at `v` into `target.grad`.
    pub fn grad_into(&self, v: Var, target: &mut Tensor) {
        target.accumulate_grad(&self.nodes[v.0].grad);
    }

    // ── elementwise ────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Div(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if self.nodes[b.0].shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let bias = &self.nodes[b.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % m])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(shape, data, rg, Op::Scale(x, c))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(shape, data, rg, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, libm::sqrt, Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    // ── linear algebra ─────────────────────────────────────────────

    /// Matrix product for rank-2 operands or rank-3 operands with equal
    /// leading (batch/head) dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, p) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2])
            }
            _ => return Err(mismatch()),
        };
        let rank3 = sa.len() == 3;
        let mut data = vec![0.0; batch * m * p];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = bi * k * p;
                let co = bi * m * p;
                for i in 0..m {
                    for kk in 0..k {
                        let av = da[ao + i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = bo + kk * p;
                        let crow = co + i * p;
                        for j in 0..p {
                            data[crow + j] += av * db[brow + j];
                        }
                    }
                }
            }
        }
        let shape = if rank3 {
            vec![batch, m, p]
        } else {
            vec![m, p]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Matmul(a, b)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "transpose2",
                    lhs: s.clone(),
                    rhs: vec![],
                })
            }
        };
        let rank3 = s.len() == 3;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let shape = if rank3 {
            vec![batch, c, r]
        } else {
            vec![c, r]
        };
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Transpose2(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// [n, h*dk] -> [h, n, dk].
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || !s[1].is_multiple_of(heads) {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                lhs: s.clone(),
                rhs: vec![heads],
            });
        }
        let (n, d) = (s[0], s[1]);
        let dk = d / heads;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..dk {
                    data[h * n * dk + i * dk + j] = src[i * d + h * dk + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![heads, n, dk], data, rg, Op::SplitHeads(x, heads)))
    }

    /// [h, n, dk] -> [n, h*dk].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (heads, n, dk) = (s[0], s[1], s[2]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..dk {
                    data[i * heads * dk + h * dk + j] = src[h * n * dk + i * dk + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, heads * dk], data, rg, Op::MergeHeads(x)))
    }

    // ── normalizations ─────────────────────────────────────────────

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        let n = *s.last().ok_or(Error::ShapeMismatch {
            op: "softmax_rows",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if self.nodes[x.0].data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for row in 0..src.len() / n {
            let o = row * n;
            let max = src[o..o + n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = libm::exp(src[o + j] - max);
                data[o + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[o + j] /= sum;
            }
        }
        let shape = s.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::SoftmaxRows(x)))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (n, d) = (s[0], s[1]);
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.nodes[gain.0].shape.clone(),
                rhs: vec![d],
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            vec![n, d],
            data,
            rg,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    // ── convolution ────────────────────────────────────────────────

    /// 3x3 convolution, zero padding 1, stride 1. The only configuration
    /// the detector needs.
    pub fn conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        let sk = &self.nodes[kernels.0].shape;
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sk.clone(),
        };
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != sx[0] {
            return Err(mismatch());
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let c_out = sk[0];
        let src = &self.nodes[x.0].data;
        let ker = &self.nodes[kernels.0].data;
        let mut data = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for ci in 0..c_in {
                let ko = (co * c_in + ci) * 9;
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sxp = xx as isize + dx as isize - 1;
                                if sxp < 0 || sxp >= w as isize {
                                    continue;
                                }
                                acc += ker[ko + dy * 3 + dx]
                                    * src[ci * h * w + sy as usize * w + sxp as usize];
                            }
                        }
                        data[co * h * w + y * w + xx] += acc;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(vec![c_out, h, w], data, rg, Op::Conv2d { x, kernels }))
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![total], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![total / n], rg, Op::Mean(x))
    }

    /// [n, m] -> [n].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_rows",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (n, m) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let data: Vec<f64> = (0..n).map(|i| src[i * m..(i + 1) * m].iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n], data, rg, Op::SumRows(x)))
    }

    /// [a, b, c] -> [a, c], mean over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "mean_axis1",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; a * c];
        for ai in 0..a {
            for bi in 0..b {
                for ci in 0..c {
                    data[ai * c + ci] += src[ai * b * c + bi * c + ci];
                }
            }
        }
        for v in &mut data {
            *v /= b as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![a, c], data, rg, Op::MeanAxis1(x)))
    }

    /// [n] -> [n, m].
    pub fn broadcast_col(&mut self, x: Var, m: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_col",
                lhs: s.clone(),
                rhs: vec![m],
            });
        }
        let n = s[0];
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = src[i];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], data, rg, Op::BroadcastCol(x, m)))
    }

    /// Concatenates two rank-2 tensors along axis 0.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat0",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Concat0(a, b)))
    }

    /// Gathers rows of a rank-2 table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = &self.nodes[table.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: v,
                });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), d],
            data,
            rg,
            Op::GatherRows(table, indices.to_vec()),
        ))
    }

    /// Rearranges flat elements of `x` into a new shape via an index map
    /// (e.g. image-to-patch extraction). Indices may repeat.
    pub fn gather_flat(&mut self, x: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        if numel(shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather_flat",
                lhs: shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let src = &self.nodes[x.0].data;
        for &i in indices {
            if i >= src.len() {
                return Err(Error::IndexOutOfRange {
                    what: "gather_flat",
                    index: i,
                    len: src.len(),
                });
            }
        }
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            shape.to_vec(),
            data,
            rg,
            Op::GatherFlat(x, indices.to_vec()),
        ))
    }

    // ── losses ─────────────────────────────────────────────────────

    /// Mean cross-entropy over logit rows [b, C] against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        for &t in targets {
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    len: c,
                });
            }
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            total += lse - row[targets[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![total / b as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy over probabilities, clipped to
    /// [PROB_CLIP, 1 - PROB_CLIP] before the logs.
    pub fn bce_loss(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let node = &self.nodes[probs.0];
        if node.data.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: node.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y != 0.0 && y != 1.0 {
                return Err(Error::Contract(alloc::format!(
                    "bce_loss labels must be 0 or 1, got {y}"
                )));
            }
        }
        let mut total = 0.0;
        for (p, y) in node.data.iter().zip(labels) {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
        }
        let n = labels.len() as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            vec![],
            vec![total / n],
            rg,
            Op::BceLoss {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// InfoNCE over a precomputed similarity matrix [n, n]. Each pair is
    /// (anchor, positive, negatives); loss is averaged over pairs.
    pub fn info_nce(
        &mut self,
        sims: Var,
        temperature: f64,
        pairs: &[(usize, usize, Vec<usize>)],
    ) -> Result<Var> {
        let s = &self.nodes[sims.0].shape;
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::ShapeMismatch {
                op: "info_nce",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let n = s[0];
        for (a, p, negs) in pairs {
            if *a >= n || *p >= n || negs.iter().any(|&k| k >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "info_nce pair",
                    index: (*a).max(*p),
                    len: n,
                });
            }
        }
        if pairs.is_empty() {
            let rg = self.rg(sims);
            return Ok(self.push(
                vec![],
                vec![0.0],
                rg,
                Op::InfoNce {
                    sims,
                    temperature,
                    pairs: Vec::new(),
                },
            ));
        }
        let src = &self.nodes[sims.0].data;
        let mut total = 0.0;
        for (a, p, negs) in pairs {
            let sp = src[a * n + p] / temperature;
            // log-sum-exp over {positive} ∪ negatives
            let mut max = sp;
            for &k in negs {
                max = max.max(src[a * n + k] / temperature);
            }
            let mut denom = libm::exp(sp - max);
            for &k in negs {
                denom += libm::exp(src[a * n + k] / temperature - max);
            }
            total += -(sp - max - libm::log(denom));
        }
        let rg = self.rg(sims);
        Ok(self.push(
            vec![],
            vec![total / pairs.len() as f64],
            rg,
            Op::InfoNce {
                sims,
                temperature,
                pairs: pairs.to_vec(),
            },
        ))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep populating gradients for every reachable node that
    /// requires grad. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.nodes[loss.0].shape.is_empty() && self.nodes[loss.0].shape != [1] {
            return Err(Error::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        self.consumed = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if self.nodes[id].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        // Take the output grad by value to satisfy the borrow checker;
        // input grads are written through split indices.
        let out_grad = core::mem::take(&mut self.nodes[id].grad);
        macro_rules! acc {
            ($v:expr, $i:expr, $val:expr) => {
                if self.nodes[$v.0].requires_grad {
                    self.nodes[$v.0].grad[$i] += $val;
                }
            };
        }
        match core::mem::replace(&mut self.nodes[id].op, Op::Leaf) {
            Op::Leaf => {
                self.nodes[id].op = Op::Leaf;
            }
            op => {
                match &op {
                    Op::Leaf => unreachable!(),
                    Op::Add(a, b) => {
                        for (i, &g) in out_grad.iter().enumerate() {
                            acc!(a, i, g);
                            acc!(b, i, g);
                        }
                    }
                    Op::Sub(a, b) => {
                        for (i, &g) in out_grad.iter().enumerate() {
                            acc!(a, i, g);
                            acc!(b, i, -g);
                        }
                    }
                    Op::Mul(a, b) => {
                        for i in 0..out_grad.len() {
                            let g = out_grad[i];
                            let av = self.nodes[a.0].data[i];
                            let bv = self.nodes[b.0].data[i];
                            acc!(a, i, g * bv);
                            acc!(b, i, g * av);
                        }
                    }
                    Op::Div(a, b) => {
                        for i in 0..out_grad.len() {
                            let g = out_grad[i];
                            let av = self.nodes[a.0].data[i];
                            let bv = self.nodes[b.0].data[i];
                            acc!(a, i, g / bv);
                            acc!(b, i, -g * av / (bv * bv));
                        }
                    }
                    Op::AddBias(x, b) => {
                        let m = self.nodes[b.0].data.len();
                        for (i, &g) in out_grad.iter().enumerate() {
                            acc!(x, i, g);
                            acc!(b, i % m, g);
                        }
                    }
                    Op::Scale(x, c) => {
                        for (i, &g) in out_grad.iter().enumerate() {
                            acc!(x, i, g * c);
                        }
                    }
                    Op::Matmul(a, b) => {
                        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                        let (batch, m, k, p) = if sa.len() == 2 {
                            (1, sa[0], sa[1], sb[1])
                        } else {
                            (sa[0], sa[1], sa[2], sb[2])
                        };
                        let da = self.nodes[a.0].data.clone();
                        let db = self.nodes[b.0].data.clone();
                        for bi in 0..batch {
                            let ao = bi * m * k;
                            let bo = bi * k * p;
                            let co = bi * m * p;
                            if self.nodes[a.0].requires_grad {
                                for i in 0..m {
                                    for j in 0..p {
                                        let g = out_grad[co + i * p + j];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        for kk in 0..k {
                                            self.nodes[a.0].grad[ao + i * k + kk] +=
                                                g * db[bo + kk * p + j];
                                        }
                                    }
                                }
                            }
                            if self.nodes[b.0].requires_grad {
                                for i in 0..m {
                                    for kk in 0..k {
                                        let av = da[ao + i * k + kk];
                                        if av == 0.0 {
                                            continue;
                                        }
                                        for j in 0..p {
                                            self.nodes[b.0].grad[bo + kk * p + j] +=
                                                av * out_grad[co + i * p + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Op::Transpose2(x) => {
                        let s = &self.nodes[x.0].shape;
                        let (batch, r, c) = if s.len() == 2 {
                            (1, s[0], s[1])
                        } else {
                            (s[0], s[1], s[2])
                        };
                        for b in 0..batch {
                            let o = b * r * c;
                            for i in 0..r {
                                for j in 0..c {
                                    acc!(x, o + i * c + j, out_grad[o + j * r + i]);
                                }
                            }
                        }
                    }
                    Op::Reshape(x) => {
                        for (i, &g) in out_grad.iter().enumerate() {
                            acc!(x, i, g);
                        }
                    }
                    Op::SplitHeads(x, heads) => {
                        let s = &self.nodes[x.0].shape;
                        let (n, d) = (s[0], s[1]);
                        let dk = d / heads;
                        for h in 0..*heads {
                            for i in 0..n {
                                for j in 0..dk {
                                    acc!(x, i * d + h * dk + j, out_grad[h * n * dk + i * dk + j]);
                                }
                            }
                        }
                    }
                    Op::MergeHeads(x) => {
                        let s = &self.nodes[x.0].shape;
                        let (heads, n, dk) = (s[0], s[1], s[2]);
                        for h in 0..heads {
                            for i in 0..n {
                                for j in 0..dk {
                                    acc!(x, h * n * dk + i * dk + j, out_grad[i * heads * dk + h * dk + j]);
                                }
                            }
                        }
                    }
                    Op::Exp(x) => {
                        for i in 0..out_grad.len() {
                            let y = self.nodes[id].data[i];
                            acc!(x, i, out_grad[i] * y);
                        }
                    }
                    Op::Log(x) => {
                        for i in 0..out_grad.len() {
                            let v = self.nodes[x.0].data[i];
                            acc!(x, i, out_grad[i] / v);
                        }
                    }
                    Op::Sqrt(x) => {
                        for i in 0..out_grad.len() {
                            let y = self.nodes[id].data[i];
                            acc!(x, i, out_grad[i] * 0.5 / y);
                        }
                    }
                    Op::Sigmoid(x) => {
                        for i in 0..out_grad.len() {
                            let y = self.nodes[id].data[i];
                            acc!(x, i, out_grad[i] * y * (1.0 - y));
                        }
                    }
                    Op::Relu(x) => {
                        for i in 0..out_grad.len() {
                            let v = self.nodes[x.0].data[i];
                            if v > 0.0 {
                                acc!(x, i, out_grad[i]);
                            }
                        }
                    }
                    Op::Gelu(x) => {
                        for i in 0..out_grad.len() {
                            let v = self.nodes[x.0].data[i];
                            acc!(x, i, out_grad[i] * gelu_grad(v));
                        }
                    }
                    Op::SoftmaxRows(x) => {
                        let n = *self.nodes[id].shape.last().unwrap();
                        let y = self.nodes[id].data.clone();
                        for row in 0..y.len() / n {
                            let o = row * n;
                            let dot: f64 =
                                (0..n).map(|j| out_grad[o + j] * y[o + j]).sum();
                            for j in 0..n {
                                acc!(x, o + j, y[o + j] * (out_grad[o + j] - dot));
                            }
                        }
                    }
                    Op::LayerNorm { x, gain, bias, eps } => {
                        let s = &self.nodes[x.0].shape;
                        let (n, d) = (s[0], s[1]);
                        let src = self.nodes[x.0].data.clone();
                        let g = self.nodes[gain.0].data.clone();
                        for i in 0..n {
                            let row = &src[i * d..(i + 1) * d];
                            let mean = row.iter().sum::<f64>() / d as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                            let inv = 1.0 / libm::sqrt(var + eps);
                            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                            let dy = &out_grad[i * d..(i + 1) * d];
                            let dxhat: Vec<f64> =
                                (0..d).map(|j| dy[j] * g[j]).collect();
                            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dxhat_xhat =
                                (0..d).map(|j| dxhat[j] * xhat[j]).sum::<f64>() / d as f64;
                            for j in 0..d {
                                acc!(
                                    x,
                                    i * d + j,
                                    inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)
                                );
                                acc!(gain, j, dy[j] * xhat[j]);
                                acc!(bias, j, dy[j]);
                            }
                        }
                    }
                    Op::Conv2d { x, kernels } => {
                        let sx = &self.nodes[x.0].shape;
                        let sk = &self.nodes[kernels.0].shape;
                        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
                        let c_out = sk[0];
                        let src = self.nodes[x.0].data.clone();
                        let ker = self.nodes[kernels.0].data.clone();
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                let ko = (co * c_in + ci) * 9;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let g = out_grad[co * h * w + y * w + xx];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        for dy in 0..3usize {
                                            let sy = y as isize + dy as isize - 1;
                                            if sy < 0 || sy >= h as isize {
                                                continue;
                                            }
                                            for dx in 0..3usize {
                                                let sxp = xx as isize + dx as isize - 1;
                                                if sxp < 0 || sxp >= w as isize {
                                                    continue;
                                                }
                                                let si =
                                                    ci * h * w + sy as usize * w + sxp as usize;
                                                acc!(kernels, ko + dy * 3 + dx, g * src[si]);
                                                acc!(x, si, g * ker[ko + dy * 3 + dx]);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Op::Sum(x) => {
                        let g = out_grad[0];
                        for i in 0..self.nodes[x.0].data.len() {
                            acc!(x, i, g);
                        }
                    }
                    Op::Mean(x) => {
                        let n = self.nodes[x.0].data.len() as f64;
                        let g = out_grad[0] / n;
                        for i in 0..self.nodes[x.0].data.len() {
                            acc!(x, i, g);
                        }
                    }
                    Op::SumRows(x) => {
                        let s = &self.nodes[x.0].shape;
                        let (n, m) = (s[0], s[1]);
                        for i in 0..n {
                            for j in 0..m {
                                acc!(x, i * m + j, out_grad[i]);
                            }
                        }
                    }
                    Op::MeanAxis1(x) => {
                        let s = &self.nodes[x.0].shape;
                        let (a, b, c) = (s[0], s[1], s[2]);
                        for ai in 0..a {
                            for bi in 0..b {
                                for ci in 0..c {
                                    acc!(
                                        x,
                                        ai * b * c + bi * c + ci,
                                        out_grad[ai * c + ci] / b as f64
                                    );
                                }
                            }
                        }
                    }
                    Op::BroadcastCol(x, m) => {
                        let n = self.nodes[x.0].data.len();
                        for i in 0..n {
                            let mut g = 0.0;
                            for j in 0..*m {
                                g += out_grad[i * m + j];
                            }
                            acc!(x, i, g);
                        }
                    }
                    Op::Concat0(a, b) => {
                        let na = self.nodes[a.0].data.len();
                        for i in 0..na {
                            acc!(a, i, out_grad[i]);
                        }
                        for i in 0..self.nodes[b.0].data.len() {
                            acc!(b, i, out_grad[na + i]);
                        }
                    }
                    Op::GatherRows(table, indices) => {
                        let d = self.nodes[table.0].shape[1];
                        for (r, &i) in indices.iter().enumerate() {
                            for j in 0..d {
                                acc!(table, i * d + j, out_grad[r * d + j]);
                            }
                        }
                    }
                    Op::GatherFlat(x, indices) => {
                        for (i, &src_idx) in indices.iter().enumerate() {
                            acc!(x, src_idx, out_grad[i]);
                        }
                    }
                    Op::CrossEntropy { logits, targets } => {
                        let s = &self.nodes[logits.0].shape;
                        let (b, c) = (s[0], s[1]);
                        let src = self.nodes[logits.0].data.clone();
                        let g = out_grad[0] / b as f64;
                        for i in 0..b {
                            let row = &src[i * c..(i + 1) * c];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
                            for j in 0..c {
                                let p = libm::exp(row[j] - max) / sum;
                                let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                                acc!(logits, i * c + j, g * (p - onehot));
                            }
                        }
                    }
                    Op::BceLoss { probs, labels } => {
                        let n = labels.len() as f64;
                        let src = self.nodes[probs.0].data.clone();
                        let g = out_grad[0] / n;
                        for (i, (&p, &y)) in src.iter().zip(labels.iter()).enumerate() {
                            // zero gradient outside the clip range
                            if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                                acc!(probs, i, g * (p - y) / (p * (1.0 - p)));
                            }
                        }
                    }
                    Op::InfoNce {
                        sims,
                        temperature,
                        pairs,
                    } => {
                        if !pairs.is_empty() {
                            let n = self.nodes[sims.0].shape[0];
                            let src = self.nodes[sims.0].data.clone();
                            let g = out_grad[0] / pairs.len() as f64;
                            for (a, p, negs) in pairs {
                                let sp = src[a * n + p] / temperature;
                                let mut max = sp;
                                for &k in negs {
                                    max = max.max(src[a * n + k] / temperature);
                                }
                                let ep = libm::exp(sp - max);
                                let mut denom = ep;
                                for &k in negs {
                                    denom += libm::exp(src[a * n + k] / temperature - max);
                                }
                                // d(-log softmax)/ds = (q - onehot)/T
                                acc!(sims, a * n + p, g * (ep / denom - 1.0) / temperature);
                                for &k in negs {
                                    let q = libm::exp(src[a * n + k] / temperature - max) / denom;
                                    acc!(sims, a * n + k, g * q / temperature);
                                }
                            }
                        }
                    }
                }
                self.nodes[id].op = op;
            }
        }
        self.nodes[id].grad = out_grad;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
