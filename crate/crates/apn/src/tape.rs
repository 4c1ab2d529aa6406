//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A fresh [`Tape`] is built for every forward pass. Leaves are registered
//! with [`Tape::leaf`], operations append nodes in topological order, and a
//! single [`Tape::backward`] replays them in reverse, accumulating gradients
//! into every `requires_grad` leaf (fan-out sums, so d(x + x)/dx = 2).
//!
//! Every op validates its inputs, checks its output for NaN/Inf, and only
//! records a backward step when some ancestor actually requires a gradient.
//! A tape and its tensors stay on one thread; independent tapes may run
//! concurrently.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::{Error, Result};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// y = mul * x + add, elementwise.
    Affine { a: usize, mul: f64 },
    Sum { a: usize },
    Mean { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose2d { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    Softmax { a: usize, axis: usize },
    Conv2d { input: usize, kernel: usize, stride: usize, pad: usize, cols: Vec<f64> },
    BiasAddChw { a: usize, bias: usize },
    BiasAddRows { a: usize, bias: usize },
    UpsampleNearest2 { a: usize },
    AvgPool2 { a: usize },
    ConcatC { a: usize, b: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    GatherFlat { a: usize, idx: Vec<usize> },
    RowL2Norm { a: usize },
    L2Norm { a: usize },
    CosineRows { a: usize, b: usize },
    RowMeanCenter { a: usize },
    CcAffinityLogits { q: usize, k: usize },
    /// out[:,u] = sum_t att[t,u] * v[:, key_t(u)] over the criss-cross keys.
    CcMix { v: usize, att: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Option<Op>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    /// Registers a leaf tensor. Gradients accumulate into it during
    /// `backward` iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Leaf that never receives gradients (inputs, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Every leaf registered with requires_grad, in registration order.
    pub fn leaves_requiring_grad(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.is_none() && n.requires)
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad mirrors value shape")
        })
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Option<Op>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires
    }

    fn out(&mut self, op: &'static str, value: Tensor, requires: bool, rec: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        // Ops with no differentiable ancestor record no backward step.
        let op_rec = if requires { Some(rec) } else { None };
        Ok(self.push(value, requires, op_rec))
    }

    /// Like `out` for ops that cannot create non-finite values from finite
    /// inputs (bounded maps, permutations, selections): skips the scan.
    fn out_stable(&mut self, value: Tensor, requires: bool, rec: Op) -> Result<Var> {
        let op_rec = if requires { Some(rec) } else { None };
        Ok(self.push(value, requires, op_rec))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out("add", t, self.requires(a.0) || self.requires(b.0), Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out("sub", t, self.requires(a.0) || self.requires(b.0), Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip2(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out("mul", t, self.requires(a.0) || self.requires(b.0), Op::Mul { a: a.0, b: b.0 })
    }

    /// y = mul * x + add.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| mul * x + add).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out("affine", t, self.requires(a.0), Op::Affine { a: a.0, mul })
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Result<Var> {
        self.affine(a, mul, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out_stable(t, self.requires(a.0), Op::Tanh { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out_stable(t, self.requires(a.0), Op::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.out_stable(t, self.requires(a.0), Op::Abs { a: a.0 })
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.out("sum", Tensor::scalar(s)?, self.requires(a.0), Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.out("mean", Tensor::scalar(s / n)?, self.requires(a.0), Op::Mean { a: a.0 })
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        self.out("l2_norm", Tensor::scalar(s.sqrt())?, self.requires(a.0), Op::L2Norm { a: a.0 })
    }

    /// Per-row Euclidean norms of an n x c matrix.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_l2_norm",
                detail: format!("expected matrix, got {:?}", t.shape()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let data: Vec<f64> = (0..n)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(vec![n], data)?;
        self.out("row_l2_norm", out, self.requires(a.0), Op::RowL2Norm { a: a.0 })
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        self.out(
            "matmul",
            t,
            self.requires(a.0) || self.requires(b.0),
            Op::Matmul { a: a.0, b: b.0, m, k, n },
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                detail: format!("expected matrix, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let t = Tensor::new(vec![cols, rows], data)?;
        self.out_stable(t, self.requires(a.0), Op::Transpose2d { a: a.0, rows, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        self.out_stable(t, self.requires(a.0), Op::Reshape { a: a.0 })
    }

    /// Subtracts each row's mean from the row (m x c input).
    pub fn row_mean_center(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_mean_center",
                detail: format!("expected matrix, got {:?}", t.shape()),
            });
        }
        let (m, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(m * c);
        for i in 0..m {
            let row = &t.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            data.extend(row.iter().map(|x| x - mean));
        }
        let out = Tensor::new(vec![m, c], data)?;
        self.out_stable(out, self.requires(a.0), Op::RowMeanCenter { a: a.0 })
    }

    /// Gathers rows of an m x c matrix by (repeatable) index; `idx` is not
    /// differentiated.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row index {bad} out of range 0..{m}"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.out_stable(out, self.requires(a.0), Op::GatherRows { a: a.0, idx })
    }

    /// Gathers flat entries by index into a vector.
    pub fn gather_flat(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::ShapeMismatch {
                op: "gather_flat",
                detail: format!("index {bad} out of range 0..{}", t.numel()),
            });
        }
        let data: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        self.out_stable(out, self.requires(a.0), Op::GatherFlat { a: a.0, idx })
    }

    /// Row-wise cosine similarity between an n x c and an m x c matrix,
    /// giving n x m scores. Errors with `ZeroNormVector` when any row norm
    /// falls below 1e-12 (degenerate encoding or prototype).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (n, c, m) = (sa[0], sa[1], sb[0]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let na = row_norms(xa, n, c);
        let nb = row_norms(xb, m, c);
        for (i, &v) in na.iter().enumerate() {
            if v < 1e-12 {
                return Err(Error::ZeroNormVector { index: i, norm: v });
            }
        }
        for (j, &v) in nb.iter().enumerate() {
            if v < 1e-12 {
                return Err(Error::ZeroNormVector { index: j, norm: v });
            }
        }
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ra = &xa[i * c..(i + 1) * c];
            for j in 0..m {
                let rb = &xb[j * c..(j + 1) * c];
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                data[i * m + j] = dot / (na[i] * nb[j]);
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        self.out(
            "cosine_rows",
            t,
            self.requires(a.0) || self.requires(b.0),
            Op::CosineRows { a: a.0, b: b.0 },
        )
    }

    // -- shape/structure ops -------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_strides(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        if inner == 1 {
            for o in 0..outer {
                let row = &src[o * len..(o + 1) * len];
                let dst = &mut data[o * len..(o + 1) * len];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (d, s) in dst.iter_mut().zip(row) {
                    *d = (s - max).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
        } else {
            // Sweep whole slices so the inner dimension stays contiguous.
            for o in 0..outer {
                let base = o * len * inner;
                let mut max = src[base..base + inner].to_vec();
                for t in 1..len {
                    let slice = &src[base + t * inner..base + (t + 1) * inner];
                    for (m, s) in max.iter_mut().zip(slice) {
                        if *s > *m {
                            *m = *s;
                        }
                    }
                }
                let mut sum = vec![0.0; inner];
                for t in 0..len {
                    let s_slice = &src[base + t * inner..base + (t + 1) * inner];
                    let d_slice = &mut data[base + t * inner..base + (t + 1) * inner];
                    for ((d, s), m) in d_slice.iter_mut().zip(s_slice).zip(&max) {
                        *d = (s - m).exp();
                    }
                    for (acc, d) in sum.iter_mut().zip(d_slice.iter()) {
                        *acc += *d;
                    }
                }
                for t in 0..len {
                    let d_slice = &mut data[base + t * inner..base + (t + 1) * inner];
                    for (d, z) in d_slice.iter_mut().zip(&sum) {
                        *d /= *z;
                    }
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        self.out_stable(t, self.requires(a.0), Op::Softmax { a: a.0, axis })
    }

    /// 2-d convolution of a c_in x h x w input with a c_out x c_in x k x k
    /// kernel. `k` must be odd and the output size integral.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {si:?}, kernel {sk:?}"),
            });
        }
        if sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be square with odd size, got {:?}", &sk[2..]),
            });
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let h_num = h + 2 * pad;
        let w_num = w + 2 * pad;
        if h_num < k || w_num < k || !(h_num - k).is_multiple_of(stride) || !(w_num - k).is_multiple_of(stride) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "output size not integral: input {h}x{w}, k={k}, stride={stride}, pad={pad}"
                ),
            });
        }
        let oh = (h_num - k) / stride + 1;
        let ow = (w_num - k) / stride + 1;
        let cols = im2col(self.value(input).data(), c_in, h, w, k, stride, pad, oh, ow);
        let data = matmul_nn(self.value(kernel).data(), &cols, c_out, c_in * k * k, oh * ow);
        let t = Tensor::new(vec![c_out, oh, ow], data)?;
        let requires = self.requires(input.0) || self.requires(kernel.0);
        // The unfolded input is saved for the backward matmuls.
        let saved = if requires { cols } else { Vec::new() };
        self.out(
            "conv2d",
            t,
            requires,
            Op::Conv2d { input: input.0, kernel: kernel.0, stride, pad, cols: saved },
        )
    }

    /// Adds a per-channel bias to a c x h x w map.
    pub fn bias_add_chw(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 3 || sb != [sa[0]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_chw",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let (c, hw) = (sa[0], sa[1] * sa[2]);
        let bdat = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for ch in 0..c {
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v += bdat[ch];
            }
        }
        let t = Tensor::new(sa.to_vec(), data)?;
        self.out(
            "bias_add_chw",
            t,
            self.requires(a.0) || self.requires(bias.0),
            Op::BiasAddChw { a: a.0, bias: bias.0 },
        )
    }

    /// Adds a per-row bias to an r x c matrix.
    pub fn bias_add_rows(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 2 || sb != [sa[0]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_rows",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let bdat = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for v in &mut data[i * c..(i + 1) * c] {
                *v += bdat[i];
            }
        }
        let t = Tensor::new(sa.to_vec(), data)?;
        self.out(
            "bias_add_rows",
            t,
            self.requires(a.0) || self.requires(bias.0),
            Op::BiasAddRows { a: a.0, bias: bias.0 },
        )
    }

    /// Nearest-neighbor 2x upsampling of a c x h x w map.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest2",
                detail: format!("expected c x h x w, got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    data[ch * oh * ow + i * ow + j] = src[ch * h * w + (i / 2) * w + (j / 2)];
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], data)?;
        self.out_stable(t, self.requires(a.0), Op::UpsampleNearest2 { a: a.0 })
    }

    /// 2x2 average pooling of a c x h x w map; h and w must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("expected even c x h x w, got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    data[ch * oh * ow + i * ow + j] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], data)?;
        self.out_stable(t, self.requires(a.0), Op::AvgPool2 { a: a.0 })
    }

    /// Concatenates two c x h x w maps along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_c",
                detail: format!("{sa:?} ++ {sb:?}"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        self.out_stable(t, self.requires(a.0) || self.requires(b.0), Op::ConcatC { a: a.0, b: b.0 })
    }

    // -- criss-cross attention primitives -------------------------------------

    /// Raw criss-cross affinity logits: for each position u = (i, j) of the
    /// c' x h x w query map, the dot products of Q_u with the h+w-1 keys in
    /// column j (all rows) then row i (all columns except j). Returns the
    /// (h+w-1) x h x w logits and the number of query-key dot products
    /// actually performed.
    pub fn cc_affinity_logits(&mut self, q: Var, k: Var) -> Result<(Var, u64)> {
        self.same_shape("cc_affinity_logits", q, k)?;
        let s = self.value(q).shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "cc_affinity_logits",
                detail: format!("expected c x h x w, got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let keys = h + w - 1;
        let hw = h * w;
        let mut data = vec![0.0; keys * hw];
        let mut dots: u64 = 0;
        // Column planes: plane t holds the logits against key (t, j).
        for t in 0..h {
            let plane = &mut data[t * hw..(t + 1) * hw];
            for ch in 0..c {
                let q_plane = &qd[ch * hw..(ch + 1) * hw];
                let k_row = &kd[ch * hw + t * w..ch * hw + (t + 1) * w];
                for i in 0..h {
                    let qrow = &q_plane[i * w..(i + 1) * w];
                    let prow = &mut plane[i * w..(i + 1) * w];
                    for j in 0..w {
                        prow[j] += qrow[j] * k_row[j];
                    }
                }
            }
            dots += hw as u64;
        }
        // Row planes: plane h+p holds logits against key (i, c) with
        // c = p for j > p and c = p+1 for j <= p (column j skipped).
        for p in 0..w.saturating_sub(1) {
            let plane = &mut data[(h + p) * hw..(h + p + 1) * hw];
            for ch in 0..c {
                let q_plane = &qd[ch * hw..(ch + 1) * hw];
                let k_plane = &kd[ch * hw..(ch + 1) * hw];
                for i in 0..h {
                    let qrow = &q_plane[i * w..(i + 1) * w];
                    let krow = &k_plane[i * w..(i + 1) * w];
                    let prow = &mut plane[i * w..(i + 1) * w];
                    let k_hi = krow[p + 1];
                    for j in 0..=p {
                        prow[j] += qrow[j] * k_hi;
                    }
                    let k_lo = krow[p];
                    for (pj, qj) in prow[p + 1..w].iter_mut().zip(&qrow[p + 1..w]) {
                        *pj += qj * k_lo;
                    }
                }
            }
            dots += hw as u64;
        }
        let t = Tensor::new(vec![keys, h, w], data)?;
        let v = self.out(
            "cc_affinity_logits",
            t,
            self.requires(q.0) || self.requires(k.0),
            Op::CcAffinityLogits { q: q.0, k: k.0 },
        )?;
        Ok((v, dots))
    }

    /// Mixes values along the criss-cross paths: out[:, u] =
    /// sum_t att[t, u] * V[:, key_t(u)].
    pub fn cc_mix(&mut self, v: Var, att: Var) -> Result<Var> {
        let (sv, sa) = (self.value(v).shape(), self.value(att).shape());
        if sv.len() != 3 || sa.len() != 3 || sa[1] != sv[1] || sa[2] != sv[2] {
            return Err(Error::ShapeMismatch {
                op: "cc_mix",
                detail: format!("v {sv:?}, att {sa:?}"),
            });
        }
        let (c, h, w) = (sv[0], sv[1], sv[2]);
        if sa[0] != h + w - 1 {
            return Err(Error::ShapeMismatch {
                op: "cc_mix",
                detail: format!("affinity first axis {} != h+w-1 = {}", sa[0], h + w - 1),
            });
        }
        let (vd, ad) = (self.value(v).data(), self.value(att).data());
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            let v_plane = &vd[ch * hw..(ch + 1) * hw];
            let out_plane = &mut data[ch * hw..(ch + 1) * hw];
            for t in 0..h {
                let a_plane = &ad[t * hw..(t + 1) * hw];
                let vrow = &v_plane[t * w..(t + 1) * w];
                for i in 0..h {
                    let arow = &a_plane[i * w..(i + 1) * w];
                    let orow = &mut out_plane[i * w..(i + 1) * w];
                    for j in 0..w {
                        orow[j] += arow[j] * vrow[j];
                    }
                }
            }
            for p in 0..w.saturating_sub(1) {
                let a_plane = &ad[(h + p) * hw..(h + p + 1) * hw];
                for i in 0..h {
                    let arow = &a_plane[i * w..(i + 1) * w];
                    let orow = &mut out_plane[i * w..(i + 1) * w];
                    let v_hi = v_plane[i * w + p + 1];
                    for j in 0..=p {
                        orow[j] += arow[j] * v_hi;
                    }
                    let v_lo = v_plane[i * w + p];
                    for (oj, aj) in orow[p + 1..w].iter_mut().zip(&arow[p + 1..w]) {
                        *oj += aj * v_lo;
                    }
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], data)?;
        self.out(
            "cc_mix",
            t,
            self.requires(v.0) || self.requires(att.0),
            Op::CcMix { v: v.0, att: att.0 },
        )
    }

    // -- backward -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates the grad of every
    /// `requires_grad` leaf exactly once, accumulating across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || self.nodes[id].op.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            let op = self.nodes[id].op.take().unwrap();
            self.backstep(id, &op, &g);
            // Restore so interior grads stay inspectable by tests.
            self.nodes[id].op = Some(op);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: &[f64]) {
        if !self.nodes[id].requires {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[id].grad = Some(contrib.to_vec()),
        }
    }

    fn backstep(&mut self, out_id: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires {
                    let da = zip_slices(g, self.nodes[b].value.data(), |x, y| x * y);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].requires {
                    let db = zip_slices(g, self.nodes[a].value.data(), |x, y| x * y);
                    self.accumulate(b, &db);
                }
            }
            Op::Affine { a, mul } => {
                let da: Vec<f64> = g.iter().map(|x| mul * x).collect();
                self.accumulate(a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a].value.numel()];
                self.accumulate(a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a].value.numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a].requires {
                    let da = matmul_nt(g, self.nodes[b].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].requires {
                    let db = matmul_tn(self.nodes[a].value.data(), g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose2d { a, rows, cols } => {
                // g has shape cols x rows; transpose it back.
                let mut da = vec![0.0; rows * cols];
                for i in 0..cols {
                    for j in 0..rows {
                        da[j * cols + i] = g[i * rows + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => self.accumulate(a, g),
            Op::Tanh { a } => {

                let y = self.nodes[out_id].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                self.accumulate(a, &da);
            }
            Op::Relu { a } => {
                let x = self.nodes[a].value.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Abs { a } => {
                let x = self.nodes[a].value.data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi * xi.signum_or_zero()).collect();
                self.accumulate(a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[out_id].value.shape().to_vec();
                let y = self.nodes[out_id].value.data();
                let (outer, len, inner) = axis_strides(&shape, axis);
                let mut da = vec![0.0; y.len()];
                if inner == 1 {
                    for o in 0..outer {
                        let yrow = &y[o * len..(o + 1) * len];
                        let grow = &g[o * len..(o + 1) * len];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in
                            da[o * len..(o + 1) * len].iter_mut().zip(yrow).zip(grow)
                        {
                            *d = yi * (gi - dot);
                        }
                    }
                } else {
                    for o in 0..outer {
                        let base = o * len * inner;
                        let mut dot = vec![0.0; inner];
                        for t in 0..len {
                            let ys = &y[base + t * inner..base + (t + 1) * inner];
                            let gs = &g[base + t * inner..base + (t + 1) * inner];
                            for ((acc, yi), gi) in dot.iter_mut().zip(ys).zip(gs) {
                                *acc += yi * gi;
                            }
                        }
                        for t in 0..len {
                            let ys = &y[base + t * inner..base + (t + 1) * inner];
                            let gs = &g[base + t * inner..base + (t + 1) * inner];
                            let ds = &mut da[base + t * inner..base + (t + 1) * inner];
                            for (((d, yi), gi), dt) in
                                ds.iter_mut().zip(ys).zip(gs).zip(&dot)
                            {
                                *d = yi * (gi - dt);
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Conv2d { input, kernel, stride, pad, ref cols } => {
                let si = self.nodes[input].value.shape().to_vec();
                let sk = self.nodes[kernel].value.shape().to_vec();
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, k) = (sk[0], sk[2]);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                if self.nodes[kernel].requires {
                    // d_kernel = g (c_out x oh*ow) * cols^T
                    let dk = matmul_nt(g, cols, c_out, oh * ow, c_in * k * k);
                    self.accumulate(kernel, &dk);
                }
                if self.nodes[input].requires {
                    let dcols =
                        matmul_tn(self.nodes[kernel].value.data(), g, c_in * k * k, c_out, oh * ow);
                    let dinput = col2im(&dcols, c_in, h, w, k, stride, pad, oh, ow);
                    self.accumulate(input, &dinput);
                }
            }
            Op::BiasAddChw { a, bias } => {
                self.accumulate(a, g);
                if self.nodes[bias].requires {
                    let c = self.nodes[bias].value.numel();
                    let hw = g.len() / c;
                    let db: Vec<f64> =
                        (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    self.accumulate(bias, &db);
                }
            }
            Op::BiasAddRows { a, bias } => {
                self.accumulate(a, g);
                if self.nodes[bias].requires {
                    let r = self.nodes[bias].value.numel();
                    let c = g.len() / r;
                    let db: Vec<f64> =
                        (0..r).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect();
                    self.accumulate(bias, &db);
                }
            }
            Op::UpsampleNearest2 { a } => {
                let s = self.nodes[a].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            da[ch * h * w + (i / 2) * w + (j / 2)] +=
                                g[ch * oh * ow + i * ow + j];
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::AvgPool2 { a } => {
                let s = self.nodes[a].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = 0.25 * g[ch * oh * ow + i * ow + j];
                            let base = ch * h * w + 2 * i * w + 2 * j;
                            da[base] += gv;
                            da[base + 1] += gv;
                            da[base + w] += gv;
                            da[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatC { a, b } => {
                let na = self.nodes[a].value.numel();
                self.accumulate(a, &g[..na]);
                self.accumulate(b, &g[na..]);
            }
            Op::GatherRows { a, ref idx } => {
                let (m, c) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let mut da = vec![0.0; m * c];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[r * c + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::GatherFlat { a, ref idx } => {
                let mut da = vec![0.0; self.nodes[a].value.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    da[i] += g[r];
                }
                self.accumulate(a, &da);
            }
            Op::RowL2Norm { a } => {

                let y = self.nodes[out_id].value.data().to_vec();
                let x = self.nodes[a].value.data();
                let (n, c) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let mut da = vec![0.0; n * c];
                for i in 0..n {
                    let denom = y[i].max(1e-12);
                    for j in 0..c {
                        da[i * c + j] = g[i] * x[i * c + j] / denom;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::L2Norm { a } => {

                let y = self.nodes[out_id].value.item();
                let denom = y.max(1e-12);
                let da: Vec<f64> =
                    self.nodes[a].value.data().iter().map(|x| g[0] * x / denom).collect();
                self.accumulate(a, &da);
            }
            Op::CosineRows { a, b } => {

                let s = self.nodes[out_id].value.data().to_vec();
                let xa = self.nodes[a].value.data();
                let xb = self.nodes[b].value.data();
                let (n, c) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let m = self.nodes[b].value.shape()[0];
                let na = row_norms(xa, n, c);
                let nb = row_norms(xb, m, c);
                let need_a = self.nodes[a].requires;
                let need_b = self.nodes[b].requires;
                let mut da = vec![0.0; n * c];
                let mut db = vec![0.0; m * c];
                for i in 0..n {
                    let ra = &xa[i * c..(i + 1) * c];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let rb = &xb[j * c..(j + 1) * c];
                        let sij = s[i * m + j];
                        let inv = 1.0 / (na[i] * nb[j]);
                        if need_a {
                            let scale_a = sij / (na[i] * na[i]);
                            for t in 0..c {
                                da[i * c + t] += gij * (rb[t] * inv - scale_a * ra[t]);
                            }
                        }
                        if need_b {
                            let scale_b = sij / (nb[j] * nb[j]);
                            for t in 0..c {
                                db[j * c + t] += gij * (ra[t] * inv - scale_b * rb[t]);
                            }
                        }
                    }
                }
                if need_a {
                    self.accumulate(a, &da);
                }
                if need_b {
                    self.accumulate(b, &db);
                }
            }
            Op::RowMeanCenter { a } => {
                let (m, c) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let mut da = vec![0.0; m * c];
                for i in 0..m {
                    let row = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i * c + j] = row[j] - mean;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::CcAffinityLogits { q, k } => {
                let s = self.nodes[q].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let hw = h * w;
                let qd = self.nodes[q].value.data().to_vec();
                let kd = self.nodes[k].value.data().to_vec();
                let need_q = self.nodes[q].requires;
                let need_k = self.nodes[k].requires;
                let mut dq = vec![0.0; c * hw];
                let mut dk = vec![0.0; c * hw];
                for ch in 0..c {
                    let q_plane = &qd[ch * hw..(ch + 1) * hw];
                    let k_plane = &kd[ch * hw..(ch + 1) * hw];
                    let dq_plane = &mut dq[ch * hw..(ch + 1) * hw];
                    let dk_plane = &mut dk[ch * hw..(ch + 1) * hw];
                    for t in 0..h {
                        let g_plane = &g[t * hw..(t + 1) * hw];
                        let k_row = &k_plane[t * w..(t + 1) * w];
                        for i in 0..h {
                            let grow = &g_plane[i * w..(i + 1) * w];
                            let qrow = &q_plane[i * w..(i + 1) * w];
                            if need_q {
                                let dqrow = &mut dq_plane[i * w..(i + 1) * w];
                                for j in 0..w {
                                    dqrow[j] += grow[j] * k_row[j];
                                }
                            }
                            if need_k {
                                let dkrow = &mut dk_plane[t * w..(t + 1) * w];
                                for j in 0..w {
                                    dkrow[j] += grow[j] * qrow[j];
                                }
                            }
                        }
                    }
                    for p in 0..w.saturating_sub(1) {
                        let g_plane = &g[(h + p) * hw..(h + p + 1) * hw];
                        for i in 0..h {
                            let grow = &g_plane[i * w..(i + 1) * w];
                            let qrow = &q_plane[i * w..(i + 1) * w];
                            let krow = &k_plane[i * w..(i + 1) * w];
                            if need_q {
                                let dqrow = &mut dq_plane[i * w..(i + 1) * w];
                                let k_hi = krow[p + 1];
                                for j in 0..=p {
                                    dqrow[j] += grow[j] * k_hi;
                                }
                                let k_lo = krow[p];
                                for (dj, (gj, _)) in dqrow[p + 1..w]
                                    .iter_mut()
                                    .zip(grow[p + 1..w].iter().zip(p + 1..w))
                                {
                                    *dj += gj * k_lo;
                                }
                            }
                            if need_k {
                                let mut acc_hi = 0.0;
                                for j in 0..=p {
                                    acc_hi += grow[j] * qrow[j];
                                }
                                let mut acc_lo = 0.0;
                                for j in p + 1..w {
                                    acc_lo += grow[j] * qrow[j];
                                }
                                dk_plane[i * w + p + 1] += acc_hi;
                                dk_plane[i * w + p] += acc_lo;
                            }
                        }
                    }
                }
                if need_q {
                    self.accumulate(q, &dq);
                }
                if need_k {
                    self.accumulate(k, &dk);
                }
            }
            Op::CcMix { v, att } => {
                let s = self.nodes[v].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let hw = h * w;
                let vd = self.nodes[v].value.data().to_vec();
                let ad = self.nodes[att].value.data().to_vec();
                let need_v = self.nodes[v].requires;
                let need_a = self.nodes[att].requires;
                let mut dv = vec![0.0; c * hw];
                let mut datt = vec![0.0; (h + w - 1) * hw];
                for ch in 0..c {
                    let v_plane = &vd[ch * hw..(ch + 1) * hw];
                    let g_plane = &g[ch * hw..(ch + 1) * hw];
                    let dv_plane = &mut dv[ch * hw..(ch + 1) * hw];
                    for t in 0..h {
                        let a_plane = &ad[t * hw..(t + 1) * hw];
                        let da_plane = &mut datt[t * hw..(t + 1) * hw];
                        let vrow = &v_plane[t * w..(t + 1) * w];
                        for i in 0..h {
                            let arow = &a_plane[i * w..(i + 1) * w];
                            let grow = &g_plane[i * w..(i + 1) * w];
                            if need_v {
                                let dvrow = &mut dv_plane[t * w..(t + 1) * w];
                                for j in 0..w {
                                    dvrow[j] += arow[j] * grow[j];
                                }
                            }
                            if need_a {
                                let darow = &mut da_plane[i * w..(i + 1) * w];
                                for j in 0..w {
                                    darow[j] += grow[j] * vrow[j];
                                }
                            }
                        }
                    }
                    for p in 0..w.saturating_sub(1) {
                        let a_plane = &ad[(h + p) * hw..(h + p + 1) * hw];
                        let da_plane = &mut datt[(h + p) * hw..(h + p + 1) * hw];
                        for i in 0..h {
                            let arow = &a_plane[i * w..(i + 1) * w];
                            let grow = &g_plane[i * w..(i + 1) * w];
                            if need_v {
                                let mut acc_hi = 0.0;
                                for j in 0..=p {
                                    acc_hi += arow[j] * grow[j];
                                }
                                let mut acc_lo = 0.0;
                                for j in p + 1..w {
                                    acc_lo += arow[j] * grow[j];
                                }
                                dv_plane[i * w + p + 1] += acc_hi;
                                dv_plane[i * w + p] += acc_lo;
                            }
                            if need_a {
                                let darow = &mut da_plane[i * w..(i + 1) * w];
                                let v_hi = v_plane[i * w + p + 1];
                                for j in 0..=p {
                                    darow[j] += grow[j] * v_hi;
                                }
                                let v_lo = v_plane[i * w + p];
                                for (dj, gj) in
                                    darow[p + 1..w].iter_mut().zip(&grow[p + 1..w])
                                {
                                    *dj += gj * v_lo;
                                }
                            }
                        }
                    }
                }
                if need_v {
                    self.accumulate(v, &dv);
                }
                if need_a {
                    self.accumulate(att, &datt);
                }
            }

        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

fn zip_slices(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn row_norms(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    (0..n)
        .map(|i| x[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Enumerates the criss-cross key positions for query (i, j): the full
/// column j first (h entries, the query itself at t = i), then row i
/// skipping column j (w-1 entries). h + w - 1 keys total, self counted once.
/// The plane-sweep kernels implement exactly this layout; tests use this
/// enumeration as the reference.
pub(crate) fn cc_keys(
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, (usize, usize))> {
    let col = (0..h).map(move |r| (r, j));
    let row = (0..w).filter(move |&c| c != j).map(move |c| (i, c));
    col.chain(row).enumerate()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * k * oh * ow];
    let mut row = 0;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = plane[iy * w + ix as usize];
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dinput = vec![0.0; c_in * h * w];
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut dinput[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &dcols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
    dinput
}
