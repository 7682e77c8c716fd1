use super::kernels::{add_assign, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{shape_err, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifiers as they appear in tape records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Concat,
    IndexSelect,
    IndexAdd,
    Softmax,
    Sigmoid,
    Relu,
    Elu,
    LayerNorm,
    Conv1d,
    MaxPool1d,
    Transpose,
    Reshape,
    Sum,
    Mean,
    SumRows,
    SumCols,
    MaxRows,
    Exp,
    Log,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self> {
        let (n, m) = (a.rows(), a.cols());
        let (bn, bm) = (b.rows(), b.cols());
        if a.numel() == b.numel() && (bn, bm) == (n, m) {
            Ok(Bcast::Full)
        } else if bn == 1 && bm == m {
            Ok(Bcast::Row)
        } else if bn == n && bm == 1 {
            Ok(Bcast::Col)
        } else if b.numel() == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(shape_err(
                op,
                format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
            ))
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Bcast::Full => r * cols + c,
            Bcast::Row => c,
            Bcast::Col => r,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { x: Var, idx: Vec<usize> },
    IndexAdd { base: Var, idx: Vec<usize>, src: Var },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, cols: Vec<f64> },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Exp(Var),
    Log { x: Var, floor: f64 },
    SmoothL1(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::ScalarMul(..) => Primitive::ScalarMul,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Concat { .. } => Primitive::Concat,
            Op::IndexSelect { .. } => Primitive::IndexSelect,
            Op::IndexAdd { .. } => Primitive::IndexAdd,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Relu(..) => Primitive::Relu,
            Op::Elu(..) => Primitive::Elu,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Conv1d { .. } => Primitive::Conv1d,
            Op::MaxPool1d { .. } => Primitive::MaxPool1d,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::SumRows(..) => Primitive::SumRows,
            Op::SumCols(..) => Primitive::SumCols,
            Op::MaxRows { .. } => Primitive::MaxRows,
            Op::Exp(..) => Primitive::Exp,
            Op::Log { .. } => Primitive::Log,
            Op::SmoothL1(..) => Primitive::SmoothL1,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::IndexAdd { base, src, .. } => vec![*base, *src],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::ScalarMul(x, _)
            | Op::AddScalar(x)
            | Op::IndexSelect { x, .. }
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Elu(x)
            | Op::MaxPool1d { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumRows(x)
            | Op::SumCols(x)
            | Op::MaxRows { x, .. }
            | Op::Exp(x)
            | Op::Log { x, .. }
            | Op::SmoothL1(x) => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Node `i` is produced by
/// record `i`, and every input of record `i` has a smaller index.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The record that produced `v`: primitive kind and input handles.
    pub fn record(&self, v: Var) -> (Primitive, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.primitive(), op.inputs())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}: inner dims {} != {}", self.shape(a), self.shape(b), k, k2),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = Bcast::resolve(op, ta, tb)?;
        let (n, m) = (ta.rows(), ta.cols());
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for c in 0..m {
                out.push(f(ad[r * m + c], bd[mode.index(r, c, m)]));
            }
        }
        Ok((Tensor::new(ta.shape().to_vec(), out)?, mode))
    }

    /// `a + b`, with `b` broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, mode)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, mode)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::ScalarMul(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    }

    /// Concatenates rank-2 values along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect();
        let t = match axis {
            0 => {
                let m = dims[0].1;
                if let Some(bad) = dims.iter().find(|d| d.1 != m) {
                    return Err(shape_err("concat", format!("column count {} != {}", bad.1, m)));
                }
                let n: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(n * m);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![n, m], data)?
            }
            1 => {
                let n = dims[0].0;
                if let Some(bad) = dims.iter().find(|d| d.0 != n) {
                    return Err(shape_err("concat", format!("row count {} != {}", bad.0, n)));
                }
                let m: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(n * m);
                for r in 0..n {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![n, m], data)?
            }
            _ => return Err(shape_err("concat", format!("axis {axis} not supported"))),
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Gathers rows of `x` (rows may repeat).
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index {
                    op: "index_select",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), m], data)?;
        Ok(self.push(
            t,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out = base; out[idx[p]] += src[p]` for each row `p` of `src`.
    pub fn index_add(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (n, m) = self.dims(base);
        let (sn, sm) = self.dims(src);
        if sm != m || sn != idx.len() {
            return Err(shape_err(
                "index_add",
                format!(
                    "base {:?}, src {:?}, {} indices",
                    self.shape(base),
                    self.shape(src),
                    idx.len()
                ),
            ));
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src);
        for (p, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Index {
                    op: "index_add",
                    index: i,
                    len: n,
                });
            }
            add_assign(&mut out[i * m..(i + 1) * m], s.row(p));
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            t,
            Op::IndexAdd {
                base,
                idx: idx.to_vec(),
                src,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(t, Op::Elu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    /// `log(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let t = self.map(x, |v| v.max(floor).ln());
        self.push(t, Op::Log { x, floor })
    }

    /// Per-row layer normalization followed by the affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.dims(p) != (1, m) {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} {:?} for {} features", self.shape(p), m),
                ));
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// 1-D convolution over rows with same padding.
    ///
    /// `x` is `[L, c_in]`, `w` is `[kernel * c_in, c_out]` with row index
    /// `tap * c_in + channel`, and `b` is `[1, c_out]`. `kernel` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (l, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if kernel.is_multiple_of(2) || wr != kernel * cin || self.dims(b) != (1, cout) {
            return Err(shape_err(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}, kernel {}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b),
                    kernel
                ),
            ));
        }
        let cols = im2col(self.value(x).data(), l, cin, kernel);
        let mut out = vec![0.0; l * cout];
        let bd = self.value(b).data();
        for r in 0..l {
            out[r * cout..(r + 1) * cout].copy_from_slice(bd);
        }
        matmul_acc(&cols, self.value(w).data(), &mut out, l, kernel * cin, cout);
        let t = Tensor::new(vec![l, cout], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            },
        ))
    }

    /// Max-pool over rows with window 2 and stride 2; an odd trailing row
    /// forms its own window.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (l, m) = self.dims(x);
        if l == 0 {
            return Err(shape_err("max_pool1d", "empty input"));
        }
        let out_l = l.div_ceil(2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; out_l * m];
        let mut argmax = vec![0; out_l * m];
        for r in 0..out_l {
            for c in 0..m {
                let i0 = 2 * r * m + c;
                let mut best = i0;
                if 2 * r + 1 < l {
                    let i1 = i0 + m;
                    if xd[i1] > xd[i0] {
                        best = i1;
                    }
                }
                out[r * m + c] = xd[best];
                argmax[r * m + c] = best;
            }
        }
        let t = Tensor::new(vec![out_l, m], out)?;
        Ok(self.push(t, Op::MaxPool1d { x, argmax }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[c * n + r] = xd[r * m + c];
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("transpose shape");
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column sums, `[n, m] -> [1, m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let xd = self.value(x).data();
        let mut out = vec![0.0; m];
        for r in 0..n {
            add_assign(&mut out, &xd[r * m..(r + 1) * m]);
        }
        let t = Tensor::new(vec![1, m], out).expect("sum_rows shape");
        self.push(t, Op::SumRows(x))
    }

    /// Row sums, `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let xd = self.value(x).data();
        let out = (0..n).map(|r| xd[r * m..(r + 1) * m].iter().sum()).collect();
        let t = Tensor::new(vec![n, 1], out).expect("sum_cols shape");
        self.push(t, Op::SumCols(x))
    }

    /// Column maxima, `[n, m] -> [1, m]`; ties resolve to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if n == 0 {
            return Err(shape_err("max_rows", "empty input"));
        }
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0; m];
        for r in 0..n {
            for c in 0..m {
                if xd[r * m + c] > out[c] {
                    out[c] = xd[r * m + c];
                    argmax[c] = r * m + c;
                }
            }
        }
        let t = Tensor::new(vec![1, m], out)?;
        Ok(self.push(t, Op::MaxRows { x, argmax }))
    }

    /// Smooth-L1 of each row's Euclidean norm, `[n, m] -> [n, 1]`:
    /// `0.5 |e|^2` below 1, `|e| - 0.5` otherwise.
    pub fn smooth_l1_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let xd = self.value(x).data();
        let out = (0..n)
            .map(|r| smooth_l1(norm(&xd[r * m..(r + 1) * m])))
            .collect();
        let t = Tensor::new(vec![n, 1], out).expect("smooth_l1 shape");
        self.push(t, Op::SmoothL1(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &mut |da| matmul_nt_acc(g, bd, da, n, m, k));
                acc(*b, &mut |db| matmul_tn_acc(ad, g, db, n, k, m));
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| add_assign(da, g));
                let (n, m) = (out.rows(), out.cols());
                acc(*b, &mut |db| {
                    for r in 0..n {
                        for c in 0..m {
                            db[mode.index(r, c, m)] += sign * g[r * m + c];
                        }
                    }
                });
            }
            Op::Mul(a, b, mode) => {
                let (n, m) = (out.rows(), out.cols());
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &mut |da| {
                    for r in 0..n {
                        for c in 0..m {
                            da[r * m + c] += g[r * m + c] * bd[mode.index(r, c, m)];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..n {
                        for c in 0..m {
                            db[mode.index(r, c, m)] += g[r * m + c] * ad[r * m + c];
                        }
                    }
                });
            }
            Op::ScalarMul(x, s) => acc(*x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |dx| add_assign(dx, g)),
            Op::Concat { parts, axis } => {
                let (n, m) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let (pn, pm) = self.dims(p);
                    match axis {
                        0 => acc(p, &mut |dp| add_assign(dp, &g[offset * m..(offset + pn) * m])),
                        _ => acc(p, &mut |dp| {
                            for r in 0..n {
                                add_assign(
                                    &mut dp[r * pm..(r + 1) * pm],
                                    &g[r * m + offset..r * m + offset + pm],
                                );
                            }
                        }),
                    }
                    offset += if *axis == 0 { pn } else { pm };
                }
            }
            Op::IndexSelect { x, idx } => {
                let m = out.cols();
                acc(*x, &mut |dx| {
                    for (p, &i) in idx.iter().enumerate() {
                        add_assign(&mut dx[i * m..(i + 1) * m], &g[p * m..(p + 1) * m]);
                    }
                });
            }
            Op::IndexAdd { base, idx, src } => {
                let m = out.cols();
                acc(*base, &mut |db| add_assign(db, g));
                acc(*src, &mut |ds| {
                    for (p, &i) in idx.iter().enumerate() {
                        add_assign(&mut ds[p * m..(p + 1) * m], &g[i * m..(i + 1) * m]);
                    }
                });
            }
            Op::Softmax(x) => {
                let (n, m) = (out.rows(), out.cols());
                let y = out.data();
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            dx[r * m + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((d, &yv), gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &xv), gv) in dx.iter_mut().zip(xd).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let xd = self.value(*x).data();
                let y = out.data();
                acc(*x, &mut |dx| {
                    for (((d, &xv), &yv), gv) in dx.iter_mut().zip(xd).zip(y).zip(g) {
                        *d += if xv > 0.0 { *gv } else { gv * (yv + 1.0) };
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((d, &yv), gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Log { x, floor } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &xv), gv) in dx.iter_mut().zip(xd).zip(g) {
                        if xv > *floor {
                            *d += gv / xv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, m) = (out.rows(), out.cols());
                let gd = self.value(*gain).data();
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        let xh = &xhat[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..m {
                            let d = gr[c] * gd[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for c in 0..m {
                            let d = gr[c] * gd[c];
                            dx[r * m + c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for r in 0..n {
                        for c in 0..m {
                            dg[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..n {
                        add_assign(db, &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let (l, cin) = self.dims(*x);
                let cout = out.cols();
                let kc = kernel * cin;
                acc(*w, &mut |dw| matmul_tn_acc(cols, g, dw, l, kc, cout));
                acc(*b, &mut |db| {
                    for r in 0..l {
                        add_assign(db, &g[r * cout..(r + 1) * cout]);
                    }
                });
                let wd = self.value(*w).data();
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; l * kc];
                    matmul_nt_acc(g, wd, &mut dcols, l, cout, kc);
                    col2im_acc(&dcols, dx, l, cin, *kernel);
                });
            }
            Op::MaxPool1d { x, argmax } | Op::MaxRows { x, argmax } => acc(*x, &mut |dx| {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }),
            Op::Transpose(x) => {
                let (n, m) = self.dims(*x);
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        for c in 0..m {
                            dx[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumRows(x) => {
                let (n, m) = self.dims(*x);
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        add_assign(&mut dx[r * m..(r + 1) * m], g);
                    }
                });
            }
            Op::SumCols(x) => {
                let (n, m) = self.dims(*x);
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        dx[r * m..(r + 1) * m].iter_mut().for_each(|d| *d += g[r]);
                    }
                });
            }
            Op::SmoothL1(x) => {
                let (n, m) = self.dims(*x);
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        let e = &xd[r * m..(r + 1) * m];
                        let nrm = norm(e);
                        for c in 0..m {
                            let de = if nrm < 1.0 {
                                e[c]
                            } else {
                                e[c] / nrm
                            };
                            dx[r * m + c] += g[r] * de;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(norm: f64) -> f64 {
    if norm < 1.0 {
        0.5 * norm * norm
    } else {
        norm - 0.5
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn im2col(x: &[f64], l: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut cols = vec![0.0; l * kc];
    for t in 0..l {
        for tap in 0..kernel {
            let src = t + tap;
            if src < pad || src - pad >= l {
                continue;
            }
            let s = src - pad;
            cols[t * kc + tap * cin..t * kc + (tap + 1) * cin]
                .copy_from_slice(&x[s * cin..(s + 1) * cin]);
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], dx: &mut [f64], l: usize, cin: usize, kernel: usize) {
    let pad = kernel / 2;
    let kc = kernel * cin;
    for t in 0..l {
        for tap in 0..kernel {
            let src = t + tap;
            if src < pad || src - pad >= l {
                continue;
            }
            let s = src - pad;
            add_assign(
                &mut dx[s * cin..(s + 1) * cin],
                &dcols[t * kc + tap * cin..t * kc + (tap + 1) * cin],
            );
        }
    }
}
