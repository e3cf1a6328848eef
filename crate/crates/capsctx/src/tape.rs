//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every forward primitive records (inputs, op, output value) on the tape;
//! `backward` walks the tape in reverse accumulating adjoints. Tensors are
//! immutable once recorded. Any non-finite output is surfaced as an error at
//! the op that produced it, never propagated silently.

use crate::error::{CapsError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

const SQUASH_DELTA: f64 = 1e-9;
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// a*x + b elementwise, constants.
    Affine { a: f64 },
    /// Elementwise product with a fixed tensor (label masks, diagonal masks).
    MulConst(Tensor),
    /// [m,p] x [p,n] -> [m,n]
    Matmul,
    /// M [J,J] applied over the middle axis of H [K,J,I].
    MatmulMid,
    /// M [I,J,J], a separate map per last-axis element of H [K,J,I].
    MatmulMidPerI,
    /// input [H,W,Cin], kernel [kh,kw,Cin,Cout]; zero padding, cross-correlation.
    Conv2d { stride: usize, pad: usize },
    /// One shared 2-D kernel [f,f] applied to every channel of [N,N,D].
    DepthwiseShared { pad: usize },
    /// [H,W,C] + bias [C].
    ChannelBias,
    Relu,
    Exp,
    Sqrt,
    SoftmaxAxis { axis: usize },
    /// Mean over the last axis.
    MeanLast,
    /// Population standard deviation over the last axis.
    StdLast,
    /// max(x, c) elementwise; subgradient picks x when x >= c.
    MaxScalar { c: f64 },
    SumAll,
    /// Euclidean norm over the last axis.
    NormLast,
    /// Per-vector squash over the last axis.
    SquashLast,
    SliceAxis { axis: usize, start: usize, len: usize },
    Reshape,
    /// [K] -> [K,J], every column a copy.
    RepeatCols { j: usize },
    /// couplings [K,J] with predictions [K,J,I] -> [J,I].
    WeightedSumCaps,
    /// predictions [K,J,I] with capsules [J,I] -> dot products [K,J].
    Agreement,
    /// rows of X [J,I] scaled by s [J].
    ScaleRows,
    /// x / sqrt(1+x^2)
    Rho1,
    /// 1 / sqrt(1+x^2)
    Rho2,
    /// poses [K,Ip] with weights [K,J,Ip,Id] -> predictions [K,J,Id].
    PredictTransform,
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Id>,
}

/// Linear record of primitive ops; replaying it reproduces forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Id> {
        if !t.all_finite() {
            return Err(CapsError::NonFinite("leaf".into()));
        }
        Ok(self.push(t, Op::Leaf, vec![]))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Id>) -> Id {
        self.nodes.push(Node { value, op, inputs });
        Id(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: Vec<Id>, name: &str) -> Result<Id> {
        if !value.all_finite() {
            return Err(CapsError::NonFinite(format!("op {name}")));
        }
        Ok(self.push(value, op, inputs))
    }

    fn binary_same_shape(&mut self, a: Id, b: Id, op: Op, name: &str) -> Result<Id> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CapsError::Shape(format!(
                "{name}: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = match name {
            "add" => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            "sub" => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            "mul" => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            "div" => ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect(),
            _ => unreachable!(),
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(t, op, vec![a, b], name)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary_same_shape(a, b, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary_same_shape(a, b, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary_same_shape(a, b, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary_same_shape(a, b, Op::Div, "div")
    }

    pub fn affine(&mut self, x: Id, a: f64, b: f64) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| a * v + b).collect(),
        )?;
        self.record(t, Op::Affine { a }, vec![x], "affine")
    }

    pub fn mul_const(&mut self, x: Id, c: &Tensor) -> Result<Id> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(CapsError::Shape(format!(
                "mul_const: shapes {:?} vs {:?}",
                tx.shape(),
                c.shape()
            )));
        }
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        )?;
        self.record(t, Op::MulConst(c.clone()), vec![x], "mul_const")
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CapsError::Shape(format!("matmul: shapes {sa:?} vs {sb:?}")));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for k in 0..p {
                let aik = da[i * p + k];
                for j in 0..n {
                    out[i * n + j] += aik * db[k * n + j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.record(t, Op::Matmul, vec![a, b], "matmul")
    }

    /// out[k][j][i] = sum_{j'} M[j][j'] * H[k][j'][i]
    pub fn matmul_mid(&mut self, m_id: Id, h_id: Id) -> Result<Id> {
        let (tm, th) = (self.value(m_id), self.value(h_id));
        let (sm, sh) = (tm.shape(), th.shape());
        if sm.len() != 2 || sh.len() != 3 || sm[0] != sm[1] || sm[0] != sh[1] {
            return Err(CapsError::Shape(format!("matmul_mid: shapes {sm:?} vs {sh:?}")));
        }
        let (k_n, j_n, i_n) = (sh[0], sh[1], sh[2]);
        let (dm, dh) = (tm.data(), th.data());
        let mut out = vec![0.0; k_n * j_n * i_n];
        for k in 0..k_n {
            for j in 0..j_n {
                for jp in 0..j_n {
                    let w = dm[j * j_n + jp];
                    if w == 0.0 {
                        continue;
                    }
                    let src = (k * j_n + jp) * i_n;
                    let dst = (k * j_n + j) * i_n;
                    for i in 0..i_n {
                        out[dst + i] += w * dh[src + i];
                    }
                }
            }
        }
        let t = Tensor::new(vec![k_n, j_n, i_n], out)?;
        self.record(t, Op::MatmulMid, vec![m_id, h_id], "matmul_mid")
    }

    /// out[k][j][i] = sum_{j'} M[i][j][j'] * H[k][j'][i]
    pub fn matmul_mid_per_i(&mut self, m_id: Id, h_id: Id) -> Result<Id> {
        let (tm, th) = (self.value(m_id), self.value(h_id));
        let (sm, sh) = (tm.shape(), th.shape());
        if sm.len() != 3 || sh.len() != 3 || sm[1] != sm[2] || sm[1] != sh[1] || sm[0] != sh[2] {
            return Err(CapsError::Shape(format!("matmul_mid_per_i: shapes {sm:?} vs {sh:?}")));
        }
        let (k_n, j_n, i_n) = (sh[0], sh[1], sh[2]);
        let (dm, dh) = (tm.data(), th.data());
        let mut out = vec![0.0; k_n * j_n * i_n];
        for k in 0..k_n {
            for j in 0..j_n {
                let dst = (k * j_n + j) * i_n;
                for jp in 0..j_n {
                    let src = (k * j_n + jp) * i_n;
                    for i in 0..i_n {
                        out[dst + i] += dm[(i * j_n + j) * j_n + jp] * dh[src + i];
                    }
                }
            }
        }
        let t = Tensor::new(vec![k_n, j_n, i_n], out)?;
        self.record(t, Op::MatmulMidPerI, vec![m_id, h_id], "matmul_mid_per_i")
    }

    pub fn conv2d(&mut self, x: Id, k: Id, stride: usize, pad: usize) -> Result<Id> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(CapsError::Shape(format!("conv2d: shapes {sx:?} vs {sk:?}")));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(CapsError::Shape(format!("conv2d: kernel {sk:?} larger than padded input {sx:?}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let (dx, dk) = (tx.data(), tk.data());
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let xbase = (iy as usize * w + ix as usize) * cin;
                        let kbase = (ky * kw + kx) * cin;
                        let obase = (oy * ow + ox) * cout;
                        for ci in 0..cin {
                            let xv = dx[xbase + ci];
                            let krow = (kbase + ci) * cout;
                            for co in 0..cout {
                                out[obase + co] += xv * dk[krow + co];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, cout], out)?;
        self.record(t, Op::Conv2d { stride, pad }, vec![x, k], "conv2d")
    }

    /// One [f,f] kernel applied independently to each channel of [N,N,D],
    /// stride 1, zero padding.
    pub fn depthwise_shared(&mut self, x: Id, k: Id, pad: usize) -> Result<Id> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sk[1] {
            return Err(CapsError::Shape(format!("depthwise_shared: shapes {sx:?} vs {sk:?}")));
        }
        let (h, w, d_n) = (sx[0], sx[1], sx[2]);
        let f = sk[0];
        let (dx, dk) = (tx.data(), tk.data());
        let mut out = vec![0.0; h * w * d_n];
        for oy in 0..h {
            for ox in 0..w {
                for ky in 0..f {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..f {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let kv = dk[ky * f + kx];
                        let xbase = (iy as usize * w + ix as usize) * d_n;
                        let obase = (oy * w + ox) * d_n;
                        for d in 0..d_n {
                            out[obase + d] += kv * dx[xbase + d];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![h, w, d_n], out)?;
        self.record(t, Op::DepthwiseShared { pad }, vec![x, k], "depthwise_shared")
    }

    pub fn channel_bias(&mut self, x: Id, b: Id) -> Result<Id> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[2] {
            return Err(CapsError::Shape(format!("channel_bias: shapes {sx:?} vs {sb:?}")));
        }
        let c = sx[2];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        self.record(t, Op::ChannelBias, vec![x, b], "channel_bias")
    }

    pub fn relu(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        self.record(t, Op::Relu, vec![x], "relu")
    }

    pub fn exp(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect())?;
        self.record(t, Op::Exp, vec![x], "exp")
    }

    pub fn sqrt(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.sqrt()).collect())?;
        self.record(t, Op::Sqrt, vec![x], "sqrt")
    }

    pub fn softmax_axis(&mut self, x: Id, axis: usize) -> Result<Id> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(CapsError::Shape(format!(
                "softmax_axis: axis {axis} out of range for {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = lanes(tx.shape(), axis);
        let dx = tx.data();
        let mut out = vec![0.0; dx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(dx[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (dx[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record(t, Op::SoftmaxAxis { axis }, vec![x], "softmax_axis")
    }

    pub fn mean_last(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(CapsError::Shape("mean_last: rank must be >= 2".into()));
        }
        let l = *tx.shape().last().unwrap();
        let out: Vec<f64> = tx.data().chunks_exact(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), out)?;
        self.record(t, Op::MeanLast, vec![x], "mean_last")
    }

    pub fn std_last(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(CapsError::Shape("std_last: rank must be >= 2".into()));
        }
        let l = *tx.shape().last().unwrap();
        let out: Vec<f64> = tx
            .data()
            .chunks_exact(l)
            .map(|c| {
                let mu = c.iter().sum::<f64>() / l as f64;
                let var = c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
                var.sqrt()
            })
            .collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), out)?;
        self.record(t, Op::StdLast, vec![x], "std_last")
    }

    pub fn max_scalar(&mut self, x: Id, c: f64) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(c)).collect())?;
        self.record(t, Op::MaxScalar { c }, vec![x], "max_scalar")
    }

    pub fn sum_all(&mut self, x: Id) -> Result<Id> {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll, vec![x], "sum_all")
    }

    pub fn norm_last(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(CapsError::Shape("norm_last: rank must be >= 2".into()));
        }
        let l = *tx.shape().last().unwrap();
        let out: Vec<f64> = tx
            .data()
            .chunks_exact(l)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), out)?;
        self.record(t, Op::NormLast, vec![x], "norm_last")
    }

    /// squash(v) = (|v|^2 / (1+|v|^2)) * v / (|v| + delta) over the last axis.
    pub fn squash_last(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(CapsError::Shape("squash_last: rank must be >= 2".into()));
        }
        let l = *tx.shape().last().unwrap();
        let mut out = Vec::with_capacity(tx.len());
        for c in tx.data().chunks_exact(l) {
            let r = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = r * r / ((1.0 + r * r) * (r + SQUASH_DELTA));
            out.extend(c.iter().map(|v| s * v));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record(t, Op::SquashLast, vec![x], "squash_last")
    }

    pub fn slice_axis(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Result<Id> {
        let tx = self.value(x);
        if axis >= tx.rank() || start + len > tx.shape()[axis] || len == 0 {
            return Err(CapsError::Shape(format!(
                "slice_axis: axis {axis} [{start}..{}] out of range for {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (outer, alen, inner) = lanes(tx.shape(), axis);
        let dx = tx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&dx[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.record(t, Op::SliceAxis { axis, start, len }, vec![x], "slice_axis")
    }

    pub fn reshape(&mut self, x: Id, shape: Vec<usize>) -> Result<Id> {
        let t = self.value(x).reshaped(shape)?;
        self.record(t, Op::Reshape, vec![x], "reshape")
    }

    /// [K] -> [K,J] with every column equal to the input.
    pub fn repeat_cols(&mut self, x: Id, j: usize) -> Result<Id> {
        let tx = self.value(x);
        if tx.rank() != 1 {
            return Err(CapsError::Shape(format!("repeat_cols: input rank {:?}", tx.shape())));
        }
        let k = tx.shape()[0];
        let mut out = Vec::with_capacity(k * j);
        for &v in tx.data() {
            out.extend(std::iter::repeat(v).take(j));
        }
        let t = Tensor::new(vec![k, j], out)?;
        self.record(t, Op::RepeatCols { j }, vec![x], "repeat_cols")
    }

    /// out[j][i] = sum_k c[k][j] * p[k][j][i]
    pub fn weighted_sum_caps(&mut self, c: Id, p: Id) -> Result<Id> {
        let (tc, tp) = (self.value(c), self.value(p));
        let (sc, sp) = (tc.shape(), tp.shape());
        if sc.len() != 2 || sp.len() != 3 || sc[0] != sp[0] || sc[1] != sp[1] {
            return Err(CapsError::Shape(format!("weighted_sum_caps: shapes {sc:?} vs {sp:?}")));
        }
        let (k_n, j_n, i_n) = (sp[0], sp[1], sp[2]);
        let (dc, dp) = (tc.data(), tp.data());
        let mut out = vec![0.0; j_n * i_n];
        for k in 0..k_n {
            for j in 0..j_n {
                let w = dc[k * j_n + j];
                let base = (k * j_n + j) * i_n;
                for i in 0..i_n {
                    out[j * i_n + i] += w * dp[base + i];
                }
            }
        }
        let t = Tensor::new(vec![j_n, i_n], out)?;
        self.record(t, Op::WeightedSumCaps, vec![c, p], "weighted_sum_caps")
    }

    /// out[k][j] = p[k][j][:] . v[j][:]
    pub fn agreement(&mut self, p: Id, v: Id) -> Result<Id> {
        let (tp, tv) = (self.value(p), self.value(v));
        let (sp, sv) = (tp.shape(), tv.shape());
        if sp.len() != 3 || sv.len() != 2 || sp[1] != sv[0] || sp[2] != sv[1] {
            return Err(CapsError::Shape(format!("agreement: shapes {sp:?} vs {sv:?}")));
        }
        let (k_n, j_n, i_n) = (sp[0], sp[1], sp[2]);
        let (dp, dv) = (tp.data(), tv.data());
        let mut out = vec![0.0; k_n * j_n];
        for k in 0..k_n {
            for j in 0..j_n {
                let base = (k * j_n + j) * i_n;
                let mut acc = 0.0;
                for i in 0..i_n {
                    acc += dp[base + i] * dv[j * i_n + i];
                }
                out[k * j_n + j] = acc;
            }
        }
        let t = Tensor::new(vec![k_n, j_n], out)?;
        self.record(t, Op::Agreement, vec![p, v], "agreement")
    }

    /// out[j][i] = s[j] * x[j][i]
    pub fn scale_rows(&mut self, s: Id, x: Id) -> Result<Id> {
        let (ts, tx) = (self.value(s), self.value(x));
        let (ss, sx) = (ts.shape(), tx.shape());
        if ss.len() != 1 || sx.len() != 2 || ss[0] != sx[0] {
            return Err(CapsError::Shape(format!("scale_rows: shapes {ss:?} vs {sx:?}")));
        }
        let (j_n, i_n) = (sx[0], sx[1]);
        let (ds, dx) = (ts.data(), tx.data());
        let mut out = Vec::with_capacity(j_n * i_n);
        for j in 0..j_n {
            for i in 0..i_n {
                out.push(ds[j] * dx[j * i_n + i]);
            }
        }
        let t = Tensor::new(vec![j_n, i_n], out)?;
        self.record(t, Op::ScaleRows, vec![s, x], "scale_rows")
    }

    pub fn rho1(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v / (1.0 + v * v).sqrt()).collect(),
        )?;
        self.record(t, Op::Rho1, vec![x], "rho1")
    }

    pub fn rho2(&mut self, x: Id) -> Result<Id> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| 1.0 / (1.0 + v * v).sqrt()).collect(),
        )?;
        self.record(t, Op::Rho2, vec![x], "rho2")
    }

    /// out[k][j][i] = sum_p u[k][p] * w[k][j][p][i]
    pub fn predict_transform(&mut self, u: Id, w: Id) -> Result<Id> {
        let (tu, tw) = (self.value(u), self.value(w));
        let (su, sw) = (tu.shape(), tw.shape());
        if su.len() != 2 || sw.len() != 4 || su[0] != sw[0] || su[1] != sw[2] {
            return Err(CapsError::Shape(format!("predict_transform: shapes {su:?} vs {sw:?}")));
        }
        let (k_n, p_n) = (su[0], su[1]);
        let (j_n, i_n) = (sw[1], sw[3]);
        let (du, dw) = (tu.data(), tw.data());
        let mut out = vec![0.0; k_n * j_n * i_n];
        for k in 0..k_n {
            for j in 0..j_n {
                let obase = (k * j_n + j) * i_n;
                for p in 0..p_n {
                    let uv = du[k * p_n + p];
                    let wbase = ((k * j_n + j) * p_n + p) * i_n;
                    for i in 0..i_n {
                        out[obase + i] += uv * dw[wbase + i];
                    }
                }
            }
        }
        let t = Tensor::new(vec![k_n, j_n, i_n], out)?;
        self.record(t, Op::PredictTransform, vec![u, w], "predict_transform")
    }

    /// Reverse pass from a scalar loss. Returns one adjoint slot per node.
    pub fn backward(&mut self, loss: Id) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(CapsError::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for n in (0..=loss.0).rev() {
            let g = match adj[n].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(n, &g, &mut adj)?;
            adj[n] = Some(g);
        }
        for (i, g) in adj.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(CapsError::NonFinite(format!("adjoint of node {i}")));
                }
            }
        }
        Ok(Grads { adj })
    }

    fn accumulate_inputs(&self, n: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[n];
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let add_to = |slot: Id, delta: Tensor, adj: &mut [Option<Tensor>]| {
            match &mut adj[slot.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                s @ None => *s = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(node.inputs[0], g.clone(), adj);
                add_to(node.inputs[1], g.clone(), adj);
            }
            Op::Sub => {
                add_to(node.inputs[0], g.clone(), adj);
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                add_to(node.inputs[1], neg, adj);
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
                add_to(node.inputs[1], gb, adj);
            }
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(g, b)| g / b).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
                add_to(node.inputs[1], gb, adj);
            }
            Op::Affine { a } => {
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| a * v).collect())?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::MulConst(c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(c.data()).map(|(g, c)| g * c).collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::Matmul => {
                let (a, b) = (inp(0), inp(1));
                let (m, p) = (a.shape()[0], a.shape()[1]);
                let n_cols = b.shape()[1];
                let (da, db, dg) = (a.data(), b.data(), g.data());
                let mut ga = vec![0.0; m * p];
                let mut gb = vec![0.0; p * n_cols];
                for i in 0..m {
                    for k in 0..p {
                        let mut acc = 0.0;
                        for j in 0..n_cols {
                            acc += dg[i * n_cols + j] * db[k * n_cols + j];
                            gb[k * n_cols + j] += da[i * p + k] * dg[i * n_cols + j];
                        }
                        ga[i * p + k] += acc;
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![m, p], ga)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![p, n_cols], gb)?, adj);
            }
            Op::MatmulMid => {
                let (mt, ht) = (inp(0), inp(1));
                let (k_n, j_n, i_n) = (ht.shape()[0], ht.shape()[1], ht.shape()[2]);
                let (dm, dh, dg) = (mt.data(), ht.data(), g.data());
                let mut gm = vec![0.0; j_n * j_n];
                let mut gh = vec![0.0; k_n * j_n * i_n];
                for k in 0..k_n {
                    for j in 0..j_n {
                        let gbase = (k * j_n + j) * i_n;
                        for jp in 0..j_n {
                            let hbase = (k * j_n + jp) * i_n;
                            let mut acc = 0.0;
                            let w = dm[j * j_n + jp];
                            for i in 0..i_n {
                                acc += dg[gbase + i] * dh[hbase + i];
                                gh[hbase + i] += w * dg[gbase + i];
                            }
                            gm[j * j_n + jp] += acc;
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![j_n, j_n], gm)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![k_n, j_n, i_n], gh)?, adj);
            }
            Op::MatmulMidPerI => {
                let (mt, ht) = (inp(0), inp(1));
                let (k_n, j_n, i_n) = (ht.shape()[0], ht.shape()[1], ht.shape()[2]);
                let (dm, dh, dg) = (mt.data(), ht.data(), g.data());
                let mut gm = vec![0.0; i_n * j_n * j_n];
                let mut gh = vec![0.0; k_n * j_n * i_n];
                for k in 0..k_n {
                    for j in 0..j_n {
                        let gbase = (k * j_n + j) * i_n;
                        for jp in 0..j_n {
                            let hbase = (k * j_n + jp) * i_n;
                            for i in 0..i_n {
                                let m_idx = (i * j_n + j) * j_n + jp;
                                gm[m_idx] += dg[gbase + i] * dh[hbase + i];
                                gh[hbase + i] += dm[m_idx] * dg[gbase + i];
                            }
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![i_n, j_n, j_n], gm)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![k_n, j_n, i_n], gh)?, adj);
            }
            Op::Conv2d { stride, pad } => {
                let (xt, kt) = (inp(0), inp(1));
                let (h, w, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let (kh, kw, cout) = (kt.shape()[0], kt.shape()[1], kt.shape()[3]);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                let (dx, dk, dg) = (xt.data(), kt.data(), g.data());
                let mut gx = vec![0.0; h * w * cin];
                let mut gk = vec![0.0; kh * kw * cin * cout];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - *pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let xbase = (iy as usize * w + ix as usize) * cin;
                                let kbase = (ky * kw + kx) * cin;
                                let obase = (oy * ow + ox) * cout;
                                for ci in 0..cin {
                                    let krow = (kbase + ci) * cout;
                                    let xv = dx[xbase + ci];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        let gv = dg[obase + co];
                                        acc += gv * dk[krow + co];
                                        gk[krow + co] += gv * xv;
                                    }
                                    gx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![h, w, cin], gx)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![kh, kw, cin, cout], gk)?, adj);
            }
            Op::DepthwiseShared { pad } => {
                let (xt, kt) = (inp(0), inp(1));
                let (h, w, d_n) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let f = kt.shape()[0];
                let (dx, dk, dg) = (xt.data(), kt.data(), g.data());
                let mut gx = vec![0.0; h * w * d_n];
                let mut gk = vec![0.0; f * f];
                for oy in 0..h {
                    for ox in 0..w {
                        for ky in 0..f {
                            let iy = (oy + ky) as isize - *pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..f {
                                let ix = (ox + kx) as isize - *pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let kv = dk[ky * f + kx];
                                let xbase = (iy as usize * w + ix as usize) * d_n;
                                let obase = (oy * w + ox) * d_n;
                                let mut acc = 0.0;
                                for d in 0..d_n {
                                    let gv = dg[obase + d];
                                    gx[xbase + d] += kv * gv;
                                    acc += gv * dx[xbase + d];
                                }
                                gk[ky * f + kx] += acc;
                            }
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![h, w, d_n], gx)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![f, f], gk)?, adj);
            }
            Op::ChannelBias => {
                let c = inp(1).shape()[0];
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                add_to(node.inputs[0], g.clone(), adj);
                add_to(node.inputs[1], Tensor::new(vec![c], gb)?, adj);
            }
            Op::Relu => {
                let x = inp(0);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::Exp => {
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::Sqrt => {
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(g, y)| g * 0.5 / y).collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::SoftmaxAxis { axis } => {
                let y = &node.value;
                let (outer, len, inner) = lanes(y.shape(), *axis);
                let (dy, dg) = (y.data(), g.data());
                let mut gx = vec![0.0; dy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += dg[idx(j)] * dy[idx(j)];
                        }
                        for j in 0..len {
                            gx[idx(j)] = dy[idx(j)] * (dg[idx(j)] - dot);
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(y.shape().to_vec(), gx)?, adj);
            }
            Op::MeanLast => {
                let x = inp(0);
                let l = *x.shape().last().unwrap();
                let mut gx = Vec::with_capacity(x.len());
                for gv in g.data() {
                    gx.extend(std::iter::repeat(gv / l as f64).take(l));
                }
                add_to(node.inputs[0], Tensor::new(x.shape().to_vec(), gx)?, adj);
            }
            Op::StdLast => {
                let x = inp(0);
                let l = *x.shape().last().unwrap();
                let sigma = node.value.data();
                let mut gx = Vec::with_capacity(x.len());
                for (lane, c) in x.data().chunks_exact(l).enumerate() {
                    let mu = c.iter().sum::<f64>() / l as f64;
                    let s = sigma[lane];
                    let gv = g.data()[lane];
                    if s < 1e-300 {
                        gx.extend(std::iter::repeat(0.0).take(l));
                    } else {
                        gx.extend(c.iter().map(|v| gv * (v - mu) / (l as f64 * s)));
                    }
                }
                add_to(node.inputs[0], Tensor::new(x.shape().to_vec(), gx)?, adj);
            }
            Op::MaxScalar { c } => {
                let x = inp(0);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x >= *c { *g } else { 0.0 })
                        .collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::SumAll => {
                let x = inp(0);
                let gv = g.scalar_value();
                add_to(node.inputs[0], Tensor::filled(x.shape().to_vec(), gv), adj);
            }
            Op::NormLast => {
                let x = inp(0);
                let l = *x.shape().last().unwrap();
                let norms = node.value.data();
                let mut gx = Vec::with_capacity(x.len());
                for (lane, c) in x.data().chunks_exact(l).enumerate() {
                    let r = norms[lane].max(NORM_GUARD);
                    let gv = g.data()[lane];
                    gx.extend(c.iter().map(|v| gv * v / r));
                }
                add_to(node.inputs[0], Tensor::new(x.shape().to_vec(), gx)?, adj);
            }
            Op::SquashLast => {
                let x = inp(0);
                let l = *x.shape().last().unwrap();
                let mut gx = Vec::with_capacity(x.len());
                for (c, gc) in x.data().chunks_exact(l).zip(g.data().chunks_exact(l)) {
                    let r2: f64 = c.iter().map(|v| v * v).sum();
                    let r = r2.sqrt();
                    if r < 1e-12 {
                        gx.extend(std::iter::repeat(0.0).take(l));
                        continue;
                    }
                    // y = s(r) x with s = r^2 / ((1+r^2)(r+delta))
                    let v = (1.0 + r2) * (r + SQUASH_DELTA);
                    let s = r2 / v;
                    let vp = 1.0 + 3.0 * r2 + 2.0 * SQUASH_DELTA * r;
                    let sp = (2.0 * r * v - r2 * vp) / (v * v);
                    let dot: f64 = c.iter().zip(gc).map(|(x, g)| x * g).sum();
                    let coef = sp / r * dot;
                    gx.extend(c.iter().zip(gc).map(|(x, g)| s * g + coef * x));
                }
                add_to(node.inputs[0], Tensor::new(x.shape().to_vec(), gx)?, adj);
            }
            Op::SliceAxis { axis, start, len } => {
                let x = inp(0);
                let (outer, alen, inner) = lanes(x.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                let dg = g.data();
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&dg[src..src + len * inner]);
                }
                add_to(node.inputs[0], Tensor::new(x.shape().to_vec(), gx)?, adj);
            }
            Op::Reshape => {
                let x = inp(0);
                add_to(node.inputs[0], g.reshaped(x.shape().to_vec())?, adj);
            }
            Op::RepeatCols { j } => {
                let x = inp(0);
                let k = x.shape()[0];
                let dg = g.data();
                let mut gx = vec![0.0; k];
                for ki in 0..k {
                    gx[ki] = dg[ki * j..(ki + 1) * j].iter().sum();
                }
                add_to(node.inputs[0], Tensor::new(vec![k], gx)?, adj);
            }
            Op::WeightedSumCaps => {
                let (ct, pt) = (inp(0), inp(1));
                let (k_n, j_n, i_n) = (pt.shape()[0], pt.shape()[1], pt.shape()[2]);
                let (dc, dp, dg) = (ct.data(), pt.data(), g.data());
                let mut gc = vec![0.0; k_n * j_n];
                let mut gp = vec![0.0; k_n * j_n * i_n];
                for k in 0..k_n {
                    for j in 0..j_n {
                        let base = (k * j_n + j) * i_n;
                        let w = dc[k * j_n + j];
                        let mut acc = 0.0;
                        for i in 0..i_n {
                            let gv = dg[j * i_n + i];
                            acc += gv * dp[base + i];
                            gp[base + i] += w * gv;
                        }
                        gc[k * j_n + j] = acc;
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![k_n, j_n], gc)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![k_n, j_n, i_n], gp)?, adj);
            }
            Op::Agreement => {
                let (pt, vt) = (inp(0), inp(1));
                let (k_n, j_n, i_n) = (pt.shape()[0], pt.shape()[1], pt.shape()[2]);
                let (dp, dv, dg) = (pt.data(), vt.data(), g.data());
                let mut gp = vec![0.0; k_n * j_n * i_n];
                let mut gv = vec![0.0; j_n * i_n];
                for k in 0..k_n {
                    for j in 0..j_n {
                        let base = (k * j_n + j) * i_n;
                        let gval = dg[k * j_n + j];
                        for i in 0..i_n {
                            gp[base + i] += gval * dv[j * i_n + i];
                            gv[j * i_n + i] += gval * dp[base + i];
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![k_n, j_n, i_n], gp)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![j_n, i_n], gv)?, adj);
            }
            Op::ScaleRows => {
                let (st, xt) = (inp(0), inp(1));
                let (j_n, i_n) = (xt.shape()[0], xt.shape()[1]);
                let (ds, dx, dg) = (st.data(), xt.data(), g.data());
                let mut gs = vec![0.0; j_n];
                let mut gx = vec![0.0; j_n * i_n];
                for j in 0..j_n {
                    let mut acc = 0.0;
                    for i in 0..i_n {
                        let gv = dg[j * i_n + i];
                        acc += gv * dx[j * i_n + i];
                        gx[j * i_n + i] = ds[j] * gv;
                    }
                    gs[j] = acc;
                }
                add_to(node.inputs[0], Tensor::new(vec![j_n], gs)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![j_n, i_n], gx)?, adj);
            }
            Op::Rho1 => {
                let x = inp(0);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| g * (1.0 + x * x).powf(-1.5))
                        .collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::Rho2 => {
                let x = inp(0);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| -g * x * (1.0 + x * x).powf(-1.5))
                        .collect(),
                )?;
                add_to(node.inputs[0], ga, adj);
            }
            Op::PredictTransform => {
                let (ut, wt) = (inp(0), inp(1));
                let (k_n, p_n) = (ut.shape()[0], ut.shape()[1]);
                let (j_n, i_n) = (wt.shape()[1], wt.shape()[3]);
                let (du, dw, dg) = (ut.data(), wt.data(), g.data());
                let mut gu = vec![0.0; k_n * p_n];
                let mut gw = vec![0.0; k_n * j_n * p_n * i_n];
                for k in 0..k_n {
                    for j in 0..j_n {
                        let gbase = (k * j_n + j) * i_n;
                        for p in 0..p_n {
                            let wbase = ((k * j_n + j) * p_n + p) * i_n;
                            let uv = du[k * p_n + p];
                            let mut acc = 0.0;
                            for i in 0..i_n {
                                let gv = dg[gbase + i];
                                acc += gv * dw[wbase + i];
                                gw[wbase + i] += uv * gv;
                            }
                            gu[k * p_n + p] += acc;
                        }
                    }
                }
                add_to(node.inputs[0], Tensor::new(vec![k_n, p_n], gu)?, adj);
                add_to(node.inputs[1], Tensor::new(vec![k_n, j_n, p_n, i_n], gw)?, adj);
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`]; indexed by node [`Id`].
pub struct Grads {
    adj: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient w.r.t. the given node; zero tensor if the node does not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, id: Id) -> Tensor {
        match &self.adj[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}
