//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates gradients
//! into the [`ParamSet`] entries that were read through [`Tape::param`].
//! Operations are 2-D (`rows × cols`); a `[1, 1]` tensor is a scalar.

use std::collections::HashMap;

use super::param::{ParamId, ParamSet};
use super::tensor::{gemm_acc, gemm_tn_acc, transpose_raw, Tensor};
use crate::error::{shape_err, Error, Result};

/// Stabilizer for norms and cosine denominators.
pub const NORM_EPS: f64 = 1e-12;
/// Variance stabilizer for layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One causal attention block: `q_len` query rows attend to the key rows
/// `k_start..k_start + offset + i + 1` (query `i`, counted within the block).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSeg {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub offset: usize,
}

impl AttnSeg {
    /// Plain causal self-attention over rows `start..start + len`.
    pub fn causal(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            offset: 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<AttnSeg>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentMean(Var, Vec<(usize, usize)>),
    ScatterAddRows {
        base: Var,
        src: Var,
        map: Vec<Option<usize>>,
    },
    RowNorm(Var),
    RowNormalize(Var),
    RowCosine(Var, Var),
    RowDot(Var, Var),
    RepeatCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    LogSoftmaxPick {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of every recorded node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Non-differentiable input (its gradient is still reported by
    /// [`Tape::gradients`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let bt = transpose_raw(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if dims2(sa) != dims2(sb) || sa.len() != sb.len() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", sa.shape(), sb.shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(vec![ta.rows(), ta.cols()], data).expect("shape checked")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(vec![t.rows(), t.cols()], data).expect("same length");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if self.value(row).len() != c {
            return Err(shape_err(
                "add_row",
                format!("[{r}, {c}] + {:?}", self.value(row).shape()),
            ));
        }
        let mut out = self.value(a).clone().reshape(vec![r, c])?;
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a));
        if self.value(col).len() != r {
            return Err(shape_err(
                "mul_col",
                format!("[{r}, {c}] * {:?}", self.value(col).shape()),
            ));
        }
        let s = self.value(col).data().to_vec();
        let mut out = self.value(a).clone().reshape(vec![r, c])?;
        for (i, si) in s.iter().enumerate() {
            for o in out.row_slice_mut(i) {
                *o *= si;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("{:?}", self.value(s).shape()),
            ));
        }
        let k = self.value(s).item();
        Ok(self.unary(a, |x| x * k, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = self.zip_map(a, b, |x, y| if x <= y { x } else { y });
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = dims2(self.value(x));
        if d == 0 {
            return Err(Error::InvalidArgument(
                "layer_norm over zero features".into(),
            ));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "features {d}, gain {:?}, bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![r, d], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Blockwise causal softmax attention, `softmax(scale · q kᵀ) v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<AttnSeg>,
        scale: f64,
    ) -> Result<Var> {
        let (nq, d) = dims2(self.value(q));
        let (nk, dk) = dims2(self.value(k));
        let (nv, dv) = dims2(self.value(v));
        if d != dk || nk != nv {
            return Err(shape_err(
                "attention",
                format!("q [{nq}, {d}], k [{nk}, {dk}], v [{nv}, {dv}]"),
            ));
        }
        for s in &segs {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.offset + s.q_len > s.k_len
            {
                return Err(shape_err("attention", format!("bad segment {s:?}")));
            }
        }
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; nq * dv];
        let mut probs = Vec::with_capacity(segs.len());
        for s in &segs {
            let mut p = vec![0.0; s.q_len * s.k_len];
            for i in 0..s.q_len {
                let qi = &qd[(s.q_start + i) * d..(s.q_start + i + 1) * d];
                let visible = s.offset + i + 1;
                let prow = &mut p[i * s.k_len..i * s.k_len + visible];
                let mut mx = f64::NEG_INFINITY;
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = &kd[(s.k_start + j) * d..(s.k_start + j + 1) * d];
                    let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    *pj = sc;
                    mx = mx.max(sc);
                }
                let mut z = 0.0;
                for pj in prow.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                let orow = &mut out[(s.q_start + i) * dv..(s.q_start + i + 1) * dv];
                for (j, pj) in prow.iter_mut().enumerate() {
                    *pj /= z;
                    let vj = &vd[(s.k_start + j) * dv..(s.k_start + j + 1) * dv];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += *pj * vv;
                    }
                }
            }
            probs.push(p);
        }
        let out = Tensor::new(vec![nq, dv], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs,
                scale,
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather_rows(x, vec![i])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs.first().map_or(0, |&x| self.value(x).cols());
        let mut data = Vec::new();
        let mut r = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != c {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} vs {c} columns", t.cols()),
                ));
            }
            r += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = xs.first().map_or(0, |&x| self.value(x).rows());
        if xs.iter().any(|&x| self.value(x).rows() != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let c: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(i));
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    /// Mean over each `(start, len)` row block; one output row per block.
    pub fn segment_mean(&mut self, x: Var, segs: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t);
        let mut out = vec![0.0; segs.len() * c];
        for (s, &(start, len)) in segs.iter().enumerate() {
            if len == 0 || start + len > r {
                return Err(shape_err(
                    "segment_mean",
                    format!("segment ({start}, {len}) of {r} rows"),
                ));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for i in start..start + len {
                for (ov, xv) in o.iter_mut().zip(t.row_slice(i)) {
                    *ov += xv;
                }
            }
            for ov in o.iter_mut() {
                *ov /= len as f64;
            }
        }
        let out = Tensor::new(vec![segs.len(), c], out)?;
        Ok(self.push(out, Op::SegmentMean(x, segs)))
    }

    /// `out[i] = base[i] + src[map[i]]` where `map[i]` is set.
    pub fn scatter_add_rows(
        &mut self,
        base: Var,
        src: Var,
        map: Vec<Option<usize>>,
    ) -> Result<Var> {
        let (r, c) = dims2(self.value(base));
        let (sr, sc) = dims2(self.value(src));
        if map.len() != r || sc != c || map.iter().flatten().any(|&s| s >= sr) {
            return Err(shape_err(
                "scatter_add_rows",
                format!("base [{r}, {c}], src [{sr}, {sc}], map of {}", map.len()),
            ));
        }
        let mut out = self.value(base).clone().reshape(vec![r, c])?;
        for (i, m) in map.iter().enumerate() {
            if let Some(s) = *m {
                let srow = self.value(src).row_slice(s).to_vec();
                for (o, v) in out.row_slice_mut(i).iter_mut().zip(srow) {
                    *o += v;
                }
            }
        }
        Ok(self.push(out, Op::ScatterAddRows { base, src, map }))
    }

    /// L2 norm of each row, `r × 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let n = out.len();
        self.push(Tensor::new(vec![n, 1], out).expect("len"), Op::RowNorm(x))
    }

    /// Each row divided by `‖row‖ + ε`.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims2(t);
        let mut out = t.clone().reshape(vec![r, c]).expect("same len");
        for i in 0..r {
            let row = out.row_slice_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row {
                *v /= n + NORM_EPS;
            }
        }
        self.push(out, Op::RowNormalize(x))
    }

    /// Row-wise cosine similarity `a·b / (‖a‖‖b‖ + ε)`, `r × 1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| cosine(ta.row_slice(i), tb.row_slice(i)))
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::RowCosine(a, b)))
    }

    /// Row-wise dot product, `r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| dot(ta.row_slice(i), tb.row_slice(i)))
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::RowDot(a, b)))
    }

    /// Repeats each column `k` times in place: `[r, h] → [r, h·k]`.
    pub fn repeat_cols(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let (r, h) = dims2(t);
        let mut out = Vec::with_capacity(r * h * k);
        for i in 0..r {
            for &v in t.row_slice(i) {
                out.extend(std::iter::repeat_n(v, k));
            }
        }
        self.push(
            Tensor::new(vec![r, h * k], out).expect("len"),
            Op::RepeatCols(x, k),
        )
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::OutOfRange {
                what: "select_cols",
                index: bad,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = t.row_slice(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let out = Tensor::new(vec![r, cols.len()], out)?;
        Ok(self.push(out, Op::SelectCols(x, cols)))
    }

    /// Log-probability of `targets[i]` under `softmax(x[i])`, `n × 1`.
    pub fn log_softmax_pick(&mut self, x: Var, targets: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, v) = dims2(t);
        if targets.len() != r {
            return Err(shape_err(
                "log_softmax_pick",
                format!("{r} rows but {} targets", targets.len()),
            ));
        }
        let mut probs = vec![0.0; r * v];
        let mut out = vec![0.0; r];
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= v {
                return Err(Error::OutOfRange {
                    what: "softmax target",
                    index: tg,
                    len: v,
                });
            }
            let row = t.row_slice(i);
            let (lse, p) = log_softmax_row(row);
            out[i] = row[tg] - lse;
            probs[i * v..(i + 1) * v].copy_from_slice(&p);
        }
        let out = Tensor::new(vec![r, 1], out)?;
        Ok(self.push(out, Op::LogSoftmaxPick { x, targets, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass; parameter gradients are added to `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut ordered: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        ordered.sort();
        for (pid, v) in ordered {
            if let Some(g) = grads.get(v) {
                let p = params.get_mut(pid);
                for (pg, gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *pg += gv;
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let bt = transpose_raw(tb.data(), k, n);
                let ga = self.grad_buf(grads, *a);
                gemm_acc(gd, &bt, ga, m, n, k);
                let gb = self.grad_buf(grads, *b);
                gemm_tn_acc(ta.data(), gd, gb, m, k, n);
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let ga = self.grad_buf(grads, *a);
                gemm_acc(gd, tb.data(), ga, m, n, k);
                let gb = self.grad_buf(grads, *b);
                gemm_tn_acc(gd, ta.data(), gb, m, n, k);
            }
            Op::Add(a, b) => {
                acc(self.grad_buf(grads, *a), gd);
                acc(self.grad_buf(grads, *b), gd);
            }
            Op::AddRow(a, row) => {
                acc(self.grad_buf(grads, *a), gd);
                let c = g.cols();
                let gr = self.grad_buf(grads, *row);
                for chunk in gd.chunks(c) {
                    acc(gr, chunk);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), bv) in ga.iter_mut().zip(gd).zip(tb) {
                    *o += gv * bv;
                }
                let gb = self.grad_buf(grads, *b);
                for ((o, gv), av) in gb.iter_mut().zip(gd).zip(ta) {
                    *o += gv * av;
                }
            }
            Op::MulCol(a, col) => {
                let c = g.cols();
                let (ta, s) = (self.value(*a).data(), self.value(*col).data());
                let ga = self.grad_buf(grads, *a);
                for (i, si) in s.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += gd[i * c + j] * si;
                    }
                }
                let gs = self.grad_buf(grads, *col);
                for (i, o) in gs.iter_mut().enumerate() {
                    *o += dot(&gd[i * c..(i + 1) * c], &ta[i * c..(i + 1) * c]);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let ta = self.value(*a).data();
                let ga = self.grad_buf(grads, *a);
                for (o, gv) in ga.iter_mut().zip(gd) {
                    *o += gv * k;
                }
                let gs = self.grad_buf(grads, *s);
                gs[0] += dot(gd, ta);
            }
            Op::Scale(a, k) => {
                let ga = self.grad_buf(grads, *a);
                for (o, gv) in ga.iter_mut().zip(gd) {
                    *o += gv * k;
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *o += gv * (1.0 - yv * yv);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), xv) in ga.iter_mut().zip(gd).zip(x) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *o += gv * yv;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), xv) in ga.iter_mut().zip(gd).zip(x) {
                    if xv > lo && xv < hi {
                        *o += gv;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x <= y).collect();
                let ga = self.grad_buf(grads, *a);
                for ((o, gv), &pa) in ga.iter_mut().zip(gd).zip(&pick_a) {
                    if pa {
                        *o += gv;
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for ((o, gv), &pa) in gb.iter_mut().zip(gd).zip(&pick_a) {
                    if !pa {
                        *o += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data().to_vec();
                {
                    let gg = self.grad_buf(grads, *gain);
                    for (i, chunk) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += chunk[j] * xhat[i * d + j];
                        }
                    }
                }
                {
                    let gb = self.grad_buf(grads, *bias);
                    for chunk in gd.chunks(d) {
                        acc(gb, chunk);
                    }
                }
                let gx = self.grad_buf(grads, *x);
                let mut dxhat = vec![0.0; d];
                for (i, chunk) in gd.chunks(d).enumerate() {
                    let h = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dxhat[j] = chunk[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[i * d + j] += inv_std[i] * (dxhat[j] - m1 - h[j] * m2);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                scale,
                probs,
            } => {
                let d = self.value(*q).cols();
                let dv = self.value(*v).cols();
                let (qd, kd, vd) = (
                    self.value(*q).data().to_vec(),
                    self.value(*k).data().to_vec(),
                    self.value(*v).data().to_vec(),
                );
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gvv = vec![0.0; vd.len()];
                for (s, p) in segs.iter().zip(probs) {
                    for i in 0..s.q_len {
                        let qi_row = s.q_start + i;
                        let go = &gd[qi_row * dv..(qi_row + 1) * dv];
                        let visible = s.offset + i + 1;
                        let prow = &p[i * s.k_len..i * s.k_len + visible];
                        let mut dp = vec![0.0; visible];
                        for j in 0..visible {
                            let kr = s.k_start + j;
                            let vj = &vd[kr * dv..(kr + 1) * dv];
                            dp[j] = dot(go, vj);
                            let gvj = &mut gvv[kr * dv..(kr + 1) * dv];
                            for (o, gov) in gvj.iter_mut().zip(go) {
                                *o += prow[j] * gov;
                            }
                        }
                        let pd: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..visible {
                            let ds = prow[j] * (dp[j] - pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kr = s.k_start + j;
                            for c in 0..d {
                                gq[qi_row * d + c] += ds * kd[kr * d + c];
                                gk[kr * d + c] += ds * qd[qi_row * d + c];
                            }
                        }
                    }
                }
                acc(self.grad_buf(grads, *q), &gq);
                acc(self.grad_buf(grads, *k), &gk);
                acc(self.grad_buf(grads, *v), &gvv);
            }
            Op::GatherRows(x, idx) => {
                let c = g.cols();
                let gx = self.grad_buf(grads, *x);
                for (o, &i) in idx.iter().enumerate() {
                    acc(&mut gx[i * c..(i + 1) * c], &gd[o * c..(o + 1) * c]);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(self.grad_buf(grads, x), &gd[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut col = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    let gx = self.grad_buf(grads, x);
                    for (i, chunk) in gd.chunks(total).enumerate() {
                        acc(&mut gx[i * c..(i + 1) * c], &chunk[col..col + c]);
                    }
                    col += c;
                }
            }
            Op::SegmentMean(x, segs) => {
                let c = g.cols();
                let gx = self.grad_buf(grads, *x);
                for (s, &(start, len)) in segs.iter().enumerate() {
                    let gs = &gd[s * c..(s + 1) * c];
                    for i in start..start + len {
                        for (o, gv) in gx[i * c..(i + 1) * c].iter_mut().zip(gs) {
                            *o += gv / len as f64;
                        }
                    }
                }
            }
            Op::ScatterAddRows { base, src, map } => {
                let c = g.cols();
                acc(self.grad_buf(grads, *base), gd);
                let gs = self.grad_buf(grads, *src);
                for (i, m) in map.iter().enumerate() {
                    if let Some(s) = *m {
                        acc(&mut gs[s * c..(s + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::RowNorm(x) => {
                let t = self.value(*x);
                let c = t.cols();
                let xd = t.data().to_vec();
                let n = node.value.data();
                let gx = self.grad_buf(grads, *x);
                for i in 0..n.len() {
                    if n[i] == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        gx[i * c + j] += gd[i] * xd[i * c + j] / n[i];
                    }
                }
            }
            Op::RowNormalize(x) => {
                let t = self.value(*x);
                let c = t.cols();
                let xd = t.data().to_vec();
                let gx = self.grad_buf(grads, *x);
                for i in 0..xd.len() / c.max(1) {
                    let xr = &xd[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let den = n + NORM_EPS;
                    let gx_dot = dot(gr, xr);
                    for j in 0..c {
                        let mut v = gr[j] / den;
                        if n > 0.0 {
                            v -= xr[j] * gx_dot / (n * den * den);
                        }
                        gx[i * c + j] += v;
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let c = self.value(*a).cols();
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                let rows = ad.len() / c.max(1);
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for i in 0..rows {
                    let ar = &ad[i * c..(i + 1) * c];
                    let br = &bd[i * c..(i + 1) * c];
                    let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let num = dot(ar, br);
                    let den = na * nb + NORM_EPS;
                    for j in 0..c {
                        let mut da = br[j] / den;
                        let mut db = ar[j] / den;
                        if na > 0.0 {
                            da -= num * nb * ar[j] / (na * den * den);
                        }
                        if nb > 0.0 {
                            db -= num * na * br[j] / (nb * den * den);
                        }
                        ga[i * c + j] = gd[i] * da;
                        gb[i * c + j] = gd[i] * db;
                    }
                }
                acc(self.grad_buf(grads, *a), &ga);
                acc(self.grad_buf(grads, *b), &gb);
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).cols();
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                let ga = self.grad_buf(grads, *a);
                for (j, o) in ga.iter_mut().enumerate() {
                    *o += gd[j / c] * bd[j];
                }
                let gb = self.grad_buf(grads, *b);
                for (j, o) in gb.iter_mut().enumerate() {
                    *o += gd[j / c] * ad[j];
                }
            }
            Op::RepeatCols(x, k) => {
                let gx = self.grad_buf(grads, *x);
                for (j, o) in gx.iter_mut().enumerate() {
                    *o += gd[j * k..(j + 1) * k].iter().sum::<f64>();
                }
            }
            Op::SelectCols(x, cols) => {
                let c = self.value(*x).cols();
                let w = cols.len();
                let gx = self.grad_buf(grads, *x);
                for (i, chunk) in gd.chunks(w.max(1)).enumerate() {
                    for (o, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += chunk[o];
                    }
                }
            }
            Op::LogSoftmaxPick { x, targets, probs } => {
                let v = self.value(*x).cols();
                let gx = self.grad_buf(grads, *x);
                for (i, &tg) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == tg { 1.0 } else { 0.0 };
                        gx[i * v + j] += gd[i] * (onehot - probs[i * v + j]);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = self.grad_buf(grads, *x);
                for o in gx.iter_mut() {
                    *o += gd[0];
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / (‖a‖‖b‖ + ε)`; two zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb + NORM_EPS)
}

/// Returns `(logsumexp(row), softmax(row))`.
pub(crate) fn log_softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    (mx + z.ln(), p)
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}
