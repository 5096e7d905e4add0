//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! sweeps the nodes in reverse and accumulates adjoints. The tape is
//! append-only, so it cannot contain cycles. Variables carry the id of the
//! tape that created them and are rejected by any other tape.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamId, ParameterSet, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => libm::tanh(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
        }
    }

    #[inline]
    fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = libm::tanh(x);
                -2.0 * t * (1.0 - t * t)
            }
            _ => 0.0,
        }
    }
}

/// Sparse linear map from a `[C, P]` source to an `[N, C]` output:
/// `out[i, c] = Σ_k coef_k · src[c, index_k]` over the entries of row `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseMap {
    offsets: Vec<usize>,
    index: Vec<usize>,
    coef: Vec<f64>,
}

impl SparseMap {
    pub fn new() -> Self {
        SparseMap {
            offsets: vec![0],
            index: Vec::new(),
            coef: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(i, c) in entries {
            self.index.push(i);
            self.coef.push(c);
        }
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.index[r.clone()].iter().copied().zip(self.coef[r].iter().copied())
    }
}

enum Op {
    Constant,
    Param { id: ParamId },
    MatMulT { x: usize, w: usize },
    AddRow { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MulConst { a: usize, k: Tensor },
    Act { x: usize, kind: Activation },
    ActTangent { pre: usize, dot: usize, kind: Activation },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<f64> },
    AddChannel { x: usize, b: usize },
    Gather { src: usize, map: SparseMap },
    ConcatCols { a: usize, b: usize },
    Column { a: usize, j: usize },
    MulCol { col: usize, a: usize },
    SubRow { a: usize, row: usize },
    RowSumSq { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    GlobalAvgPool { x: usize },
    Reshape { a: usize },
    AddRowHead { x: usize, b: usize, n: usize },
    DualAct { x: usize, n: usize, kind: Activation },
    Rows { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation record.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: usize, found: usize) -> DiffError {
    DiffError::Shape { op, expected, found }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize), DiffError> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, 2, t.shape().len()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), DiffError> {
    if t.shape().len() != 3 {
        return Err(shape_err(op, 3, t.shape().len()));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // upholds; the slices outlive the call and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * hw];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.wo + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, DiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(DiffError::Structural("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push("constant", Op::Constant, t)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var, DiffError> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter; its adjoint lands in the parameter's
    /// gradient buffer on [`backprop`](super::backprop).
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<Var, DiffError> {
        let e = params
            .get(id)
            .ok_or_else(|| DiffError::Structural(alloc::format!("unknown parameter id {}", id.0)))?;
        let t = Tensor::new(&e.shape, e.value.clone())?;
        self.push("param", Op::Param { id }, t)
    }

    /// `x[n×k] · wᵀ` for `w[m×k]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var, DiffError> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (n, k) = rank2(&self.nodes[xi].value, "matmul_t")?;
        let (m, k2) = rank2(&self.nodes[wi].value, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", k, k2));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            self.nodes[xi].value.data(),
            k,
            1,
            self.nodes[wi].value.data(),
            1,
            k,
            0.0,
            out.data_mut(),
            m,
        );
        self.push("matmul_t", Op::MatMulT { x: xi, w: wi }, out)
    }

    /// Adds `b[m]` to every row of `x[n×m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (_, m) = rank2(&self.nodes[xi].value, "add_row")?;
        let bv = self.nodes[bi].value.data();
        if bv.len() != m {
            return Err(shape_err("add_row", m, bv.len()));
        }
        let mut out = self.nodes[xi].value.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push("add_row", Op::AddRow { x: xi, b: bi }, out)
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<(), DiffError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, self.nodes[a].value.numel(), self.nodes[b].value.numel()));
        }
        Ok(())
    }

    fn zip_with(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut out = self.nodes[a].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o = f(*o, *v);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "add")?;
        let out = self.zip_with(ai, bi, |x, y| x + y);
        self.push("add", Op::Add { a: ai, b: bi }, out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "sub")?;
        let out = self.zip_with(ai, bi, |x, y| x - y);
        self.push("sub", Op::Sub { a: ai, b: bi }, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "mul")?;
        let out = self.zip_with(ai, bi, |x, y| x * y);
        self.push("mul", Op::Mul { a: ai, b: bi }, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let mut out = self.nodes[ai].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push("scale", Op::Scale { a: ai, c }, out)
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        if k.shape() != self.nodes[ai].value.shape() {
            return Err(shape_err("mul_const", self.nodes[ai].value.numel(), k.numel()));
        }
        let mut out = self.nodes[ai].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
            *o *= v;
        }
        self.push("mul_const", Op::MulConst { a: ai, k }, out)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Result<Var, DiffError> {
        let xi = self.idx(x)?;
        let mut out = self.nodes[xi].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
        self.push("act", Op::Act { x: xi, kind }, out)
    }

    /// Tangent of `kind(pre)` along `dot`: `dot ⊙ kind'(pre)`.
    pub fn act_tangent(&mut self, pre: Var, dot: Var, kind: Activation) -> Result<Var, DiffError> {
        let (pi, di) = (self.idx(pre)?, self.idx(dot)?);
        self.same_shape(pi, di, "act_tangent")?;
        let out = self.zip_with(di, pi, |d, p| d * kind.derivative(p));
        self.push("act_tangent", Op::ActTangent { pre: pi, dot: di, kind }, out)
    }

    /// 2-D convolution of `x[C,H,W]` with `w[O,C,K,K]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (c, h, wd) = rank3(&self.nodes[xi].value, "conv2d")?;
        let ws = self.nodes[wi].value.shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(shape_err("conv2d", c, ws.get(1).copied().unwrap_or(0)));
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d", k, h + 2 * pad));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.nodes[xi].value.data(), &geom);
        let hw = geom.ho * geom.wo;
        let ckk = c * k * k;
        let mut out = Tensor::zeros(&[o, geom.ho, geom.wo]);
        gemm(o, ckk, hw, self.nodes[wi].value.data(), ckk, 1, &cols, hw, 1, 0.0, out.data_mut(), hw);
        self.push("conv2d", Op::Conv2d { x: xi, w: wi, geom, cols }, out)
    }

    /// Adds `b[C]` to every channel plane of `x[C,H,W]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (c, h, w) = rank3(&self.nodes[xi].value, "add_channel")?;
        let bv = self.nodes[bi].value.data();
        if bv.len() != c {
            return Err(shape_err("add_channel", c, bv.len()));
        }
        let mut out = self.nodes[xi].value.clone();
        for (plane, b) in out.data_mut().chunks_mut(h * w).zip(bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push("add_channel", Op::AddChannel { x: xi, b: bi }, out)
    }

    /// Applies a [`SparseMap`] to `src` viewed as `[C, P]` (any rank ≥ 2,
    /// trailing dims flattened). Output is `[N, C]`.
    pub fn gather(&mut self, src: Var, map: SparseMap) -> Result<Var, DiffError> {
        let si = self.idx(src)?;
        let s = &self.nodes[si].value;
        if s.shape().len() < 2 {
            return Err(shape_err("gather", 2, s.shape().len()));
        }
        let c = s.shape()[0];
        let p = s.numel() / c.max(1);
        let n = map.rows();
        let mut out = Tensor::zeros(&[n, c]);
        {
            let sd = s.data();
            let od = out.data_mut();
            for i in 0..n {
                for (k, coef) in map.row(i) {
                    if k >= p {
                        return Err(shape_err("gather", p, k));
                    }
                    for ch in 0..c {
                        od[i * c + ch] += coef * sd[ch * p + k];
                    }
                }
            }
        }
        self.push("gather", Op::Gather { src: si, map }, out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (n, p) = rank2(&self.nodes[ai].value, "concat_cols")?;
        let (n2, q) = rank2(&self.nodes[bi].value, "concat_cols")?;
        if n != n2 {
            return Err(shape_err("concat_cols", n, n2));
        }
        let mut out = Tensor::zeros(&[n, p + q]);
        {
            let (ad, bd) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
            let od = out.data_mut();
            for i in 0..n {
                od[i * (p + q)..i * (p + q) + p].copy_from_slice(&ad[i * p..(i + 1) * p]);
                od[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&bd[i * q..(i + 1) * q]);
            }
        }
        self.push("concat_cols", Op::ConcatCols { a: ai, b: bi }, out)
    }

    /// Column `j` of `a[n×m]` as `[n×1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let (n, m) = rank2(&self.nodes[ai].value, "column")?;
        if j >= m {
            return Err(shape_err("column", m, j));
        }
        let ad = self.nodes[ai].value.data();
        let data = (0..n).map(|i| ad[i * m + j]).collect();
        let out = Tensor::new(&[n, 1], data)?;
        self.push("column", Op::Column { a: ai, j }, out)
    }

    /// Scales row `i` of `a[n×m]` by `col[i]`.
    pub fn mul_col(&mut self, col: Var, a: Var) -> Result<Var, DiffError> {
        let (ci, ai) = (self.idx(col)?, self.idx(a)?);
        let (n, m) = rank2(&self.nodes[ai].value, "mul_col")?;
        let cd = self.nodes[ci].value.data();
        if cd.len() != n {
            return Err(shape_err("mul_col", n, cd.len()));
        }
        let mut out = self.nodes[ai].value.clone();
        for (row, c) in out.data_mut().chunks_mut(m).zip(cd) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        self.push("mul_col", Op::MulCol { col: ci, a: ai }, out)
    }

    /// Subtracts `row[m]` from every row of `a[n×m]`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ai, ri) = (self.idx(a)?, self.idx(row)?);
        let (_, m) = rank2(&self.nodes[ai].value, "sub_row")?;
        let rd = self.nodes[ri].value.data();
        if rd.len() != m {
            return Err(shape_err("sub_row", m, rd.len()));
        }
        let mut out = self.nodes[ai].value.clone();
        for r in out.data_mut().chunks_mut(m) {
            for (o, v) in r.iter_mut().zip(rd) {
                *o -= v;
            }
        }
        self.push("sub_row", Op::SubRow { a: ai, row: ri }, out)
    }

    /// Row-wise squared norms of `a[n×m]` as `[n×1]`.
    pub fn row_sum_sq(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let (n, m) = rank2(&self.nodes[ai].value, "row_sum_sq")?;
        let data = self.nodes[ai]
            .value
            .data()
            .chunks(m.max(1))
            .take(n)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let out = Tensor::new(&[n, 1], data)?;
        self.push("row_sum_sq", Op::RowSumSq { a: ai }, out)
    }

    /// Elementwise square root; inputs must be non-negative. The derivative
    /// at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let mut out = self.nodes[ai].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                return Err(DiffError::NonFinite { op: "sqrt" });
            }
            *v = libm::sqrt(*v);
        }
        self.push("sqrt", Op::Sqrt { a: ai }, out)
    }

    /// Elementwise `|a|`; the derivative at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let mut out = self.nodes[ai].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.abs());
        self.push("abs", Op::Abs { a: ai }, out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let t = &self.nodes[ai].value;
        if t.numel() == 0 {
            return Err(DiffError::Structural("mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Op::Mean { a: ai }, Tensor::scalar(m))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let s = self.nodes[ai].value.data().iter().sum::<f64>();
        self.push("sum", Op::Sum { a: ai }, Tensor::scalar(s))
    }

    /// Channel means of `x[C,H,W]` as `[1×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, DiffError> {
        let xi = self.idx(x)?;
        let (c, h, w) = rank3(&self.nodes[xi].value, "global_avg_pool")?;
        let data = self.nodes[xi]
            .value
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let out = Tensor::new(&[1, c], data)?;
        self.push("global_avg_pool", Op::GlobalAvgPool { x: xi }, out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape { a: ai }, out)
    }

    /// Adds `b[m]` to the first `n` rows of `x` only.
    pub fn add_row_head(&mut self, x: Var, b: Var, n: usize) -> Result<Var, DiffError> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (r, m) = rank2(&self.nodes[xi].value, "add_row_head")?;
        let bv = self.nodes[bi].value.data();
        if bv.len() != m {
            return Err(shape_err("add_row_head", m, bv.len()));
        }
        if n > r {
            return Err(shape_err("add_row_head", r, n));
        }
        let mut out = self.nodes[xi].value.clone();
        for row in out.data_mut().chunks_mut(m).take(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push("add_row_head", Op::AddRowHead { x: xi, b: bi, n }, out)
    }

    /// Activation of a stacked dual value: the first `n` rows are primal
    /// pre-activations, every following block of `n` rows is a tangent and
    /// is multiplied by the activation slope at the matching primal row.
    pub fn dual_act(&mut self, x: Var, n: usize, kind: Activation) -> Result<Var, DiffError> {
        let xi = self.idx(x)?;
        let (r, m) = rank2(&self.nodes[xi].value, "dual_act")?;
        if n == 0 || r % n != 0 {
            return Err(shape_err("dual_act", n, r));
        }
        let mut out = self.nodes[xi].value.clone();
        {
            let xv = self.nodes[xi].value.data();
            let od = out.data_mut();
            let head = n * m;
            for i in 0..head {
                od[i] = kind.apply(xv[i]);
            }
            for blk in 1..r / n {
                for i in 0..head {
                    od[blk * head + i] *= kind.derivative(xv[i]);
                }
            }
        }
        self.push("dual_act", Op::DualAct { x: xi, n, kind }, out)
    }

    /// Rows `start..start+len` of `a[r×m]`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ai = self.idx(a)?;
        let (r, m) = rank2(&self.nodes[ai].value, "rows")?;
        if start + len > r {
            return Err(shape_err("rows", r, start + len));
        }
        let data = self.nodes[ai].value.data()[start * m..(start + len) * m].to_vec();
        let out = Tensor::new(&[len, m], data)?;
        self.push("rows", Op::Rows { a: ai, start }, out)
    }

    /// Vertical concatenation of rank-2 values with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let mut idx = Vec::with_capacity(parts.len());
        let mut width = None;
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let i = self.idx(p)?;
            let (r, m) = rank2(&self.nodes[i].value, "concat_rows")?;
            if *width.get_or_insert(m) != m {
                return Err(shape_err("concat_rows", width.unwrap_or(0), m));
            }
            total += r;
            data.extend_from_slice(self.nodes[i].value.data());
            idx.push(i);
        }
        let out = Tensor::new(&[total, width.unwrap_or(0)], data)?;
        self.push("concat_rows", Op::ConcatRows { parts: idx }, out)
    }

    /// Reverse sweep from the scalar `loss`. Returns adjoints of parameter
    /// leaves as `(id, gradient)` pairs in node order.
    pub(crate) fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>, DiffError> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(DiffError::Structural("loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(li + 1);
        grads.resize_with(li + 1, || None);
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        let mut out = Vec::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { id } => out.push((*id, g.clone())),
                Op::MatMulT { x, w } => {
                    let (n, k) = (self.nodes[*x].value.shape()[0], self.nodes[*x].value.shape()[1]);
                    let m = self.nodes[*w].value.shape()[0];
                    let wv = self.nodes[*w].value.data();
                    let xv = self.nodes[*x].value.data();
                    let dx = acc(&mut grads, *x, self.nodes[*x].value.shape());
                    gemm(n, m, k, gd, m, 1, wv, k, 1, 1.0, dx, k);
                    let dw = acc(&mut grads, *w, self.nodes[*w].value.shape());
                    gemm(m, n, k, gd, 1, m, xv, k, 1, 1.0, dw, k);
                }
                Op::AddRow { x, b } => {
                    let m = self.nodes[*b].value.numel();
                    add_into(acc(&mut grads, *x, node.value.shape()), gd);
                    let db = acc(&mut grads, *b, self.nodes[*b].value.shape());
                    for row in gd.chunks(m) {
                        add_into(db, row);
                    }
                }
                Op::Add { a, b } => {
                    add_into(acc(&mut grads, *a, node.value.shape()), gd);
                    add_into(acc(&mut grads, *b, node.value.shape()), gd);
                }
                Op::Sub { a, b } => {
                    add_into(acc(&mut grads, *a, node.value.shape()), gd);
                    let db = acc(&mut grads, *b, node.value.shape());
                    for (d, v) in db.iter_mut().zip(gd) {
                        *d -= v;
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let da = acc(&mut grads, *a, node.value.shape());
                    for ((d, v), bb) in da.iter_mut().zip(gd).zip(bv) {
                        *d += v * bb;
                    }
                    let db = acc(&mut grads, *b, node.value.shape());
                    for ((d, v), aa) in db.iter_mut().zip(gd).zip(av) {
                        *d += v * aa;
                    }
                }
                Op::Scale { a, c } => {
                    let da = acc(&mut grads, *a, node.value.shape());
                    for (d, v) in da.iter_mut().zip(gd) {
                        *d += c * v;
                    }
                }
                Op::MulConst { a, k } => {
                    let da = acc(&mut grads, *a, node.value.shape());
                    for ((d, v), kk) in da.iter_mut().zip(gd).zip(k.data()) {
                        *d += v * kk;
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.nodes[*x].value.data();
                    let dx = acc(&mut grads, *x, node.value.shape());
                    for ((d, v), xx) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += v * kind.derivative(*xx);
                    }
                }
                Op::ActTangent { pre, dot, kind } => {
                    let (pv, dv) = (self.nodes[*pre].value.data(), self.nodes[*dot].value.data());
                    let dd = acc(&mut grads, *dot, node.value.shape());
                    for ((d, v), p) in dd.iter_mut().zip(gd).zip(pv) {
                        *d += v * kind.derivative(*p);
                    }
                    if matches!(kind, Activation::Tanh) {
                        let dp = acc(&mut grads, *pre, node.value.shape());
                        for (((d, v), p), t) in dp.iter_mut().zip(gd).zip(pv).zip(dv) {
                            *d += v * t * kind.second_derivative(*p);
                        }
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let hw = geom.ho * geom.wo;
                    let ckk = geom.c * geom.k * geom.k;
                    let wv = self.nodes[*w].value.data();
                    let dw = acc(&mut grads, *w, self.nodes[*w].value.shape());
                    gemm(geom.o, hw, ckk, gd, hw, 1, cols, 1, hw, 1.0, dw, ckk);
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, geom.o, hw, wv, 1, ckk, gd, hw, 1, 0.0, &mut dcols, hw);
                    let dx = acc(&mut grads, *x, self.nodes[*x].value.shape());
                    col2im_add(&dcols, geom, dx);
                }
                Op::AddChannel { x, b } => {
                    add_into(acc(&mut grads, *x, node.value.shape()), gd);
                    let c = self.nodes[*b].value.numel();
                    let plane = gd.len() / c.max(1);
                    let db = acc(&mut grads, *b, self.nodes[*b].value.shape());
                    for (d, p) in db.iter_mut().zip(gd.chunks(plane)) {
                        *d += p.iter().sum::<f64>();
                    }
                }
                Op::Gather { src, map } => {
                    let s = &self.nodes[*src].value;
                    let c = s.shape()[0];
                    let p = s.numel() / c.max(1);
                    let ds = acc(&mut grads, *src, s.shape());
                    for r in 0..map.rows() {
                        for (k, coef) in map.row(r) {
                            for ch in 0..c {
                                ds[ch * p + k] += coef * gd[r * c + ch];
                            }
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let p = self.nodes[*a].value.shape()[1];
                    let q = self.nodes[*b].value.shape()[1];
                    let n = node.value.shape()[0];
                    {
                        let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                        for r in 0..n {
                            add_into(&mut da[r * p..(r + 1) * p], &gd[r * (p + q)..r * (p + q) + p]);
                        }
                    }
                    let db = acc(&mut grads, *b, self.nodes[*b].value.shape());
                    for r in 0..n {
                        add_into(&mut db[r * q..(r + 1) * q], &gd[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                }
                Op::Column { a, j } => {
                    let m = self.nodes[*a].value.shape()[1];
                    let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    for (r, v) in gd.iter().enumerate() {
                        da[r * m + j] += v;
                    }
                }
                Op::MulCol { col, a } => {
                    let m = node.value.shape()[1];
                    let (cv, av) = (self.nodes[*col].value.data(), self.nodes[*a].value.data());
                    {
                        let dc = acc(&mut grads, *col, self.nodes[*col].value.shape());
                        for (r, d) in dc.iter_mut().enumerate() {
                            for j in 0..m {
                                *d += gd[r * m + j] * av[r * m + j];
                            }
                        }
                    }
                    let da = acc(&mut grads, *a, node.value.shape());
                    for (r, c) in cv.iter().enumerate() {
                        for j in 0..m {
                            da[r * m + j] += gd[r * m + j] * c;
                        }
                    }
                }
                Op::SubRow { a, row } => {
                    let m = self.nodes[*row].value.numel();
                    add_into(acc(&mut grads, *a, node.value.shape()), gd);
                    let dr = acc(&mut grads, *row, self.nodes[*row].value.shape());
                    for r in gd.chunks(m) {
                        for (d, v) in dr.iter_mut().zip(r) {
                            *d -= v;
                        }
                    }
                }
                Op::RowSumSq { a } => {
                    let m = self.nodes[*a].value.shape()[1];
                    let av = self.nodes[*a].value.data();
                    let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    for (r, v) in gd.iter().enumerate() {
                        for j in 0..m {
                            da[r * m + j] += 2.0 * v * av[r * m + j];
                        }
                    }
                }
                Op::Sqrt { a } => {
                    let sv = node.value.data();
                    let da = acc(&mut grads, *a, node.value.shape());
                    for ((d, v), s) in da.iter_mut().zip(gd).zip(sv) {
                        if *s > 0.0 {
                            *d += v * 0.5 / s;
                        }
                    }
                }
                Op::Abs { a } => {
                    let av = self.nodes[*a].value.data();
                    let da = acc(&mut grads, *a, node.value.shape());
                    for ((d, v), x) in da.iter_mut().zip(gd).zip(av) {
                        if *x > 0.0 {
                            *d += v;
                        } else if *x < 0.0 {
                            *d -= v;
                        }
                    }
                }
                Op::Mean { a } => {
                    let n = self.nodes[*a].value.numel() as f64;
                    let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    da.iter_mut().for_each(|d| *d += gd[0] / n);
                }
                Op::Sum { a } => {
                    let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    da.iter_mut().for_each(|d| *d += gd[0]);
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.nodes[*x].value.shape();
                    let plane = s[1] * s[2];
                    let dx = acc(&mut grads, *x, s);
                    for (p, v) in dx.chunks_mut(plane).zip(gd) {
                        p.iter_mut().for_each(|d| *d += v / plane as f64);
                    }
                }
                Op::AddRowHead { x, b, n } => {
                    let m = self.nodes[*b].value.numel();
                    add_into(acc(&mut grads, *x, node.value.shape()), gd);
                    let db = acc(&mut grads, *b, self.nodes[*b].value.shape());
                    for row in gd.chunks(m).take(*n) {
                        add_into(db, row);
                    }
                }
                Op::DualAct { x, n, kind } => {
                    let xv = self.nodes[*x].value.data();
                    let m = node.value.shape()[1];
                    let head = n * m;
                    let blocks = node.value.shape()[0] / n;
                    let dx = acc(&mut grads, *x, node.value.shape());
                    for i in 0..head {
                        let p = xv[i];
                        let d1 = kind.derivative(p);
                        let mut dp = gd[i] * d1;
                        let d2 = kind.second_derivative(p);
                        for blk in 1..blocks {
                            let j = blk * head + i;
                            dx[j] += gd[j] * d1;
                            if d2 != 0.0 {
                                dp += gd[j] * xv[j] * d2;
                            }
                        }
                        dx[i] += dp;
                    }
                }
                Op::Rows { a, start } => {
                    let m = node.value.shape()[1];
                    let da = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    add_into(&mut da[start * m..start * m + gd.len()], gd);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        add_into(acc(&mut grads, p, self.nodes[p].value.shape()), &gd[off..off + len]);
                        off += len;
                    }
                }
                Op::Reshape { a } => {
                    add_into(acc(&mut grads, *a, self.nodes[*a].value.shape()), gd);
                }
            }
        }
        for (_, g) in &out {
            if !g.is_finite() {
                return Err(DiffError::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
