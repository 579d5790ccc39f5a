//! Tape-based reverse-mode differentiation over `f64` matrices.
//!
//! Every value is a 2-D array: sequences are `T × C`, waveforms `n × 1`,
//! scalars `1 × 1`. A [`Graph`] borrows the parameter store, records each
//! operation once, and [`Graph::backward`] returns gradients for every
//! parameter that was read.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Marks an absent source in an index map.
const NONE: u32 = u32::MAX;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    /// Standardize each row; saves the per-row inverse deviation.
    NormRows(Var, Vec<f64>),
    /// Standardize each column over rows.
    NormCols(Var, Vec<f64>),
    /// Standardize over every element.
    NormAll(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// `out.flat[i] = x.flat[map[i]]`, zero where `map[i] == NONE`.
    Gather(Var, Vec<u32>),
    /// `out.flat[map[i]] += x.flat[i]`, skipping `NONE`.
    Scatter(Var, Vec<u32>),
    DepthwiseConv(Var, Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name).and_then(|v| self.of(*v))
    }

    /// Parameter gradients by name; parameters read but not reached by the
    /// loss get zeros.
    pub fn into_params(mut self, store: &ParamStore) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = self.nodes[v.0].take().unwrap_or_else(|| {
                let p = store.get(name).expect("graph parameter exists in store");
                Mat::zeros(p.raw_dim())
            });
            out.insert(name.clone(), g);
        }
        out
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

/// Sums `g` down to `target` shape (undoing broadcast of a row, column or
/// scalar).
fn reduce_to(g: Mat, target: (usize, usize)) -> Mat {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

fn zip_bcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let bv = b.broadcast(a.raw_dim()).expect("checked broadcast");
    let mut out = a.clone();
    Zip::from(&mut out).and(&bv).for_each(|x, &y| *x = f(*x, y));
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// A constant input (no gradient flows to anything outside the graph).
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter '{name}'")))?
            .clone();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    fn check_bcast(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcastable(sa, sb), "{what}: cannot broadcast {sb:?} onto {sa:?}");
    }

    /// `a + b`, with `b` broadcast from a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b, "add");
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b, "sub");
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b, "mul");
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_bcast(a, b, "div");
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        self.push(out, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
        }
        self.push(out, Op::NormRows(a, inv))
    }

    /// Column standardization (batch statistics). Returns the normalized
    /// node together with the column means and biased variances.
    pub fn norm_cols(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.ncols());
        let mut means = Vec::with_capacity(x.ncols());
        let mut vars = Vec::with_capacity(x.ncols());
        for mut col in out.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
            means.push(mean);
            vars.push(var);
        }
        (self.push(out, Op::NormCols(a, inv)), means, vars)
    }

    pub fn norm_all(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        let out = x.mapv(|v| (v - mean) * is);
        self.push(out, Op::NormAll(a, is))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Column sums as a `1 × C` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of the output is row `idx[i]` of `a` (embedding lookup,
    /// length regulation).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((idx.len(), x.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&x.row(j));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Generic element gather into a `rows × cols` output.
    pub fn gather(&mut self, a: Var, map: Vec<u32>, rows: usize, cols: usize) -> Var {
        assert_eq!(map.len(), rows * cols);
        let x = self.value(a).as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let data: Vec<f64> = map
            .iter()
            .map(|&i| if i == NONE { 0.0 } else { src[i as usize] })
            .collect();
        let out = Mat::from_shape_vec((rows, cols), data).expect("shape matches map");
        self.push(out, Op::Gather(a, map))
    }

    /// Generic scatter-add of every element of `a` into a `rows × cols`
    /// output.
    pub fn scatter(&mut self, a: Var, map: Vec<u32>, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(map.len(), x.len());
        let mut data = vec![0.0; rows * cols];
        for (v, &i) in x.iter().zip(&map) {
            if i != NONE {
                data[i as usize] += v;
            }
        }
        let out = Mat::from_shape_vec((rows, cols), data).expect("shape matches");
        self.push(out, Op::Scatter(a, map))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape size");
        self.gather(a, (0..n as u32).collect(), rows, cols)
    }

    /// Same-padded 1-D convolution unfolding of a `T × C` sequence made of
    /// independent `segments` (lengths summing to `T`): output row `t` holds
    /// the `kernel` taps around `t`, spaced by `dilation`, tap-major.
    pub fn im2col1d(&mut self, a: Var, segments: &[usize], kernel: usize, dilation: usize) -> Var {
        let (t_total, c) = self.shape(a);
        assert_eq!(segments.iter().sum::<usize>(), t_total, "segments cover the sequence");
        let half = (kernel / 2) as isize;
        let mut map = Vec::with_capacity(t_total * kernel * c);
        let mut base = 0usize;
        for &len in segments {
            for t in 0..len as isize {
                for j in 0..kernel as isize {
                    let src = t + (j - half) * dilation as isize;
                    for ch in 0..c {
                        if src >= 0 && src < len as isize {
                            map.push(((base + src as usize) * c + ch) as u32);
                        } else {
                            map.push(NONE);
                        }
                    }
                }
            }
            base += len;
        }
        self.gather(a, map, t_total, kernel * c)
    }

    /// Frames of an `n × 1` signal: row `f` holds samples
    /// `f·hop .. f·hop + len`, zero beyond the end.
    pub fn frames(&mut self, a: Var, len: usize, hop: usize, n_frames: usize) -> Var {
        let n = self.value(a).len();
        let mut map = Vec::with_capacity(n_frames * len);
        for f in 0..n_frames {
            for j in 0..len {
                let i = f * hop + j;
                map.push(if i < n { i as u32 } else { NONE });
            }
        }
        self.gather(a, map, n_frames, len)
    }

    /// Overlap-add of `F × len` frames at `hop` into an `out_len × 1` signal
    /// (samples past `out_len` are dropped).
    pub fn overlap_add(&mut self, a: Var, hop: usize, out_len: usize) -> Var {
        let (f, len) = self.shape(a);
        let mut map = Vec::with_capacity(f * len);
        for fi in 0..f {
            for j in 0..len {
                let i = fi * hop + j;
                map.push(if i < out_len { i as u32 } else { NONE });
            }
        }
        self.scatter(a, map, out_len, 1)
    }

    /// 3×3, stride-2, pad-1 unfolding of a `(H·W) × C` feature map stored
    /// row-major over `(h, w)`. Output rows are `(h', w')` of the
    /// `ceil(H/2) × ceil(W/2)` grid, columns `(kh, kw, c)`.
    pub fn im2col2d_s2(&mut self, a: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let c = self.shape(a).1;
        assert_eq!(self.shape(a).0, h * w);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut map = Vec::with_capacity(ho * wo * 9 * c);
        for i in 0..ho as isize {
            for j in 0..wo as isize {
                for kh in -1..=1isize {
                    for kw in -1..=1isize {
                        let (y, x) = (2 * i + kh, 2 * j + kw);
                        for ch in 0..c {
                            if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                map.push(((y as usize * w + x as usize) * c + ch) as u32);
                            } else {
                                map.push(NONE);
                            }
                        }
                    }
                }
            }
        }
        (self.gather(a, map, ho * wo, 9 * c), ho, wo)
    }

    /// Per-channel dilated convolution of `x: T × C` with taps `w: k × C`,
    /// zero-padded to keep `T`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ncols(), wv.ncols());
        let (t, k) = (xv.nrows() as isize, wv.nrows() as isize);
        let half = k / 2;
        let mut out = Mat::zeros(xv.raw_dim());
        for j in 0..k {
            let off = (j - half) * dilation as isize;
            let lo = (-off).max(0);
            let hi = (t - off).min(t);
            if lo >= hi {
                continue;
            }
            let src = xv.slice(s![lo + off..hi + off, ..]);
            let wrow = wv.row(j as usize);
            let mut dst = out.slice_mut(s![lo..hi, ..]);
            Zip::from(dst.rows_mut()).and(src.rows()).for_each(|mut d, s| {
                Zip::from(&mut d).and(&s).and(&wrow).for_each(|d, &s, &w| *d += s * w);
            });
        }
        self.push(out, Op::DepthwiseConv(x, w, dilation))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self.param_vars.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: &Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(a, g.dot(&val(b).t()));
                acc(b, val(a).t().dot(g));
            }
            Op::Transpose(a) => acc(a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, reduce_to(g.clone(), shape(val(b))));
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, reduce_to(-g, shape(val(b))));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, zip_bcast(g, vb, |x, y| x * y));
                acc(b, reduce_to(g * va, shape(vb)));
            }
            Op::Div(a, b) => {
                let vb = val(b);
                acc(a, zip_bcast(g, vb, |x, y| x / y));
                // d(a/b)/db = -a/b² = -out/b
                let q = zip_bcast(&node.value, vb, |o, y| -o / y);
                acc(b, reduce_to(g * &q, shape(vb)));
            }
            Op::Scale(a, c) => acc(a, g * *c),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(a, d);
            }
            Op::Tanh(a) => acc(a, g * &node.value.mapv(|y| 1.0 - y * y)),
            Op::Sigmoid(a) => acc(a, g * &node.value.mapv(|y| y * (1.0 - y))),
            Op::Exp(a) => acc(a, g * &node.value),
            Op::Ln(a) => acc(a, g / val(a)),
            Op::Abs(a) => acc(a, g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })),
            Op::Square(a) => acc(a, g * &val(a).mapv(|x| 2.0 * x)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * s);
                }
                acc(a, d);
            }
            Op::NormRows(a, inv) => {
                let y = &node.value;
                let mut d = g.clone();
                let n = y.ncols() as f64;
                for ((mut drow, yrow), &is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv) {
                    let mg = drow.sum() / n;
                    let mgy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = is * (*dv - mg - yv * mgy));
                }
                acc(a, d);
            }
            Op::NormCols(a, inv) => {
                let y = &node.value;
                let mut d = g.clone();
                let n = y.nrows() as f64;
                for ((mut dcol, ycol), &is) in d.columns_mut().into_iter().zip(y.columns()).zip(inv) {
                    let mg = dcol.sum() / n;
                    let mgy = dcol.iter().zip(ycol.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut dcol).and(&ycol).for_each(|dv, &yv| *dv = is * (*dv - mg - yv * mgy));
                }
                acc(a, d);
            }
            Op::NormAll(a, is) => {
                let y = &node.value;
                let n = y.len() as f64;
                let mg = g.sum() / n;
                let mgy = (g * y).sum() / n;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|dv, &yv| *dv = is * (*dv - mg - yv * mgy));
                acc(a, d);
            }
            Op::SumAll(a) => acc(a, Mat::from_elem(val(a).raw_dim(), g[[0, 0]])),
            Op::MeanAll(a) => {
                let n = val(a).len() as f64;
                acc(a, Mat::from_elem(val(a).raw_dim(), g[[0, 0]] / n));
            }
            Op::SumRows(a) => {
                let d = g.broadcast(val(a).raw_dim()).expect("row broadcast").to_owned();
                acc(a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(val(a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(val(a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(p).nrows();
                    acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(val(a).raw_dim());
                for (r, &j) in idx.iter().enumerate() {
                    let mut row = d.row_mut(j);
                    row += &g.row(r);
                }
                acc(a, d);
            }
            Op::Gather(a, map) => {
                let x = val(a);
                let mut data = vec![0.0; x.len()];
                for (gv, &m) in g.iter().zip(map) {
                    if m != NONE {
                        data[m as usize] += gv;
                    }
                }
                acc(a, Mat::from_shape_vec(x.raw_dim(), data).expect("shape"));
            }
            Op::Scatter(a, map) => {
                let x = val(a);
                let src = g.as_standard_layout();
                let src = src.as_slice().expect("standard layout");
                let data: Vec<f64> = map
                    .iter()
                    .map(|&m| if m == NONE { 0.0 } else { src[m as usize] })
                    .collect();
                acc(a, Mat::from_shape_vec(x.raw_dim(), data).expect("shape"));
            }
            Op::DepthwiseConv(x, w, dilation) => {
                let (xv, wv) = (val(x), val(w));
                let (t, k) = (xv.nrows() as isize, wv.nrows() as isize);
                let half = k / 2;
                let mut dx = Mat::zeros(xv.raw_dim());
                let mut dw = Mat::zeros(wv.raw_dim());
                for j in 0..k {
                    let off = (j - half) * *dilation as isize;
                    let lo = (-off).max(0);
                    let hi = (t - off).min(t);
                    if lo >= hi {
                        continue;
                    }
                    let gs = g.slice(s![lo..hi, ..]);
                    let xs = xv.slice(s![lo + off..hi + off, ..]);
                    let wrow = wv.row(j as usize);
                    {
                        let mut dxs = dx.slice_mut(s![lo + off..hi + off, ..]);
                        Zip::from(dxs.rows_mut()).and(gs.rows()).for_each(|mut d, g| {
                            Zip::from(&mut d).and(&g).and(&wrow).for_each(|d, &g, &w| *d += g * w);
                        });
                    }
                    let prod = (&gs * &xs).sum_axis(Axis(0));
                    let mut dwr = dw.row_mut(j as usize);
                    dwr += &prod;
                }
                acc(x, dx);
                acc(w, dw);
            }
        }
    }
}
