//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns gradients for the non-frozen
//! parameters that were read through [`Tape::param`].

use std::collections::HashMap;

use super::matrix::{gemm, Mat, MatRef, Strides};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Mat),
    Param(MatRef<'p>),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    SelectRows {
        a: Var,
        idx: Vec<usize>,
    },
    Windows {
        a: Var,
        kernel: usize,
        stride: usize,
    },
    Pick {
        a: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "embedding",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::Windows { .. } => "conv_windows",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Computation record over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<usize, Var>,
    track: bool,
}

impl<'p> Tape<'p> {
    /// A tape that records gradients for non-frozen parameters.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track: true,
        }
    }

    /// A tape used for pure evaluation; nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> MatRef<'_> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(r) => *r,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.rows, m.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .position(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if let Some(&v) = self.param_nodes.get(&idx) {
            return Ok(v);
        }
        let t = self.params.by_index(idx);
        self.nodes.push(Node {
            value: Value::Param(t.view()),
            op: Op::Param(idx),
            requires_grad: self.track && !t.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(idx, v);
        Ok(v)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = if ta {
            (av.cols, av.rows)
        } else {
            (av.rows, av.cols)
        };
        let (k2, n) = if tb {
            (bv.cols, bv.rows)
        } else {
            (bv.rows, bv.cols)
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut out = Mat::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            av.data,
            Strides::of(av.cols, ta),
            bv.data,
            Strides::of(bv.cols, tb),
            0.0,
            &mut out.data,
            Strides::of(n, false),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, true)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            (av.rows, av.cols),
            (bv.rows, bv.cols),
            "elementwise shape mismatch"
        );
        let data = av
            .data
            .iter()
            .zip(bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Mat::from_vec(av.rows, av.cols, data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Mat {
        let av = self.value(a);
        Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows * rv.cols, av.cols, "broadcast row width mismatch");
        let mut out = av.to_owned();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `log σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, log_sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).data;
        let b = self.value(beta).data;
        let (n, c) = (xv.rows, xv.cols);
        assert!(g.len() == c && b.len() == c, "layer norm width mismatch");
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.data[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "embedding id {id} out of range {}", tv.rows);
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows, "row slice out of range");
        let out = Mat::from_vec(
            len,
            v.cols,
            v.data[start * v.cols..(start + len) * v.cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(out, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "column slice out of range");
        let mut out = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r)
                .copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        let mut out = Mat::zeros(idx.len(), v.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(v.row(r));
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Strided window unfolding: output row `j` concatenates input rows
    /// `j*stride .. j*stride + kernel`. A 1-D convolution is this followed by
    /// an affine map.
    pub fn windows(&mut self, a: Var, kernel: usize, stride: usize) -> Var {
        let v = self.value(a);
        assert!(
            kernel >= 1 && stride >= 1 && v.rows >= kernel,
            "bad window geometry"
        );
        let out_rows = (v.rows - kernel) / stride + 1;
        let c = v.cols;
        let mut out = Mat::zeros(out_rows, kernel * c);
        for j in 0..out_rows {
            for w in 0..kernel {
                out.data[j * kernel * c + w * c..j * kernel * c + (w + 1) * c]
                    .copy_from_slice(v.row(j * stride + w));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Windows { a, kernel, stride }, rg)
    }

    /// Column vector of `a[r][c]` for each `(r, c)`.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let v = self.value(a);
        let data = idx.iter().map(|&(r, c)| v.data[r * v.cols + c]).collect();
        let rg = self.rg(a);
        self.push(
            Mat::from_vec(idx.len(), 1, data),
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.data.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::Mean(a), rg)
    }

    /// Affine map `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    fn non_finite_culprit(&self) -> String {
        if let Some(name) = self.params.first_non_finite() {
            return name.to_string();
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let finite = match &n.value {
                Value::Owned(m) => m.is_finite(),
                Value::Param(r) => r.data.iter().all(|x| x.is_finite()),
            };
            if !finite {
                return match n.op {
                    Op::Param(idx) => self.params.by_index(idx).name.clone(),
                    ref op => format!("{}#{i}", op.label()),
                };
            }
        }
        "loss".to_string()
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter read.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward needs a scalar loss");
        if !lv.data[0].is_finite() {
            return Err(Error::NumericFailure {
                tensor: self.non_finite_culprit(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, i, &g, &mut grads);
            if let Op::Param(idx) = node.op {
                out.0.insert(self.params.by_index(idx).name.clone(), g);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'p>, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let me = Var(i);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = if ta {
                    (av.cols, av.rows)
                } else {
                    (av.rows, av.cols)
                };
                let n = if tb { bv.rows } else { bv.cols };
                let sa = Strides::of(av.cols, ta);
                let sb = Strides::of(bv.cols, tb);
                let sg = Strides::of(n, false);
                if self.rg(a) {
                    let da = self.slot(grads, a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        sg,
                        bv.data,
                        sb.swap(),
                        1.0,
                        da,
                        Strides::of(av.cols, ta),
                    );
                }
                if self.rg(b) {
                    let db = self.slot(grads, b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        av.data,
                        sa.swap(),
                        g,
                        sg,
                        1.0,
                        db,
                        Strides::of(bv.cols, tb),
                    );
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        axpy(self.slot(grads, v), g, 1.0);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.rg(a) {
                    axpy(self.slot(grads, a), g, 1.0);
                }
                if self.rg(row) {
                    let c = self.value(a).cols;
                    let dr = self.slot(grads, row);
                    for chunk in g.chunks(c) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.value(b).data;
                    let da = self.slot(grads, a);
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.rg(b) {
                    let av = self.value(a).data;
                    let db = self.slot(grads, b);
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.rg(a) {
                    axpy(self.slot(grads, a), g, s);
                }
            }
            &Op::Gelu(a) => self.unary_back(
                grads,
                a,
                g,
                |x, _| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    0.5 * (1.0 + th)
                        + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                },
                me,
            ),
            &Op::Tanh(a) => self.unary_back(grads, a, g, |_, y| 1.0 - y * y, me),
            &Op::Sigmoid(a) => self.unary_back(grads, a, g, |_, y| y * (1.0 - y), me),
            &Op::LogSigmoid(a) => self.unary_back(grads, a, g, |x, _| sigmoid(-x), me),
            &Op::Log(a) => self.unary_back(grads, a, g, |x, _| 1.0 / x, me),
            &Op::SoftmaxRows(a) => {
                if self.rg(a) {
                    let y = self.value(me);
                    let c = y.cols;
                    let da = self.slot(grads, a);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                if self.rg(a) {
                    let y = self.value(me);
                    let c = y.cols;
                    let da = self.slot(grads, a);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            da[r * c + j] += gr[j] - yr[j].exp() * gs;
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
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.value(gamma).data.len();
                let n = rstd.len();
                if self.rg(beta) {
                    let db = self.slot(grads, beta);
                    for chunk in g.chunks(c) {
                        axpy(db, chunk, 1.0);
                    }
                }
                if self.rg(gamma) {
                    let dg = self.slot(grads, gamma);
                    for (gc, hc) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gc[j] * hc[j];
                        }
                    }
                }
                if self.rg(x) {
                    let gv = self.value(gamma).data;
                    let dx = self.slot(grads, x);
                    let mut dh = vec![0.0; c];
                    for r in 0..n {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if self.rg(table) {
                    let c = self.value(table).cols;
                    let dt = self.slot(grads, table);
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).data.len();
                    if self.rg(p) {
                        axpy(self.slot(grads, p), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.value(me).cols;
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (rows, cols) = (pv.rows, pv.cols);
                    if self.rg(p) {
                        let dp = self.slot(grads, p);
                        for r in 0..rows {
                            axpy(
                                &mut dp[r * cols..(r + 1) * cols],
                                &g[r * total + off..r * total + off + cols],
                                1.0,
                            );
                        }
                    }
                    off += cols;
                }
            }
            &Op::SliceRows { a, start } => {
                if self.rg(a) {
                    let c = self.value(a).cols;
                    let da = self.slot(grads, a);
                    axpy(&mut da[start * c..start * c + g.len()], g, 1.0);
                }
            }
            &Op::SliceCols { a, start } => {
                if self.rg(a) {
                    let c = self.value(a).cols;
                    let len = self.value(me).cols;
                    let da = self.slot(grads, a);
                    for (r, gr) in g.chunks(len).enumerate() {
                        axpy(&mut da[r * c + start..r * c + start + len], gr, 1.0);
                    }
                }
            }
            Op::SelectRows { a, idx } => {
                let a = *a;
                if self.rg(a) {
                    let c = self.value(a).cols;
                    let da = self.slot(grads, a);
                    for (i, &r) in idx.iter().enumerate() {
                        axpy(&mut da[r * c..(r + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
            &Op::Windows { a, kernel, stride } => {
                if self.rg(a) {
                    let c = self.value(a).cols;
                    let da = self.slot(grads, a);
                    for (j, gr) in g.chunks(kernel * c).enumerate() {
                        for w in 0..kernel {
                            let r = j * stride + w;
                            axpy(&mut da[r * c..(r + 1) * c], &gr[w * c..(w + 1) * c], 1.0);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let a = *a;
                if self.rg(a) {
                    let c = self.value(a).cols;
                    let da = self.slot(grads, a);
                    for (k, &(r, col)) in idx.iter().enumerate() {
                        da[r * c + col] += g[k];
                    }
                }
            }
            &Op::Sum(a) => {
                if self.rg(a) {
                    for d in self.slot(grads, a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if self.rg(a) {
                    let da = self.slot(grads, a);
                    let s = g[0] / da.len().max(1) as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        me: Var,
    ) {
        if !self.rg(a) {
            return;
        }
        let x = self.value(a).data;
        let y = self.value(me).data;
        let da = self.slot(grads, a);
        for k in 0..g.len() {
            da[k] += g[k] * deriv(x[k], y[k]);
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).data.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
