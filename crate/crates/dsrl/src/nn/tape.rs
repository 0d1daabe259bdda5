//! Reverse-mode automatic differentiation over dynamic-dimension f64 arrays.
//!
//! A [`Tape`] records each forward operation as a node holding its value and
//! the indices of its parents. [`Tape::backward`] sweeps the nodes in reverse
//! order, propagating gradients from a scalar root into every reachable leaf.
//! Parameters enter the graph through [`Tape::param`]; the same parameter can
//! appear once as trainable and once as frozen on a single tape, which is how
//! the policy loss evaluates the critics without updating them.
//!
//! All arrays are `f64` and every node value is kept in standard layout, so a
//! fixed sequence of operations is bit-reproducible across runs.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};
use std::collections::HashMap;

use super::store::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

/// Convolution geometry shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddRowVec(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    Softplus(usize),
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    SoftmaxLast(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Min2(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        dims: ConvDims,
        cols: Array2<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots[v.0].as_ref()
    }
}

/// Append-only computation graph for a single forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<(usize, bool), Var>,
    trainable: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            trainable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on node of len {}", a.len());
        a.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant leaf. No gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Insert a parameter leaf. Trainable leaves are tracked so their
    /// gradients can be collected after the backward sweep; frozen leaves act
    /// as constants with the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.param_cache.get(&(id.0, trainable)) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.param_cache.insert((id.0, trainable), v);
        if trainable {
            self.trainable.push((id, v));
        }
        v
    }

    /// Cut the gradient flow: same value, no parents.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    /// Broadcast-add a row vector `[d]` onto every row of `[n, d]`.
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x);
        let vs = self.shape(v);
        assert_eq!(vs.len(), 1, "add_rowvec expects 1-d vector");
        assert_eq!(xs[xs.len() - 1], vs[0], "add_rowvec width mismatch");
        let mut value = self.nodes[x.0].value.clone();
        let width = vs[0];
        let vv = &self.nodes[v.0].value;
        for (i, e) in value.iter_mut().enumerate() {
            *e += vv[i % width];
        }
        self.push(value, Op::AddRowVec(x.0, v.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.as2(a);
        let bv = self.as2(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        self.push(value, Op::Matmul(a.0, b.0))
    }

    /// Batched matrix product `[b, m, k] x [b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.as3(a);
        let bv = self.as3(b);
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dim mismatch");
        let (bs, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), Op::Bmm(a.0, b.0))
    }

    /// Swap the last two axes of a 3-d array.
    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let av = self.as3(a);
        let value = av
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(value, Op::TransposeLast2(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // Branch instead of max() so outputs never carry a negative zero.
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a.0))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / v.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::MeanAll(a.0))
    }

    /// Row-wise sum of a `[n, d]` array, producing `[n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        let n = av.nrows();
        let mut out = Array2::<f64>::zeros((n, 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            out[[i, 0]] = row.sum();
        }
        self.push(out.into_dyn(), Op::SumCols(a.0))
    }

    /// Softmax over the last axis of any array.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let last = src.shape()[src.ndim() - 1];
        let mut value = src.as_standard_layout().to_owned();
        for mut lane in value.rows_mut() {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in lane.iter_mut() {
                *e /= sum;
            }
        }
        debug_assert_eq!(value.shape()[value.ndim() - 1], last);
        self.push(value, Op::SoftmaxLast(a.0))
    }

    /// Concatenate two `[n, *]` arrays along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.as2(a);
        let bv = self.as2(b);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_cols")
            .into_dyn();
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    /// Columns `lo..hi` of a `[n, d]` array.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let av = self.as2(a);
        assert!(lo < hi && hi <= av.ncols(), "slice_cols out of range");
        let value = av
            .slice(ndarray::s![.., lo..hi])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(value, Op::SliceCols(a.0, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        assert_eq!(
            src.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let flat: Vec<f64> = src.as_standard_layout().iter().copied().collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape");
        self.push(value, Op::Reshape(a.0))
    }

    /// Element-wise minimum; ties route their gradient to `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min2 shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = av.clone();
        for (e, &bx) in value.iter_mut().zip(bv.iter()) {
            if bx < *e {
                *e = bx;
            }
        }
        self.push(value, Op::Min2(a.0, b.0))
    }

    /// 2-d convolution of `[b, c_in, h, w]` with kernels `[c_out, c_in, k, k]`
    /// and per-channel bias, via im2col and one matrix product per batch.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be [b, c, h, w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [co, ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h_in: xs[2],
            w_in: xs[3],
            h_out: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            w_out: (xs[3] + 2 * pad - ws[2]) / stride + 1,
            kernel: ws[2],
            stride,
            pad,
        };
        let cols = im2col(&self.nodes[x.0].value, &dims);
        let wmat = self
            .nodes[w.0]
            .value
            .view()
            .into_shape_with_order((dims.c_out, dims.c_in * dims.kernel * dims.kernel))
            .expect("conv weight reshape");
        let out_mat = wmat.dot(&cols); // [c_out, batch*h_out*w_out]
        let bias = &self.nodes[b.0].value;
        let mut out =
            ndarray::Array4::<f64>::zeros((dims.batch, dims.c_out, dims.h_out, dims.w_out));
        let plane = dims.h_out * dims.w_out;
        for bi in 0..dims.batch {
            for co in 0..dims.c_out {
                let add = bias[co];
                for p in 0..plane {
                    out[[bi, co, p / dims.w_out, p % dims.w_out]] =
                        out_mat[[co, bi * plane + p]] + add;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                dims,
                cols,
            },
        )
    }

    /// Layer normalization over the last axis of `[n, d]`, with learnable
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.as2(x);
        let g = &self.nodes[gain.0].value;
        let bvec = &self.nodes[bias.0].value;
        let d = xv.ncols();
        assert_eq!(g.len(), d, "layer_norm gain width mismatch");
        assert_eq!(bvec.len(), d, "layer_norm bias width mismatch");
        let mut out = Array2::<f64>::zeros((xv.nrows(), d));
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[[i, j]] = (row[j] - mean) * inv * g[j] + bvec[j];
            }
        }
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn as2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d array")
    }

    fn as3(&self, v: Var) -> ndarray::ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected 3-d array")
    }

    /// Backward sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Gradients { slots }
    }

    /// Gradients of the trainable parameter leaves, keyed by parameter id.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<ParamId, ArrayD<f64>> {
        let mut out = HashMap::new();
        for &(id, node) in &self.trainable {
            if let Some(g) = grads.wrt(node) {
                out.entry(id)
                    .and_modify(|acc: &mut ArrayD<f64>| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &ArrayD<f64>, slots: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(slots, *a, g.clone());
                acc(slots, *b, g.clone());
            }
            Op::AddRowVec(x, v) => {
                acc(slots, *x, g.clone());
                let width = self.nodes[*v].value.len();
                let mut gv = ArrayD::zeros(IxDyn(&[width]));
                for (k, &e) in g.iter().enumerate() {
                    gv[k % width] += e;
                }
                acc(slots, *v, gv);
            }
            Op::Sub(a, b) => {
                acc(slots, *a, g.clone());
                acc(slots, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(slots, *a, g * &self.nodes[*b].value);
                acc(slots, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                acc(slots, *a, g / bv);
                let av = &self.nodes[*a].value;
                acc(slots, *b, -(g * av) / (bv * bv));
            }
            Op::Scale(a, c) => acc(slots, *a, g.mapv(|x| x * c)),
            Op::AddScalar(a) => acc(slots, *a, g.clone()),
            Op::Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(slots, *a, gv.dot(&bv.t()).into_dyn());
                acc(slots, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Bmm(a, b) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
                let bs = av.shape()[0];
                let mut ga = ndarray::Array3::<f64>::zeros((bs, av.shape()[1], av.shape()[2]));
                let mut gb = ndarray::Array3::<f64>::zeros((bs, bv.shape()[1], bv.shape()[2]));
                for k in 0..bs {
                    let gk = gv.index_axis(Axis(0), k);
                    ga.index_axis_mut(Axis(0), k)
                        .assign(&gk.dot(&bv.index_axis(Axis(0), k).t()));
                    gb.index_axis_mut(Axis(0), k)
                        .assign(&av.index_axis(Axis(0), k).t().dot(&gk));
                }
                acc(slots, *a, ga.into_dyn());
                acc(slots, *b, gb.into_dyn());
            }
            Op::TransposeLast2(a) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let back = gv.permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
                acc(slots, *a, back.into_dyn());
            }
            Op::Relu(a) => {
                let xv = &self.nodes[*a].value;
                let mut gx = g.clone();
                for (e, &x) in gx.iter_mut().zip(xv.iter()) {
                    if x <= 0.0 {
                        *e = 0.0;
                    }
                }
                acc(slots, *a, gx);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[i].value;
                acc(slots, *a, g * &yv.mapv(|y| 1.0 - y * y));
            }
            Op::Exp(a) => acc(slots, *a, g * &self.nodes[i].value),
            Op::Abs(a) => {
                let xv = &self.nodes[*a].value;
                acc(slots, *a, g * &xv.mapv(f64::signum).mapv(|s| if s.abs() > 0.5 { s } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let xv = &self.nodes[*a].value;
                acc(slots, *a, g * &xv.mapv(sigmoid));
            }
            Op::SumAll(a) => {
                let s = g[0];
                acc(slots, *a, self.nodes[*a].value.mapv(|_| s));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let s = g[0] / n;
                acc(slots, *a, self.nodes[*a].value.mapv(|_| s));
            }
            Op::SumCols(a) => {
                let av = &self.nodes[*a].value;
                let d = av.shape()[1];
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = Array2::<f64>::zeros((av.shape()[0], d));
                for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                    row.fill(gv[[r, 0]]);
                }
                acc(slots, *a, ga.into_dyn());
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let lanes = y.len() / y.shape()[y.ndim() - 1];
                let width = y.shape()[y.ndim() - 1];
                let yv = y.as_standard_layout();
                let gs = g.as_standard_layout();
                let mut gx = vec![0.0; y.len()];
                let yf = yv.as_slice().unwrap();
                let gf = gs.as_slice().unwrap();
                for lane in 0..lanes {
                    let o = lane * width;
                    let dot: f64 = (0..width).map(|j| gf[o + j] * yf[o + j]).sum();
                    for j in 0..width {
                        gx[o + j] = yf[o + j] * (gf[o + j] - dot);
                    }
                }
                acc(
                    slots,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(y.shape()), gx).unwrap(),
                );
            }
            Op::ConcatCols(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let da = self.nodes[*a].value.shape()[1];
                acc(
                    slots,
                    *a,
                    gv.slice(ndarray::s![.., ..da]).to_owned().into_dyn(),
                );
                acc(
                    slots,
                    *b,
                    gv.slice(ndarray::s![.., da..]).to_owned().into_dyn(),
                );
            }
            Op::SliceCols(a, lo, hi) => {
                let av = &self.nodes[*a].value;
                let mut ga = Array2::<f64>::zeros((av.shape()[0], av.shape()[1]));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                ga.slice_mut(ndarray::s![.., *lo..*hi]).assign(&gv);
                acc(slots, *a, ga.into_dyn());
            }
            Op::Reshape(a) => {
                let src_shape = self.nodes[*a].value.shape().to_vec();
                let flat: Vec<f64> = g.as_standard_layout().iter().copied().collect();
                acc(
                    slots,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&src_shape), flat).unwrap(),
                );
            }
            Op::Min2(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((ea, eb), (&xa, &xb)) in ga
                    .iter_mut()
                    .zip(gb.iter_mut())
                    .zip(av.iter().zip(bv.iter()))
                {
                    if xa <= xb {
                        *eb = 0.0;
                    } else {
                        *ea = 0.0;
                    }
                }
                acc(slots, *a, ga);
                acc(slots, *b, gb);
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let plane = dims.h_out * dims.w_out;
                let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut g_mat = Array2::<f64>::zeros((dims.c_out, dims.batch * plane));
                for bi in 0..dims.batch {
                    for co in 0..dims.c_out {
                        for p in 0..plane {
                            g_mat[[co, bi * plane + p]] =
                                gv[[bi, co, p / dims.w_out, p % dims.w_out]];
                        }
                    }
                }
                // dW = g_mat . cols^T, reshaped back to [c_out, c_in, k, k]
                let dw_mat = g_mat.dot(&cols.t());
                acc(
                    slots,
                    *w,
                    dw_mat
                        .into_shape_with_order(IxDyn(&[
                            dims.c_out, dims.c_in, dims.kernel, dims.kernel,
                        ]))
                        .unwrap(),
                );
                // db = row sums of g_mat
                let mut db = ArrayD::zeros(IxDyn(&[dims.c_out]));
                for co in 0..dims.c_out {
                    db[co] = g_mat.row(co).sum();
                }
                acc(slots, *b, db);
                // dX via cols gradient scattered back
                let wmat = self.nodes[*w]
                    .value
                    .view()
                    .into_shape_with_order((dims.c_out, dims.c_in * dims.kernel * dims.kernel))
                    .unwrap();
                let d_cols = wmat.t().dot(&g_mat);
                acc(slots, *x, col2im(&d_cols, dims));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let gvec = &self.nodes[*gain].value;
                let gout = g.view().into_dimensionality::<Ix2>().unwrap();
                let d = xv.ncols();
                let mut gx = Array2::<f64>::zeros((xv.nrows(), d));
                let mut ggain = ArrayD::zeros(IxDyn(&[d]));
                let mut gbias = ArrayD::zeros(IxDyn(&[d]));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gy = gout.row(r);
                    let mut m1 = 0.0; // mean of gy*gain
                    let mut m2 = 0.0; // mean of gy*gain*xhat
                    for j in 0..d {
                        let t = gy[j] * gvec[j];
                        m1 += t;
                        m2 += t * xhat[j];
                        ggain[j] += gy[j] * xhat[j];
                        gbias[j] += gy[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[[r, j]] = inv * (gy[j] * gvec[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(slots, *x, gx.into_dyn());
                acc(slots, *gain, ggain);
                acc(slots, *bias, gbias);
            }
        }
    }
}

fn acc(slots: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut slots[idx] {
        Some(slot) => *slot += &g,
        empty => *empty = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Unfold `[b, c, h, w]` into `[c*k*k, b*h_out*w_out]` patches.
fn im2col(x: &ArrayD<f64>, dims: &ConvDims) -> Array2<f64> {
    let xv = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let plane = dims.h_out * dims.w_out;
    let rows = dims.c_in * dims.kernel * dims.kernel;
    let mut cols = Array2::<f64>::zeros((rows, dims.batch * plane));
    for bi in 0..dims.batch {
        for ho in 0..dims.h_out {
            for wo in 0..dims.w_out {
                let col = bi * plane + ho * dims.w_out + wo;
                let hi0 = (ho * dims.stride) as isize - dims.pad as isize;
                let wi0 = (wo * dims.stride) as isize - dims.pad as isize;
                let mut row = 0;
                for ci in 0..dims.c_in {
                    for kh in 0..dims.kernel {
                        for kw in 0..dims.kernel {
                            let hi = hi0 + kh as isize;
                            let wi = wi0 + kw as isize;
                            if hi >= 0
                                && wi >= 0
                                && (hi as usize) < dims.h_in
                                && (wi as usize) < dims.w_in
                            {
                                cols[[row, col]] = xv[[bi, ci, hi as usize, wi as usize]];
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input image grid.
fn col2im(d_cols: &Array2<f64>, dims: &ConvDims) -> ArrayD<f64> {
    let plane = dims.h_out * dims.w_out;
    let mut dx = ndarray::Array4::<f64>::zeros((dims.batch, dims.c_in, dims.h_in, dims.w_in));
    for bi in 0..dims.batch {
        for ho in 0..dims.h_out {
            for wo in 0..dims.w_out {
                let col = bi * plane + ho * dims.w_out + wo;
                let hi0 = (ho * dims.stride) as isize - dims.pad as isize;
                let wi0 = (wo * dims.stride) as isize - dims.pad as isize;
                let mut row = 0;
                for ci in 0..dims.c_in {
                    for kh in 0..dims.kernel {
                        for kw in 0..dims.kernel {
                            let hi = hi0 + kh as isize;
                            let wi = wi0 + kw as isize;
                            if hi >= 0
                                && wi >= 0
                                && (hi as usize) < dims.h_in
                                && (wi as usize) < dims.w_in
                            {
                                dx[[bi, ci, hi as usize, wi as usize]] += d_cols[[row, col]];
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn store_with(values: &[(&str, ArrayD<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(name, v)| store.register(name, v.clone()))
            .collect();
        (store, ids)
    }

    #[test]
    fn matmul_forward_and_grad() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        let b = arr2(&[[5.0], [6.0]]).into_dyn();
        let (store, ids) = store_with(&[("a", a), ("b", b)]);
        let mut tape = Tape::new();
        let va = tape.param(&store, ids[0], true);
        let vb = tape.param(&store, ids[1], true);
        let prod = tape.matmul(va, vb);
        assert_eq!(tape.value(prod)[[0, 0]], 17.0);
        assert_eq!(tape.value(prod)[[1, 0]], 39.0);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let by_param = tape.param_grads(&grads);
        // d(sum)/dA = ones . B^T = [[5,6],[5,6]]
        let ga = &by_param[&ids[0]];
        assert_eq!(ga[[0, 0]], 5.0);
        assert_eq!(ga[[1, 1]], 6.0);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let a = arr2(&[[2.0]]).into_dyn();
        let (store, ids) = store_with(&[("a", a)]);
        let mut tape = Tape::new();
        let frozen = tape.param(&store, ids[0], false);
        let sq = tape.square(frozen);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert!(tape.param_grads(&grads).is_empty());
    }

    #[test]
    fn same_param_trainable_and_frozen_are_distinct_nodes() {
        let a = arr2(&[[3.0]]).into_dyn();
        let (store, ids) = store_with(&[("a", a)]);
        let mut tape = Tape::new();
        let live = tape.param(&store, ids[0], true);
        let frozen = tape.param(&store, ids[0], false);
        assert_ne!(live, frozen);
        let prod = tape.mul(live, frozen); // 3x with x frozen at 3
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let g = &tape.param_grads(&grads)[&ids[0]];
        assert_eq!(g[[0, 0]], 3.0); // only the frozen side's value
    }

    #[test]
    fn relu_never_emits_negative_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[-0.0, -1.0, 2.0]]).into_dyn());
        let y = tape.relu(x);
        for &v in tape.value(y).iter() {
            assert!(v.to_bits() != (-0.0f64).to_bits());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = tape.softmax_last(x);
        let yv = tape.value(y);
        for row in yv.view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 8, 8])));
        let w = tape.constant(ArrayD::zeros(IxDyn(&[5, 3, 3, 3])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[5])));
        let y = tape.conv2d(x, w, b, 2, 1);
        assert_eq!(tape.shape(y), vec![2, 5, 4, 4]);
        let y1 = tape.conv2d(x, w, b, 1, 1);
        assert_eq!(tape.shape(y1), vec![2, 5, 8, 8]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = arr2(&[[4.0]]).into_dyn();
        let (store, ids) = store_with(&[("a", a)]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0], true);
        let d = tape.detach(v);
        let sq = tape.square(d);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert!(tape.param_grads(&grads).is_empty());
    }
}
