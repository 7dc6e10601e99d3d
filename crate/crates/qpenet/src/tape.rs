//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes; the
//! append order is a topological order, so [`Tape::backward`] is a single
//! reverse sweep. Tensors are cheap handles (`Rc` data plus a node id).
//! Parameters live outside the tape in a [`ParamStore`] and are leafed onto
//! the tape on first use, so one store drives any number of forward passes.
//!
//! Everything is `f64`: the gradient checks and oracle comparisons in the
//! test suite run at tolerances that single precision does not reliably meet.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use crate::kernels;

/// Handle to a parameter inside a [`ParamStore`]. Stable across forward
/// passes, checkpoint round-trips, and optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub frozen: bool,
}

/// Named, ordered collection of learnable (or frozen) buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            frozen,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters (frozen included).
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradients produced by one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_param: HashMap<usize, ArrayD<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param.get(&id.0)
    }

    /// Accumulate another gradient set into this one.
    pub fn add_assign(&mut self, other: &Grads) {
        for (k, v) in &other.by_param {
            match self.by_param.get_mut(k) {
                Some(acc) => *acc += v,
                None => {
                    self.by_param.insert(*k, v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.by_param.values_mut() {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    back: Option<BackFn>,
    param: Option<ParamId>,
}

/// Differentiable tensor handle. Cloning shares the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<ArrayD<f64>>,
    id: Option<usize>,
}

impl Tensor {
    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Scalar value of a `[1]` tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "scalar() on tensor of len {}", self.data.len());
        *self.data.iter().next().unwrap()
    }

    pub fn to_array3(&self) -> Array3<f64> {
        self.data
            .as_ref()
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("tensor is not rank 3")
    }

    pub fn to_array2(&self) -> Array2<f64> {
        self.data
            .as_ref()
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("tensor is not rank 2")
    }

    pub fn to_array1(&self) -> Array1<f64> {
        self.data
            .as_ref()
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("tensor is not rank 1")
    }
}

/// One forward pass worth of recorded operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<usize, Tensor>>,
    recording: bool,
}

impl Tape {
    /// Tape that records for backward.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    /// Value-only tape: ops compute forward results without recording.
    pub fn eval() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&self, parents: Vec<Option<usize>>, back: BackFn, param: Option<ParamId>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            back: Some(back),
            param,
        });
        nodes.len() - 1
    }

    /// Non-differentiable input (targets, masks, frozen activations).
    pub fn constant(&self, data: ArrayD<f64>) -> Tensor {
        Tensor {
            data: Rc::new(data),
            id: None,
        }
    }

    pub fn constant3(&self, data: Array3<f64>) -> Tensor {
        self.constant(data.into_dyn())
    }

    pub fn constant2(&self, data: Array2<f64>) -> Tensor {
        self.constant(data.into_dyn())
    }

    pub fn constant1(&self, data: Array1<f64>) -> Tensor {
        self.constant(data.into_dyn())
    }

    /// Differentiable leaf that is not a parameter (used by gradient checks
    /// on raw inputs).
    pub fn input(&self, data: ArrayD<f64>) -> Tensor {
        if !self.recording {
            return self.constant(data);
        }
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                back: None,
                param: None,
            });
            nodes.len() - 1
        };
        Tensor {
            data: Rc::new(data),
            id: Some(id),
        }
    }

    /// Leaf a parameter's current value onto the tape. Repeated calls within
    /// one tape return the same node so gradients accumulate correctly.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        if !self.recording || store.entry(id).frozen {
            return self.constant(store.value(id).clone());
        }
        if let Some(t) = self.param_leaves.borrow().get(&id.0) {
            return t.clone();
        }
        let node_id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                back: None,
                param: Some(id),
            });
            nodes.len() - 1
        };
        let t = Tensor {
            data: Rc::new(store.value(id).clone()),
            id: Some(node_id),
        };
        self.param_leaves.borrow_mut().insert(id.0, t.clone());
        t
    }

    fn unary(
        &self,
        x: &Tensor,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Tensor {
        if !self.recording || x.id.is_none() {
            return self.constant(value);
        }
        let id = self.push(
            vec![x.id],
            Box::new(move |g| vec![Some(back(g))]),
            None,
        );
        Tensor {
            data: Rc::new(value),
            id: Some(id),
        }
    }

    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) + 'static,
    ) -> Tensor {
        if !self.recording || (a.id.is_none() && b.id.is_none()) {
            return self.constant(value);
        }
        let id = self.push(
            vec![a.id, b.id],
            Box::new(move |g| {
                let (ga, gb) = back(g);
                vec![ga, gb]
            }),
            None,
        );
        Tensor {
            data: Rc::new(value),
            id: Some(id),
        }
    }

    // ----- elementwise -----

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let value = a.data.as_ref() + b.data.as_ref();
        self.binary(a, b, value, |g| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let value = a.data.as_ref() - b.data.as_ref();
        self.binary(a, b, value, |g| (Some(g.clone()), Some(-g)))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let value = a.data.as_ref() * b.data.as_ref();
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.binary(a, b, value, move |g| {
            (Some(g * bd.as_ref()), Some(g * ad.as_ref()))
        })
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let value = a.data.as_ref() / b.data.as_ref();
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.binary(a, b, value, move |g| {
            let ga = g / bd.as_ref();
            let gb = -(g * ad.as_ref()) / (bd.as_ref() * bd.as_ref());
            (Some(ga), Some(gb))
        })
    }

    pub fn scale(&self, x: &Tensor, k: f64) -> Tensor {
        let value = x.data.mapv(|v| v * k);
        self.unary(x, value, move |g| g.mapv(|v| v * k))
    }

    pub fn add_scalar(&self, x: &Tensor, k: f64) -> Tensor {
        let value = x.data.mapv(|v| v + k);
        self.unary(x, value, |g| g.clone())
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let value = x.data.mapv(|v| v.max(0.0));
        let xd = x.data.clone();
        self.unary(x, value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xd, |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let value = x.data.mapv(stable_sigmoid);
        let y = value.clone();
        self.unary(x, value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&y, |gv, &yv| *gv *= yv * (1.0 - yv));
            out
        })
    }

    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        let value = x.data.mapv(f64::sqrt);
        let y = value.clone();
        self.unary(x, value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&y, |gv, &yv| *gv *= 0.5 / yv);
            out
        })
    }

    /// `max(x, k)` with zero gradient on the clamped side.
    pub fn clamp_min(&self, x: &Tensor, k: f64) -> Tensor {
        let value = x.data.mapv(|v| v.max(k));
        let xd = x.data.clone();
        self.unary(x, value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xd, |gv, &xv| {
                if xv < k {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    // ----- scalar-tensor broadcasting -----

    /// `x * s` where `s` has shape `[1]`.
    pub fn mul_s(&self, x: &Tensor, s: &Tensor) -> Tensor {
        assert_eq!(s.data.len(), 1, "mul_s expects scalar tensor");
        let sv = s.scalar();
        let value = x.data.mapv(|v| v * sv);
        let xd = x.data.clone();
        self.binary(x, s, value, move |g| {
            let gx = g.mapv(|v| v * sv);
            let gs = ArrayD::from_elem(IxDyn(&[1]), (g * xd.as_ref()).sum());
            (Some(gx), Some(gs))
        })
    }

    /// `x / (s + eps)` where `s` has shape `[1]`: the masked-pool denominator.
    pub fn div_s_eps(&self, x: &Tensor, s: &Tensor, eps: f64) -> Tensor {
        assert_eq!(s.data.len(), 1, "div_s_eps expects scalar tensor");
        let denom = s.scalar() + eps;
        let value = x.data.mapv(|v| v / denom);
        let xd = x.data.clone();
        self.binary(x, s, value, move |g| {
            let gx = g.mapv(|v| v / denom);
            let gs_val = -(g * xd.as_ref()).sum() / (denom * denom);
            let gs = ArrayD::from_elem(IxDyn(&[1]), gs_val);
            (Some(gx), Some(gs))
        })
    }

    // ----- reductions -----

    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[1]), x.data.sum());
        let shape = x.shape().to_vec();
        self.unary(x, value, move |g| {
            ArrayD::from_elem(IxDyn(&shape), g[[0]])
        })
    }

    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let n = x.data.len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[1]), x.data.sum() / n);
        let shape = x.shape().to_vec();
        self.unary(x, value, move |g| {
            ArrayD::from_elem(IxDyn(&shape), g[[0]] / n)
        })
    }

    /// `[h, w, c] -> [c]` summed over the grid.
    pub fn sum_hw(&self, x: &Tensor) -> Tensor {
        let x3 = view3(&x.data);
        let (h, w, c) = x3.dim();
        let mut out = Array1::zeros(c);
        for i in 0..h {
            for j in 0..w {
                out += &x3.slice(ndarray::s![i, j, ..]);
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g1 = view1(g);
            let mut back = Array3::zeros((h, w, c));
            for i in 0..h {
                for j in 0..w {
                    back.slice_mut(ndarray::s![i, j, ..]).assign(&g1);
                }
            }
            back.into_dyn()
        })
    }

    /// `[h, w, c] -> [c]` averaged over the grid (global average pooling).
    pub fn mean_hw(&self, x: &Tensor) -> Tensor {
        let x3 = view3(&x.data);
        let (h, w, _) = x3.dim();
        let n = (h * w) as f64;
        let summed = self.sum_hw(x);
        self.scale(&summed, 1.0 / n)
    }

    /// `[h, w, c] -> [h, w]` summed over channels.
    pub fn sum_c(&self, x: &Tensor) -> Tensor {
        let x3 = view3(&x.data);
        let (h, w, c) = x3.dim();
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = x3.slice(ndarray::s![i, j, ..]).sum();
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g2 = view2(g);
            let mut back = Array3::zeros((h, w, c));
            for i in 0..h {
                for j in 0..w {
                    back.slice_mut(ndarray::s![i, j, ..]).fill(g2[[i, j]]);
                }
            }
            back.into_dyn()
        })
    }

    // ----- shape -----

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        let value = x
            .data
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let orig = x.shape().to_vec();
        self.unary(x, value, move |g| {
            g.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape backward")
        })
    }

    /// Tile `[c] -> [h, w, c]`; the adjoint of `sum_hw`.
    pub fn broadcast_hw(&self, p: &Tensor, h: usize, w: usize) -> Tensor {
        let p1 = view1(&p.data);
        let c = p1.len();
        let mut out = Array3::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                out.slice_mut(ndarray::s![i, j, ..]).assign(&p1);
            }
        }
        self.unary(p, out.into_dyn(), move |g| {
            let g3 = view3(g);
            let mut back = Array1::zeros(c);
            for i in 0..h {
                for j in 0..w {
                    back += &g3.slice(ndarray::s![i, j, ..]);
                }
            }
            back.into_dyn()
        })
    }

    /// Tile `[h, w] -> [h, w, c]` across channels.
    pub fn broadcast_c(&self, m: &Tensor, c: usize) -> Tensor {
        let m2 = view2(&m.data);
        let (h, w) = m2.dim();
        let mut out = Array3::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                out.slice_mut(ndarray::s![i, j, ..]).fill(m2[[i, j]]);
            }
        }
        self.unary(m, out.into_dyn(), move |g| {
            let g3 = view3(g);
            let mut back = Array2::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    back[[i, j]] = g3.slice(ndarray::s![i, j, ..]).sum();
                }
            }
            back.into_dyn()
        })
    }

    /// Concatenate `[h, w, c_i]` maps along the channel axis.
    pub fn concat_c(&self, xs: &[&Tensor]) -> Tensor {
        assert!(!xs.is_empty());
        let dims: Vec<(usize, usize, usize)> = xs.iter().map(|x| view3(&x.data).dim()).collect();
        let (h, w, _) = dims[0];
        for d in &dims {
            assert_eq!((d.0, d.1), (h, w), "concat_c grid mismatch");
        }
        let total: usize = dims.iter().map(|d| d.2).sum();
        let mut out = Array3::zeros((h, w, total));
        let mut off = 0;
        for (x, d) in xs.iter().zip(&dims) {
            out.slice_mut(ndarray::s![.., .., off..off + d.2])
                .assign(&view3(&x.data));
            off += d.2;
        }
        if !self.recording || xs.iter().all(|x| x.id.is_none()) {
            return self.constant(out.into_dyn());
        }
        let parents: Vec<Option<usize>> = xs.iter().map(|x| x.id).collect();
        let channels: Vec<usize> = dims.iter().map(|d| d.2).collect();
        let id = self.push(
            parents,
            Box::new(move |g| {
                let g3 = view3(g);
                let mut out = Vec::with_capacity(channels.len());
                let mut off = 0;
                for &ci in &channels {
                    out.push(Some(
                        g3.slice(ndarray::s![.., .., off..off + ci])
                            .to_owned()
                            .into_dyn(),
                    ));
                    off += ci;
                }
                out
            }),
            None,
        );
        Tensor {
            data: Rc::new(out.into_dyn()),
            id: Some(id),
        }
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let a2 = view2(&a.data);
        let b2 = view2(&b.data);
        assert_eq!(a2.dim().1, b2.dim().0, "matmul inner dim mismatch");
        let value = a2.dot(&b2).into_dyn();
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.binary(a, b, value, move |g| {
            let g2 = view2(g);
            let ga = g2.dot(&view2(&bd).t()).into_dyn();
            let gb = view2(&ad).t().dot(&g2).into_dyn();
            (Some(ga), Some(gb))
        })
    }

    /// Transpose a `[m, n]` tensor.
    pub fn transpose2(&self, x: &Tensor) -> Tensor {
        let value = view2(&x.data).t().as_standard_layout().to_owned().into_dyn();
        self.unary(x, value, |g| {
            view2(g).t().as_standard_layout().to_owned().into_dyn()
        })
    }

    /// Add a row vector `[n]` to every row of `[m, n]`.
    pub fn add_row_bias(&self, x: &Tensor, b: &Tensor) -> Tensor {
        let x2 = view2(&x.data);
        let b1 = view1(&b.data);
        assert_eq!(x2.dim().1, b1.len(), "bias width mismatch");
        let mut value = x2.to_owned();
        for mut row in value.rows_mut() {
            row += &b1;
        }
        self.binary(x, b, value.into_dyn(), move |g| {
            let g2 = view2(g);
            let gb = g2.sum_axis(ndarray::Axis(0)).into_dyn();
            (Some(g.clone()), Some(gb))
        })
    }

    /// Select rows of `[n, c]` by index; the backward pass scatter-adds.
    pub fn gather_rows(&self, x: &Tensor, indices: Vec<usize>) -> Tensor {
        let x2 = view2(&x.data);
        let (n, c) = x2.dim();
        let mut out = Array2::zeros((indices.len(), c));
        for (row, &idx) in indices.iter().enumerate() {
            assert!(idx < n, "gather index {idx} out of bounds {n}");
            out.row_mut(row).assign(&x2.row(idx));
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g2 = view2(g);
            let mut back = Array2::zeros((n, c));
            for (row, &idx) in indices.iter().enumerate() {
                let mut dst = back.row_mut(idx);
                dst += &g2.row(row);
            }
            back.into_dyn()
        })
    }

    /// Row-wise softmax of `[m, n]` with max subtraction.
    pub fn softmax_rows(&self, x: &Tensor) -> Tensor {
        let x2 = view2(&x.data);
        let mut value = x2.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let y = value.clone();
        self.unary(x, value.into_dyn(), move |g| {
            let g2 = view2(g);
            let mut back = Array2::zeros(y.dim());
            for (i, (grow, yrow)) in g2.rows().into_iter().zip(y.rows()).enumerate() {
                let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                for (j, (&gv, &yv)) in grow.iter().zip(yrow.iter()).enumerate() {
                    back[[i, j]] = yv * (gv - dot);
                }
            }
            back.into_dyn()
        })
    }

    // ----- convolution -----

    /// 2-D convolution of `[h, w, cin]` with weights `[kh, kw, cin, cout]`
    /// (leafed as rank 4) and bias `[cout]`, zero padding.
    pub fn conv2d(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let x3 = view3(&x.data);
        let wshape = weight.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be [kh, kw, cin, cout]");
        let (kh, kw, cin, cout) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(x3.dim().2, cin, "conv input channel mismatch");
        let w2 = weight
            .data
            .as_ref()
            .clone()
            .into_shape_with_order((kh * kw * cin, cout))
            .expect("conv weight reshape");
        let b1 = view1(&bias.data).to_owned();
        let (h, w) = (x3.dim().0, x3.dim().1);
        let (value, cols) = kernels::conv2d_forward(&x3, &w2.view(), &b1, kh, kw, stride, pad);

        if !self.recording || (x.id.is_none() && weight.id.is_none() && bias.id.is_none()) {
            return self.constant(value.into_dyn());
        }
        let cols = Rc::new(cols);
        let w2 = Rc::new(w2);
        let parents = vec![x.id, weight.id, bias.id];
        let id = self.push(
            parents,
            Box::new(move |g| {
                let g3 = view3(g);
                let (oh, ow, _) = g3.dim();
                let g2 = g3
                    .to_owned()
                    .into_shape_with_order((oh * ow, cout))
                    .expect("conv grad reshape");
                let gb = g2.sum_axis(ndarray::Axis(0)).into_dyn();
                let gw = cols
                    .t()
                    .dot(&g2)
                    .into_shape_with_order(IxDyn(&[kh, kw, cin, cout]))
                    .expect("conv weight grad reshape");
                let gcols = g2.dot(&w2.t());
                let gx = kernels::col2im(&gcols.view(), h, w, cin, kh, kw, stride, pad).into_dyn();
                vec![Some(gx), Some(gw), Some(gb)]
            }),
            None,
        );
        Tensor {
            data: Rc::new(value.into_dyn()),
            id: Some(id),
        }
    }

    // ----- losses -----

    /// Mean binary cross-entropy against a constant target, with predictions
    /// clamped to `[delta, 1 - delta]`.
    pub fn bce(&self, pred: &Tensor, target: &ArrayD<f64>, delta: f64) -> Tensor {
        assert_eq!(pred.shape(), target.shape(), "bce shape mismatch");
        let n = pred.data.len() as f64;
        let mut acc = 0.0;
        for (&p, &t) in pred.data.iter().zip(target.iter()) {
            let pc = p.clamp(delta, 1.0 - delta);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), acc / n);
        let pd = pred.data.clone();
        let td = target.clone();
        self.unary(pred, value, move |g| {
            let scale = g[[0]] / n;
            let mut back = pd.as_ref().clone();
            back.zip_mut_with(&td, |p, &t| {
                if *p < delta || *p > 1.0 - delta {
                    *p = 0.0;
                } else {
                    let pc = *p;
                    *p = scale * (pc - t) / (pc * (1.0 - pc));
                }
            });
            back
        })
    }

    // ----- fusion helpers -----

    /// Mean of `k` same-shape tensors computed as `x0 + sum(x_i - x0) / k`,
    /// elementwise guarded so that identical inputs reproduce `x0` bitwise.
    /// Used for prototype-role and attention-group fusion in K-shot inference.
    pub fn mean_preserving(&self, xs: &[Tensor]) -> Tensor {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0].clone();
        }
        let k = xs.len() as f64;
        let x0 = xs[0].data.as_ref();
        let mut delta = ArrayD::zeros(x0.raw_dim());
        for x in &xs[1..] {
            assert_eq!(x.shape(), xs[0].shape(), "mean_preserving shape mismatch");
            delta += x.data.as_ref();
            delta -= x0;
        }
        let mut value = x0.clone();
        value.zip_mut_with(&delta, |v, &d| {
            if d != 0.0 {
                *v += d / k;
            }
        });
        if !self.recording || xs.iter().all(|x| x.id.is_none()) {
            return self.constant(value);
        }
        let parents: Vec<Option<usize>> = xs.iter().map(|x| x.id).collect();
        let delta = Rc::new(delta);
        let n_in = xs.len();
        let id = self.push(
            parents,
            Box::new(move |g| {
                let mut first = g.clone();
                first.zip_mut_with(&delta, |gv, &d| {
                    if d != 0.0 {
                        *gv /= k;
                    }
                });
                let mut rest = g.clone();
                rest.zip_mut_with(&delta, |gv, &d| {
                    if d != 0.0 {
                        *gv /= k;
                    } else {
                        *gv = 0.0;
                    }
                });
                let mut out = vec![Some(first)];
                for _ in 1..n_in {
                    out.push(Some(rest.clone()));
                }
                out
            }),
            None,
        );
        Tensor {
            data: Rc::new(value),
            id: Some(id),
        }
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients and,
    /// via [`Grads`], nothing else; intermediate node gradients are dropped.
    pub fn backward(&self, loss: &Tensor) -> Grads {
        assert!(self.recording, "backward on an eval tape");
        let loss_id = loss.id.expect("loss does not depend on any recorded input");
        assert_eq!(loss.data.len(), 1, "loss must be scalar");

        let nodes = self.nodes.borrow();
        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        node_grads[loss_id] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        let mut grads = Grads::default();
        for id in (0..=loss_id).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                match grads.by_param.get_mut(&pid.0) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.by_param.insert(pid.0, g.clone());
                    }
                }
            }
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                for (slot, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(pidx), Some(pg)) = (slot, pg) {
                        match &mut node_grads[*pidx] {
                            Some(acc) => *acc += &pg,
                            empty => *empty = Some(pg),
                        }
                    }
                }
            }
        }
        grads
    }

    /// Gradient of a scalar loss with respect to a differentiable input leaf.
    pub fn backward_input(&self, loss: &Tensor, input: &Tensor) -> Option<ArrayD<f64>> {
        assert!(self.recording, "backward on an eval tape");
        let loss_id = loss.id.expect("loss does not depend on any recorded input");
        let input_id = input.id?;
        let nodes = self.nodes.borrow();
        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        node_grads[loss_id] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for id in (0..=loss_id).rev() {
            let g = match &node_grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            if id == input_id {
                continue;
            }
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                for (slot, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(pidx), Some(pg)) = (slot, pg) {
                        match &mut node_grads[*pidx] {
                            Some(acc) => *acc += &pg,
                            empty => *empty = Some(pg),
                        }
                    }
                }
            }
        }
        node_grads[input_id].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn view1(x: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    x.view().into_dimensionality::<Ix1>().expect("rank-1 view")
}

fn view2(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    x.view().into_dimensionality::<Ix2>().expect("rank-2 view")
}

fn view3(x: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    x.view().into_dimensionality::<Ix3>().expect("rank-3 view")
}

/// Central finite difference of `f` with respect to one parameter, element by
/// element. `f` must be a pure function of the store.
pub fn finite_difference(
    store: &mut ParamStore,
    id: ParamId,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> ArrayD<f64> {
    let shape = store.value(id).raw_dim();
    let mut grad = ArrayD::zeros(shape);
    for i in 0..store.value(id).len() {
        let orig = *store.value(id).iter().nth(i).unwrap();
        *store.value_mut(id).iter_mut().nth(i).unwrap() = orig + eps;
        let plus = f(store);
        *store.value_mut(id).iter_mut().nth(i).unwrap() = orig - eps;
        let minus = f(store);
        *store.value_mut(id).iter_mut().nth(i).unwrap() = orig;
        *grad.iter_mut().nth(i).unwrap() = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Relative error between two gradient arrays:
/// `|a - b| / max(1e-12, |a| + |b|)` reduced by max.
pub fn max_relative_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}
