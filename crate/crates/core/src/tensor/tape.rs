//! Computation tape: forward builders and the reverse pass.
//!
//! Nodes are appended in topological order (every op's inputs have smaller
//! indices), so the reverse pass is a single backwards sweep. Gradients are
//! dropped as soon as they have been propagated, except for [`Tape::input`]
//! nodes, whose gradients stay retrievable after [`Tape::backward`].

use ndarray::{concatenate, Axis, Ix2, IxDyn, Slice};

use super::conv::{self, Conv2dSpec, Conv3dSpec};
use super::{Arr, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// Per-sample 3x3 color transform plus per-channel offset.
#[derive(Debug, Clone)]
pub struct ColorAffine {
    pub mat: Vec<[[f64; 3]; 3]>,
    pub off: Vec<[f64; 3]>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Input,
    Param {
        slot: usize,
        idx: usize,
        set_name: String,
    },
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Neg(TensorRef),
    Scale(TensorRef, f64),
    AddScalar(TensorRef),
    AddBias(TensorRef, TensorRef),
    Relu(TensorRef),
    Sigmoid(TensorRef),
    Exp(TensorRef),
    Ln(TensorRef),
    Abs(TensorRef),
    Matmul(TensorRef, TensorRef),
    MatmulNT(TensorRef, TensorRef),
    Reshape(TensorRef),
    Permute(TensorRef, Vec<usize>),
    Concat(usize, Vec<TensorRef>),
    SumAxis(TensorRef, usize),
    SumAll(TensorRef),
    MeanAll(TensorRef),
    Diag(TensorRef),
    ColorAffine(TensorRef, ColorAffine),
    GatherHw {
        x: TensorRef,
        idx: Vec<usize>,
    },
    Conv2d {
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        spec: Conv2dSpec,
    },
    Conv3d {
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        spec: Conv3dSpec,
    },
    AvgPool2d(TensorRef, usize),
    Upsample2x(TensorRef),
    GlobalAvgPool(TensorRef),
    L2NormalizeRows(TensorRef),
    SoftmaxCe {
        logits: TensorRef,
        labels: Vec<usize>,
        probs: Arr,
    },
    BceLogitsMean {
        logits: TensorRef,
        targets: Arr,
    },
    GradReverse(TensorRef, f64),
}

#[derive(Debug)]
struct Node {
    value: Arr,
    grad: Option<Arr>,
    needs: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigm(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, t: TensorRef) -> &Arr {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Value of a 0-dim node.
    pub fn scalar(&self, t: TensorRef) -> f64 {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Gradient of an [`Tape::input`] node after [`Tape::backward`].
    pub fn input_grad(&self, t: TensorRef) -> Option<&Arr> {
        match self.nodes[t.0].op {
            Op::Input => self.nodes[t.0].grad.as_ref(),
            _ => panic!("input_grad on a non-input node"),
        }
    }

    fn push(&mut self, value: Arr, needs: bool, op: Op) -> TensorRef {
        self.nodes.push(Node {
            value,
            grad: None,
            needs,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, t: TensorRef) -> bool {
        self.nodes[t.0].needs
    }

    /// Constant with no gradient.
    pub fn leaf(&mut self, value: Arr) -> TensorRef {
        self.push(value, false, Op::Leaf)
    }

    /// Constant whose gradient is retained for inspection.
    pub fn input(&mut self, value: Arr) -> TensorRef {
        self.push(value, true, Op::Input)
    }

    /// Bring one parameter of `set` onto the tape. `slot` is the position the
    /// set will occupy in the `sinks` argument of [`Tape::backward`].
    pub fn param(&mut self, slot: usize, set: &ParamSet, idx: usize) -> TensorRef {
        let value = set.value(idx).clone();
        let needs = !set.is_frozen();
        self.push(
            value,
            needs,
            Op::Param {
                slot,
                idx,
                set_name: set.name().to_string(),
            },
        )
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let needs = self.needs(a);
        self.push(v, needs, Op::Neg(a))
    }

    pub fn scale(&mut self, a: TensorRef, k: f64) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| k * x);
        let needs = self.needs(a);
        self.push(v, needs, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: TensorRef, k: f64) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        let needs = self.needs(a);
        self.push(v, needs, Op::AddScalar(a))
    }

    /// `x` of shape (N, K) plus a bias of shape (K,), broadcast over rows.
    pub fn add_bias(&mut self, x: TensorRef, b: TensorRef) -> TensorRef {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(xs.len(), 2, "add_bias expects a matrix");
        assert_eq!(bs, vec![xs[1]], "bias length mismatch");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = &self.nodes[b.0].value;
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            for (r, bb) in row.iter_mut().zip(bv.iter()) {
                *r += *bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(v.into_dyn(), needs, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, needs, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(sigm);
        let needs = self.needs(a);
        self.push(v, needs, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.needs(a);
        self.push(v, needs, Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.needs(a);
        self.push(v, needs, Op::Ln(a))
    }

    pub fn abs(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let needs = self.needs(a);
        self.push(v, needs, Op::Abs(a))
    }

    /// (M, K) x (K, N) -> (M, N)
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Matmul(a, b))
    }

    /// (M, K) x (N, K)^T -> (M, N)
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dim mismatch");
        let v = av.dot(&bv.t()).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::MatmulNT(a, b))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> TensorRef {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.nodes[a.0].value.len(), "reshape length mismatch");
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let needs = self.needs(a);
        self.push(v, needs, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: TensorRef, axes: &[usize]) -> TensorRef {
        assert_eq!(axes.len(), self.shape(a).len(), "permute rank mismatch");
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(axes.to_vec())
            .as_standard_layout()
            .to_owned();
        let needs = self.needs(a);
        self.push(v, needs, Op::Permute(a, axes.to_vec()))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        // concatenate can leave the grown axis outermost in memory; later ops
        // assume standard layout.
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        let needs = parts.iter().any(|t| self.needs(*t));
        self.push(v, needs, Op::Concat(axis, parts.to_vec()))
    }

    /// Sum a matrix over one axis, producing a vector.
    pub fn sum_axis(&mut self, a: TensorRef, axis: usize) -> TensorRef {
        assert_eq!(self.shape(a).len(), 2, "sum_axis expects a matrix");
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        let needs = self.needs(a);
        self.push(v, needs, Op::SumAxis(a, axis))
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let s = self.nodes[a.0].value.sum();
        let needs = self.needs(a);
        self.push(Arr::from_elem(IxDyn(&[]), s), needs, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let s = self.nodes[a.0].value.mean().unwrap();
        let needs = self.needs(a);
        self.push(Arr::from_elem(IxDyn(&[]), s), needs, Op::MeanAll(a))
    }

    /// Main diagonal of a square matrix, as a vector.
    pub fn diag(&mut self, a: TensorRef) -> TensorRef {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 2);
        assert_eq!(sh[0], sh[1], "diag expects a square matrix");
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = Arr::from_shape_vec(IxDyn(&[sh[0]]), (0..sh[0]).map(|i| av[[i, i]]).collect())
            .unwrap();
        let needs = self.needs(a);
        self.push(v, needs, Op::Diag(a))
    }

    /// Per-sample channel mix on (N, 3, H, W):
    /// `y[n, c] = sum_j mat[n][c][j] * x[n, j] + off[n][c]`.
    pub fn color_affine(&mut self, x: TensorRef, aff: ColorAffine) -> TensorRef {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4);
        assert_eq!(sh[1], 3, "color_affine expects 3 channels");
        assert_eq!(aff.mat.len(), sh[0]);
        assert_eq!(aff.off.len(), sh[0]);
        let (n, hw) = (sh[0], sh[2] * sh[3]);
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for s in 0..n {
            let m = &aff.mat[s];
            let o = &aff.off[s];
            for c in 0..3 {
                let dst = &mut out[(s * 3 + c) * hw..(s * 3 + c + 1) * hw];
                for (p, d) in dst.iter_mut().enumerate() {
                    let base = s * 3 * hw + p;
                    *d = m[c][0] * xs[base]
                        + m[c][1] * xs[base + hw]
                        + m[c][2] * xs[base + 2 * hw]
                        + o[c];
                }
            }
        }
        let v = Arr::from_shape_vec(IxDyn(&sh), out).unwrap();
        let needs = self.needs(x);
        self.push(v, needs, Op::ColorAffine(x, aff))
    }

    /// Per-sample spatial gather on (N, C, H, W). `idx` has logical shape
    /// (N, OH, OW) flattened, each entry a flat `h * W + w` source index.
    /// Implements crop, flip, and nearest resize in one op.
    pub fn gather_hw(&mut self, x: TensorRef, idx: Vec<usize>, oh: usize, ow: usize) -> TensorRef {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4);
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(idx.len(), n * oh * ow, "gather index length mismatch");
        debug_assert!(idx.iter().all(|&i| i < h * w), "gather index out of range");
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            let imap = &idx[s * oh * ow..(s + 1) * oh * ow];
            for ch in 0..c {
                let src = &xs[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let dst = &mut out[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow];
                for (d, &i) in dst.iter_mut().zip(imap) {
                    *d = src[i];
                }
            }
        }
        let v = Arr::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        let needs = self.needs(x);
        self.push(v, needs, Op::GatherHw { x, idx })
    }

    /// 2D convolution with bias: x (N, C, H, W), w (O, C, KH, KW), b (O,).
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
        pad: usize,
    ) -> TensorRef {
        let spec = Conv2dSpec::infer(self.shape(x), self.shape(w), stride, pad);
        let v = conv::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &spec,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, needs, Op::Conv2d { x, w, b, spec })
    }

    /// 3D convolution with bias: x (N, C, T, H, W), w (O, C, KT, KH, KW), b (O,).
    pub fn conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> TensorRef {
        let spec = Conv3dSpec::infer(self.shape(x), self.shape(w), stride, pad);
        let v = conv::conv3d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &spec,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, needs, Op::Conv3d { x, w, b, spec })
    }

    /// Non-overlapping k x k average pooling on (N, C, H, W).
    pub fn avg_pool2d(&mut self, x: TensorRef, k: usize) -> TensorRef {
        let v = conv::avg_pool2d_fwd(&self.nodes[x.0].value, k);
        let needs = self.needs(x);
        self.push(v, needs, Op::AvgPool2d(x, k))
    }

    /// Nearest-neighbor 2x upsampling on (N, C, H, W).
    pub fn upsample2x(&mut self, x: TensorRef) -> TensorRef {
        let v = conv::upsample2x_fwd(&self.nodes[x.0].value);
        let needs = self.needs(x);
        self.push(v, needs, Op::Upsample2x(x))
    }

    /// Mean over all trailing axes of (N, C, ...), producing (N, C).
    pub fn global_avg_pool(&mut self, x: TensorRef) -> TensorRef {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() > 2, "global_avg_pool expects rank > 2");
        let (n, c) = (sh[0], sh[1]);
        let rest: usize = sh[2..].iter().product();
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = xs[i * rest..(i + 1) * rest].iter().sum();
            *o = s / rest as f64;
        }
        let v = Arr::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
        let needs = self.needs(x);
        self.push(v, needs, Op::GlobalAvgPool(x))
    }

    /// Row-wise L2 normalization of (N, D) with a small epsilon under the root.
    pub fn l2_normalize_rows(&mut self, x: TensorRef) -> TensorRef {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 2);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let needs = self.needs(x);
        self.push(v.into_dyn(), needs, Op::L2NormalizeRows(x))
    }

    /// Mean cross-entropy between logits (N, K) and integer labels, as a scalar.
    pub fn softmax_ce(&mut self, logits: TensorRef, labels: &[usize]) -> TensorRef {
        let lv = self.nodes[logits.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let (n, k) = (lv.nrows(), lv.ncols());
        assert_eq!(labels.len(), n, "label count mismatch");
        assert!(labels.iter().all(|&y| y < k), "label out of range");
        let mut probs = lv.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let z: f64 = row.iter().sum();
            row.mapv_inplace(|x| x / z);
            loss -= row[labels[i]].max(1e-300).ln();
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        self.push(
            Arr::from_elem(IxDyn(&[]), loss),
            needs,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_dyn(),
            },
        )
    }

    /// Mean binary cross-entropy on logits against targets in [0, 1], as a scalar.
    pub fn bce_logits_mean(&mut self, logits: TensorRef, targets: Arr) -> TensorRef {
        assert_eq!(self.shape(logits), targets.shape(), "target shape mismatch");
        let lv = &self.nodes[logits.0].value;
        let mut loss = 0.0;
        for (&x, &t) in lv.iter().zip(targets.iter()) {
            loss += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        }
        loss /= lv.len() as f64;
        let needs = self.needs(logits);
        self.push(
            Arr::from_elem(IxDyn(&[]), loss),
            needs,
            Op::BceLogitsMean { logits, targets },
        )
    }

    /// Identity in the forward pass; multiplies the gradient by `-omega`.
    pub fn grad_reverse(&mut self, x: TensorRef, omega: f64) -> TensorRef {
        let v = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        self.push(v, needs, Op::GradReverse(x, omega))
    }

    /// Reverse pass from a scalar loss. `sinks[slot]` must be the same set
    /// that was bound to `slot` via [`Tape::param`]; gradients accumulate
    /// into its entries. Frozen subgraphs are skipped entirely.
    pub fn backward(&mut self, loss: TensorRef, sinks: &mut [&mut ParamSet]) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        if !self.nodes[loss.0].needs {
            return;
        }
        let seed = Arr::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs || self.nodes[i].grad.is_none() {
                continue;
            }
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &mut hi[0];
            match &node.op {
                Op::Leaf => {
                    node.grad = None;
                }
                Op::Input => {
                    // keep the gradient for inspection
                }
                Op::Param { slot, idx, set_name } => {
                    let g = node.grad.take().unwrap();
                    let sink = sinks
                        .get_mut(*slot)
                        .unwrap_or_else(|| panic!("no sink bound for slot {slot}"));
                    assert_eq!(
                        sink.name(),
                        set_name,
                        "slot {slot} bound to a different parameter set"
                    );
                    if !sink.is_frozen() {
                        sink.entries_mut()[*idx].grad += &g;
                    }
                }
                Op::Add(a, b) => {
                    let g = node.grad.take().unwrap();
                    let (a, b) = (*a, *b);
                    accum(lo, a, g.clone());
                    accum(lo, b, g);
                }
                Op::Sub(a, b) => {
                    let g = node.grad.take().unwrap();
                    let (a, b) = (*a, *b);
                    accum(lo, a, g.clone());
                    if lo[b.0].needs {
                        accum(lo, b, g.mapv(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let g = node.grad.take().unwrap();
                    let (a, b) = (*a, *b);
                    if lo[a.0].needs {
                        let d = &g * &lo[b.0].value;
                        accum(lo, a, d);
                    }
                    if lo[b.0].needs {
                        let d = &g * &lo[a.0].value;
                        accum(lo, b, d);
                    }
                }
                Op::Neg(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    accum(lo, a, g.mapv(|x| -x));
                }
                Op::Scale(a, k) => {
                    let g = node.grad.take().unwrap();
                    let (a, k) = (*a, *k);
                    accum(lo, a, g.mapv(|x| k * x));
                }
                Op::AddScalar(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    accum(lo, a, g);
                }
                Op::AddBias(x, b) => {
                    let g = node.grad.take().unwrap();
                    let (x, b) = (*x, *b);
                    if lo[b.0].needs {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let d = g2.sum_axis(Axis(0)).into_dyn();
                        accum(lo, b, d);
                    }
                    accum(lo, x, g);
                }
                Op::Relu(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let mut d = g;
                        ndarray::Zip::from(&mut d)
                            .and(&lo[a.0].value)
                            .for_each(|d, &x| {
                                if x <= 0.0 {
                                    *d = 0.0;
                                }
                            });
                        accum(lo, a, d);
                    }
                }
                Op::Sigmoid(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let mut d = g;
                        ndarray::Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                            *d *= y * (1.0 - y);
                        });
                        accum(lo, a, d);
                    }
                }
                Op::Exp(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let d = &g * &node.value;
                        accum(lo, a, d);
                    }
                }
                Op::Ln(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let d = &g / &lo[a.0].value;
                        accum(lo, a, d);
                    }
                }
                Op::Abs(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let mut d = g;
                        ndarray::Zip::from(&mut d)
                            .and(&lo[a.0].value)
                            .for_each(|d, &x| {
                                *d *= if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                            });
                        accum(lo, a, d);
                    }
                }
                Op::Matmul(a, b) => {
                    let g = node.grad.take().unwrap();
                    let (a, b) = (*a, *b);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if lo[a.0].needs {
                        let bv = lo[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        let d = g2.dot(&bv.t()).into_dyn();
                        accum(lo, a, d);
                    }
                    if lo[b.0].needs {
                        let av = lo[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        let d = av.t().dot(&g2).into_dyn();
                        accum(lo, b, d);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let g = node.grad.take().unwrap();
                    let (a, b) = (*a, *b);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if lo[a.0].needs {
                        let bv = lo[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        let d = g2.dot(&bv).into_dyn();
                        accum(lo, a, d);
                    }
                    if lo[b.0].needs {
                        let av = lo[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        let d = g2.t().dot(&av).into_dyn();
                        accum(lo, b, d);
                    }
                }
                Op::Reshape(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let shape = lo[a.0].value.raw_dim();
                        let d = g.into_shape_with_order(shape).unwrap();
                        accum(lo, a, d);
                    }
                }
                Op::Permute(a, axes) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let mut inv = vec![0usize; axes.len()];
                        for (k, &ax) in axes.iter().enumerate() {
                            inv[ax] = k;
                        }
                        let d = g.permuted_axes(inv).as_standard_layout().to_owned();
                        accum(lo, a, d);
                    }
                }
                Op::Concat(axis, parts) => {
                    let g = node.grad.take().unwrap();
                    let (axis, parts) = (*axis, parts.clone());
                    let mut off = 0;
                    for p in parts {
                        let len = lo[p.0].value.shape()[axis];
                        if lo[p.0].needs {
                            let d = g
                                .slice_axis(Axis(axis), Slice::from(off..off + len))
                                .to_owned();
                            accum(lo, p, d);
                        }
                        off += len;
                    }
                }
                Op::SumAxis(a, axis) => {
                    let g = node.grad.take().unwrap();
                    let (a, axis) = (*a, *axis);
                    if lo[a.0].needs {
                        let shape = lo[a.0].value.raw_dim();
                        let d = g
                            .insert_axis(Axis(axis))
                            .broadcast(shape)
                            .unwrap()
                            .to_owned();
                        accum(lo, a, d);
                    }
                }
                Op::SumAll(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let gv = *g.iter().next().unwrap();
                        let d = Arr::from_elem(lo[a.0].value.raw_dim(), gv);
                        accum(lo, a, d);
                    }
                }
                Op::MeanAll(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let n = lo[a.0].value.len() as f64;
                        let gv = *g.iter().next().unwrap();
                        let d = Arr::from_elem(lo[a.0].value.raw_dim(), gv / n);
                        accum(lo, a, d);
                    }
                }
                Op::Diag(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let n = g.len();
                        let mut d = Arr::zeros(lo[a.0].value.raw_dim());
                        {
                            let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                            for (i, &gi) in g.iter().enumerate() {
                                d2[[i, i]] = gi;
                            }
                        }
                        debug_assert_eq!(n, lo[a.0].value.shape()[0]);
                        accum(lo, a, d);
                    }
                }
                Op::ColorAffine(x, aff) => {
                    let g = node.grad.take().unwrap();
                    let x = *x;
                    if lo[x.0].needs {
                        let sh = lo[x.0].value.shape().to_vec();
                        let (n, hw) = (sh[0], sh[2] * sh[3]);
                        let gs = g.as_slice().unwrap();
                        let mut d = vec![0.0; gs.len()];
                        for s in 0..n {
                            let m = &aff.mat[s];
                            for j in 0..3 {
                                let dst = &mut d[(s * 3 + j) * hw..(s * 3 + j + 1) * hw];
                                for (p, dd) in dst.iter_mut().enumerate() {
                                    let base = s * 3 * hw + p;
                                    *dd = m[0][j] * gs[base]
                                        + m[1][j] * gs[base + hw]
                                        + m[2][j] * gs[base + 2 * hw];
                                }
                            }
                        }
                        let d = Arr::from_shape_vec(IxDyn(&sh), d).unwrap();
                        accum(lo, x, d);
                    }
                }
                Op::GatherHw { x, idx } => {
                    let g = node.grad.take().unwrap();
                    let x = *x;
                    if lo[x.0].needs {
                        let sh = lo[x.0].value.shape().to_vec();
                        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                        let osh = g.shape().to_vec();
                        let (oh, ow) = (osh[2], osh[3]);
                        let gs = g.as_slice().unwrap();
                        let mut d = vec![0.0; n * c * h * w];
                        for s in 0..n {
                            let imap = &idx[s * oh * ow..(s + 1) * oh * ow];
                            for ch in 0..c {
                                let src = &gs[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow];
                                let dst = &mut d[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                                for (&gv, &i) in src.iter().zip(imap) {
                                    dst[i] += gv;
                                }
                            }
                        }
                        let d = Arr::from_shape_vec(IxDyn(&sh), d).unwrap();
                        accum(lo, x, d);
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let g = node.grad.take().unwrap();
                    let (x, w, b) = (*x, *w, *b);
                    let spec = spec.clone();
                    let (dx, dw, db) = conv::conv2d_bwd(
                        &g,
                        &lo[x.0].value,
                        &lo[w.0].value,
                        &spec,
                        lo[x.0].needs,
                        lo[w.0].needs,
                        lo[b.0].needs,
                    );
                    if let Some(d) = dx {
                        accum(lo, x, d);
                    }
                    if let Some(d) = dw {
                        accum(lo, w, d);
                    }
                    if let Some(d) = db {
                        accum(lo, b, d);
                    }
                }
                Op::Conv3d { x, w, b, spec } => {
                    let g = node.grad.take().unwrap();
                    let (x, w, b) = (*x, *w, *b);
                    let spec = spec.clone();
                    let (dx, dw, db) = conv::conv3d_bwd(
                        &g,
                        &lo[x.0].value,
                        &lo[w.0].value,
                        &spec,
                        lo[x.0].needs,
                        lo[w.0].needs,
                        lo[b.0].needs,
                    );
                    if let Some(d) = dx {
                        accum(lo, x, d);
                    }
                    if let Some(d) = dw {
                        accum(lo, w, d);
                    }
                    if let Some(d) = db {
                        accum(lo, b, d);
                    }
                }
                Op::AvgPool2d(a, k) => {
                    let g = node.grad.take().unwrap();
                    let (a, k) = (*a, *k);
                    if lo[a.0].needs {
                        let d = conv::avg_pool2d_bwd(&g, lo[a.0].value.shape(), k);
                        accum(lo, a, d);
                    }
                }
                Op::Upsample2x(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let d = conv::upsample2x_bwd(&g);
                        accum(lo, a, d);
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let sh = lo[a.0].value.shape().to_vec();
                        let rest: usize = sh[2..].iter().product();
                        let gs = g.as_slice().unwrap();
                        let mut d = vec![0.0; lo[a.0].value.len()];
                        for (i, chunk) in d.chunks_mut(rest).enumerate() {
                            let gv = gs[i] / rest as f64;
                            for e in chunk.iter_mut() {
                                *e = gv;
                            }
                        }
                        let d = Arr::from_shape_vec(IxDyn(&sh), d).unwrap();
                        accum(lo, a, d);
                    }
                }
                Op::L2NormalizeRows(a) => {
                    let g = node.grad.take().unwrap();
                    let a = *a;
                    if lo[a.0].needs {
                        let xv = lo[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let mut d = xv.to_owned();
                        for ((mut drow, xrow), grow) in d
                            .rows_mut()
                            .into_iter()
                            .zip(xv.rows())
                            .zip(g2.rows())
                        {
                            let n = (xrow.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
                            let dot: f64 = grow.iter().zip(xrow.iter()).map(|(g, x)| g * x).sum();
                            for ((d, &x), &g) in
                                drow.iter_mut().zip(xrow.iter()).zip(grow.iter())
                            {
                                *d = g / n - x * dot / (n * n * n);
                            }
                        }
                        accum(lo, a, d.into_dyn());
                    }
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let g = node.grad.take().unwrap();
                    let logits = *logits;
                    if lo[logits.0].needs {
                        let gv = *g.iter().next().unwrap();
                        let n = labels.len() as f64;
                        let mut d = probs.clone();
                        {
                            let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                            for (i, &y) in labels.iter().enumerate() {
                                d2[[i, y]] -= 1.0;
                            }
                        }
                        d.mapv_inplace(|p| p * gv / n);
                        accum(lo, logits, d);
                    }
                }
                Op::BceLogitsMean { logits, targets } => {
                    let g = node.grad.take().unwrap();
                    let logits = *logits;
                    if lo[logits.0].needs {
                        let gv = *g.iter().next().unwrap();
                        let n = targets.len() as f64;
                        let mut d = lo[logits.0].value.clone();
                        ndarray::Zip::from(&mut d).and(targets).for_each(|d, &t| {
                            *d = (sigm(*d) - t) * gv / n;
                        });
                        accum(lo, logits, d);
                    }
                }
                Op::GradReverse(a, omega) => {
                    let g = node.grad.take().unwrap();
                    let (a, omega) = (*a, *omega);
                    if lo[a.0].needs {
                        accum(lo, a, g.mapv(|x| -omega * x));
                    }
                }
            }
        }
    }
}

fn accum(nodes: &mut [Node], t: TensorRef, delta: Arr) {
    let node = &mut nodes[t.0];
    if !node.needs {
        return;
    }
    debug_assert_eq!(node.value.shape(), delta.shape(), "gradient shape mismatch");
    match &mut node.grad {
        Some(g) => *g += &delta,
        None => node.grad = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_check, rng_for, Arr, ParamSet};
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    /// Build a parameter set of random tensors, run the graph builder to a
    /// scalar loss, and compare analytic gradients against central
    /// differences. `lo..hi` bounds the random values (kept away from kinks
    /// for relu/abs tests).
    fn check(
        shapes: &[&[usize]],
        lo: f64,
        hi: f64,
        tol: f64,
        build: impl Fn(&mut Tape, &[TensorRef]) -> TensorRef,
    ) {
        let mut rng = rng_for(7, "gradcheck");
        let mut set = ParamSet::new("t");
        for (i, sh) in shapes.iter().enumerate() {
            let n: usize = sh.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            set.add(format!("p{i}"), Arr::from_shape_vec(IxDyn(sh), data).unwrap());
        }
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = (0..shapes.len()).map(|i| tape.param(0, &set, i)).collect();
        let loss = build(&mut tape, &refs);
        tape.backward(loss, &mut [&mut set]);
        let analytic = set.flat_grads();
        let err = finite_diff_check(&mut set, &analytic, 1e-5, |s| {
            let mut t = Tape::new();
            let refs: Vec<TensorRef> = (0..shapes.len()).map(|i| t.param(0, s, i)).collect();
            let l = build(&mut t, &refs);
            t.scalar(l)
        });
        assert!(err < tol, "max relative gradient error {err}");
    }

    #[test]
    fn grad_elementwise_chain() {
        check(&[&[3, 4], &[3, 4]], -2.0, 2.0, 1e-6, |t, p| {
            let a = t.mul(p[0], p[1]);
            let b = t.add(a, p[0]);
            let c = t.sub(b, p[1]);
            let d = t.scale(c, 0.7);
            let e = t.add_scalar(d, 0.3);
            let f = t.neg(e);
            t.sum_all(f)
        });
    }

    #[test]
    fn grad_nonlinearities() {
        check(&[&[2, 5]], 0.2, 1.5, 1e-6, |t, p| {
            let a = t.ln(p[0]);
            let b = t.exp(a);
            let c = t.sigmoid(b);
            let d = t.relu(c);
            t.mean_all(d)
        });
        // abs and relu checked away from zero
        check(&[&[4, 4]], 0.3, 2.0, 1e-6, |t, p| {
            let a = t.neg(p[0]);
            let b = t.abs(a);
            let c = t.relu(b);
            t.sum_all(c)
        });
    }

    #[test]
    fn grad_matmul_and_bias() {
        check(&[&[3, 4], &[4, 2], &[2]], -1.0, 1.0, 1e-6, |t, p| {
            let y = t.matmul(p[0], p[1]);
            let y = t.add_bias(y, p[2]);
            let y = t.relu(y);
            t.sum_all(y)
        });
        check(&[&[3, 4], &[5, 4]], -1.0, 1.0, 1e-6, |t, p| {
            let y = t.matmul_nt(p[0], p[1]);
            t.mean_all(y)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[&[2, 3, 4]], -1.0, 1.0, 1e-6, |t, p| {
            let a = t.permute(p[0], &[2, 0, 1]);
            let b = t.reshape(a, &[4, 6]);
            let c = t.sum_axis(b, 1);
            let d = t.reshape(c, &[2, 2]);
            let e = t.sum_axis(d, 0);
            t.sum_all(e)
        });
        check(&[&[2, 3], &[2, 3]], -1.0, 1.0, 1e-6, |t, p| {
            let a = t.concat(1, &[p[0], p[1]]);
            let b = t.concat(0, &[a, a]);
            t.mean_all(b)
        });
    }

    #[test]
    fn grad_diag_and_l2norm() {
        check(&[&[4, 4]], -1.0, 1.0, 1e-6, |t, p| {
            let d = t.diag(p[0]);
            let d = t.reshape(d, &[2, 2]);
            t.sum_all(d)
        });
        check(&[&[3, 5]], -1.5, 1.5, 1e-6, |t, p| {
            let y = t.l2_normalize_rows(p[0]);
            let s = t.mul(y, y);
            let w = t.exp(y);
            let s = t.add(s, w);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_color_affine_and_gather() {
        let aff = ColorAffine {
            mat: vec![
                [[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.0, 0.3, 0.7]],
                [[1.1, 0.0, 0.0], [0.0, 0.5, 0.5], [0.25, 0.25, 0.5]],
            ],
            off: vec![[0.1, -0.1, 0.0], [0.0, 0.05, -0.05]],
        };
        check(&[&[2, 3, 4, 4]], -1.0, 1.0, 1e-6, move |t, p| {
            let y = t.color_affine(p[0], aff.clone());
            t.mean_all(y)
        });
        // gather with duplicate source indices exercises scatter-add
        let idx: Vec<usize> = vec![0, 5, 5, 8, 3, 3, 1, 2, 0, 0, 5, 5, 8, 3, 3, 1, 2, 0];
        check(&[&[2, 2, 3, 3]], -1.0, 1.0, 1e-6, move |t, p| {
            let y = t.gather_hw(p[0], idx.clone(), 3, 3);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_pooling_and_upsample() {
        check(&[&[2, 3, 4, 4]], -1.0, 1.0, 1e-6, |t, p| {
            let y = t.avg_pool2d(p[0], 2);
            let y = t.upsample2x(y);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
        check(&[&[2, 3, 2, 4, 4]], -1.0, 1.0, 1e-6, |t, p| {
            let y = t.global_avg_pool(p[0]);
            let y = t.exp(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_conv2d() {
        check(&[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], -1.0, 1.0, 1e-5, |t, p| {
            let y = t.conv2d(p[0], p[1], p[2], 1, 1);
            let y = t.relu(y);
            t.sum_all(y)
        });
        check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], -1.0, 1.0, 1e-5, |t, p| {
            let y = t.conv2d(p[0], p[1], p[2], 2, 1);
            let y = t.mul(y, y);
            t.mean_all(y)
        });
    }

    #[test]
    fn grad_conv3d() {
        check(
            &[&[1, 2, 4, 5, 5], &[3, 2, 3, 3, 3], &[3]],
            -1.0,
            1.0,
            1e-5,
            |t, p| {
                let y = t.conv3d(p[0], p[1], p[2], (1, 2, 2), (1, 1, 1));
                let y = t.relu(y);
                t.sum_all(y)
            },
        );
    }

    #[test]
    fn grad_fused_losses() {
        let labels = vec![0usize, 2, 1];
        check(&[&[3, 4]], -2.0, 2.0, 1e-6, move |t, p| {
            t.softmax_ce(p[0], &labels)
        });
        let mut rng = rng_for(3, "bce-targets");
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let targets = Arr::from_shape_vec(IxDyn(&[2, 3]), targets).unwrap();
        check(&[&[2, 3]], -2.0, 2.0, 1e-6, move |t, p| {
            t.bce_logits_mean(p[0], targets.clone())
        });
    }

    #[test]
    fn grad_reverse_scales_and_negates() {
        // loss = sum(x) + sum(reverse(x, 0.5)) has gradient 1 - 0.5 = 0.5
        let mut set = ParamSet::new("t");
        set.add("x", Arr::from_elem(IxDyn(&[3]), 1.0));
        let mut tape = Tape::new();
        let x = tape.param(0, &set, 0);
        let a = tape.sum_all(x);
        let r = tape.grad_reverse(x, 0.5);
        let b = tape.sum_all(r);
        let loss = tape.add(a, b);
        tape.backward(loss, &mut [&mut set]);
        for &g in set.entries()[0].grad.iter() {
            assert!((g - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_reverse_forward_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = tape.grad_reverse(x, 2.0);
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn frozen_subgraph_receives_nothing_and_passes_through() {
        // y = frozen_w * x ; dL/dx must still flow while frozen_w stays zero-grad.
        let mut frozen = ParamSet::new("f");
        frozen.add("w", Arr::from_elem(IxDyn(&[2, 2]), 2.0));
        frozen.freeze();
        let mut live = ParamSet::new("l");
        live.add("x", Arr::from_elem(IxDyn(&[2, 2]), 3.0));

        let mut tape = Tape::new();
        let w = tape.param(0, &frozen, 0);
        let x = tape.param(1, &live, 0);
        let y = tape.mul(w, x);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut [&mut frozen, &mut live]);

        assert!(frozen.entries()[0].grad.iter().all(|&g| g == 0.0));
        assert!(live.entries()[0].grad.iter().all(|&g| (g - 2.0).abs() < 1e-12));
    }

    #[test]
    fn fully_frozen_graph_skips_backward() {
        let mut frozen = ParamSet::new("f");
        frozen.add("w", Arr::from_elem(IxDyn(&[4]), 1.5));
        frozen.freeze();
        let mut tape = Tape::new();
        let w = tape.param(0, &frozen, 0);
        let y = tape.exp(w);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut [&mut frozen]);
        assert!(frozen.entries()[0].grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_grad_is_retained() {
        let mut tape = Tape::new();
        let x = tape.input(Arr::from_elem(IxDyn(&[3]), 2.0));
        let y = tape.mul(x, x);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut []);
        let g = tape.input_grad(x).unwrap();
        for &v in g.iter() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // x used twice: d(sum(x*x) + sum(x))/dx = 2x + 1
        let mut set = ParamSet::new("t");
        set.add("x", Arr::from_shape_vec(IxDyn(&[2]), vec![3.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(0, &set, 0);
        let sq = tape.mul(x, x);
        let a = tape.sum_all(sq);
        let b = tape.sum_all(x);
        let loss = tape.add(a, b);
        tape.backward(loss, &mut [&mut set]);
        let g = &set.entries()[0].grad;
        assert!((g[[0]] - 7.0).abs() < 1e-12);
        assert!((g[[1]] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "different parameter set")]
    fn mismatched_sink_panics() {
        let mut a = ParamSet::new("a");
        a.add("w", Arr::from_elem(IxDyn(&[1]), 1.0));
        let mut b = ParamSet::new("b");
        b.add("w", Arr::from_elem(IxDyn(&[1]), 1.0));
        let mut tape = Tape::new();
        let w = tape.param(0, &a, 0);
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut [&mut b]);
    }
}
