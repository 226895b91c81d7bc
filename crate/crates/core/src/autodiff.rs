//! Reverse-mode automatic differentiation over dynamic-rank f64 tensors.
//!
//! A [`Tape`] records a computation graph of tensor operations; calling
//! [`Tape::backward`] on a scalar node produces exact gradients for every
//! leaf created with `requires_grad = true`. All arithmetic is double
//! precision so analytic gradients can be validated against central finite
//! differences at tight tolerances.
//!
//! Besides generic element-wise primitives, the tape provides the handful of
//! structured operations the model needs: strided 2-D convolution,
//! occurrence-weighted spatial pooling, batched cosine similarity against a
//! prototype bank, grouped max/dot reductions over per-class prototype
//! slots, patch-wise max cosine similarity, and a fixed linear operator
//! applied over the spatial grid.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Ix2, Ix3, Ix4, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Abs(usize),
    PowConst(usize, f64),
    Clamp(usize, f64, f64),
    SumAll(usize),
    /// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    /// feat: [B,D,H,W], maps: [B,M,H,W] -> [B,M,D]; out[b,m,d] = sum_u maps[b,m,u] * feat[b,d,u]
    WeightedPool { feat: usize, maps: usize },
    /// feats: [B,M,D], protos: [M,D] -> [B,M]; zero-norm feature rows yield similarity 0 with zero gradient
    CosineSim { feats: usize, protos: usize },
    /// x: [B,D] -> [B,M,D], replicated along the middle axis
    ExpandMid { x: usize, m: usize },
    /// sims: [B,M], weights: [M], M = C*k -> [B,C]; out[b,c] = sum_j sims[b,c*k+j] * weights[c*k+j]
    GroupDot { sims: usize, weights: usize, k: usize },
    /// x: [B,M], M = C*k -> [B,C]; max over valid slots of each group, gradient routed to the first argmax
    GroupMax { x: usize, k: usize, valid: Vec<bool> },
    /// x: [B,M,H,W] -> [B,M,H,W]; each H*W plane is mapped through the fixed matrix [HW,HW]
    LinMapSpatial { x: usize, mat: Array2<f64> },
    /// x: [B,D,H,W] -> [B,D]; spatial mean
    MeanSpatial(usize),
    /// feat: [B,D,H,W], protos: [M, r*r*D] -> [B,M]; max cosine similarity over all r x r
    /// patches (stride 1), gradient routed to the first (row-major) argmax position
    PatchCosMax { feat: usize, protos: usize, r: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every grad-requiring node of a tape after `backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.len(), 1, "scalar_value on non-scalar node");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a.0);
        self.push(v, Op::Neg(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a.0);
        self.push(v, Op::AddScalar(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a.0);
        self.push(v, Op::Ln(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a.0);
        self.push(v, Op::Abs(a.0), ng)
    }

    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(e));
        let ng = self.needs(a.0);
        self.push(v, Op::PowConst(a.0, e), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a.0);
        self.push(v, Op::Clamp(a.0, lo, hi), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a.0);
        self.push(scalar(s), Op::SumAll(a.0), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be [B,Cin,H,W]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((batch, cout, ho, wo));
        for bi in 0..batch {
            let col = im2col(xv.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
            let res = w2.dot(&col); // [Cout, ho*wo]
            let mut ob = out.index_axis_mut(ndarray::Axis(0), bi);
            for c in 0..cout {
                for u in 0..ho * wo {
                    ob[[c, u / wo, u % wo]] = res[[c, u]] + bias[c];
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        self.push(out.into_dyn(), Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }, ng)
    }

    pub fn weighted_pool(&mut self, feat: Var, maps: Var) -> Var {
        let fs = self.value(feat).shape().to_vec();
        let ms = self.value(maps).shape().to_vec();
        assert_eq!(fs.len(), 4, "weighted_pool: feat must be [B,D,H,W]");
        assert_eq!(ms.len(), 4, "weighted_pool: maps must be [B,M,H,W]");
        assert_eq!((fs[0], fs[2], fs[3]), (ms[0], ms[2], ms[3]), "weighted_pool: grid mismatch");
        let (batch, d, hw) = (fs[0], fs[1], fs[2] * fs[3]);
        let m = ms[1];
        let fv = self.value(feat).view().into_shape_with_order((batch, d, hw)).unwrap().to_owned();
        let mv = self.value(maps).view().into_shape_with_order((batch, m, hw)).unwrap().to_owned();
        let mut out = Array3::<f64>::zeros((batch, m, d));
        for bi in 0..batch {
            let mb = mv.index_axis(ndarray::Axis(0), bi); // [M, HW]
            let fb = fv.index_axis(ndarray::Axis(0), bi); // [D, HW]
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&mb.dot(&fb.t()));
        }
        let ng = self.needs(feat.0) || self.needs(maps.0);
        self.push(out.into_dyn(), Op::WeightedPool { feat: feat.0, maps: maps.0 }, ng)
    }

    pub fn cosine_sim(&mut self, feats: Var, protos: Var) -> Var {
        let fs = self.value(feats).shape().to_vec();
        let ps = self.value(protos).shape().to_vec();
        assert_eq!(fs.len(), 3, "cosine_sim: feats must be [B,M,D]");
        assert_eq!(ps.len(), 2, "cosine_sim: protos must be [M,D]");
        assert_eq!(fs[1], ps[0], "cosine_sim: prototype count mismatch");
        assert_eq!(fs[2], ps[1], "cosine_sim: dimension mismatch");
        let (batch, m) = (fs[0], fs[1]);
        let fv = self.value(feats).view().into_dimensionality::<Ix3>().unwrap();
        let pv = self.value(protos).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f64>::zeros((batch, m));
        for bi in 0..batch {
            for mi in 0..m {
                let f = fv.slice(ndarray::s![bi, mi, ..]);
                let p = pv.row(mi);
                out[[bi, mi]] = cosine(f.as_slice().unwrap(), p.as_slice().unwrap());
            }
        }
        let ng = self.needs(feats.0) || self.needs(protos.0);
        self.push(out.into_dyn(), Op::CosineSim { feats: feats.0, protos: protos.0 }, ng)
    }

    pub fn expand_mid(&mut self, x: Var, m: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "expand_mid: input must be [B,D]");
        let (batch, d) = (xs[0], xs[1]);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array3::<f64>::zeros((batch, m, d));
        for mi in 0..m {
            out.slice_mut(ndarray::s![.., mi, ..]).assign(&xv);
        }
        let ng = self.needs(x.0);
        self.push(out.into_dyn(), Op::ExpandMid { x: x.0, m }, ng)
    }

    pub fn group_dot(&mut self, sims: Var, weights: Var, k: usize) -> Var {
        let ss = self.value(sims).shape().to_vec();
        let ws = self.value(weights).shape().to_vec();
        assert_eq!(ss.len(), 2, "group_dot: sims must be [B,M]");
        assert_eq!(ws, vec![ss[1]], "group_dot: weights must be [M]");
        assert_eq!(ss[1] % k, 0, "group_dot: M not divisible by k");
        let (batch, m) = (ss[0], ss[1]);
        let c = m / k;
        let sv = self.value(sims).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(weights).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array2::<f64>::zeros((batch, c));
        for bi in 0..batch {
            for ci in 0..c {
                out[[bi, ci]] = (0..k).map(|j| sv[[bi, ci * k + j]] * wv[ci * k + j]).sum();
            }
        }
        let ng = self.needs(sims.0) || self.needs(weights.0);
        self.push(out.into_dyn(), Op::GroupDot { sims: sims.0, weights: weights.0, k }, ng)
    }

    pub fn group_max(&mut self, x: Var, k: usize, valid: Vec<bool>) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "group_max: input must be [B,M]");
        assert_eq!(valid.len(), xs[1], "group_max: valid mask length mismatch");
        assert_eq!(xs[1] % k, 0, "group_max: M not divisible by k");
        let (batch, m) = (xs[0], xs[1]);
        let c = m / k;
        for ci in 0..c {
            assert!(
                (0..k).any(|j| valid[ci * k + j]),
                "group_max: group {ci} has no valid slot"
            );
        }
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f64>::zeros((batch, c));
        for bi in 0..batch {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                for j in 0..k {
                    if valid[ci * k + j] && xv[[bi, ci * k + j]] > best {
                        best = xv[[bi, ci * k + j]];
                    }
                }
                out[[bi, ci]] = best;
            }
        }
        let ng = self.needs(x.0);
        self.push(out.into_dyn(), Op::GroupMax { x: x.0, k, valid }, ng)
    }

    pub fn lin_map_spatial(&mut self, x: Var, mat: Array2<f64>) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "lin_map_spatial: input must be [B,M,H,W]");
        let (batch, m, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(mat.shape(), &[hw, hw], "lin_map_spatial: matrix shape mismatch");
        let xv = self.value(x).view().into_shape_with_order((batch * m, hw)).unwrap().to_owned();
        let out = xv.dot(&mat.t()); // row i -> mat * row
        let out = out.into_shape_with_order(IxDyn(&xs)).unwrap();
        let ng = self.needs(x.0);
        self.push(out, Op::LinMapSpatial { x: x.0, mat }, ng)
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "mean_spatial: input must be [B,D,H,W]");
        let (batch, d, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).view().into_shape_with_order((batch, d, hw)).unwrap();
        let mut out = Array2::<f64>::zeros((batch, d));
        for bi in 0..batch {
            for di in 0..d {
                out[[bi, di]] = xv.slice(ndarray::s![bi, di, ..]).sum() / hw as f64;
            }
        }
        let ng = self.needs(x.0);
        self.push(out.into_dyn(), Op::MeanSpatial(x.0), ng)
    }

    pub fn patch_cos_max(&mut self, feat: Var, protos: Var, r: usize) -> Var {
        let fs = self.value(feat).shape().to_vec();
        let ps = self.value(protos).shape().to_vec();
        assert_eq!(fs.len(), 4, "patch_cos_max: feat must be [B,D,H,W]");
        assert_eq!(ps.len(), 2, "patch_cos_max: protos must be [M,P]");
        let (batch, d, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        assert!(r >= 1 && r <= h && r <= w, "patch_cos_max: patch size out of range");
        assert_eq!(ps[1], r * r * d, "patch_cos_max: prototype length mismatch");
        let m = ps[0];
        let fv = self.value(feat).view().into_dimensionality::<Ix4>().unwrap();
        let pv = self.value(protos).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f64>::zeros((batch, m));
        for bi in 0..batch {
            for mi in 0..m {
                let (best, _, _) = best_patch(fv.index_axis(ndarray::Axis(0), bi), pv.row(mi).as_slice().unwrap(), r);
                out[[bi, mi]] = best;
            }
        }
        let ng = self.needs(feat.0) || self.needs(protos.0);
        self.push(out.into_dyn(), Op::PatchCosMax { feat: feat.0, protos: protos.0, r }, ng)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// reachable from the root that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], j: usize, delta: Tensor, nodes: &[Node]| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone(), &self.nodes);
                add_to(grads, *b, g.clone(), &self.nodes);
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone(), &self.nodes);
                add_to(grads, *b, g.mapv(|x| -x), &self.nodes);
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[*b].value;
                let gb = g * &self.nodes[*a].value;
                add_to(grads, *a, ga, &self.nodes);
                add_to(grads, *b, gb, &self.nodes);
            }
            Op::Neg(a) => add_to(grads, *a, g.mapv(|x| -x), &self.nodes),
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|x| c * x), &self.nodes),
            Op::AddScalar(a) => add_to(grads, *a, g.clone(), &self.nodes),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask, &self.nodes);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let dy = y.mapv(|s| s * (1.0 - s));
                add_to(grads, *a, g * &dy, &self.nodes);
            }
            Op::Ln(a) => {
                let dx = self.nodes[*a].value.mapv(|x| 1.0 / x);
                add_to(grads, *a, g * &dx, &self.nodes);
            }
            Op::Abs(a) => {
                let sgn = self.nodes[*a].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                add_to(grads, *a, g * &sgn, &self.nodes);
            }
            Op::PowConst(a, e) => {
                if *e == 0.0 {
                    return;
                }
                let e = *e;
                let dx = self.nodes[*a].value.mapv(|x| e * x.powf(e - 1.0));
                add_to(grads, *a, g * &dx, &self.nodes);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self.nodes[*a].value.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask, &self.nodes);
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                let delta = Tensor::from_elem(self.nodes[*a].value.raw_dim(), gs);
                add_to(grads, *a, delta, &self.nodes);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::WeightedPool { feat, maps } => {
                self.weighted_pool_backward(*feat, *maps, g, grads);
            }
            Op::CosineSim { feats, protos } => {
                self.cosine_backward(*feats, *protos, g, grads);
            }
            Op::ExpandMid { x, m } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (batch, _, d) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let mut gx = Array2::<f64>::zeros((batch, d));
                for mi in 0..*m {
                    gx += &gv.slice(ndarray::s![.., mi, ..]);
                }
                add_to(grads, *x, gx.into_dyn(), &self.nodes);
            }
            Op::GroupDot { sims, weights, k } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let sv = self.nodes[*sims].value.view().into_dimensionality::<Ix2>().unwrap();
                let wv = self.nodes[*weights].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let (batch, m) = (sv.shape()[0], sv.shape()[1]);
                let mut gs = Array2::<f64>::zeros((batch, m));
                let mut gw = Array1::<f64>::zeros(m);
                for bi in 0..batch {
                    for mi in 0..m {
                        let gc = gv[[bi, mi / k]];
                        gs[[bi, mi]] = gc * wv[mi];
                        gw[mi] += gc * sv[[bi, mi]];
                    }
                }
                add_to(grads, *sims, gs.into_dyn(), &self.nodes);
                add_to(grads, *weights, gw.into_dyn(), &self.nodes);
            }
            Op::GroupMax { x, k, valid } => {
                let k = *k;
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let (batch, m) = (xv.shape()[0], xv.shape()[1]);
                let c = m / k;
                let mut gx = Array2::<f64>::zeros((batch, m));
                for bi in 0..batch {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = usize::MAX;
                        for j in 0..k {
                            let idx = ci * k + j;
                            if valid[idx] && xv[[bi, idx]] > best {
                                best = xv[[bi, idx]];
                                arg = idx;
                            }
                        }
                        gx[[bi, arg]] = gv[[bi, ci]];
                    }
                }
                add_to(grads, *x, gx.into_dyn(), &self.nodes);
            }
            Op::LinMapSpatial { x, mat } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (batch, m, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gv = g.view().into_shape_with_order((batch * m, hw)).unwrap().to_owned();
                let gx = gv.dot(mat); // transpose of forward: (mat^T applied per row)
                let gx = gx.into_shape_with_order(IxDyn(&xs)).unwrap();
                add_to(grads, *x, gx, &self.nodes);
            }
            Op::MeanSpatial(x) => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (batch, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = (h * w) as f64;
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((batch, d, h, w));
                for bi in 0..batch {
                    for di in 0..d {
                        gx.slice_mut(ndarray::s![bi, di, .., ..]).fill(gv[[bi, di]] / hw);
                    }
                }
                add_to(grads, *x, gx.into_dyn(), &self.nodes);
            }
            Op::PatchCosMax { feat, protos, r } => {
                self.patch_cos_backward(*feat, *protos, *r, g, grads);
            }
        }
    }

    fn conv2d_backward(&self, x: usize, w: usize, b: usize, stride: usize, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let ho = gv.shape()[2];
        let wo = gv.shape()[3];
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let w2 = self.nodes[w]
            .value
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut gx = Array4::<f64>::zeros((batch, cin, h, wd));
        let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
        let mut gb = Array1::<f64>::zeros(cout);
        for bi in 0..batch {
            let mut gout = Array2::<f64>::zeros((cout, ho * wo));
            for c in 0..cout {
                for u in 0..ho * wo {
                    gout[[c, u]] = gv[[bi, c, u / wo, u % wo]];
                    gb[c] += gout[[c, u]];
                }
            }
            if self.nodes[w].needs_grad {
                let col = im2col(xv.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
                gw += &gout.dot(&col.t());
            }
            if self.nodes[x].needs_grad {
                let gcol = w2.t().dot(&gout); // [cin*kh*kw, ho*wo]
                col2im(
                    &gcol,
                    gx.index_axis_mut(ndarray::Axis(0), bi),
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                );
            }
        }
        let nodes = &self.nodes;
        if nodes[x].needs_grad {
            match &mut grads[x] {
                Some(acc) => *acc += &gx.into_dyn(),
                slot @ None => *slot = Some(gx.into_dyn()),
            }
        }
        if nodes[w].needs_grad {
            let gw = gw.into_shape_with_order(IxDyn(&ws)).unwrap();
            match &mut grads[w] {
                Some(acc) => *acc += &gw,
                slot @ None => *slot = Some(gw),
            }
        }
        if nodes[b].needs_grad {
            match &mut grads[b] {
                Some(acc) => *acc += &gb.clone().into_dyn(),
                slot @ None => *slot = Some(gb.into_dyn()),
            }
        }
    }

    fn weighted_pool_backward(&self, feat: usize, maps: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let fs = self.nodes[feat].value.shape().to_vec();
        let ms = self.nodes[maps].value.shape().to_vec();
        let (batch, d, hw) = (fs[0], fs[1], fs[2] * fs[3]);
        let m = ms[1];
        let fv = self.nodes[feat].value.view().into_shape_with_order((batch, d, hw)).unwrap().to_owned();
        let mv = self.nodes[maps].value.view().into_shape_with_order((batch, m, hw)).unwrap().to_owned();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap(); // [B,M,D]
        if self.nodes[feat].needs_grad {
            let mut gf = Array3::<f64>::zeros((batch, d, hw));
            for bi in 0..batch {
                let gb = gv.index_axis(ndarray::Axis(0), bi); // [M,D]
                let mb = mv.index_axis(ndarray::Axis(0), bi); // [M,HW]
                gf.index_axis_mut(ndarray::Axis(0), bi).assign(&gb.t().dot(&mb));
            }
            let gf = gf.into_shape_with_order(IxDyn(&fs)).unwrap();
            match &mut grads[feat] {
                Some(acc) => *acc += &gf,
                slot @ None => *slot = Some(gf),
            }
        }
        if self.nodes[maps].needs_grad {
            let mut gm = Array3::<f64>::zeros((batch, m, hw));
            for bi in 0..batch {
                let gb = gv.index_axis(ndarray::Axis(0), bi); // [M,D]
                let fb = fv.index_axis(ndarray::Axis(0), bi); // [D,HW]
                gm.index_axis_mut(ndarray::Axis(0), bi).assign(&gb.dot(&fb));
            }
            let gm = gm.into_shape_with_order(IxDyn(&ms)).unwrap();
            match &mut grads[maps] {
                Some(acc) => *acc += &gm,
                slot @ None => *slot = Some(gm),
            }
        }
    }

    fn cosine_backward(&self, feats: usize, protos: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let fv = self.nodes[feats].value.view().into_dimensionality::<Ix3>().unwrap();
        let pv = self.nodes[protos].value.view().into_dimensionality::<Ix2>().unwrap();
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let (batch, m, d) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let mut gf = Array3::<f64>::zeros((batch, m, d));
        let mut gp = Array2::<f64>::zeros((m, d));
        for bi in 0..batch {
            for mi in 0..m {
                let f = fv.slice(ndarray::s![bi, mi, ..]);
                let p = pv.row(mi);
                let nf = norm(f.as_slice().unwrap());
                let np = norm(p.as_slice().unwrap());
                if nf == 0.0 || np == 0.0 {
                    continue; // similarity pinned to 0, zero gradient
                }
                let dot: f64 = f.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                let s = dot / (nf * np);
                let go = gv[[bi, mi]];
                for di in 0..d {
                    gf[[bi, mi, di]] += go * (p[di] / (nf * np) - s * f[di] / (nf * nf));
                    gp[[mi, di]] += go * (f[di] / (nf * np) - s * p[di] / (np * np));
                }
            }
        }
        if self.nodes[feats].needs_grad {
            let gf = gf.into_dyn();
            match &mut grads[feats] {
                Some(acc) => *acc += &gf,
                slot @ None => *slot = Some(gf),
            }
        }
        if self.nodes[protos].needs_grad {
            let gp = gp.into_dyn();
            match &mut grads[protos] {
                Some(acc) => *acc += &gp,
                slot @ None => *slot = Some(gp),
            }
        }
    }

    fn patch_cos_backward(&self, feat: usize, protos: usize, r: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let fv = self.nodes[feat].value.view().into_dimensionality::<Ix4>().unwrap();
        let pv = self.nodes[protos].value.view().into_dimensionality::<Ix2>().unwrap();
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let (batch, d, _, _) = (fv.shape()[0], fv.shape()[1], fv.shape()[2], fv.shape()[3]);
        let m = pv.shape()[0];
        let plen = pv.shape()[1];
        let mut gf = Array4::<f64>::zeros(fv.raw_dim());
        let mut gp = Array2::<f64>::zeros(pv.raw_dim());
        for bi in 0..batch {
            let fb = fv.index_axis(ndarray::Axis(0), bi);
            for mi in 0..m {
                let p = pv.row(mi);
                let (_, pi, pj) = best_patch(fb, p.as_slice().unwrap(), r);
                let patch = extract_patch(fb, pi, pj, r);
                let nf = norm(&patch);
                let np = norm(p.as_slice().unwrap());
                if nf == 0.0 || np == 0.0 {
                    continue;
                }
                let dot: f64 = patch.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                let s = dot / (nf * np);
                let go = gv[[bi, mi]];
                for idx in 0..plen {
                    let gpatch = go * (p[idx] / (nf * np) - s * patch[idx] / (nf * nf));
                    gp[[mi, idx]] += go * (patch[idx] / (nf * np) - s * p[idx] / (np * np));
                    // patch flattening order: channel-major, then row, then col
                    let di = idx / (r * r);
                    let rem = idx % (r * r);
                    let _ = d;
                    gf[[bi, di, pi + rem / r, pj + rem % r]] += gpatch;
                }
            }
        }
        if self.nodes[feat].needs_grad {
            let gf = gf.into_dyn();
            match &mut grads[feat] {
                Some(acc) => *acc += &gf,
                slot @ None => *slot = Some(gf),
            }
        }
        if self.nodes[protos].needs_grad {
            let gp = gp.into_dyn();
            match &mut grads[protos] {
                Some(acc) => *acc += &gp,
                slot @ None => *slot = Some(gp),
            }
        }
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

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with the zero-norm convention: either operand with zero
/// norm yields similarity 0.
pub fn cosine(f: &[f64], p: &[f64]) -> f64 {
    let nf = norm(f);
    let np = norm(p);
    if nf == 0.0 || np == 0.0 {
        return 0.0;
    }
    let dot: f64 = f.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
    dot / (nf * np)
}

/// Best (max cosine) r x r patch of a [D,H,W] feature map against a flat
/// prototype; ties resolve to the lowest row-major position. Returns
/// (similarity, row, col).
pub fn best_patch(feat: ArrayView3<f64>, proto: &[f64], r: usize) -> (f64, usize, usize) {
    let (_, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let mut best = f64::NEG_INFINITY;
    let (mut bi, mut bj) = (0, 0);
    for i in 0..=h - r {
        for j in 0..=w - r {
            let patch = extract_patch(feat, i, j, r);
            let s = cosine(&patch, proto);
            if s > best {
                best = s;
                bi = i;
                bj = j;
            }
        }
    }
    (best, bi, bj)
}

/// Flatten the r x r patch at (i, j): channel-major, then row, then col.
pub fn extract_patch(feat: ArrayView3<f64>, i: usize, j: usize, r: usize) -> Vec<f64> {
    let d = feat.shape()[0];
    let mut out = Vec::with_capacity(d * r * r);
    for di in 0..d {
        for ri in 0..r {
            for rj in 0..r {
                out.push(feat[[di, i + ri, j + rj]]);
            }
        }
    }
    out
}

fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        col[[row, oi * wo + oj]] = x[[c, ii - pad, jj - pad]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    mut gx: ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (_, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let cin = gx.shape()[0];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        gx[[c, ii - pad, jj - pad]] += gcol[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
}

#[allow(unused)]
fn unused_view4(_: ArrayView4<f64>) {}
