//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node.
//!
//! The op set is exactly what the network and its losses need: convolution,
//! elementwise arithmetic, pooling, resampling, spatial softmax and the
//! prototype/distance reductions of the skeleton loss.

use crate::conv::{self, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of the pair-weight decay in the pairwise-distance loss.
#[derive(Debug, Clone, Copy)]
pub enum Decay {
    Fixed(f64),
    /// Scalar node; its value is used as-is.
    Node(Var),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Sum(Var),
    SpatialSoftmax(Var),
    Expectation(Var),
    SampledExpectation {
        p: Var,
        /// Per (batch, channel): distinct drawn pixel indices and their counts.
        draws: Vec<Vec<(usize, u32)>>,
        samples: usize,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
    },
    PointDistance {
        coords: Var,
        gt: Tensor,
        valid: Vec<bool>,
    },
    PairwiseDistance {
        coords: Var,
        gt: Tensor,
        valid: Vec<bool>,
        decay: Decay,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        );
        self.push(out, Op::Conv { x, w, b, spec })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape");
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * k).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape");
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape");
        self.push(out, Op::Relu(a))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let src = vx.data();
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = vx.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        let plane = h * w;
        for b in 0..n {
            let mut off = 0;
            for &p in parts {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert!(pn == n && ph == h && pw == w, "concat: shape mismatch");
                let src = &self.value(p).data()[b * pc * plane..][..pc * plane];
                out.data_mut()[(b * total + off) * plane..][..pc * plane].copy_from_slice(src);
                off += pc;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Softmax over the spatial plane of every (batch, channel) pair,
    /// stabilised by subtracting the plane maximum.
    pub fn spatial_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dims4();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for (src, dst) in va
            .data()
            .chunks(plane)
            .zip(out.data_mut().chunks_mut(plane))
        {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        self.push(out, Op::SpatialSoftmax(a))
    }

    /// Expected (row, col) position under each probability plane:
    /// `[n, c, h, w] -> [n, c, 2]`.
    pub fn expectation(&mut self, p: Var) -> Var {
        let vp = self.value(p);
        let (n, c, h, w) = vp.dims4();
        let mut out = Tensor::zeros(&[n, c, 2]);
        for (k, plane) in vp.data().chunks(h * w).enumerate() {
            let (mut r, mut q) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let pv = plane[y * w + x];
                    r += pv * y as f64;
                    q += pv * x as f64;
                }
            }
            out.data_mut()[2 * k] = r;
            out.data_mut()[2 * k + 1] = q;
        }
        self.push(out, Op::Expectation(p))
    }

    /// Mean position of `samples` pixels drawn per plane. `draws[k]` lists the
    /// distinct pixels drawn for plane `k` with their multiplicities.
    ///
    /// The value is the plain sample mean. The gradient flows only through the
    /// probabilities of the drawn pixels: each draw contributes
    /// `coord(p) * P(p) / stop_grad(P(p))` to the mean.
    pub fn sampled_expectation(
        &mut self,
        p: Var,
        draws: Vec<Vec<(usize, u32)>>,
        samples: usize,
    ) -> Var {
        let vp = self.value(p);
        let (n, c, _h, w) = vp.dims4();
        assert_eq!(draws.len(), n * c);
        let mut out = Tensor::zeros(&[n, c, 2]);
        for (k, plane_draws) in draws.iter().enumerate() {
            let (mut r, mut q) = (0.0, 0.0);
            for &(idx, count) in plane_draws {
                r += count as f64 * (idx / w) as f64;
                q += count as f64 * (idx % w) as f64;
            }
            out.data_mut()[2 * k] = r / samples as f64;
            out.data_mut()[2 * k + 1] = q / samples as f64;
        }
        self.push(out, Op::SampledExpectation { p, draws, samples })
    }

    /// Batch mean of `(1 / (C * M)) * sum over unmasked channels of the squared
    /// error`. Masked channels contribute nothing but keep the normaliser.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, mask: Vec<bool>) -> Var {
        let vp = self.value(pred);
        let (n, c, h, w) = vp.dims4();
        assert_eq!(vp.shape(), target.shape(), "mse: shape mismatch");
        assert_eq!(mask.len(), n * c);
        let plane = h * w;
        let mut total = 0.0;
        for (k, (ps, ts)) in vp
            .data()
            .chunks(plane)
            .zip(target.data().chunks(plane))
            .enumerate()
        {
            if !mask[k] {
                continue;
            }
            total += ps
                .iter()
                .zip(ts)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let value = total / (n * c * plane) as f64;
        self.push(Tensor::scalar(value), Op::MaskedMse { pred, target, mask })
    }

    /// Batch mean of the per-sample mean Euclidean distance between valid
    /// predicted and reference points (`[n, v, 2]`).
    pub fn point_distance(&mut self, coords: Var, gt: Tensor, valid: Vec<bool>) -> Var {
        let vc = self.value(coords);
        let n = vc.shape()[0];
        let v = vc.shape()[1];
        assert_eq!(vc.shape(), gt.shape());
        let mut total = 0.0;
        for b in 0..n {
            let mut s = 0.0;
            let mut count = 0;
            for i in 0..v {
                let k = b * v + i;
                if !valid[k] {
                    continue;
                }
                let dr = vc.data()[2 * k] - gt.data()[2 * k];
                let dc = vc.data()[2 * k + 1] - gt.data()[2 * k + 1];
                s += (dr * dr + dc * dc).sqrt();
                count += 1;
            }
            if count > 0 {
                total += s / count as f64;
            }
        }
        let value = total / n as f64;
        self.push(
            Tensor::scalar(value),
            Op::PointDistance { coords, gt, valid },
        )
    }

    /// Batch mean of the decayed pairwise-distance discrepancy
    /// `sum_{c<k, both valid} decay^(k-c) * (|V_c - V_k| - |G_c - G_k|)^2`.
    pub fn pairwise_distance(
        &mut self,
        coords: Var,
        gt: Tensor,
        valid: Vec<bool>,
        decay: Decay,
    ) -> Var {
        let alpha = match decay {
            Decay::Fixed(a) => a,
            Decay::Node(v) => self.value(v).item(),
        };
        let vc = self.value(coords);
        let n = vc.shape()[0];
        let v = vc.shape()[1];
        assert_eq!(vc.shape(), gt.shape());
        let mut total = 0.0;
        for b in 0..n {
            for c in 0..v {
                if !valid[b * v + c] {
                    continue;
                }
                for k in c + 1..v {
                    if !valid[b * v + k] {
                        continue;
                    }
                    let dp = dist(vc.data(), b * v + c, b * v + k);
                    let dg = dist(gt.data(), b * v + c, b * v + k);
                    total += alpha.powi((k - c) as i32) * (dp - dg) * (dp - dg);
                }
            }
        }
        let value = total / n as f64;
        self.push(
            Tensor::scalar(value),
            Op::PairwiseDistance {
                coords,
                gt,
                valid,
                decay,
            },
        )
    }

    /// Gradient of scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = conv::backward(self.value(*x), self.value(*w), g, spec);
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[w.0], dw);
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |x, y| x * y);
                let gb = zip_map(g, va, |x, y| x * y);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Scale(a, k) => {
                let k = *k;
                let ga = map(g, |x| x * k);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                accumulate(&mut grads[a.0], ga);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx.data_mut()[(p * h + y / 2) * w + xx / 2] +=
                                gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = g.dims4();
                let plane = h * w;
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).dims4().1;
                    let mut gp = Tensor::zeros(&[n, pc, h, w]);
                    for b in 0..n {
                        gp.data_mut()[b * pc * plane..][..pc * plane]
                            .copy_from_slice(&g.data()[(b * total + off) * plane..][..pc * plane]);
                    }
                    off += pc;
                    accumulate(&mut grads[p.0], gp);
                }
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                accumulate(&mut grads[a.0], ga);
            }
            Op::SpatialSoftmax(a) => {
                let (_, _, h, w) = node.value.dims4();
                let plane = h * w;
                let mut ga = Tensor::zeros(node.value.shape());
                for ((p, gy), dst) in node
                    .value
                    .data()
                    .chunks(plane)
                    .zip(g.data().chunks(plane))
                    .zip(ga.data_mut().chunks_mut(plane))
                {
                    let dot: f64 = p.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((d, pv), gv) in dst.iter_mut().zip(p).zip(gy) {
                        *d = pv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Expectation(p) => {
                let (n, c, h, w) = self.value(*p).dims4();
                let mut gp = Tensor::zeros(&[n, c, h, w]);
                for (k, dst) in gp.data_mut().chunks_mut(h * w).enumerate() {
                    let (gr, gc) = (g.data()[2 * k], g.data()[2 * k + 1]);
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = gr * y as f64 + gc * x as f64;
                        }
                    }
                }
                accumulate(&mut grads[p.0], gp);
            }
            Op::SampledExpectation { p, draws, samples } => {
                let vp = self.value(*p);
                let (n, c, h, w) = vp.dims4();
                let mut gp = Tensor::zeros(&[n, c, h, w]);
                for (k, plane_draws) in draws.iter().enumerate() {
                    let (gr, gc) = (g.data()[2 * k], g.data()[2 * k + 1]);
                    for &(idx, count) in plane_draws {
                        let prob = vp.data()[k * h * w + idx];
                        if prob <= 0.0 {
                            continue;
                        }
                        let coord_dot = gr * (idx / w) as f64 + gc * (idx % w) as f64;
                        gp.data_mut()[k * h * w + idx] +=
                            count as f64 * coord_dot / (*samples as f64 * prob);
                    }
                }
                accumulate(&mut grads[p.0], gp);
            }
            Op::MaskedMse { pred, target, mask } => {
                let vp = self.value(*pred);
                let (n, c, h, w) = vp.dims4();
                let plane = h * w;
                let k = 2.0 * g.item() / (n * c * plane) as f64;
                let mut gp = Tensor::zeros(vp.shape());
                for (idx, (dst, (ps, ts))) in gp
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(vp.data().chunks(plane).zip(target.data().chunks(plane)))
                    .enumerate()
                {
                    if !mask[idx] {
                        continue;
                    }
                    for ((d, a), b) in dst.iter_mut().zip(ps).zip(ts) {
                        *d = k * (a - b);
                    }
                }
                accumulate(&mut grads[pred.0], gp);
            }
            Op::PointDistance { coords, gt, valid } => {
                let vc = self.value(*coords);
                let (n, v) = (vc.shape()[0], vc.shape()[1]);
                let mut gc = Tensor::zeros(vc.shape());
                for b in 0..n {
                    let count = (0..v).filter(|&i| valid[b * v + i]).count();
                    if count == 0 {
                        continue;
                    }
                    let scale = g.item() / (n * count) as f64;
                    for i in 0..v {
                        let k = b * v + i;
                        if !valid[k] {
                            continue;
                        }
                        let dr = vc.data()[2 * k] - gt.data()[2 * k];
                        let dc = vc.data()[2 * k + 1] - gt.data()[2 * k + 1];
                        let d = (dr * dr + dc * dc).sqrt();
                        if d > 0.0 {
                            gc.data_mut()[2 * k] = scale * dr / d;
                            gc.data_mut()[2 * k + 1] = scale * dc / d;
                        }
                    }
                }
                accumulate(&mut grads[coords.0], gc);
            }
            Op::PairwiseDistance {
                coords,
                gt,
                valid,
                decay,
            } => {
                let alpha = match decay {
                    Decay::Fixed(a) => *a,
                    Decay::Node(v) => self.value(*v).item(),
                };
                let vc = self.value(*coords);
                let (n, v) = (vc.shape()[0], vc.shape()[1]);
                let scale = g.item() / n as f64;
                let mut gc = Tensor::zeros(vc.shape());
                let mut galpha = 0.0;
                for b in 0..n {
                    for c in 0..v {
                        if !valid[b * v + c] {
                            continue;
                        }
                        for k in c + 1..v {
                            if !valid[b * v + k] {
                                continue;
                            }
                            let (ic, ik) = (b * v + c, b * v + k);
                            let dp = dist(vc.data(), ic, ik);
                            let dg = dist(gt.data(), ic, ik);
                            let gap = (k - c) as i32;
                            let weight = alpha.powi(gap);
                            galpha += scale
                                * gap as f64
                                * alpha.powi(gap - 1)
                                * (dp - dg)
                                * (dp - dg);
                            if dp == 0.0 {
                                continue;
                            }
                            let coef = scale * weight * 2.0 * (dp - dg) / dp;
                            for axis in 0..2 {
                                let delta = vc.data()[2 * ic + axis] - vc.data()[2 * ik + axis];
                                gc.data_mut()[2 * ic + axis] += coef * delta;
                                gc.data_mut()[2 * ik + axis] -= coef * delta;
                            }
                        }
                    }
                }
                accumulate(&mut grads[coords.0], gc);
                if let Decay::Node(a) = decay {
                    accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), galpha));
                }
            }
        }
    }
}

fn dist(data: &[f64], a: usize, b: usize) -> f64 {
    let dr = data[2 * a] - data[2 * b];
    let dc = data[2 * a + 1] - data[2 * b + 1];
    (dr * dr + dc * dc).sqrt()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}
