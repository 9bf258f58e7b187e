//! Reverse-mode autodiff tape over channel-last image tensors.
//!
//! Nodes are created eagerly (forward values computed on construction);
//! `backward` walks the tape in reverse accumulating gradients. The op set is
//! exactly what the warp-and-synthesize pipeline and its losses need.

use ndarray::{concatenate, s, Array3, ArrayD, ArrayViewD, Axis, Ix0, Ix1, Ix3, Ix4, IxDyn, Zip};

use crate::kernels;
pub use crate::kernels::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId, T),
    LeakyRelu(NodeId, T),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    ConcatC(Vec<NodeId>),
    Warp {
        src: NodeId,
        flow: NodeId,
    },
    AvgPool2(NodeId),
    ReflectPad {
        x: NodeId,
        pad: [usize; 4],
    },
    Crop {
        x: NodeId,
        top: usize,
        left: usize,
    },
    CharbSum {
        x: NodeId,
        eps: T,
    },
    SqSumMargin {
        x: NodeId,
        margin: usize,
    },
    WeightedSum(Vec<(NodeId, T)>),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> NodeId {
        // kernels index raw slices, so node values must be standard layout
        // (e.g. concatenate can hand back permuted strides)
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<T>) -> NodeId {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, T> {
        self.nodes[id.0].value.view()
    }

    pub fn value3(&self, id: NodeId) -> ndarray::ArrayView3<'_, T> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("node is not rank-3")
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        *self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix0>()
            .expect("node is not scalar")
            .into_scalar()
    }

    pub fn grad(&self, id: NodeId) -> Option<ArrayViewD<'_, T>> {
        self.nodes[id.0].grad.as_ref().map(|g| g.view())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn shift(&mut self, a: NodeId, offset: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + offset);
        self.push(v, Op::Shift(a, offset))
    }

    pub fn leaky_relu(&mut self, a: NodeId, neg_slope: T) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * neg_slope });
        self.push(v, Op::LeakyRelu(a, neg_slope))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value3(x);
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let y = kernels::conv2d_fwd(&xv, &wv, &bv, stride, pad);
        self.push(y.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.value3(x);
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let y = kernels::convt2d_fwd(&xv, &wv, &bv, stride, pad);
        self.push(y.into_dyn(), Op::ConvT2d { x, w, b, stride, pad })
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|id| self.value3(*id)).collect();
        let v = concatenate(Axis(2), &views).expect("concat_c: incompatible shapes");
        self.push(v.into_dyn(), Op::ConcatC(parts.to_vec()))
    }

    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        let sv = self.value3(src);
        let fv = self.value3(flow);
        let y = kernels::warp_fwd(&sv, &fv);
        self.push(y.into_dyn(), Op::Warp { src, flow })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value3(x);
        let y = kernels::avgpool2_fwd(&xv);
        self.push(y.into_dyn(), Op::AvgPool2(x))
    }

    /// pad = [top, bottom, left, right], reflect-101.
    pub fn reflect_pad(&mut self, x: NodeId, pad: [usize; 4]) -> NodeId {
        let xv = self.value3(x);
        let y = kernels::reflect_pad_fwd(&xv, pad);
        self.push(y.into_dyn(), Op::ReflectPad { x, pad })
    }

    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> NodeId {
        let xv = self.value3(x);
        let y = xv.slice(s![top..top + h, left..left + w, ..]).to_owned();
        self.push(y.into_dyn(), Op::Crop { x, top, left })
    }

    /// Scalar node: sum over all elements of sqrt(x^2 + eps^2).
    pub fn charb_sum(&mut self, x: NodeId, eps: T) -> NodeId {
        let e2 = eps * eps;
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.iter() {
            acc = acc + (v * v + e2).sqrt();
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), acc),
            Op::CharbSum { x, eps },
        )
    }

    /// Scalar node: sum of squares over the spatial interior (a `margin`-pixel
    /// border excluded on each side), all channels.
    pub fn sq_sum_margin(&mut self, x: NodeId, margin: usize) -> NodeId {
        let xv = self.value3(x);
        let (h, w, _) = xv.dim();
        assert!(h > 2 * margin && w > 2 * margin, "margin leaves no interior");
        let inner = xv.slice(s![margin..h - margin, margin..w - margin, ..]);
        let mut acc = T::zero();
        for &v in inner.iter() {
            acc = acc + v * v;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), acc),
            Op::SqSumMargin { x, margin },
        )
    }

    /// Scalar node: sum of coeff * scalar-node pairs.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut acc = T::zero();
        for (id, c) in terms {
            acc = acc + *c * self.scalar_value(*id);
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), acc),
            Op::WeightedSum(terms.to_vec()),
        )
    }

    /// Reverse pass from a scalar loss node. Clears previous gradients.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.ndim(),
            0,
            "backward target must be scalar"
        );
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for i in (0..=loss.0).rev() {
            let contribs = self.contributions(i);
            for (pid, delta) in contribs {
                let slot = &mut self.nodes[pid].grad;
                match slot {
                    Some(g) => *g += &delta,
                    None => *slot = Some(delta),
                }
            }
        }
    }

    fn contributions(&self, i: usize) -> Vec<(usize, ArrayD<T>)> {
        let node = &self.nodes[i];
        let g = match node.grad.as_ref() {
            Some(g) => g,
            None => return Vec::new(),
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a.0, g.clone()), (b.0, g.clone())],
            Op::Sub(a, b) => vec![(a.0, g.clone()), (b.0, g.mapv(|v| -v))],
            Op::Mul(a, b) => {
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                vec![(a.0, da), (b.0, db)]
            }
            Op::Scale(a, f) => vec![(a.0, g.mapv(|v| v * *f))],
            Op::Shift(a, _) => vec![(a.0, g.clone())],
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&self.nodes[a.0].value)
                    .for_each(|dv, &xv| {
                        if xv <= T::zero() {
                            *dv = *dv * *slope;
                        }
                    });
                vec![(a.0, d)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value3(*x);
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dw, db) = kernels::conv2d_bwd(&xv, &wv, &gv, *stride, *pad);
                vec![(x.0, dx.into_dyn()), (w.0, dw.into_dyn()), (b.0, db.into_dyn())]
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let xv = self.value3(*x);
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dw, db) = kernels::convt2d_bwd(&xv, &wv, &gv, *stride, *pad);
                vec![(x.0, dx.into_dyn()), (w.0, dw.into_dyn()), (b.0, db.into_dyn())]
            }
            Op::ConcatC(parts) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[2];
                    let piece = gv.slice(s![.., .., off..off + c]).to_owned();
                    out.push((p.0, piece.into_dyn()));
                    off += c;
                }
                out
            }
            Op::Warp { src, flow } => {
                let sv = self.value3(*src);
                let fv = self.value3(*flow);
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dsrc, dflow) = kernels::warp_bwd(&sv, &fv, &gv);
                vec![(src.0, dsrc.into_dyn()), (flow.0, dflow.into_dyn())]
            }
            Op::AvgPool2(x) => {
                let dims = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                vec![(x.0, kernels::avgpool2_bwd(dims, &gv).into_dyn())]
            }
            Op::ReflectPad { x, pad } => {
                let dims = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                vec![(x.0, kernels::reflect_pad_bwd(dims, *pad, &gv).into_dyn())]
            }
            Op::Crop { x, top, left } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (gh, gw, _) = gv.dim();
                let mut dx = Array3::<T>::zeros((shape[0], shape[1], shape[2]));
                dx.slice_mut(s![*top..*top + gh, *left..*left + gw, ..])
                    .assign(&gv);
                vec![(x.0, dx.into_dyn())]
            }
            Op::CharbSum { x, eps } => {
                let gs = *g.view().into_dimensionality::<Ix0>().unwrap().into_scalar();
                let e2 = *eps * *eps;
                let d = self.nodes[x.0]
                    .value
                    .mapv(|v| gs * v / (v * v + e2).sqrt());
                vec![(x.0, d)]
            }
            Op::SqSumMargin { x, margin } => {
                let gs = *g.view().into_dimensionality::<Ix0>().unwrap().into_scalar();
                let xv = self.value3(*x);
                let (h, w, c) = xv.dim();
                let m = *margin;
                let two = T::from_f64(2.0).unwrap();
                let mut d = Array3::<T>::zeros((h, w, c));
                let inner = xv.slice(s![m..h - m, m..w - m, ..]);
                d.slice_mut(s![m..h - m, m..w - m, ..])
                    .assign(&inner.mapv(|v| two * gs * v));
                vec![(x.0, d.into_dyn())]
            }
            Op::WeightedSum(terms) => {
                let gs = *g.view().into_dimensionality::<Ix0>().unwrap().into_scalar();
                terms
                    .iter()
                    .map(|(id, c)| (id.0, ArrayD::from_elem(IxDyn(&[]), gs * *c)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr3(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_arr4(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize) -> Array4<f64> {
        Array4::from_shape_fn((k, k, ci, co), |_| rng.random_range(-0.5..0.5))
    }

    /// Central finite-difference check of d(loss)/d(leaf) for every leaf entry.
    fn grad_check(
        leaves: Vec<ArrayD<f64>>,
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        rel_tol: f64,
    ) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss);
        let grads: Vec<ArrayD<f64>> = ids
            .iter()
            .map(|id| {
                tape.grad(*id)
                    .map(|g| g.to_owned())
                    .unwrap_or_else(|| ArrayD::zeros(leaves[0].raw_dim()))
            })
            .collect();

        let eval = |ls: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::<f64>::new();
            let ids: Vec<NodeId> = ls.iter().map(|l| t.leaf(l.clone())).collect();
            let loss = build(&mut t, &ids);
            t.scalar_value(loss)
        };

        let step = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            for flat in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].as_slice_mut().unwrap()[flat] += step;
                let mut minus = leaves.clone();
                minus[li].as_slice_mut().unwrap()[flat] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = grads[li].as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < rel_tol,
                    "leaf {li} entry {flat}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr3(&mut rng, 5, 6, 2).into_dyn();
        let w = rand_arr4(&mut rng, 3, 2, 3).into_dyn();
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2)).into_dyn();
        grad_check(vec![x, w, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1);
            t.charb_sum(y, 0.001)
        }, 1e-4);
    }

    #[test]
    fn strided_conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr3(&mut rng, 6, 8, 3).into_dyn();
        let w = rand_arr4(&mut rng, 3, 3, 2).into_dyn();
        let b = Array1::from_shape_fn(2, |_| rng.random_range(-0.2..0.2)).into_dyn();
        grad_check(vec![x, w, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1);
            t.charb_sum(y, 0.001)
        }, 1e-4);
    }

    #[test]
    fn conv_transpose2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr3(&mut rng, 4, 5, 2).into_dyn();
        let w = rand_arr4(&mut rng, 4, 2, 3).into_dyn();
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2)).into_dyn();
        grad_check(vec![x, w, b], |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], ids[2], 2, 1);
            t.charb_sum(y, 0.001)
        }, 1e-4);
    }

    #[test]
    fn conv_transpose2d_matches_naive_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr3(&mut rng, 3, 4, 2);
        let w = rand_arr4(&mut rng, 4, 2, 3);
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2));
        let (stride, pad) = (2, 1);
        let (oh, ow) = (3 * 2, 4 * 2);
        let mut naive = Array3::<f64>::zeros((oh, ow, 3));
        for y in 0..3 {
            for xx in 0..4 {
                for ky in 0..4 {
                    for kx in 0..4 {
                        let oy = (y * stride + ky) as isize - pad as isize;
                        let ox = (xx * stride + kx) as isize - pad as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for ci in 0..2 {
                            for co in 0..3 {
                                naive[(oy as usize, ox as usize, co)] +=
                                    x[(y, xx, ci)] * w[(ky, kx, ci, co)];
                            }
                        }
                    }
                }
            }
        }
        for co in 0..3 {
            naive.slice_mut(s![.., .., co]).mapv_inplace(|v| v + b[co]);
        }
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf3(x);
        let wi = tape.leaf(w.into_dyn());
        let bi = tape.leaf(b.into_dyn());
        let y = tape.conv_transpose2d(xi, wi, bi, stride, pad);
        let got = tape.value3(y);
        for (a, b) in got.iter().zip(naive.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = rand_arr3(&mut rng, 7, 7, 2).into_dyn();
        // fractional flows, kept away from integer offsets and borders
        let flow = Array3::from_shape_fn((7, 7, 2), |_| rng.random_range(0.2..0.7)).into_dyn();
        grad_check(vec![src, flow], |t, ids| {
            let y = t.warp(ids[0], ids[1]);
            t.charb_sum(y, 0.001)
        }, 1e-3);
    }

    #[test]
    fn elementwise_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_arr3(&mut rng, 6, 6, 2).into_dyn();
        let b = rand_arr3(&mut rng, 6, 6, 2).into_dyn();
        grad_check(vec![a, b], |t, ids| {
            let m = t.mul(ids[0], ids[1]);
            let r = t.leaky_relu(m, 0.1);
            let p = t.avg_pool2(r);
            let s = t.scale(p, 1.7);
            let sh = t.shift(s, 0.3);
            t.sq_sum_margin(sh, 1)
        }, 1e-4);
    }

    #[test]
    fn concat_pad_crop_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_arr3(&mut rng, 5, 5, 2).into_dyn();
        let b = rand_arr3(&mut rng, 5, 5, 1).into_dyn();
        grad_check(vec![a, b], |t, ids| {
            let c = t.concat_c(&[ids[0], ids[1]]);
            let p = t.reflect_pad(c, [2, 1, 1, 2]);
            let cr = t.crop(p, 1, 1, 5, 5);
            let l1 = t.charb_sum(cr, 0.001);
            let e = t.add(ids[0], ids[0]);
            let d = t.sub(e, ids[0]);
            let l2 = t.charb_sum(d, 0.001);
            t.weighted_sum(&[(l1, 1.0), (l2, 0.5)])
        }, 1e-4);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_arr3(&mut rng, 4, 4, 1).into_dyn();
        let b = rand_arr3(&mut rng, 4, 4, 1).into_dyn();
        grad_check(vec![a, b], |t, ids| {
            let la = t.charb_sum(ids[0], 0.001);
            let lb = t.sq_sum_margin(ids[1], 0);
            t.weighted_sum(&[(la, 0.7), (lb, 0.25)])
        }, 1e-4);
    }

    #[test]
    fn backward_accumulates_through_fanout() {
        // x used twice: loss = charb_sum(x + x); gradient must double
        let x = Array3::from_elem((3, 3, 1), 0.5).into_dyn();
        let mut t = Tape::<f64>::new();
        let xi = t.leaf(x);
        let s = t.add(xi, xi);
        let l = t.charb_sum(s, 0.001);
        t.backward(l);
        let g = t.grad(xi).unwrap();
        // d/dx sqrt((2x)^2+eps^2) = 4x/sqrt(...) ~ 2.0 at x=0.5
        for v in g.iter() {
            assert!((v - 2.0).abs() < 1e-6, "fan-out grad {v}");
        }
    }
}
