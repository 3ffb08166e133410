//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op whose inputs require gradients. Constants and
//! everything computed under [`Graph::no_grad`] bypass the tape, so inference
//! keeps only live activations in memory.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<Backward<T>>,
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<HashMap<ParamId, (usize, Rc<Tensor<T>>)>>,
    record: bool,
}

/// A value in a graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.nodes[n].as_ref())
    }

    pub fn of(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.id.and_then(|n| self.nodes[n].as_ref())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), leaves: RefCell::new(HashMap::new()), record: true }
    }

    /// A graph that never records; used for inference.
    pub fn no_grad() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        Var { graph: self, id: None, value: Rc::new(t) }
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        Var { graph: self, id: None, value: t }
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let id = self.record.then(|| self.push_node(Vec::new(), None));
        Var { graph: self, id, value: Rc::new(t) }
    }

    /// Parameter `id` of `store`. Repeated calls share one leaf so gradients accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if !self.record {
            return Var { graph: self, id: None, value: store.get_rc(id) };
        }
        if let Some((n, v)) = self.leaves.borrow().get(&id) {
            return Var { graph: self, id: Some(*n), value: v.clone() };
        }
        let value = store.get_rc(id);
        let n = self.push_node(Vec::new(), None);
        self.leaves.borrow_mut().insert(id, (n, value.clone()));
        Var { graph: self, id: Some(n), value }
    }

    fn push_node(&self, inputs: Vec<Option<usize>>, backward: Option<Backward<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { inputs, backward });
        nodes.len() - 1
    }

    fn op<'g>(&'g self, value: Tensor<T>, inputs: &[&Var<'g, T>], backward: Backward<T>) -> Var<'g, T> {
        self.op_rc(Rc::new(value), inputs, backward)
    }

    fn op_rc<'g>(&'g self, value: Rc<Tensor<T>>, inputs: &[&Var<'g, T>], backward: Backward<T>) -> Var<'g, T> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = (self.record && ids.iter().any(Option::is_some)).then(|| self.push_node(ids, Some(backward)));
        Var { graph: self, id, value }
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    pub fn backward(&self, loss: &Var<'_, T>) -> Gradients<T> {
        assert_eq!(loss.value.len(), 1, "backward needs a scalar loss, got {:?}", loss.shape());
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(root) = loss.id {
            grads[root] = Some(Tensor::full(loss.shape(), T::one()));
            for i in (0..=root).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &mut nodes[i];
                if let Some(bw) = node.backward.take() {
                    let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let parts = bw(&g, &need);
                    for (input, part) in node.inputs.iter().zip(parts) {
                        if let (Some(j), Some(p)) = (input, part) {
                            match grads[*j].as_mut() {
                                Some(acc) => acc.add_assign(&p),
                                None => grads[*j] = Some(p),
                            }
                        }
                    }
                    continue;
                }
                grads[i] = Some(g);
            }
        }
        let params = self.leaves.borrow_mut().drain().map(|(p, (n, _))| (p, n)).collect();
        Gradients { nodes: grads, params }
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'g, T: Float> Var<'g, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        Var { graph: self.graph, id: None, value: self.value.clone() }
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let out = Rc::new(self.value.map(f));
        let x = self.value.clone();
        let y = out.clone();
        self.graph.op_rc(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * df(x.data()[i], y.data()[i])))]),
        )
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(|v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g, T> {
        let s = T::from_f64(slope);
        self.unary(move |v| if v > T::zero() { v } else { v * s }, move |x, _| if x > T::zero() { T::one() } else { s })
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(|v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(|v| v.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&self, eps: f64) -> Var<'g, T> {
        let e = T::from_f64(eps);
        self.unary(move |v| (v + e).ln(), move |x, _| T::one() / (x + e))
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(|v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    /// `max(x, 0)^p`, with zero gradient wherever `x <= 0`.
    pub fn relu_pow(&self, p: f64) -> Var<'g, T> {
        let pt = T::from_f64(p);
        self.unary(
            move |v| if v > T::zero() { v.powf(pt) } else { T::zero() },
            move |x, _| if x > T::zero() { pt * x.powf(pt - T::one()) } else { T::zero() },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'g, T> {
        let l = T::from_f64(lo);
        self.unary(move |v| v.max(l), move |x, _| if x > l { T::one() } else { T::zero() })
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'g, T> {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.value.map(|v| v * s + t);
        self.graph.op(out, &[self], Box::new(move |g, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add(&self, o: &Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value, &o.value, |a, b| a + b);
        self.graph.op(out, &[self, o], Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]))
    }

    pub fn sub(&self, o: &Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value, &o.value, |a, b| a - b);
        self.graph.op(out, &[self, o], Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]))
    }

    pub fn mul(&self, o: &Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value, &o.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), o.value.clone());
        self.graph.op(
            out,
            &[self, o],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| zip_map(g, &b, |x, y| x * y)),
                    need[1].then(|| zip_map(g, &a, |x, y| x * y)),
                ]
            }),
        )
    }

    pub fn div(&self, o: &Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value, &o.value, |a, b| a / b);
        let (a, b) = (self.value.clone(), o.value.clone());
        self.graph.op(
            out,
            &[self, o],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| zip_map(g, &b, |x, y| x / y)),
                    need[1].then(|| {
                        Tensor::from_fn(g.shape(), |i| {
                            let bi = b.data()[i];
                            -g.data()[i] * a.data()[i] / (bi * bi)
                        })
                    }),
                ]
            }),
        )
    }

    /// Mean of all elements as a `[1, 1, 1, 1]` scalar.
    pub fn mean(&self) -> Var<'g, T> {
        let shape = self.shape();
        let n = T::from_f64(self.value.len() as f64);
        let out = Tensor::scalar(self.value.sum() / n);
        self.graph.op(out, &[self], Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item() / n))]))
    }

    /// Mean over channels and space: `[N, C, H, W] -> [N, 1, 1, 1]`.
    pub fn mean_per_sample(&self) -> Var<'g, T> {
        let shape = self.shape();
        let per = shape[1] * shape[2] * shape[3];
        let scale = T::from_f64(per as f64);
        let out = Tensor::from_fn([shape[0], 1, 1, 1], |s| self.value.sample(s).iter().copied().sum::<T>() / scale);
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_fn(shape, |i| g.data()[i / per] / scale))]),
        )
    }

    /// Mean over space: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn spatial_mean(&self) -> Var<'g, T> {
        let shape = self.shape();
        let plane = shape[2] * shape[3];
        let scale = T::from_f64(plane as f64);
        let out = Tensor::from_fn([shape[0], shape[1], 1, 1], |p| {
            self.value.data()[p * plane..(p + 1) * plane].iter().copied().sum::<T>() / scale
        });
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_fn(shape, |i| g.data()[i / plane] / scale))]),
        )
    }

    /// `[N, C, 1, 1] -> [N, C, h, w]` by replication.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Var<'g, T> {
        let [n, c, one_h, one_w] = self.shape();
        assert_eq!((one_h, one_w), (1, 1), "broadcast_spatial expects 1x1 input");
        let plane = h * w;
        let out = Tensor::from_fn([n, c, h, w], |i| self.value.data()[i / plane]);
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(Tensor::from_fn([n, c, 1, 1], |p| g.data()[p * plane..(p + 1) * plane].iter().copied().sum()))]
            }),
        )
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Var<'g, T> {
        let [n, c, h, w] = self.shape();
        assert!(start + len <= c, "slice {start}..{} of {c} channels", start + len);
        let plane = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for s in 0..n {
            out.sample_mut(s).copy_from_slice(&self.value.sample(s)[start * plane..(start + len) * plane]);
        }
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    dx.sample_mut(s)[start * plane..(start + len) * plane].copy_from_slice(g.sample(s));
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn avg_pool(&self, k: usize) -> Var<'g, T> {
        let out = kernels::avg_pool(&self.value, k);
        self.graph.op(out, &[self], Box::new(move |g, _| vec![Some(kernels::avg_pool_backward(g, k))]))
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Var<'g, T> {
        let [_, _, ih, iw] = self.shape();
        let out = kernels::resize_bilinear(&self.value, h, w);
        self.graph.op(out, &[self], Box::new(move |g, _| vec![Some(kernels::resize_bilinear_backward(g, ih, iw))]))
    }

    /// Valid-mode separable filter with the same taps on both axes.
    pub fn separable_filter(&self, taps: Rc<Vec<T>>) -> Var<'g, T> {
        let out = kernels::separable_filter(&self.value, &taps);
        self.graph.op(out, &[self], Box::new(move |g, _| vec![Some(kernels::separable_filter_backward(g, &taps))]))
    }

    pub fn conv2d(&self, w: &Var<'g, T>, b: Option<&Var<'g, T>>, geom: ConvGeom) -> Var<'g, T> {
        let out = kernels::conv2d(&self.value, &w.value, b.map(|b| &*b.value), geom);
        let (x, wv) = (self.value.clone(), w.value.clone());
        let mut inputs = vec![self, w];
        inputs.extend(b);
        self.graph.op(
            out,
            &inputs,
            Box::new(move |g, need| {
                let r = kernels::conv2d_backward(&x, &wv, g, geom, [need[0], need[1], need.get(2) == Some(&true)]);
                vec![r.dx, r.dw, r.db]
            }),
        )
    }

    /// Transposed convolution; `w` is `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&self, w: &Var<'g, T>, b: Option<&Var<'g, T>>, geom: ConvGeom) -> Var<'g, T> {
        let out = kernels::conv_transpose2d(&self.value, &w.value, b.map(|b| &*b.value), geom);
        let (x, wv) = (self.value.clone(), w.value.clone());
        let mut inputs = vec![self, w];
        inputs.extend(b);
        self.graph.op(
            out,
            &inputs,
            Box::new(move |g, need| {
                let r = kernels::conv_transpose2d_backward(&x, &wv, g, geom, [need[0], need[1], need.get(2) == Some(&true)]);
                vec![r.dx, r.dw, r.db]
            }),
        )
    }

    pub fn group_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, groups: usize, eps: f64) -> Var<'g, T> {
        let (out, cache) = kernels::group_norm(&self.value, &gamma.value, &beta.value, groups, T::from_f64(eps));
        let gv = gamma.value.clone();
        self.graph.op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let (dx, dg, db) = kernels::group_norm_backward(&cache, &gv, g, groups);
                vec![need[0].then_some(dx), need[1].then_some(dg), need[2].then_some(db)]
            }),
        )
    }
}

/// Concatenate along channels. The same var may appear more than once.
pub fn concat_channels<'g, T: Float>(parts: &[&Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let [n, _, h, w] = parts[0].shape();
    let plane = h * w;
    let chans: Vec<usize> = parts
        .iter()
        .map(|p| {
            let [pn, pc, ph, pw] = p.shape();
            assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
            pc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let mut out = Tensor::zeros([n, total, h, w]);
    for s in 0..n {
        let dst = out.sample_mut(s);
        let mut off = 0;
        for (p, &c) in parts.iter().zip(&chans) {
            dst[off..off + c * plane].copy_from_slice(p.value.sample(s));
            off += c * plane;
        }
    }
    parts[0].graph.op(
        out,
        parts,
        Box::new(move |g, need| {
            let mut start = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&c, &nd)| {
                    let r = nd.then(|| {
                        let mut t = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            t.sample_mut(s).copy_from_slice(&g.sample(s)[start * plane..(start + c) * plane]);
                        }
                        t
                    });
                    start += c;
                    r
                })
                .collect()
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape, a: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 * a).sin() * 1.3).fract())
    }

    /// Central-difference check of d(f(x))/dx for every element of x.
    fn check(shape: Shape, f: impl for<'g> Fn(&Var<'g, f64>) -> Var<'g, f64>) {
        let x0 = ramp(shape, 0.77);
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = f(&x);
        let grads = g.backward(&loss);
        let dx = grads.of(&x).expect("gradient").clone();
        let eval = |t: Tensor<f64>| {
            let g = Graph::no_grad();
            f(&g.constant(t)).value().item()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "element {i}: fd {fd} vs ad {}", dx.data()[i]);
        }
    }

    fn weights(g: &Graph<f64>, shape: Shape) -> Var<'_, f64> {
        g.constant(ramp(shape, 1.31))
    }

    #[test]
    fn elementwise_ops_differentiate() {
        check([1, 2, 3, 3], |x| x.sigmoid().mul(&x.affine(2.0, 3.0)).mean());
        check([1, 2, 3, 3], |x| x.leaky_relu(0.2).square().mean());
        check([1, 2, 3, 3], |x| x.affine(1.0, 2.0).sqrt().div(&x.affine(-1.0, 3.0)).mean());
        check([1, 2, 3, 3], |x| x.affine(0.5, 0.6).ln_eps(1e-8).sub(&x.abs()).mean());
        check([1, 2, 3, 3], |x| x.affine(1.0, 0.2).relu_pow(0.7).mean());
        check([2, 2, 3, 3], |x| x.mean_per_sample().square().mean());
    }

    #[test]
    fn structural_ops_differentiate() {
        check([2, 3, 4, 4], |x| {
            let a = x.slice_channels(1, 2).square();
            concat_channels(&[&a, &x.slice_channels(0, 1), &a]).mean()
        });
        check([1, 2, 4, 4], |x| x.spatial_mean().broadcast_spatial(4, 4).mul(x).mean());
        check([1, 2, 4, 4], |x| x.avg_pool(2).square().mean());
        check([1, 2, 4, 4], |x| x.resize_bilinear(8, 8).square().mean());
        check([1, 1, 6, 6], |x| x.separable_filter(Rc::new(vec![0.25, 0.5, 0.25])).square().mean());
    }

    #[test]
    fn layer_ops_differentiate() {
        check([2, 3, 5, 5], |x| {
            let w = weights(x.graph(), [4, 3, 3, 3]);
            let b = weights(x.graph(), [1, 4, 1, 1]);
            x.conv2d(&w, Some(&b), ConvGeom::square(3, 2, 1, 1)).square().mean()
        });
        check([1, 3, 3, 3], |x| {
            let w = weights(x.graph(), [3, 2, 4, 4]);
            x.conv_transpose2d(&w, None, ConvGeom::square(4, 2, 1, 1)).square().mean()
        });
        check([2, 4, 3, 3], |x| {
            let gamma = weights(x.graph(), [1, 4, 1, 1]);
            let beta = weights(x.graph(), [1, 4, 1, 1]);
            x.group_norm(&gamma, &beta, 2, 1e-5).square().mul(x).mean()
        });
    }

    #[test]
    fn weights_receive_gradients() {
        let g = Graph::<f64>::new();
        let x = g.constant(ramp([1, 2, 4, 4], 0.3));
        let w = g.leaf(ramp([3, 2, 1, 1], 0.5));
        let y = x.conv2d(&w, None, ConvGeom::square(1, 1, 0, 1)).mean();
        let grads = g.backward(&y);
        let dw = grads.of(&w).unwrap();
        // d mean / d w[co][ci] = mean over pixels of x[ci] / Cout.
        for co in 0..3 {
            for ci in 0..2 {
                let want = x.value().sample(0)[ci * 16..(ci + 1) * 16].iter().sum::<f64>() / 16.0 / 3.0;
                assert!((dw.at(co, ci, 0, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_grad_graph_keeps_no_tape() {
        let g = Graph::<f32>::no_grad();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.0));
        let y = x.square().mean();
        assert!(!y.requires_grad());
        assert!(g.is_empty());
    }

    #[test]
    fn constants_do_not_extend_the_tape() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let _ = c.square().sigmoid().mean();
        assert!(g.is_empty());
    }
}
