//! Tape of executed operations and the reverse sweep over it.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels;
use super::loss_kernels as lk;
use super::prior_math::{self, PriorTensors};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        w: Tensor<T>,
    },
    RoundSte {
        x: Var,
    },
    Focal {
        logits: Var,
        target: Tensor<T>,
        alpha: f64,
        gamma: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor<T>,
        mask: Tensor<T>,
        beta: f64,
    },
    SoftmaxCe {
        logits: Var,
        target: Vec<usize>,
    },
    PriorBits {
        x: Var,
        params: [Var; 11],
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; [`Graph::backward`] replays them in
/// reverse. Indices only ever point backwards, so the record is
/// topologically sorted by construction.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.params.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A constant (no gradient flows into it).
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The current value of a parameter. Frozen parameters enter as
    /// constants; repeated calls with the same id share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let n = self.nodes.borrow();
            kernels::conv2d_forward(&n[x.0].value, &n[w.0].value, &n[b.0].value, stride, pad)?
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let n = self.nodes.borrow();
            kernels::conv_transpose2d_forward(&n[x.0].value, &n[w.0].value, &n[b.0].value, stride, pad)?
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::ConvT2d { x, w, b, stride, pad }, rg))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope }, self.rg(x))
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let n = self.nodes.borrow();
            Tensor::concat_channels(&n[a.0].value, &n[b.0].value)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        Ok(self.push(out, Op::Narrow { x, start }, self.rg(x)))
    }

    /// Splits channels into `[0, c1)` and `[c1, C)`.
    pub fn split_channels(&self, x: Var, c1: usize) -> Result<(Var, Var)> {
        let c = self.value(x).dims4()?[1];
        if c1 == 0 || c1 >= c {
            return Err(Error::Argument(format!("split point {c1} must satisfy 0 < c1 < {c}")));
        }
        Ok((self.narrow_channels(x, 0, c1)?, self.narrow_channels(x, c1, c - c1)?))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let n = self.nodes.borrow();
        if n[a.0].value.shape() != n[b.0].value.shape() {
            return Err(shape_err!(
                "{}: {:?} vs {:?}",
                what,
                n[a.0].value.shape(),
                n[b.0].value.shape()
            ));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = {
            let n = self.nodes.borrow();
            let mut o = n[a.0].value.clone();
            o.add_assign(&n[b.0].value);
            o
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = {
            let n = self.nodes.borrow();
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect())?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let k = T::lit(c);
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale { x, c }, self.rg(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ x ⊙ w` for a constant `w`.
    pub fn weighted_sum(&self, x: Var, w: Tensor<T>) -> Result<Var> {
        let out = {
            let v = self.value(x);
            if v.shape() != w.shape() {
                return Err(shape_err!("weighted_sum: {:?} vs {:?}", v.shape(), w.shape()));
            }
            Tensor::scalar(v.dot(&w))
        };
        Ok(self.push(out, Op::WeightedSum { x, w }, self.rg(x)))
    }

    /// Nearest integer (ties to even) forward, identity backward.
    pub fn round_ste(&self, x: Var) -> Var {
        let out = self.value(x).map(round_half_even);
        self.push(out, Op::RoundSte { x }, self.rg(x))
    }

    pub fn focal_loss(&self, logits: Var, target: Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
        let out = {
            let z = self.value(logits);
            if z.shape() != target.shape() {
                return Err(shape_err!(
                    "focal loss: logits {:?} vs target {:?}",
                    z.shape(),
                    target.shape()
                ));
            }
            Tensor::scalar(lk::focal_forward(&z, &target, alpha, gamma))
        };
        Ok(self.push(
            out,
            Op::Focal {
                logits,
                target,
                alpha,
                gamma,
            },
            self.rg(logits),
        ))
    }

    /// Smooth-L1 over cells selected by `mask` (`[N, 1, H, W]`).
    pub fn smooth_l1(&self, pred: Var, target: Tensor<T>, mask: Tensor<T>, beta: f64) -> Result<Var> {
        let out = {
            let p = self.value(pred);
            let [n, _, h, w] = p.dims4()?;
            if p.shape() != target.shape() || mask.shape() != [n, 1, h, w] {
                return Err(shape_err!(
                    "smooth-L1: pred {:?}, target {:?}, mask {:?}",
                    p.shape(),
                    target.shape(),
                    mask.shape()
                ));
            }
            Tensor::scalar(lk::smooth_l1_forward(&p, &target, &mask, beta))
        };
        Ok(self.push(
            out,
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            },
            self.rg(pred),
        ))
    }

    /// Mean per-pixel cross-entropy; `target` holds one class index per pixel.
    pub fn softmax_cross_entropy(&self, logits: Var, target: Vec<usize>) -> Result<Var> {
        let out = {
            let z = self.value(logits);
            let [n, c, h, w] = z.dims4()?;
            if target.len() != n * h * w || target.iter().any(|&t| t >= c) {
                return Err(shape_err!(
                    "cross-entropy: {} targets (max class {:?}) for logits {:?}",
                    target.len(),
                    target.iter().max(),
                    z.shape()
                ));
            }
            Tensor::scalar(lk::softmax_ce_forward(&z, &target))
        };
        Ok(self.push(out, Op::SoftmaxCe { logits, target }, self.rg(logits)))
    }

    /// Information content in bits of `x` under a factorized prior whose 11
    /// parameter tensors are `params` (see [`PriorTensors`]).
    pub fn prior_bits(&self, x: Var, params: [Var; 11]) -> Result<Var> {
        let out = {
            let n = self.nodes.borrow();
            let xv = &n[x.0].value;
            let [_, c, _, _] = xv.dims4()?;
            let refs: Vec<&Tensor<T>> = params.iter().map(|p| &n[p.0].value).collect();
            for (t, s) in refs.iter().zip(PriorTensors::<T>::shapes(c)) {
                if t.shape() != s.as_slice() {
                    return Err(shape_err!("prior parameter {:?}, expected {:?}", t.shape(), s));
                }
            }
            Tensor::scalar(prior_math::bits_forward(xv, &PriorTensors::from_slice(&refs)))
        };
        let rg = self.rg(x) || params.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::PriorBits { x, params }, rg))
    }

    /// Fingerprint of which piece every piecewise op is on: leaky-ReLU
    /// signs, smooth-L1 branches and floored prior likelihoods. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let n = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in n.iter() {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for &v in n[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    mask,
                    beta,
                } => {
                    let b = T::lit(*beta);
                    let p = n[pred.0].value.data();
                    for ((&x, &t), &m) in p.iter().zip(target.data()).zip(mask.data()) {
                        (m != T::zero() && (x - t).abs() < b).hash(&mut h);
                        (x > t).hash(&mut h);
                    }
                }
                Op::PriorBits { x, params } => {
                    let owned: Vec<&Tensor<T>> = params.iter().map(|p| &n[p.0].value).collect();
                    let floored = prior_math::floored_mask(&n[x.0].value, &PriorTensors::from_slice(&owned));
                    floored.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `loss`. Parameter gradients are added
    /// into `store`; the graph is cleared afterwards.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.params.borrow_mut().clear();
        if nodes.is_empty() {
            return Err(Error::State("backward on an empty graph".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let mut put = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                &Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(val(x), val(w), stride, pad, &g, [rg(x), rg(w), rg(b)])?;
                    if let Some(t) = dx {
                        put(x, t);
                    }
                    if let Some(t) = dw {
                        put(w, t);
                    }
                    if let Some(t) = db {
                        put(b, t);
                    }
                }
                &Op::ConvT2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        kernels::conv_transpose2d_backward(val(x), val(w), stride, pad, &g, [rg(x), rg(w), rg(b)])?;
                    if let Some(t) = dx {
                        put(x, t);
                    }
                    if let Some(t) = dw {
                        put(w, t);
                    }
                    if let Some(t) = db {
                        put(b, t);
                    }
                }
                &Op::LeakyRelu { x, slope } => {
                    let s = T::lit(slope);
                    let d = val(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                        .collect();
                    put(x, Tensor::new(val(x).shape(), d)?);
                }
                &Op::Concat { a, b } => {
                    let ca = val(a).shape()[1];
                    let cb = val(b).shape()[1];
                    if rg(a) {
                        put(a, g.narrow_channels(0, ca)?);
                    }
                    if rg(b) {
                        put(b, g.narrow_channels(ca, cb)?);
                    }
                }
                &Op::Narrow { x, start } => {
                    let [n, c, h, w] = val(x).dims4()?;
                    let len = g.shape()[1];
                    let plane = h * w;
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for bi in 0..n {
                        let dst = (bi * c + start) * plane;
                        let src = bi * len * plane;
                        d.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    put(x, d);
                }
                &Op::Add { a, b } => {
                    if rg(a) {
                        put(a, g.clone());
                    }
                    if rg(b) {
                        put(b, g);
                    }
                }
                &Op::Mul { a, b } => {
                    let prod = |o: &Tensor<T>| -> Result<Tensor<T>> {
                        Tensor::new(o.shape(), o.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect())
                    };
                    if rg(a) {
                        put(a, prod(val(b))?);
                    }
                    if rg(b) {
                        put(b, prod(val(a))?);
                    }
                }
                &Op::Scale { x, c } => {
                    let k = T::lit(c);
                    put(x, g.map(|v| v * k));
                }
                &Op::Sum { x } => {
                    put(x, Tensor::full(val(x).shape(), g.data()[0]));
                }
                Op::WeightedSum { x, w } => {
                    let s = g.data()[0];
                    put(*x, w.map(|v| v * s));
                }
                &Op::RoundSte { x } => put(x, g),
                Op::Focal {
                    logits,
                    target,
                    alpha,
                    gamma,
                } => {
                    let d = lk::focal_backward(val(*logits), target, *alpha, *gamma, g.data()[0]);
                    put(*logits, d);
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    mask,
                    beta,
                } => {
                    let d = lk::smooth_l1_backward(val(*pred), target, mask, *beta, g.data()[0]);
                    put(*pred, d);
                }
                Op::SoftmaxCe { logits, target } => {
                    let d = lk::softmax_ce_backward(val(*logits), target, g.data()[0]);
                    put(*logits, d);
                }
                Op::PriorBits { x, params } => {
                    let refs: Vec<&Tensor<T>> = params.iter().map(|&p| val(p)).collect();
                    let pt = PriorTensors::from_slice(&refs);
                    let (dx, dp) = prior_math::bits_backward(val(*x), &pt, g.data()[0], rg(*x));
                    if let Some(dx) = dx {
                        put(*x, dx);
                    }
                    for (&p, d) in params.iter().zip(dp) {
                        if rg(p) {
                            put(p, d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Nearest integer with ties to even.
pub fn round_half_even<T: Real>(v: T) -> T {
    let r = v.round();
    if (v - v.trunc()).abs() == T::lit(0.5) {
        let half = r / T::lit(2.0);
        if half.trunc() != half {
            return r - v.signum();
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_ties_to_even() {
        assert_eq!(round_half_even(2.4f64), 2.0);
        assert_eq!(round_half_even(-1.5f64), -2.0);
        assert_eq!(round_half_even(2.5f64), 2.0);
        assert_eq!(round_half_even(3.5f32), 4.0);
        assert_eq!(round_half_even(-2.5f32), -2.0);
        assert_eq!(round_half_even(-0.4f32), -0.0);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, -4.0, 1.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(&[2], vec![3.0, 1.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let p = g.param(&store, id);
            let sq = g.mul(p, p).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.data(), &[12.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::<f64>::new();
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x, &mut store), Err(Error::Argument(_))));
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(Var(0), &mut store), Err(Error::State(_))));
    }

    #[test]
    fn concat_grad_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let b = store.add("b", Tensor::zeros(&[1, 5, 3, 3])).unwrap();
        let g = Graph::new();
        let (va, vb) = (g.param(&store, a), g.param(&store, b));
        let c = g.concat_channels(va, vb).unwrap();
        assert_eq!(g.shape(c), vec![1, 7, 3, 3]);
        let l = g.sum(c);
        g.backward(l, &mut store).unwrap();
        assert!(store.get(a).grad.data().iter().all(|&v| v == 1.0));
        assert_eq!(store.get(a).grad.shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn split_routes_gradients_disjointly() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::zeros(&[1, 7, 2, 2])).unwrap();
        let run = |store: &mut ParamStore<f64>, w2: f64| {
            store.zero_grad();
            let g = Graph::new();
            let x = g.param(store, id);
            let (p, q) = g.split_channels(x, 2).unwrap();
            let lp = g.weighted_sum(p, Tensor::full(&[1, 2, 2, 2], 3.0)).unwrap();
            let lq = g.weighted_sum(q, Tensor::full(&[1, 5, 2, 2], w2)).unwrap();
            let l = g.add(lp, lq).unwrap();
            g.backward(l, store).unwrap();
            store.get(id).grad.narrow_channels(0, 2).unwrap()
        };
        let g1 = run(&mut store, 1.0);
        let g2 = run(&mut store, -7.5);
        assert_eq!(g1, g2);
        assert!(g1.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn round_ste_passes_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("x", Tensor::new(&[3], vec![0.2, 1.7, -2.5]).unwrap())
            .unwrap();
        let g = Graph::new();
        let x = g.param(&store, id);
        let r = g.round_ste(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, -2.0]);
        let l = g
            .weighted_sum(r, Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::ones(&[2])).unwrap();
        store.set_frozen("x", true);
        let g = Graph::new();
        let x = g.param(&store, id);
        let l = g.sum(x);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }
}
