//! Forward and backward rules of the fused loss kernels.

use super::kernels::{sigmoid, softplus};
use super::{Real, Tensor};

/// Sigmoid focal loss over binary targets, normalized by `max(1, #positives)`.
pub fn focal_forward<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, alpha: f64, gamma: f64) -> T {
    let (a, gm) = (T::lit(alpha), T::lit(gamma));
    let mut total = T::zero();
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        let p = sigmoid(z);
        total += if t > T::lit(0.5) {
            a * (T::one() - p).powf(gm) * softplus(-z)
        } else {
            (T::one() - a) * p.powf(gm) * softplus(z)
        };
    }
    total / focal_norm(target)
}

pub fn focal_backward<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, alpha: f64, gamma: f64, g: T) -> Tensor<T> {
    let (a, gm) = (T::lit(alpha), T::lit(gamma));
    let scale = g / focal_norm(target);
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let p = sigmoid(z);
            let q = T::one() - p;
            let d = if t > T::lit(0.5) {
                -(a * q.powf(gm) * (gm * p * softplus(-z) + q))
            } else {
                (T::one() - a) * p.powf(gm) * (gm * q * softplus(z) + p)
            };
            d * scale
        })
        .collect();
    Tensor::new(logits.shape(), data).expect("same shape")
}

fn focal_norm<T: Real>(target: &Tensor<T>) -> T {
    let pos = target.data().iter().filter(|&&t| t > T::lit(0.5)).count();
    T::lit(pos.max(1) as f64)
}

/// Smooth-L1 on `pred - target`, restricted to cells where `mask` (shape
/// `[N, 1, H, W]`) is set, averaged over the selected elements.
pub fn smooth_l1_forward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>, beta: f64) -> T {
    let mut total = T::zero();
    let mut count = 0usize;
    for_masked(pred, mask, |i| {
        total += smooth_l1(pred.data()[i] - target.data()[i], T::lit(beta));
        count += 1;
    });
    total / T::lit(count.max(1) as f64)
}

pub fn smooth_l1_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    beta: f64,
    g: T,
) -> Tensor<T> {
    let beta = T::lit(beta);
    let mut idx = Vec::new();
    for_masked(pred, mask, |i| idx.push(i));
    let scale = g / T::lit(idx.len().max(1) as f64);
    let mut out = Tensor::zeros(pred.shape());
    for i in idx {
        let e = pred.data()[i] - target.data()[i];
        let d = if e.abs() < beta { e / beta } else { e.signum() };
        out.data_mut()[i] = d * scale;
    }
    out
}

pub fn smooth_l1<T: Real>(e: T, beta: T) -> T {
    let a = e.abs();
    if a < beta {
        T::lit(0.5) * e * e / beta
    } else {
        a - T::lit(0.5) * beta
    }
}

fn for_masked<T: Real>(pred: &Tensor<T>, mask: &Tensor<T>, mut f: impl FnMut(usize)) {
    let [n, c, h, w] = pred.dims4().expect("checked by caller");
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            if mask.data()[b * plane + p] > T::lit(0.5) {
                for ch in 0..c {
                    f((b * c + ch) * plane + p);
                }
            }
        }
    }
}

/// Per-pixel softmax cross-entropy over the channel axis, mean over pixels.
pub fn softmax_ce_forward<T: Real>(logits: &Tensor<T>, target: &[usize]) -> T {
    let [n, c, h, w] = logits.dims4().expect("checked by caller");
    let plane = h * w;
    let mut total = T::zero();
    for b in 0..n {
        for p in 0..plane {
            let at = |k: usize| logits.data()[(b * c + k) * plane + p];
            let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<T>().ln();
            total += lse - at(target[b * plane + p]);
        }
    }
    total / T::lit((n * plane).max(1) as f64)
}

pub fn softmax_ce_backward<T: Real>(logits: &Tensor<T>, target: &[usize], g: T) -> Tensor<T> {
    let [n, c, h, w] = logits.dims4().expect("checked by caller");
    let plane = h * w;
    let scale = g / T::lit((n * plane).max(1) as f64);
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..n {
        for p in 0..plane {
            let at = |k: usize| logits.data()[(b * c + k) * plane + p];
            let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|k| (at(k) - m).exp()).sum();
            for k in 0..c {
                let mut d = (at(k) - m).exp() / z;
                if k == target[b * plane + p] {
                    d -= T::one();
                }
                out.data_mut()[(b * c + k) * plane + p] = d * scale;
            }
        }
    }
    out
}
