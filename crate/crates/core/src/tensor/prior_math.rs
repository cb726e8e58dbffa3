//! Per-channel monotone cumulative density used by the factorized prior.
//!
//! Each channel maps a scalar through four affine layers of widths
//! `1 → 3 → 3 → 3 → 1`. Matrices pass through `softplus` (nonnegative) and
//! the first three layers add `tanh(a) ⊙ tanh(z)` with `tanh(a) > -1`, so the
//! composite is nondecreasing in its input. The CDF is `sigmoid` of the
//! output ("logit").

use super::kernels::{sigmoid, softplus};
use super::{Real, Tensor};

/// Layer widths, input to output.
pub const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
pub const LAYERS: usize = 4;
/// Smallest likelihood used when converting probabilities into bits.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Parameter tensors of a factorized prior, borrowed from wherever they live.
/// Shapes: `matrices[i]`: `[C, DIMS[i+1], DIMS[i]]`, `biases[i]`:
/// `[C, DIMS[i+1], 1]`, `factors[i]`: `[C, DIMS[i+1], 1]`.
#[derive(Clone, Copy)]
pub struct PriorTensors<'a, T: Real> {
    pub matrices: [&'a Tensor<T>; LAYERS],
    pub biases: [&'a Tensor<T>; LAYERS],
    pub factors: [&'a Tensor<T>; LAYERS - 1],
}

impl<'a, T: Real> PriorTensors<'a, T> {
    pub fn from_slice(t: &[&'a Tensor<T>]) -> Self {
        Self {
            matrices: [t[0], t[1], t[2], t[3]],
            biases: [t[4], t[5], t[6], t[7]],
            factors: [t[8], t[9], t[10]],
        }
    }

    pub fn channels(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn shapes(channels: usize) -> Vec<Vec<usize>> {
        let mut v = Vec::new();
        for i in 0..LAYERS {
            v.push(vec![channels, DIMS[i + 1], DIMS[i]]);
        }
        for i in 0..LAYERS {
            v.push(vec![channels, DIMS[i + 1], 1]);
        }
        for i in 0..LAYERS - 1 {
            v.push(vec![channels, DIMS[i + 1], 1]);
        }
        v
    }

    pub fn channel(&self, c: usize) -> ChannelPrior<T> {
        let mut cp = ChannelPrior::default();
        for i in 0..LAYERS {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            let m = &self.matrices[i].data()[c * o * n..(c + 1) * o * n];
            for (j, &h) in m.iter().enumerate() {
                cp.s[i][j] = softplus(h);
                cp.ds[i][j] = sigmoid(h);
            }
            cp.b[i][..o].copy_from_slice(&self.biases[i].data()[c * o..(c + 1) * o]);
        }
        for i in 0..LAYERS - 1 {
            let o = DIMS[i + 1];
            for (j, &a) in self.factors[i].data()[c * o..(c + 1) * o].iter().enumerate() {
                let t = a.portable_tanh();
                cp.ta[i][j] = t;
                cp.dta[i][j] = T::one() - t * t;
            }
        }
        cp
    }
}

/// Precomputed nonlinear transforms of one channel's parameters.
#[derive(Clone, Copy, Default)]
pub struct ChannelPrior<T: Real> {
    s: [[T; 9]; LAYERS],
    ds: [[T; 9]; LAYERS],
    b: [[T; 3]; LAYERS],
    ta: [[T; 3]; LAYERS - 1],
    dta: [[T; 3]; LAYERS - 1],
}

/// Gradient accumulator for one channel. `s` holds ∂/∂softplus(H); it is
/// mapped to ∂/∂H when written back.
#[derive(Clone, Copy, Default)]
pub struct ChannelGrad<T: Real> {
    s: [[T; 9]; LAYERS],
    b: [[T; 3]; LAYERS],
    a: [[T; 3]; LAYERS - 1],
}

#[derive(Default)]
struct Trace<T: Real> {
    h_in: [[T; 3]; LAYERS],
    t: [[T; 3]; LAYERS - 1],
}

impl<T: Real> ChannelPrior<T> {
    pub fn logit(&self, x: T) -> T {
        self.run(x, None)
    }

    pub fn cdf(&self, x: T) -> T {
        sigmoid(self.logit(x))
    }

    fn run(&self, x: T, mut trace: Option<&mut Trace<T>>) -> T {
        let mut h = [T::zero(); 3];
        h[0] = x;
        for i in 0..LAYERS {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            if let Some(tr) = trace.as_deref_mut() {
                tr.h_in[i] = h;
            }
            let mut z = [T::zero(); 3];
            for r in 0..o {
                let mut acc = self.b[i][r];
                for k in 0..n {
                    acc += self.s[i][r * n + k] * h[k];
                }
                z[r] = acc;
            }
            if i < LAYERS - 1 {
                for r in 0..o {
                    let t = z[r].portable_tanh();
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.t[i][r] = t;
                    }
                    z[r] += self.ta[i][r] * t;
                }
            }
            h = z;
        }
        h[0]
    }

    /// Backpropagates `g = ∂L/∂logit(x)`; accumulates parameter grads and
    /// returns ∂L/∂x.
    pub fn logit_backward(&self, x: T, g: T, grad: &mut ChannelGrad<T>) -> T {
        let mut tr = Trace::default();
        self.run(x, Some(&mut tr));
        let mut dh = [T::zero(); 3];
        dh[0] = g;
        for i in (0..LAYERS).rev() {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            let mut dz = [T::zero(); 3];
            for r in 0..o {
                dz[r] = if i < LAYERS - 1 {
                    let t = tr.t[i][r];
                    grad.a[i][r] += dh[r] * t * self.dta[i][r];
                    dh[r] * (T::one() + self.ta[i][r] * (T::one() - t * t))
                } else {
                    dh[r]
                };
                grad.b[i][r] += dz[r];
            }
            let mut dn = [T::zero(); 3];
            for r in 0..o {
                for k in 0..n {
                    grad.s[i][r * n + k] += dz[r] * tr.h_in[i][k];
                    dn[k] += self.s[i][r * n + k] * dz[r];
                }
            }
            dh = dn;
        }
        dh[0]
    }
}

/// Probability mass of the unit interval around `x`, `cdf(x+½) − cdf(x−½)`,
/// evaluated in the numerically stable tail.
pub fn interval_mass<T: Real>(upper: T, lower: T) -> T {
    if upper + lower > T::zero() {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

fn bits_of<T: Real>(p: T) -> T {
    -(p.max(T::lit(LIKELIHOOD_FLOOR))).portable_ln() / T::lit(std::f64::consts::LN_2)
}

/// Total information content, in bits, of `x` (`[N, C, H, W]`) under the prior.
pub fn bits_forward<T: Real>(x: &Tensor<T>, p: &PriorTensors<'_, T>) -> T {
    let [n, c, h, w] = x.dims4().expect("checked by caller");
    let plane = h * w;
    let half = T::lit(0.5);
    let mut total = T::zero();
    for ch in 0..c {
        let cp = p.channel(ch);
        let mut acc = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                let m = interval_mass(cp.logit(v + half), cp.logit(v - half));
                acc += bits_of(m);
            }
        }
        total += acc;
    }
    total
}

/// Which elements of `x` sit on the likelihood floor, channel-major.
pub fn floored_mask<T: Real>(x: &Tensor<T>, p: &PriorTensors<'_, T>) -> Vec<bool> {
    let [n, c, h, w] = x.dims4().expect("checked by caller");
    let plane = h * w;
    let half = T::lit(0.5);
    let floor = T::lit(LIKELIHOOD_FLOOR);
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let cp = p.channel(ch);
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                out.push(interval_mass(cp.logit(v + half), cp.logit(v - half)) < floor);
            }
        }
    }
    out
}

/// Backward of [`bits_forward`]. Returns `(dx, grads of the 11 parameter
/// tensors in PriorTensors order)`.
pub fn bits_backward<T: Real>(
    x: &Tensor<T>,
    p: &PriorTensors<'_, T>,
    g: T,
    need_x: bool,
) -> (Option<Tensor<T>>, Vec<Tensor<T>>) {
    let [n, c, h, w] = x.dims4().expect("checked by caller");
    let plane = h * w;
    let half = T::lit(0.5);
    let ln2 = T::lit(std::f64::consts::LN_2);
    let floor = T::lit(LIKELIHOOD_FLOOR);
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut out: Vec<Tensor<T>> = PriorTensors::<T>::shapes(c).iter().map(|s| Tensor::zeros(s)).collect();
    for ch in 0..c {
        let cp = p.channel(ch);
        let mut cg = ChannelGrad::default();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for k in 0..plane {
                let v = x.data()[base + k];
                let (u, l) = (cp.logit(v + half), cp.logit(v - half));
                let m = interval_mass(u, l);
                if m < floor {
                    // the floored likelihood is constant here
                    continue;
                }
                let dm = -g / (m * ln2);
                let su = sigmoid(u);
                let sl = sigmoid(l);
                let du = dm * su * (T::one() - su);
                let dl = -dm * sl * (T::one() - sl);
                let gx = cp.logit_backward(v + half, du, &mut cg) + cp.logit_backward(v - half, dl, &mut cg);
                if let Some(dx) = dx.as_mut() {
                    dx.data_mut()[base + k] = gx;
                }
            }
        }
        for i in 0..LAYERS {
            let (o, nn) = (DIMS[i + 1], DIMS[i]);
            for j in 0..o * nn {
                out[i].data_mut()[ch * o * nn + j] = cg.s[i][j] * cp.ds[i][j];
            }
            for r in 0..o {
                out[LAYERS + i].data_mut()[ch * o + r] = cg.b[i][r];
            }
        }
        for i in 0..LAYERS - 1 {
            let o = DIMS[i + 1];
            for r in 0..o {
                out[2 * LAYERS + i].data_mut()[ch * o + r] = cg.a[i][r];
            }
        }
    }
    (dx, out)
}
