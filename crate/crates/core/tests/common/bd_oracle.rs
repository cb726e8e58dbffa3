//! Bjøntegaard deltas by a second route: Hermite-basis PCHIP evaluation and
//! dense trapezoid integration, sharing no code with the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use smfc_core::eval::{RDCurve, RDPoint};

pub const TRAPEZOID_INTERVALS: usize = 100_000;

struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

fn edge(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d * s0 <= 0.0 {
        0.0
    } else if s0 * s1 < 0.0 && d.abs() > 3.0 * s0.abs() {
        3.0 * s0
    } else {
        d
    }
}

impl Spline {
    fn new(mut pts: Vec<(f64, f64)>) -> Self {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
        let s: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut m = vec![0.0; n];
        for k in 1..n - 1 {
            if s[k - 1] * s[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                m[k] = (w1 + w2) / (w1 / s[k - 1] + w2 / s[k]);
            }
        }
        m[0] = edge(h[0], h[1], s[0], s[1]);
        m[n - 1] = edge(h[n - 2], h[n - 3], s[n - 2], s[n - 3]);
        Self { x, y, m }
    }

    fn at(&self, t: f64) -> f64 {
        let k = (self.x.iter().filter(|&&v| v <= t).count().max(1) - 1).min(self.x.len() - 2);
        let h = self.x[k + 1] - self.x[k];
        let u = (t - self.x[k]) / h;
        let (u2, u3) = (u * u, u * u * u);
        (2.0 * u3 - 3.0 * u2 + 1.0) * self.y[k]
            + (u3 - 2.0 * u2 + u) * h * self.m[k]
            + (-2.0 * u3 + 3.0 * u2) * self.y[k + 1]
            + (u3 - u2) * h * self.m[k + 1]
    }

    fn trapezoid(&self, a: f64, b: f64) -> f64 {
        let n = TRAPEZOID_INTERVALS;
        let step = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| self.at(a + step * i as f64)).sum();
        step * (inner + 0.5 * (self.at(a) + self.at(b)))
    }
}

fn mean_gap(anchor: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> f64 {
    let (a, t) = (Spline::new(anchor), Spline::new(test));
    let lo = a.x[0].max(t.x[0]);
    let hi = a.x[a.x.len() - 1].min(t.x[t.x.len() - 1]);
    (t.trapezoid(lo, hi) - a.trapezoid(lo, hi)) / (hi - lo)
}

/// Percent rate change of `test` against `anchor` at equal metric.
pub fn oracle_bd_rate(anchor: &RDCurve, test: &RDCurve) -> f64 {
    let pts = |c: &RDCurve| c.points().iter().map(|p| (p.metric, p.bpp.log10())).collect();
    (10f64.powf(mean_gap(pts(anchor), pts(test))) - 1.0) * 100.0
}

/// Metric change of `test` against `anchor` at equal log-rate.
pub fn oracle_bd_metric(anchor: &RDCurve, test: &RDCurve) -> f64 {
    let pts = |c: &RDCurve| c.points().iter().map(|p| (p.bpp.log10(), p.metric)).collect();
    mean_gap(pts(anchor), pts(test))
}

fn smooth_curve(rng: &mut ChaCha8Rng, start: f64, slope: f64, offset: f64) -> RDCurve {
    let n = rng.gen_range(4..=6);
    let (wobble, phase) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..6.0));
    let mut l = start;
    let points = (0..n)
        .map(|k| {
            let p = RDPoint::new(
                k.to_string(),
                10f64.powf(l),
                offset + slope * l + wobble * (3.0 * l + phase).sin(),
            );
            l += rng.gen_range(0.15..0.5);
            p
        })
        .collect();
    RDCurve::new(points).expect("increasing rates")
}

/// Two smooth increasing curves whose rate and metric ranges overlap.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (RDCurve, RDCurve) {
    let start = rng.gen_range(-2.0..-0.5);
    let (slope, offset) = (rng.gen_range(4.0..12.0), rng.gen_range(20.0..40.0));
    let a = smooth_curve(rng, start, slope, offset);
    let shifted = (
        start + rng.gen_range(-0.3..0.3),
        slope * rng.gen_range(0.8..1.25),
        offset + rng.gen_range(-2.0..2.0),
    );
    let b = smooth_curve(rng, shifted.0, shifted.1, shifted.2);
    (a, b)
}
