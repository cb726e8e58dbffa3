//! Bjøntegaard deltas over shape-preserving piecewise-cubic interpolants.

use crate::error::{Error, Result};

/// Minimum number of points for a delta computation.
pub const MIN_BD_POINTS: usize = 4;

/// One operating point: bits per pixel against a task metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RDPoint {
    pub label: String,
    pub bpp: f64,
    pub metric: f64,
}

impl RDPoint {
    pub fn new(label: impl Into<String>, bpp: f64, metric: f64) -> Self {
        Self {
            label: label.into(),
            bpp,
            metric,
        }
    }
}

/// Operating points ordered by strictly increasing bpp.
#[derive(Debug, Clone, PartialEq)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(points: Vec<RDPoint>) -> Result<Self> {
        for p in &points {
            if !(p.bpp.is_finite() && p.bpp > 0.0) {
                return Err(Error::Argument(format!(
                    "point {:?}: bpp must be positive, got {}",
                    p.label, p.bpp
                )));
            }
            if !p.metric.is_finite() {
                return Err(Error::Argument(format!("point {:?}: metric is not finite", p.label)));
            }
        }
        if let Some(w) = points.windows(2).find(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::Argument(format!(
                "bpp must strictly increase: {:?} at {} then {:?} at {}",
                w[0].label, w[0].bpp, w[1].label, w[1].bpp
            )));
        }
        Ok(Self { points })
    }

    /// Sorts by bpp first; equal rates are still an error.
    pub fn from_unsorted(mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        Self::new(points)
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Log-rate, metric pairs.
    fn log_rates(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.bpp.log10(), p.metric)).collect()
    }
}

/// Monotone cubic Hermite interpolant with Fritsch-Carlson slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// Needs at least two points with strictly increasing `x`.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Argument("interpolation needs at least two (x, y) pairs".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Argument(
                "interpolation abscissae must be finite and strictly increasing".into(),
            ));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d.fill(delta[0]);
        } else {
            for k in 1..n - 1 {
                let (a, b) = (delta[k - 1], delta[k]);
                if a * b > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / a + w2 / b);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    pub fn slopes(&self) -> &[f64] {
        &self.d
    }

    fn segment(&self, t: f64) -> usize {
        let k = self.x.partition_point(|&v| v <= t);
        k.clamp(1, self.x.len() - 1) - 1
    }

    /// Power-basis coefficients of segment `k` in `s = t - x[k]`.
    fn coeffs(&self, k: usize) -> [f64; 4] {
        let h = self.x[k + 1] - self.x[k];
        let delta = (self.y[k + 1] - self.y[k]) / h;
        let (d0, d1) = (self.d[k], self.d[k + 1]);
        [
            self.y[k],
            d0,
            (3.0 * delta - 2.0 * d0 - d1) / h,
            (d0 + d1 - 2.0 * delta) / (h * h),
        ]
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let [c0, c1, c2, c3] = self.coeffs(k);
        let s = t - self.x[k];
        c0 + s * (c1 + s * (c2 + s * c3))
    }

    /// Exact integral over `[a, b]`, both inside the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let lo = a.max(self.x[k]);
            let hi = b.min(self.x[k + 1]);
            if hi <= lo {
                continue;
            }
            let [c0, c1, c2, c3] = self.coeffs(k);
            let prim = |s: f64| s * (c0 + s * (c1 / 2.0 + s * (c2 / 3.0 + s * c3 / 4.0)));
            total += prim(hi - self.x[k]) - prim(lo - self.x[k]);
        }
        total
    }
}

/// Three-point end slope, limited so the end segment stays monotone.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Sorts `(x, y)` by `x` and averages `y` over equal `x`.
fn merged(mut pts: Vec<(f64, f64)>) -> (Vec<f64>, Vec<f64>) {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut xs, mut ys): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        let mut sum = 0.0;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            sum += pts[j].1;
            j += 1;
        }
        xs.push(pts[i].0);
        ys.push(sum / (j - i) as f64);
        i = j;
    }
    (xs, ys)
}

/// Interpolants of the two curves on a shared axis plus the overlap of
/// their ranges.
pub struct BdSetup {
    pub anchor: Pchip,
    pub test: Pchip,
    pub lo: f64,
    pub hi: f64,
}

fn setup(anchor: &RDCurve, test: &RDCurve, metric_axis: bool) -> Result<BdSetup> {
    for (name, c) in [("anchor", anchor), ("test", test)] {
        if c.len() < MIN_BD_POINTS {
            return Err(Error::Argument(format!(
                "{name} curve has {} points, need at least {MIN_BD_POINTS}",
                c.len()
            )));
        }
    }
    let build = |c: &RDCurve| -> Result<Pchip> {
        let pts = c
            .log_rates()
            .into_iter()
            .map(|(r, m)| if metric_axis { (m, r) } else { (r, m) })
            .collect();
        let (x, y) = merged(pts);
        if x.len() < 2 {
            return Err(Error::DisjointRange(
                "curve spans a single value on the integration axis".into(),
            ));
        }
        Pchip::new(x, y)
    };
    let (a, t) = (build(anchor)?, build(test)?);
    let lo = a.x[0].max(t.x[0]);
    let hi = a.x[a.x.len() - 1].min(t.x[t.x.len() - 1]);
    // curve points are finite, so no NaN reaches this comparison
    if hi <= lo {
        return Err(Error::DisjointRange(format!(
            "curves do not overlap on the {} axis",
            if metric_axis { "metric" } else { "log-rate" }
        )));
    }
    Ok(BdSetup {
        anchor: a,
        test: t,
        lo,
        hi,
    })
}

/// Interpolants used by [`bd_rate`]: log10(bpp) as a function of metric.
pub fn bd_rate_setup(anchor: &RDCurve, test: &RDCurve) -> Result<BdSetup> {
    setup(anchor, test, true)
}

/// Interpolants used by [`bd_metric`]: metric as a function of log10(bpp).
pub fn bd_metric_setup(anchor: &RDCurve, test: &RDCurve) -> Result<BdSetup> {
    setup(anchor, test, false)
}

/// Average rate difference at equal metric, in percent; negative means
/// `test` needs fewer bits.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    let s = bd_rate_setup(anchor, test)?;
    let delta = (s.test.integrate(s.lo, s.hi) - s.anchor.integrate(s.lo, s.hi)) / (s.hi - s.lo);
    Ok((10f64.powf(delta) - 1.0) * 100.0)
}

/// Average metric difference at equal rate.
pub fn bd_metric(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    let s = bd_metric_setup(anchor, test)?;
    Ok((s.test.integrate(s.lo, s.hi) - s.anchor.integrate(s.lo, s.hi)) / (s.hi - s.lo))
}
