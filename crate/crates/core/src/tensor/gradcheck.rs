//! Central finite differences against the reverse sweep, in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Largest accepted `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Denominator floor so that vanishing gradients are compared absolutely.
    /// It is raised to `ROUNDOFF_ULPS * eps * |loss| / (step * tolerance)`
    /// when that is larger, since central differences cannot resolve
    /// gradients below the round-off of the loss.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all if it is smaller).
    pub coords_per_tensor: usize,
}

/// Round-off of a full forward pass, in ulps of the loss. Across the op suite
/// the difference quotient of near-zero gradients stays within 1.3 ulps.
pub const ROUNDOFF_ULPS: f64 = 4.0;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            coords_per_tensor: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose `±step` evaluations changed a piecewise branch.
    pub skipped: usize,
    pub max_error: f64,
    /// Parameter, flat index, analytic and numeric value of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Largest loss magnitude seen, for judging round-off in the differences.
    pub loss_scale: f64,
}

impl GradReport {
    pub fn merge(&mut self, o: &Self) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.loss_scale = self.loss_scale.max(o.loss_scale);
        if o.max_error > self.max_error {
            self.max_error = o.max_error;
            self.worst.clone_from(&o.worst);
        }
    }
}

/// Compares the gradient of the scalar built by `f` against central
/// differences for a sample of coordinates of every non-frozen parameter.
/// `f` must be deterministic.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let g = Graph::new();
        let loss = f(&g, s)?;
        let v = g.value(loss).item()?;
        Ok((v, g.kink_signature()))
    };
    store.zero_grad();
    let g = Graph::new();
    let loss = f(&g, store)?;
    let base_sig = g.kink_signature();
    let mut report = GradReport {
        loss_scale: g.value(loss).item()?.abs(),
        ..GradReport::default()
    };
    g.backward(loss, store)?;
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, opts.coords_per_tensor).into_vec()
        };
        for k in coords {
            let analytic = store.get(id).grad.data()[k];
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + opts.step;
            let (lp, sp) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - opts.step;
            let (lm, sm) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::Numeric(format!(
                    "nonfinite gradient at {}[{k}]",
                    store.get(id).name
                )));
            }
            let roundoff = ROUNDOFF_ULPS * f64::EPSILON * lp.abs().max(lm.abs()) / (opts.step * opts.tolerance);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor).max(roundoff);
            report.checked += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = Some((store.get(id).name.clone(), k, analytic, numeric));
            }
        }
    }
    Ok(report)
}
