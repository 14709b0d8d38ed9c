//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Matrix, NumericError};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (sampled with
    /// `seed`); `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compares `analytic[i]` against central differences of `f` around
/// `params[i]`, returning the max of `|analytic − numeric| / max(1e-12, |numeric|)`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericError>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if !(opts.eps > 0.0) {
        return Err(NumericError::NonFinite(format!("eps must be positive, got {}", opts.eps)));
    }
    if params.len() != analytic.len() {
        return Err(NumericError::Checkpoint(format!(
            "{} params but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(NumericError::shape("finite_difference_check", p, g));
        }
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(NumericError::NonFinite(format!("loss at the base point is {base}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].data().len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let plus = f(&work);
            work[pi].data_mut()[c] = orig - opts.eps;
            let minus = f(&work);
            work[pi].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericError::NonFinite(format!(
                    "loss became non-finite perturbing param {pi} coord {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, c);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
