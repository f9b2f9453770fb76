use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamStore, Result};

/// Result of one objective evaluation. `grads` is filled when requested.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Above this many parameter elements a random subsample is checked.
    pub max_full: usize,
    /// Approximate subsample size; every tensor contributes at least
    /// `min_per_tensor` elements (or all of them, if fewer).
    pub sample: usize,
    pub min_per_tensor: usize,
    /// Denominator floor of the relative error, so gradients that are zero up
    /// to rounding are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_full: 10_000,
            sample: 1_000,
            min_per_tensor: 8,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub total: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares the reverse-mode gradient returned by `f` with central
/// differences of its loss, perturbing one parameter element at a time.
///
/// `f(params, want_grads)` must be deterministic; the baseline is evaluated
/// twice and any bitwise disagreement is an error.
pub fn gradcheck<F>(params: &mut ParamStore<f64>, opts: &GradcheckOptions, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<Evaluation>,
{
    let first = f(params, true)?;
    let again = f(params, true)?;
    let (Some(grads), Some(grads2)) = (&first.grads, &again.grads) else {
        return Err(NnError::NonDeterministic("objective returned no gradients".into()));
    };
    if first.loss.to_bits() != again.loss.to_bits() {
        return Err(NnError::NonDeterministic(format!(
            "loss {} then {}",
            first.loss, again.loss
        )));
    }
    if grads != grads2 {
        return Err(NnError::NonDeterministic("gradients differ between identical calls".into()));
    }
    if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len()) {
        return super::shape_err("gradcheck", "gradient layout does not match parameters");
    }

    let total = params.num_elements();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.len();
            if total <= opts.max_full {
                return (0..n).collect();
            }
            let share = (opts.sample as f64 * n as f64 / total as f64).round() as usize;
            let want = share.max(opts.min_per_tensor).min(n);
            let mut idx = sample(&mut rng, n, want).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        total,
        tolerance: opts.tolerance,
    };
    let h = opts.step;
    for (pi, idx) in picks.iter().enumerate() {
        for &i in idx {
            let orig = params.get(pi).data[i];
            params.get_mut(pi).data[i] = orig + h;
            let plus = f(params, false);
            params.get_mut(pi).data[i] = orig - h;
            let minus = f(params, false);
            params.get_mut(pi).data[i] = orig;
            let numeric = (plus?.loss - minus?.loss) / (2.0 * h);
            let analytic = grads[pi][i];
            let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_param = params.get(pi).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
