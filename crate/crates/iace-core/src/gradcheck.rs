//! Central finite-difference verification of analytic gradients.

use crate::autograd::{GradStore, ParamId, ParamStore};
use crate::nn::NnError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of checking one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Verdict of a full gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when a finite-difference evaluation produced a non-finite loss;
    /// names the parameter being perturbed.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{} tensors, max relative error {:.3e} (tolerance {:.1e}): {}",
            self.entries.len(),
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Minimum coordinates sampled per tensor (tensors smaller than this are
/// checked exhaustively).
pub const COORDS_PER_TENSOR: usize = 32;

/// Compare `analytic` gradients against central finite differences of
/// `loss_fn`. The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `loss_fn` must be deterministic in the parameters (fix any sampling noise
/// before calling). Parameters are perturbed in place and restored bit-exactly.
pub fn grad_check(
    params: &mut ParamStore,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
    analytic: &GradStore,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(NnError::Config(format!(
            "grad check epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(params.len());
    let mut max_rel: f64 = 0.0;
    let mut failure = None;

    'outer: for idx in 0..params.len() {
        let id = ParamId(idx);
        let len = params.get(id).len();
        let coords: Vec<usize> = if len <= COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            // distinct sample without replacement
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < COORDS_PER_TENSOR {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        let mut tensor_max: f64 = 0.0;
        for &c in &coords {
            let orig = params.get(id).data[c];
            params.get_mut(id).data[c] = orig + epsilon;
            let plus = loss_fn(params);
            params.get_mut(id).data[c] = orig - epsilon;
            let minus = loss_fn(params);
            params.get_mut(id).data[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                failure = Some(params.name(id).to_string());
                entries.push(TensorCheck {
                    name: params.name(id).to_string(),
                    max_rel_err: f64::INFINITY,
                    coords_checked: coords.len(),
                });
                max_rel = f64::INFINITY;
                break 'outer;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let ana = analytic.get(id).data[c];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-8);
            tensor_max = tensor_max.max(rel);
        }
        max_rel = max_rel.max(tensor_max);
        entries.push(TensorCheck {
            name: params.name(id).to_string(),
            max_rel_err: tensor_max,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        epsilon,
        tolerance,
        entries,
        max_rel_err: max_rel,
        pass: failure.is_none() && max_rel < tolerance,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::math::Matrix;

    #[test]
    fn quadratic_model_passes_tightly() {
        let mut ps = ParamStore::new();
        let w = ps.register("w", Matrix::from_vec(1, 5, vec![0.3, -0.7, 1.1, 0.0, 2.4]));
        let mut loss_fn = |ps: &ParamStore| {
            let mut t = Tape::new();
            let wn = t.param(ps, w);
            let sq = t.mul(wn, wn);
            let l = t.sum_all(sq);
            t.value(l).data[0]
        };
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let sq = t.mul(wn, wn);
        let l = t.sum_all(sq);
        let mut grads = GradStore::zeros_like(&ps);
        t.backward(l, &mut grads);
        // analytic 2w is exact for quadratics up to rounding
        for c in 0..5 {
            assert!((grads.get(w).data[c] - 2.0 * ps.get(w).data[c]).abs() < 1e-12);
        }
        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-5, 1e-8, 11).unwrap();
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn zero_epsilon_rejected() {
        let mut ps = ParamStore::new();
        ps.register("w", Matrix::zeros(1, 1));
        let grads = GradStore::zeros_like(&ps);
        let mut f = |_: &ParamStore| 0.0;
        assert!(grad_check(&mut ps, &mut f, &grads, 0.0, 1e-4, 0).is_err());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut ps = ParamStore::new();
        let w = ps.register("bad/w", Matrix::from_vec(1, 2, vec![0.5, 0.5]));
        let grads = GradStore::zeros_like(&ps);
        let mut f = |ps: &ParamStore| {
            let v = ps.get(w).data[0];
            if v > 0.5 {
                f64::NAN
            } else {
                v * v
            }
        };
        let report = grad_check(&mut ps, &mut f, &grads, 1e-5, 1e-4, 0).unwrap();
        assert!(!report.pass);
        assert_eq!(report.failure.as_deref(), Some("bad/w"));
    }

    #[test]
    fn corrupted_analytic_gradient_fails() {
        let mut ps = ParamStore::new();
        let w = ps.register("w", Matrix::from_vec(1, 3, vec![0.4, -0.2, 0.9]));
        let mut loss_fn = |ps: &ParamStore| {
            let mut t = Tape::new();
            let wn = t.param(ps, w);
            let sq = t.mul(wn, wn);
            let l = t.sum_all(sq);
            t.value(l).data[0]
        };
        let mut t = Tape::new();
        let wn = t.param(&ps, w);
        let sq = t.mul(wn, wn);
        let l = t.sum_all(sq);
        let mut grads = GradStore::zeros_like(&ps);
        t.backward(l, &mut grads);
        grads.get_mut(w).data[1] += 0.5; // inject a fault
        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-5, 1e-4, 3).unwrap();
        assert!(!report.pass);
    }
}
