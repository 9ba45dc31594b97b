//! Central-difference gradient verification.

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest damped relative error over all parameter scalars.
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst entry.
    pub worst_param: String,
    /// Flat index of the worst entry within that parameter.
    pub worst_index: usize,
    /// Analytic gradient at the worst entry.
    pub analytic: f64,
    /// Central-difference estimate at the worst entry.
    pub finite_diff: f64,
}

/// Compare the analytic gradients already stored in `store` against central
/// differences of `loss` with step `h`, perturbing every scalar of every
/// parameter in turn.
///
/// `loss` must be a pure function of the parameter *values* (it is called
/// repeatedly with perturbed entries and must not depend on the stored
/// gradients). The per-entry discrepancy is the damped relative error
/// `|analytic − fd| / (|fd| + 1e−12)`, and the report carries the maximum.
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive and finite, got {h}"
        )));
    }
    if store.is_empty() {
        return Err(Error::invalid(
            "gradient check needs at least one parameter",
        ));
    }
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|i| {
            store
                .grad(crate::diffcore::ParamId::from_index(i))
                .data()
                .to_vec()
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        finite_diff: 0.0,
    };
    for (p, param_grads) in analytic.iter().enumerate() {
        let id = crate::diffcore::ParamId::from_index(p);
        for (s, &g) in param_grads.iter().enumerate() {
            let original = store.value(id).data()[s];
            store.value_mut(id).data_mut()[s] = original + h;
            let f_plus = loss(store)?;
            store.value_mut(id).data_mut()[s] = original - h;
            let f_minus = loss(store)?;
            store.value_mut(id).data_mut()[s] = original;
            if !(f_plus.is_finite() && f_minus.is_finite()) {
                return Err(Error::numerical(format!(
                    "loss is non-finite while perturbing {:?}[{s}]",
                    store.name(id)
                )));
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let rel = (g - fd).abs() / (fd.abs() + 1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = s;
                report.analytic = g;
                report.finite_diff = fd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    /// f(θ) = Σ_i (θ_i − c_i)² has gradient 2(θ − c); feed the store the
    /// exact gradient and expect a near-zero check error, then corrupt one
    /// entry and expect the checker to flag it.
    #[test]
    fn quadratic_gradient_verifies_and_corruption_is_caught() {
        let c = [0.3, -1.2, 2.0];
        let theta = Tensor::from_vec(&[3], vec![1.0, 0.5, -0.7]).unwrap();
        let mut store = ParamStore::new();
        let id = store.insert("theta", theta).unwrap();

        let loss = |s: &ParamStore| -> crate::error::Result<f64> {
            Ok(s.value(s.id("theta")?)
                .data()
                .iter()
                .zip(&c)
                .map(|(t, ci)| (t - ci) * (t - ci))
                .sum())
        };

        let exact: Vec<f64> = store
            .value(id)
            .data()
            .iter()
            .zip(&c)
            .map(|(t, ci)| 2.0 * (t - ci))
            .collect();
        store
            .add_to_grad(id, &Tensor::from_vec(&[3], exact).unwrap())
            .unwrap();

        let report = grad_check(&mut store, loss, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-9,
            "exact gradient should verify, got {}",
            report.max_rel_err
        );

        store.grad_mut(id).data_mut()[1] += 0.5;
        let report = grad_check(&mut store, loss, 1e-5).unwrap();
        assert!(report.max_rel_err > 1e-2);
        assert_eq!(report.worst_param, "theta");
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn rejects_bad_step() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(grad_check(&mut store, |_| Ok(0.0), 0.0).is_err());
        assert!(grad_check(&mut store, |_| Ok(0.0), f64::NAN).is_err());
    }
}
