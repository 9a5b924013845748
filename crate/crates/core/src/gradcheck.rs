//! Finite-difference verification of reverse transforms.
//!
//! Probes randomly chosen scalar parameters and compares the analytic
//! gradient against a central difference of the loss.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::Rng;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport<F> {
    pub max_rel_err: F,
    pub worst_param: String,
    pub worst_index: usize,
    pub samples: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss(params, with_grad)` must return the (deterministic) loss value and,
/// when `with_grad` is true, accumulate gradients into the store. Probes
/// `sample_count` trainable scalars chosen without replacement; the relative
/// error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Real, L>(
    loss: &mut L,
    params: &mut ParamStore<F>,
    step: F,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport<F>>
where
    L: FnMut(&mut ParamStore<F>, bool) -> Result<F>,
{
    if step <= F::zero() {
        return Err(Error::InvalidArgument(
            "grad_check step must be positive".into(),
        ));
    }
    if sample_count == 0 {
        return Err(Error::InvalidArgument(
            "grad_check sample_count must be positive".into(),
        ));
    }

    params.zero_grads();
    let base = loss(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {base} before any perturbation"
        )));
    }
    // Snapshot analytic gradients and the trainable slot layout.
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let analytic: Vec<Vec<F>> = names
        .iter()
        .map(|n| params.get(n).map(|p| p.grad.data().to_vec()))
        .collect::<Result<_>>()?;
    let total: usize = analytic.iter().map(|g| g.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "grad_check found no trainable scalars".into(),
        ));
    }

    let count = sample_count.min(total);
    let picks = rng.sample_without_replacement(total, count);

    let mut report = GradCheckReport {
        max_rel_err: F::zero(),
        worst_param: String::new(),
        worst_index: 0,
        samples: count,
    };
    let floor = F::of(1e-8);
    for flat in picks {
        // Map the flat slot index onto (parameter, element).
        let mut remaining = flat;
        let mut which = 0usize;
        while remaining >= analytic[which].len() {
            remaining -= analytic[which].len();
            which += 1;
        }
        let name = &names[which];
        let elem = remaining;

        let original = params.get(name)?.value.data()[elem];
        params.get_mut(name)?.value.data_mut()[elem] = original + step;
        let plus = loss(params, false)?;
        params.get_mut(name)?.value.data_mut()[elem] = original - step;
        let minus = loss(params, false)?;
        params.get_mut(name)?.value.data_mut()[elem] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became non-finite while probing '{name}'[{elem}]"
            )));
        }

        let numeric = (plus - minus) / (step + step);
        let a = analytic[which][elem];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.clone();
            report.worst_index = elem;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseArray;

    #[test]
    fn quadratic_loss_has_tiny_error() {
        // loss = sum(theta^2) at theta = (1, 2): analytic gradient (2, 4).
        let mut params = ParamStore::<f64>::new();
        params
            .insert("theta", DenseArray::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let theta = store.value("theta")?.clone();
            let value: f64 = theta.data().iter().map(|t| t * t).sum();
            if with_grad {
                let grad = theta.map(|t| 2.0 * t);
                store.accumulate_grad("theta", &grad)?;
            }
            Ok(value)
        };
        let mut rng = Rng::new(0, 0);
        let report = grad_check(&mut loss, &mut params, 1e-5, 2, &mut rng).unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
        // Analytic gradient is exactly (2, 4).
        assert_eq!(params.get("theta").unwrap().grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("theta", DenseArray::from_vec(&[1], vec![1.5]).unwrap(), true)
            .unwrap();
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let t = store.value("theta")?.data()[0];
            if with_grad {
                let grad = DenseArray::from_vec(&[1], vec![3.0 * t]).unwrap(); // should be 2t
                store.accumulate_grad("theta", &grad)?;
            }
            Ok(t * t)
        };
        let mut rng = Rng::new(0, 0);
        let report = grad_check(&mut loss, &mut params, 1e-5, 1, &mut rng).unwrap();
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst_param, "theta");
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("spiky", DenseArray::from_vec(&[1], vec![0.0]).unwrap(), true)
            .unwrap();
        let mut calls = 0usize;
        let mut loss = |store: &mut ParamStore<f64>, with_grad: bool| -> crate::Result<f64> {
            let t = store.value("spiky")?.data()[0];
            if with_grad {
                store.accumulate_grad("spiky", &DenseArray::from_vec(&[1], vec![0.0]).unwrap())?;
            }
            calls += 1;
            // Finite at the base point, NaN once perturbed.
            Ok(if calls == 1 { 0.0 } else { f64::NAN * t.max(1.0) })
        };
        let mut rng = Rng::new(0, 0);
        let err = grad_check(&mut loss, &mut params, 1e-5, 1, &mut rng).unwrap_err();
        assert!(err.to_string().contains("spiky"), "{err}");
    }
}
