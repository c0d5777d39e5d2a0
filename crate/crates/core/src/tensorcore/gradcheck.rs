//! Central-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensorcore::ParamStore;

/// Worst relative error seen within one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn failing(&self, tol: f64) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(move |g| g.max_rel_error >= tol)
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare the gradients held in `params` against central differences of `loss_fn`.
///
/// `loss_fn` must be a pure function of the parameter values; it is evaluated
/// twice at the unperturbed point and any bitwise mismatch is reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(mut loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = params.clone();
    let first = loss_fn(&work)?;
    let second = loss_fn(&work)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut groups = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut worst = GroupError {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params.value(id).len() {
            let orig = params.value(id).as_slice()[i];
            work.value_mut(id).as_mut_slice()[i] = orig + eps;
            let plus = loss_fn(&work)?;
            work.value_mut(id).as_mut_slice()[i] = orig - eps;
            let minus = loss_fn(&work)?;
            work.value_mut(id).as_mut_slice()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.grad(id).as_slice()[i];
            let err = relative_error(analytic, numeric);
            if err > worst.max_rel_error || !err.is_finite() {
                worst.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                worst.worst_entry = i;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
        }
        groups.push(worst);
    }

    let again = loss_fn(&work)?;
    if again.to_bits() != first.to_bits() {
        return Err(Error::NonDeterministic {
            first,
            second: again,
        });
    }
    Ok(GradCheckReport { eps, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{softmax, Matrix};

    fn scalar_store(x: f64, grad: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Matrix::row_vector(&[x])).unwrap();
        ps.grad_mut(id).set(0, 0, grad);
        ps
    }

    fn square(ps: &ParamStore) -> Result<f64> {
        let x = ps.value(ps.id("x").unwrap()).get(0, 0);
        Ok(x * x)
    }

    #[test]
    fn quadratic_is_exact() {
        let report = grad_check(square, &scalar_store(3.0, 6.0), 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn softmax_weighted_sum() {
        let c = [0.3, -1.2, 2.0, 0.7];
        let x = [0.1, -0.4, 0.9, 0.2];
        let p = softmax(&x).unwrap();
        let inner: f64 = p.iter().zip(&c).map(|(a, b)| a * b).sum();
        let grad: Vec<f64> = p.iter().zip(&c).map(|(pi, ci)| pi * (ci - inner)).collect();

        let mut ps = ParamStore::new();
        let id = ps.register("x", Matrix::row_vector(&x)).unwrap();
        ps.grad_mut(id).as_mut_slice().copy_from_slice(&grad);
        let report = grad_check(
            |ps| {
                let p = softmax(ps.value(id).as_slice())?;
                Ok(p.iter().zip(&c).map(|(a, b)| a * b).sum())
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let report = grad_check(square, &scalar_store(3.0, 6.6), 1e-5).unwrap();
        let err = report.max_rel_error();
        // |6.6 − 6| / 12.6
        assert!((0.04..0.1).contains(&err), "{err}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut calls = 0u32;
        let res = grad_check(
            |_| {
                calls += 1;
                Ok(calls as f64)
            },
            &scalar_store(1.0, 0.0),
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn step_size_is_bounded() {
        assert!(grad_check(square, &scalar_store(1.0, 2.0), 1e-2).is_err());
        assert!(grad_check(square, &scalar_store(1.0, 2.0), 1e-9).is_err());
    }
}
