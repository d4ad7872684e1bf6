//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Precision, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    /// The parameter with the largest relative error, if any.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_sum<T: Scalar, F>(f: &mut F, params: &ParamStore<T>) -> Result<f64>
where
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let out = f(&mut g, params)?;
    Ok(g.value(out).data().iter().map(|x| x.f64()).sum())
}

/// Compares reverse-mode gradients of `sum(f(params))` against central differences.
pub fn grad_check<T: Scalar, F>(mut f: F, params: &ParamStore<T>, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if T::PRECISION != Precision::Double {
        return Err(Error::Precision);
    }
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }

    let mut store = params.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &store)?;
    let loss = g.sum_all(out)?;
    g.backward(loss, &mut store)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::with_capacity(store.len()),
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic: Vec<f64> = store.get(id).grad().iter().map(|x| x.f64()).collect();
        let mut check = ParamCheck {
            name: store.get(id).name().to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            flagged: Vec::new(),
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).value().data()[i];
            work.get_mut(id).value_mut()[i] = orig + T::lit(epsilon);
            let plus = eval_sum(&mut f, &work)?;
            work.get_mut(id).value_mut()[i] = orig - T::lit(epsilon);
            let minus = eval_sum(&mut f, &work)?;
            work.get_mut(id).value_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = relative_error(a, numeric);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > tolerance {
                check.flagged.push(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", Tensor::scalar(3.0)).unwrap();
        let r = grad_check(
            |g, p| {
                let v = g.param(p, x);
                g.square(v)
            },
            &s,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn single_precision_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        let x = s.add("x", Tensor::scalar(3.0)).unwrap();
        let r = grad_check(
            |g, p| {
                let v = g.param(p, x);
                g.square(v)
            },
            &s,
            1e-6,
            1e-8,
        );
        assert!(matches!(r, Err(Error::Precision)));
    }
}
