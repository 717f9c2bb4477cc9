use super::params::{Group, ParamSet};
use super::tape::{Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport<S = f64> {
    /// Max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|).
    pub max_rel_error: S,
    /// Parameter name and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares tape gradients of `f` against central differences with the given
/// `step`, over every parameter or only those of `group`.
///
/// `f` must build the same deterministic computation each time it is called.
pub fn finite_difference_check<S, F>(
    params: &ParamSet<S>,
    step: S,
    group: Option<Group>,
    f: F,
) -> Result<FdReport<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &Bindings) -> Result<Var>,
{
    if !(step > S::zero()) {
        return Err(Error::Usage("finite-difference step must be positive".into()));
    }
    let eval = |p: &ParamSet<S>| -> Result<S> {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let out = f(&mut tape, &b)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Usage("function under check must return a scalar".into()));
        }
        Ok(v.item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let b = tape.bind(params);
        let out = f(&mut tape, &b)?;
        tape.backward(out, &b)?
    };

    let two = S::lit(2.0);
    let mut report = FdReport {
        max_rel_error: S::zero(),
        worst: None,
        entries_checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| group.is_none_or(|g| p.group == g))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let grad = analytic.get(&name).expect("every bound parameter has a gradient").clone();
        for i in 0..grad.len() {
            let orig = work.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite value perturbing `{name}`[{i}]"
                )));
            }
            let numeric = (plus - minus) / (two * step);
            let a = grad.data()[i];
            let denom = S::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn one_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("p", Group::Theta, Tensor::from_f64(vec![v.len()], v).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn linear_function_is_exact() {
        let p = one_param(&[0.3, -1.2, 4.0]);
        let r = finite_difference_check(&p, 1e-5, None, |t, b| t.reduce_sum(b.var("p")?, None)).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = one_param(&[1.0, 2.0]);
        let r = finite_difference_check(&p, 1e-5, None, |t, _| {
            Ok(t.constant(Tensor::scalar(3.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        let p = one_param(&[1e-6]);
        let r = finite_difference_check(&p, 1e-5, None, |t, b| {
            let l = t.log(b.var("p")?)?;
            t.reduce_sum(l, None)
        });
        assert!(r.is_err());
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = one_param(&[1.0]);
        assert!(finite_difference_check(&p, 0.0, None, |t, b| t.reduce_sum(b.var("p")?, None)).is_err());
    }
}
