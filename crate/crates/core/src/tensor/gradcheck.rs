use super::tape::{ParamId, Tape, Var};
use super::value::Tensor;
use crate::error::{HugError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// Analytic and central-difference derivatives at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference formula used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h^2)`.
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, truncation error `O(h^4)`.
    ///
    /// Its smaller truncation error allows a larger `h`, which shrinks the
    /// rounding noise on large loss values.
    FivePoint,
}

/// Compares tape gradients of `f` against three-point central differences.
///
/// `f` receives a fresh tape and one bound variable per entry of `params`
/// and must return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, step, Stencil::ThreePoint)
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut reports = grad_check_many(|t, v| Ok(vec![f(t, v)?]), params, step, stencil)?;
    Ok(reports.remove(0))
}

/// Checks several scalar outputs of one function in a single sweep, so each
/// probe costs one forward evaluation regardless of the number of outputs.
pub fn grad_check_many<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    stencil: Stencil,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t.clone()))
            .collect();
        let outs = f(&mut tape, &vars)?;
        Ok((tape, outs))
    };

    let (tape, outs) = eval(params)?;
    let grads = outs
        .iter()
        .map(|&o| tape.backward(o))
        .collect::<Result<Vec<_>>>()?;
    drop(tape);

    let mut probe = params.to_vec();
    let mut reports = vec![
        GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            worst_values: (0.0, 0.0),
            coordinates: 0,
        };
        outs.len()
    ];
    for p in 0..params.len() {
        for c in 0..params[p].len() {
            let orig = params[p].data()[c];
            let mut side = |x: f64| -> Result<Vec<f64>> {
                probe[p].data_mut()[c] = x;
                let (t, o) = eval(&probe)?;
                let v: Vec<f64> = o.iter().map(|&o| t.scalar_value(o)).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(HugError::Numerical(format!(
                        "grad_check: non-finite value at parameter {p}, coordinate {c}"
                    )));
                }
                Ok(v)
            };
            let numeric: Vec<f64> = match stencil {
                Stencil::ThreePoint => {
                    let (p1, m1) = (side(orig + step)?, side(orig - step)?);
                    p1.iter()
                        .zip(&m1)
                        .map(|(a, b)| (a - b) / (2.0 * step))
                        .collect()
                }
                Stencil::FivePoint => {
                    let (p1, m1) = (side(orig + step)?, side(orig - step)?);
                    let (p2, m2) = (side(orig + 2.0 * step)?, side(orig - 2.0 * step)?);
                    (0..p1.len())
                        .map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * step))
                        .collect()
                }
            };
            probe[p].data_mut()[c] = orig;
            for ((report, g), &num) in reports.iter_mut().zip(&grads).zip(&numeric) {
                let analytic = g.get(ParamId(p)).expect("bound param").data()[c];
                let err = rel_error(analytic, num);
                report.coordinates += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((p, c));
                    report.worst_values = (analytic, num);
                }
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::matrix(1, 6, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let report = grad_check(|t, v| Ok(t.sq_norm(v[0])), &[x], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        // ln(x) with x = 1e-6 and step 1e-5 probes ln of a negative number
        let x = Tensor::matrix(1, 2, vec![1.0, 1e-6]);
        let err = grad_check(
            |t, v| {
                let l = t.ln(v[0])?;
                Ok(t.sum(l))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("ln"), "{err}");
    }

    #[test]
    fn five_point_is_exact_for_quartics() {
        let x = Tensor::matrix(1, 3, vec![0.7, -1.3, 2.1]);
        let report = grad_check_with(
            |t, v| {
                let s = t.mul(v[0], v[0])?;
                let q = t.mul(s, s)?;
                Ok(t.sum(q))
            },
            &[x],
            1e-2,
            Stencil::FivePoint,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.0 + 1e-9) - 5e-10).abs() < 1e-12);
    }
}
