//! Central-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::rng::XorShift64;

/// Denominator floor of the relative error, so that gradients near zero
/// are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn total_coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` with `(f(p+eps) − f(p−eps)) / 2eps`
/// on up to `coords_per_param` randomly sampled coordinates of every
/// parameter (all coordinates when the tensor is smaller).
///
/// `f` records its computation on the given tape, reading parameters
/// through `Tape::param`, and returns the scalar loss node.
pub fn grad_check<E, F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss).expect("grad_check loss must be scalar");

    let mut rng = XorShift64::new(seed);
    let mut report = GradCheckReport::default();
    for (name, value) in params.iter() {
        let Some(analytic) = grads.get(name) else { continue };
        let n = value.len();
        let picks: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(n as u64) as usize).collect()
        };
        let mut check = ParamCheck {
            name: name.to_string(),
            coords: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in picks {
            let base = value.data()[idx];
            let plus = eval(&params.with_value(name, idx, base + eps))?;
            let minus = eval(&params.with_value(name, idx, base - eps))?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            check.coords += 1;
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
