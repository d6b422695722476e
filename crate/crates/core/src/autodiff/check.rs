//! Central finite-difference gradient checking.

use serde::Serialize;

use super::{AutodiffError, Graph, ParamStore, Var};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default tolerance on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Flat indices whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(ParamCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, element by element, for every parameter.
///
/// `f` receives a fresh graph and one bound variable per parameter and must
/// return a one-element loss.
pub fn grad_check<F, E>(
    f: F,
    params: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_with(f, params, step, tol, |_| {})
}

/// Like [`grad_check`], with a hook that prepares every graph before the
/// parameters are bound (used to inject backward faults).
#[doc(hidden)]
pub fn grad_check_with<F, P, E>(
    f: F,
    params: &ParamStore,
    step: f64,
    tol: f64,
    prepare: P,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    P: Fn(&mut Graph),
    E: From<AutodiffError>,
{
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        prepare(&mut g);
        let vars = store.bind(&mut g);
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    prepare(&mut g);
    let vars = params.bind(&mut g);
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        step,
        tol,
        params: Vec::with_capacity(params.len()),
    };
    let mut perturbed = params.clone();
    for ((id, p), &var) in params.iter().zip(&vars) {
        let analytic = grads.get(var);
        let mut check = ParamCheck {
            name: p.name.clone(),
            elements: p.value.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            failures: Vec::new(),
        };
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            perturbed.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[k], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = k;
            }
            if err > tol {
                check.failures.push(k);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
