//! Central finite-difference check of analytic gradients.

use super::{Parameter, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tol)
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every coordinate of every parameter.
///
/// `f` receives the tape and one leaf per parameter, in order. Analytic
/// gradients are also stored on the parameters.
pub fn gradcheck<F>(f: F, params: &mut [Parameter], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_sampled(f, params, eps, tol, usize::MAX)
}

/// Like [`gradcheck`] but compares at most `max_per_param` evenly spaced
/// coordinates of each parameter.
pub fn gradcheck_sampled<F>(
    mut f: F,
    params: &mut [Parameter],
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut eval = |params: &[Parameter]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let root = f(&mut tape, &vars)?;
        if !tape.value(root).is_scalar() {
            return Err(Error::Contract("gradcheck function must return a scalar".into()));
        }
        Ok((tape, vars, root))
    };

    let (mut tape, vars, root) = eval(params)?;
    let (tape2, _, root2) = eval(params)?;
    let (base, base2) = (tape.value(root).item(), tape2.value(root2).item());
    if base.to_bits() != base2.to_bits() {
        return Err(Error::Determinism(format!(
            "two baseline evaluations disagree: {base:e} vs {base2:e}"
        )));
    }
    drop(tape2);
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut entries = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let step = n.div_ceil(max_per_param.max(1)).max(1);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        for j in (0..n).step_by(step) {
            let orig = params[pi].tensor.data()[j];
            params[pi].tensor.data_mut()[j] = orig + eps;
            let plus = eval(params).map(|(t, _, r)| t.value(r).item());
            params[pi].tensor.data_mut()[j] = orig - eps;
            let minus = eval(params).map(|(t, _, r)| t.value(r).item());
            params[pi].tensor.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(analytic[pi][j], numeric));
            checked += 1;
        }
        entries.push(GradcheckEntry {
            name: params[pi].name.clone(),
            max_rel_error: max_rel,
            checked,
        });
    }
    for (p, g) in params.iter_mut().zip(analytic) {
        p.tensor.set_grad(Some(g))?;
    }
    Ok(GradcheckReport { entries, tol })
}
