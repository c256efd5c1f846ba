//! Central-difference gradient checking against [`Graph::backward`].

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Location of the worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub worst: Option<Offender>,
}

/// Relative error `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
    }
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok((g, vars, loss))
}

/// Gradients of `f` at `params` from the reverse sweep.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = evaluate(f, params)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Compares `analytic` against central differences of `f` with step `h`.
pub fn compare_gradients<F>(f: &F, params: &[Tensor], analytic: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(
            "one analytic gradient per parameter is required".into(),
        ));
    }
    let scalar = |ps: &[Tensor]| -> Result<f64> {
        let (g, _, loss) = evaluate(f, ps)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(Error::shape("grad_check", analytic[p].shape(), params[p].shape()));
        }
        for c in 0..params[p].numel() {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + h;
            let plus = scalar(&work)?;
            work[p].data_mut()[c] = orig - h;
            let minus = scalar(&work)?;
            work[p].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[c];
            let err = relative_error(a, numeric);
            checked += 1;
            if worst.is_none() || err > max_rel_err {
                max_rel_err = err;
                worst = Some(Offender {
                    param: p,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
        checked,
        worst,
    })
}

/// Builds `f` on a fresh graph, differentiates it, and checks every
/// parameter coordinate against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, h, tol)
}
