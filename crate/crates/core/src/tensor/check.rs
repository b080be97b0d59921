//! Central finite-difference gradient checks.

use super::{Graph, Parameterized, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(graph: &Graph, v: Var) -> Result<f64> {
    let value = graph.value(v);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `eps`. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    let mut graph = Graph::new();
    let input = graph.constant(x.clone());
    let loss = f(&mut graph, input)?;
    scalar_of(&graph, loss)?;
    let analytic = graph.backward_all(loss)?.wrt(&graph, input);

    let eval = |shifted: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(shifted);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let errors = exec::try_map_range(x.len(), |i| {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        Ok::<_, Error>(relative_error(analytic.data()[i], numeric))
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Finite-difference check of `loss` over every coordinate of every
/// parameter of `model`.
pub fn grad_check_params<M, F>(model: &M, loss: F, eps: f64) -> Result<f64>
where
    M: Parameterized + Clone + Sync + Send,
    F: Fn(&M, &mut Graph) -> Result<Var> + Sync + Send,
{
    let mut graph = Graph::new();
    let out = loss(model, &mut graph)?;
    scalar_of(&graph, out)?;
    let params = model.params();
    let grads = graph.backward(out, &params)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |c| (p, c)))
        .collect();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, c)| grads.get(params[p].id).map_or(0.0, |g| g.data()[c]))
        .collect();

    let eval = |p: usize, c: usize, delta: f64| -> Result<f64> {
        let mut shifted = model.clone();
        shifted.params_mut()[p].value.data_mut()[c] += delta;
        let mut g = Graph::new();
        let out = loss(&shifted, &mut g)?;
        scalar_of(&g, out)
    };
    let errors = exec::try_map_range(coords.len(), |i| {
        let (p, c) = coords[i];
        let numeric = (eval(p, c, eps)? - eval(p, c, -eps)?) / (2.0 * eps);
        Ok::<_, Error>(relative_error(analytic[i], numeric))
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
