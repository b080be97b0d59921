//! Time-dependent vector fields `(z, t) -> dz/dt` over batches of states.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// A velocity field evaluated row-wise on `[batch, dim]` states.
///
/// `velocity` is the plain evaluation used by solvers; `record` builds the
/// same computation on a tape with one time value per row.
pub trait VectorField: Sync {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var>;
}

/// `h(z, t) = v` for a fixed row vector `v`.
#[derive(Clone, Debug)]
pub struct ConstantField {
    pub velocity: Vec<f64>,
}

impl VectorField for ConstantField {
    fn velocity(&self, z: &Tensor, _t: f64) -> Result<Tensor> {
        let n = z.rows();
        let rows = vec![self.velocity.clone(); n];
        Tensor::from_rows(&rows)
    }

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        let v = self.velocity(graph.value(z), t.first().copied().unwrap_or(0.0))?;
        Ok(graph.constant(v))
    }
}

/// `h(z, t) = z / max(t, floor)`.
///
/// Fits the linear-schedule target exactly on `t > 0` whenever the data
/// embedding has collapsed to the origin, while carrying no information
/// about the input. Used to exhibit that degenerate optimum.
#[derive(Clone, Copy, Debug)]
pub struct InverseTimeField {
    pub floor: f64,
}

impl Default for InverseTimeField {
    fn default() -> Self {
        Self { floor: 1e-12 }
    }
}

impl VectorField for InverseTimeField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        Ok(z.scale(1.0 / t.max(self.floor)))
    }

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        let factors: Vec<f64> = t.iter().map(|t| 1.0 / t.max(self.floor)).collect();
        graph.scale_rows(z, &factors)
    }
}

/// Adapts a closure into a field with no tape support; `record` evaluates
/// it and inserts the result as a constant.
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(&Tensor, f64) -> Result<Tensor> + Sync,
{
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        (self.0)(z, t)
    }

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        let zs = graph.value(z).clone();
        let mut rows = Vec::with_capacity(zs.rows());
        for (i, &ti) in t.iter().enumerate() {
            let row = Tensor::from_rows(&[zs.row(i)])?;
            rows.push((self.0)(&row, ti)?);
        }
        let v = Tensor::stack_rows(&rows)?;
        Ok(graph.constant(v))
    }
}
