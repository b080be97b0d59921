//! The latent flow-matching model, its training loops and the baselines.

mod baselines;
mod latent;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use crate::data::TaskKind;
pub use baselines::{DirectFlowModel, NodeArchitecture, NodeModel};
pub use latent::{Architecture, LatentFlowModel, ModelSpec};
pub use train::{direct_fm_train, node_baseline_train, train, LrSchedule, StepRecord, TrainConfig, TrainLog};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::interpolants::Schedule;
use crate::solvers::SolverSpec;
use crate::tensor::{Graph, Tensor, Var};

/// Output of a batched forward solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Decoder output (standardized units for normalized regression data).
    pub y: Tensor,
    /// Terminal latent state before decoding.
    pub latent: Tensor,
    /// Argmax class per row, for classification.
    pub classes: Option<Vec<usize>>,
    /// Dynamics evaluations spent on each row.
    pub nfe: Vec<usize>,
}

impl Prediction {
    pub fn new(y: Tensor, latent: Tensor, nfe: Vec<usize>, task: TaskKind) -> Self {
        let classes = task.is_classification().then(|| y.argmax_rows());
        Self { y, latent, classes, nfe }
    }

    pub fn nfe_mean(&self) -> f64 {
        if self.nfe.is_empty() {
            return 0.0;
        }
        self.nfe.iter().sum::<usize>() as f64 / self.nfe.len() as f64
    }
}

/// Anything that maps inputs to labels by integrating an ODE.
pub trait Predictor: Sync {
    fn task(&self) -> TaskKind;

    fn predict(&self, x: &Tensor, spec: SolverSpec) -> Result<Prediction>;
}

/// A predictor trained by regressing its field onto interpolant
/// velocities between per-sample endpoints.
pub trait FlowMatched: Predictor {
    fn schedule(&self) -> Schedule;

    fn field(&self) -> &dyn VectorField;

    /// The two endpoint states `(z0, z1)` of each pair.
    fn endpoints(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Accuracy,
}

impl MetricKind {
    pub fn for_task(task: TaskKind) -> Self {
        if task.is_classification() {
            MetricKind::Accuracy
        } else {
            MetricKind::Rmse
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn improves(self, a: f64, b: f64) -> bool {
        match self {
            MetricKind::Rmse => a < b,
            MetricKind::Accuracy => a > b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric_kind: MetricKind,
    /// RMSE in original target units, or accuracy.
    pub metric: f64,
    /// Mean over all output elements of the squared error, original units.
    pub mse: f64,
    pub nfe_mean: f64,
}

/// Scores `prediction` against `ds`.
pub fn score(ds: &PairedDataset, prediction: &Prediction) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if prediction.y.shape() != ds.y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs targets {:?}",
            prediction.y.shape(),
            ds.y.shape()
        )));
    }
    let (y_hat, y) = match &ds.normalization {
        Some(n) => (n.invert_y(&prediction.y)?, n.invert_y(&ds.y)?),
        None => (prediction.y.clone(), ds.y.clone()),
    };
    let mse = y_hat.sq_diff_sum(&y)? / y.len() as f64;
    let kind = MetricKind::for_task(ds.task);
    let metric = match (&prediction.classes, ds.classes()) {
        (Some(p), Some(t)) => p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / t.len() as f64,
        _ => mse.sqrt(),
    };
    Ok(Evaluation {
        metric_kind: kind,
        metric,
        mse,
        nfe_mean: prediction.nfe_mean(),
    })
}

/// Predicts on `ds.x` with `spec` and scores the result.
pub fn evaluate(model: &dyn Predictor, ds: &PairedDataset, spec: SolverSpec) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    score(ds, &model.predict(&ds.x, spec)?)
}

/// Wraps a field and counts batched evaluations (plain and recorded).
pub struct CountingField<'a> {
    inner: &'a dyn VectorField,
    calls: AtomicUsize,
}

impl<'a> CountingField<'a> {
    pub fn new(inner: &'a dyn VectorField) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl VectorField for CountingField<'_> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(z, t)
    }

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.record(graph, z, t)
    }
}
