//! Training losses and the time-sampling rule.
//!
//! Reduction everywhere is a sum over feature dimensions and a mean over
//! the batch. Per training step the random stream is consumed in a fixed
//! order: minibatch indices, then times, then label noise (always
//! `n · d` standard normals, scaled by `sigma`, so the stream does not
//! depend on `sigma`).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::interpolants::Schedule;
use crate::model::LatentFlowModel;
use crate::tensor::{Graph, Tensor, Var};

/// Draws training times: exactly 0 with probability `p_zero`, otherwise
/// uniform on `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSampler {
    p_zero: f64,
}

impl TimeSampler {
    pub fn new(p_zero: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_zero) {
            return Err(Error::InvalidArgument(format!("t_zero_prob {p_zero} not in [0, 1]")));
        }
        Ok(Self { p_zero })
    }

    pub fn p_zero(&self) -> f64 {
        self.p_zero
    }

    /// Two uniforms per entry: the first decides the point mass, the
    /// second is the time itself.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let coin: f64 = rng.random();
                let t: f64 = rng.random();
                if coin < self.p_zero {
                    0.0
                } else {
                    t
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow_loss: f64,
    pub label_ae_loss: f64,
    pub total: f64,
}

/// `n x d` isotropic Gaussian noise with standard deviation `sigma`.
pub fn sample_label_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("label_noise_std {sigma} is negative")));
    }
    let data = (0..n * d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new([n, d], data)
}

/// `mean_i ‖h(z_t^i, t_i) − v_t^i‖²` for embeddings already on the tape.
pub fn record_flow_loss(
    graph: &mut Graph,
    field: &dyn VectorField,
    schedule: Schedule,
    z0: Var,
    z1: Var,
    times: &[f64],
) -> Result<Var> {
    let (a, b) = (graph.value(z0).shape().to_vec(), graph.value(z1).shape().to_vec());
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "data embedding {a:?} and label embedding {b:?} differ"
        )));
    }
    let n = a.first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if times.len() != n {
        return Err(Error::DimensionMismatch(format!("{} times for a batch of {n}", times.len())));
    }
    let zt = schedule.record_interpolate(graph, z0, z1, times)?;
    let vt = schedule.record_velocity(graph, z0, z1, times)?;
    let pred = field.record(graph, zt, times)?;
    let sq = graph.sq_diff_sum(pred, vt)?;
    Ok(graph.scale(sq, 1.0 / n as f64))
}

/// `mean_i ‖d(z1^i + ε^i) − y^i‖²` for a label embedding already on the tape.
pub fn record_label_ae_loss(
    graph: &mut Graph,
    model: &LatentFlowModel,
    z1: Var,
    y: Var,
    noise: &Tensor,
) -> Result<Var> {
    let n = graph.value(y).rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let eps = graph.constant(noise.clone());
    let noisy = graph.add(z1, eps)?;
    let rec = model.label_decoder.record(graph, noisy, None)?;
    let sq = graph.sq_diff_sum(rec, y)?;
    Ok(graph.scale(sq, 1.0 / n as f64))
}

/// Flow loss of `model` on a batch, with the model's own dynamics.
pub fn flow_loss(graph: &mut Graph, model: &LatentFlowModel, x: &Tensor, y: &Tensor, times: &[f64]) -> Result<Var> {
    let xv = graph.constant(x.clone());
    let yv = graph.constant(y.clone());
    let z0 = model.data_encoder.record(graph, xv, None)?;
    let z1 = model.label_encoder.record(graph, yv, None)?;
    record_flow_loss(graph, &model.dynamics, model.schedule, z0, z1, times)
}

/// Label autoencoding loss with fixed noise.
pub fn label_ae_loss(graph: &mut Graph, model: &LatentFlowModel, y: &Tensor, noise: &Tensor) -> Result<Var> {
    let yv = graph.constant(y.clone());
    let z1 = model.label_encoder.record(graph, yv, None)?;
    record_label_ae_loss(graph, model, z1, yv, noise)
}

/// Recorded components of the total loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub flow: Var,
    pub label_ae: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, graph: &Graph) -> LossBreakdown {
        LossBreakdown {
            flow_loss: graph.value(self.flow).item(),
            label_ae_loss: graph.value(self.label_ae).item(),
            total: graph.value(self.total).item(),
        }
    }
}

/// Both losses on the same batch with given times and noise. The label
/// embedding is shared; only the decoder input is noisy.
pub fn record_total_loss(
    graph: &mut Graph,
    model: &LatentFlowModel,
    field: &dyn VectorField,
    x: &Tensor,
    y: &Tensor,
    times: &[f64],
    noise: &Tensor,
) -> Result<LossVars> {
    let xv = graph.constant(x.clone());
    let yv = graph.constant(y.clone());
    let z0 = model.data_encoder.record(graph, xv, None)?;
    let z1 = model.label_encoder.record(graph, yv, None)?;
    let flow = record_flow_loss(graph, field, model.schedule, z0, z1, times)?;
    let label_ae = record_label_ae_loss(graph, model, z1, yv, noise)?;
    let total = graph.add(flow, label_ae)?;
    Ok(LossVars { flow, label_ae, total })
}

/// Draws times then noise from `rng` and records the total loss.
pub fn total_loss<R: Rng + ?Sized>(
    graph: &mut Graph,
    model: &LatentFlowModel,
    x: &Tensor,
    y: &Tensor,
    sampler: &TimeSampler,
    sigma: f64,
    rng: &mut R,
) -> Result<(LossVars, LossBreakdown)> {
    let n = x.rows();
    let times = sampler.sample(rng, n);
    let noise = sample_label_noise(rng, n, model.latent_dim(), sigma)?;
    let vars = record_total_loss(graph, model, &model.dynamics, x, y, &times, &noise)?;
    Ok((vars, vars.breakdown(graph)))
}
