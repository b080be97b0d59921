use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::interpolants::Schedule;
use crate::nn::{Activation, Mlp, ParamIds};
use crate::solvers::{solve_rows, SolverSpec};
use crate::tensor::{Graph, Param, Parameterized, Tensor, Var};

use super::{FlowMatched, Prediction, Predictor};

/// Layer widths and activations of the four networks. Hidden lists exclude
/// the input and output widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Defaults to `2 · max(d_x, d_y) + 2`.
    pub latent_dim: Option<usize>,
    pub encoder_hidden: Vec<usize>,
    pub encoder_activation: Activation,
    /// Shared by the label encoder and decoder.
    pub label_hidden: Vec<usize>,
    pub label_activation: Activation,
    pub dynamics_hidden: Vec<usize>,
    pub dynamics_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: None,
            encoder_hidden: vec![64],
            encoder_activation: Activation::Relu,
            label_hidden: Vec::new(),
            label_activation: Activation::Relu,
            dynamics_hidden: vec![64; 6],
            dynamics_activation: Activation::Tanh,
        }
    }
}

impl Architecture {
    pub fn resolve_latent(&self, d_x: usize, d_y: usize) -> usize {
        self.latent_dim.unwrap_or(2 * d_x.max(d_y) + 2)
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

/// Everything needed to rebuild an untrained model of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_x: usize,
    pub d_y: usize,
    pub latent_dim: usize,
    pub task: TaskKind,
    pub schedule: Schedule,
    pub architecture: Architecture,
}

/// Data encoder `f`, label encoder `g`, label decoder `d` and
/// time-conditioned dynamics `h`, all meeting in a latent space of width
/// `latent_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFlowModel {
    spec: ModelSpec,
    pub schedule: Schedule,
    pub data_encoder: Mlp,
    pub label_encoder: Mlp,
    pub label_decoder: Mlp,
    pub dynamics: Mlp,
}

impl LatentFlowModel {
    pub fn new(
        d_x: usize,
        d_y: usize,
        task: TaskKind,
        schedule: Schedule,
        arch: &Architecture,
        seed: u64,
    ) -> Result<Self> {
        if d_x == 0 || d_y == 0 {
            return Err(Error::InvalidArgument(format!("zero-width data ({d_x}, {d_y})")));
        }
        let latent = arch.resolve_latent(d_x, d_y);
        if latent == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if latent <= d_x.max(d_y) {
            log::warn!("latent_dim {latent} does not exceed data widths ({d_x}, {d_y})");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = ParamIds::new();
        let data_encoder = Mlp::new(
            "f",
            &dims(d_x, &arch.encoder_hidden, latent),
            arch.encoder_activation,
            false,
            &mut ids,
            &mut rng,
        )?;
        let label_encoder = Mlp::new(
            "g",
            &dims(d_y, &arch.label_hidden, latent),
            arch.label_activation,
            false,
            &mut ids,
            &mut rng,
        )?;
        let label_decoder = Mlp::new(
            "d",
            &dims(latent, &arch.label_hidden, d_y),
            arch.label_activation,
            false,
            &mut ids,
            &mut rng,
        )?;
        let dynamics = Mlp::new(
            "h",
            &dims(latent, &arch.dynamics_hidden, latent),
            arch.dynamics_activation,
            true,
            &mut ids,
            &mut rng,
        )?;
        Ok(Self {
            spec: ModelSpec {
                d_x,
                d_y,
                latent_dim: latent,
                task,
                schedule,
                architecture: Architecture {
                    latent_dim: Some(latent),
                    ..arch.clone()
                },
            },
            schedule,
            data_encoder,
            label_encoder,
            label_decoder,
            dynamics,
        })
    }

    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut arch = spec.architecture.clone();
        arch.latent_dim = Some(spec.latent_dim);
        Self::new(spec.d_x, spec.d_y, spec.task, spec.schedule, &arch, seed)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            schedule: self.schedule,
            ..self.spec.clone()
        }
    }

    pub fn d_x(&self) -> usize {
        self.spec.d_x
    }

    pub fn d_y(&self) -> usize {
        self.spec.d_y
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn check_width(&self, what: &str, t: &Tensor, width: usize) -> Result<()> {
        if !t.is_matrix() || t.cols() != width {
            return Err(Error::DimensionMismatch(format!(
                "{what} has shape {:?}, model expects {width} columns",
                t.shape()
            )));
        }
        Ok(())
    }

    pub fn encode_data(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width("input", x, self.d_x())?;
        self.data_encoder.forward(x, None)
    }

    pub fn encode_label(&self, y: &Tensor) -> Result<Tensor> {
        self.check_width("label", y, self.d_y())?;
        self.label_encoder.forward(y, None)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.label_decoder.forward(z, None)
    }

    /// Encodes, integrates `field` from 0 to 1 and decodes.
    pub fn predict_with_field(&self, field: &dyn VectorField, x: &Tensor, spec: SolverSpec) -> Result<Prediction> {
        let z0 = self.encode_data(x)?;
        let (z1, nfe) = solve_rows(field, &z0, 0.0, 1.0, spec)?;
        let y = self.decode(&z1)?;
        Ok(Prediction::new(y, z1, nfe, self.spec.task))
    }

    pub fn record_encode_data(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        self.data_encoder.record(graph, x, None)
    }
}

impl Predictor for LatentFlowModel {
    fn task(&self) -> TaskKind {
        self.spec.task
    }

    fn predict(&self, x: &Tensor, spec: SolverSpec) -> Result<Prediction> {
        self.predict_with_field(&self.dynamics, x, spec)
    }
}

impl FlowMatched for LatentFlowModel {
    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn field(&self) -> &dyn VectorField {
        &self.dynamics
    }

    fn endpoints(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.encode_data(x)?, self.encode_label(y)?))
    }
}

impl Parameterized for LatentFlowModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.data_encoder.params();
        out.extend(self.label_encoder.params());
        out.extend(self.label_decoder.params());
        out.extend(self.dynamics.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.data_encoder.params_mut();
        out.extend(self.label_encoder.params_mut());
        out.extend(self.label_decoder.params_mut());
        out.extend(self.dynamics.params_mut());
        out
    }
}
