use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::interpolants::Schedule;
use crate::nn::{Activation, Mlp, ParamIds};
use crate::solvers::{solve_rows, solve_with_grad, SolverSpec};
use crate::tensor::{Graph, Param, Parameterized, Tensor, Var};

use super::{FlowMatched, Prediction, Predictor};

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

fn check_width(t: &Tensor, width: usize) -> Result<()> {
    if !t.is_matrix() || t.cols() != width {
        return Err(Error::DimensionMismatch(format!(
            "input has shape {:?}, model expects {width} columns",
            t.shape()
        )));
    }
    Ok(())
}

/// `[rows, cols]` matrix picking the first `cols` coordinates.
fn leading_selector(rows: usize, cols: usize) -> Tensor {
    let mut s = Tensor::zeros([rows, cols]);
    for j in 0..cols.min(rows) {
        s.row_mut(j)[j] = 1.0;
    }
    s
}

/// Flow matching directly between zero-padded inputs and labels, with no
/// encoders. Crossing chords in data space are inherited as-is.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectFlowModel {
    d_x: usize,
    d_y: usize,
    width: usize,
    task: TaskKind,
    pub schedule: Schedule,
    pub dynamics: Mlp,
}

impl DirectFlowModel {
    pub fn new(
        d_x: usize,
        d_y: usize,
        task: TaskKind,
        schedule: Schedule,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if d_x == 0 || d_y == 0 {
            return Err(Error::InvalidArgument(format!("zero-width data ({d_x}, {d_y})")));
        }
        let width = d_x.max(d_y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dynamics = Mlp::new("h", &dims(width, hidden, width), activation, true, &mut ParamIds::new(), &mut rng)?;
        Ok(Self {
            d_x,
            d_y,
            width,
            task,
            schedule,
            dynamics,
        })
    }

    /// Common width of the padded state.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pad_input(&self, x: &Tensor) -> Result<Tensor> {
        check_width(x, self.d_x)?;
        Ok(x.resize_cols(self.width))
    }

    pub fn pad_label(&self, y: &Tensor) -> Result<Tensor> {
        check_width(y, self.d_y)?;
        Ok(y.resize_cols(self.width))
    }
}

impl Predictor for DirectFlowModel {
    fn task(&self) -> TaskKind {
        self.task
    }

    fn predict(&self, x: &Tensor, spec: SolverSpec) -> Result<Prediction> {
        let (z1, nfe) = solve_rows(&self.dynamics, &self.pad_input(x)?, 0.0, 1.0, spec)?;
        Ok(Prediction::new(z1.resize_cols(self.d_y), z1, nfe, self.task))
    }
}

impl FlowMatched for DirectFlowModel {
    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn field(&self) -> &dyn VectorField {
        &self.dynamics
    }

    fn endpoints(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.pad_input(x)?, self.pad_label(y)?))
    }
}

impl Parameterized for DirectFlowModel {
    fn params(&self) -> Vec<&Param> {
        self.dynamics.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.dynamics.params_mut()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeArchitecture {
    /// Defaults to `2 · max(d_x, d_y) + 2` with an encoder, else `max(d_x, d_y)`.
    pub state_dim: Option<usize>,
    /// Without an encoder the input is zero-padded to the state width.
    pub encoder: bool,
    pub encoder_hidden: Vec<usize>,
    pub encoder_activation: Activation,
    /// Without a decoder the leading `d_y` state coordinates are the output.
    pub decoder: bool,
    pub dynamics_hidden: Vec<usize>,
    pub dynamics_activation: Activation,
    /// Fixed-step solver that is unrolled for training.
    pub train_solver: SolverSpec,
}

impl Default for NodeArchitecture {
    fn default() -> Self {
        Self {
            state_dim: None,
            encoder: true,
            encoder_hidden: vec![64],
            encoder_activation: Activation::Relu,
            decoder: true,
            dynamics_hidden: vec![64, 64],
            dynamics_activation: Activation::Tanh,
            train_solver: SolverSpec::Euler { steps: 8 },
        }
    }
}

/// Supervised neural ODE trained by backpropagating through an unrolled
/// fixed-step solve.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel {
    d_x: usize,
    d_y: usize,
    state_dim: usize,
    task: TaskKind,
    pub encoder: Option<Mlp>,
    pub dynamics: Mlp,
    pub decoder: Option<Mlp>,
    pub train_solver: SolverSpec,
}

impl NodeModel {
    pub fn new(d_x: usize, d_y: usize, task: TaskKind, arch: &NodeArchitecture, seed: u64) -> Result<Self> {
        if d_x == 0 || d_y == 0 {
            return Err(Error::InvalidArgument(format!("zero-width data ({d_x}, {d_y})")));
        }
        if !arch.train_solver.is_fixed_step() {
            return Err(Error::AdaptiveNotDifferentiable);
        }
        let state = arch.state_dim.unwrap_or(if arch.encoder {
            2 * d_x.max(d_y) + 2
        } else {
            d_x.max(d_y)
        });
        if (!arch.encoder && state < d_x) || (!arch.decoder && state < d_y) {
            return Err(Error::InvalidArgument(format!(
                "state width {state} cannot hold data ({d_x}, {d_y}) without encoder/decoder"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = ParamIds::new();
        let encoder = arch
            .encoder
            .then(|| {
                Mlp::new(
                    "f",
                    &dims(d_x, &arch.encoder_hidden, state),
                    arch.encoder_activation,
                    false,
                    &mut ids,
                    &mut rng,
                )
            })
            .transpose()?;
        let dynamics = Mlp::new(
            "h",
            &dims(state, &arch.dynamics_hidden, state),
            arch.dynamics_activation,
            true,
            &mut ids,
            &mut rng,
        )?;
        let decoder = arch
            .decoder
            .then(|| Mlp::new("d", &[state, d_y], Activation::Identity, false, &mut ids, &mut rng))
            .transpose()?;
        Ok(Self {
            d_x,
            d_y,
            state_dim: state,
            task,
            encoder,
            dynamics,
            decoder,
            train_solver: arch.train_solver.validated()?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn initial_state(&self, x: &Tensor) -> Result<Tensor> {
        check_width(x, self.d_x)?;
        match &self.encoder {
            Some(f) => f.forward(x, None),
            None => Ok(x.resize_cols(self.state_dim)),
        }
    }

    fn readout(&self, z: &Tensor) -> Result<Tensor> {
        match &self.decoder {
            Some(d) => d.forward(z, None),
            None => Ok(z.resize_cols(self.d_y)),
        }
    }

    /// Records encode, unrolled solve and decode on `graph`. Returns the
    /// output and the number of field evaluations.
    pub fn record_forward(&self, graph: &mut Graph, field: &dyn VectorField, x: &Tensor) -> Result<(Var, usize)> {
        check_width(x, self.d_x)?;
        let z0 = match &self.encoder {
            Some(f) => {
                let xv = graph.constant(x.clone());
                f.record(graph, xv, None)?
            }
            None => graph.constant(x.resize_cols(self.state_dim)),
        };
        let (z1, nfe) = solve_with_grad(graph, field, z0, 0.0, 1.0, self.train_solver)?;
        let out = match &self.decoder {
            Some(d) => d.record(graph, z1, None)?,
            None => {
                let sel = graph.constant(leading_selector(self.state_dim, self.d_y));
                graph.matmul(z1, sel)?
            }
        };
        Ok((out, nfe))
    }
}

impl Predictor for NodeModel {
    fn task(&self) -> TaskKind {
        self.task
    }

    fn predict(&self, x: &Tensor, spec: SolverSpec) -> Result<Prediction> {
        let z0 = self.initial_state(x)?;
        let (z1, nfe) = solve_rows(&self.dynamics, &z0, 0.0, 1.0, spec)?;
        Ok(Prediction::new(self.readout(&z1)?, z1, nfe, self.task))
    }
}

impl Parameterized for NodeModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(f) = &self.encoder {
            out.extend(f.params());
        }
        out.extend(self.dynamics.params());
        if let Some(d) = &self.decoder {
            out.extend(d.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(f) = &mut self.encoder {
            out.extend(f.params_mut());
        }
        out.extend(self.dynamics.params_mut());
        if let Some(d) = &mut self.decoder {
            out.extend(d.params_mut());
        }
        out
    }
}
