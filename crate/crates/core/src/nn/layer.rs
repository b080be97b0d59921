use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::tensor::{Graph, Param, ParamId, Parameterized, Tensor, Var};

/// Hands out fresh, increasing [`ParamId`]s.
#[derive(Debug, Default)]
pub struct ParamIds {
    next: usize,
}

impl ParamIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => x.map(f64::tanh),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Identity => x.clone(),
        }
    }

    fn record(self, graph: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => graph.tanh(x),
            Activation::Relu => graph.relu(x),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine map `x Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

impl LinearLayer {
    /// Uniform init in `±1/√fan_in` for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        ids: &mut ParamIds,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = draw(out_dim * in_dim);
        let b = draw(out_dim);
        Self::from_values(name, Tensor::new([out_dim, in_dim], w).unwrap(), Tensor::new([out_dim], b).unwrap(), ids)
            .expect("shapes are consistent by construction")
    }

    pub fn from_values(name: &str, weight: Tensor, bias: Tensor, ids: &mut ParamIds) -> Result<Self> {
        if !weight.is_matrix() || bias.shape() != [weight.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight: Param::new(ids.next_id(), format!("{name}.weight"), weight),
            bias: Param::new(ids.next_id(), format!("{name}.bias"), bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.weight.value)?.add_row(&self.bias.value)
    }

    pub fn record(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        let w = graph.param(&self.weight);
        let b = graph.param(&self.bias);
        let h = graph.matmul_t(x, w)?;
        graph.add_row(h, b)
    }
}

/// Multi-layer perceptron. Hidden layers use `activation`; the final layer
/// is affine. When `time_conditioned`, the time scalar is appended to the
/// input of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    activation: Activation,
    time_conditioned: bool,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`, at least two entries.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dims: &[usize],
        activation: Activation,
        time_conditioned: bool,
        ids: &mut ParamIds,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{name}: an MLP needs at least input and output dims, got {dims:?}"
            )));
        }
        let extra = usize::from(time_conditioned);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(&format!("{name}.{i}"), w[0] + extra, w[1], ids, rng))
            .collect();
        Ok(Self {
            layers,
            activation,
            time_conditioned,
        })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activation: Activation, time_conditioned: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        let extra = usize::from(time_conditioned);
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() + extra {
                return Err(Error::LayerInput {
                    layer: i + 1,
                    expected: pair[0].out_dim() + extra,
                    actual: pair[1].in_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            time_conditioned,
        })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.time_conditioned
    }

    /// Input width excluding the time slot.
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim() - usize::from(self.time_conditioned)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    /// Zeroes every weight and bias.
    pub fn zero_out(&mut self) {
        for p in self.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_time(&self, n: usize, t: Option<&[f64]>) -> Result<()> {
        match (self.time_conditioned, t) {
            (true, Some(t)) if t.len() == n => Ok(()),
            (true, Some(t)) => Err(Error::DimensionMismatch(format!(
                "{} time values for a batch of {n}",
                t.len()
            ))),
            (true, None) => Err(Error::InvalidArgument("time-conditioned MLP needs t".into())),
            (false, Some(_)) => Err(Error::InvalidArgument("MLP is not time-conditioned".into())),
            (false, None) => Ok(()),
        }
    }

    fn check_input(&self, layer: usize, actual: usize) -> Result<()> {
        let expected = self.layers[layer].in_dim();
        if expected != actual {
            return Err(Error::LayerInput {
                layer,
                expected,
                actual,
            });
        }
        Ok(())
    }

    /// Plain evaluation on `[batch, in_dim]`, with one time value per row
    /// when time-conditioned.
    pub fn forward(&self, x: &Tensor, t: Option<&[f64]>) -> Result<Tensor> {
        if !x.is_matrix() {
            return Err(Error::LayerInput {
                layer: 0,
                expected: self.in_dim(),
                actual: x.cols(),
            });
        }
        self.check_time(x.rows(), t)?;
        let t_col = t.map(Tensor::column);
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(tc) = &t_col {
                h = h.concat_cols(tc)?;
            }
            self.check_input(i, h.cols())?;
            h = layer.forward(&h)?;
            if i < last {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }

    /// Same computation as [`forward`](Self::forward), recorded on `graph`.
    pub fn record(&self, graph: &mut Graph, x: Var, t: Option<&[f64]>) -> Result<Var> {
        let (rows, cols, is_matrix) = {
            let v = graph.value(x);
            (v.rows(), v.cols(), v.is_matrix())
        };
        if !is_matrix {
            return Err(Error::LayerInput {
                layer: 0,
                expected: self.in_dim(),
                actual: cols,
            });
        }
        self.check_time(rows, t)?;
        let t_col = t.map(|t| graph.constant(Tensor::column(t)));
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(tc) = t_col {
                h = graph.concat(h, tc)?;
            }
            self.check_input(i, graph.value(h).cols())?;
            h = layer.record(graph, h)?;
            if i < last {
                h = self.activation.record(graph, h);
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl VectorField for Mlp {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        if self.time_conditioned {
            self.forward(z, Some(&vec![t; z.rows()]))
        } else {
            self.forward(z, None)
        }
    }

    fn record(&self, graph: &mut Graph, z: Var, t: &[f64]) -> Result<Var> {
        if self.time_conditioned {
            Mlp::record(self, graph, z, Some(t))
        } else {
            Mlp::record(self, graph, z, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_layer_gives_zero() {
        let mut ids = ParamIds::new();
        let mut mlp = Mlp::new("m", &[3, 2], Activation::Relu, false, &mut ids, &mut rng()).unwrap();
        mlp.zero_out();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap();
        assert_eq!(mlp.forward(&x, None).unwrap(), Tensor::zeros([2, 2]));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut ids = ParamIds::new();
        let layer = LinearLayer::from_values("id", Tensor::identity(3), Tensor::zeros([3]), &mut ids).unwrap();
        let mlp = Mlp::from_layers(vec![layer], Activation::Identity, false).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, -0.3]]).unwrap();
        assert_eq!(mlp.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn time_slot_is_read() {
        // in = 2 state dims + 1 time slot; output 0 copies t, output 1 ignores it.
        let mut ids = ParamIds::new();
        let w = Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]).unwrap();
        let layer = LinearLayer::from_values("h", w, Tensor::zeros([2]), &mut ids).unwrap();
        let mlp = Mlp::from_layers(vec![layer], Activation::Tanh, true).unwrap();
        let z = Tensor::from_rows(&[[5.0, -7.0]]).unwrap();
        let out = mlp.forward(&z, Some(&[0.25])).unwrap();
        assert_eq!(out.data(), &[0.25, 0.0]);
    }

    #[test]
    fn time_required_iff_conditioned() {
        let mut ids = ParamIds::new();
        let m = Mlp::new("m", &[2, 2], Activation::Tanh, true, &mut ids, &mut rng()).unwrap();
        let x = Tensor::zeros([1, 2]);
        assert!(m.forward(&x, None).is_err());
        let p = Mlp::new("p", &[2, 2], Activation::Tanh, false, &mut ids, &mut rng()).unwrap();
        assert!(p.forward(&x, Some(&[0.0])).is_err());
    }

    #[test]
    fn wrong_width_names_layer() {
        let mut ids = ParamIds::new();
        let m = Mlp::new("m", &[3, 4, 1], Activation::Tanh, false, &mut ids, &mut rng()).unwrap();
        match m.forward(&Tensor::zeros([2, 5]), None) {
            Err(Error::LayerInput { layer, expected, actual }) => {
                assert_eq!((layer, expected, actual), (0, 3, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn param_count_formula() {
        let mut ids = ParamIds::new();
        let dims = [3, 16, 8, 2];
        let m = Mlp::new("m", &dims, Activation::Tanh, false, &mut ids, &mut rng()).unwrap();
        let expected: usize = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        assert_eq!(m.num_params(), expected);
        let tc = Mlp::new("t", &dims, Activation::Tanh, true, &mut ids, &mut rng()).unwrap();
        let expected: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1) + w[1]).sum();
        assert_eq!(tc.num_params(), expected);
    }

    #[test]
    fn record_matches_forward_bitwise() {
        let mut ids = ParamIds::new();
        let m = Mlp::new("m", &[2, 8, 8, 2], Activation::Tanh, true, &mut ids, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.1], [1.5, 2.0]]).unwrap();
        let t = [0.2, 0.9];
        let plain = m.forward(&x, Some(&t)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = Mlp::record(&m, &mut g, xv, Some(&t)).unwrap();
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn unique_param_ids() {
        let mut ids = ParamIds::new();
        let m = Mlp::new("m", &[2, 3, 2], Activation::Tanh, false, &mut ids, &mut rng()).unwrap();
        let mut seen: Vec<_> = m.params().iter().map(|p| p.id).collect();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }
}
