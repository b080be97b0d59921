use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Adam, Checkpoint};
use crate::objectives::{record_flow_loss, record_total_loss, sample_label_noise, TimeSampler};
use crate::solvers::SolverSpec;
use crate::tensor::{Graph, Parameterized, Tensor, Var};

use super::{evaluate, CountingField, DirectFlowModel, LatentFlowModel, MetricKind, NodeModel, Predictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub t_zero_prob: f64,
    pub label_noise_std: f64,
    /// Solver used for validation metrics.
    pub eval_solver: SolverSpec,
    pub seed: u64,
    /// Steps between validation rounds; 0 disables validation.
    pub eval_interval: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 1024,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            t_zero_prob: 0.1,
            label_noise_std: 0.0,
            eval_solver: SolverSpec::Euler { steps: 1 },
            seed: 0,
            eval_interval: 1000,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.t_zero_prob) {
            return bad(format!("t_zero_prob {} not in [0, 1]", self.t_zero_prob));
        }
        if !(self.label_noise_std >= 0.0 && self.label_noise_std.is_finite()) {
            return bad(format!("label_noise_std must be >= 0, got {}", self.label_noise_std));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        self.eval_solver.validated()?;
        Ok(())
    }

    fn lr_at(&self, step: usize) -> Result<f64> {
        match self.lr_schedule {
            LrSchedule::Cosine => cosine_lr(step, self.iterations, self.lr),
            LrSchedule::Constant => Ok(self.lr),
        }
    }
}

/// One optimizer step. Loss fields that a loop does not have are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub flow_loss: Option<f64>,
    pub ae_loss: Option<f64>,
    /// Supervised loss of the unrolled baseline.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fit_loss: Option<f64>,
    pub val_metric: Option<f64>,
    /// Dynamics evaluations per sample spent on this step.
    pub nfe: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub stopped_early: bool,
    /// `(step, metric)` of the best validation round.
    pub best: Option<(usize, f64)>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn flow_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.flow_loss).collect()
    }
}

struct StepLoss {
    total: Var,
    flow: Option<f64>,
    ae: Option<f64>,
    fit: Option<f64>,
    nfe: usize,
}

fn minibatch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        index::sample(rng, n, batch).into_vec()
    }
}

/// Shared optimizer loop: minibatch, loss, Adam, periodic validation with
/// early stopping. Regression runs restore the best validated parameters;
/// classification keeps the last ones.
fn run<M, F>(model: &mut M, train: &PairedDataset, val: Option<&PairedDataset>, cfg: &TrainConfig, mut loss: F) -> Result<TrainLog>
where
    M: Parameterized + Predictor,
    F: FnMut(&M, &mut Graph, &Tensor, &Tensor, &mut ChaCha8Rng) -> Result<StepLoss>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::default();
    let kind = MetricKind::for_task(train.task);
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut stale = 0;

    for step in 0..cfg.iterations {
        let idx = minibatch(&mut rng, train.len(), cfg.batch_size);
        let xb = train.x.select_rows(&idx);
        let yb = train.y.select_rows(&idx);
        let mut graph = Graph::new();
        let out = loss(model, &mut graph, &xb, &yb, &mut rng)?;
        let total = graph.value(out.total).item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                flow_loss: out.flow.or(out.fit).unwrap_or(f64::NAN),
                ae_loss: out.ae.unwrap_or(f64::NAN),
            });
        }
        let grads = graph.backward(out.total, &model.params())?;
        drop(graph);
        let lr = cfg.lr_at(step)?;
        adam.step(&mut model.params_mut(), &grads, lr)?;

        let mut val_metric = None;
        if let Some(v) = val {
            if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
                let m = evaluate(model, v, cfg.eval_solver)?.metric;
                val_metric = Some(m);
                if best.as_ref().is_none_or(|b| kind.improves(m, b.1)) {
                    best = Some((step, m, Checkpoint::capture(model)));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        log.records.push(StepRecord {
            step,
            lr,
            flow_loss: out.flow,
            ae_loss: out.ae,
            fit_loss: out.fit,
            val_metric,
            nfe: out.nfe,
        });
        if stale >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }

    if let Some((step, metric, ckpt)) = best {
        log.best = Some((step, metric));
        if !train.task.is_classification() {
            ckpt.restore(model)?;
        }
    }
    Ok(log)
}

fn check_dims(ds: &PairedDataset, d_x: usize, d_y: usize) -> Result<()> {
    if ds.d_x() != d_x || ds.d_y() != d_y {
        return Err(Error::DimensionMismatch(format!(
            "dataset has (d_x, d_y) = ({}, {}), model expects ({d_x}, {d_y})",
            ds.d_x(),
            ds.d_y()
        )));
    }
    Ok(())
}

/// Simulation-free training of the latent model on flow plus label
/// autoencoding loss. Each step evaluates the dynamics once per sample.
pub fn train(
    model: &mut LatentFlowModel,
    train_set: &PairedDataset,
    val: Option<&PairedDataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_dims(train_set, model.d_x(), model.d_y())?;
    if let Some(v) = val {
        check_dims(v, model.d_x(), model.d_y())?;
    }
    let sampler = TimeSampler::new(cfg.t_zero_prob)?;
    let sigma = cfg.label_noise_std;
    run(model, train_set, val, cfg, |m, graph, x, y, rng| {
        let n = x.rows();
        let times = sampler.sample(rng, n);
        let noise = sample_label_noise(rng, n, m.latent_dim(), sigma)?;
        let field = CountingField::new(&m.dynamics);
        let vars = record_total_loss(graph, m, &field, x, y, &times, &noise)?;
        let b = vars.breakdown(graph);
        Ok(StepLoss {
            total: vars.total,
            flow: Some(b.flow_loss),
            ae: Some(b.label_ae_loss),
            fit: None,
            nfe: field.calls(),
        })
    })
}

/// Flow matching between fixed zero-padded endpoints in data space.
pub fn direct_fm_train(
    model: &mut DirectFlowModel,
    train_set: &PairedDataset,
    val: Option<&PairedDataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let sampler = TimeSampler::new(cfg.t_zero_prob)?;
    run(model, train_set, val, cfg, |m, graph, x, y, rng| {
        let times = sampler.sample(rng, x.rows());
        let z0 = graph.constant(m.pad_input(x)?);
        let z1 = graph.constant(m.pad_label(y)?);
        let field = CountingField::new(&m.dynamics);
        let flow = record_flow_loss(graph, &field, m.schedule, z0, z1, &times)?;
        Ok(StepLoss {
            total: flow,
            flow: Some(graph.value(flow).item()),
            ae: None,
            fit: None,
            nfe: field.calls(),
        })
    })
}

/// Supervised training through the unrolled training solver of `model`.
/// Loss is the batch mean of the squared output error.
pub fn node_baseline_train(
    model: &mut NodeModel,
    train_set: &PairedDataset,
    val: Option<&PairedDataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    run(model, train_set, val, cfg, |m, graph, x, y, _rng| {
        let field = CountingField::new(&m.dynamics);
        let (out, _) = m.record_forward(graph, &field, x)?;
        let target = graph.constant(y.clone());
        let sq = graph.sq_diff_sum(out, target)?;
        let fit = graph.scale(sq, 1.0 / x.rows() as f64);
        Ok(StepLoss {
            total: fit,
            flow: None,
            ae: None,
            fit: Some(graph.value(fit).item()),
            nfe: field.calls(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, synth_regression, toy_crossing, TaskKind};
    use crate::interpolants::Schedule;
    use crate::model::{Architecture, NodeArchitecture};
    use crate::nn::Activation;

    fn small_arch() -> Architecture {
        Architecture {
            encoder_hidden: vec![16],
            dynamics_hidden: vec![16, 16],
            ..Architecture::default()
        }
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let ds = toy_crossing();
        let mut m = LatentFlowModel::new(2, 2, ds.task, Schedule::Linear, &small_arch(), 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &ds, None, &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn one_evaluation_per_step_and_flow_decreases() {
        let ds = synth_regression(64, 3, 0).unwrap().standardized().unwrap();
        let mut m = LatentFlowModel::new(3, 1, ds.task, Schedule::Linear, &small_arch(), 1).unwrap();
        let cfg = TrainConfig {
            iterations: 600,
            batch_size: 32,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &ds, None, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.nfe == 1));
        let mut flow = log.flow_losses();
        let median = |v: &mut [f64]| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let last = median(&mut flow[500..].to_vec());
        let first = median(&mut flow[..100]);
        assert!(last < first, "{last} >= {first}");
    }

    #[test]
    fn early_stopping_and_restore() {
        let ds = synth_regression(40, 2, 3).unwrap();
        let (tr, va) = crate::data::split(&ds, 0.6, 0).unwrap();
        let mut m = LatentFlowModel::new(2, 1, tr.task, Schedule::Linear, &small_arch(), 2).unwrap();
        let cfg = TrainConfig {
            iterations: 400,
            batch_size: 8,
            lr: 5e-2,
            eval_interval: 10,
            patience: 2,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &tr, Some(&va), &cfg).unwrap();
        let (_, best) = log.best.unwrap();
        let now = evaluate(&m, &va, cfg.eval_solver).unwrap().metric;
        assert_eq!(now, best);
        if log.stopped_early {
            assert!(log.records.len() < 400);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_crossing();
        let cfg = TrainConfig {
            iterations: 50,
            label_noise_std: 0.5,
            ..TrainConfig::default()
        };
        let go = || {
            let mut m = LatentFlowModel::new(2, 2, ds.task, Schedule::Linear, &small_arch(), 4).unwrap();
            let log = train(&mut m, &ds, None, &cfg).unwrap();
            (m, log)
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn node_one_step_separates_blobs() {
        let ds = synth_blobs(64, 2, 6.0, 1).unwrap();
        let arch = NodeArchitecture {
            encoder: false,
            decoder: true,
            state_dim: Some(2),
            dynamics_hidden: vec![16],
            train_solver: SolverSpec::Euler { steps: 1 },
            ..NodeArchitecture::default()
        };
        let mut m = NodeModel::new(2, 2, TaskKind::Classification { num_classes: 2 }, &arch, 0).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            batch_size: 64,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let log = node_baseline_train(&mut m, &ds, None, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.nfe == 1));
        let acc = evaluate(&m, &ds, SolverSpec::Euler { steps: 1 }).unwrap().metric;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn direct_fm_fits_parallel_translations() {
        let ds = crate::data::toy_parallel();
        let mut m = DirectFlowModel::new(2, 2, ds.task, Schedule::Linear, &[32, 32], Activation::Tanh, 0).unwrap();
        let cfg = TrainConfig {
            iterations: 2000,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        direct_fm_train(&mut m, &ds, None, &cfg).unwrap();
        let mse = evaluate(&m, &ds, SolverSpec::reference()).unwrap().mse;
        assert!(mse < 1e-2, "{mse}");
    }

    #[test]
    fn diverging_run_reports_step() {
        let ds = toy_crossing();
        let mut m = LatentFlowModel::new(2, 2, ds.task, Schedule::Linear, &small_arch(), 0).unwrap();
        m.dynamics.params_mut()[0].value.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            iterations: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &ds, None, &cfg), Err(Error::Diverged { step: 0, .. })));
    }
}
