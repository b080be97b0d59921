use latentflow::data::{synth_blobs, synth_regression, toy_crossing};
use latentflow::diagnostics::{disagreement, knn_report, nfe_sweep};
use latentflow::interpolants::Schedule;
use latentflow::model::{train, Architecture, LatentFlowModel, TrainConfig};
use latentflow::nn::{cosine_lr, Activation, Adam, Mlp, ParamIds};
use latentflow::solvers::SolverSpec;
use latentflow::tensor::{Graph, Parameterized, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full-batch Adam on mean squared error; returns the final MSE.
fn fit(mlp: &mut Mlp, x: &Tensor, y: &Tensor, steps: usize, lr: f64) -> f64 {
    let mut adam = Adam::default();
    let n = x.rows() as f64;
    for step in 0..steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = mlp.record(&mut g, xv, None).unwrap();
        let sq = g.sq_diff_sum(out, yv).unwrap();
        let loss = g.scale(sq, 1.0 / n);
        let grads = g.backward(loss, &mlp.params()).unwrap();
        adam.step(&mut mlp.params_mut(), &grads, cosine_lr(step, steps, lr).unwrap()).unwrap();
    }
    mlp.forward(x, None).unwrap().sq_diff_sum(y).unwrap() / y.len() as f64
}

#[test]
fn mlp_fits_sine() {
    let xs: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let x = Tensor::column(&xs);
    let y = x.map(f64::sin);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mlp = Mlp::new("sin", &[1, 32, 1], Activation::Tanh, false, &mut ParamIds::new(), &mut rng).unwrap();
    let mse = fit(&mut mlp, &x, &y, 5000, 1e-2);
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn synthetic_targets_are_learnable() {
    let ds = synth_regression(512, 4, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mlp = Mlp::new("reg", &[4, 64, 1], Activation::Tanh, false, &mut ParamIds::new(), &mut rng).unwrap();
    let rmse = fit(&mut mlp, &ds.x, &ds.y, 20_000, 1e-2).sqrt();
    assert!(rmse < 0.05, "{rmse}");
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn flow_loss_decreases_on_other_datasets() {
    let small = Architecture {
        encoder_hidden: vec![16],
        dynamics_hidden: vec![16, 16],
        ..Architecture::default()
    };
    let cfg = TrainConfig {
        iterations: 1000,
        batch_size: 64,
        label_noise_std: 0.1,
        ..TrainConfig::default()
    };
    for ds in [
        synth_regression(128, 3, 1).unwrap().standardized().unwrap(),
        synth_blobs(90, 2, 3.0, 4).unwrap(),
    ] {
        let mut m = LatentFlowModel::new(ds.d_x(), ds.d_y(), ds.task, Schedule::Linear, &small, 3).unwrap();
        let log = train(&mut m, &ds, None, &cfg).unwrap();
        let flow = log.flow_losses();
        assert_eq!(flow.len(), 1000);
        assert!(median(&flow[900..]) < median(&flow[..100]));
    }
}

#[test]
fn trained_toy_model_diagnostics() {
    let ds = toy_crossing();
    let arch = Architecture {
        encoder_hidden: vec![32],
        dynamics_hidden: vec![32, 32],
        ..Architecture::default()
    };
    let mut m = LatentFlowModel::new(2, 2, ds.task, Schedule::Linear, &arch, 0).unwrap();
    let cfg = TrainConfig {
        iterations: 5000,
        label_noise_std: 0.1,
        ..TrainConfig::default()
    };
    train(&mut m, &ds, None, &cfg).unwrap();

    assert_eq!(disagreement(&m, &ds).unwrap(), 0.0);
    let knn = knn_report(&m, &ds, 1).unwrap();
    assert!(knn.accuracy_z1hat >= knn.accuracy_z0, "{knn:?}");

    let sweep = nfe_sweep(&m, &ds, &[1, 4], true).unwrap();
    assert_eq!(sweep.len(), 3);
    assert_eq!(sweep[0].nfe, 1.0);
    let sentinel = &sweep[2];
    assert!(!sentinel.solver.is_fixed_step());
    assert!(sentinel.nfe >= 7.0 && sentinel.metric.is_finite());
    assert_eq!(
        latentflow::model::evaluate(&m, &ds, SolverSpec::Euler { steps: 1 }).unwrap().nfe_mean,
        1.0
    );
}
