//! Analysis metrics over a trained model: solver disagreement, velocity
//! cosine profiles, nearest-neighbour probes, NFE sweeps and interpolant
//! collision checks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{evaluate, FlowMatched, MetricKind, Predictor};
use crate::solvers::SolverSpec;
use crate::tensor::Tensor;

/// Relative L2 gap above which two regression predictions disagree.
pub const REGRESSION_DISAGREEMENT_TOL: f64 = 1e-2;

fn rows_disagree(a: &[f64], b: &[f64]) -> bool {
    let gap = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale > 0.0 {
        gap / scale > REGRESSION_DISAGREEMENT_TOL
    } else {
        gap > REGRESSION_DISAGREEMENT_TOL
    }
}

/// Fraction of samples whose one-step Euler prediction differs from the
/// reference adaptive prediction. Classes are compared for classification;
/// for regression a row differs when `‖a − b‖ / ‖b‖ > 1e-2` (absolute gap
/// when `b = 0`), measured in the dataset's stored units.
pub fn disagreement(model: &dyn Predictor, ds: &PairedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let one = model.predict(&ds.x, SolverSpec::Euler { steps: 1 })?;
    let reference = model.predict(&ds.x, SolverSpec::reference())?;
    let differing = match (&one.classes, &reference.classes) {
        (Some(a), Some(b)) => a.iter().zip(b).filter(|(x, y)| x != y).count(),
        _ => (0..ds.len())
            .filter(|&i| rows_disagree(one.y.row(i), reference.y.row(i)))
            .count(),
    };
    Ok(differing as f64 / ds.len() as f64)
}

/// Cosine similarity with the zero-vector convention (0 if either is 0).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `n` evenly spaced times covering `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosinePoint {
    pub t: f64,
    pub cosine: f64,
}

/// Mean over samples of `cos(h(z_t, t), v_t)` at each grid time.
pub fn velocity_cosine_profile(model: &dyn FlowMatched, ds: &PairedDataset, t_grid: &[f64]) -> Result<Vec<CosinePoint>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (z0, z1) = model.endpoints(&ds.x, &ds.y)?;
    let schedule = model.schedule();
    exec::try_map_range(t_grid.len(), |k| {
        let t = t_grid[k];
        let zt = schedule.interpolate(&z0, &z1, t)?;
        let target = schedule.target_velocity(&z0, &z1, t)?;
        let pred = model.field().velocity(&zt, t)?;
        let mean = (0..zt.rows())
            .map(|i| cosine(pred.row(i), target.row(i)))
            .sum::<f64>()
            / zt.rows() as f64;
        Ok::<_, Error>(CosinePoint { t, cosine: mean })
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Majority vote among the `k` nearest reference rows (Euclidean, ties in
/// distance by reference index). Vote ties go to the smaller summed
/// distance, then the lower label. References with `skip(r)` are ignored.
fn knn_vote(reference: &Tensor, labels: &[usize], q: &[f64], k: usize, skip: impl Fn(usize) -> bool) -> Option<usize> {
    let mut d: Vec<(f64, usize)> = (0..reference.rows())
        .filter(|&r| !skip(r))
        .map(|r| (sq_dist(reference.row(r), q), r))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(dist, r) in d.iter().take(k) {
        let e = votes.entry(labels[r]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += dist.sqrt();
    }
    votes
        .into_iter()
        .min_by(|a, b| {
            b.1 .0
                .cmp(&a.1 .0)
                .then(a.1 .1.total_cmp(&b.1 .1))
                .then(a.0.cmp(&b.0))
        })
        .map(|(label, _)| label)
}

fn check_knn(reference: &Tensor, labels: &[usize], query: &Tensor, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if reference.rows() == 0 {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    if query.rows() == 0 {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    if labels.len() != reference.rows() || reference.cols() != query.cols() {
        return Err(Error::DimensionMismatch(format!(
            "reference {:?} with {} labels, query {:?}",
            reference.shape(),
            labels.len(),
            query.shape()
        )));
    }
    Ok(())
}

/// k-NN labels for each query row.
pub fn knn_classify(reference: &Tensor, labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>> {
    check_knn(reference, labels, query, k)?;
    Ok(exec::map_range(query.rows(), |q| {
        knn_vote(reference, labels, query.row(q), k, |_| false).expect("nonempty reference")
    }))
}

/// Accuracy of [`knn_classify`] against `query_labels`.
pub fn knn_probe(reference: &Tensor, labels: &[usize], query: &Tensor, query_labels: &[usize], k: usize) -> Result<f64> {
    if query_labels.len() != query.rows() {
        return Err(Error::DimensionMismatch("query labels".into()));
    }
    let got = knn_classify(reference, labels, query, k)?;
    Ok(accuracy(&got, query_labels))
}

/// Leave-one-out k-NN accuracy within one labelled set.
pub fn knn_leave_one_out(points: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_knn(points, labels, points, k)?;
    if points.rows() < 2 {
        return Err(Error::InvalidArgument("leave-one-out needs two points".into()));
    }
    let got = exec::map_range(points.rows(), |q| {
        knn_vote(points, labels, points.row(q), k, |r| r == q).expect("at least one other point")
    });
    Ok(accuracy(&got, labels))
}

fn accuracy(got: &[usize], want: &[usize]) -> f64 {
    got.iter().zip(want).filter(|(a, b)| a == b).count() as f64 / want.len() as f64
}

/// Distinct label rows and, for each sample, the index of its label.
pub fn distinct_labels(y: &Tensor) -> (Tensor, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut ids = Vec::with_capacity(y.rows());
    for i in 0..y.rows() {
        let key: Vec<u64> = y.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
        let next = rows.len();
        let id = *seen.entry(key).or_insert(next);
        if id == next {
            rows.push(y.row(i).to_vec());
        }
        ids.push(id);
    }
    let distinct = if rows.is_empty() {
        Tensor::zeros([0, y.cols()])
    } else {
        Tensor::from_rows(&rows).expect("uniform width")
    };
    (distinct, ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub accuracy_z0: f64,
    pub accuracy_z1hat: f64,
}

/// 1-NN probe on the data embedding `z0` and on the solved state `ẑ1`.
///
/// Classification: leave-one-out among samples, labelled by class.
/// Regression: every distinct target is a class and the reference set is
/// the label embedding of each distinct target, so the probe asks whether a
/// state sits closest to its own pair's embedding.
pub fn knn_report(model: &dyn FlowMatched, ds: &PairedDataset, k: usize) -> Result<KnnReport> {
    let (z0, _) = model.endpoints(&ds.x, &ds.y)?;
    let z1hat = model.predict(&ds.x, SolverSpec::reference())?.latent;
    match ds.classes() {
        Some(c) => Ok(KnnReport {
            accuracy_z0: knn_leave_one_out(&z0, &c, k)?,
            accuracy_z1hat: knn_leave_one_out(&z1hat, &c, k)?,
        }),
        None => {
            let (distinct, ids) = distinct_labels(&ds.y);
            let dummy_x = Tensor::zeros([distinct.rows(), ds.d_x()]);
            let (_, reference) = model.endpoints(&dummy_x, &distinct)?;
            let labels: Vec<usize> = (0..distinct.rows()).collect();
            Ok(KnnReport {
                accuracy_z0: knn_probe(&reference, &labels, &z0, &ids, k)?,
                accuracy_z1hat: knn_probe(&reference, &labels, &z1hat, &ids, k)?,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub solver: SolverSpec,
    pub nfe: f64,
    pub metric: f64,
}

/// Metric per Euler step count, plus the reference adaptive solver last
/// when `with_reference` is set (reporting its measured mean NFE).
pub fn nfe_sweep(model: &dyn Predictor, ds: &PairedDataset, euler_steps: &[usize], with_reference: bool) -> Result<Vec<SweepPoint>> {
    let mut specs = euler_steps
        .iter()
        .map(|&n| SolverSpec::euler(n))
        .collect::<Result<Vec<_>>>()?;
    if with_reference {
        specs.push(SolverSpec::reference());
    }
    specs
        .into_iter()
        .map(|spec| {
            let e = evaluate(model, ds, spec)?;
            Ok(SweepPoint {
                solver: spec,
                nfe: e.nfe_mean,
                metric: e.metric,
            })
        })
        .collect()
}

/// Smallest distance between interpolants of pairs with distinct labels,
/// over all pairs and `t_points` evenly spaced times in `[0, 1]`.
pub fn min_interpolant_gap(model: &dyn FlowMatched, ds: &PairedDataset, t_points: usize) -> Result<f64> {
    let (z0, z1) = model.endpoints(&ds.x, &ds.y)?;
    let schedule = model.schedule();
    let (_, ids) = distinct_labels(&ds.y);
    let grid = unit_grid(t_points);
    let per_t = exec::try_map_range(grid.len(), |k| {
        let zt = schedule.interpolate(&z0, &z1, grid[k])?;
        let mut best = f64::INFINITY;
        for i in 0..zt.rows() {
            for j in i + 1..zt.rows() {
                if ids[i] != ids[j] {
                    best = best.min(sq_dist(zt.row(i), zt.row(j)).sqrt());
                }
            }
        }
        Ok::<_, Error>(best)
    })?;
    Ok(per_t.into_iter().fold(f64::INFINITY, f64::min))
}

/// `(min pairwise distance, median norm)` of the label embeddings of the
/// distinct labels in `ds`.
pub fn label_embedding_spread(model: &dyn FlowMatched, ds: &PairedDataset) -> Result<(f64, f64)> {
    let (distinct, _) = distinct_labels(&ds.y);
    let dummy_x = Tensor::zeros([distinct.rows(), ds.d_x()]);
    let (_, e) = model.endpoints(&dummy_x, &distinct)?;
    let mut min = f64::INFINITY;
    for i in 0..e.rows() {
        for j in i + 1..e.rows() {
            min = min.min(sq_dist(e.row(i), e.row(j)).sqrt());
        }
    }
    let mut norms: Vec<f64> = (0..e.rows())
        .map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(f64::total_cmp);
    let median = if norms.is_empty() {
        0.0
    } else if norms.len() % 2 == 1 {
        norms[norms.len() / 2]
    } else {
        0.5 * (norms[norms.len() / 2 - 1] + norms[norms.len() / 2])
    };
    Ok((min, median))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub disagreement_fraction: f64,
    pub cosine_profile: Vec<CosinePoint>,
    pub knn_accuracy_z0: f64,
    pub knn_accuracy_z1hat: f64,
    pub metric_kind: MetricKind,
    pub nfe_sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseOptions {
    pub t_points: usize,
    pub euler_steps: Vec<usize>,
    pub k: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            t_points: 21,
            euler_steps: vec![1, 2, 4, 8, 16, 32, 64, 100],
            k: 1,
        }
    }
}

pub fn diagnose(model: &dyn FlowMatched, ds: &PairedDataset, opts: &DiagnoseOptions) -> Result<DiagnosticsReport> {
    let knn = knn_report(model, ds, opts.k)?;
    Ok(DiagnosticsReport {
        disagreement_fraction: disagreement(model, ds)?,
        cosine_profile: velocity_cosine_profile(model, ds, &unit_grid(opts.t_points))?,
        knn_accuracy_z0: knn.accuracy_z0,
        knn_accuracy_z1hat: knn.accuracy_z1hat,
        metric_kind: MetricKind::for_task(ds.task),
        nfe_sweep: nfe_sweep(model, ds, &opts.euler_steps, true)?,
    })
}

impl DiagnosticsReport {
    pub fn is_finite(&self) -> bool {
        self.disagreement_fraction.is_finite()
            && self.knn_accuracy_z0.is_finite()
            && self.knn_accuracy_z1hat.is_finite()
            && self.cosine_profile.iter().all(|p| p.cosine.is_finite())
            && self.nfe_sweep.iter().all(|p| p.metric.is_finite() && p.nfe.is_finite())
    }

    /// `report.json`, `cosine_profile.csv` (t,value) and `nfe_sweep.csv`
    /// (nfe,value,solver).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;

        let path = dir.join("cosine_profile.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["t", "value"])?;
        for p in &self.cosine_profile {
            w.write_record([p.t.to_string(), p.cosine.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("nfe_sweep.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["nfe", "value", "solver"])?;
        for p in &self.nfe_sweep {
            w.write_record([p.nfe.to_string(), p.metric.to_string(), p.solver.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
