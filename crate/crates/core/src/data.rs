//! Paired datasets: synthesis, CSV ingestion, splitting and standardization.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification { num_classes: usize },
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// How label columns of a CSV are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    /// Real-valued targets, one column per output.
    Continuous,
    /// A single column of class indices `0..k`, one-hot encoded on load.
    Categorical,
}

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Present for regression targets only.
    pub y_mean: Option<Vec<f64>>,
    pub y_std: Option<Vec<f64>>,
}

impl Normalization {
    /// Statistics of `ds` (population std; constant columns get std 1).
    pub fn fit(ds: &PairedDataset) -> Self {
        let (x_mean, x_std) = column_stats(&ds.x);
        let (y_mean, y_std) = if ds.task.is_classification() {
            (None, None)
        } else {
            let (m, s) = column_stats(&ds.y);
            (Some(m), Some(s))
        };
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn apply_x(&self, x: &Tensor) -> Result<Tensor> {
        standardize(x, &self.x_mean, &self.x_std)
    }

    pub fn apply_y(&self, y: &Tensor) -> Result<Tensor> {
        match (&self.y_mean, &self.y_std) {
            (Some(m), Some(s)) => standardize(y, m, s),
            _ => Ok(y.clone()),
        }
    }

    /// Maps standardized targets back to original units.
    pub fn invert_y(&self, y: &Tensor) -> Result<Tensor> {
        match (&self.y_mean, &self.y_std) {
            (Some(m), Some(s)) => {
                check_width(y, m.len())?;
                let mut out = y.clone();
                for i in 0..out.rows() {
                    for ((v, m), s) in out.row_mut(i).iter_mut().zip(m).zip(s) {
                        *v = *v * s + m;
                    }
                }
                Ok(out)
            }
            _ => Ok(y.clone()),
        }
    }
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = t.rows() as f64;
    let c = t.cols();
    let mut mean = vec![0.0; c];
    for i in 0..t.rows() {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for i in 0..t.rows() {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn check_width(t: &Tensor, width: usize) -> Result<()> {
    if t.cols() != width {
        return Err(Error::DimensionMismatch(format!(
            "expected {width} columns, got {}",
            t.cols()
        )));
    }
    Ok(())
}

fn standardize(t: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    check_width(t, mean.len())?;
    let mut out = t.clone();
    for i in 0..out.rows() {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Matched `(x, y)` records. Classification targets are one-hot rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub x: Tensor,
    pub y: Tensor,
    pub task: TaskKind,
    /// Statistics already applied to `x` (and regression `y`), if any.
    pub normalization: Option<Normalization>,
}

impl PairedDataset {
    pub fn new(x: Tensor, y: Tensor, task: TaskKind) -> Result<Self> {
        if !x.is_matrix() || !y.is_matrix() || x.rows() != y.rows() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if let TaskKind::Classification { num_classes } = task {
            check_width(&y, num_classes)?;
        }
        Ok(Self {
            x,
            y,
            task,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y.cols()
    }

    /// Class indices for classification data.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.task
            .is_classification()
            .then(|| self.y.argmax_rows())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            task: self.task,
            normalization: self.normalization.clone(),
        }
    }

    /// Rejects inputs that appear more than once with different labels:
    /// no deterministic map can fit them.
    pub fn check_conflicts(&self) -> Result<()> {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in 0..self.len() {
            let key: Vec<u64> = self.x.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
            match seen.get(&key) {
                Some(&j) if self.y.row(j) != self.y.row(i) => {
                    return Err(Error::ConflictingDuplicate {
                        first: j + 1,
                        second: i + 1,
                    });
                }
                Some(_) => {}
                None => {
                    seen.insert(key, i);
                }
            }
        }
        Ok(())
    }

    /// Applies `norm` to raw data and remembers it.
    pub fn normalized_with(&self, norm: &Normalization) -> Result<Self> {
        if self.normalization.is_some() {
            return Err(Error::InvalidArgument("dataset is already normalized".into()));
        }
        Ok(Self {
            x: norm.apply_x(&self.x)?,
            y: norm.apply_y(&self.y)?,
            task: self.task,
            normalization: Some(norm.clone()),
        })
    }

    /// Standardizes with statistics computed on this dataset.
    pub fn standardized(&self) -> Result<Self> {
        self.normalized_with(&Normalization::fit(self))
    }

    /// Targets in original units.
    pub fn raw_y(&self) -> Result<Tensor> {
        match &self.normalization {
            Some(n) => n.invert_y(&self.y),
            None => Ok(self.y.clone()),
        }
    }

    /// Writes the dataset as CSV with columns `x0.., y0..`.
    pub fn to_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.d_x())
            .map(|i| format!("x{i}"))
            .chain((0..self.d_y()).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let rec: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.y.row(i))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }
}

/// Heights of the four canonical toy points.
pub const TOY_HEIGHTS: [f64; 4] = [-0.75, -0.25, 0.25, 0.75];

/// Four points at `x = -1` translated to `x = 1` with their vertical order
/// reversed, so every pair of straight chords intersects (at the origin).
pub fn toy_crossing() -> PairedDataset {
    toy_with_targets(|i| TOY_HEIGHTS[TOY_HEIGHTS.len() - 1 - i])
}

/// The non-crossing control: same inputs, order preserved.
pub fn toy_parallel() -> PairedDataset {
    toy_with_targets(|i| TOY_HEIGHTS[i])
}

fn toy_with_targets(target: impl Fn(usize) -> f64) -> PairedDataset {
    let x: Vec<[f64; 2]> = TOY_HEIGHTS.iter().map(|&h| [-1.0, h]).collect();
    let y: Vec<[f64; 2]> = (0..TOY_HEIGHTS.len()).map(|i| [1.0, target(i)]).collect();
    PairedDataset::new(
        Tensor::from_rows(&x).expect("fixed shape"),
        Tensor::from_rows(&y).expect("fixed shape"),
        TaskKind::Regression,
    )
    .expect("fixed shape")
}

pub fn one_hot(label: usize, classes: usize) -> Result<Tensor> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut t = Tensor::zeros([classes]);
    t.data_mut()[label] = 1.0;
    Ok(t)
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut y = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        y.row_mut(i).copy_from_slice(one_hot(l, classes)?.data());
    }
    Ok(y)
}

/// Reads a headered, comma-separated file. Rows are numbered from 1
/// (first data row) in errors.
pub fn load_csv(path: &Path, x_cols: &[String], y_cols: &[String], labels: LabelKind) -> Result<PairedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    if header.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let index_of = |name: &String| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let xi: Vec<usize> = x_cols.iter().map(index_of).collect::<Result<_>>()?;
    let yi: Vec<usize> = y_cols.iter().map(index_of).collect::<Result<_>>()?;
    if labels == LabelKind::Categorical && yi.len() != 1 {
        return Err(Error::InvalidArgument(
            "classification expects exactly one label column".into(),
        ));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |c: usize, name: &String| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: name.clone(),
                value: raw.to_string(),
            })
        };
        for (&c, name) in xi.iter().zip(x_cols) {
            xs.push(cell(c, name)?);
        }
        for (&c, name) in yi.iter().zip(y_cols) {
            ys.push(cell(c, name)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let x = Tensor::new([rows, xi.len()], xs)?;
    let ds = match labels {
        LabelKind::Continuous => PairedDataset::new(x, Tensor::new([rows, yi.len()], ys)?, TaskKind::Regression)?,
        LabelKind::Categorical => {
            let mut classes = Vec::with_capacity(rows);
            for (r, v) in ys.iter().enumerate() {
                if *v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::NonNumeric {
                        row: r + 1,
                        column: y_cols[0].clone(),
                        value: v.to_string(),
                    });
                }
                classes.push(*v as usize);
            }
            let k = classes.iter().max().map_or(0, |m| m + 1);
            let y = one_hot_rows(&classes, k)?;
            PairedDataset::new(x, y, TaskKind::Classification { num_classes: k })?
        }
    };
    ds.check_conflicts()?;
    Ok(ds)
}

/// Seeded shuffle, then the first `round(ratio · N)` records train and the
/// rest validate. Standardization statistics come from the train side only
/// and are applied to both.
pub fn split(ds: &PairedDataset, ratio: f64, seed: u64) -> Result<(PairedDataset, PairedDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = ds.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} on {n} records leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = ds.subset(&idx[..n_train]);
    let val = ds.subset(&idx[n_train..]);
    let norm = Normalization::fit(&train);
    Ok((train.normalized_with(&norm)?, val.normalized_with(&norm)?))
}

/// Smooth synthetic regression:
/// `y = (1/3) Σ_{k<3} sin(w_k · x + c_k)` with `x ~ U[-1, 1]^d`,
/// `w_k ~ N(0, 4 I)` and `c_k ~ U[0, 2π)`, all drawn from `seed`.
pub fn synth_regression(n: usize, d_x: usize, seed: u64) -> Result<PairedDataset> {
    if n < 2 || d_x == 0 {
        return Err(Error::InvalidArgument(format!("need n >= 2 and d_x >= 1, got {n}, {d_x}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<(Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let w = (0..d_x)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (w, rng.random_range(0.0..TAU))
        })
        .collect();
    let mut xs = Vec::with_capacity(n * d_x);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d_x).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let y = proj
            .iter()
            .map(|(w, c)| (w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + c).sin())
            .sum::<f64>()
            / 3.0;
        xs.extend_from_slice(&x);
        ys.push(y);
    }
    PairedDataset::new(Tensor::new([n, d_x], xs)?, Tensor::new([n, 1], ys)?, TaskKind::Regression)
}

/// Two concentric noisy rings in the plane (radius 0.5: class 0, radius
/// 1.0: class 1). Not linearly separable in the input space.
pub fn synth_rings(n: usize, noise: f64, seed: u64) -> Result<PairedDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let r = if class == 0 { 0.5 } else { 1.0 } + noise * rng.sample::<f64, _>(StandardNormal);
        let a = rng.random_range(0.0..TAU);
        xs.extend_from_slice(&[r * a.cos(), r * a.sin()]);
        labels.push(class);
    }
    PairedDataset::new(
        Tensor::new([n, 2], xs)?,
        one_hot_rows(&labels, 2)?,
        TaskKind::Classification { num_classes: 2 },
    )
}

/// Two Gaussian blobs centred at `±separation/2` on the first axis.
pub fn synth_blobs(n: usize, d_x: usize, separation: f64, seed: u64) -> Result<PairedDataset> {
    if n < 2 || d_x == 0 {
        return Err(Error::InvalidArgument("need n >= 2 and d_x >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * d_x);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let centre = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        for d in 0..d_x {
            let offset = if d == 0 { centre } else { 0.0 };
            xs.push(offset + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(class);
    }
    PairedDataset::new(
        Tensor::new([n, d_x], xs)?,
        one_hot_rows(&labels, 2)?,
        TaskKind::Classification { num_classes: 2 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn toy_shape() {
        let ds = toy_crossing();
        assert_eq!((ds.len(), ds.d_x(), ds.d_y()), (4, 2, 2));
    }

    // Segment intersection by orientation tests, independent of the
    // interpolant code.
    fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }

    fn chords_cross(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> bool {
        orient(p, q, r) * orient(p, q, s) < 0.0 && orient(r, s, p) * orient(r, s, q) < 0.0
    }

    fn chord(ds: &PairedDataset, i: usize) -> ([f64; 2], [f64; 2]) {
        let a = ds.x.row(i);
        let b = ds.y.row(i);
        ([a[0], a[1]], [b[0], b[1]])
    }

    #[test]
    fn toy_chords_all_cross() {
        let ds = toy_crossing();
        let mut crossings = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let (p, q) = chord(&ds, i);
                let (r, s) = chord(&ds, j);
                assert!(chords_cross(p, q, r, s), "{i} {j}");
                crossings += 1;
            }
        }
        assert_eq!(crossings, 6);
    }

    #[test]
    fn parallel_control_has_no_crossings() {
        let ds = toy_parallel();
        for i in 0..4 {
            for j in i + 1..4 {
                let (p, q) = chord(&ds, i);
                let (r, s) = chord(&ds, j);
                assert!(!chords_cross(p, q, r, s));
            }
        }
    }

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(2, 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap().data(), &[1.0]);
        for j in 0..5 {
            assert_eq!(crate::tensor::argmax(one_hot(j, 5).unwrap().data()), j);
        }
        assert!(matches!(one_hot(3, 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn csv_shapes() {
        let f = write_csv("a,b,t\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_csv(f.path(), &names(&["a", "b"]), &names(&["t"]), LabelKind::Continuous).unwrap();
        assert_eq!(ds.x.shape(), &[3, 2]);
        assert_eq!(ds.y.shape(), &[3, 1]);
        assert_eq!(ds.y.data(), &[3.0, 6.0, 9.0]);
    }

    #[test]
    fn csv_bad_cell_reports_row_and_column() {
        let f = write_csv("a,b,t\n1,2,3\nabc,5,6\n");
        match load_csv(f.path(), &names(&["a", "b"]), &names(&["t"]), LabelKind::Continuous) {
            Err(Error::NonNumeric { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "a", "abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_column_and_empty() {
        let f = write_csv("a,b,t\n1,2,3\n");
        assert!(matches!(
            load_csv(f.path(), &names(&["a", "z"]), &names(&["t"]), LabelKind::Continuous),
            Err(Error::MissingColumn(c)) if c == "z"
        ));
        let e = write_csv("");
        assert!(load_csv(e.path(), &names(&["a"]), &names(&["t"]), LabelKind::Continuous).is_err());
        let h = write_csv("a,t\n");
        assert!(matches!(
            load_csv(h.path(), &names(&["a"]), &names(&["t"]), LabelKind::Continuous),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn csv_classes_one_hot() {
        let f = write_csv("a,c\n0.1,0\n0.2,2\n0.3,1\n");
        let ds = load_csv(f.path(), &names(&["a"]), &names(&["c"]), LabelKind::Categorical).unwrap();
        assert_eq!(ds.d_y(), 3);
        assert_eq!(ds.task, TaskKind::Classification { num_classes: 3 });
        assert_eq!(ds.classes().unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn conflicting_duplicates_rejected() {
        let f = write_csv("a,t\n1,1\n2,2\n1,5\n");
        assert!(matches!(
            load_csv(f.path(), &names(&["a"]), &names(&["t"]), LabelKind::Continuous),
            Err(Error::ConflictingDuplicate { first: 1, second: 3 })
        ));
        let ok = write_csv("a,t\n1,1\n1,1\n");
        assert!(load_csv(ok.path(), &names(&["a"]), &names(&["t"]), LabelKind::Continuous).is_ok());
    }

    #[test]
    fn split_sizes_and_seed() {
        let ds = synth_regression(10, 2, 0).unwrap();
        let (a, b) = split(&ds, 0.6, 4).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        let (c, d) = split(&ds, 0.6, 4).unwrap();
        assert_eq!((a, b), (c, d));
        assert!(split(&ds, 0.01, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn train_side_standardized() {
        let ds = synth_regression(200, 3, 1).unwrap();
        let (train, _) = split(&ds, 0.6, 2).unwrap();
        for t in [&train.x, &train.y] {
            let (mean, _) = column_stats(t);
            let n = t.rows() as f64;
            for (j, m) in mean.iter().enumerate() {
                assert!(m.abs() < 1e-10);
                let var = (0..t.rows()).map(|i| t.row(i)[j].powi(2)).sum::<f64>() / n;
                assert!((var.sqrt() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn destandardize_round_trip() {
        let ds = synth_regression(50, 2, 9).unwrap();
        let norm = Normalization::fit(&ds);
        let back = norm.invert_y(&norm.apply_y(&ds.y).unwrap()).unwrap();
        assert!(back.max_abs_diff(&ds.y).unwrap() < 1e-12);
    }

    #[test]
    fn synth_is_seeded() {
        let a = synth_regression(30, 4, 11).unwrap();
        assert_eq!(a, synth_regression(30, 4, 11).unwrap());
        assert_ne!(a, synth_regression(30, 4, 12).unwrap());
        assert_eq!(a.d_y(), 1);
    }

    #[test]
    fn toy_csv_output() {
        let mut buf = Vec::new();
        toy_crossing().to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("x0,x1,y0,y1"));
        assert_eq!(text.lines().nth(1), Some("-1,-0.75,1,0.75"));
    }
}
