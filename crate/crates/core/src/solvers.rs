//! Fixed-step and adaptive ODE integration with evaluation counting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::field::VectorField;
use crate::tensor::{Graph, Tensor, Var};

/// Which integrator to use and its settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SolverSpec {
    Euler { steps: usize },
    Rk4 { steps: usize },
    Dopri5 { rtol: f64, atol: f64 },
}

impl SolverSpec {
    pub fn euler(steps: usize) -> Result<Self> {
        Self::Euler { steps }.validated()
    }

    pub fn rk4(steps: usize) -> Result<Self> {
        Self::Rk4 { steps }.validated()
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Result<Self> {
        Self::Dopri5 { rtol, atol }.validated()
    }

    /// The adaptive reference setting used for evaluation: tolerances 1e-3.
    pub fn reference() -> Self {
        Self::Dopri5 { rtol: 1e-3, atol: 1e-3 }
    }

    pub fn validated(self) -> Result<Self> {
        match self {
            Self::Euler { steps: 0 } | Self::Rk4 { steps: 0 } => {
                Err(Error::UnknownSolver(self.to_string()))
            }
            Self::Dopri5 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                Err(Error::UnknownSolver(self.to_string()))
            }
            _ => Ok(self),
        }
    }

    pub fn is_fixed_step(&self) -> bool {
        !matches!(self, Self::Dopri5 { .. })
    }

    /// Field evaluations per solve for fixed-step methods.
    pub fn fixed_nfe(&self) -> Option<usize> {
        match *self {
            Self::Euler { steps } => Some(steps),
            Self::Rk4 { steps } => Some(4 * steps),
            Self::Dopri5 { .. } => None,
        }
    }
}

impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Euler { steps } => write!(f, "euler:{steps}"),
            Self::Rk4 { steps } => write!(f, "rk4:{steps}"),
            Self::Dopri5 { rtol, atol } => write!(f, "dopri5:{rtol:e},{atol:e}"),
        }
    }
}

impl FromStr for SolverSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownSolver(s.to_string());
        if s.trim() == "dopri5" {
            return Ok(Self::reference());
        }
        let (kind, args) = s.trim().split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "euler" => Self::Euler {
                steps: args.trim().parse().map_err(|_| bad())?,
            },
            "rk4" => Self::Rk4 {
                steps: args.trim().parse().map_err(|_| bad())?,
            },
            "dopri5" => {
                let (r, a) = args.split_once(',').ok_or_else(bad)?;
                Self::Dopri5 {
                    rtol: r.trim().parse().map_err(|_| bad())?,
                    atol: a.trim().parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validated().map_err(|_| bad())
    }
}

impl TryFrom<String> for SolverSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SolverSpec> for String {
    fn from(s: SolverSpec) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Record every `n`-th accepted step (plus both endpoints).
    pub trajectory_stride: Option<usize>,
    /// Upper bound on adaptive step attempts.
    pub max_steps: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            trajectory_stride: None,
            max_steps: 100_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub z: Tensor,
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub trajectory: Vec<(f64, Tensor)>,
}

struct Counted<F> {
    f: F,
    nfe: usize,
}

impl<F: FnMut(&Tensor, f64) -> Result<Tensor>> Counted<F> {
    fn eval(&mut self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.nfe += 1;
        (self.f)(z, t)
    }
}

struct Recorder {
    stride: Option<usize>,
    points: Vec<(f64, Tensor)>,
}

impl Recorder {
    fn new(stride: Option<usize>, t0: f64, z0: &Tensor) -> Self {
        let points = match stride {
            Some(_) => vec![(t0, z0.clone())],
            None => Vec::new(),
        };
        Self { stride, points }
    }

    fn step(&mut self, index: usize, t: f64, z: &Tensor, last: bool) {
        if let Some(s) = self.stride {
            if last || index.is_multiple_of(s.max(1)) {
                self.points.push((t, z.clone()));
            }
        }
    }
}

/// Integrates `dz/dt = f(z, t)` from `t0` to `t1`.
pub fn solve<F>(f: F, z0: &Tensor, t0: f64, t1: f64, spec: SolverSpec) -> Result<SolveResult>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    solve_with(f, z0, t0, t1, spec, &SolveOptions::default())
}

/// Integrates a [`VectorField`] from `t0` to `t1`.
pub fn solve_field(
    field: &dyn VectorField,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    spec: SolverSpec,
) -> Result<SolveResult> {
    solve(|z, t| field.velocity(z, t), z0, t0, t1, spec)
}

pub fn solve_with<F>(
    f: F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    spec: SolverSpec,
    opts: &SolveOptions,
) -> Result<SolveResult>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let spec = spec.validated()?;
    if !(t0 < t1) {
        return Err(Error::InvalidArgument(format!("need t0 < t1, got {t0} and {t1}")));
    }
    let mut f = Counted { f, nfe: 0 };
    match spec {
        SolverSpec::Euler { steps } => fixed_step(&mut f, z0, t0, t1, steps, opts, euler_step),
        SolverSpec::Rk4 { steps } => fixed_step(&mut f, z0, t0, t1, steps, opts, rk4_step),
        SolverSpec::Dopri5 { rtol, atol } => dopri5(&mut f, z0, t0, t1, rtol, atol, opts),
    }
}

type Stepper<F> = fn(&mut Counted<F>, &Tensor, f64, f64) -> Result<Tensor>;

fn fixed_step<F: FnMut(&Tensor, f64) -> Result<Tensor>>(
    f: &mut Counted<F>,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    opts: &SolveOptions,
    step: Stepper<F>,
) -> Result<SolveResult> {
    let h = (t1 - t0) / steps as f64;
    let mut rec = Recorder::new(opts.trajectory_stride, t0, z0);
    let mut z = z0.clone();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        z = step(f, &z, t, h)?;
        if !z.is_finite() {
            return Err(Error::NonFiniteState { t: t + h });
        }
        let last = k + 1 == steps;
        rec.step(k + 1, if last { t1 } else { t + h }, &z, last);
    }
    Ok(SolveResult {
        z,
        nfe: f.nfe,
        accepted_steps: steps,
        rejected_steps: 0,
        trajectory: rec.points,
    })
}

fn euler_step<F: FnMut(&Tensor, f64) -> Result<Tensor>>(
    f: &mut Counted<F>,
    z: &Tensor,
    t: f64,
    h: f64,
) -> Result<Tensor> {
    let k = f.eval(z, t)?;
    z.add(&k.scale(h))
}

fn rk4_step<F: FnMut(&Tensor, f64) -> Result<Tensor>>(
    f: &mut Counted<F>,
    z: &Tensor,
    t: f64,
    h: f64,
) -> Result<Tensor> {
    let k1 = f.eval(z, t)?;
    let k2 = f.eval(&z.add(&k1.scale(h / 2.0))?, t + h / 2.0)?;
    let k3 = f.eval(&z.add(&k2.scale(h / 2.0))?, t + h / 2.0)?;
    let k4 = f.eval(&z.add(&k3.scale(h))?, t + h)?;
    let sum = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
    z.add(&sum.scale(h / 6.0))
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn combo(z: &Tensor, h: f64, weights: &[f64], ks: &[Tensor]) -> Result<Tensor> {
    let mut out = z.clone();
    for (w, k) in weights.iter().zip(ks) {
        if *w != 0.0 {
            out.axpy(h * w, k)?;
        }
    }
    Ok(out)
}

fn rms(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt()
}

fn dopri5<F: FnMut(&Tensor, f64) -> Result<Tensor>>(
    f: &mut Counted<F>,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let span = t1 - t0;
    let n = z0.len();
    let mut rec = Recorder::new(opts.trajectory_stride, t0, z0);
    let mut z = z0.clone();
    let mut t = t0;
    let mut k1 = f.eval(&z, t)?;
    if !k1.is_finite() {
        return Err(Error::NonFiniteState { t });
    }

    // Initial step from the scaled sizes of the state and its derivative;
    // reuses the first evaluation so no extra calls are spent.
    let scale0: Vec<f64> = z.data().iter().map(|y| atol + rtol * y.abs()).collect();
    let d0 = rms(z.data().iter().zip(&scale0).map(|(y, s)| y / s), n);
    let d1 = rms(k1.data().iter().zip(&scale0).map(|(y, s)| y / s), n);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);

    let (mut accepted, mut rejected) = (0usize, 0usize);
    let min_step = 1e-12 * span;
    loop {
        if accepted + rejected >= opts.max_steps {
            return Err(Error::TooManySteps(opts.max_steps));
        }
        if h < min_step {
            return Err(Error::StepUnderflow { t });
        }
        let last = t + h >= t1 || (t1 - (t + h)) < min_step;
        if last {
            h = t1 - t;
        }

        let mut ks = Vec::with_capacity(7);
        ks.push(k1.clone());
        for stage in 1..6 {
            let zi = combo(&z, h, A[stage], &ks)?;
            ks.push(f.eval(&zi, t + C[stage] * h)?);
        }
        let z_new = combo(&z, h, A[6], &ks)?;
        let t_new = if last { t1 } else { t + h };
        let k7 = f.eval(&z_new, t_new)?;
        if !z_new.is_finite() || !k7.is_finite() {
            return Err(Error::NonFiniteState { t: t_new });
        }
        ks.push(k7);

        let err_vec = combo(&Tensor::zeros(z.shape().to_vec()), h, &E, &ks)?;
        let err = rms(
            err_vec
                .data()
                .iter()
                .zip(z.data().iter().zip(z_new.data()))
                .map(|(e, (a, b))| e / (atol + rtol * a.abs().max(b.abs()))),
            n,
        );

        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            accepted += 1;
            t = t_new;
            z = z_new;
            k1 = ks.pop().expect("seven stages");
            rec.step(accepted, t, &z, last);
            if last {
                break;
            }
            h *= factor;
        } else {
            rejected += 1;
            h *= factor.min(1.0);
        }
    }

    Ok(SolveResult {
        z,
        nfe: f.nfe,
        accepted_steps: accepted,
        rejected_steps: rejected,
        trajectory: rec.points,
    })
}

/// Rows per fixed-step solve when a batch is split across threads.
const FIXED_CHUNK: usize = 32;

/// Solves every row of `z0` as an independent initial state and returns the
/// terminal states with the per-row NFE.
///
/// Fixed-step solves run on row chunks (the arithmetic per row is the same
/// as solving it alone); adaptive solves run per row so that each sample
/// gets its own step-size sequence.
pub fn solve_rows(
    field: &dyn VectorField,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    spec: SolverSpec,
) -> Result<(Tensor, Vec<usize>)> {
    let n = z0.rows();
    if n == 0 {
        return Ok((z0.clone(), Vec::new()));
    }
    let chunk = if spec.is_fixed_step() { FIXED_CHUNK } else { 1 };
    let chunks = n.div_ceil(chunk);
    let parts = exec::try_map_range(chunks, |c| {
        let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
        let res = solve_field(field, &z0.select_rows(&idx), t0, t1, spec)?;
        Ok::<_, Error>((res.z, vec![res.nfe; idx.len()]))
    })?;
    let mut rows = Vec::with_capacity(n);
    let mut nfe = Vec::with_capacity(n);
    for (z, counts) in parts {
        for i in 0..z.rows() {
            rows.push(z.row(i).to_vec());
        }
        nfe.extend(counts);
    }
    Ok((Tensor::from_rows(&rows)?, nfe))
}

/// Fixed-step solve recorded on `graph`, so gradients flow into `z0` and
/// into any parameters the field touches. Returns the terminal state and
/// the number of field evaluations.
pub fn solve_with_grad(
    graph: &mut Graph,
    field: &dyn VectorField,
    z0: Var,
    t0: f64,
    t1: f64,
    spec: SolverSpec,
) -> Result<(Var, usize)> {
    let spec = spec.validated()?;
    if !(t0 < t1) {
        return Err(Error::InvalidArgument(format!("need t0 < t1, got {t0} and {t1}")));
    }
    let (steps, rk4) = match spec {
        SolverSpec::Euler { steps } => (steps, false),
        SolverSpec::Rk4 { steps } => (steps, true),
        SolverSpec::Dopri5 { .. } => return Err(Error::AdaptiveNotDifferentiable),
    };
    let rows = graph.value(z0).rows();
    let h = (t1 - t0) / steps as f64;
    let mut nfe = 0;
    let mut eval = |graph: &mut Graph, z: Var, t: f64| -> Result<Var> {
        nfe += 1;
        field.record(graph, z, &vec![t; rows])
    };
    let mut z = z0;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        if rk4 {
            let k1 = eval(graph, z, t)?;
            let s = graph.scale(k1, h / 2.0);
            let z2 = graph.add(z, s)?;
            let k2 = eval(graph, z2, t + h / 2.0)?;
            let s = graph.scale(k2, h / 2.0);
            let z3 = graph.add(z, s)?;
            let k3 = eval(graph, z3, t + h / 2.0)?;
            let s = graph.scale(k3, h);
            let z4 = graph.add(z, s)?;
            let k4 = eval(graph, z4, t + h)?;
            let k2x = graph.scale(k2, 2.0);
            let k3x = graph.scale(k3, 2.0);
            let acc = graph.add(k1, k2x)?;
            let acc = graph.add(acc, k3x)?;
            let acc = graph.add(acc, k4)?;
            let incr = graph.scale(acc, h / 6.0);
            z = graph.add(z, incr)?;
        } else {
            let k1 = eval(graph, z, t)?;
            let incr = graph.scale(k1, h);
            z = graph.add(z, incr)?;
        }
    }
    Ok((z, nfe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;

    fn decay(z: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(z.scale(-1.0))
    }

    fn one() -> Tensor {
        Tensor::from_rows(&[[1.0]]).unwrap()
    }

    #[test]
    fn euler_constant_field_exact() {
        let z0 = Tensor::from_rows(&[[0.5, -2.0]]).unwrap();
        let v = ConstantField { velocity: vec![3.0, 0.25] };
        let out = solve_field(&v, &z0, 0.0, 1.0, SolverSpec::euler(1).unwrap()).unwrap();
        assert_eq!(out.z.data(), &[3.5, -1.75]);
        assert_eq!(out.nfe, 1);
    }

    #[test]
    fn euler_one_step_hits_linear_endpoint() {
        let z0 = Tensor::from_rows(&[[0.1, 0.7, -0.3]]).unwrap();
        let z1 = Tensor::from_rows(&[[1.0, -0.5, 0.2]]).unwrap();
        let v = z1.sub(&z0).unwrap();
        let out = solve(|_, _| Ok(v.clone()), &z0, 0.0, 1.0, SolverSpec::euler(1).unwrap()).unwrap();
        assert!(out.z.max_abs_diff(&z1).unwrap() < 1e-15);
    }

    #[test]
    fn dopri5_exponential_decay() {
        let out = solve(decay, &one(), 0.0, 1.0, SolverSpec::dopri5(1e-6, 1e-6).unwrap()).unwrap();
        assert!((out.z.item() - (-1.0f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn nfe_accounting() {
        for n in [1, 3, 10] {
            let e = solve(decay, &one(), 0.0, 1.0, SolverSpec::euler(n).unwrap()).unwrap();
            assert_eq!(e.nfe, n);
            let r = solve(decay, &one(), 0.0, 1.0, SolverSpec::rk4(n).unwrap()).unwrap();
            assert_eq!(r.nfe, 4 * n);
        }
        for tol in [1e-3, 1e-6, 1e-9] {
            let d = solve(decay, &one(), 0.0, 1.0, SolverSpec::dopri5(tol, tol).unwrap()).unwrap();
            assert_eq!(d.nfe, 1 + 6 * (d.accepted_steps + d.rejected_steps));
        }
    }

    #[test]
    fn rejected_steps_are_counted() {
        // A sharp pulse forces the controller to retreat at least once.
        let f = |z: &Tensor, t: f64| Ok(z.map(|_| 200.0 * (-(200.0 * (t - 0.5)).powi(2)).exp()));
        let d = solve(f, &one(), 0.0, 1.0, SolverSpec::dopri5(1e-8, 1e-8).unwrap()).unwrap();
        assert!(d.rejected_steps > 0);
        assert_eq!(d.nfe, 1 + 6 * (d.accepted_steps + d.rejected_steps));
    }

    #[test]
    fn parse_round_trip() {
        assert_eq!("dopri5".parse::<SolverSpec>().unwrap(), SolverSpec::reference());
        for s in ["euler:1", "rk4:8", "dopri5:1e-3,1e-3"] {
            let spec: SolverSpec = s.parse().unwrap();
            assert_eq!(spec.to_string().parse::<SolverSpec>().unwrap(), spec);
        }
        for bad in ["euler:0", "rk4:-1", "dopri5:1e-3", "dopri5:0,1", "heun:2", "euler"] {
            assert!(bad.parse::<SolverSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn nan_state_is_error() {
        let f = |z: &Tensor, _t: f64| Ok(z.map(|_| f64::NAN));
        assert!(matches!(
            solve(f, &one(), 0.0, 1.0, SolverSpec::euler(2).unwrap()),
            Err(Error::NonFiniteState { .. })
        ));
        assert!(matches!(
            solve(f, &one(), 0.0, 1.0, SolverSpec::reference()),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn blow_up_underflows() {
        // z' = z², z(0) = 1 blows up at t = 1.
        let f = |z: &Tensor, _t: f64| Ok(z.map(|v| v * v));
        let err = solve(f, &one(), 0.0, 2.0, SolverSpec::dopri5(1e-6, 1e-6).unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::StepUnderflow { .. } | Error::NonFiniteState { .. } | Error::TooManySteps(_)),
            "{err:?}"
        );
    }

    #[test]
    fn trajectory_recording() {
        let opts = SolveOptions {
            trajectory_stride: Some(2),
            ..Default::default()
        };
        let out = solve_with(decay, &one(), 0.0, 1.0, SolverSpec::euler(5).unwrap(), &opts).unwrap();
        let ts: Vec<f64> = out.trajectory.iter().map(|(t, _)| *t).collect();
        assert_eq!(ts.len(), 4);
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 1.0);
        let none = solve(decay, &one(), 0.0, 1.0, SolverSpec::euler(5).unwrap()).unwrap();
        assert!(none.trajectory.is_empty());
    }

    #[test]
    fn grad_solve_rejects_adaptive() {
        let mut g = Graph::new();
        let z = g.constant(one());
        let f = ConstantField { velocity: vec![1.0] };
        assert!(matches!(
            solve_with_grad(&mut g, &f, z, 0.0, 1.0, SolverSpec::reference()),
            Err(Error::AdaptiveNotDifferentiable)
        ));
    }

    #[test]
    fn grad_solve_constant_field_identity_jacobian() {
        let mut g = Graph::new();
        let z0 = g.constant(Tensor::from_rows(&[[0.2, -0.4]]).unwrap());
        let f = ConstantField { velocity: vec![1.0, 2.0] };
        let (z1, nfe) = solve_with_grad(&mut g, &f, z0, 0.0, 1.0, SolverSpec::rk4(3).unwrap()).unwrap();
        assert_eq!(nfe, 12);
        let s = g.sum(z1);
        let grads = g.backward_all(s).unwrap();
        assert_eq!(grads.get(z0).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn recorded_matches_plain_solve() {
        let field = crate::field::InverseTimeField { floor: 0.5 };
        let z0 = Tensor::from_rows(&[[0.3, 0.1], [2.0, -1.0]]).unwrap();
        for spec in [SolverSpec::euler(4).unwrap(), SolverSpec::rk4(4).unwrap()] {
            let plain = solve_field(&field, &z0, 0.0, 1.0, spec).unwrap();
            let mut g = Graph::new();
            let v = g.constant(z0.clone());
            let (out, nfe) = solve_with_grad(&mut g, &field, v, 0.0, 1.0, spec).unwrap();
            assert_eq!(nfe, plain.nfe);
            assert!(g.value(out).max_abs_diff(&plain.z).unwrap() < 1e-14);
        }
    }
}
