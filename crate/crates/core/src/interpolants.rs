//! Predefined dynamics `z_t = α_t z_0 + β_t z_1` and their target velocities.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `α = 1 - t`, `β = t`.
    Linear,
    /// `α = cos(πt/2)`, `β = sin(πt/2)`.
    Concave,
    /// `α = 1 - sin(πt/2)`, `β = 1 - cos(πt/2)`.
    Convex,
}

pub const ALL_SCHEDULES: [Schedule; 3] = [Schedule::Linear, Schedule::Concave, Schedule::Convex];

/// `(sin(πt/2), cos(πt/2))`, exact at both endpoints.
fn quarter_turn(t: f64) -> (f64, f64) {
    if t == 0.0 {
        (0.0, 1.0)
    } else if t == 1.0 {
        (1.0, 0.0)
    } else {
        (FRAC_PI_2 * t).sin_cos()
    }
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Concave => quarter_turn(t).1,
            Schedule::Convex => 1.0 - quarter_turn(t).0,
        }
    }

    pub fn beta(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Concave => quarter_turn(t).0,
            Schedule::Convex => 1.0 - quarter_turn(t).1,
        }
    }

    pub fn dalpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Concave => -FRAC_PI_2 * quarter_turn(t).0,
            Schedule::Convex => -FRAC_PI_2 * quarter_turn(t).1,
        }
    }

    pub fn dbeta(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Concave => FRAC_PI_2 * quarter_turn(t).1,
            Schedule::Convex => FRAC_PI_2 * quarter_turn(t).0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Concave => "concave",
            Schedule::Convex => "convex",
        }
    }

    /// `α_t z0 + β_t z1`.
    pub fn interpolate(self, z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
        check_time(t)?;
        combine(z0, z1, self.alpha(t), self.beta(t))
    }

    /// `α'_t z0 + β'_t z1`.
    pub fn target_velocity(self, z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
        check_time(t)?;
        combine(z0, z1, self.dalpha(t), self.dbeta(t))
    }

    /// Row-wise interpolant with one time per row, recorded on the tape.
    pub fn record_interpolate(self, graph: &mut Graph, z0: Var, z1: Var, t: &[f64]) -> Result<Var> {
        self.record_combination(graph, z0, z1, t, Self::alpha, Self::beta)
    }

    /// Row-wise target velocity with one time per row, recorded on the tape.
    pub fn record_velocity(self, graph: &mut Graph, z0: Var, z1: Var, t: &[f64]) -> Result<Var> {
        self.record_combination(graph, z0, z1, t, Self::dalpha, Self::dbeta)
    }

    fn record_combination(
        self,
        graph: &mut Graph,
        z0: Var,
        z1: Var,
        t: &[f64],
        a: fn(Self, f64) -> f64,
        b: fn(Self, f64) -> f64,
    ) -> Result<Var> {
        for &ti in t {
            check_time(ti)?;
        }
        let fa: Vec<f64> = t.iter().map(|&ti| a(self, ti)).collect();
        let fb: Vec<f64> = t.iter().map(|&ti| b(self, ti)).collect();
        let left = graph.scale_rows(z0, &fa)?;
        let right = graph.scale_rows(z1, &fb)?;
        graph.add(left, right)
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

fn combine(z0: &Tensor, z1: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    z0.zip_map(z1, "interpolate", |x, y| a * x + b * y)
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "concave" => Ok(Schedule::Concave),
            "convex" => Ok(Schedule::Convex),
            other => Err(Error::UnknownSchedule(other.to_string())),
        }
    }
}
