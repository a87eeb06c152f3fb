//! Simulated point robot driven by `ẋ = A(x − x*)`.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Arm;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error("gain matrix is not negative definite (largest symmetric-part eigenvalue {0})")]
    NotNegativeDefinite(f64),

    #[error("time step {0} outside (0, 0.1]")]
    BadStep(f64),

    #[error("left and right targets coincide")]
    DegenerateTargets,
}

/// Where each command sends the end effector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMap {
    pub left: [f64; 3],
    pub right: [f64; 3],
    pub home: [f64; 3],
}

impl Default for TargetMap {
    fn default() -> Self {
        TargetMap {
            left: [-0.4, 0.5, 0.2],
            right: [0.4, 0.5, 0.2],
            home: [0.0, 0.3, 0.4],
        }
    }
}

impl TargetMap {
    pub fn new(left: [f64; 3], right: [f64; 3], home: [f64; 3]) -> Result<Self, RobotError> {
        if left == right {
            return Err(RobotError::DegenerateTargets);
        }
        Ok(TargetMap { left, right, home })
    }

    pub fn target(&self, arm: Arm) -> [f64; 3] {
        match arm {
            Arm::Left => self.left,
            Arm::Right => self.right,
        }
    }
}

/// Position, target, gain and time step of the simulated end effector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    x: Vector3<f64>,
    x_star: Vector3<f64>,
    a: Matrix3<f64>,
    dt: f64,
    t: f64,
}

/// Default gain `A = −2I` (1/s).
pub fn default_gain() -> Matrix3<f64> {
    Matrix3::identity() * -2.0
}

/// Default step: one tick per prediction at 160 Hz.
pub const DEFAULT_DT: f64 = 1.0 / 160.0;

impl RobotState {
    /// At rest at `x0` (target = `x0`). `a` must have a negative definite
    /// symmetric part and `dt` lie in `(0, 0.1]`.
    pub fn new(x0: [f64; 3], a: Matrix3<f64>, dt: f64) -> Result<Self, RobotError> {
        let sym = (a + a.transpose()) * 0.5;
        let max = sym.symmetric_eigenvalues().max();
        if !(max < 0.0) {
            return Err(RobotError::NotNegativeDefinite(max));
        }
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(RobotError::BadStep(dt));
        }
        let x = Vector3::from(x0);
        Ok(RobotState {
            x,
            x_star: x,
            a,
            dt,
            t: 0.0,
        })
    }

    pub fn at_home(map: &TargetMap) -> Self {
        RobotState::new(map.home, default_gain(), DEFAULT_DT).expect("defaults are valid")
    }

    pub fn position(&self) -> [f64; 3] {
        self.x.into()
    }

    pub fn target(&self) -> [f64; 3] {
        self.x_star.into()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Distance to the target.
    pub fn distance(&self) -> f64 {
        (self.x - self.x_star).norm()
    }

    /// Retargets immediately, even mid-motion. Position is unchanged.
    pub fn set_target(&mut self, command: Arm, map: &TargetMap) {
        self.x_star = Vector3::from(map.target(command));
    }

    pub fn set_target_point(&mut self, target: [f64; 3]) {
        self.x_star = Vector3::from(target);
    }

    /// One explicit Euler step `x ← x + dt·A(x − x*)`.
    pub fn step(&mut self) {
        let e = self.x - self.x_star;
        self.x += self.a * e * self.dt;
        self.t += self.dt;
    }

    pub fn telemetry(&self) -> Telemetry {
        Telemetry {
            t: self.t,
            x: self.position(),
            x_star: self.target(),
            dist: self.distance(),
        }
    }
}

/// One pose sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub t: f64,
    pub x: [f64; 3],
    pub x_star: [f64; 3],
    pub dist: f64,
}

/// Writes telemetry as newline-delimited JSON.
pub fn write_ndjson<W: Write>(mut out: W, samples: &[Telemetry]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes telemetry as CSV with columns `t,x,y,z,tx,ty,tz,dist`.
pub fn write_csv<W: Write>(mut out: W, samples: &[Telemetry]) -> std::io::Result<()> {
    writeln!(out, "t,x,y,z,tx,ty,tz,dist")?;
    for s in samples {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.t, s.x[0], s.x[1], s.x[2], s.x_star[0], s.x_star[1], s.x_star[2], s.dist
        )?;
    }
    Ok(())
}
