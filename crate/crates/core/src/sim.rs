//! Execution of two references on a shared double-integrator plant.
//!
//! The human and the automation each run a PD tracking controller on their
//! own reference; the plant integrates the sum of both inputs. When the
//! references differ the inputs end up opposing each other, which is
//! measured by the conflict metric `max(0, −u_H · u_A)`.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Sample, Trajectory, Vec2};

/// Header of the CSV trace export.
pub const TRACE_HEADER: [&str; 10] = ["t", "px", "py", "vx", "vy", "uHx", "uHy", "uAx", "uAy", "conflict"];

/// Fraction of the trace (at the end) averaged for steady-state values.
pub const STEADY_STATE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub state: Sample,
    pub dt_sim: f64,
}

impl Plant {
    pub fn new(state: Sample, dt_sim: f64) -> Result<Self> {
        if !(dt_sim.is_finite() && dt_sim > 0.0) {
            return Err(Error::invalid(format!("dt_sim must be positive, got {dt_sim}")));
        }
        Ok(Self { state, dt_sim })
    }

    /// Semi-implicit Euler: velocity first, then position with the new velocity.
    pub fn step(&mut self, u: Vec2) {
        self.state.v += u * self.dt_sim;
        self.state.p += self.state.v * self.dt_sim;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        if self.kp.is_finite() && self.kd.is_finite() && self.kp > 0.0 && self.kd > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("controller gains must be positive"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub gains: Gains,
    pub reference: Arc<Trajectory>,
    pub u_max: Option<f64>,
}

impl Controller {
    pub fn new(gains: Gains, reference: impl Into<Arc<Trajectory>>) -> Result<Self> {
        gains.validate()?;
        Ok(Self {
            gains,
            reference: reference.into(),
            u_max: None,
        })
    }

    pub fn with_saturation(mut self, u_max: f64) -> Self {
        self.u_max = Some(u_max);
        self
    }

    /// PD law on the reference at time `t`; past the end of the reference
    /// its final sample is held.
    pub fn control(&self, t: f64, x: &Sample) -> Vec2 {
        let r = self.reference.sample_at(t);
        let u = -(x.p - r.p) * self.gains.kp - (x.v - r.v) * self.gains.kd;
        match self.u_max {
            Some(max) if u.norm() > max => u * (max / u.norm()),
            _ => u,
        }
    }
}

pub fn conflict(u_h: &Vec2, u_a: &Vec2) -> f64 {
    (-u_h.dot(u_a)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: f64,
    pub x: Sample,
    pub u_h: Vec2,
    pub u_a: Vec2,
    pub conflict: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub dt_sim: f64,
    pub ticks: Vec<Tick>,
}

impl ExecutionTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for k in &self.ticks {
            let row = [
                k.t, k.x.p.x, k.x.p.y, k.x.v.x, k.x.v.y, k.u_h.x, k.u_h.y, k.u_a.x, k.u_a.y,
                k.conflict,
            ];
            out.write_record(row.iter().map(|x| x.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// The ticks averaged for steady-state values.
    pub fn steady_state_ticks(&self) -> &[Tick] {
        let n = self.ticks.len();
        let tail = ((n as f64 * STEADY_STATE_FRACTION).ceil() as usize).clamp(1, n.max(1));
        &self.ticks[n - tail..]
    }
}

/// Number of integration steps for `duration`.
pub fn tick_count(duration: f64, dt_sim: f64) -> usize {
    (duration / dt_sim).round() as usize
}

/// Lazily simulates the coupled plant, yielding one tick per step.
/// Ticks are emitted at `t = k·dt_sim` for `k = 0..=steps`, before the
/// step's input is applied.
pub struct Simulation {
    plant: Plant,
    ctrl_h: Controller,
    ctrl_a: Controller,
    steps: usize,
    k: usize,
    failed: bool,
}

impl Simulation {
    pub fn new(plant: Plant, ctrl_h: Controller, ctrl_a: Controller, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(Error::invalid("simulation duration must be non-negative"));
        }
        Ok(Self {
            steps: tick_count(duration, plant.dt_sim),
            plant,
            ctrl_h,
            ctrl_a,
            k: 0,
            failed: false,
        })
    }
}

impl Iterator for Simulation {
    type Item = Result<Tick>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.k > self.steps {
            return None;
        }
        let t = self.k as f64 * self.plant.dt_sim;
        let x = self.plant.state;
        let u_h = self.ctrl_h.control(t, &x);
        let u_a = self.ctrl_a.control(t, &x);
        let finite = x.p.iter().chain(x.v.iter()).chain(u_h.iter()).chain(u_a.iter()).all(|v| v.is_finite());
        if !finite {
            self.failed = true;
            return Some(Err(Error::Diverged { tick: self.k }));
        }
        self.plant.step(u_h + u_a);
        self.k += 1;
        Some(Ok(Tick {
            t,
            x,
            u_h,
            u_a,
            conflict: conflict(&u_h, &u_a),
        }))
    }
}

pub fn simulate(plant: Plant, ctrl_h: Controller, ctrl_a: Controller, duration: f64) -> Result<ExecutionTrace> {
    let dt_sim = plant.dt_sim;
    let ticks = Simulation::new(plant, ctrl_h, ctrl_a, duration)?.collect::<Result<Vec<_>>>()?;
    Ok(ExecutionTrace { dt_sim, ticks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub mean_conflict: f64,
    pub max_conflict: f64,
    pub steady_state_conflict: f64,
    pub energy_h: f64,
    pub energy_a: f64,
    pub steady_state_position: Vec2,
    pub steady_state_u_h: Vec2,
    pub steady_state_u_a: Vec2,
    /// RMS position error against the human's own desire, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_rms_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_rms_a: Option<f64>,
}

fn mean_vec(ticks: &[Tick], f: impl Fn(&Tick) -> Vec2) -> Vec2 {
    ticks.iter().map(f).sum::<Vec2>() / ticks.len().max(1) as f64
}

pub fn conflict_report(trace: &ExecutionTrace) -> ConflictReport {
    let n = trace.ticks.len().max(1) as f64;
    let ss = trace.steady_state_ticks();
    ConflictReport {
        mean_conflict: trace.ticks.iter().map(|k| k.conflict).sum::<f64>() / n,
        max_conflict: trace.ticks.iter().map(|k| k.conflict).fold(0.0, f64::max),
        steady_state_conflict: ss.iter().map(|k| k.conflict).sum::<f64>() / ss.len().max(1) as f64,
        energy_h: trace.ticks.iter().map(|k| k.u_h.norm_squared()).sum::<f64>() * trace.dt_sim,
        energy_a: trace.ticks.iter().map(|k| k.u_a.norm_squared()).sum::<f64>() * trace.dt_sim,
        steady_state_position: mean_vec(ss, |k| k.x.p),
        steady_state_u_h: mean_vec(ss, |k| k.u_h),
        steady_state_u_a: mean_vec(ss, |k| k.u_a),
        tracking_rms_h: None,
        tracking_rms_a: None,
    }
}

/// RMS position error of the executed motion against `desire`.
pub fn tracking_rms(trace: &ExecutionTrace, desire: &Trajectory) -> f64 {
    let sum: f64 = trace
        .ticks
        .iter()
        .map(|k| (k.x.p - desire.sample_at(k.t).p).norm_squared())
        .sum();
    (sum / trace.ticks.len().max(1) as f64).sqrt()
}

impl ConflictReport {
    pub fn with_tracking(mut self, trace: &ExecutionTrace, desire_h: &Trajectory, desire_a: &Trajectory) -> Self {
        self.tracking_rms_h = Some(tracking_rms(trace, desire_h));
        self.tracking_rms_a = Some(tracking_rms(trace, desire_a));
        self
    }
}
