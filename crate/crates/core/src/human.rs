//! The simulated human agent and the estimator that infers its desire.
//!
//! The simulated human holds a hidden [`HumanProfile`]; the automation only
//! ever sees [`Observation`]s of executed behavior (and, during negotiation,
//! the human's offers). [`estimate_desire`] recovers the human's goal and the
//! remaining motion duration by fitting the planner's own quintic family to
//! an observation window.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{
    min_jerk_profile, min_jerk_profile_rate, quintic_point_to_point, samples_for, BoundaryState,
    QuinticSegment, Sample, Trajectory, Vec2,
};

/// Velocities below this (m/s) everywhere in a window mean "not moving".
pub const STILL_SPEED: f64 = 1e-6;

/// Minimum number of observations [`estimate_desire`] accepts.
pub const MIN_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanProfile {
    pub desired_goal: Vec2,
    pub desired_duration: f64,
    /// Willingness to concede per negotiation round, in `[0, 1]`.
    pub compliance: f64,
    /// Standard deviation of position observation noise (m).
    #[serde(default)]
    pub noise_std: f64,
}

impl HumanProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.compliance) {
            return Err(Error::invalid(format!(
                "compliance must lie in [0, 1], got {}",
                self.compliance
            )));
        }
        if !(self.desired_duration.is_finite() && self.desired_duration > 0.0) {
            return Err(Error::invalid("desired_duration must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !self.desired_goal.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("desired_goal must be finite"));
        }
        Ok(())
    }
}

/// The human's ground-truth desire: a rest-to-rest quintic from the start
/// position to the desired goal.
pub fn human_desire(profile: &HumanProfile, start: &BoundaryState, dt: f64) -> Result<Trajectory> {
    profile.validate()?;
    quintic_point_to_point(
        BoundaryState::at_rest(start.p),
        BoundaryState::at_rest(profile.desired_goal),
        profile.desired_duration,
        dt,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub state: Sample,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec2>,
}

/// Observes the first `count` samples of `behavior`, adding Gaussian noise
/// of standard deviation `noise_std` to the positions.
pub fn observe<R: Rng + ?Sized>(
    behavior: &Trajectory,
    count: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let noise = Normal::new(0.0, noise_std.max(0.0))
        .map_err(|e| Error::invalid(format!("noise_std: {e}")))?;
    Ok(behavior
        .samples()
        .iter()
        .take(count)
        .enumerate()
        .map(|(k, s)| {
            let mut state = *s;
            if noise_std > 0.0 {
                state.p += Vec2::new(noise.sample(rng), noise.sample(rng));
            }
            Observation {
                time: k as f64 * behavior.dt(),
                state,
                control: None,
            }
        })
        .collect())
}

/// Search interval for the remaining motion duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationRange {
    pub min: f64,
    pub max: f64,
}

impl DurationRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min > 0.0 && max >= min) {
            return Err(Error::invalid(format!("bad duration range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedDesire {
    /// Estimated desire, starting at the window's first observation.
    pub trajectory: Trajectory,
    pub goal_estimate: Vec2,
    /// Remaining motion duration from the start of the window (s).
    pub duration_estimate: f64,
    /// RMS position residual of the fit (m).
    pub residual: f64,
    pub degenerate: bool,
}

/// Basis weights of a quintic ending at rest, as a function of `τ`:
/// `p(τ) = b_p·p0 + b_v·D·v0 + b_a·D²·a0 + b_g·goal`.
fn quintic_basis(tau: f64) -> [f64; 4] {
    let t = tau.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let s = min_jerk_profile(t);
    [
        1.0 - s,
        t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
        0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
        s,
    ]
}

struct Fit {
    sse: f64,
    accel: Vec2,
    goal: Vec2,
}

/// Least-squares fit of (start acceleration, goal) for a fixed remaining
/// duration. `rel` holds positions relative to the first observation.
fn fit_for_duration(offsets: &[f64], rel: &[Vec2], v0: Vec2, duration: f64) -> Fit {
    // Normal equations for the two shared basis columns.
    let (mut saa, mut sag, mut sgg) = (0.0, 0.0, 0.0);
    let (mut ya, mut yg) = (Vec2::zeros(), Vec2::zeros());
    let d2 = duration * duration;
    let rows: Vec<(f64, f64, Vec2)> = offsets
        .iter()
        .zip(rel)
        .map(|(&s, &p)| {
            let [_, bv, ba, bg] = quintic_basis(s / duration);
            let y = p - v0 * (bv * duration);
            (ba * d2, bg, y)
        })
        .collect();
    for &(a, g, y) in &rows {
        saa += a * a;
        sag += a * g;
        sgg += g * g;
        ya += y * a;
        yg += y * g;
    }
    let det = saa * sgg - sag * sag;
    let (accel, goal) = if det.abs() > 1e-14 * (saa * sgg).max(f64::MIN_POSITIVE) {
        (
            (ya * sgg - yg * sag) / det,
            (yg * saa - ya * sag) / det,
        )
    } else if sgg > 0.0 {
        (Vec2::zeros(), yg / sgg)
    } else {
        (Vec2::zeros(), Vec2::zeros())
    };
    let sse = rows
        .iter()
        .map(|&(a, g, y)| (y - accel * a - goal * g).norm_squared())
        .sum();
    Fit { sse, accel, goal }
}

/// Estimates the human's desire from a window of uniformly timed observations.
pub fn estimate_desire(
    window: &[Observation],
    dt: f64,
    range: DurationRange,
) -> Result<EstimatedDesire> {
    if window.len() < MIN_WINDOW {
        return Err(Error::invalid(format!(
            "estimation window needs at least {MIN_WINDOW} observations, got {}",
            window.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let t0 = window[0].time;
    let h = window[1].time - t0;
    if !(h > 0.0) {
        return Err(Error::invalid("observation times must increase"));
    }
    for (k, obs) in window.iter().enumerate() {
        let expected = t0 + k as f64 * h;
        if (obs.time - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "observation {k} at t={} breaks the uniform spacing {h}",
                obs.time
            )));
        }
    }

    let first = window[0].state;
    let last = window[window.len() - 1].state;
    let span = window.len() as f64 * h;
    if window.iter().all(|o| o.state.v.norm() < STILL_SPEED) {
        let n = samples_for(span, dt).max(2);
        let trajectory = Trajectory::constant(last.p, dt, n)?;
        let residual = rms(window.iter().map(|o| (o.state.p - last.p).norm_squared()));
        return Ok(EstimatedDesire {
            trajectory,
            goal_estimate: last.p,
            duration_estimate: 0.0,
            residual,
            degenerate: true,
        });
    }

    let offsets: Vec<f64> = (0..window.len()).map(|k| k as f64 * h).collect();
    let rel: Vec<Vec2> = window.iter().map(|o| o.state.p - first.p).collect();
    let v0 = first.v;
    let sse_at = |d: f64| fit_for_duration(&offsets, &rel, v0, d).sse;

    // Coarse scan, then golden-section refinement around the best cell.
    const GRID: usize = 64;
    let grid: Vec<f64> = (0..=GRID)
        .map(|i| range.min + (range.max - range.min) * i as f64 / GRID as f64)
        .collect();
    let best = grid
        .iter()
        .enumerate()
        .map(|(i, &d)| (i, sse_at(d)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(GRID)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (sse_at(x1), sse_at(x2));
    while hi - lo > 1e-12 * hi {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = sse_at(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = sse_at(x2);
        }
    }
    let duration = 0.5 * (lo + hi);
    let fit = fit_for_duration(&offsets, &rel, v0, duration);
    let goal = first.p + fit.goal;

    let segment = QuinticSegment::new(
        BoundaryState::new(first.p, v0, fit.accel),
        BoundaryState::at_rest(goal),
        duration,
    )?;
    let trajectory = segment.sample_grid(dt, samples_for(duration, dt).max(2))?;
    Ok(EstimatedDesire {
        trajectory,
        goal_estimate: goal,
        duration_estimate: duration,
        residual: (fit.sse / window.len() as f64).sqrt(),
        degenerate: false,
    })
}

fn rms(squares: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = squares.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (sum / n.max(1) as f64).sqrt()
}

/// Sliding-window online estimator: re-fits on every pushed observation.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    capacity: usize,
    dt: f64,
    range: DurationRange,
    window: VecDeque<Observation>,
}

impl OnlineEstimator {
    pub fn new(capacity: usize, dt: f64, range: DurationRange) -> Result<Self> {
        if capacity < MIN_WINDOW {
            return Err(Error::invalid(format!(
                "window capacity must be at least {MIN_WINDOW}"
            )));
        }
        Ok(Self {
            capacity,
            dt,
            range,
            window: VecDeque::with_capacity(capacity),
        })
    }

    /// Adds an observation and returns the refreshed estimate once the
    /// window holds enough samples.
    pub fn push(&mut self, obs: Observation) -> Result<Option<EstimatedDesire>> {
        if let Some(prev) = self.window.back() {
            if obs.time < prev.time {
                return Err(Error::invalid("observation times must be non-decreasing"));
            }
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(obs);
        if self.window.len() < MIN_WINDOW {
            return Ok(None);
        }
        let window: Vec<Observation> = self.window.iter().copied().collect();
        estimate_desire(&window, self.dt, self.range).map(Some)
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// Displacement field produced by a human pushing on `current_ref` with
/// `force` at sample `at_index`.
///
/// The shape is a unit-peak minimum-jerk bump: it rises from zero at the
/// first sample to one at `at_index` and falls back to zero at the last
/// sample, so the deformed reference keeps its endpoints. The result is
/// linear in `force`.
pub fn deformation_desire(
    current_ref: &Trajectory,
    force: Vec2,
    at_index: usize,
) -> Result<Trajectory> {
    let n = current_ref.len();
    if at_index == 0 || at_index >= n - 1 {
        return Err(Error::invalid(format!(
            "deformation index {at_index} must be interior to 0..{}",
            n - 1
        )));
    }
    if !force.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("force must be finite"));
    }
    let dt = current_ref.dt();
    let rise = at_index as f64;
    let fall = (n - 1 - at_index) as f64;
    let samples = (0..n)
        .map(|k| {
            let (b, db) = if k <= at_index {
                let tau = k as f64 / rise;
                (min_jerk_profile(tau), min_jerk_profile_rate(tau) / (rise * dt))
            } else {
                let tau = (n - 1 - k) as f64 / fall;
                (min_jerk_profile(tau), -min_jerk_profile_rate(tau) / (fall * dt))
            };
            Sample::new(force * b, force * db)
        })
        .collect();
    Trajectory::new(dt, samples)
}
