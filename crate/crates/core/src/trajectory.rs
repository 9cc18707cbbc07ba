//! Uniformly sampled planar trajectories and the quintic generator.
//!
//! A [`Trajectory`] is the common currency between every other module: the
//! automation's desire, the estimated human desire, displacement fields and
//! fused references are all trajectories. Pointwise operations require the
//! operands to be *compatible* (same sample count and the same `dt`);
//! [`resample`] is the explicit adapter between grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;

/// Relative tolerance used when comparing sample periods.
const DT_REL_TOL: f64 = 1e-12;

/// One trajectory sample: position (m) and velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub p: Vec2,
    pub v: Vec2,
}

impl Sample {
    pub fn new(p: Vec2, v: Vec2) -> Self {
        Self { p, v }
    }

    pub fn at_rest(p: Vec2) -> Self {
        Self { p, v: Vec2::zeros() }
    }

    fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Position, velocity and acceleration at a segment boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub p: Vec2,
    #[serde(default = "Vec2::zeros")]
    pub v: Vec2,
    #[serde(default = "Vec2::zeros")]
    pub a: Vec2,
}

impl BoundaryState {
    pub fn new(p: Vec2, v: Vec2, a: Vec2) -> Self {
        Self { p, v, a }
    }

    pub fn at_rest(p: Vec2) -> Self {
        Self {
            p,
            v: Vec2::zeros(),
            a: Vec2::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(self.v.iter())
            .chain(self.a.iter())
            .all(|x| x.is_finite())
    }
}

/// A uniformly sampled trajectory with at least two samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    dt: f64,
    samples: Vec<Sample>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    dt: f64,
    samples: Vec<Sample>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::new(raw.dt, raw.samples)
    }
}

impl Trajectory {
    pub fn new(dt: f64, samples: Vec<Sample>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { dt, samples })
    }

    /// A trajectory resting at `p` for `n` samples.
    pub fn constant(p: Vec2, dt: f64, n: usize) -> Result<Self> {
        Self::new(dt, vec![Sample::at_rest(p); n])
    }

    /// Builds a trajectory from positions only, deriving velocities by
    /// finite differences (central in the interior, one-sided at the ends).
    pub fn from_positions(dt: f64, positions: &[Vec2]) -> Result<Self> {
        let n = positions.len();
        if n < 2 {
            return Err(Error::invalid("trajectory needs at least 2 samples"));
        }
        let samples = (0..n)
            .map(|k| {
                let v = if k == 0 {
                    (positions[1] - positions[0]) / dt
                } else if k == n - 1 {
                    (positions[n - 1] - positions[n - 2]) / dt
                } else {
                    (positions[k + 1] - positions[k - 1]) / (2.0 * dt)
                };
                Sample::new(positions[k], v)
            })
            .collect();
        Self::new(dt, samples)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; a trajectory has at least two samples.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn duration(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.samples.iter().map(|s| s.p)
    }

    pub fn is_compatible(&self, other: &Trajectory) -> bool {
        self.samples.len() == other.samples.len()
            && (self.dt - other.dt).abs() <= DT_REL_TOL * self.dt.max(other.dt)
    }

    pub fn ensure_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::Incompatible {
                left_len: self.len(),
                left_dt: self.dt,
                right_len: other.len(),
                right_dt: other.dt,
            })
        }
    }

    /// Combines two compatible trajectories sample by sample.
    pub fn zip_with(
        &self,
        other: &Trajectory,
        mut f: impl FnMut(&Sample, &Sample) -> Sample,
    ) -> Result<Trajectory> {
        self.ensure_compatible(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| f(a, b))
            .collect();
        Trajectory::new(self.dt, samples)
    }

    /// `(1 - w) * self + w * other`, applied to positions and velocities.
    /// The endpoints `w = 0` and `w = 1` return the inputs bit for bit.
    pub fn lerp(&self, other: &Trajectory, w: f64) -> Result<Trajectory> {
        self.ensure_compatible(other)?;
        if w == 0.0 {
            return Ok(self.clone());
        }
        if w == 1.0 {
            return Ok(other.clone());
        }
        self.zip_with(other, |a, b| {
            Sample::new(a.p * (1.0 - w) + b.p * w, a.v * (1.0 - w) + b.v * w)
        })
    }

    /// Sample-wise `self + gain * delta`.
    pub fn add_scaled(&self, delta: &Trajectory, gain: f64) -> Result<Trajectory> {
        self.zip_with(delta, |a, d| Sample::new(a.p + d.p * gain, a.v + d.v * gain))
    }

    /// Linear interpolation at time `t` (seconds from the first sample).
    /// Times outside the trajectory hold the nearest endpoint.
    pub fn sample_at(&self, t: f64) -> Sample {
        if t <= 0.0 {
            return self.samples[0];
        }
        let x = t / self.dt;
        let i = x.floor() as usize;
        if i >= self.samples.len() - 1 {
            return *self.last();
        }
        let frac = x - i as f64;
        if frac <= 0.0 {
            return self.samples[i];
        }
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        Sample::new(a.p + (b.p - a.p) * frac, a.v + (b.v - a.v) * frac)
    }

    /// Accelerations by forward differences of the stored velocities
    /// (the last entry repeats the previous one).
    pub fn accelerations(&self) -> Vec<Vec2> {
        let n = self.samples.len();
        let mut acc: Vec<Vec2> = self
            .samples
            .windows(2)
            .map(|w| (w[1].v - w[0].v) / self.dt)
            .collect();
        acc.push(acc[n - 2]);
        acc
    }

    /// Pads by holding the final position at rest, or truncates, to exactly
    /// `n` samples.
    pub fn fit_to_len(&self, n: usize) -> Result<Trajectory> {
        if n < 2 {
            return Err(Error::invalid("trajectory needs at least 2 samples"));
        }
        let mut samples = self.samples.clone();
        if n <= samples.len() {
            samples.truncate(n);
        } else {
            let hold = Sample::at_rest(self.last().p);
            samples.resize(n, hold);
        }
        Trajectory::new(self.dt, samples)
    }

    /// Translates every position by `offset`.
    pub fn translated(&self, offset: Vec2) -> Trajectory {
        Trajectory {
            dt: self.dt,
            samples: self
                .samples
                .iter()
                .map(|s| Sample::new(s.p + offset, s.v))
                .collect(),
        }
    }
}

/// Rest-to-rest minimum-jerk position profile `10τ³ − 15τ⁴ + 6τ⁵`.
pub fn min_jerk_profile(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Time derivative of [`min_jerk_profile`] with respect to `τ`.
pub fn min_jerk_profile_rate(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

/// A quintic polynomial per axis meeting position, velocity and
/// acceleration at both ends of a segment of duration `duration`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuinticSegment {
    start: BoundaryState,
    goal: BoundaryState,
    duration: f64,
    // Coefficients in normalized time τ = t / duration, per axis.
    coeffs: [[f64; 6]; 2],
}

impl QuinticSegment {
    pub fn new(start: BoundaryState, goal: BoundaryState, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::invalid(format!(
                "segment duration must be positive, got {duration}"
            )));
        }
        if !start.is_finite() || !goal.is_finite() {
            return Err(Error::invalid("boundary states must be finite"));
        }
        let t = duration;
        let t2 = t * t;
        let mut coeffs = [[0.0; 6]; 2];
        for (axis, c) in coeffs.iter_mut().enumerate() {
            let (p0, v0, a0) = (start.p[axis], start.v[axis] * t, start.a[axis] * t2);
            let (p1, v1, a1) = (goal.p[axis], goal.v[axis] * t, goal.a[axis] * t2);
            let d = p1 - p0;
            *c = [
                p0,
                v0,
                0.5 * a0,
                10.0 * d - 6.0 * v0 - 4.0 * v1 - 0.5 * (3.0 * a0 - a1),
                -15.0 * d + 8.0 * v0 + 7.0 * v1 + 0.5 * (3.0 * a0 - 2.0 * a1),
                6.0 * d - 3.0 * v0 - 3.0 * v1 - 0.5 * (a0 - a1),
            ];
        }
        Ok(Self {
            start,
            goal,
            duration,
            coeffs,
        })
    }

    pub fn rest_to_rest(from: Vec2, to: Vec2, duration: f64) -> Result<Self> {
        Self::new(
            BoundaryState::at_rest(from),
            BoundaryState::at_rest(to),
            duration,
        )
    }

    pub fn start(&self) -> &BoundaryState {
        &self.start
    }

    pub fn goal(&self) -> &BoundaryState {
        &self.goal
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    fn eval(&self, tau: f64, order: usize) -> Vec2 {
        let scale = self.duration.powi(order as i32);
        let mut out = Vec2::zeros();
        for axis in 0..2 {
            let c = &self.coeffs[axis];
            let mut acc = 0.0;
            for i in (order..6).rev() {
                // falling factorial i!/(i-order)!
                let f: f64 = (0..order).map(|j| (i - j) as f64).product();
                acc = acc * tau + f * c[i];
            }
            out[axis] = acc / scale;
        }
        out
    }

    /// Position, velocity, acceleration and jerk at normalized time `τ ∈ [0, 1]`.
    pub fn derivative_at_tau(&self, tau: f64, order: usize) -> Vec2 {
        assert!(order <= 5, "quintic has no derivative of order {order}");
        self.eval(tau, order)
    }

    /// State at time `t`. Past the end the segment continues at the goal
    /// velocity; before the start it holds the start sample.
    pub fn sample(&self, t: f64) -> Sample {
        if t <= 0.0 {
            return Sample::new(self.start.p, self.start.v);
        }
        if t >= self.duration {
            let extra = t - self.duration;
            return Sample::new(self.goal.p + self.goal.v * extra, self.goal.v);
        }
        let tau = t / self.duration;
        Sample::new(self.eval(tau, 0), self.eval(tau, 1))
    }

    /// Samples `n` points at `t_k = k·dt`.
    pub fn sample_grid(&self, dt: f64, n: usize) -> Result<Trajectory> {
        let samples = (0..n).map(|k| self.sample(k as f64 * dt)).collect();
        Trajectory::new(dt, samples)
    }
}

/// Number of samples covering `duration` at period `dt`.
pub fn samples_for(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize + 1
}

/// Quintic point-to-point trajectory. `duration` is snapped to the nearest
/// multiple of `dt`; the first and last samples meet the boundary states
/// exactly.
pub fn quintic_point_to_point(
    start: BoundaryState,
    goal: BoundaryState,
    duration: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration}"
        )));
    }
    if duration < 2.0 * dt * (1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "duration {duration} shorter than two samples at dt={dt}"
        )));
    }
    let n = samples_for(duration, dt);
    let effective = (n - 1) as f64 * dt;
    let segment = QuinticSegment::new(start, goal, effective)?;
    let last = (n - 1) as f64;
    let samples = (0..n)
        .map(|k| {
            let tau = k as f64 / last;
            Sample::new(segment.eval(tau, 0), segment.eval(tau, 1))
        })
        .collect();
    Trajectory::new(dt, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    MaxPointwise,
    MeanSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetric {
    pub kind: DistanceKind,
    pub value: f64,
}

/// Position distance between two compatible trajectories.
pub fn distance(a: &Trajectory, b: &Trajectory, kind: DistanceKind) -> Result<TrajectoryMetric> {
    a.ensure_compatible(b)?;
    let gaps = a.samples.iter().zip(&b.samples).map(|(x, y)| (x.p - y.p).norm());
    let value = match kind {
        DistanceKind::MaxPointwise => gaps.fold(0.0, f64::max),
        DistanceKind::MeanSquared => gaps.map(|g| g * g).sum::<f64>() / a.len() as f64,
    };
    Ok(TrajectoryMetric { kind, value })
}

/// Max-pointwise position distance, the agreement distance used throughout.
pub fn max_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    distance(a, b, DistanceKind::MaxPointwise).map(|m| m.value)
}

/// Re-grids `t` at period `dt_new` by linear interpolation of position and
/// velocity. Both endpoints are kept exactly; the new duration is the old
/// one rounded to a multiple of `dt_new`.
pub fn resample(t: &Trajectory, dt_new: f64) -> Result<Trajectory> {
    if !(dt_new.is_finite() && dt_new > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt_new}")));
    }
    if dt_new >= t.duration() {
        return Err(Error::invalid(format!(
            "dt {dt_new} is not shorter than the trajectory duration {}",
            t.duration()
        )));
    }
    if (dt_new - t.dt).abs() <= DT_REL_TOL * t.dt {
        return Ok(t.clone());
    }
    let n = samples_for(t.duration(), dt_new);
    let ratio = dt_new / t.dt;
    let samples = (0..n)
        .map(|k| {
            if k == n - 1 {
                return *t.last();
            }
            let x = k as f64 * ratio;
            let i = x.floor() as usize;
            let frac = x - i as f64;
            if i >= t.len() - 1 {
                return *t.last();
            }
            if frac < 1e-12 {
                return t.samples[i];
            }
            let (a, b) = (&t.samples[i], &t.samples[i + 1]);
            Sample::new(a.p + (b.p - a.p) * frac, a.v + (b.v - a.v) * frac)
        })
        .collect();
    Trajectory::new(dt_new, samples)
}
