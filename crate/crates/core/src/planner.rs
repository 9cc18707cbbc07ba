//! Automation-side trajectory planning.
//!
//! The planner minimizes a quadratic cost over the sampled positions of a
//! trajectory that starts from a given boundary state and comes to rest:
//!
//! ```text
//! J = w_jerk   · Σ ‖jerk_k‖² · dt
//!   + w_effort · Σ ‖acc_k‖²  · dt
//!   + w_goal   · ‖p_end − goal‖²
//!   + w_time   · t_exec
//! ```
//!
//! with jerk and acceleration taken as third and second finite differences
//! of position. The first three samples are pinned by the start state and
//! the last three share one free terminal position (rest at the end), so
//! for fixed execution time the problem is an unconstrained convex QP in
//! the interior positions plus the terminal position, solved by a Cholesky
//! factorization. A positive `w_time` adds an outer golden-section search
//! over the execution time; the trajectory then rests at its terminal
//! position until the horizon.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arbitration::SafetyEnvelope;
use crate::error::{Error, Result};
use crate::trajectory::{samples_for, BoundaryState, Trajectory, Vec2};

/// Positions closer than this to the final one count as arrived.
const ARRIVAL_TOL: f64 = 1e-9;

/// Smallest number of samples the QP accepts: three pinned by the start,
/// three sharing the terminal position.
pub const MIN_SAMPLES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(default)]
    pub w_jerk: f64,
    #[serde(default)]
    pub w_goal: f64,
    #[serde(default)]
    pub w_time: f64,
    #[serde(default)]
    pub w_effort: f64,
    pub goal: Vec2,
    /// Planning horizon in seconds.
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corridor: Option<SafetyEnvelope>,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_jerk, self.w_goal, self.w_time, self.w_effort];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("cost weights must be finite and non-negative"));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one cost weight must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !self.goal.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("goal must be finite"));
        }
        if let Some(c) = &self.corridor {
            c.validate()?;
        }
        Ok(())
    }

    /// Same weights multiplied by `k`.
    pub fn scaled(&self, k: f64) -> CostSpec {
        CostSpec {
            w_jerk: self.w_jerk * k,
            w_goal: self.w_goal * k,
            w_time: self.w_time * k,
            w_effort: self.w_effort * k,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerOutput {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// Relative residual of the normal equations of the final QP solve.
    pub kkt_residual: f64,
    /// Time at which the planned motion comes to rest.
    pub execution_time: f64,
}

/// Breakdown of [`evaluate_cost`] by term (weights already applied).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub jerk: f64,
    pub effort: f64,
    pub goal: f64,
    pub time: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.jerk + self.effort + self.goal + self.time
    }
}

/// Time until the trajectory reaches its final position for good.
pub fn execution_time(t: &Trajectory) -> f64 {
    let end = t.last().p;
    match t
        .samples()
        .iter()
        .rposition(|s| (s.p - end).norm() > ARRIVAL_TOL)
    {
        Some(k) => (k + 1) as f64 * t.dt(),
        None => 0.0,
    }
}

pub fn cost_terms(t: &Trajectory, cost: &CostSpec) -> CostTerms {
    let dt = t.dt();
    let p: Vec<Vec2> = t.positions().collect();
    let jerk: f64 = p
        .windows(4)
        .map(|w| ((w[3] - w[2] * 3.0 + w[1] * 3.0 - w[0]) / dt.powi(3)).norm_squared())
        .sum::<f64>()
        * dt;
    let effort: f64 = p
        .windows(3)
        .map(|w| ((w[2] - w[1] * 2.0 + w[0]) / (dt * dt)).norm_squared())
        .sum::<f64>()
        * dt;
    CostTerms {
        jerk: cost.w_jerk * jerk,
        effort: cost.w_effort * effort,
        goal: cost.w_goal * (t.last().p - cost.goal).norm_squared(),
        time: cost.w_time * execution_time(t),
    }
}

/// Cost of an arbitrary trajectory under `cost`.
pub fn evaluate_cost(t: &Trajectory, cost: &CostSpec) -> f64 {
    cost_terms(t, cost).total()
}

/// Plans the automation's desired trajectory over `cost.horizon`.
pub fn plan(start: &BoundaryState, cost: &CostSpec, dt: f64) -> Result<PlannerOutput> {
    cost.validate()?;
    if !start.is_finite() {
        return Err(Error::invalid("start state must be finite"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let n = samples_for(cost.horizon, dt);
    if ((n - 1) as f64 * dt - cost.horizon).abs() > 1e-6 * cost.horizon.max(dt) {
        return Err(Error::invalid(format!(
            "dt {dt} does not divide the horizon {}",
            cost.horizon
        )));
    }
    if n < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "horizon {} too short: needs at least {MIN_SAMPLES} samples at dt={dt}",
            cost.horizon
        )));
    }
    if cost.w_jerk == 0.0 && cost.w_effort == 0.0 {
        return Err(Error::invalid(
            "singular planning problem: w_jerk or w_effort must be positive",
        ));
    }

    if cost.w_time == 0.0 {
        return solve_fixed(start, cost, dt, n, n);
    }

    // Golden-section over the number of motion samples. The objective is
    // evaluated on the integer grid, so results are memoized by sample count.
    let mut memo: BTreeMap<usize, PlannerOutput> = BTreeMap::new();
    let mut eval = |m: usize| -> Result<f64> {
        if let Some(out) = memo.get(&m) {
            return Ok(out.cost);
        }
        let out = solve_fixed(start, cost, dt, m, n)?;
        let c = out.cost;
        memo.insert(m, out);
        Ok(c)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (MIN_SAMPLES as f64, n as f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = eval(x1.round() as usize)?;
    let mut f2 = eval(x2.round() as usize)?;
    while hi - lo > 1.0 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1.round() as usize)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2.round() as usize)?;
        }
    }
    for m in [lo.floor() as usize, lo.ceil() as usize, hi.ceil() as usize] {
        eval(m.clamp(MIN_SAMPLES, n))?;
    }
    let best = memo
        .into_values()
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("at least one evaluation");
    Ok(best)
}

/// Where each of the `n` positions comes from.
#[derive(Clone, Copy)]
enum Slot {
    Fixed(usize),
    Var(usize),
}

/// Solves the fixed-time QP with `m` motion samples, resting for the
/// remaining `n - m` samples.
fn solve_fixed(
    start: &BoundaryState,
    cost: &CostSpec,
    dt: f64,
    m: usize,
    n: usize,
) -> Result<PlannerOutput> {
    debug_assert!(m >= MIN_SAMPLES && m <= n);
    // Solved relative to the start position, which keeps the system well
    // scaled and makes a start at the goal exactly stationary.
    let origin = start.p;
    let fixed = [
        Vec2::zeros(),
        start.v * dt + start.a * (0.5 * dt * dt),
        start.v * (2.0 * dt) + start.a * (2.0 * dt * dt),
    ];
    let goal = cost.goal - origin;
    // interior variables 3..=m-4, then the terminal position
    let n_interior = m - 6;
    let q = n_interior;
    let nv = n_interior + 1;
    let slot = |k: usize| -> Slot {
        if k < 3 {
            Slot::Fixed(k)
        } else if k + 3 < m {
            Slot::Var(k - 3)
        } else {
            Slot::Var(q)
        }
    };

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut rhs = DMatrix::<f64>::zeros(nv, 2);

    // Each difference row r contributes weight·(a·x + c)² per axis.
    let mut add_rows = |stencil: &[f64], weight: f64| {
        if weight == 0.0 {
            return;
        }
        let width = stencil.len();
        for row in 0..=(n - width) {
            let mut coeff: Vec<(usize, f64)> = Vec::with_capacity(width);
            let mut c = Vec2::zeros();
            for (j, &s) in stencil.iter().enumerate() {
                match slot(row + j) {
                    Slot::Fixed(i) => c += fixed[i] * s,
                    Slot::Var(v) => match coeff.iter_mut().find(|(idx, _)| *idx == v) {
                        Some(e) => e.1 += s,
                        None => coeff.push((v, s)),
                    },
                }
            }
            for &(i, ai) in &coeff {
                for &(j, aj) in &coeff {
                    h[(i, j)] += weight * ai * aj;
                }
                rhs[(i, 0)] -= weight * ai * c.x;
                rhs[(i, 1)] -= weight * ai * c.y;
            }
        }
    };
    add_rows(&[-1.0, 3.0, -3.0, 1.0], cost.w_jerk / dt.powi(5));
    add_rows(&[1.0, -2.0, 1.0], cost.w_effort / dt.powi(3));
    h[(q, q)] += cost.w_goal;
    rhs[(q, 0)] += cost.w_goal * goal.x;
    rhs[(q, 1)] += cost.w_goal * goal.y;

    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("planning problem is not positive definite"))?;
    let x = chol.solve(&rhs);

    let residual = {
        let r = &h * &x - &rhs;
        r.norm() / (h.norm() * x.norm() + rhs.norm()).max(f64::MIN_POSITIVE)
    };

    let positions: Vec<Vec2> = (0..n)
        .map(|k| match slot(k) {
            Slot::Fixed(i) => origin + fixed[i],
            Slot::Var(v) => origin + Vec2::new(x[(v, 0)], x[(v, 1)]),
        })
        .collect();
    let mut samples = Trajectory::from_positions(dt, &positions)?.into_samples();
    samples[0].v = start.v;
    let trajectory = Trajectory::new(dt, samples)?;
    let cost_value = evaluate_cost(&trajectory, cost);
    Ok(PlannerOutput {
        execution_time: execution_time(&trajectory),
        trajectory,
        cost: cost_value,
        kkt_residual: residual,
    })
}
