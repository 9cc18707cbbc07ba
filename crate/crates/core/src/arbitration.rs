//! Fusion of the automation's desire with the estimated human desire.

use serde::{Deserialize, Serialize};

use crate::agreement::{
    negotiate, run_ibr, verify_agreement, AgreementCheck, AgreementConfig, IbrOutcome,
    NegotiationSession, Negotiator, OfferSpace, Scheme,
};
use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, Vec2};

/// Lateral band `|y − y_center| ≤ width / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub y_center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SafetyEnvelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corridor: Option<Corridor>,
    #[serde(default)]
    pub obstacles: Vec<Disc>,
}

impl SafetyEnvelope {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.corridor {
            if !(c.width.is_finite() && c.width > 0.0 && c.y_center.is_finite()) {
                return Err(Error::invalid("corridor width must be positive"));
            }
        }
        for d in &self.obstacles {
            if !(d.radius.is_finite() && d.radius > 0.0 && d.center.iter().all(|x| x.is_finite())) {
                return Err(Error::invalid("obstacle radius must be positive"));
            }
        }
        Ok(())
    }

    /// Signed clearance of a single point (negative inside a violation).
    pub fn clearance(&self, p: &Vec2) -> f64 {
        let corridor = self
            .corridor
            .map(|c| 0.5 * c.width - (p.y - c.y_center).abs())
            .unwrap_or(f64::INFINITY);
        self.obstacles
            .iter()
            .map(|d| (p - d.center).norm() - d.radius)
            .fold(corridor, f64::min)
    }

    /// Moves a point into the envelope: clamps it into the corridor and
    /// pushes it radially out of any disc it lies in.
    pub fn project(&self, p: &Vec2) -> Vec2 {
        let clamp = |mut q: Vec2| {
            if let Some(c) = &self.corridor {
                let half = 0.5 * c.width;
                q.y = q.y.clamp(c.y_center - half, c.y_center + half);
            }
            q
        };
        let mut q = clamp(*p);
        for d in &self.obstacles {
            let off = q - d.center;
            let r = off.norm();
            if r < d.radius {
                let dir = if r > 0.0 { off / r } else { Vec2::new(0.0, 1.0) };
                q = clamp(d.center + dir * d.radius);
            }
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub safe: bool,
    pub min_clearance: f64,
}

pub fn check_safety(t: &Trajectory, envelope: &SafetyEnvelope) -> SafetyReport {
    let min_clearance = t
        .positions()
        .map(|p| envelope.clearance(&p))
        .fold(f64::INFINITY, f64::min);
    SafetyReport {
        safe: min_clearance >= 0.0,
        min_clearance,
    }
}

/// Source of the attention weight σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSource {
    Constant { value: f64 },
    /// Piecewise constant: `values[i]` from `times[i]` until the next time.
    Scripted { times: Vec<f64>, values: Vec<f64> },
}

impl SigmaSource {
    pub fn validate(&self) -> Result<()> {
        let values = match self {
            SigmaSource::Constant { value } => std::slice::from_ref(value),
            SigmaSource::Scripted { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::invalid("scripted σ needs matching, non-empty times and values"));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) || !times.iter().all(|t| t.is_finite()) {
                    return Err(Error::invalid("scripted σ times must increase"));
                }
                values.as_slice()
            }
        };
        if values.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("σ must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn sample(&self, t: f64) -> f64 {
        match self {
            SigmaSource::Constant { value } => *value,
            SigmaSource::Scripted { times, values } => {
                let i = times.partition_point(|&s| s <= t);
                values[i.saturating_sub(1)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArbitrationPolicy {
    /// The automation adopts the human estimate wholesale.
    LeaderFollower,
    /// The human estimate, corrected onto the envelope when it leaves it.
    Superimposed { envelope: SafetyEnvelope },
    /// `σ·human + (1 − σ)·automation`.
    AdditiveControlled { sigma_source: SigmaSource },
    /// `automation + μ·Δhuman`.
    AdditiveDeforming { mu: f64 },
    /// Joint trajectory from an agreement process.
    Agreement {
        #[serde(default)]
        config: AgreementConfig,
    },
}

impl ArbitrationPolicy {
    pub fn kind(&self) -> &'static str {
        match self {
            ArbitrationPolicy::LeaderFollower => "leader_follower",
            ArbitrationPolicy::Superimposed { .. } => "superimposed",
            ArbitrationPolicy::AdditiveControlled { .. } => "additive_controlled",
            ArbitrationPolicy::AdditiveDeforming { .. } => "additive_deforming",
            ArbitrationPolicy::Agreement { .. } => "agreement",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArbitrationPolicy::LeaderFollower => Ok(()),
            ArbitrationPolicy::Superimposed { envelope } => envelope.validate(),
            ArbitrationPolicy::AdditiveControlled { sigma_source } => sigma_source.validate(),
            ArbitrationPolicy::AdditiveDeforming { mu } => {
                if mu.is_finite() && *mu >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid("μ must be non-negative"))
                }
            }
            ArbitrationPolicy::Agreement { config } => config.validate(),
        }
    }
}

/// What the human side contributes to arbitration.
#[derive(Debug, Clone, Copy)]
pub enum HumanInput<'a> {
    /// Estimated desired trajectory.
    Estimate(&'a Trajectory),
    /// Displacement field for the deforming policy.
    Deformation(&'a Trajectory),
}

/// Parties for the negotiation scheme of the agreement policy.
#[derive(Debug, Clone)]
pub struct NegotiationParties {
    pub human: Negotiator,
    pub automation: Negotiator,
    pub space: OfferSpace,
}

#[derive(Debug, Clone, Default)]
pub struct ArbitrationContext {
    /// Time at which σ sources are sampled.
    pub time: f64,
    /// Envelope the result is checked against (the superimposed policy
    /// brings its own).
    pub envelope: Option<SafetyEnvelope>,
    pub negotiation: Option<NegotiationParties>,
}

#[derive(Debug, Clone)]
pub enum AgreementOutcome {
    Ibr(IbrOutcome),
    Negotiation(NegotiationSession),
}

impl AgreementOutcome {
    pub fn check(&self) -> AgreementCheck {
        match self {
            AgreementOutcome::Ibr(o) => verify_agreement(o),
            AgreementOutcome::Negotiation(s) => verify_agreement(s),
        }
    }

    pub fn rounds(&self) -> usize {
        match self {
            AgreementOutcome::Ibr(o) => o.state.round,
            AgreementOutcome::Negotiation(s) => s.rounds.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub trajectory: Trajectory,
    pub safe: bool,
    /// Superimposed correction fired.
    pub trigger: bool,
    pub min_clearance: Option<f64>,
    pub agreement: Option<AgreementOutcome>,
}

/// Fuses `t_auto` with the human input under `policy`.
pub fn arbitrate(
    policy: &ArbitrationPolicy,
    t_auto: &Trajectory,
    human: HumanInput<'_>,
    ctx: &ArbitrationContext,
) -> Result<FusionResult> {
    policy.validate()?;
    let human_traj = match human {
        HumanInput::Estimate(t) | HumanInput::Deformation(t) => t,
    };
    t_auto.ensure_compatible(human_traj)?;

    let estimate = || match human {
        HumanInput::Estimate(t) => Ok(t),
        HumanInput::Deformation(_) => Err(Error::invalid(format!(
            "a deformation desire cannot drive the {} policy",
            policy.kind()
        ))),
    };

    let mut trigger = false;
    let mut agreement = None;
    let mut check_env = ctx.envelope.as_ref();
    let trajectory = match policy {
        ArbitrationPolicy::LeaderFollower => estimate()?.clone(),
        ArbitrationPolicy::AdditiveControlled { sigma_source } => {
            let sigma = sigma_source.sample(ctx.time);
            t_auto.lerp(estimate()?, sigma)?
        }
        ArbitrationPolicy::AdditiveDeforming { mu } => match human {
            HumanInput::Deformation(delta) => t_auto.add_scaled(delta, *mu)?,
            HumanInput::Estimate(_) => {
                return Err(Error::invalid(
                    "the additive_deforming policy needs a deformation desire",
                ))
            }
        },
        ArbitrationPolicy::Superimposed { envelope } => {
            check_env = Some(envelope);
            let est = estimate()?;
            if check_safety(est, envelope).safe {
                est.clone()
            } else {
                trigger = true;
                let projected: Vec<Vec2> = est.positions().map(|p| envelope.project(&p)).collect();
                Trajectory::from_positions(est.dt(), &projected)?
            }
        }
        ArbitrationPolicy::Agreement { config } => {
            let est = estimate()?;
            let (outcome, joint) = match config.scheme {
                Scheme::Ibr => {
                    let out = run_ibr(est, t_auto, config)?;
                    let joint = out.joint.clone();
                    (AgreementOutcome::Ibr(out), joint)
                }
                Scheme::Negotiation => {
                    let parties = ctx.negotiation.as_ref().ok_or_else(|| {
                        Error::invalid("negotiation scheme needs negotiating parties in the context")
                    })?;
                    let session = negotiate(&parties.human, &parties.automation, &parties.space, config)?;
                    let refs = verify_agreement(&session).references;
                    let joint = (**refs.automation()).clone();
                    (AgreementOutcome::Negotiation(session), joint)
                }
            };
            agreement = Some(outcome);
            t_auto.ensure_compatible(&joint)?;
            joint
        }
    };

    let (safe, min_clearance) = match check_env {
        Some(env) => {
            let r = check_safety(&trajectory, env);
            (r.safe, Some(r.min_clearance))
        }
        None => (true, None),
    };
    Ok(FusionResult {
        trajectory,
        safe,
        trigger,
        min_clearance,
        agreement,
    })
}
