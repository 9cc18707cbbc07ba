//! Agreement on a joint trajectory between two equal agents.
//!
//! Two schemes are offered:
//!
//! * **Iterative best response** in trajectory space. Each agent's cost is
//!   `‖T − own_desire‖² + λ‖T − other‖²`, whose minimizer is the sample-wise
//!   blend `(own + λ·other) / (1 + λ)`. The agents respond alternately until
//!   their responses stop moving. The joint trajectory is the midpoint of the
//!   converged pair, averaged over both move orders so that neither agent
//!   gains from moving first.
//! * **Monotone-concession negotiation** over offer parameters
//!   `θ = (goal, duration)`. Each round both agents evaluate both offers;
//!   an agent accepts the other's offer if it is at least as good as its own
//!   next offer (minus a slack); otherwise the agent with the lower Zeuthen
//!   risk concedes toward the other's offer. Offers only ever move toward the
//!   opponent, so no agent retracts a concession.
//!
//! Both schemes treat the two agents through identical code paths: swapping
//! the agents swaps every intermediate value and leaves the joint trajectory
//! unchanged.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::human::HumanProfile;
use crate::planner::{evaluate_cost, CostSpec, MIN_SAMPLES};
use crate::trajectory::{distance, max_distance, DistanceKind, QuinticSegment, Sample, Trajectory, Vec2};

/// Floor for the Zeuthen risk denominator.
const RISK_FLOOR: f64 = 1e-12;
/// Relative tolerance under which two risks count as equal.
const RISK_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Ibr,
    Negotiation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    StatusQuo,
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgreementConfig {
    pub scheme: Scheme,
    /// Coupling weight λ of the best-response cost.
    pub coupling: f64,
    /// Agreement threshold (m, max-pointwise).
    pub epsilon: f64,
    pub max_rounds: usize,
    /// Fraction of the gap an agent concedes per round, scaled by its compliance.
    pub concession_step: f64,
    /// Utility slack δ for accepting the opponent's offer.
    pub acceptance_slack: f64,
    pub fallback: Fallback,
    /// Compliance of the automation agent in negotiation.
    pub automation_compliance: f64,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ibr,
            coupling: 1.0,
            epsilon: 1e-3,
            max_rounds: 100,
            concession_step: 0.25,
            acceptance_slack: 0.0,
            fallback: Fallback::Midpoint,
            automation_compliance: 1.0,
        }
    }
}

impl AgreementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coupling.is_finite() && self.coupling > 0.0) {
            return Err(Error::invalid("coupling λ must be positive"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.max_rounds < 1 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        if !(self.concession_step > 0.0 && self.concession_step <= 1.0) {
            return Err(Error::invalid("concession_step must lie in (0, 1]"));
        }
        if !(self.acceptance_slack.is_finite() && self.acceptance_slack >= 0.0) {
            return Err(Error::invalid("acceptance_slack must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.automation_compliance) {
            return Err(Error::invalid("automation_compliance must lie in [0, 1]"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Iterative best response
// ---------------------------------------------------------------------------

/// Minimizer of `‖T − own‖² + λ‖T − other‖²`, sample by sample.
pub fn best_response(own_desire: &Trajectory, other_current: &Trajectory, coupling: f64) -> Result<Trajectory> {
    if !(coupling.is_finite() && coupling > 0.0) {
        return Err(Error::invalid("coupling λ must be positive"));
    }
    let k = 1.0 + coupling;
    own_desire.zip_with(other_current, |o, c| {
        Sample::new((o.p + c.p * coupling) / k, (o.v + c.v * coupling) / k)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseState {
    pub t_h: Trajectory,
    pub t_a: Trajectory,
    pub round: usize,
    /// `max_distance(t_h, t_a)`.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbrRound {
    pub round: usize,
    pub gap: f64,
    /// How far the first mover's response moved this round.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbrOutcome {
    /// Final state of the human-first alternation.
    pub state: BestResponseState,
    pub history: Vec<IbrRound>,
    pub joint: Trajectory,
    pub converged: bool,
    /// Fixed-point residual at termination.
    pub residual: f64,
    pub epsilon: f64,
}

struct Alternation {
    first: Trajectory,
    second: Trajectory,
    history: Vec<IbrRound>,
    converged: bool,
}

/// Alternating best responses, first mover answering the second's latest
/// trajectory. Each round ends right after the first mover's response, so
/// the recorded pair is always (latest first, latest second).
fn alternate(
    first_desire: &Trajectory,
    second_desire: &Trajectory,
    coupling: f64,
    epsilon: f64,
    max_rounds: usize,
) -> Result<Alternation> {
    let mut second = second_desire.clone();
    let mut prev_first = first_desire.clone();
    let mut history = Vec::new();
    let mut converged = false;
    let mut first = first_desire.clone();
    for round in 1..=max_rounds {
        first = best_response(first_desire, &second, coupling)?;
        let gap = max_distance(&first, &second)?;
        let residual = max_distance(&first, &prev_first)?;
        history.push(IbrRound { round, gap, residual });
        if residual <= epsilon {
            converged = true;
            break;
        }
        second = best_response(second_desire, &first, coupling)?;
        prev_first = first.clone();
    }
    Ok(Alternation {
        first,
        second,
        history,
        converged,
    })
}

/// Runs iterative best response between the human's and the automation's
/// desires.
pub fn run_ibr(desire_h: &Trajectory, desire_a: &Trajectory, config: &AgreementConfig) -> Result<IbrOutcome> {
    config.validate()?;
    desire_h.ensure_compatible(desire_a)?;
    let (lambda, eps, max) = (config.coupling, config.epsilon, config.max_rounds);
    let h_first = alternate(desire_h, desire_a, lambda, eps, max)?;
    let a_first = alternate(desire_a, desire_h, lambda, eps, max)?;

    // ¼·((h + a) + (h' + a')) with commutative pairings, so swapping the
    // agents reproduces the joint bit for bit.
    let pair_h = h_first.first.add_scaled(&h_first.second, 1.0)?;
    let pair_a = a_first.first.add_scaled(&a_first.second, 1.0)?;
    let joint = pair_h.zip_with(&pair_a, |x, y| {
        Sample::new((x.p + y.p) * 0.25, (x.v + y.v) * 0.25)
    })?;

    let last = *h_first.history.last().expect("max_rounds >= 1");
    let residual = last.residual.max(a_first.history.last().map_or(0.0, |r| r.residual));
    Ok(IbrOutcome {
        state: BestResponseState {
            gap: last.gap,
            round: last.round,
            t_h: h_first.first,
            t_a: h_first.second,
        },
        history: h_first.history,
        joint,
        converged: h_first.converged && a_first.converged,
        residual,
        epsilon: eps,
    })
}

// ---------------------------------------------------------------------------
// Negotiation
// ---------------------------------------------------------------------------

/// Offer parameters: goal position and motion duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub goal: Vec2,
    pub duration: f64,
}

impl Theta {
    pub fn new(goal: Vec2, duration: f64) -> Self {
        Self { goal, duration }
    }

    /// `self + w·(toward − self)`.
    pub fn toward(&self, toward: &Theta, w: f64) -> Theta {
        Theta {
            goal: self.goal + (toward.goal - self.goal) * w,
            duration: self.duration + (toward.duration - self.duration) * w,
        }
    }

    pub fn midpoint(a: &Theta, b: &Theta) -> Theta {
        Theta {
            goal: (a.goal + b.goal) * 0.5,
            duration: (a.duration + b.duration) * 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.goal.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("offer goal must be finite"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid("offer duration must be positive"));
        }
        Ok(())
    }
}

/// Maps offers to trajectories on a common grid: a rest-to-rest quintic
/// from `start` that holds its goal until the end of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferSpace {
    pub start: Vec2,
    pub dt: f64,
    pub samples: usize,
}

impl OfferSpace {
    pub fn new(start: Vec2, dt: f64, samples: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) || samples < 2 {
            return Err(Error::invalid("offer space needs dt > 0 and at least 2 samples"));
        }
        Ok(Self { start, dt, samples })
    }

    pub fn horizon(&self) -> f64 {
        (self.samples - 1) as f64 * self.dt
    }

    pub fn trajectory(&self, theta: &Theta) -> Result<Trajectory> {
        theta.validate()?;
        QuinticSegment::rest_to_rest(self.start, theta.goal, theta.duration)?.sample_grid(self.dt, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityModel {
    /// Negative mean-squared distance to a desired trajectory.
    Tracking { desired: Trajectory },
    /// Negative planner cost.
    Cost { spec: CostSpec },
}

impl UtilityModel {
    pub fn utility(&self, t: &Trajectory) -> Result<f64> {
        match self {
            UtilityModel::Tracking { desired } => {
                Ok(-distance(t, desired, DistanceKind::MeanSquared)?.value)
            }
            UtilityModel::Cost { spec } => Ok(-evaluate_cost(t, spec)),
        }
    }
}

/// One side of a negotiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negotiator {
    pub opening: Theta,
    pub compliance: f64,
    pub utility: UtilityModel,
}

impl Negotiator {
    /// The simulated human: opens with its hidden desire and values offers by
    /// how closely they track it.
    pub fn human(profile: &HumanProfile, space: &OfferSpace) -> Result<Self> {
        profile.validate()?;
        let opening = Theta::new(profile.desired_goal, profile.desired_duration);
        Ok(Self {
            opening,
            compliance: profile.compliance,
            utility: UtilityModel::Tracking {
                desired: space.trajectory(&opening)?,
            },
        })
    }

    /// A negotiator valuing offers by tracking the trajectory of `opening`.
    pub fn tracking(opening: Theta, compliance: f64, space: &OfferSpace) -> Result<Self> {
        Ok(Self {
            opening,
            compliance,
            utility: UtilityModel::Tracking {
                desired: space.trajectory(&opening)?,
            },
        })
    }

    /// The automation: values offers by its planning cost and opens at its
    /// goal with the duration that maximizes that value.
    pub fn automation(cost: &CostSpec, space: &OfferSpace, compliance: f64) -> Result<Self> {
        cost.validate()?;
        let utility = UtilityModel::Cost { spec: cost.clone() };
        let value = |d: f64| -> Result<f64> {
            utility.utility(&space.trajectory(&Theta::new(cost.goal, d))?)
        };
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = ((MIN_SAMPLES - 1) as f64 * space.dt, space.horizon());
        if hi <= lo {
            lo = hi;
        }
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (value(x1)?, value(x2)?);
        while hi - lo > 1e-3 * space.dt {
            if f1 >= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = value(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = value(x2)?;
            }
        }
        // The interval ends are candidates too: cost often peaks at the horizon.
        let candidates = [lo, 0.5 * (lo + hi), hi, space.horizon()];
        let mut best = (f64::NEG_INFINITY, space.horizon());
        for d in candidates {
            let f = value(d)?;
            if f > best.0 {
                best = (f, d);
            }
        }
        Ok(Self {
            opening: Theta::new(cost.goal, best.1),
            compliance,
            utility,
        })
    }

    pub fn value(&self, space: &OfferSpace, theta: &Theta) -> Result<f64> {
        self.utility.utility(&space.trajectory(theta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundAction {
    /// Offers already within epsilon of each other.
    Converged,
    /// Human accepted the automation's offer.
    AcceptH,
    /// Automation accepted the human's offer.
    AcceptA,
    BothAccept,
    ConcedeH,
    ConcedeA,
    ConcedeBoth,
    /// The agent due to concede has zero compliance.
    Stall,
}

/// One line of the negotiation transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationRound {
    pub round: usize,
    #[serde(rename = "offer_H")]
    pub offer_h: Theta,
    #[serde(rename = "offer_A")]
    pub offer_a: Theta,
    #[serde(rename = "u_HH")]
    pub u_hh: f64,
    #[serde(rename = "u_HA")]
    pub u_ha: f64,
    #[serde(rename = "u_AH")]
    pub u_ah: f64,
    #[serde(rename = "u_AA")]
    pub u_aa: f64,
    #[serde(rename = "risk_H")]
    pub risk_h: f64,
    #[serde(rename = "risk_A")]
    pub risk_a: f64,
    pub action: RoundAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Agreed { theta: Theta, joint: Trajectory },
    FallbackApplied { theta: Theta, joint: Trajectory },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationSession {
    pub rounds: Vec<NegotiationRound>,
    pub verdict: Verdict,
    /// Distance between the references the agents commit to (0 once they
    /// share a joint trajectory).
    pub agreement_distance: f64,
    /// Distance between the last two offers.
    pub offer_gap: f64,
    pub epsilon: f64,
    /// Each agent's opening trajectory (the status quo).
    pub opening_h: Trajectory,
    pub opening_a: Trajectory,
}

impl NegotiationSession {
    /// Round transcript as JSON lines.
    pub fn transcript(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Zeuthen risk: the share of the agent's potential gain it would lose by
/// accepting the opponent's current offer instead of insisting on its own.
pub fn zeuthen_risk(u_own: f64, u_opp: f64, u_worst: f64) -> f64 {
    (u_own - u_opp) / (u_own - u_worst).max(RISK_FLOOR)
}

fn risks_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= RISK_TIE * a.abs().max(b.abs()).max(1.0)
}

/// Everything one agent computes about the current pair of offers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentView {
    pub u_own: f64,
    pub u_opp: f64,
    pub risk: f64,
    /// Offer the agent would make if it conceded this round.
    pub next: Theta,
    pub accepts: bool,
}

/// Evaluates the pair `(own, opp)` from one agent's point of view.
pub fn agent_view(
    agent: &Negotiator,
    space: &OfferSpace,
    own: &Theta,
    opp: &Theta,
    opp_opening: &Theta,
    config: &AgreementConfig,
) -> Result<AgentView> {
    let u_own = agent.value(space, own)?;
    let u_opp = agent.value(space, opp)?;
    let u_worst = agent.value(space, opp_opening)?;
    let next = own.toward(opp, config.concession_step * agent.compliance);
    let u_next = agent.value(space, &next)?;
    Ok(AgentView {
        u_own,
        u_opp,
        risk: zeuthen_risk(u_own, u_opp, u_worst),
        next,
        accepts: u_opp >= u_next - config.acceptance_slack,
    })
}

/// Which agents concede given the two risks: the lower-risk agent, or both
/// on a tie.
pub fn conceders(risk_h: f64, risk_a: f64) -> (bool, bool) {
    if risks_tied(risk_h, risk_a) {
        (true, true)
    } else if risk_h < risk_a {
        (true, false)
    } else {
        (false, true)
    }
}

/// Concession weight for an agent; halved-at-most when both concede so
/// offers never cross.
pub fn concession_weight(agent: &Negotiator, config: &AgreementConfig, both: bool) -> f64 {
    let w = config.concession_step * agent.compliance;
    if both {
        w.min(0.5)
    } else {
        w
    }
}

/// Runs a full monotone-concession negotiation between two negotiators.
pub fn negotiate(
    agent_h: &Negotiator,
    agent_a: &Negotiator,
    space: &OfferSpace,
    config: &AgreementConfig,
) -> Result<NegotiationSession> {
    config.validate()?;
    let opening_h = space.trajectory(&agent_h.opening)?;
    let opening_a = space.trajectory(&agent_a.opening)?;
    let (mut th, mut ta) = (agent_h.opening, agent_a.opening);
    let mut rounds = Vec::new();
    let mut verdict = None;

    for round in 1..=config.max_rounds {
        let vh = agent_view(agent_h, space, &th, &ta, &agent_a.opening, config)?;
        let va = agent_view(agent_a, space, &ta, &th, &agent_h.opening, config)?;
        let gap = max_distance(&space.trajectory(&th)?, &space.trajectory(&ta)?)?;

        let (action, joint) = if gap <= config.epsilon {
            (RoundAction::Converged, Some(Theta::midpoint(&th, &ta)))
        } else {
            match (vh.accepts, va.accepts) {
                (true, true) => (RoundAction::BothAccept, Some(Theta::midpoint(&th, &ta))),
                (true, false) => (RoundAction::AcceptH, Some(ta)),
                (false, true) => (RoundAction::AcceptA, Some(th)),
                (false, false) => {
                    let (ch, ca) = conceders(vh.risk, va.risk);
                    let both = ch && ca;
                    let wh = if ch { concession_weight(agent_h, config, both) } else { 0.0 };
                    let wa = if ca { concession_weight(agent_a, config, both) } else { 0.0 };
                    let action = match (wh > 0.0, wa > 0.0) {
                        (true, true) => RoundAction::ConcedeBoth,
                        (true, false) => RoundAction::ConcedeH,
                        (false, true) => RoundAction::ConcedeA,
                        (false, false) => RoundAction::Stall,
                    };
                    rounds.push(NegotiationRound {
                        round,
                        offer_h: th,
                        offer_a: ta,
                        u_hh: vh.u_own,
                        u_ha: vh.u_opp,
                        u_ah: va.u_opp,
                        u_aa: va.u_own,
                        risk_h: vh.risk,
                        risk_a: va.risk,
                        action,
                    });
                    let (nh, na) = (th.toward(&ta, wh), ta.toward(&th, wa));
                    th = nh;
                    ta = na;
                    continue;
                }
            }
        };
        rounds.push(NegotiationRound {
            round,
            offer_h: th,
            offer_a: ta,
            u_hh: vh.u_own,
            u_ha: vh.u_opp,
            u_ah: va.u_opp,
            u_aa: va.u_own,
            risk_h: vh.risk,
            risk_a: va.risk,
            action,
        });
        let theta = joint.expect("terminal actions carry a joint offer");
        verdict = Some(Verdict::Agreed {
            theta,
            joint: space.trajectory(&theta)?,
        });
        break;
    }

    let offer_gap = max_distance(&space.trajectory(&th)?, &space.trajectory(&ta)?)?;
    let verdict = match verdict {
        Some(v) => v,
        None => match config.fallback {
            Fallback::Midpoint => {
                let theta = Theta::midpoint(&th, &ta);
                Verdict::FallbackApplied {
                    theta,
                    joint: space.trajectory(&theta)?,
                }
            }
            Fallback::StatusQuo => Verdict::Exhausted,
        },
    };
    let agreement_distance = match verdict {
        Verdict::Exhausted => max_distance(&opening_h, &opening_a)?,
        _ => 0.0,
    };
    Ok(NegotiationSession {
        rounds,
        verdict,
        agreement_distance,
        offer_gap,
        epsilon: config.epsilon,
        opening_h,
        opening_a,
    })
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// The references the two agents execute after an agreement run.
#[derive(Debug, Clone)]
pub enum References {
    /// Both agents track the very same trajectory value.
    Shared(Arc<Trajectory>),
    Separate {
        human: Arc<Trajectory>,
        automation: Arc<Trajectory>,
    },
}

impl References {
    pub fn human(&self) -> &Arc<Trajectory> {
        match self {
            References::Shared(t) => t,
            References::Separate { human, .. } => human,
        }
    }

    pub fn automation(&self) -> &Arc<Trajectory> {
        match self {
            References::Shared(t) => t,
            References::Separate { automation, .. } => automation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgreementCheck {
    pub agreed: bool,
    pub joint: Option<Arc<Trajectory>>,
    pub distance: f64,
    pub references: References,
}

/// A completed agreement run that can be checked.
pub trait AgreementRun {
    fn check(&self) -> AgreementCheck;
}

impl AgreementRun for IbrOutcome {
    fn check(&self) -> AgreementCheck {
        let agreed = self.residual <= self.epsilon;
        let joint = Arc::new(self.joint.clone());
        let references = if agreed {
            References::Shared(Arc::clone(&joint))
        } else {
            References::Separate {
                human: Arc::new(self.state.t_h.clone()),
                automation: Arc::new(self.state.t_a.clone()),
            }
        };
        AgreementCheck {
            agreed,
            joint: Some(joint),
            distance: self.residual,
            references,
        }
    }
}

impl AgreementRun for NegotiationSession {
    fn check(&self) -> AgreementCheck {
        match &self.verdict {
            Verdict::Agreed { joint, .. } | Verdict::FallbackApplied { joint, .. } => {
                let joint = Arc::new(joint.clone());
                AgreementCheck {
                    agreed: matches!(self.verdict, Verdict::Agreed { .. })
                        && self.agreement_distance <= self.epsilon,
                    joint: Some(Arc::clone(&joint)),
                    distance: self.agreement_distance,
                    references: References::Shared(joint),
                }
            }
            Verdict::Exhausted => AgreementCheck {
                agreed: false,
                joint: None,
                distance: self.agreement_distance,
                references: References::Separate {
                    human: Arc::new(self.opening_h.clone()),
                    automation: Arc::new(self.opening_a.clone()),
                },
            },
        }
    }
}

/// Checks a completed run. Agreement uses a closed threshold:
/// `distance <= epsilon`.
pub fn verify_agreement(run: &impl AgreementRun) -> AgreementCheck {
    run.check()
}
