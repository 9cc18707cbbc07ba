//! Scenario files, the single-scenario runner and the batch matrix.
//!
//! A run goes through the full pipeline: the automation plans its desire,
//! the simulated human starts moving and is observed for a short prefix,
//! the estimator infers the human's desire from that prefix, the policy
//! fuses both desires, and the plant executes the resulting references.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agreement::{Negotiator, OfferSpace, RoundAction, Scheme};
use crate::arbitration::{
    arbitrate, check_safety, AgreementOutcome, ArbitrationContext, ArbitrationPolicy, HumanInput,
    NegotiationParties, SafetyEnvelope, SigmaSource,
};
use crate::error::{Error, Result};
use crate::human::{deformation_desire, estimate_desire, human_desire, observe, DurationRange, HumanProfile};
use crate::planner::{plan, CostSpec, MIN_SAMPLES};
use crate::sim::{conflict_report, ConflictReport, Controller, ExecutionTrace, Gains, Plant, Simulation};
use crate::trajectory::{samples_for, BoundaryState, Sample, Trajectory, Vec2};

pub const SCENARIO_VERSION: u32 = 1;

/// Names of the scenarios bundled with the crate.
pub const PACKAGED: [&str; 3] = ["tug-of-war", "unsafe-blend", "negotiation-demo"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentGains {
    pub human: Gains,
    pub automation: Gains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Trajectory sample period (s).
    pub dt: f64,
    /// Plant integration step (s).
    pub dt_sim: f64,
    /// Execution duration (s).
    pub duration: f64,
    pub gains: AgentGains,
    /// Length of the observed human prefix used for estimation (s).
    pub observe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub id: String,
    pub start: BoundaryState,
    pub human: HumanProfile,
    pub automation_cost: CostSpec,
    pub arbitration: ArbitrationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<SafetyEnvelope>,
    pub sim: SimConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(s)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn samples(&self) -> usize {
        samples_for(self.automation_cost.horizon, self.sim.dt)
    }

    pub fn observed_samples(&self) -> usize {
        samples_for(self.sim.observe, self.sim.dt)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| Error::Scenario {
            scenario: self.id.clone(),
            source: Box::new(e),
        };
        let check = || -> Result<()> {
            if self.version != SCENARIO_VERSION {
                return Err(Error::invalid(format!(
                    "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                    self.version
                )));
            }
            if !self.start.is_finite() {
                return Err(Error::invalid("start state must be finite"));
            }
            self.human.validate()?;
            self.automation_cost.validate()?;
            self.arbitration.validate()?;
            if let Some(e) = &self.envelope {
                e.validate()?;
            }
            let s = &self.sim;
            for (name, x) in [("dt", s.dt), ("dt_sim", s.dt_sim), ("duration", s.duration), ("observe", s.observe)] {
                if !(x.is_finite() && x > 0.0) {
                    return Err(Error::invalid(format!("sim.{name} must be positive")));
                }
            }
            s.gains.human.validate()?;
            s.gains.automation.validate()?;
            if self.samples() < MIN_SAMPLES {
                return Err(Error::invalid("automation horizon too short for sim.dt"));
            }
            if self.observed_samples() < crate::human::MIN_WINDOW {
                return Err(Error::invalid("sim.observe covers fewer than 6 samples"));
            }
            if self.observed_samples() > self.samples() {
                return Err(Error::invalid("sim.observe exceeds the planning horizon"));
            }
            Ok(())
        };
        check().map_err(ctx)
    }

    /// Copy with a different arbitration policy; the id gets the policy
    /// kind appended.
    pub fn with_policy(&self, policy: ArbitrationPolicy) -> Scenario {
        Scenario {
            id: format!("{}/{}", self.id, policy.kind()),
            arbitration: policy,
            ..self.clone()
        }
    }
}

/// Loads one of the [`PACKAGED`] scenarios.
pub fn packaged(name: &str) -> Result<Scenario> {
    let src = match name {
        "tug-of-war" => include_str!("../scenarios/tug-of-war.json"),
        "unsafe-blend" => include_str!("../scenarios/unsafe-blend.json"),
        "negotiation-demo" => include_str!("../scenarios/negotiation-demo.json"),
        other => {
            return Err(Error::invalid(format!(
                "unknown packaged scenario `{other}` (available: {})",
                PACKAGED.join(", ")
            )))
        }
    };
    Scenario::from_json(src)
}

/// The scenario under each of the five arbitration policies, with default
/// parameters (σ = 0.5, μ = 1, iterative best response).
pub fn five_policy_sweep(base: &Scenario) -> Vec<Scenario> {
    let envelope = base.envelope.clone().unwrap_or_default();
    [
        ArbitrationPolicy::LeaderFollower,
        ArbitrationPolicy::Superimposed { envelope },
        ArbitrationPolicy::AdditiveControlled {
            sigma_source: SigmaSource::Constant { value: 0.5 },
        },
        ArbitrationPolicy::AdditiveDeforming { mu: 1.0 },
        ArbitrationPolicy::Agreement {
            config: Default::default(),
        },
    ]
    .into_iter()
    .map(|p| base.with_policy(p))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub safe: bool,
    pub trigger: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_clearance: Option<f64>,
    /// Clearance of the automation's desire against the scenario envelope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clearance_automation: Option<f64>,
    /// Clearance of the estimated human desire against the scenario envelope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clearance_human: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub scheme: Scheme,
    pub agreed: bool,
    pub rounds: usize,
    pub distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_action: Option<RoundAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub goal: Vec2,
    pub duration: f64,
    pub residual: f64,
    pub degenerate: bool,
    pub goal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: String,
    pub policy: String,
    pub seed: u64,
    pub planner_cost: f64,
    pub estimate: EstimateSummary,
    pub fusion: FusionSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementSummary>,
    pub execution: ConflictReport,
    /// Executed trace; exported separately as CSV.
    #[serde(skip)]
    pub trace: ExecutionTrace,
    /// Excluded from serialization so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Intermediate artifacts of a run, for callers that need more than the report.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub automation_desire: Trajectory,
    pub human_desire: Trajectory,
    pub human_estimate: Trajectory,
    pub fused: Trajectory,
    pub reference_h: Arc<Trajectory>,
    pub reference_a: Arc<Trajectory>,
    pub agreement: Option<AgreementOutcome>,
}

/// Lazy execution of the given references on the scenario's plant.
pub fn simulation(scenario: &Scenario, reference_h: Arc<Trajectory>, reference_a: Arc<Trajectory>) -> Result<Simulation> {
    let plant = Plant::new(Sample::new(scenario.start.p, scenario.start.v), scenario.sim.dt_sim)?;
    let ctrl_h = Controller::new(scenario.sim.gains.human, reference_h)?;
    let ctrl_a = Controller::new(scenario.sim.gains.automation, reference_a)?;
    Simulation::new(plant, ctrl_h, ctrl_a, scenario.sim.duration)
}

/// Executes the given references on the scenario's plant.
pub fn execute(scenario: &Scenario, reference_h: Arc<Trajectory>, reference_a: Arc<Trajectory>) -> Result<ExecutionTrace> {
    let ticks = simulation(scenario, reference_h, reference_a)?.collect::<Result<Vec<_>>>()?;
    Ok(ExecutionTrace {
        dt_sim: scenario.sim.dt_sim,
        ticks,
    })
}

/// Negotiating parties for `scenario`: the simulated human against the
/// automation's planner cost.
pub fn negotiation_parties(scenario: &Scenario, automation_compliance: f64) -> Result<NegotiationParties> {
    let space = OfferSpace::new(scenario.start.p, scenario.sim.dt, scenario.samples())?;
    Ok(NegotiationParties {
        human: Negotiator::human(&scenario.human, &space)?,
        automation: Negotiator::automation(&scenario.automation_cost, &space, automation_compliance)?,
        space,
    })
}

pub fn run_scenario(scenario: &Scenario) -> Result<RunReport> {
    run_scenario_with_artifacts(scenario).map(|(r, _)| r)
}

pub fn run_scenario_with_artifacts(scenario: &Scenario) -> Result<(RunReport, RunArtifacts)> {
    let clock = Instant::now();
    scenario.validate()?;
    let wrap = |e: Error| Error::Scenario {
        scenario: scenario.id.clone(),
        source: Box::new(e),
    };
    let (mut report, artifacts) = pipeline(scenario).map_err(wrap)?;
    report.wall_time = clock.elapsed();
    log::debug!("scenario {} finished in {:?}", scenario.id, report.wall_time);
    Ok((report, artifacts))
}

fn pipeline(s: &Scenario) -> Result<(RunReport, RunArtifacts)> {
    let dt = s.sim.dt;
    let n = s.samples();

    // 1-2: automation desire from its cost function
    let planned = plan(&s.start, &s.automation_cost, dt)?;
    let t_auto = planned.trajectory;

    // 3: the human moves along its hidden desire and is observed
    let truth = human_desire(&s.human, &s.start, dt)?.fit_to_len(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let window = observe(&truth, s.observed_samples(), s.human.noise_std, &mut rng)?;
    let range = DurationRange::new((MIN_SAMPLES - 1) as f64 * dt, 2.0 * s.automation_cost.horizon.max(s.sim.observe))?;
    let est = estimate_desire(&window, dt, range)?;
    let t_hat = est.trajectory.fit_to_len(n)?;

    // 4: arbitration
    let mut ctx = ArbitrationContext {
        time: s.sim.observe,
        envelope: s.envelope.clone(),
        negotiation: None,
    };
    if let ArbitrationPolicy::Agreement { config } = &s.arbitration {
        if config.scheme == Scheme::Negotiation {
            ctx.negotiation = Some(negotiation_parties(s, config.automation_compliance)?);
        }
    }
    let delta;
    let human_input = match &s.arbitration {
        ArbitrationPolicy::AdditiveDeforming { .. } => {
            // The human pushes toward its estimated desire at mid-horizon.
            let mid = n / 2;
            let force = t_hat.samples()[mid].p - t_auto.samples()[mid].p;
            delta = deformation_desire(&t_auto, force, mid)?;
            HumanInput::Deformation(&delta)
        }
        _ => HumanInput::Estimate(&t_hat),
    };
    let fusion = arbitrate(&s.arbitration, &t_auto, human_input, &ctx)?;

    // Agreement binds both agents; otherwise the human keeps its own desire
    // and the automation executes the fused reference.
    let (reference_h, reference_a, agreement_summary) = match &fusion.agreement {
        Some(outcome) => {
            let check = outcome.check();
            let summary = AgreementSummary {
                scheme: match outcome {
                    AgreementOutcome::Ibr(_) => Scheme::Ibr,
                    AgreementOutcome::Negotiation(_) => Scheme::Negotiation,
                },
                agreed: check.agreed,
                rounds: outcome.rounds(),
                distance: check.distance,
                final_action: match outcome {
                    AgreementOutcome::Negotiation(sess) => sess.rounds.last().map(|r| r.action),
                    AgreementOutcome::Ibr(_) => None,
                },
            };
            match check.references {
                crate::agreement::References::Shared(joint) => (Arc::clone(&joint), joint, Some(summary)),
                crate::agreement::References::Separate { .. } => {
                    (Arc::new(truth.clone()), Arc::new(t_auto.clone()), Some(summary))
                }
            }
        }
        None => (Arc::new(truth.clone()), Arc::new(fusion.trajectory.clone()), None),
    };

    // 5: execution
    let trace = execute(s, Arc::clone(&reference_h), Arc::clone(&reference_a))?;
    let execution = conflict_report(&trace).with_tracking(&trace, &truth, &t_auto);

    let env_clearance = |t: &Trajectory| {
        s.envelope
            .as_ref()
            .map(|e| check_safety(t, e).min_clearance)
            .filter(|c| c.is_finite())
    };
    let report = RunReport {
        scenario_id: s.id.clone(),
        policy: s.arbitration.kind().to_string(),
        seed: s.seed,
        planner_cost: planned.cost,
        estimate: EstimateSummary {
            goal: est.goal_estimate,
            duration: est.duration_estimate,
            residual: est.residual,
            degenerate: est.degenerate,
            goal_error: (est.goal_estimate - s.human.desired_goal).norm(),
        },
        fusion: FusionSummary {
            safe: fusion.safe,
            trigger: fusion.trigger,
            min_clearance: fusion.min_clearance.filter(|c| c.is_finite()),
            clearance_automation: env_clearance(&t_auto),
            clearance_human: env_clearance(&t_hat),
        },
        agreement: agreement_summary,
        execution,
        trace,
        wall_time: Duration::ZERO,
    };
    let artifacts = RunArtifacts {
        automation_desire: t_auto,
        human_desire: truth,
        human_estimate: t_hat,
        fused: fusion.trajectory,
        reference_h,
        reference_a,
        agreement: fusion.agreement,
    };
    Ok((report, artifacts))
}

/// One row of the matrix table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub scenario_id: String,
    pub policy: String,
    pub repetition: usize,
    pub seed: u64,
    pub status: String,
    pub steady_state_conflict: Option<f64>,
    pub mean_conflict: Option<f64>,
    pub max_conflict: Option<f64>,
    pub agreement_rounds: Option<usize>,
    pub agreed: Option<bool>,
    pub safety_violation: Option<bool>,
    pub min_clearance: Option<f64>,
    pub error: Option<String>,
}

impl MatrixRow {
    pub fn from_report(report: &RunReport, repetition: usize) -> Self {
        Self {
            scenario_id: report.scenario_id.clone(),
            policy: report.policy.clone(),
            repetition,
            seed: report.seed,
            status: "ok".into(),
            steady_state_conflict: Some(report.execution.steady_state_conflict),
            mean_conflict: Some(report.execution.mean_conflict),
            max_conflict: Some(report.execution.max_conflict),
            agreement_rounds: report.agreement.as_ref().map(|a| a.rounds),
            agreed: report.agreement.as_ref().map(|a| a.agreed),
            safety_violation: Some(!report.fusion.safe),
            min_clearance: report.fusion.min_clearance,
            error: None,
        }
    }

    fn failed(scenario: &Scenario, repetition: usize, seed: u64, err: &Error) -> Self {
        Self {
            scenario_id: scenario.id.clone(),
            policy: scenario.arbitration.kind().to_string(),
            repetition,
            seed,
            status: "failed".into(),
            steady_state_conflict: None,
            mean_conflict: None,
            max_conflict: None,
            agreement_rounds: None,
            agreed: None,
            safety_violation: None,
            min_clearance: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_steady_state_conflict: Option<f64>,
    pub mean_agreement_rounds: Option<f64>,
    pub safety_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatrixTable {
    pub rows: Vec<MatrixRow>,
}

fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl MatrixTable {
    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.rows)
    }

    /// Per-policy aggregates, in order of first appearance.
    pub fn aggregates(&self) -> Vec<PolicyAggregate> {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.policy) {
                order.push(r.policy.clone());
            }
        }
        order
            .into_iter()
            .map(|policy| {
                let rows: Vec<&MatrixRow> = self.rows.iter().filter(|r| r.policy == policy).collect();
                let ok: Vec<&&MatrixRow> = rows.iter().filter(|r| r.status == "ok").collect();
                let mean = |xs: Vec<f64>| {
                    if xs.is_empty() {
                        None
                    } else {
                        Some(xs.iter().sum::<f64>() / xs.len() as f64)
                    }
                };
                PolicyAggregate {
                    runs: rows.len(),
                    failed: rows.len() - ok.len(),
                    mean_steady_state_conflict: mean(ok.iter().filter_map(|r| r.steady_state_conflict).collect()),
                    mean_agreement_rounds: mean(ok.iter().filter_map(|r| r.agreement_rounds.map(|x| x as f64)).collect()),
                    safety_violations: ok.iter().filter(|r| r.safety_violation == Some(true)).count(),
                    policy,
                }
            })
            .collect()
    }

    pub fn aggregates_csv(&self) -> Result<String> {
        write_csv(&self.aggregates())
    }
}

/// Runs every scenario `repetitions` times (seed offset by the repetition
/// index) in parallel. Rows come out in input order; failures become
/// failed rows.
pub fn run_matrix(scenarios: &[Scenario], repetitions: usize) -> Result<MatrixTable> {
    if scenarios.is_empty() {
        return Err(Error::invalid("matrix needs at least one scenario"));
    }
    if repetitions == 0 {
        return Err(Error::invalid("matrix needs at least one repetition"));
    }
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|i| (0..repetitions).map(move |r| (i, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let base = &scenarios[i];
            let seed = base.seed.wrapping_add(rep as u64);
            let scenario = Scenario { seed, ..base.clone() };
            match run_scenario(&scenario) {
                Ok(report) => MatrixRow::from_report(&report, rep),
                Err(e) => {
                    log::warn!("scenario {} (repetition {rep}) failed: {e}", base.id);
                    MatrixRow::failed(base, rep, seed, &e)
                }
            }
        })
        .collect();
    Ok(MatrixTable { rows })
}
