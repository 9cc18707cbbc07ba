//! Live negotiation sessions.
//!
//! A transport-independent protocol engine: a real human replaces the
//! simulated human agent and negotiates with the automation by exchanging
//! JSON messages. Every message carries the session id and a sequence
//! number; the engine is deterministic, so replaying the inbound messages
//! of a session reproduces its outbound messages exactly.
//!
//! Phases move `configuring → negotiating → {agreed | done}`, and from
//! `agreed → executing → done`. Execution is only reachable through an
//! agreed joint trajectory.
//!
//! Time is injected (seconds since an arbitrary epoch) so idle timeouts and
//! resume windows are testable without a wall clock.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agreement::{
    agent_view, concession_weight, conceders, AgreementConfig, Fallback, NegotiationRound, Negotiator,
    OfferSpace, RoundAction, Theta,
};
use crate::arbitration::ArbitrationPolicy;
use crate::scenario::{negotiation_parties, simulation, Scenario};
use crate::sim::Simulation;
use crate::trajectory::{max_distance, min_jerk_profile, Trajectory, Vec2};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_IDLE_TIMEOUT: f64 = 300.0;
pub const DEFAULT_RESUME_WINDOW: f64 = 60.0;

/// Every `type` value the protocol knows about.
pub const MESSAGE_TYPES: [&str; 12] = [
    "hello",
    "scenario",
    "human_offer",
    "automation_counter",
    "accept",
    "agreed",
    "execute",
    "execution_tick",
    "done",
    "error",
    "resume",
    "ack",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Configuring,
    Negotiating,
    Agreed,
    Executing,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Agreed,
    FallbackApplied,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownType,
    /// A server-to-client message type sent by the client.
    Unexpected,
    UnsupportedVersion,
    BadSequence,
    WrongSession,
    NoSession,
    ResumeExpired,
    InvalidScenario,
    PolicyNotAgreement,
    OutOfPhase,
    InvalidOffer,
    Execution,
}

/// A human offer: either explicit parameters or a dragged via-point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OfferInput {
    Theta(Theta),
    /// The motion should pass through `via` at fraction `at ∈ (0, 1)` of
    /// its duration.
    Via { via: Vec2, at: f64, duration: f64 },
}

impl OfferInput {
    pub fn resolve(&self, space: &OfferSpace) -> crate::Result<Theta> {
        let theta = match *self {
            OfferInput::Theta(t) => t,
            OfferInput::Via { via, at, duration } => {
                if !(at > 0.0 && at < 1.0) {
                    return Err(crate::Error::InvalidArgument("via-point fraction must lie in (0, 1)".into()));
                }
                Theta::new(space.start + (via - space.start) / min_jerk_profile(at), duration)
            }
        };
        theta.validate()?;
        Ok(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Hello {
        version: u32,
    },
    Scenario {
        scenario: Box<Scenario>,
        /// The automation's desire, revealed up front unless disabled.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        automation_desire: Option<Trajectory>,
    },
    HumanOffer {
        theta: OfferInput,
    },
    AutomationCounter {
        round: usize,
        theta: Theta,
        trajectory: Trajectory,
        utility: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        risk: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        human_risk: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action: Option<RoundAction>,
    },
    Accept {},
    Agreed {
        theta: Theta,
        joint: Trajectory,
        verdict: Outcome,
    },
    Execute {},
    ExecutionTick {
        t: f64,
        x: Vec2,
        v: Vec2,
        #[serde(rename = "u_H")]
        u_h: Vec2,
        #[serde(rename = "u_A")]
        u_a: Vec2,
        conflict: f64,
    },
    Done {
        verdict: Outcome,
        reason: String,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
    Resume {
        last_seq: u64,
    },
    Ack {
        upto: u64,
    },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "hello",
            Body::Scenario { .. } => "scenario",
            Body::HumanOffer { .. } => "human_offer",
            Body::AutomationCounter { .. } => "automation_counter",
            Body::Accept {} => "accept",
            Body::Agreed { .. } => "agreed",
            Body::Execute {} => "execute",
            Body::ExecutionTick { .. } => "execution_tick",
            Body::Done { .. } => "done",
            Body::Error { .. } => "error",
            Body::Resume { .. } => "resume",
            Body::Ack { .. } => "ack",
        }
    }

    fn error(code: ErrorCode, detail: impl Into<String>) -> Body {
        Body::Error {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

impl SessionMessage {
    pub fn new(session: Option<String>, seq: u64, body: Body) -> Self {
        Self { session, seq, body }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session messages always serialize")
    }

    fn sessionless_error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self::new(None, 0, Body::error(code, detail))
    }
}

/// Parse failure with the error code the server answers with.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code:?}: {detail}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub detail: String,
}

/// Parses one inbound message, telling unknown message types apart from
/// malformed ones.
pub fn parse_message(text: &str) -> Result<SessionMessage, ProtocolError> {
    let malformed = |detail: String| ProtocolError {
        code: ErrorCode::Malformed,
        detail,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| malformed("message needs a string `type` field".into()))?;
    if !MESSAGE_TYPES.contains(&kind) {
        return Err(ProtocolError {
            code: ErrorCode::UnknownType,
            detail: format!("unknown message type `{kind}`"),
        });
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Seconds without inbound traffic before a session is closed.
    pub idle_timeout: f64,
    /// Seconds a disconnected session stays resumable.
    pub resume_window: f64,
    /// Execution pace relative to simulated time; 0 streams as fast as possible.
    pub real_time_factor: f64,
    /// Whether the automation's desire is revealed with the scenario echo.
    pub reveal_desire: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            resume_window: DEFAULT_RESUME_WINDOW,
            real_time_factor: 0.0,
            reveal_desire: true,
        }
    }
}

/// The automation's side of a live negotiation plus the model it keeps of
/// the human (a tracking utility anchored at the human's first offer).
#[derive(Debug, Clone)]
struct LiveNegotiation {
    space: OfferSpace,
    config: AgreementConfig,
    automation: Negotiator,
    human_compliance: f64,
    human: Option<Negotiator>,
    offer_a: Theta,
    rounds: Vec<NegotiationRound>,
}

enum Step {
    Counter { risk: f64, human_risk: f64, action: RoundAction },
    Agree(Theta, Outcome),
    Exhausted,
}

impl LiveNegotiation {
    fn round(&mut self, theta: Theta) -> crate::Result<Step> {
        let human = match &self.human {
            Some(h) => h.clone(),
            None => {
                let h = Negotiator::tracking(theta, self.human_compliance, &self.space)?;
                self.human = Some(h.clone());
                h
            }
        };
        let (space, config) = (&self.space, &self.config);
        let ta = self.offer_a;
        let va = agent_view(&self.automation, space, &ta, &theta, &human.opening, config)?;
        let vh = agent_view(&human, space, &theta, &ta, &self.automation.opening, config)?;
        let gap = max_distance(&space.trajectory(&theta)?, &space.trajectory(&ta)?)?;

        let mut next_a = ta;
        let action = if gap <= config.epsilon {
            RoundAction::Converged
        } else if va.accepts {
            RoundAction::AcceptA
        } else {
            let (ch, ca) = conceders(vh.risk, va.risk);
            if ca {
                next_a = ta.toward(&theta, concession_weight(&self.automation, config, ch && ca));
            }
            match (ch, ca && self.automation.compliance > 0.0) {
                (true, true) => RoundAction::ConcedeBoth,
                (false, true) => RoundAction::ConcedeA,
                (_, false) if ch => RoundAction::ConcedeH,
                _ => RoundAction::Stall,
            }
        };
        let round = self.rounds.len() + 1;
        self.rounds.push(NegotiationRound {
            round,
            offer_h: theta,
            offer_a: ta,
            u_hh: vh.u_own,
            u_ha: vh.u_opp,
            u_ah: va.u_opp,
            u_aa: va.u_own,
            risk_h: vh.risk,
            risk_a: va.risk,
            action,
        });
        self.offer_a = next_a;
        Ok(match action {
            RoundAction::Converged => Step::Agree(Theta::midpoint(&theta, &ta), Outcome::Agreed),
            RoundAction::AcceptA => Step::Agree(theta, Outcome::Agreed),
            _ if round >= config.max_rounds => match config.fallback {
                Fallback::Midpoint => Step::Agree(Theta::midpoint(&theta, &next_a), Outcome::FallbackApplied),
                Fallback::StatusQuo => Step::Exhausted,
            },
            _ => Step::Counter {
                risk: va.risk,
                human_risk: vh.risk,
                action,
            },
        })
    }
}

/// One live session.
pub struct Session {
    id: String,
    config: SessionConfig,
    phase: Phase,
    out_seq: u64,
    in_seq: u64,
    acked: u64,
    last_activity: f64,
    outbound: Vec<SessionMessage>,
    scenario: Option<Scenario>,
    live: Option<LiveNegotiation>,
    joint: Option<(Theta, Arc<Trajectory>, Outcome)>,
    stream: Option<Simulation>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("out_seq", &self.out_seq)
            .field("in_seq", &self.in_seq)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(id: impl Into<String>, config: SessionConfig, now: f64) -> Self {
        Self {
            id: id.into(),
            config,
            phase: Phase::Configuring,
            out_seq: 0,
            in_seq: 0,
            acked: 0,
            last_activity: now,
            outbound: Vec::new(),
            scenario: None,
            live: None,
            joint: None,
            stream: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        self.scenario.as_ref()
    }

    /// Rounds negotiated so far.
    pub fn rounds(&self) -> &[NegotiationRound] {
        self.live.as_ref().map_or(&[], |l| &l.rounds)
    }

    /// The agreed joint trajectory, once there is one.
    pub fn joint(&self) -> Option<&Arc<Trajectory>> {
        self.joint.as_ref().map(|(_, j, _)| j)
    }

    /// Highest outbound sequence number acknowledged by the client.
    pub fn acked(&self) -> u64 {
        self.acked
    }

    /// Every outbound message so far, in order.
    pub fn outbound(&self) -> &[SessionMessage] {
        &self.outbound
    }

    /// Outbound messages after `last_seq`, for replay on resume.
    pub fn replay_after(&self, last_seq: u64) -> Vec<SessionMessage> {
        self.outbound.iter().filter(|m| m.seq > last_seq).cloned().collect()
    }

    fn emit(&mut self, body: Body, out: &mut Vec<SessionMessage>) {
        self.out_seq += 1;
        let msg = SessionMessage::new(Some(self.id.clone()), self.out_seq, body);
        self.outbound.push(msg.clone());
        out.push(msg);
    }

    /// Handles one raw inbound message.
    pub fn handle_text(&mut self, text: &str, now: f64) -> Vec<SessionMessage> {
        match parse_message(text) {
            Ok(msg) => self.handle(msg, now),
            Err(e) => {
                let mut out = Vec::new();
                self.emit(Body::error(e.code, e.detail), &mut out);
                out
            }
        }
    }

    /// Handles one inbound message and returns the replies.
    pub fn handle(&mut self, msg: SessionMessage, now: f64) -> Vec<SessionMessage> {
        let mut out = Vec::new();
        self.last_activity = now;
        if let Some(sid) = &msg.session {
            if *sid != self.id {
                self.emit(Body::error(ErrorCode::WrongSession, format!("message for session `{sid}`")), &mut out);
                return out;
            }
        }
        if msg.seq <= self.in_seq {
            let detail = format!("sequence number {} does not exceed {}", msg.seq, self.in_seq);
            self.emit(Body::error(ErrorCode::BadSequence, detail), &mut out);
            return out;
        }
        self.in_seq = msg.seq;

        match (self.phase, msg.body) {
            (_, Body::Hello { version }) => {
                if version == PROTOCOL_VERSION {
                    self.emit(Body::Hello { version }, &mut out);
                } else {
                    let detail = format!("protocol version {version} not supported (server speaks {PROTOCOL_VERSION})");
                    self.emit(Body::error(ErrorCode::UnsupportedVersion, detail), &mut out);
                }
            }
            (_, Body::Ack { upto }) => self.acked = self.acked.max(upto.min(self.out_seq)),
            (Phase::Configuring, Body::Scenario { scenario, .. }) => self.open(*scenario, &mut out),
            (Phase::Negotiating, Body::HumanOffer { theta }) => self.human_offer(theta, &mut out),
            (Phase::Negotiating, Body::Accept {}) => {
                let live = self.live.as_ref().expect("negotiating sessions carry a negotiation");
                let theta = live.offer_a;
                self.agree(theta, Outcome::Agreed, &mut out);
            }
            (Phase::Agreed, Body::Execute {}) => self.start_execution(&mut out),
            (
                _,
                body @ (Body::AutomationCounter { .. }
                | Body::Agreed { .. }
                | Body::ExecutionTick { .. }
                | Body::Done { .. }
                | Body::Error { .. }
                | Body::Resume { .. }),
            ) => {
                let detail = format!("`{}` is not accepted from clients here", body.kind());
                self.emit(Body::error(ErrorCode::Unexpected, detail), &mut out);
            }
            (phase, body) => {
                let detail = format!("`{}` not allowed in phase {phase:?}", body.kind());
                self.emit(Body::error(ErrorCode::OutOfPhase, detail), &mut out);
            }
        }
        out
    }

    fn open(&mut self, scenario: Scenario, out: &mut Vec<SessionMessage>) {
        if let Err(e) = scenario.validate() {
            self.emit(Body::error(ErrorCode::InvalidScenario, e.to_string()), out);
            return;
        }
        let ArbitrationPolicy::Agreement { config } = &scenario.arbitration else {
            let detail = format!("live sessions need the agreement policy, got `{}`", scenario.arbitration.kind());
            self.emit(Body::error(ErrorCode::PolicyNotAgreement, detail), out);
            return;
        };
        let config = config.clone();
        let parties = match negotiation_parties(&scenario, config.automation_compliance) {
            Ok(p) => p,
            Err(e) => {
                self.emit(Body::error(ErrorCode::InvalidScenario, e.to_string()), out);
                return;
            }
        };
        let opening = parties.automation.opening;
        let (desire, utility) = match (
            parties.space.trajectory(&opening),
            parties.automation.value(&parties.space, &opening),
        ) {
            (Ok(d), Ok(u)) => (d, u),
            (Err(e), _) | (_, Err(e)) => {
                self.emit(Body::error(ErrorCode::InvalidScenario, e.to_string()), out);
                return;
            }
        };
        self.live = Some(LiveNegotiation {
            space: parties.space,
            config,
            automation: parties.automation,
            human_compliance: scenario.human.compliance,
            human: None,
            offer_a: opening,
            rounds: Vec::new(),
        });
        self.emit(
            Body::Scenario {
                scenario: Box::new(scenario.clone()),
                automation_desire: self.config.reveal_desire.then(|| desire.clone()),
            },
            out,
        );
        self.scenario = Some(scenario);
        self.phase = Phase::Negotiating;
        self.emit(
            Body::AutomationCounter {
                round: 0,
                theta: opening,
                trajectory: desire,
                utility,
                risk: None,
                human_risk: None,
                action: None,
            },
            out,
        );
    }

    fn human_offer(&mut self, input: OfferInput, out: &mut Vec<SessionMessage>) {
        let live = self.live.as_mut().expect("negotiating sessions carry a negotiation");
        let step = input.resolve(&live.space).and_then(|theta| live.round(theta));
        match step {
            Err(e) => self.emit(Body::error(ErrorCode::InvalidOffer, e.to_string()), out),
            Ok(Step::Agree(theta, outcome)) => self.agree(theta, outcome, out),
            Ok(Step::Exhausted) => {
                self.phase = Phase::Done;
                self.emit(
                    Body::Done {
                        verdict: Outcome::Exhausted,
                        reason: "rounds_exhausted".into(),
                    },
                    out,
                );
            }
            Ok(Step::Counter { risk, human_risk, action }) => {
                let theta = live.offer_a;
                let round = live.rounds.len();
                let counter = live
                    .space
                    .trajectory(&theta)
                    .and_then(|t| Ok((t, live.automation.value(&live.space, &theta)?)));
                match counter {
                    Ok((trajectory, utility)) => self.emit(
                        Body::AutomationCounter {
                            round,
                            theta,
                            trajectory,
                            utility,
                            risk: Some(risk),
                            human_risk: Some(human_risk),
                            action: Some(action),
                        },
                        out,
                    ),
                    Err(e) => self.emit(Body::error(ErrorCode::InvalidOffer, e.to_string()), out),
                }
            }
        }
    }

    fn agree(&mut self, theta: Theta, outcome: Outcome, out: &mut Vec<SessionMessage>) {
        let live = self.live.as_ref().expect("negotiating sessions carry a negotiation");
        match live.space.trajectory(&theta) {
            Ok(joint) => {
                let joint = Arc::new(joint);
                self.joint = Some((theta, Arc::clone(&joint), outcome));
                self.phase = Phase::Agreed;
                self.emit(
                    Body::Agreed {
                        theta,
                        joint: (*joint).clone(),
                        verdict: outcome,
                    },
                    out,
                );
            }
            Err(e) => self.emit(Body::error(ErrorCode::InvalidOffer, e.to_string()), out),
        }
    }

    fn start_execution(&mut self, out: &mut Vec<SessionMessage>) {
        let (Some(scenario), Some((_, joint, _))) = (&self.scenario, &self.joint) else {
            unreachable!("agreed sessions carry a scenario and a joint trajectory");
        };
        match simulation(scenario, Arc::clone(joint), Arc::clone(joint)) {
            Ok(sim) => {
                self.stream = Some(sim);
                self.phase = Phase::Executing;
            }
            Err(e) => self.emit(Body::error(ErrorCode::Execution, e.to_string()), out),
        }
    }

    /// Next streamed message while executing: ticks in simulation order,
    /// then a final `done`. Returns `None` outside execution.
    pub fn next_tick(&mut self) -> Option<SessionMessage> {
        if self.phase != Phase::Executing {
            return None;
        }
        let mut out = Vec::new();
        let next = self.stream.as_mut().and_then(|s| s.next());
        match next {
            Some(Ok(tick)) => self.emit(
                Body::ExecutionTick {
                    t: tick.t,
                    x: tick.x.p,
                    v: tick.x.v,
                    u_h: tick.u_h,
                    u_a: tick.u_a,
                    conflict: tick.conflict,
                },
                &mut out,
            ),
            Some(Err(e)) => {
                self.stream = None;
                self.phase = Phase::Done;
                self.emit(Body::error(ErrorCode::Execution, e.to_string()), &mut out);
            }
            None => {
                self.stream = None;
                self.phase = Phase::Done;
                let verdict = self.joint.as_ref().map_or(Outcome::Agreed, |(_, _, o)| *o);
                self.emit(
                    Body::Done {
                        verdict,
                        reason: "execution_complete".into(),
                    },
                    &mut out,
                );
            }
        }
        out.pop()
    }

    /// Closes the session if the human has been idle too long.
    pub fn poll(&mut self, now: f64) -> Vec<SessionMessage> {
        let mut out = Vec::new();
        let waiting = matches!(self.phase, Phase::Configuring | Phase::Negotiating | Phase::Agreed);
        if waiting && now - self.last_activity > self.config.idle_timeout {
            self.phase = Phase::Done;
            self.emit(
                Body::Done {
                    verdict: Outcome::Exhausted,
                    reason: "idle_timeout".into(),
                },
                &mut out,
            );
        }
        out
    }
}

/// Result of the first message on a new connection.
#[derive(Debug)]
pub struct Connect {
    pub session: Option<Session>,
    pub replies: Vec<SessionMessage>,
}

/// Allocates session ids and keeps disconnected sessions resumable.
///
/// Attached sessions are owned by their connection; the registry only holds
/// parked ones, so no mutable state is shared between live sessions.
#[derive(Debug)]
pub struct SessionRegistry {
    config: SessionConfig,
    next_id: u64,
    parked: HashMap<String, (Session, f64)>,
}

impl SessionRegistry {
    pub fn new(config: SessionConfig) -> Self {
        Self {
            config,
            next_id: 1,
            parked: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn open(&mut self, now: f64) -> Session {
        let id = format!("s-{}", self.next_id);
        self.next_id += 1;
        Session::new(id, self.config, now)
    }

    /// Handles the first message of a connection: `hello` opens a new
    /// session, `resume` reattaches a parked one.
    pub fn connect(&mut self, text: &str, now: f64) -> Connect {
        let fail = |code, detail: String| Connect {
            session: None,
            replies: vec![SessionMessage::sessionless_error(code, detail)],
        };
        let msg = match parse_message(text) {
            Ok(m) => m,
            Err(e) => return fail(e.code, e.detail),
        };
        match msg.body {
            Body::Hello { version } if version != PROTOCOL_VERSION => fail(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {version} not supported (server speaks {PROTOCOL_VERSION})"),
            ),
            Body::Hello { .. } => {
                let mut session = self.open(now);
                let replies = session.handle(SessionMessage { session: None, ..msg }, now);
                Connect {
                    session: Some(session),
                    replies,
                }
            }
            Body::Resume { last_seq } => match msg.session {
                Some(id) => match self.resume(&id, last_seq, now) {
                    Ok((session, replies)) => Connect {
                        session: Some(session),
                        replies,
                    },
                    Err(e) => Connect {
                        session: None,
                        replies: vec![e],
                    },
                },
                None => fail(ErrorCode::Malformed, "resume needs a session id".into()),
            },
            other => fail(
                ErrorCode::NoSession,
                format!("`{}` before hello; open a session first", other.kind()),
            ),
        }
    }

    /// Parks a disconnected session for the resume window.
    pub fn park(&mut self, session: Session, now: f64) {
        if session.phase() != Phase::Done {
            self.parked.insert(session.id.clone(), (session, now));
        }
    }

    /// Reattaches a parked session and returns the outbound messages the
    /// client missed.
    pub fn resume(&mut self, id: &str, last_seq: u64, now: f64) -> Result<(Session, Vec<SessionMessage>), SessionMessage> {
        self.purge(now);
        match self.parked.remove(id) {
            Some((mut session, _)) => {
                session.last_activity = now;
                session.acked = session.acked.max(last_seq.min(session.out_seq));
                let replay = session.replay_after(last_seq);
                Ok((session, replay))
            }
            None => Err(SessionMessage::sessionless_error(
                ErrorCode::ResumeExpired,
                format!("no resumable session `{id}`"),
            )),
        }
    }

    /// Drops parked sessions whose resume window has passed.
    pub fn purge(&mut self, now: f64) -> usize {
        let window = self.config.resume_window;
        let before = self.parked.len();
        self.parked.retain(|_, (_, since)| now - *since <= window);
        before - self.parked.len()
    }

    pub fn parked(&self) -> usize {
        self.parked.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_type_is_distinguished() {
        let e = parse_message(r#"{"seq":1,"type":"teleport"}"#).unwrap_err();
        assert_eq!(e.code, ErrorCode::UnknownType);
        let e = parse_message(r#"{"seq":1,"type":"hello"}"#).unwrap_err();
        assert_eq!(e.code, ErrorCode::Malformed);
        let e = parse_message("[1,2]").unwrap_err();
        assert_eq!(e.code, ErrorCode::Malformed);
    }

    #[test]
    fn message_json_shape() {
        let m = SessionMessage::new(Some("s-1".into()), 3, Body::Accept {});
        assert_eq!(m.to_json(), r#"{"session":"s-1","seq":3,"type":"accept"}"#);
        assert_eq!(parse_message(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn via_point_maps_to_goal() {
        let space = OfferSpace::new(Vec2::zeros(), 0.1, 11).unwrap();
        let th = OfferInput::Via {
            via: Vec2::new(0.5, 0.0),
            at: 0.5,
            duration: 1.0,
        }
        .resolve(&space)
        .unwrap();
        assert!((th.goal - Vec2::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn hello_then_version_mismatch() {
        let mut reg = SessionRegistry::new(SessionConfig::default());
        let c = reg.connect(r#"{"seq":1,"type":"hello","version":7}"#, 0.0);
        assert!(c.session.is_none());
        let c = reg.connect(r#"{"seq":1,"type":"hello","version":1}"#, 0.0);
        let s = c.session.unwrap();
        assert_eq!(s.id(), "s-1");
        assert_eq!(c.replies[0].body, Body::Hello { version: 1 });
    }

    #[test]
    fn resume_window_expires() {
        let mut reg = SessionRegistry::new(SessionConfig::default());
        let s = reg.open(0.0);
        let id = s.id().to_string();
        reg.park(s, 10.0);
        assert!(reg.resume(&id, 0, 69.0).is_ok());
        let s = reg.open(0.0);
        let id = s.id().to_string();
        reg.park(s, 10.0);
        assert!(reg.resume(&id, 0, 70.5).is_err());
    }
}
