//! Live-session protocol engine, driven by scripted clients.

use std::sync::Arc;

use cooptraj_core::agreement::{RoundAction, Theta};
use cooptraj_core::arbitration::ArbitrationPolicy;
use cooptraj_core::scenario::{execute, packaged, Scenario};
use cooptraj_core::session::{
    Body, ErrorCode, Outcome, Phase, Session, SessionConfig, SessionMessage, SessionRegistry,
};
use cooptraj_core::Vec2;
use proptest::prelude::*;
use serde_json::json;

fn demo() -> Scenario {
    packaged("negotiation-demo").unwrap()
}

/// A scripted client that numbers its own messages.
struct Client {
    seq: u64,
    session: Option<String>,
}

impl Client {
    fn new() -> Self {
        Self { seq: 0, session: None }
    }

    fn text(&mut self, body: serde_json::Value) -> String {
        self.seq += 1;
        let mut m = body;
        m["seq"] = self.seq.into();
        if let Some(id) = &self.session {
            m["session"] = id.clone().into();
        }
        m.to_string()
    }
}

/// Opens a session and loads `scenario`; returns the session and all replies.
fn open(reg: &mut SessionRegistry, client: &mut Client, scenario: &Scenario) -> (Session, Vec<SessionMessage>) {
    let c = reg.connect(&client.text(json!({"type": "hello", "version": 1})), 0.0);
    let mut s = c.session.expect("hello opens a session");
    client.session = Some(s.id().to_string());
    let mut out = c.replies;
    out.extend(s.handle_text(&client.text(json!({"type": "scenario", "scenario": scenario})), 0.0));
    (s, out)
}

fn offer(client: &mut Client, goal: Vec2, duration: f64) -> String {
    client.text(json!({"type": "human_offer", "theta": {"goal": [goal.x, goal.y], "duration": duration}}))
}

fn opening_counter(out: &[SessionMessage]) -> (Theta, cooptraj_core::Trajectory) {
    out.iter()
        .find_map(|m| match &m.body {
            Body::AutomationCounter { round: 0, theta, trajectory, .. } => Some((*theta, trajectory.clone())),
            _ => None,
        })
        .expect("opening counter")
}

#[test]
fn open_echoes_scenario_with_assigned_id() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let (s, out) = open(&mut reg, &mut Client::new(), &demo());
    assert_eq!(s.id(), "s-1");
    assert!(matches!(out[0].body, Body::Hello { version: 1 }));
    assert_eq!(out[0].session.as_deref(), Some("s-1"));
    match &out[1].body {
        Body::Scenario { scenario, automation_desire } => {
            assert_eq!(**scenario, demo());
            assert!(automation_desire.is_some());
        }
        other => panic!("expected scenario echo, got {other:?}"),
    }
    assert_eq!(s.phase(), Phase::Negotiating);
}

#[test]
fn non_agreement_policy_is_rejected() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let s = packaged("tug-of-war").unwrap();
    assert!(!matches!(s.arbitration, ArbitrationPolicy::Agreement { .. }));
    let (session, out) = open(&mut reg, &mut Client::new(), &s);
    assert!(matches!(
        out.last().unwrap().body,
        Body::Error { code: ErrorCode::PolicyNotAgreement, .. }
    ));
    assert_eq!(session.phase(), Phase::Configuring);
    assert!(session.scenario().is_none());
}

#[test]
fn invalid_scenario_is_rejected() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let c = reg.connect(&client.text(json!({"type": "hello", "version": 1})), 0.0);
    let mut s = c.session.unwrap();
    client.session = Some(s.id().to_string());
    let mut bad = serde_json::to_value(demo()).unwrap();
    bad["human"]["compliance"] = 2.0.into();
    let out = s.handle_text(&client.text(json!({"type": "scenario", "scenario": bad})), 0.0);
    assert!(matches!(out[0].body, Body::Error { code: ErrorCode::InvalidScenario, .. }));
}

#[test]
fn two_sessions_are_independent() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let (mut a, _) = open(&mut reg, &mut Client::new(), &demo());
    let (b, _) = open(&mut reg, &mut Client::new(), &demo());
    assert_ne!(a.id(), b.id());
    let mut ca = Client { seq: 2, session: Some(a.id().into()) };
    a.handle_text(&ca.text(json!({"type": "accept"})), 1.0);
    assert_eq!(a.phase(), Phase::Agreed);
    assert_eq!(b.phase(), Phase::Negotiating);
}

#[test]
fn offering_the_automation_desire_agrees_immediately() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let (mut s, out) = open(&mut reg, &mut client, &demo());
    let (theta, desire) = opening_counter(&out);
    let out = s.handle_text(&offer(&mut client, theta.goal, theta.duration), 1.0);
    assert_eq!(out.len(), 1);
    match &out[0].body {
        Body::Agreed { joint, verdict, .. } => {
            assert_eq!(*verdict, Outcome::Agreed);
            assert_eq!(*joint, desire);
        }
        other => panic!("expected agreed, got {other:?}"),
    }
    // further offers are out of phase
    let out = s.handle_text(&offer(&mut client, theta.goal, theta.duration), 2.0);
    assert!(matches!(out[0].body, Body::Error { code: ErrorCode::OutOfPhase, .. }));
}

#[test]
fn far_offer_gets_a_conceded_counter() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let scenario = demo();
    let step = match &scenario.arbitration {
        ArbitrationPolicy::Agreement { config } => config.concession_step * config.automation_compliance,
        _ => unreachable!(),
    };
    let (mut s, out) = open(&mut reg, &mut client, &scenario);
    let (opening, _) = opening_counter(&out);
    let far = Theta::new(Vec2::new(-3.0, 3.0), 2.0);

    // Opening round: each side's worst case is the other's opening, so the
    // risks tie and both concede.
    let out = s.handle_text(&offer(&mut client, far.goal, far.duration), 1.0);
    let Body::AutomationCounter { theta: first, action, .. } = &out[0].body else {
        panic!("expected a counter, got {:?}", out[0].body)
    };
    assert_eq!(*action, Some(RoundAction::ConcedeBoth));
    assert_eq!(*first, opening.toward(&far, step));

    // The human gives a little ground but stays far off; measured against the
    // human's opening, the automation now risks less and concedes alone.
    let second = far.toward(first, 0.25);
    let out = s.handle_text(&offer(&mut client, second.goal, second.duration), 2.0);
    match &out[0].body {
        Body::AutomationCounter { round, theta, risk, human_risk, action, .. } => {
            assert_eq!(*round, 2);
            let (risk, human_risk) = (risk.unwrap(), human_risk.unwrap());
            assert!(risk < human_risk, "automation risk {risk} vs human {human_risk}");
            assert_eq!(*action, Some(RoundAction::ConcedeA));
            assert_eq!(*theta, first.toward(&second, step));
        }
        other => panic!("expected a counter, got {other:?}"),
    }
}

#[test]
fn sequence_checks() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let (mut s, out) = open(&mut reg, &mut client, &demo());
    let seqs: Vec<u64> = out.iter().map(|m| m.seq).collect();
    assert_eq!(seqs, vec![1, 2, 3]);
    // replayed inbound sequence number
    let stale = json!({"type": "accept", "seq": 1, "session": s.id()}).to_string();
    let out = s.handle_text(&stale, 1.0);
    assert!(matches!(out[0].body, Body::Error { code: ErrorCode::BadSequence, .. }));
    // wrong session id
    let wrong = json!({"type": "accept", "seq": 99, "session": "s-42"}).to_string();
    let out = s.handle_text(&wrong, 1.0);
    assert!(matches!(out[0].body, Body::Error { code: ErrorCode::WrongSession, .. }));
    // unknown type
    let out = s.handle_text(&client.text(json!({"type": "teleport"})), 1.0);
    assert!(matches!(out[0].body, Body::Error { code: ErrorCode::UnknownType, .. }));
    assert!(s.outbound().windows(2).all(|w| w[1].seq > w[0].seq));
}

#[test]
fn execution_stream_matches_batch_run() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let scenario = demo();
    let (mut s, _) = open(&mut reg, &mut client, &scenario);
    s.handle_text(&offer(&mut client, Vec2::new(2.0, 0.0), 3.5), 1.0);
    let out = s.handle_text(&client.text(json!({"type": "accept"})), 2.0);
    assert!(matches!(out.last().unwrap().body, Body::Agreed { .. }));
    let joint = Arc::clone(s.joint().unwrap());
    assert!(s.handle_text(&client.text(json!({"type": "execute"})), 3.0).is_empty());
    assert_eq!(s.phase(), Phase::Executing);

    let mut ticks = Vec::new();
    let mut done = None;
    while let Some(m) = s.next_tick() {
        match m.body {
            Body::ExecutionTick { t, x, v, u_h, u_a, conflict } => ticks.push((t, x, v, u_h, u_a, conflict)),
            Body::Done { verdict, .. } => done = Some(verdict),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(done, Some(Outcome::Agreed));
    assert_eq!(s.phase(), Phase::Done);
    assert_eq!(ticks[0].0, 0.0);
    assert_eq!(ticks[0].1, scenario.start.p);
    assert!(ticks.iter().all(|k| k.5 == 0.0));

    let batch = execute(&scenario, Arc::clone(&joint), joint).unwrap();
    assert_eq!(batch.ticks.len(), ticks.len());
    for (b, l) in batch.ticks.iter().zip(&ticks) {
        assert_eq!(b.t.to_bits(), l.0.to_bits());
        assert_eq!((b.x.p, b.x.v, b.u_h, b.u_a), (l.1, l.2, l.3, l.4));
        assert_eq!(b.conflict.to_bits(), l.5.to_bits());
    }
}

#[test]
fn idle_session_times_out() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let (mut s, _) = open(&mut reg, &mut Client::new(), &demo());
    assert!(s.poll(299.0).is_empty());
    let out = s.poll(300.5);
    assert!(matches!(out[0].body, Body::Done { verdict: Outcome::Exhausted, .. }));
    assert_eq!(s.phase(), Phase::Done);
}

#[test]
fn resume_replays_missed_messages() {
    let scenario = demo();
    let script = |client: &mut Client| {
        vec![
            offer(client, Vec2::new(-1.0, 2.0), 2.0),
            offer(client, Vec2::new(0.0, 1.5), 2.5),
            offer(client, Vec2::new(1.0, 1.0), 3.0),
        ]
    };

    // uninterrupted
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let (mut s, mut full) = open(&mut reg, &mut client, &scenario);
    for text in script(&mut client) {
        full.extend(s.handle_text(&text, 1.0));
    }

    // drop after the first offer, having seen only up to seq 3
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let mut client = Client::new();
    let (mut s, mut seen) = open(&mut reg, &mut client, &scenario);
    let texts = script(&mut client);
    let lost = s.handle_text(&texts[0], 1.0);
    assert_eq!(lost.len(), 1);
    let id = s.id().to_string();
    reg.park(s, 10.0);
    let resume = json!({"type": "resume", "session": id, "seq": 5, "last_seq": 3}).to_string();
    let c = reg.connect(&resume, 40.0);
    let mut s = c.session.expect("resumed within the window");
    seen.extend(c.replies);
    for text in &texts[1..] {
        seen.extend(s.handle_text(text, 41.0));
    }
    assert_eq!(seen, full);

    // too late
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let (s, _) = open(&mut reg, &mut Client::new(), &scenario);
    let id = s.id().to_string();
    reg.park(s, 0.0);
    let resume = json!({"type": "resume", "session": id, "seq": 5, "last_seq": 3}).to_string();
    let c = reg.connect(&resume, 61.0);
    assert!(c.session.is_none());
    assert!(matches!(c.replies[0].body, Body::Error { code: ErrorCode::ResumeExpired, .. }));
}

#[test]
fn messages_before_hello_are_rejected() {
    let mut reg = SessionRegistry::new(SessionConfig::default());
    let c = reg.connect(&json!({"type": "accept", "seq": 1}).to_string(), 0.0);
    assert!(c.session.is_none());
    assert!(matches!(c.replies[0].body, Body::Error { code: ErrorCode::NoSession, .. }));
}

/// Random client messages, valid and not.
fn arb_message() -> impl Strategy<Value = serde_json::Value> {
    prop_oneof![
        Just(json!({"type": "hello", "version": 1})),
        Just(json!({"type": "accept"})),
        Just(json!({"type": "execute"})),
        Just(json!({"type": "ack", "upto": 3})),
        Just(json!({"type": "agreed", "theta": {"goal": [0, 0], "duration": 1}, "joint": {"dt": 0.1, "samples": []}, "verdict": "agreed"})),
        Just(json!({"type": "resume", "last_seq": 0})),
        Just(json!({"type": "bogus"})),
        Just(json!({"type": "scenario", "scenario": demo()})),
        Just(json!({"type": "scenario", "scenario": packaged("tug-of-war").unwrap()})),
        (-3.0..3.0f64, -3.0..3.0f64, -1.0..5.0f64)
            .prop_map(|(x, y, d)| json!({"type": "human_offer", "theta": {"goal": [x, y], "duration": d}})),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn execution_requires_an_agreed_joint(msgs in proptest::collection::vec(arb_message(), 1..12)) {
        let mut reg = SessionRegistry::new(SessionConfig::default());
        let mut client = Client::new();
        let c = reg.connect(&client.text(json!({"type": "hello", "version": 1})), 0.0);
        let mut s = c.session.unwrap();
        client.session = Some(s.id().to_string());
        let mut last_seq = 1;
        for m in msgs {
            let before = s.phase();
            for out in s.handle_text(&client.text(m), 1.0) {
                prop_assert!(out.seq > last_seq);
                last_seq = out.seq;
            }
            let after = s.phase();
            if after == Phase::Executing {
                prop_assert!(s.joint().is_some());
                prop_assert!(before == Phase::Agreed || before == Phase::Executing);
            }
            let legal = matches!(
                (before, after),
                (a, b) if a == b
            ) || matches!(
                (before, after),
                (Phase::Configuring, Phase::Negotiating)
                    | (Phase::Negotiating, Phase::Agreed)
                    | (Phase::Negotiating, Phase::Done)
                    | (Phase::Agreed, Phase::Executing)
            );
            prop_assert!(legal, "illegal transition {:?} -> {:?}", before, after);
        }
    }
}
