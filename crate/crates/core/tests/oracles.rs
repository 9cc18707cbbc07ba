//! Independent oracles and property tests for the numerical core.

use cooptraj_core::agreement::{negotiate, run_ibr, AgreementConfig, Negotiator, OfferSpace, Theta};
use cooptraj_core::arbitration::{arbitrate, ArbitrationContext, ArbitrationPolicy, HumanInput, SigmaSource};
use cooptraj_core::planner::{evaluate_cost, plan, CostSpec};
use cooptraj_core::scenario::{packaged, Scenario};
use cooptraj_core::sim::{simulate, Controller, Gains, Plant};
use cooptraj_core::trajectory::{max_distance, QuinticSegment};
use cooptraj_core::{BoundaryState, Sample, Trajectory, Vec2};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

/// Equality-constrained least squares through the full KKT system, one axis
/// at a time: minimize w_j·dt·Σ(Δ³x/dt³)² + w_e·dt·Σ(Δ²x/dt²)² + w_g(x_end − g)²
/// subject to the three start samples and a resting end (last three equal).
fn kkt_oracle(start: &BoundaryState, cost: &CostSpec, dt: f64) -> Vec<Vec2> {
    let n = (cost.horizon / dt).round() as usize + 1;
    let mut out = vec![Vec2::zeros(); n];
    for axis in 0..2 {
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let mut add = |stencil: &[f64], w: f64| {
            for r in 0..=(n - stencil.len()) {
                for (i, si) in stencil.iter().enumerate() {
                    for (j, sj) in stencil.iter().enumerate() {
                        h[(r + i, r + j)] += 2.0 * w * si * sj;
                    }
                }
            }
        };
        add(&[-1.0, 3.0, -3.0, 1.0], cost.w_jerk * dt / dt.powi(6));
        add(&[1.0, -2.0, 1.0], cost.w_effort * dt / dt.powi(4));
        h[(n - 1, n - 1)] += 2.0 * cost.w_goal;
        g[n - 1] += 2.0 * cost.w_goal * cost.goal[axis];

        let (p, vel, acc) = (start.p[axis], start.v[axis], start.a[axis]);
        let pinned = [p, p + vel * dt + 0.5 * acc * dt * dt, p + 2.0 * vel * dt + 2.0 * acc * dt * dt];
        let m = 5; // three pins + two equalities at the end
        let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
        let mut rhs = DVector::<f64>::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        rhs.rows_mut(0, n).copy_from(&g);
        let mut c = DMatrix::<f64>::zeros(m, n);
        for (k, val) in pinned.iter().enumerate() {
            c[(k, k)] = 1.0;
            rhs[n + k] = *val;
        }
        c[(3, n - 3)] = 1.0;
        c[(3, n - 1)] = -1.0;
        c[(4, n - 2)] = 1.0;
        c[(4, n - 1)] = -1.0;
        kkt.view_mut((n, 0), (m, n)).copy_from(&c);
        kkt.view_mut((0, n), (n, m)).copy_from(&c.transpose());
        let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
        for k in 0..n {
            out[k][axis] = sol[k];
        }
    }
    out
}

#[test]
fn planner_matches_kkt_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..12 {
        let start = BoundaryState::new(
            v(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        );
        let cost = CostSpec {
            w_jerk: rng.random_range(0.5..2.0),
            w_goal: rng.random_range(1.0..1e4),
            w_time: 0.0,
            w_effort: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) },
            goal: v(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            horizon: 2.0,
            corridor: None,
        };
        let out = plan(&start, &cost, 0.05).unwrap();
        let oracle = kkt_oracle(&start, &cost, 0.05);
        let worst = out
            .trajectory
            .positions()
            .zip(&oracle)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-7, "planner deviates from the KKT oracle by {worst}");
        assert!(out.kkt_residual < 1e-8);
    }
}

#[test]
fn planner_output_is_a_minimum() {
    let start = BoundaryState::new(v(0.0, 0.0), v(0.3, -0.2), Vec2::zeros());
    let cost = CostSpec {
        w_jerk: 1.0,
        w_goal: 100.0,
        w_time: 0.0,
        w_effort: 0.1,
        goal: v(1.0, 2.0),
        horizon: 1.5,
        corridor: None,
    };
    let dt = 0.05;
    let out = plan(&start, &cost, dt).unwrap();
    let base: Vec<Vec2> = out.trajectory.positions().collect();
    let n = base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        // Admissible perturbation: start samples fixed, resting end kept.
        let mut p = base.clone();
        let scale = 10f64.powf(rng.random_range(-6.0..-1.0));
        for x in p.iter_mut().take(n - 3).skip(3) {
            *x += v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
        }
        let shift = v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
        for x in p.iter_mut().skip(n - 3) {
            *x += shift;
        }
        let t = Trajectory::from_positions(dt, &p).unwrap();
        assert!(evaluate_cost(&t, &cost) >= out.cost * (1.0 - 1e-12));
    }
}

#[test]
fn quintic_matches_closed_form() {
    let (from, to, dur) = (v(-1.0, 2.0), v(3.0, -0.5), 1.7);
    let q = QuinticSegment::rest_to_rest(from, to, dur).unwrap();
    for k in 0..=50 {
        let tau = k as f64 / 50.0;
        let s = 10.0 * tau.powi(3) - 15.0 * tau.powi(4) + 6.0 * tau.powi(5);
        let ds = (30.0 * tau.powi(2) - 60.0 * tau.powi(3) + 30.0 * tau.powi(4)) / dur;
        let smp = q.sample(tau * dur);
        assert!((smp.p - (from + (to - from) * s)).norm() < 1e-12);
        assert!((smp.v - (to - from) * ds).norm() < 1e-11);
    }
}

/// Scalar best-response iteration, 10⁴ rounds in both move orders.
fn brute_force_ibr(h: f64, a: f64, lambda: f64) -> (f64, f64, f64) {
    let br = |own: f64, other: f64| (own + lambda * other) / (1.0 + lambda);
    let run = |d1: f64, d2: f64| {
        let (mut first, mut second) = (d1, d2);
        for _ in 0..10_000 {
            first = br(d1, second);
            second = br(d2, first);
        }
        (first, second)
    };
    let (h1, a1) = run(h, a);
    let (a2, h2) = run(a, h);
    (h1, a1, 0.25 * ((h1 + a1) + (h2 + a2)))
}

#[test]
fn ibr_matches_brute_force_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let (h, a, lambda) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.1..5.0));
        let (fh, fa, joint) = brute_force_ibr(h, a, lambda);
        let th = Trajectory::constant(v(h, 0.0), 0.1, 2).unwrap();
        let ta = Trajectory::constant(v(a, 0.0), 0.1, 2).unwrap();
        let cfg = AgreementConfig {
            coupling: lambda,
            epsilon: 1e-14,
            max_rounds: 10_000,
            ..Default::default()
        };
        let out = run_ibr(&th, &ta, &cfg).unwrap();
        assert!((out.state.t_h.first().p.x - fh).abs() < 1e-9);
        assert!((out.state.t_a.first().p.x - fa).abs() < 1e-9);
        assert!((out.joint.first().p.x - joint).abs() < 1e-9);
        assert!((joint - 0.5 * (h + a)).abs() < 1e-9);
    }
}

fn arb_quintic(n: usize, dt: f64) -> impl Strategy<Value = Trajectory> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, 0.2..1.0f64).prop_map(move |(a, b, c, d, f)| {
        QuinticSegment::rest_to_rest(v(a, b), v(c, d), f * (n - 1) as f64 * dt)
            .unwrap()
            .sample_grid(dt, n)
            .unwrap()
    })
}

fn arb_theta() -> impl Strategy<Value = Theta> {
    (-3.0..3.0f64, -3.0..3.0f64, 0.3..2.0f64).prop_map(|(x, y, d)| Theta::new(v(x, y), d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_references_never_conflict(t in arb_quintic(21, 0.05), kp in 0.5..10.0f64, kd in 0.5..10.0f64) {
        let r = std::sync::Arc::new(t);
        let g = Gains { kp, kd };
        let plant = Plant::new(Sample::at_rest(v(0.3, -0.2)), 0.01).unwrap();
        let trace = simulate(
            plant,
            Controller::new(g, r.clone()).unwrap(),
            Controller::new(g, r).unwrap(),
            2.0,
        ).unwrap();
        prop_assert!(trace.ticks.iter().all(|k| k.conflict >= 0.0 && k.conflict < 1e-9));
    }

    #[test]
    fn blend_stays_between_inputs(a in arb_quintic(31, 0.05), h in arb_quintic(31, 0.05), sigma in 0.0..=1.0f64) {
        let policy = ArbitrationPolicy::AdditiveControlled { sigma_source: SigmaSource::Constant { value: sigma } };
        let fused = arbitrate(&policy, &a, HumanInput::Estimate(&h), &ArbitrationContext::default()).unwrap().trajectory;
        let d = max_distance(&a, &h).unwrap();
        prop_assert!(max_distance(&fused, &a).unwrap() <= sigma * d + 1e-12);
        prop_assert!(max_distance(&fused, &h).unwrap() <= (1.0 - sigma) * d + 1e-12);
    }

    #[test]
    fn ibr_gap_never_grows(h in arb_quintic(21, 0.05), a in arb_quintic(21, 0.05), lambda in 0.1..5.0f64) {
        let cfg = AgreementConfig { coupling: lambda, epsilon: 1e-9, max_rounds: 500, ..Default::default() };
        let out = run_ibr(&h, &a, &cfg).unwrap();
        prop_assert!(out.converged);
        for w in out.history.windows(2) {
            prop_assert!(w[1].gap <= w[0].gap + 1e-12);
        }
        let limit = max_distance(&h, &a).unwrap() / (1.0 + 2.0 * lambda);
        prop_assert!(out.state.gap <= limit + 1e-6);
    }

    #[test]
    fn offers_only_move_toward_each_other(
        oh in arb_theta(), oa in arb_theta(),
        ch in 0.0..=1.0f64, ca in 0.0..=1.0f64, step in 0.05..0.9f64,
    ) {
        let space = OfferSpace::new(Vec2::zeros(), 0.1, 21).unwrap();
        let h = Negotiator::tracking(oh, ch, &space).unwrap();
        let a = Negotiator::tracking(oa, ca, &space).unwrap();
        let cfg = AgreementConfig { concession_step: step, max_rounds: 60, ..Default::default() };
        let s = negotiate(&h, &a, &space, &cfg).unwrap();
        prop_assert!(s.rounds.len() <= cfg.max_rounds);
        let gap = |r: &cooptraj_core::agreement::NegotiationRound| {
            (r.offer_h.goal - r.offer_a.goal).norm() + (r.offer_h.duration - r.offer_a.duration).abs()
        };
        for w in s.rounds.windows(2) {
            prop_assert!(gap(&w[1]) <= gap(&w[0]) * (1.0 + 1e-12) + 1e-15);
            // each agent's own-offer utility never increases: concessions are not retracted
            prop_assert!(w[1].u_hh <= w[0].u_hh + 1e-12);
            prop_assert!(w[1].u_aa <= w[0].u_aa + 1e-12);
        }
    }

    #[test]
    fn scenario_json_round_trip(
        goal in (-5.0..5.0f64, -5.0..5.0f64),
        compliance in 0.0..=1.0f64,
        w_goal in 0.0..1e7f64,
        sigma in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let base = packaged("tug-of-war").unwrap();
        let s = Scenario {
            seed,
            arbitration: ArbitrationPolicy::AdditiveControlled { sigma_source: SigmaSource::Constant { value: sigma } },
            ..base.clone()
        };
        let mut s = s;
        s.human.desired_goal = v(goal.0, goal.1);
        s.human.compliance = compliance;
        s.automation_cost.w_goal = w_goal;
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}
