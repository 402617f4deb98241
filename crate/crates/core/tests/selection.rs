use local_games::dynamics::{DiscretizationSpec, Dynamics, QuadrotorParams, QuadrotorState, Vector};
use local_games::game::AgentId;
use local_games::selection::*;
use local_games::Error;
use nalgebra::Vector3;
use proptest::prelude::*;

const DT: f64 = 0.1;

fn di(p: [f64; 2], v: [f64; 2]) -> Vector {
    Vector::from_vec(vec![p[0], p[1], v[0], v[1]])
}

struct Agent {
    now: Vector,
    before: Option<Vector>,
    control: [f64; 2],
}

fn snapshot(agents: &[Agent]) -> InteractionSnapshot {
    let model = Dynamics::DoubleIntegrator;
    let prev =
        if agents.iter().all(|a| a.before.is_some()) { Some(agents.iter().map(|a| a.before.clone().unwrap()).collect()) } else { None };
    InteractionSnapshot::new(
        model.clone(),
        DiscretizationSpec::for_model(&model, DT),
        (0..agents.len()).map(AgentId).collect(),
        agents.iter().map(|a| a.now.clone()).collect(),
        prev,
        agents.iter().map(|a| Vector::from_row_slice(&a.control)).collect(),
    )
    .unwrap()
}

fn still(p: [f64; 2]) -> Agent {
    Agent { now: di(p, [0.0, 0.0]), before: Some(di(p, [0.0, 0.0])), control: [0.0, 0.0] }
}

fn params() -> SelectionParams {
    SelectionParams { kappa: DEFAULT_KAPPA, fd_step: DEFAULT_FD_STEP, mu: 10.0, radius: 1.0 }
}

const A: AgentId = AgentId(0);
const B: AgentId = AgentId(1);

#[test]
fn scheme_tokens_round_trip() {
    for s in SelectionScheme::ALL {
        assert_eq!(s.token().parse::<SelectionScheme>().unwrap(), s);
    }
    assert!("nearest".parse::<SelectionScheme>().is_err());
    assert_eq!(SelectionScheme::NearestNeighbor.priority(), Priority::Ascending);
    assert_eq!(SelectionScheme::BarrierFunction.priority(), Priority::Ascending);
    assert_eq!(SelectionScheme::ControlBarrierFunction.priority(), Priority::Ascending);
    assert_eq!(SelectionScheme::CostEvolution.priority(), Priority::Descending);
    assert_eq!(SelectionScheme::Jacobian.priority(), Priority::Descending);
    assert_eq!(SelectionScheme::Hessian.priority(), Priority::Descending);
}

#[test]
fn the_paper_fixes_kappa_at_five() {
    assert_eq!(DEFAULT_KAPPA, 5.0);
}

#[test]
fn nearest_neighbor_is_euclidean_distance() {
    let s = snapshot(&[still([0.0, 0.0]), still([3.0, 4.0])]);
    assert_eq!(score_nearest_neighbor(&s, A, B).unwrap(), 5.0);
    let s = snapshot(&[still([1.0, 1.0]), still([1.0, 1.0])]);
    assert_eq!(score_nearest_neighbor(&s, A, B).unwrap(), 0.0);
    assert!(matches!(score_nearest_neighbor(&s, A, AgentId(7)), Err(Error::UnknownAgent(7))));
}

fn moved(from: [f64; 2], to: [f64; 2]) -> Agent {
    Agent { now: di(to, [0.0, 0.0]), before: Some(di(from, [0.0, 0.0])), control: [0.0, 0.0] }
}

#[test]
fn cost_evolution_values() {
    let s = snapshot(&[still([0.0, 0.0]), moved([2.0, 0.0], [1.0, 0.0])]);
    assert!((score_cost_evolution(&s, A, B, 10.0).unwrap().unwrap() - 7.5).abs() < 1e-12);
    let s = snapshot(&[still([0.0, 0.0]), moved([1.0, 0.0], [2.0, 0.0])]);
    assert!((score_cost_evolution(&s, A, B, 10.0).unwrap().unwrap() + 7.5).abs() < 1e-12);
    let s = snapshot(&[moved([0.0, 0.0], [1.0, 1.0]), moved([0.0, 2.0], [1.0, 3.0])]);
    assert_eq!(score_cost_evolution(&s, A, B, 10.0).unwrap().unwrap(), 0.0);
    let s = snapshot(&[still([0.0, 0.0]), still([0.0, 0.0])]);
    assert!(matches!(score_cost_evolution(&s, A, B, 10.0), Err(Error::DegenerateGeometry { .. })));
}

#[test]
fn cost_evolution_falls_back_to_distance_at_the_first_step() {
    let first = |p: [f64; 2]| Agent { now: di(p, [0.0, 0.0]), before: None, control: [0.0, 0.0] };
    let s = snapshot(&[first([0.0, 0.0]), first([3.0, 0.0]), first([1.0, 0.0]), first([2.0, 0.0])]);
    assert_eq!(score_cost_evolution(&s, A, B, 10.0).unwrap(), None);
    let picked = select_players(&s, SelectionScheme::CostEvolution, &params(), A, 2).unwrap();
    assert_eq!(picked, vec![AgentId(2), AgentId(3)]);
}

#[test]
fn barrier_terms_and_scores() {
    let (pi, pj) = ([0.0, 0.0], [3.0, 0.0]);
    let (vi, vj) = ([1.0, 0.0], [-1.0, 0.0]);
    assert_eq!(barrier_h(&pi, &pj, 1.0), 8.0);
    assert_eq!(barrier_hdot(&pi, &pj, &vi, &vj), -12.0);
    assert_eq!(barrier_hddot(&pi, &pj, &vi, &vj, &[0.0, 0.0], &[0.0, 0.0]), 8.0);

    let s = snapshot(&[
        Agent { now: di(pi, vi), before: None, control: [0.0, 0.0] },
        Agent { now: di(pj, vj), before: None, control: [0.0, 0.0] },
    ]);
    assert_eq!(score_bf(&s, A, B, 5.0, 1.0).unwrap(), 28.0);
    assert_eq!(score_cbf(&s, A, B, 5.0, 1.0).unwrap(), 88.0);
}

#[test]
fn barrier_scores_are_positive_for_far_receding_pairs() {
    let s = snapshot(&[
        Agent { now: di([0.0, 0.0], [-0.5, 0.0]), before: None, control: [-0.2, 0.0] },
        Agent { now: di([20.0, 1.0], [0.7, 0.1]), before: None, control: [0.3, 0.0] },
    ]);
    assert!(score_bf(&s, A, B, 5.0, 1.0).unwrap() > 0.0);
    assert!(score_cbf(&s, A, B, 5.0, 1.0).unwrap() > 0.0);
    // A static far pair scores kappa h, growing with distance.
    let near = snapshot(&[still([0.0, 0.0]), still([5.0, 0.0])]);
    let far = snapshot(&[still([0.0, 0.0]), still([9.0, 0.0])]);
    let bf = |s: &InteractionSnapshot| score_bf(s, A, B, 5.0, 1.0).unwrap();
    assert_eq!(bf(&near), 5.0 * 24.0);
    assert!(bf(&far) > bf(&near));
}

#[test]
fn cbf_prefers_the_approaching_agent() {
    let s = snapshot(&[
        still([0.0, 0.0]),
        Agent { now: di([2.0, 0.0], [-1.0, 0.0]), before: None, control: [0.0, 0.0] },
        Agent { now: di([0.0, 2.0], [0.0, 1.0]), before: None, control: [0.0, 0.0] },
    ]);
    let approaching = score_cbf(&s, A, AgentId(1), 5.0, 1.0).unwrap();
    let receding = score_cbf(&s, A, AgentId(2), 5.0, 1.0).unwrap();
    assert!(approaching < receding);
    let picked = select_players(&s, SelectionScheme::ControlBarrierFunction, &params(), A, 1).unwrap();
    assert_eq!(picked, vec![AgentId(1)]);
}

/// Two double integrators after one step from the given previous states and controls.
fn pair_for_derivatives(d: f64) -> InteractionSnapshot {
    let step = |p: [f64; 2], v: [f64; 2], u: [f64; 2]| {
        let h = 0.5 * DT * DT;
        di([p[0] + v[0] * DT + h * u[0], p[1] + v[1] * DT + h * u[1]], [v[0] + DT * u[0], v[1] + DT * u[1]])
    };
    let a = ([0.0, 0.0], [1.0, 0.0], [0.2, -0.1]);
    let b = ([d, 0.3], [-1.0, 0.0], [0.1, 0.3]);
    snapshot(&[
        Agent { now: step(a.0, a.1, a.2), before: Some(di(a.0, a.1)), control: a.2 },
        Agent { now: step(b.0, b.1, b.2), before: Some(di(b.0, b.1)), control: b.2 },
    ])
}

#[test]
fn jacobian_matches_chain_rule() {
    let s = pair_for_derivatives(2.0);
    // f = mu / |r|^2 with r the relative position after the step; d r / d u_other = -dt^2/2 I,
    // so |df/du_other| = mu dt^2 / |r|^3.
    let r = Vector::from_row_slice(&s.states[0].as_slice()[..2]) - Vector::from_row_slice(&s.states[1].as_slice()[..2]);
    let oracle = 10.0 * DT * DT / r.norm().powi(3);
    let fd = score_jacobian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap();
    assert!(((fd - oracle) / oracle).abs() < 1e-4, "{fd} vs {oracle}");
}

#[test]
fn hessian_matches_symbolic_mixed_derivative() {
    // Head-on: no lateral offset, zero velocities and controls.
    let d = 2.0;
    let s = snapshot(&[still([0.0, 0.0]), still([d, 0.0])]);
    let h = mixed_hessian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap();
    // d2 (mu / s) / dr dr = -2 mu I / s^2 + 8 mu r r^T / s^3 with s = |r|^2; the (x, x) entry at
    // r = (-d, 0) is 6 mu / d^4, and each control enters the relative position with factor
    // +-dt^2/2.
    let c = 0.5 * DT * DT;
    let oracle = -c * c * 6.0 * 10.0 / d.powi(4);
    assert!(((h[(0, 0)] - oracle) / oracle).abs() < 1e-3, "{} vs {oracle}", h[(0, 0)]);
}

#[test]
fn hessian_score_is_symmetric_for_mirrored_agents() {
    let s = snapshot(&[
        Agent { now: di([-1.0, 0.2], [0.5, 0.0]), before: Some(di([-1.05, 0.2], [0.5, 0.0])), control: [0.1, 0.2] },
        Agent { now: di([1.0, -0.2], [-0.5, 0.0]), before: Some(di([1.05, -0.2], [-0.5, 0.0])), control: [-0.1, -0.2] },
    ]);
    let hab = mixed_hessian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap();
    let hba = mixed_hessian(&s, B, A, 10.0, DEFAULT_FD_STEP).unwrap();
    assert!((&hab - hba.transpose()).amax() <= 1e-6 * hab.amax());
    let sa = score_hessian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap();
    let sb = score_hessian(&s, B, A, 10.0, DEFAULT_FD_STEP).unwrap();
    assert!((sa - sb).abs() <= 1e-6 * sa);
}

#[test]
fn distant_agents_have_negligible_derivative_scores() {
    let s = snapshot(&[still([0.0, 0.0]), still([1001.0, 0.0])]);
    assert!(score_jacobian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap() < 1e-6);
    assert!(score_hessian(&s, A, B, 10.0, DEFAULT_FD_STEP).unwrap() < 1e-6);
}

#[test]
fn finite_difference_scores_converge_quadratically() {
    // Large steps keep truncation error well above round-off so the order is observable.
    let s = pair_for_derivatives(1.0);
    for f in [score_jacobian, score_hessian] {
        let v: Vec<f64> = [0.8, 0.4, 0.2].iter().map(|&e| f(&s, A, B, 10.0, e).unwrap()).collect();
        let ratio = (v[0] - v[1]).abs() / (v[1] - v[2]).abs();
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn barrier_derivatives_match_trajectory_differences() {
    let model = Dynamics::quadrotor(QuadrotorParams::default()).unwrap();
    let fine = DiscretizationSpec::for_model(&model, 1e-3);
    let hover = model.neutral_control();
    let mut a = QuadrotorState::hover_at(Vector3::new(0.0, 0.0, 0.0));
    a.velocity = Vector3::new(1.0, 0.2, 0.0);
    a.euler = Vector3::new(0.05, -0.1, 0.0);
    let mut b = QuadrotorState::hover_at(Vector3::new(2.0, 0.5, 0.3));
    b.velocity = Vector3::new(-0.8, 0.0, 0.1);
    b.body_rates = Vector3::new(0.1, 0.0, 0.0);
    let ua = Vector::from_fn(4, |i, _| hover[i] * [1.1, 1.0, 1.05, 1.0][i]);
    let ub = Vector::from_fn(4, |i, _| hover[i] * [0.95, 1.0, 1.0, 1.02][i]);
    let traj = |x0: Vector, u: &Vector| model.rollout(&fine, &x0, &vec![u.clone(); 4]).unwrap();
    let ta = traj(a.to_vector(), &ua);
    let tb = traj(b.to_vector(), &ub);
    let h = |k: usize| barrier_h(model.position(&ta[k]), model.position(&tb[k]), 1.0);
    let hdot = |k: usize| barrier_hdot(model.position(&ta[k]), model.position(&tb[k]), model.velocity(&ta[k]), model.velocity(&tb[k]));
    let hddot = |k: usize| {
        barrier_hddot(
            model.position(&ta[k]),
            model.position(&tb[k]),
            model.velocity(&ta[k]),
            model.velocity(&tb[k]),
            model.acceleration(&ta[k], &ua).unwrap().as_slice(),
            model.acceleration(&tb[k], &ub).unwrap().as_slice(),
        )
    };
    let fd_h = (h(3) - h(1)) / 2e-3;
    let fd_hdot = (hdot(3) - hdot(1)) / 2e-3;
    assert!(((fd_h - hdot(2)) / hdot(2)).abs() < 1e-4, "{fd_h} vs {}", hdot(2));
    assert!(((fd_hdot - hddot(2)) / hddot(2)).abs() < 1e-4, "{fd_hdot} vs {}", hddot(2));
}

#[test]
fn selection_examples() {
    let s = snapshot(&[still([0.0, 0.0]), still([3.0, 0.0]), still([0.0, 1.0]), still([-2.0, 0.0])]);
    let nn = select_players(&s, SelectionScheme::NearestNeighbor, &params(), A, 2).unwrap();
    assert_eq!(nn, vec![AgentId(2), AgentId(3)]);
    assert!(select_players(&s, SelectionScheme::NearestNeighbor, &params(), A, 0).unwrap().is_empty());
    for scheme in SelectionScheme::ALL {
        for p in [3, 4, 10] {
            let mut all = select_players(&s, scheme, &params(), A, p).unwrap();
            all.sort();
            assert_eq!(all, vec![AgentId(1), AgentId(2), AgentId(3)]);
        }
    }
    assert!(matches!(select_players(&s, SelectionScheme::NearestNeighbor, &params(), AgentId(9), 1), Err(Error::UnknownAgent(9))));
}

#[test]
fn ties_break_by_distance_then_id() {
    let ranked =
        rank(vec![(AgentId(4), 1.0, 2.0), (AgentId(2), 1.0, 2.0), (AgentId(3), 1.0, 1.0), (AgentId(1), 0.5, 9.0)], Priority::Ascending, 4);
    assert_eq!(ranked, vec![AgentId(1), AgentId(3), AgentId(2), AgentId(4)]);
    let ranked = rank(vec![(AgentId(1), 0.5, 9.0), (AgentId(2), 3.0, 1.0)], Priority::Descending, 1);
    assert_eq!(ranked, vec![AgentId(2)]);
}

#[test]
fn coincident_pairs_rank_first_for_proxy_schemes() {
    let s = snapshot(&[still([0.0, 0.0]), still([0.5, 0.0]), still([0.0, 0.0])]);
    for scheme in [SelectionScheme::CostEvolution, SelectionScheme::Jacobian, SelectionScheme::Hessian] {
        assert_eq!(select_players(&s, scheme, &params(), A, 1).unwrap(), vec![AgentId(2)]);
    }
}

#[test]
fn position_only_schemes_ignore_velocities_and_controls() {
    let base =
        [moved([0.0, 0.0], [0.1, 0.0]), moved([3.0, 0.0], [2.5, 0.0]), moved([0.0, 2.0], [0.0, 2.2]), moved([-1.5, 0.5], [-1.6, 0.5])];
    let clean = snapshot(&base);
    let mut poisoned = clean.clone();
    for x in poisoned.states.iter_mut().chain(poisoned.previous_states.iter_mut().flatten()) {
        x[2] = f64::NAN;
        x[3] = f64::INFINITY;
    }
    for u in &mut poisoned.last_controls {
        u.fill(f64::NAN);
    }
    for scheme in [SelectionScheme::NearestNeighbor, SelectionScheme::CostEvolution] {
        for p in 0..4 {
            assert_eq!(
                select_players(&clean, scheme, &params(), A, p).unwrap(),
                select_players(&poisoned, scheme, &params(), A, p).unwrap()
            );
        }
    }
}

#[test]
fn barrier_selection_is_invariant_to_rescaled_scores() {
    let s = snapshot(&[
        still([0.0, 0.0]),
        Agent { now: di([2.0, 0.0], [-1.0, 0.0]), before: None, control: [0.0, 0.0] },
        still([0.0, 1.8]),
        still([-3.0, 0.0]),
    ]);
    for scheme in [SelectionScheme::BarrierFunction, SelectionScheme::ControlBarrierFunction] {
        let scored = |c: f64| {
            (1..4)
                .map(|j| {
                    let other = AgentId(j);
                    let v = score(&s, scheme, &params(), A, other).unwrap().value;
                    (other, c * v, score_nearest_neighbor(&s, A, other).unwrap())
                })
                .collect::<Vec<_>>()
        };
        for p in 1..4 {
            let expected = select_players(&s, scheme, &params(), A, p).unwrap();
            for c in [0.01, 1.0, 7.0, 1e4] {
                assert_eq!(rank(scored(c), Priority::Ascending, p), expected);
            }
        }
    }
}

#[test]
fn derivative_scores_work_for_the_quadrotor() {
    let model = Dynamics::quadrotor(QuadrotorParams::default()).unwrap();
    let hover = model.neutral_control();
    let states: Vec<Vector> = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 4.0, 0.0]]
        .iter()
        .map(|p| QuadrotorState::hover_at(Vector3::new(p[0], p[1], p[2])).to_vector())
        .collect();
    let s = InteractionSnapshot::new(
        model.clone(),
        DiscretizationSpec::for_model(&model, DT),
        vec![AgentId(0), AgentId(1), AgentId(2)],
        states.clone(),
        Some(states),
        vec![hover; 3],
    )
    .unwrap();
    for scheme in SelectionScheme::ALL {
        assert_eq!(select_players(&s, scheme, &params(), A, 1).unwrap(), vec![AgentId(1)], "{scheme}");
    }
}

fn random_snapshot(raw: &[(f64, f64, f64, f64, f64, f64)]) -> InteractionSnapshot {
    let agents: Vec<Agent> = raw
        .iter()
        .map(|&(x, y, vx, vy, ux, uy)| Agent {
            now: di([x, y], [vx, vy]),
            before: Some(di([x - vx * DT, y - vy * DT], [vx, vy])),
            control: [ux, uy],
        })
        .collect();
    snapshot(&agents)
}

fn agent_strategy() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64)> {
    (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_are_translation_invariant(raw in prop::collection::vec(agent_strategy(), 4..7), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let s = random_snapshot(&raw);
        let mut t = s.clone();
        for x in t.states.iter_mut().chain(t.previous_states.iter_mut().flatten()) {
            x[0] += dx;
            x[1] += dy;
        }
        for scheme in SelectionScheme::ALL {
            for j in 1..raw.len() {
                let a = score(&s, scheme, &params(), A, AgentId(j));
                let b = score(&t, scheme, &params(), A, AgentId(j));
                if let (Ok(a), Ok(b)) = (a, b) {
                    // Second differences of translated coordinates lose a few more digits.
                    let rel = if scheme == SelectionScheme::Hessian { 1e-4 } else { 1e-6 };
                    let tol = rel * a.value.abs().max(1.0);
                    prop_assert!((a.value - b.value).abs() <= tol, "{scheme}: {} vs {}", a.value, b.value);
                }
            }
            // Compare selections only when the ranking is not decided by round-off.
            let mut values: Vec<f64> = (1..raw.len())
                .filter_map(|j| score(&s, scheme, &params(), A, AgentId(j)).ok().map(|x| x.value))
                .collect();
            values.sort_by(f64::total_cmp);
            let separated = values.windows(2).all(|w| w[1] - w[0] > 1e-4 * w[1].abs().max(1.0));
            if separated && values.len() == raw.len() - 1 {
                for p in 0..raw.len() {
                    prop_assert_eq!(
                        select_players(&s, scheme, &params(), A, p).unwrap(),
                        select_players(&t, scheme, &params(), A, p).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn selection_ignores_input_order_and_outsider_labels(raw in prop::collection::vec(agent_strategy(), 4..7), rotate in 1usize..6, p in 0usize..4) {
        let s = random_snapshot(&raw);
        let n = raw.len();
        let mut shuffled = s.clone();
        let order: Vec<usize> = (0..n).map(|k| (k + rotate) % n).collect();
        shuffled.ids = order.iter().map(|&k| s.ids[k]).collect();
        shuffled.states = order.iter().map(|&k| s.states[k].clone()).collect();
        shuffled.previous_states = s.previous_states.as_ref().map(|prev| order.iter().map(|&k| prev[k].clone()).collect());
        shuffled.last_controls = order.iter().map(|&k| s.last_controls[k].clone()).collect();
        for scheme in SelectionScheme::ALL {
            let picked = select_players(&s, scheme, &params(), A, p).unwrap();
            prop_assert_eq!(&select_players(&shuffled, scheme, &params(), A, p).unwrap(), &picked);

            // Renaming agents outside the selection keeps it unchanged.
            let mut relabeled = s.clone();
            for id in relabeled.ids.iter_mut() {
                if *id != A && !picked.contains(id) {
                    id.0 += 100;
                }
            }
            prop_assert_eq!(select_players(&relabeled, scheme, &params(), A, p).unwrap(), picked);
        }
    }
}
