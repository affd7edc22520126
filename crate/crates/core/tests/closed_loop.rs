use proptest::prelude::*;
use ritp_core::frenet::{FrenetPose, ReferenceLine};
use ritp_core::geometry::{dist, heading_vector, scale, sub};
use ritp_core::metrics::{batch_evaluate, compute_metrics};
use ritp_core::par::Parallelism;
use ritp_core::post_opt::{IdmOnly, PostOptConfig};
use ritp_core::scenario_gen::{generate_corpus, generate_synthetic_scenario, ScenarioKind};
use ritp_core::scene::{load_scenario, save_scenario, AgentKind, AgentTrack, Footprint, ScenarioLimits};
use ritp_core::sim::{run_closed_loop, Observation, Plan, PlanError, Planner, SimConfig, SimMode, StayLogged};
use ritp_core::{Scenario, TrajectoryAction};

struct FullBrake;

impl Planner for FullBrake {
    fn name(&self) -> &str {
        "full-brake"
    }

    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError> {
        Ok(Plan::new(TrajectoryAction::new(vec![obs.ego.position; obs.plan_steps])))
    }
}

fn with_trailing_car(mut sc: Scenario, gap: f64) -> Scenario {
    let states = sc
        .ego_track
        .states
        .iter()
        .map(|s| {
            let mut t = *s;
            t.position = sub(s.position, scale(heading_vector(s.heading), gap));
            t
        })
        .collect();
    sc.agent_tracks.push(AgentTrack {
        id: 99,
        semantic: AgentKind::Vehicle,
        footprint: Footprint { length: 4.6, width: 1.9 },
        states,
    });
    sc
}

#[test]
fn trailing_agent_reacts_to_braking_ego() {
    let sc = with_trailing_car(generate_synthetic_scenario(ScenarioKind::StraightFollow, 3), 14.0);
    let cfg = SimConfig::default();
    let log = run_closed_loop(&FullBrake, &sc, SimMode::IdmReactive, cfg).unwrap();
    let idx = sc.agent_tracks.len() - 1;
    let start = log.start_step;
    let v0 = log.agents[start][idx].speed();
    let v_end = log.agents.last().unwrap()[idx].speed();
    assert!(v_end < v0 - 1.0, "{v0} -> {v_end}");
    assert!(log.collisions().all(|(_, _, at_fault)| !at_fault));
    assert_eq!(compute_metrics(&log, &sc).nafc, 1.0);
}

#[test]
fn brake_suite_reactive_not_worse() {
    let suite: Vec<Scenario> = (0..4)
        .map(|i| with_trailing_car(generate_synthetic_scenario(ScenarioKind::StraightFollow, 20 + i), 10.0))
        .collect();
    let modes = [SimMode::Nonreactive, SimMode::IdmReactive];
    let report = batch_evaluate(&FullBrake, &suite, &modes, SimConfig::default(), Parallelism::default());
    let non = report.summary(SimMode::Nonreactive).unwrap().success_rate;
    let re = report.summary(SimMode::IdmReactive).unwrap().success_rate;
    assert!(non <= re, "{non} > {re}");
}

#[test]
fn idm_only_never_collides_on_straight_follow() {
    let planner = IdmOnly { config: PostOptConfig::desk(20) };
    for sc in generate_corpus(&[ScenarioKind::StraightFollow], 6, 5) {
        for mode in [SimMode::Nonreactive, SimMode::IdmReactive] {
            let log = run_closed_loop(&planner, &sc, mode, SimConfig::default()).unwrap();
            assert!(log.failed.is_none());
            assert_eq!(log.collisions().count(), 0, "{} {:?}", sc.id, mode);
        }
    }
}

#[test]
fn sequential_and_parallel_batches_agree() {
    let corpus = generate_corpus(&ScenarioKind::ALL, 8, 1);
    let modes = [SimMode::Nonreactive, SimMode::IdmReactive];
    let a = batch_evaluate(&StayLogged, &corpus, &modes, SimConfig::default(), Parallelism::Sequential);
    let b = batch_evaluate(&StayLogged, &corpus, &modes, SimConfig::default(), Parallelism::Parallel);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.results.len(), 16);
}

#[test]
fn scenario_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let limits = ScenarioLimits::default();
    for sc in generate_corpus(&ScenarioKind::ALL, 4, 9) {
        let path = dir.path().join(format!("{}.json", sc.id));
        save_scenario(&sc, &path).unwrap();
        let back = load_scenario(&path, &limits).unwrap();
        assert_eq!(back, sc);
    }
    std::fs::write(dir.path().join("bad.json"), "{\"id\": 3}").unwrap();
    assert!(load_scenario(&dir.path().join("bad.json"), &limits).is_err());
}

proptest! {
    #[test]
    fn frenet_roundtrip_on_route(kind in 0usize..4, seed in 0u64..50, s_frac in 0.05f64..0.95, l in -1.5f64..1.5) {
        let sc = generate_synthetic_scenario(ScenarioKind::ALL[kind], seed);
        let line = ReferenceLine::from_route(&sc).unwrap();
        let s = s_frac * line.length();
        let (p, _) = line.to_cartesian(FrenetPose::new(s, l));
        let back = line.project(p).unwrap();
        let (q, _) = line.to_cartesian(back);
        prop_assert!(dist(p, q) < 1e-6);
        prop_assert!((back.l - l).abs() < 1e-2);
    }
}
