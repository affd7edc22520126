//! Rigid-motion invariance of encodings and critic values, and related
//! properties of action selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ritp_core::frenet::ReferenceLine;
use ritp_core::geometry::Rigid2;
use ritp_core::sampler::{sample_actions, SamplerConfig};
use ritp_core::scenario_gen::{generate_synthetic_scenario, ScenarioKind};
use ritp_core::scene::Scenario;
use ritp_core::trajectory::TrajectoryAction;
use ritp_learn::criticformer::CriticFormer;
use ritp_learn::features::SceneInput;
use ritp_learn::motionformer::{argmax_first, MotionFormer, PolicyConfig};
use ritp_learn::nn::{Ctx, Graph, Tensor};
use ritp_learn::reward::bicycle_from_log;
use ritp_learn::stages::imitation_targets;

const TOL: f64 = 1e-6;

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn setup(kind: ScenarioKind, seed: u64) -> (Scenario, SceneInput, Vec<TrajectoryAction>) {
    let sc = generate_synthetic_scenario(kind, seed);
    let s = SceneInput::from_log(&sc, 25, 10).unwrap();
    let line = ReferenceLine::from_route(&sc).unwrap();
    let mut cfg = SamplerConfig::desk(20);
    cfg.max_samples = 12;
    let actions = sample_actions(&bicycle_from_log(&sc.ego_track.states[25]), &line, &cfg).unwrap();
    (sc, s, actions)
}

fn transforms() -> Vec<Rigid2> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    (0..4)
        .map(|_| Rigid2::new(rng.random_range(-3.1..3.1), [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)]))
        .collect()
}

#[test]
fn encodings_are_rigid_motion_invariant() {
    let policy = MotionFormer::new(PolicyConfig::desk(), 3);
    for kind in ScenarioKind::ALL {
        let (_, s, _) = setup(kind, 9);
        let mut g = Graph::new();
        let base = policy.encode_scene(&mut g, Ctx::new(&policy.store), &s).unwrap();
        let (m0, a0) = (g.value(base.map).clone(), g.value(base.agents).clone());
        let out0 = policy.forward(&s).unwrap();
        for tf in transforms() {
            let t = s.transformed(&tf);
            let mut g = Graph::new();
            let enc = policy.encode_scene(&mut g, Ctx::new(&policy.store), &t).unwrap();
            assert!(max_diff(&m0, g.value(enc.map)) <= TOL, "{kind:?} map tokens");
            assert!(max_diff(&a0, g.value(enc.agents)) <= TOL, "{kind:?} agent tokens");
            let out = policy.forward(&t).unwrap();
            assert_eq!(out.best_mode(), out0.best_mode());
            let world0 = policy.select_action(&s).unwrap().transformed(&tf);
            let world = policy.select_action(&t).unwrap();
            assert!(world0.rms_distance(&world) <= TOL);
        }
    }
}

#[test]
fn critic_values_are_rigid_motion_invariant() {
    let policy = MotionFormer::new(PolicyConfig::desk(), 3);
    let critic = CriticFormer::new(&policy.config, "critic", 5);
    for kind in ScenarioKind::ALL {
        let (_, s, actions) = setup(kind, 4);
        let q0 = critic.evaluate(&policy, &s, &actions).unwrap();
        for tf in transforms() {
            let moved: Vec<TrajectoryAction> = actions.iter().map(|a| a.transformed(&tf)).collect();
            let q = critic.evaluate(&policy, &s.transformed(&tf), &moved).unwrap();
            for (a, b) in q0.iter().zip(&q) {
                assert!((a - b).abs() <= TOL, "{kind:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn selection_is_invariant_to_positive_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (a, b) = (rng.random_range(1e-3..100.0), rng.random_range(-100.0..100.0));
        let mapped: Vec<f64> = q.iter().map(|x| a * x + b).collect();
        assert_eq!(argmax_first(&q), argmax_first(&mapped));
    }
}

#[test]
fn imitation_without_multi_agent_supervision_ignores_other_futures() {
    let policy = MotionFormer::new(PolicyConfig::desk(), 3);
    let (sc, s, _) = setup(ScenarioKind::StraightFollow, 2);
    let mut edited = sc.clone();
    for t in &mut edited.agent_tracks {
        for st in t.states.iter_mut().skip(26) {
            st.position[1] += 3.0;
        }
    }
    let loss = |sc: &Scenario, mas: bool| {
        let targets = imitation_targets(sc, 25, 20, mas);
        let mut g = Graph::new();
        let (l, _) = policy.il_loss(&mut g, Ctx::new(&policy.store), &s, &targets).unwrap();
        g.value(l).item()
    };
    assert_eq!(loss(&sc, false), loss(&edited, false));
    assert_ne!(loss(&sc, true), loss(&edited, true));
}
