use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ritp_core::dynamics::BicycleState;
use ritp_core::metrics::batch_evaluate;
use ritp_core::par::Parallelism;
use ritp_core::post_opt::{score_proposals, PostOptConfig};
use ritp_core::scenario_gen::{generate_corpus, generate_synthetic_scenario, ScenarioKind};
use ritp_core::sim::{SimConfig, SimMode, StayLogged};
use ritp_core::{TrajectoryAction, DT};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn batch(c: &mut Criterion) {
    let corpus = generate_corpus(&ScenarioKind::ALL, 16, 0);
    let mut g = c.benchmark_group("batch_evaluate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, m| {
            b.iter(|| batch_evaluate(&StayLogged, &corpus, &[SimMode::IdmReactive], SimConfig::default(), *m))
        });
    }
    g.finish();
}

fn proposals(c: &mut Criterion) {
    let sc = generate_synthetic_scenario(ScenarioKind::StraightFollow, 0);
    let ego = sc.ego_track.states[9];
    let state = BicycleState::new(ego.position, ego.heading, ego.speed());
    let action = TrajectoryAction::new(
        (1..=20)
            .map(|j| [ego.position[0] + ego.speed() * j as f64 * DT, ego.position[1]])
            .collect(),
    );
    let cfg = PostOptConfig::desk(20);
    let mut g = c.benchmark_group("score_proposals");
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, m| {
            b.iter(|| score_proposals(&action, &state, &sc, &[], &cfg, *m))
        });
    }
    g.finish();
}

criterion_group!(benches, batch, proposals);
criterion_main!(benches);
