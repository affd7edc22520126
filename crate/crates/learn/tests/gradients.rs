//! Tape gradients against central differences for every primitive and
//! network block, plus the exact-zero stop-gradient contracts of the
//! imitation loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ritp_core::frenet::ReferenceLine;
use ritp_core::scenario_gen::{generate_synthetic_scenario, ScenarioKind};
use ritp_learn::criticformer::{actions_tensor, detach_encoded, CriticFormer};
use ritp_learn::features::{polygons_of, SceneInput};
use ritp_learn::motionformer::{il_terms, ModeVars, MotionFormer, PolicyConfig};
use ritp_learn::nn::gradcheck::{check_params, ZERO_FLOOR};
use ritp_learn::nn::{AttentionBlock, Ctx, Edges, FourierEmbedding, Graph, Gru, LayerNorm, Linear, Mlp, NnError, ParamStore, Tensor, Var};
use ritp_learn::reward::{logged_states, RewardConfig, RewardNet};
use ritp_learn::stages::irl_candidates;

const TOL: f64 = 1e-4;
const FLOOR: f64 = ZERO_FLOOR;
const DRAWS: usize = 100;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random magnitudes in [0.2, 1.5] with random signs, away from kinks at 0.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(rows, cols, 0.2, 1.5, rng);
    for v in t.data.iter_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ w ⊙ x` with fixed random weights, so no output coordinate cancels.
fn weighted(g: &mut Graph, x: Var, seed: u64) -> Result<Var, NnError> {
    let [r, c] = g.shape(x);
    let w = g.input(random(r, c, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_check(name: &str, store: &ParamStore, loss: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = check_params(store, loss, DRAWS, FLOOR, &mut rng).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error < TOL, "{name}: max relative error {:e} over {} coordinates", r.max_rel_error, r.checked);
}

struct Prims {
    store: ParamStore,
    a: ritp_learn::nn::ParamId,
    b: ritp_learn::nn::ParamId,
    c: ritp_learn::nn::ParamId,
    pos: ritp_learn::nn::ParamId,
}

fn prims(seed: u64) -> Prims {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", away_from_zero(4, 6, &mut rng));
    let b = store.add("b", away_from_zero(4, 6, &mut rng));
    let c = store.add("c", away_from_zero(6, 3, &mut rng));
    let pos = store.add("pos", random(4, 6, 0.5, 2.0, &mut rng));
    Prims { store, a, b, c, pos }
}

type Op = fn(&mut Graph, [Var; 4]) -> Result<Var, NnError>;

#[test]
fn primitives_match_finite_differences() {
    let ops: Vec<(&str, Op)> = vec![
        ("matmul", |g, [a, _, c, _]| g.matmul(a, c)),
        ("add", |g, [a, b, _, _]| g.add(a, b)),
        ("sub", |g, [a, b, _, _]| g.sub(a, b)),
        ("mul", |g, [a, b, _, _]| g.mul(a, b)),
        ("div", |g, [a, _, _, p]| g.div(a, p)),
        ("scale", |g, [a, ..]| Ok(g.scale(a, -1.7))),
        ("add_scalar", |g, [a, b, ..]| {
            let x = g.add_scalar(a, 0.3);
            g.mul(x, b)
        }),
        ("relu", |g, [a, ..]| Ok(g.relu(a))),
        ("tanh", |g, [a, ..]| Ok(g.tanh(a))),
        ("sigmoid", |g, [a, ..]| Ok(g.sigmoid(a))),
        ("exp", |g, [a, ..]| Ok(g.exp(a))),
        ("log", |g, [_, _, _, p]| Ok(g.log(p))),
        ("softplus", |g, [a, ..]| Ok(g.softplus(a))),
        ("abs", |g, [a, ..]| Ok(g.abs(a))),
        ("sin", |g, [a, ..]| Ok(g.sin(a))),
        ("cos", |g, [a, ..]| Ok(g.cos(a))),
        ("one_minus", |g, [a, b, ..]| {
            let x = g.one_minus(a);
            g.mul(x, b)
        }),
        ("softmax_rows", |g, [a, ..]| Ok(g.softmax_rows(a))),
        ("logsumexp_rows", |g, [a, ..]| Ok(g.logsumexp_rows(a))),
        ("layer_norm_rows", |g, [a, ..]| Ok(g.layer_norm_rows(a, 1e-5))),
        ("concat_cols", |g, [a, b, ..]| g.concat_cols(&[a, b])),
        ("concat_rows", |g, [a, b, ..]| g.concat_rows(&[b, a])),
        ("slice_cols", |g, [a, ..]| g.slice_cols(a, 1, 3)),
        ("slice_rows", |g, [a, ..]| g.slice_rows(a, 1, 2)),
        ("gather", |g, [a, ..]| g.gather(a, &[3, 0, 3, 1])),
        ("scatter_add", |g, [a, ..]| g.scatter_add(a, &[1, 0, 1, 2], 3)),
        ("sum", |g, [a, b, ..]| {
            let s = g.sum(a);
            let s = g.mul(s, s)?;
            let t = g.sum(b);
            g.add(s, t)
        }),
        ("mean", |g, [a, ..]| {
            let m = g.mean(a);
            g.mul(m, m)
        }),
        ("row_sum", |g, [a, ..]| Ok(g.row_sum(a))),
        ("transpose", |g, [a, ..]| Ok(g.transpose(a))),
        ("reshape", |g, [a, ..]| g.reshape(a, 8, 3)),
        ("head_dot", |g, [a, b, ..]| g.head_dot(a, b, 3)),
        ("head_expand", |g, [_, _, c, _]| Ok(g.head_expand(c, 2))),
        ("detach", |g, [a, ..]| {
            let d = g.detach(a);
            let t = g.tanh(d);
            g.mul(a, t)
        }),
        ("segment_softmax", |g, [a, ..]| g.segment_softmax(a, &[0, 1, 0, 1], 2)),
    ];
    for (i, (name, op)) in ops.iter().enumerate() {
        for draw in 0..3u64 {
            let p = prims(100 * i as u64 + draw);
            let ids = [p.a, p.b, p.c, p.pos];
            let loss = |g: &mut Graph, s: &ParamStore| {
                let vars = ids.map(|id| g.param(s, id));
                let out = op(g, vars)?;
                weighted(g, out, 7 + draw)
            };
            assert_check(name, &p.store, &loss, draw);
        }
    }
}

fn edges(n_dst: usize, n_src: usize, rng: &mut ChaCha8Rng) -> Edges {
    let mut e = Edges::default();
    for d in 0..n_dst {
        for s in 0..n_src {
            if rng.random_bool(0.7) || s == d % n_src {
                e.push(
                    d,
                    s,
                    [rng.random_range(0.5..30.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-5.0..0.0)],
                );
            }
        }
    }
    e
}

#[test]
fn layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, true, &mut rng);
    let x = away_from_zero(3, 5, &mut rng);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.input(x.clone());
        let y = lin.forward(g, Ctx::new(s), xv)?;
        weighted(g, y, 1)
    };
    assert_check("linear", &store, &loss, 1);

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[5, 8, 3], &mut rng);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.input(x.clone());
        let y = mlp.forward(g, Ctx::new(s), xv)?;
        weighted(g, y, 2)
    };
    assert_check("mlp", &store, &loss, 2);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 5);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.input(x.clone());
        let y = ln.forward(g, Ctx::new(s), xv)?;
        weighted(g, y, 3)
    };
    assert_check("layer_norm", &store, &loss, 3);

    let mut store = ParamStore::new();
    let fe = FourierEmbedding::new(&mut store, "fourier", 5, 4, 8, &mut rng);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.input(x.clone());
        let y = fe.forward(g, Ctx::new(s), xv)?;
        weighted(g, y, 4)
    };
    assert_check("fourier", &store, &loss, 4);

    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", 5, 6, &mut rng);
    let xs: Vec<Tensor> = (0..4).map(|_| away_from_zero(2, 5, &mut rng)).collect();
    let loss = |g: &mut Graph, s: &ParamStore| {
        let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = gru.run(g, Ctx::new(s), &vs)?;
        weighted(g, y, 5)
    };
    assert_check("gru", &store, &loss, 5);

    let mut store = ParamStore::new();
    let att = AttentionBlock::new(&mut store, "att", 8, 2, 4, &mut rng);
    let q = away_from_zero(3, 8, &mut rng);
    let src = away_from_zero(5, 8, &mut rng);
    let e = edges(3, 5, &mut rng);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let qv = g.input(q.clone());
        let sv = g.input(src.clone());
        let y = att.forward(g, Ctx::new(s), qv, sv, &e)?;
        weighted(g, y, 6)
    };
    assert_check("attention", &store, &loss, 6);
}

fn scene() -> (ritp_core::scene::Scenario, SceneInput) {
    let sc = generate_synthetic_scenario(ScenarioKind::StopAtIntersection, 5);
    let s = SceneInput::from_log(&sc, 20, 10).unwrap();
    (sc, s)
}

fn as_nn(e: ritp_learn::LearnError) -> NnError {
    NnError::Input(e.to_string())
}

#[test]
fn scene_encoder_matches_finite_differences() {
    let (_, s) = scene();
    let policy = MotionFormer::new(PolicyConfig::desk(), 4);
    let loss = |g: &mut Graph, st: &ParamStore| {
        let enc = policy.encode_scene(g, Ctx::new(st), &s).map_err(as_nn)?;
        let a = weighted(g, enc.agents, 1)?;
        let m = weighted(g, enc.map, 2)?;
        g.add(a, m)
    };
    assert_check("scene_encoder", &policy.store, &loss, 7);
}

#[test]
fn policy_imitation_loss_matches_finite_differences() {
    let (sc, s) = scene();
    let policy = MotionFormer::new(PolicyConfig::desk(), 4);
    let targets = ritp_learn::stages::imitation_targets(&sc, 20, 20, true);
    assert!(targets.len() > 1);
    let loss = |g: &mut Graph, st: &ParamStore| {
        let (l, _) = policy.il_loss(g, Ctx::new(st), &s, &targets).map_err(as_nn)?;
        Ok(l)
    };
    assert_check("motionformer", &policy.store, &loss, 8);
}

#[test]
fn critic_matches_finite_differences() {
    let (sc, s) = scene();
    let policy = MotionFormer::new(PolicyConfig::desk(), 4);
    let critic = CriticFormer::new(&policy.config, "critic", 9);
    let line = ReferenceLine::from_route(&sc).unwrap();
    let ego = ritp_learn::reward::bicycle_from_log(&sc.ego_track.states[20]);
    let mut cfg = ritp_core::sampler::SamplerConfig::desk(20);
    cfg.max_samples = 3;
    let actions = ritp_core::sampler::sample_actions(&ego, &line, &cfg).unwrap();
    let loss = |g: &mut Graph, st: &ParamStore| {
        let enc = policy.encode_scene(g, Ctx::frozen(&policy.store), &s).map_err(as_nn)?;
        let enc = detach_encoded(g, &enc);
        let a = g.input(actions_tensor(&s, &actions));
        let q = critic.q_values(g, Ctx::new(st), &s, &enc, a, actions.len()).map_err(as_nn)?;
        weighted(g, q, 3)
    };
    assert_check("criticformer", &critic.store, &loss, 9);
}

#[test]
fn reward_losses_match_finite_differences() {
    let (sc, _) = scene();
    let net = RewardNet::new(RewardConfig::desk(), 3);
    let line = ReferenceLine::from_route(&sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cands = irl_candidates(&sc, &line, 20, 20, 4, &mut rng);
    let demo = logged_states(&sc, 20, 20);
    let polys = polygons_of(&sc);
    let masks = net.sample_masks(&mut rng);
    let loss = |g: &mut Graph, st: &ParamStore| {
        let (l, _) = net.irl_loss(g, Ctx::with_masks(st, &masks), &polys, &demo, &cands).map_err(as_nn)?;
        Ok(l)
    };
    assert_check("rewardformer", &net.store, &loss, 10);
}

fn mode_vars(g: &mut Graph, s: &ParamStore, ids: &[ritp_learn::nn::ParamId; 5]) -> ModeVars {
    let [pl, ps, rl, rs, lg] = ids.map(|id| g.param(s, id));
    let ps = g.softplus(ps);
    let rs = g.softplus(rs);
    let rho = g.softmax_rows(lg);
    ModeVars {
        proposal_loc: pl,
        proposal_scale: ps,
        refined_loc: rl,
        refined_scale: rs,
        logits: lg,
        rho,
    }
}

#[test]
fn stop_gradient_contracts_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (k, tp) = (4, 6);
    for _ in 0..DRAWS {
        let mut store = ParamStore::new();
        let ids = [
            store.add("pl", random(k, 2 * tp, -3.0, 3.0, &mut rng)),
            store.add("ps", random(k, 2 * tp, -1.0, 1.0, &mut rng)),
            store.add("rl", random(k, 2 * tp, -3.0, 3.0, &mut rng)),
            store.add("rs", random(k, 2 * tp, -1.0, 1.0, &mut rng)),
            store.add("lg", random(1, k, -1.0, 1.0, &mut rng)),
        ];
        let target: Vec<[f64; 2]> = (0..tp).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();

        let mut g = Graph::new();
        let v = mode_vars(&mut g, &store, &ids);
        let t = il_terms(&mut g, &v, &target).unwrap();
        let grads = g.backward(t.classification).unwrap();
        let mut s = store.clone();
        g.accumulate(&grads, &mut s);
        for id in &ids[..4] {
            assert!(s.grad(*id).data.iter().all(|x| *x == 0.0), "classification loss reaches locations or scales");
        }
        assert!(s.grad(ids[4]).data.iter().any(|x| *x != 0.0));

        let mut g = Graph::new();
        let v = mode_vars(&mut g, &store, &ids);
        let t = il_terms(&mut g, &v, &target).unwrap();
        let reg = g.add(t.proposal, t.refinement).unwrap();
        let grads = g.backward(reg).unwrap();
        let mut s = store.clone();
        g.accumulate(&grads, &mut s);
        for id in &ids[..4] {
            let gr = s.grad(*id);
            for m in 0..k {
                let row = gr.row(m);
                if m == t.winner {
                    assert!(row.iter().any(|x| *x != 0.0));
                } else {
                    assert!(row.iter().all(|x| *x == 0.0), "losing mode {m} receives gradient");
                }
            }
        }
    }
}
