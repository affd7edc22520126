use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use ritp_core::metrics::render_svg;
use ritp_core::par::{self, Parallelism};
use ritp_core::post_opt::{IdmOnly, PostOptConfig};
use ritp_core::scenario_gen::generate_corpus;
use ritp_core::scene::{load_scenario, save_scenario, Scenario, SceneError, ScenarioLimits};
use ritp_core::sim::{run_closed_loop, Planner, SimMode, StayLogged};
use ritp_learn::config::{parse_assignment, parse_kinds, parse_pairs, ConfigError, RawValue, RunConfig};
use ritp_learn::motionformer::MotionFormer;
use ritp_learn::pipeline::{self, paired_deltas};
use ritp_learn::planners::{RitpHybrid, RitpPlanner};
use ritp_learn::reward::RewardNet;
use ritp_learn::trainer::{RitpModels, TrainHooks};
use ritp_learn::LearnError;

use crate::manifest::Manifest;
use crate::ConfigArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Stage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Learn(LearnError::NonFinite { .. } | LearnError::Nn(_)) => 2,
            _ => 1,
        }
    }
}

pub fn workers(n: Option<usize>) -> Result<Parallelism, CliError> {
    match n {
        None => Ok(Parallelism::default()),
        Some(0) => Err(CliError::Usage("RITP_NUM_WORKERS / --workers must be at least 1".into())),
        Some(1) => Ok(Parallelism::Sequential),
        Some(n) => {
            if !par::set_num_workers(n) {
                log::warn!("could not size the worker pool to {n}; using the default pool");
            }
            Ok(Parallelism::Parallel)
        }
    }
}

pub fn load_config(args: &ConfigArgs) -> Result<(RunConfig, Vec<PathBuf>), CliError> {
    let mut pairs: Vec<(String, RawValue)> = Vec::new();
    let mut inputs = Vec::new();
    if let Some(p) = &args.preset {
        pairs.push(("preset".into(), RawValue::Text(p.clone())));
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        pairs.extend(parse_pairs(&text)?);
        inputs.push(path.clone());
    }
    for s in &args.set {
        pairs.push(parse_assignment(s).ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{s}'")))?);
    }
    Ok((RunConfig::from_pairs(&pairs)?, inputs))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn open_log(path: &Path) -> Result<LineWriter<File>, CliError> {
    File::create(path).map(LineWriter::new).map_err(|e| CliError::io(path, e))
}

/// Scenarios from `dir` (every `*.json` except the manifest, by file name),
/// or the configured synthetic corpus.
pub fn load_scenarios(dir: Option<&Path>, cfg: &RunConfig) -> Result<(Vec<Scenario>, Vec<PathBuf>), CliError> {
    let Some(dir) = dir else {
        return Ok((pipeline::build_corpus(cfg)?, Vec::new()));
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no scenario files in {}", dir.display())));
    }
    let limits = ScenarioLimits {
        history_steps: cfg.history_steps,
        plan_steps: cfg.effective_plan_steps(),
        ..ScenarioLimits::default()
    };
    let scenarios = files.iter().map(|f| load_scenario(f, &limits)).collect::<Result<Vec<_>, _>>()?;
    Ok((scenarios, files))
}

fn stage_manifest(command: &str, cfg: &RunConfig, config_files: &[PathBuf], scenario_files: &[PathBuf]) -> Result<Manifest, CliError> {
    let mut m = Manifest::new(command, cfg.seed).with_config(cfg);
    for f in config_files.iter().chain(scenario_files) {
        m.input(Path::new(""), f)?;
    }
    Ok(m)
}

pub fn gen_scenarios(kinds: &str, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kinds = parse_kinds(kinds).map_err(|e| CliError::Usage(e.to_string()))?;
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    create_dir(out)?;
    let corpus = generate_corpus(&kinds, count, seed);
    let mut m = Manifest::new("gen-scenarios", seed);
    m.ablations = Vec::new();
    m.scenario_ids = Some(corpus.iter().map(|s| s.id.clone()).collect());
    for sc in &corpus {
        let path = out.join(format!("{}.json", sc.id));
        save_scenario(sc, &path)?;
        m.output(out, &path)?;
    }
    m.write(out)?;
    println!("wrote {} scenarios to {}", corpus.len(), out.display());
    Ok(())
}

pub fn train_reward(args: &ConfigArgs, scenarios: Option<&Path>, out: &Path, _par: Parallelism) -> Result<(), CliError> {
    let (cfg, cfg_files) = load_config(args)?;
    let (corpus, files) = load_scenarios(scenarios, &cfg)?;
    create_dir(out)?;
    let mut log = open_log(&out.join("train_reward.log.jsonl"))?;
    let net = pipeline::train_reward_stage(&cfg, &corpus, &mut log)?;
    let path = out.join("reward.json");
    write_file(&path, &net.store.to_json())?;
    let mut m = stage_manifest("train-reward", &cfg, &cfg_files, &files)?;
    m.output(out, &path)?;
    m.write(out)?;
    println!("reward checkpoint written to {}", path.display());
    Ok(())
}

pub fn pretrain_policy(args: &ConfigArgs, scenarios: Option<&Path>, out: &Path, _par: Parallelism) -> Result<(), CliError> {
    let (cfg, cfg_files) = load_config(args)?;
    let (corpus, files) = load_scenarios(scenarios, &cfg)?;
    create_dir(out)?;
    let mut log = open_log(&out.join("pretrain_policy.log.jsonl"))?;
    let policy = pipeline::pretrain_stage(&cfg, &corpus, &mut log)?;
    let path = out.join("policy.json");
    write_file(&path, &policy.store.to_json())?;
    let mut m = stage_manifest("pretrain-policy", &cfg, &cfg_files, &files)?;
    m.output(out, &path)?;
    m.write(out)?;
    println!("pretrained policy written to {}", path.display());
    Ok(())
}

fn read_checkpoint(path: &Path, missing: impl FnOnce() -> String) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(CliError::Stage(missing()));
    }
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_reward(cfg: &RunConfig, dir: Option<&Path>) -> Result<(RewardNet, PathBuf), CliError> {
    let path = dir.map(|d| d.join("reward.json")).unwrap_or_else(|| PathBuf::from("<none>/reward.json"));
    let text = read_checkpoint(&path, || {
        format!("reward checkpoint {} not found; run train-reward first and pass its output with --reward", path.display())
    })?;
    let mut net = RewardNet::new(cfg.reward(), cfg.seed.wrapping_add(1));
    net.store.load_json(&text).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
    Ok((net, path))
}

/// `actor.json` from train-ritp or `policy.json` from pretrain-policy.
fn load_policy(cfg: &RunConfig, dir: &Path, files: &[&str], stage: &str) -> Result<(MotionFormer, PathBuf), CliError> {
    let path = files.iter().map(|f| dir.join(f)).find(|p| p.is_file()).unwrap_or_else(|| dir.join(files[0]));
    let text = read_checkpoint(&path, || format!("policy checkpoint {} not found; run {stage} first", path.display()))?;
    let mut policy = pipeline::fresh_policy(cfg);
    policy.store.load_json(&text).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
    Ok((policy, path))
}

struct StageHooks<'a> {
    cfg: &'a RunConfig,
    eval: &'a [Scenario],
    dir: PathBuf,
    parallelism: Parallelism,
}

impl TrainHooks for StageHooks<'_> {
    fn evaluate(&mut self, actor: &MotionFormer) -> Result<Option<f64>, LearnError> {
        let planner = RitpPlanner { actor: actor.clone() };
        let r = pipeline::evaluate(self.cfg, &planner, self.eval, &[SimMode::Nonreactive], self.parallelism);
        Ok(r.summary(SimMode::Nonreactive).map(|s| s.mean_composite))
    }

    fn checkpoint(&mut self, models: &RitpModels, step: usize) -> Result<(), LearnError> {
        models.save(&self.dir.join(format!("step_{step:07}")))
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("ctrl-c handler unavailable: {e}");
    }
    flag
}

pub fn train_ritp(
    args: &ConfigArgs,
    scenarios: Option<&Path>,
    reward: Option<&Path>,
    pretrained: Option<&Path>,
    out: &Path,
    parallelism: Parallelism,
) -> Result<(), CliError> {
    let (cfg, mut cfg_files) = load_config(args)?;
    let (reward, reward_path) = load_reward(&cfg, reward)?;
    let warm = if cfg.ws {
        let dir = pretrained.ok_or_else(|| {
            CliError::Stage("warm start is on (ws=true): run pretrain-policy first and pass its output with --pretrained".into())
        })?;
        let (p, path) = load_policy(&cfg, dir, &["policy.json"], "pretrain-policy")?;
        cfg_files.push(path);
        Some(p)
    } else {
        None
    };
    cfg_files.push(reward_path);
    let (corpus, files) = load_scenarios(scenarios, &cfg)?;
    create_dir(out)?;
    let mut log = open_log(&out.join("train_ritp.log.jsonl"))?;
    let eval: Vec<Scenario> = corpus.iter().take(4).cloned().collect();
    let mut hooks = StageHooks {
        cfg: &cfg,
        eval: &eval,
        dir: out.join("checkpoints"),
        parallelism,
    };
    let stop = stop_flag();
    let (models, summary) = pipeline::train_ritp_stage(&cfg, &corpus, &reward, warm, parallelism, &mut log, &mut hooks, Some(&stop))?;
    log.flush().map_err(|e| CliError::io(out, e))?;
    models.save(out)?;
    let summary_path = out.join("summary.json");
    write_file(&summary_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    let mut m = stage_manifest("train-ritp", &cfg, &cfg_files, &files)?;
    for f in ritp_learn::trainer::CHECKPOINT_FILES {
        m.output(out, &out.join(f))?;
    }
    m.write(out)?;
    if summary.interrupted {
        println!("interrupted after {} environment steps; partial checkpoint written to {}", summary.env_steps, out.display());
    } else {
        println!("trained {} environment steps; checkpoint written to {}", summary.env_steps, out.display());
    }
    Ok(())
}

pub struct SimulateArgs<'a> {
    pub planner: &'a str,
    pub mode: &'a str,
    pub scenarios: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub report: &'a Path,
    pub plots: bool,
}

fn parse_modes(text: &str) -> Result<Vec<SimMode>, CliError> {
    if text == "both" {
        return Ok(vec![SimMode::Nonreactive, SimMode::IdmReactive]);
    }
    text.split(',')
        .map(|s| s.trim().parse::<SimMode>().map_err(CliError::Usage))
        .collect()
}

pub fn simulate(args: &ConfigArgs, sim: &SimulateArgs, parallelism: Parallelism) -> Result<(), CliError> {
    let (cfg, mut cfg_files) = load_config(args)?;
    let modes = parse_modes(sim.mode)?;
    let learned = sim.planner.starts_with("ritp");
    let actor = if learned {
        let dir = sim
            .checkpoint
            .ok_or_else(|| CliError::Stage(format!("planner {} needs --checkpoint (output of train-ritp or pretrain-policy)", sim.planner)))?;
        let (p, path) = load_policy(&cfg, dir, &["actor.json", "policy.json"], "train-ritp")?;
        cfg_files.push(path);
        Some(p)
    } else {
        None
    };
    let (corpus, files) = load_scenarios(sim.scenarios, &cfg)?;
    let planner: Box<dyn Planner + Send> = match (sim.planner, actor.clone()) {
        ("ritp", Some(a)) => Box::new(RitpPlanner { actor: a }),
        ("ritp-hybrid", Some(a)) => Box::new(RitpHybrid::new(a, parallelism)),
        ("stay-logged", _) => Box::new(StayLogged),
        ("idm-only", _) => Box::new(IdmOnly {
            config: PostOptConfig::desk(cfg.effective_plan_steps()),
        }),
        (other, _) => return Err(CliError::Usage(format!("unknown planner '{other}'"))),
    };
    let report = pipeline::evaluate(&cfg, planner.as_ref(), &corpus, &modes, parallelism);
    create_dir(sim.report)?;
    let mut m = stage_manifest("simulate", &cfg, &cfg_files, &files)?;
    let json_path = sim.report.join("report.json");
    write_file(&json_path, &report.to_json())?;
    m.output(sim.report, &json_path)?;
    let csv_path = sim.report.join("report.csv");
    write_file(&csv_path, &report.to_csv())?;
    m.output(sim.report, &csv_path)?;
    if let (true, Some(a)) = (sim.planner == "ritp-hybrid", actor) {
        let base = pipeline::evaluate(&cfg, &RitpPlanner { actor: a }, &corpus, &modes, parallelism);
        let deltas = paired_deltas(&base, &report);
        let path = sim.report.join("deltas.json");
        write_file(&path, &serde_json::to_string_pretty(&deltas).expect("deltas serialize"))?;
        m.output(sim.report, &path)?;
        for d in &deltas {
            println!("{} vs {} [{}]: mean paired delta {:+.4}", d.candidate, d.baseline, d.mode.name(), d.mean_delta);
        }
    }
    if sim.plots {
        let dir = sim.report.join("plots");
        create_dir(&dir)?;
        for mode in &modes {
            for sc in &corpus {
                let Ok(log) = run_closed_loop(planner.as_ref(), sc, *mode, cfg.sim()) else { continue };
                let path = dir.join(format!("{}_{}.svg", sc.id, mode.name()));
                write_file(&path, &render_svg(sc, &log))?;
                m.output(sim.report, &path)?;
            }
        }
    }
    m.write(sim.report)?;
    for s in &report.summaries {
        println!(
            "{} [{}]: mean composite {:.4}, success rate {:.3} over {} scenarios",
            report.planner,
            s.mode.name(),
            s.mean_composite,
            s.success_rate,
            s.scenarios
        );
    }
    Ok(())
}
