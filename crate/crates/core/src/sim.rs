//! Closed-loop simulation: planner → LQR tracker → bicycle model at 10 Hz.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{step_bicycle_with, BicycleState, ControlInput, LqrTracker};
use crate::frenet::ReferenceLine;
use crate::geometry::{self, wrap_angle, OrientedBox};
use crate::idm::{idm_accel, IdmParams};
use crate::scene::{AgentState, AgentTrack, Scenario, DT};
use crate::trajectory::TrajectoryAction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Nonreactive,
    IdmReactive,
}

impl SimMode {
    pub fn name(self) -> &'static str {
        match self {
            SimMode::Nonreactive => "nonreactive",
            SimMode::IdmReactive => "idm_reactive",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nonreactive" | "non_reactive" => Ok(SimMode::Nonreactive),
            "idm_reactive" | "reactive" => Ok(SimMode::IdmReactive),
            other => Err(format!("unknown simulation mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub history_steps: usize,
    pub plan_steps: usize,
    /// Replanning period in 0.1 s steps.
    pub replan_period: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            history_steps: 10,
            plan_steps: 20,
            replan_period: 5,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("replan period {period} must be in 1..={plan}")]
    ReplanPeriod { period: usize, plan: usize },
    #[error("scenario has {have} steps, need at least {need}")]
    TooShort { have: usize, need: usize },
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct PlanError(pub String);

/// What a planner sees at a replanning tick.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub scenario: &'a Scenario,
    pub step: usize,
    pub ego: BicycleState,
    /// `history_steps` states ending at `step`.
    pub ego_history: AgentTrack,
    pub agents: Vec<AgentTrack>,
    pub plan_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub action: TrajectoryAction,
    pub fallback: bool,
}

impl Plan {
    pub fn new(action: TrajectoryAction) -> Self {
        Self { action, fallback: false }
    }
}

pub trait Planner: Sync {
    fn name(&self) -> &str;
    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    Collision { step: usize, agent: u32, at_fault: bool },
    OffRoad { step: usize },
    Fallback { step: usize },
    PlannerFailure { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRecord {
    pub step: usize,
    pub action: TrajectoryAction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimLog {
    pub scenario_id: String,
    pub planner: String,
    pub mode: SimMode,
    /// First simulated step; earlier ego states are replayed from the log.
    pub start_step: usize,
    pub ego: Vec<AgentState>,
    /// Control applied at step `k` to reach step `k + 1` (absent while replaying).
    pub controls: Vec<Option<ControlInput>>,
    pub plans: Vec<PlanRecord>,
    pub agents: Vec<Vec<AgentState>>,
    pub events: Vec<SimEvent>,
    pub failed: Option<String>,
}

impl SimLog {
    pub fn collisions(&self) -> impl Iterator<Item = (usize, u32, bool)> + '_ {
        self.events.iter().filter_map(|e| match e {
            SimEvent::Collision { step, agent, at_fault } => Some((*step, *agent, *at_fault)),
            _ => None,
        })
    }

    pub fn fallback_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, SimEvent::Fallback { .. })).count()
    }
}

pub fn agent_state_of(b: &BicycleState) -> AgentState {
    AgentState {
        position: b.position,
        heading: b.heading,
        velocity: b.velocity(),
    }
}

/// Ego at fault unless it is (nearly) stationary, or it is struck from
/// behind while keeping its lane.
pub fn ego_at_fault(
    scenario: &Scenario,
    ego: &AgentState,
    ego_box: &OrientedBox,
    other: &AgentState,
) -> bool {
    if ego.speed() < 0.1 {
        return false;
    }
    let rel = geometry::to_local(other.position, ego.position, ego.heading);
    let from_behind = rel[0] < 0.0 && rel[1].abs() < -rel[0] + ego_box.width / 2.0;
    let lane_keeping = scenario
        .nearest_lane(ego.position)
        .is_some_and(|(_, _, h)| wrap_angle(ego.heading - h).abs() < 0.15);
    !(from_behind && lane_keeping)
}

struct ReactiveAgent {
    path: Option<ReferenceLine>,
    s_log: Vec<f64>,
    s: f64,
    v: f64,
    v_desired: f64,
}

/// Incremental closed-loop environment; [`run_closed_loop`] drives it with a
/// planner, the RL trainer drives it with actions directly.
pub struct ClosedLoop<'a> {
    pub scenario: &'a Scenario,
    pub mode: SimMode,
    pub config: SimConfig,
    tracker: &'a LqrTracker,
    step: usize,
    ego: BicycleState,
    log: SimLog,
    reactive: Vec<ReactiveAgent>,
    colliding: Vec<bool>,
    offroad: bool,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(scenario: &'a Scenario, mode: SimMode, config: SimConfig, planner_name: &str) -> Result<Self, SimError> {
        if config.replan_period == 0 || config.replan_period > config.plan_steps {
            return Err(SimError::ReplanPeriod {
                period: config.replan_period,
                plan: config.plan_steps,
            });
        }
        let need = config.history_steps + 1;
        if scenario.duration_steps < need || config.history_steps == 0 {
            return Err(SimError::TooShort {
                have: scenario.duration_steps,
                need,
            });
        }
        let start = config.history_steps - 1;
        let log_ego = &scenario.ego_track.states;
        let st = log_ego[start];
        let mut ego = BicycleState::new(st.position, st.heading, st.speed());
        if start > 0 && ego.speed > 0.5 {
            let yaw_rate = wrap_angle(st.heading - log_ego[start - 1].heading) / DT;
            ego.steering = (ego.wheelbase * yaw_rate / ego.speed).atan().clamp(-0.6, 0.6);
        }
        let reactive = scenario
            .agent_tracks
            .iter()
            .map(|t| {
                let pts: Vec<_> = t.states.iter().map(|s| s.position).collect();
                let length: f64 = pts.windows(2).map(|w| geometry::dist(w[0], w[1])).sum();
                let path = (length > 1.0).then(|| ReferenceLine::from_polyline(&pts).ok()).flatten();
                let s_log: Vec<f64> = match &path {
                    Some(p) => pts.iter().map(|q| p.project(*q).map_or(0.0, |f| f.s)).collect(),
                    None => vec![0.0; pts.len()],
                };
                let v_desired = t.states.iter().map(|s| s.speed()).fold(0.5, f64::max);
                ReactiveAgent {
                    s: s_log[start],
                    v: t.states[start].speed(),
                    path,
                    s_log,
                    v_desired,
                }
            })
            .collect();
        let mut ego_states: Vec<AgentState> = log_ego[..start].to_vec();
        ego_states.push(agent_state_of(&ego));
        let agents = (0..=start)
            .map(|k| scenario.agent_tracks.iter().map(|t| t.states[k]).collect())
            .collect();
        Ok(Self {
            scenario,
            mode,
            config,
            tracker: LqrTracker::shared(),
            step: start,
            ego,
            log: SimLog {
                scenario_id: scenario.id.clone(),
                planner: planner_name.to_string(),
                mode,
                start_step: start,
                ego: ego_states,
                controls: vec![None; start],
                plans: Vec::new(),
                agents,
                events: Vec::new(),
                failed: None,
            },
            reactive,
            colliding: vec![false; scenario.agent_tracks.len()],
            offroad: false,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn ego(&self) -> &BicycleState {
        &self.ego
    }

    pub fn done(&self) -> bool {
        self.step + 1 >= self.scenario.duration_steps || self.log.failed.is_some()
    }

    pub fn log(&self) -> &SimLog {
        &self.log
    }

    pub fn observe(&self) -> Observation<'a> {
        let t = self.config.history_steps;
        let lo = (self.step + 1).saturating_sub(t);
        let window = |states: Vec<AgentState>, base: &AgentTrack| AgentTrack {
            id: base.id,
            semantic: base.semantic,
            footprint: base.footprint,
            states,
        };
        let ego_hist = window(self.log.ego[lo..=self.step].to_vec(), &self.scenario.ego_track);
        let agents = self
            .scenario
            .agent_tracks
            .iter()
            .enumerate()
            .map(|(i, tr)| window((lo..=self.step).map(|k| self.log.agents[k][i]).collect(), tr))
            .collect();
        Observation {
            scenario: self.scenario,
            step: self.step,
            ego: self.ego,
            ego_history: ego_hist,
            agents,
            plan_steps: self.config.plan_steps,
        }
    }

    pub fn record_plan(&mut self, plan: &Plan) {
        if plan.fallback {
            self.log.events.push(SimEvent::Fallback { step: self.step });
        }
        self.log.plans.push(PlanRecord {
            step: self.step,
            action: plan.action.clone(),
        });
    }

    pub fn fail(&mut self, message: String) {
        self.log.events.push(SimEvent::PlannerFailure {
            step: self.step,
            message: message.clone(),
        });
        self.log.failed = Some(message);
    }

    fn advance_agents(&mut self, next: usize) -> Vec<AgentState> {
        let tracks = &self.scenario.agent_tracks;
        if self.mode == SimMode::Nonreactive {
            return tracks.iter().map(|t| t.states[next]).collect();
        }
        let current: Vec<AgentState> = self.log.agents[self.step].clone();
        let ego_state = agent_state_of(&self.ego);
        let mut out = Vec::with_capacity(tracks.len());
        for (i, tr) in tracks.iter().enumerate() {
            let ra = &self.reactive[i];
            let Some(path) = &ra.path else {
                out.push(tr.states[next]);
                continue;
            };
            // leader: nearest agent or the ego ahead on this agent's path
            let mut lead: Option<(f64, f64)> = None;
            let others = current
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, s)| (*s, tracks[j].footprint.length))
                .chain(std::iter::once((ego_state, self.scenario.ego_track.footprint.length)));
            for (o, len) in others {
                if let Ok(f) = path.project_within(o.position, 10.0) {
                    let ds = f.s - ra.s;
                    if f.l.abs() < 2.0 && ds > 0.0 && ds < 80.0 {
                        let gap = ds - 0.5 * (len + tr.footprint.length);
                        let v_lead = geometry::dot(o.velocity, geometry::heading_vector(path.heading_at(f.s))).max(0.0);
                        if lead.is_none_or(|(g, _)| gap < g) {
                            lead = Some((gap, v_lead));
                        }
                    }
                }
            }
            let params = IdmParams::default().with_v0(ra.v_desired);
            let a_idm = match lead {
                Some((gap, vl)) => idm_accel(ra.v, ra.v - vl, gap, &params),
                None => params.a_max,
            };
            // track the logged station profile unless IDM asks for harder braking
            let k = self.step;
            let v_log = (ra.s_log[next] - ra.s_log[k]) / DT;
            let a_log = 1.0 * (ra.s_log[k] - ra.s) + 2.0 * (v_log - ra.v);
            let a = a_idm.min(a_log).clamp(-params.b_hard, 3.0);
            let vn = (ra.v + a * DT).max(0.0);
            let sn = (ra.s + 0.5 * (ra.v + vn) * DT).min(path.length());
            let (p, h) = path.pose_at(sn);
            out.push(AgentState {
                position: p,
                heading: h,
                velocity: geometry::scale(geometry::heading_vector(h), vn),
            });
            let ra = &mut self.reactive[i];
            ra.s = sn;
            ra.v = vn;
        }
        out
    }

    /// Tracks `action` (issued at `plan_step`) for one period.
    pub fn advance(&mut self, action: &TrajectoryAction, plan_step: usize) {
        if self.done() {
            return;
        }
        let u = self.tracker.track(&self.ego, action, self.step - plan_step);
        let (next_ego, _) = step_bicycle_with(&self.ego, &u, DT, &self.tracker.config().limits);
        let next = self.step + 1;
        let agents = self.advance_agents(next);
        self.ego = next_ego;
        self.step = next;
        self.log.controls.push(Some(u));
        let ego_state = agent_state_of(&self.ego);
        self.log.ego.push(ego_state);
        let ego_box = OrientedBox::new(
            self.ego.position,
            self.ego.heading,
            self.scenario.ego_track.footprint.length,
            self.scenario.ego_track.footprint.width,
        );
        for (i, (tr, st)) in self.scenario.agent_tracks.iter().zip(&agents).enumerate() {
            let b = OrientedBox::new(st.position, st.heading, tr.footprint.length, tr.footprint.width);
            let hit = ego_box.overlaps(&b);
            if hit && !self.colliding[i] {
                self.log.events.push(SimEvent::Collision {
                    step: next,
                    agent: tr.id,
                    at_fault: ego_at_fault(self.scenario, &ego_state, &ego_box, st),
                });
            }
            self.colliding[i] = hit;
        }
        let off = !crate::metrics::box_drivable(self.scenario, &ego_box);
        if off && !self.offroad {
            self.log.events.push(SimEvent::OffRoad { step: next });
        }
        self.offroad = off;
        self.log.agents.push(agents);
    }

    pub fn any_collision_since(&self, step: usize) -> bool {
        self.log.collisions().any(|(s, _, _)| s > step)
    }

    pub fn finish(self) -> SimLog {
        self.log
    }
}

/// Runs `planner` over the whole scenario.
pub fn run_closed_loop(
    planner: &dyn Planner,
    scenario: &Scenario,
    mode: SimMode,
    config: SimConfig,
) -> Result<SimLog, SimError> {
    let mut env = ClosedLoop::new(scenario, mode, config, planner.name())?;
    let mut current: Option<(TrajectoryAction, usize)> = None;
    while !env.done() {
        let since = current.as_ref().map(|(_, s)| env.step() - s);
        if since.is_none_or(|d| d >= config.replan_period) {
            match planner.plan(&env.observe()) {
                Ok(plan) => {
                    env.record_plan(&plan);
                    current = Some((plan.action, env.step()));
                }
                Err(e) => {
                    env.fail(e.0);
                    break;
                }
            }
        }
        let (action, at) = current.as_ref().unwrap();
        let (action, at) = (action.clone(), *at);
        env.advance(&action, at);
    }
    Ok(env.finish())
}

/// Emits the logged ego future from the current step.
pub struct StayLogged;

impl Planner for StayLogged {
    fn name(&self) -> &str {
        "stay-logged"
    }

    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError> {
        let states = &obs.scenario.ego_track.states;
        let last = states.len() - 1;
        let pts = (1..=obs.plan_steps)
            .map(|j| {
                let k = obs.step + j;
                if k <= last {
                    states[k].position
                } else {
                    // constant-velocity extension past the end of the log
                    let s = states[last];
                    geometry::add(s.position, geometry::scale(s.velocity, (k - last) as f64 * DT))
                }
            })
            .collect();
        Ok(Plan::new(TrajectoryAction::new(pts)))
    }
}
