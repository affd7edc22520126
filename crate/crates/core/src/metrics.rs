//! Closed-loop metrics, batch evaluation and report output.
//!
//! Composite score:
//!
//! ```text
//! (NAFC · DAC · DDC · MP) × (5·TTCWB + 5·PARR + 4·SLC + 2·CMFT) / 16
//! ```

use std::fmt::Write as _;

use serde::Serialize;

use crate::frenet::ReferenceLine;
use crate::geometry::{self, wrap_angle, OrientedBox};
use crate::par::{self, Parallelism};
use crate::scene::{AgentState, Footprint, Scenario, DT};
use crate::sim::{run_closed_loop, Planner, SimConfig, SimLog, SimMode};

pub const DAC_THRESHOLD: f64 = 0.98;
pub const DRIVABLE_TOLERANCE: f64 = 0.3;
pub const TTC_BOUND: f64 = 1.0;
pub const TTC_HORIZON: f64 = 3.0;
pub const MIN_PROGRESS: f64 = 2.0;
pub const WRONG_WAY_DISTANCE: f64 = 2.0;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_JERK: f64 = 5.0;
pub const COMFORT_QUANTILE: f64 = 0.95;
pub const WEIGHTS: [f64; 4] = [5.0, 5.0, 4.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub nafc: f64,
    pub dac: f64,
    pub ddc: f64,
    pub ttcwb: f64,
    pub mp: f64,
    pub parr: f64,
    pub slc: f64,
    pub cmft: f64,
    pub composite: f64,
    pub success: bool,
    pub progress: f64,
    pub expert_progress: f64,
}

/// The documented aggregate; monotone in every component.
pub fn composite(nafc: f64, dac: f64, ddc: f64, mp: f64, ttcwb: f64, parr: f64, slc: f64, cmft: f64) -> f64 {
    let w = WEIGHTS;
    let gate = nafc * dac * ddc * mp;
    gate * (w[0] * ttcwb + w[1] * parr + w[2] * slc + w[3] * cmft) / w.iter().sum::<f64>()
}

/// Every footprint corner within a lane corridor (plus tolerance).
pub fn box_drivable(scenario: &Scenario, b: &OrientedBox) -> bool {
    b.corners().iter().all(|c| {
        scenario
            .lanes()
            .any(|lane| lane.closest(*c).0 <= lane.width / 2.0 + DRIVABLE_TOLERANCE)
    })
}

fn ego_box(scenario: &Scenario, s: &AgentState) -> OrientedBox {
    let f = scenario.ego_track.footprint;
    OrientedBox::new(s.position, s.heading, f.length, f.width)
}

/// Smallest time in `[0, TTC_HORIZON]` at which constant-velocity projections
/// overlap; agents behind the ego are ignored. `inf` when none.
pub fn time_to_collision(scenario: &Scenario, ego: &AgentState, agents: &[AgentState]) -> f64 {
    time_to_collision_with(
        scenario.ego_track.footprint,
        ego,
        scenario.agent_tracks.iter().map(|t| t.footprint).zip(agents.iter().copied()),
    )
}

pub fn time_to_collision_with(
    ego_fp: Footprint,
    ego: &AgentState,
    others: impl Iterator<Item = (Footprint, AgentState)>,
) -> f64 {
    let n = (TTC_HORIZON / DT).round() as usize;
    let mut best = f64::INFINITY;
    for (fp, a) in others {
        let rel = geometry::to_local(a.position, ego.position, ego.heading);
        if rel[0] < 0.0 {
            continue;
        }
        for i in 0..=n {
            let t = i as f64 * DT;
            if t >= best {
                break;
            }
            let e = OrientedBox::new(geometry::add(ego.position, geometry::scale(ego.velocity, t)), ego.heading, ego_fp.length, ego_fp.width);
            let o = OrientedBox::new(geometry::add(a.position, geometry::scale(a.velocity, t)), a.heading, fp.length, fp.width);
            if e.overlaps(&o) {
                best = t;
                break;
            }
        }
    }
    best
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

fn route_progress(line: Option<&ReferenceLine>, a: &AgentState, b: &AgentState) -> f64 {
    match line {
        Some(l) => match (l.project(a.position), l.project(b.position)) {
            (Ok(p), Ok(q)) => q.s - p.s,
            _ => 0.0,
        },
        None => geometry::dist(a.position, b.position),
    }
}

pub fn compute_metrics(log: &SimLog, scenario: &Scenario) -> MetricsReport {
    let start = log.start_step.min(log.ego.len().saturating_sub(1));
    let ego = &log.ego[start..];
    let steps = ego.len().max(1) as f64;
    let route = ReferenceLine::from_route(scenario).ok();

    let nafc = if log.collisions().any(|(_, _, f)| f) { 0.0 } else { 1.0 };
    let inside = ego.iter().filter(|s| box_drivable(scenario, &ego_box(scenario, s))).count() as f64;
    let dac = if inside / steps >= DAC_THRESHOLD { 1.0 } else { 0.0 };

    let mut wrong_way = 0.0;
    for w in ego.windows(2) {
        if let Some((_, _, h)) = scenario.nearest_lane(w[1].position) {
            if wrap_angle(w[1].heading - h).abs() > std::f64::consts::FRAC_PI_2 {
                wrong_way += geometry::dist(w[0].position, w[1].position);
            }
        }
    }
    let ddc = if wrong_way >= WRONG_WAY_DISTANCE { 0.0 } else { 1.0 };

    let ttc_ok = ego
        .iter()
        .enumerate()
        .filter(|(i, s)| s.speed() < 0.1 || time_to_collision(scenario, s, &log.agents[start + i]) >= TTC_BOUND)
        .count() as f64;
    let ttcwb = ttc_ok / steps;

    let last = ego.len() - 1;
    let progress = route_progress(route.as_ref(), &ego[0], &ego[last]);
    let expert = &scenario.ego_track.states;
    let expert_last = (start + last).min(expert.len() - 1);
    let expert_progress = route_progress(route.as_ref(), &expert[start], &expert[expert_last]);
    let mp = if progress >= MIN_PROGRESS.min(0.5 * expert_progress.max(0.0)) && (progress > 0.0 || expert_progress <= 0.0) {
        1.0
    } else {
        0.0
    };
    let parr = if expert_progress <= 0.1 {
        1.0
    } else {
        (progress / expert_progress).clamp(0.0, 1.0)
    };

    let within = ego
        .iter()
        .filter(|s| s.speed() <= scenario.speed_limit_at(s.position) + 1e-9)
        .count() as f64;
    let slc = within / steps;

    let speeds: Vec<f64> = ego.iter().map(|s| s.speed()).collect();
    let accel: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / DT).collect();
    let jerk: Vec<f64> = accel.windows(2).map(|w| (w[1] - w[0]) / DT).collect();
    let a95 = quantile(accel.iter().map(|a| a.abs()).collect(), COMFORT_QUANTILE);
    let j95 = quantile(jerk.iter().map(|j| j.abs()).collect(), COMFORT_QUANTILE);
    let cmft = if a95 <= MAX_ACCEL && j95 <= MAX_JERK { 1.0 } else { 0.0 };

    let failed = log.failed.is_some();
    let score = if failed {
        0.0
    } else {
        composite(nafc, dac, ddc, mp, ttcwb, parr, slc, cmft)
    };
    MetricsReport {
        nafc,
        dac,
        ddc,
        ttcwb,
        mp,
        parr,
        slc,
        cmft,
        composite: score,
        success: nafc == 1.0 && !failed,
        progress,
        expert_progress,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub mode: SimMode,
    pub metrics: Option<MetricsReport>,
    pub fallbacks: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: SimMode,
    pub scenarios: usize,
    pub mean_composite: f64,
    pub success_rate: f64,
    pub mean: [f64; 8],
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchReport {
    pub planner: String,
    pub results: Vec<ScenarioResult>,
    pub summaries: Vec<ModeSummary>,
}

pub const COMPONENT_NAMES: [&str; 8] = ["nafc", "dac", "ddc", "ttcwb", "mp", "parr", "slc", "cmft"];

fn components(m: &MetricsReport) -> [f64; 8] {
    [m.nafc, m.dac, m.ddc, m.ttcwb, m.mp, m.parr, m.slc, m.cmft]
}

impl BatchReport {
    pub fn summary(&self, mode: SimMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario_id,mode,");
        out.push_str(&COMPONENT_NAMES.join(","));
        out.push_str(",composite,success,fallbacks,error\n");
        for r in &self.results {
            let _ = write!(out, "{},{},", r.scenario_id, r.mode.name());
            match &r.metrics {
                Some(m) => {
                    for c in components(m) {
                        let _ = write!(out, "{c:.6},");
                    }
                    let _ = write!(out, "{:.6},{},", m.composite, m.success);
                }
                None => out.push_str(",,,,,,,,0,false,"),
            }
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(out, "{},{}", r.fallbacks, err);
        }
        out
    }
}

pub fn summarize(mode: SimMode, results: &[ScenarioResult]) -> ModeSummary {
    let rows: Vec<&ScenarioResult> = results.iter().filter(|r| r.mode == mode).collect();
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; 8];
    let mut comp = 0.0;
    let mut ok = 0.0;
    for r in &rows {
        if let Some(m) = &r.metrics {
            for (acc, c) in mean.iter_mut().zip(components(m)) {
                *acc += c / n;
            }
            comp += m.composite / n;
            if m.success {
                ok += 1.0;
            }
        }
    }
    ModeSummary {
        mode,
        scenarios: rows.len(),
        mean_composite: comp,
        success_rate: ok / n,
        mean,
    }
}

/// Evaluates every scenario in every mode; failures are recorded and the
/// batch continues. Results are ordered by (mode, scenario id).
pub fn batch_evaluate(
    planner: &dyn Planner,
    scenarios: &[Scenario],
    modes: &[SimMode],
    config: SimConfig,
    parallelism: Parallelism,
) -> BatchReport {
    let jobs: Vec<(SimMode, usize)> = modes.iter().flat_map(|m| (0..scenarios.len()).map(move |i| (*m, i))).collect();
    let mut results = par::map(parallelism, &jobs, |(mode, i)| {
        let sc = &scenarios[*i];
        match run_closed_loop(planner, sc, *mode, config) {
            Ok(log) => ScenarioResult {
                scenario_id: sc.id.clone(),
                mode: *mode,
                metrics: Some(compute_metrics(&log, sc)),
                fallbacks: log.fallback_count(),
                error: log.failed.clone(),
            },
            Err(e) => ScenarioResult {
                scenario_id: sc.id.clone(),
                mode: *mode,
                metrics: None,
                fallbacks: 0,
                error: Some(e.to_string()),
            },
        }
    });
    results.sort_by(|a, b| (a.mode, &a.scenario_id).cmp(&(b.mode, &b.scenario_id)));
    let summaries = modes.iter().map(|m| summarize(*m, &results)).collect();
    BatchReport {
        planner: planner.name().to_string(),
        results,
        summaries,
    }
}

/// Map, expert path and simulated ego path.
pub fn render_svg(scenario: &Scenario, log: &SimLog) -> String {
    let mut pts: Vec<[f64; 2]> = log.ego.iter().map(|s| s.position).collect();
    pts.extend(scenario.ego_track.states.iter().map(|s| s.position));
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let pad = 15.0;
    let (x0, y0, x1, y1) = (x0 - pad, y0 - pad, x1 + pad, y1 + pad);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.1} {:.1} {:.1} {:.1}" width="900">"#,
        -y1,
        x1 - x0,
        y1 - y0
    );
    let poly = |svg: &mut String, pts: &mut dyn Iterator<Item = [f64; 2]>, stroke: &str, width: f64| {
        let coords: Vec<String> = pts.map(|p| format!("{:.2},{:.2}", p[0], -p[1])).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width:.2}" stroke-linejoin="round"/>"#,
            coords.join(" ")
        );
    };
    for lane in &scenario.map_polygons {
        let colour = match lane.semantic {
            crate::scene::PolygonKind::Lane => "#dddddd",
            crate::scene::PolygonKind::StopLine => "#cc3333",
            crate::scene::PolygonKind::Crosswalk => "#bbbbee",
        };
        poly(&mut svg, &mut lane.points.iter().map(|p| p.position()), colour, lane.width);
    }
    poly(&mut svg, &mut scenario.ego_track.states.iter().map(|s| s.position), "#2266cc", 0.4);
    poly(&mut svg, &mut log.ego.iter().map(|s| s.position), "#dd3311", 0.4);
    if let Some(last) = log.agents.last() {
        for s in last {
            let _ = writeln!(svg, r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="#444444"/>"##, s.position[0], -s.position[1]);
        }
    }
    svg.push_str("</svg>\n");
    svg
}
