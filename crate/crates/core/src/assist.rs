//! Assisted planning: decides when the language model is consulted,
//! serializes the scene to text, parses both response styles, runs the
//! bounded multi-query loop, and falls back to the base planner.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{ChatRequest, CompletionBackend};
use crate::geom::Pose2D;
use crate::idm::{
    self, emergency_brake, generate_proposals, PlannerParams, Proposal, PROPOSAL_HORIZON,
};
use crate::metrics::{MetricConfig, MetricReport};
use crate::model::{
    AgentKind, AgentState, EgoState, LightState, Trajectory, TrajectorySample, WorldView,
};
use crate::sim::{
    check_emergency, forecast_constant_velocity, score_proposal, score_proposals, select_best,
};

pub const PARAM_SYSTEM_PROMPT: &str = include_str!("../prompts/parameter_planner_system.txt");
pub const TRAJECTORY_SYSTEM_PROMPT: &str =
    include_str!("../prompts/trajectory_planner_system.txt");
pub const USER_TURN_TEMPLATE: &str = include_str!("../prompts/user_turn.txt");

/// Token budget requested per completion.
pub const DEFAULT_MAX_TOKENS: u32 = 512;
/// Spacing of the waypoints expected from the direct-trajectory variant.
pub const WAYPOINT_SPACING_S: f64 = 2.0;
pub const WAYPOINT_COUNT: usize = 4;
/// Waypoint spacing may imply at most this multiple of the speed limit.
pub const WAYPOINT_SPEED_SLACK: f64 = 1.5;

const QUERY_BUDGETS: [u32; 4] = [0, 1, 2, 4];

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no parseable JSON object in reply")]
    NoJson,
    #[error("missing required field {0}")]
    MissingField(&'static str),
    #[error("field {0} is not numeric")]
    NotNumeric(&'static str),
    #[error("expected {WAYPOINT_COUNT} waypoints, got {0}")]
    WaypointCount(usize),
    #[error("waypoint spacing implies an implausible speed ({0:.1} m/s)")]
    ImplausibleSpeed(f64),
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("planner internal error: {0}")]
    Internal(String),
}

/// When and how often the language model is consulted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvocationPolicy {
    /// Predicted aggregate below which the model is invoked.
    pub score_threshold: f64,
    /// Maximum completions per planning step (0, 1, 2 or 4).
    pub max_queries_per_step: u32,
    /// Whether a model-requested emergency brake is honored.
    pub allow_llm_emergency_brake: bool,
    /// Sampling temperature passed to the backend.
    pub temperature: f64,
}

impl Default for InvocationPolicy {
    fn default() -> Self {
        Self {
            score_threshold: 0.8,
            max_queries_per_step: 4,
            allow_llm_emergency_brake: true,
            temperature: 1.4,
        }
    }
}

impl InvocationPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(format!(
                "score_threshold {} outside [0, 1]",
                self.score_threshold
            ));
        }
        if !QUERY_BUDGETS.contains(&self.max_queries_per_step) {
            return Err(format!(
                "max_queries_per_step {} not one of {QUERY_BUDGETS:?}",
                self.max_queries_per_step
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        Ok(())
    }
}

/// Parameter-style reply: a parameter set for the base planner plus the
/// requested one-sentence rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmParamResponse {
    pub params: PlannerParams,
    pub invoke_emergency_brake: Option<bool>,
    pub rationale: String,
}

/// Direct-trajectory reply: four waypoints at fixed spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmTrajectoryResponse {
    pub waypoints: [(f64, f64); WAYPOINT_COUNT],
    pub rationale: String,
}

/// True when the base planner's best predicted score is too low and the
/// query budget allows a consultation.
pub fn should_invoke(best_predicted_aggregate: f64, policy: &InvocationPolicy) -> bool {
    policy.max_queries_per_step > 0 && best_predicted_aggregate < policy.score_threshold
}

fn fmt2(v: f64) -> String {
    // Avoid "-0.00" so serialization is stable around zero.
    let r = if v.abs() < 0.005 { 0.0 } else { v };
    format!("{r:.2}")
}

fn fmt4(v: f64) -> String {
    let r = if v.abs() < 0.00005 { 0.0 } else { v };
    format!("{r:.4}")
}

/// Deterministic plain-text rendering of the current world state and the
/// scored proposals. Agents appear in id order; numbers are fixed to two
/// decimals (headings four) so identical states serialize identically.
pub fn serialize_scene(view: &WorldView, proposals: &[Proposal]) -> String {
    let mut out = String::new();
    let s = view.scenario;
    out.push_str(&format!(
        "SCENE {} tick {} time {}\n",
        s.id,
        view.tick,
        fmt2(view.time)
    ));
    let ego = view.ego;
    out.push_str(&format!(
        "EGO x {} y {} heading {} speed {} accel {} length {} width {}\n",
        fmt2(ego.pose.x),
        fmt2(ego.pose.y),
        fmt4(ego.pose.heading),
        fmt2(ego.velocity),
        fmt2(ego.acceleration),
        fmt2(ego.length),
        fmt2(ego.width)
    ));

    out.push_str(&format!("LANES {}\n", s.lanes.len()));
    for lane in &s.lanes {
        let n_samples = 6.min(lane.centerline.len());
        let samples: Vec<String> = (0..n_samples)
            .map(|i| {
                let idx = i * (lane.centerline.len() - 1) / (n_samples - 1).max(1);
                let p = &lane.centerline[idx];
                format!("{},{}", fmt2(p.x), fmt2(p.y))
            })
            .collect();
        let successors = if lane.successors.is_empty() {
            "-".to_owned()
        } else {
            lane.successors.join(",")
        };
        out.push_str(&format!(
            "LANE {} speed_limit {} length {} samples {} successors {}\n",
            lane.id,
            fmt2(lane.speed_limit),
            fmt2(lane.length()),
            samples.join(";"),
            successors
        ));
    }

    out.push_str(&format!("TRAFFIC_LIGHTS {}\n", s.traffic_lights.len()));
    for tl in &s.traffic_lights {
        let state = match tl.state_at(view.time) {
            LightState::Red => "red",
            LightState::Green => "green",
        };
        out.push_str(&format!("LIGHT {} {}\n", tl.lane_id, state));
    }

    let mut agents: Vec<&AgentState> = view.agents.iter().collect();
    agents.sort_by(|a, b| a.id.cmp(&b.id));
    out.push_str(&format!("AGENTS {}\n", agents.len()));
    for a in agents {
        let kind = match a.kind {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::StaticObject => "static_object",
        };
        out.push_str(&format!(
            "AGENT {} {} x {} y {} heading {} speed {} length {} width {} lane {}\n",
            a.id,
            kind,
            fmt2(a.pose.x),
            fmt2(a.pose.y),
            fmt4(a.pose.heading),
            fmt2(a.speed),
            fmt2(a.length),
            fmt2(a.width),
            a.lane_id.as_deref().unwrap_or("-")
        ));
    }

    out.push_str(&format!("PROPOSALS {}\n", proposals.len()));
    for p in proposals {
        let sc = p.predicted_scores.clone().unwrap_or_else(|| MetricReport {
            collisions: 0.0,
            ttc: 0.0,
            drivable: 0.0,
            comfort: 0.0,
            progress: 0.0,
            speed_limit: 0.0,
            direction: 0.0,
            aggregate: 0.0,
            violations: Vec::new(),
        });
        out.push_str(&format!(
            "PROPOSAL offset {} target_speed {} score {} collisions {} ttc {} drivable {} \
             comfort {} progress {} speed_limit {} direction {}\n",
            fmt2(p.source_offset),
            fmt2(p.source_target_speed),
            fmt2(sc.aggregate),
            fmt2(sc.collisions),
            fmt2(sc.ttc),
            fmt2(sc.drivable),
            fmt2(sc.comfort),
            fmt2(sc.progress),
            fmt2(sc.speed_limit),
            fmt2(sc.direction)
        ));
    }
    out
}

/// Scene fields recovered from [`serialize_scene`] output; lets scripted
/// backends plan against the same state the request described.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedScene {
    pub tick: usize,
    pub time: f64,
    pub ego: EgoState,
    pub agents: Vec<AgentState>,
}

/// Parse the text produced by [`serialize_scene`] back into world state.
pub fn parse_scene_text(text: &str) -> Option<ParsedScene> {
    let mut tick = None;
    let mut time = None;
    let mut ego = None;
    let mut agents = Vec::new();

    for line in text.lines() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            Some("SCENE") => {
                tick = field(&tokens, "tick").and_then(|v| v.parse::<usize>().ok());
                time = field(&tokens, "time").and_then(|v| v.parse::<f64>().ok());
            }
            Some("EGO") => {
                ego = Some(EgoState {
                    pose: Pose2D::new(
                        num(&tokens, "x")?,
                        num(&tokens, "y")?,
                        num(&tokens, "heading")?,
                    ),
                    velocity: num(&tokens, "speed")?,
                    acceleration: num(&tokens, "accel")?,
                    length: num(&tokens, "length")?,
                    width: num(&tokens, "width")?,
                    timestamp: time.unwrap_or(0.0),
                });
            }
            Some("AGENT") => {
                let kind = match tokens.get(2).copied() {
                    Some("vehicle") => AgentKind::Vehicle,
                    Some("pedestrian") => AgentKind::Pedestrian,
                    Some("static_object") => AgentKind::StaticObject,
                    _ => return None,
                };
                let lane = field(&tokens, "lane").filter(|v| *v != "-");
                agents.push(AgentState {
                    id: tokens.get(1)?.to_string(),
                    kind,
                    pose: Pose2D::new(
                        num(&tokens, "x")?,
                        num(&tokens, "y")?,
                        num(&tokens, "heading")?,
                    ),
                    speed: num(&tokens, "speed")?,
                    length: num(&tokens, "length")?,
                    width: num(&tokens, "width")?,
                    lane_id: lane.map(|s| s.to_owned()),
                });
            }
            _ => {}
        }
    }
    Some(ParsedScene {
        tick: tick?,
        time: time?,
        ego: ego?,
        agents,
    })
}

fn field<'a>(tokens: &[&'a str], name: &str) -> Option<&'a str> {
    tokens
        .iter()
        .position(|t| *t == name)
        .and_then(|i| tokens.get(i + 1).copied())
}

fn num(tokens: &[&str], name: &str) -> Option<f64> {
    field(tokens, name)?.parse().ok()
}

/// Balanced spans starting at every `{` or `[`, string-aware. Candidates are
/// yielded in start order so the outermost object is tried first.
fn json_candidates(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for (start, &b) in bytes.iter().enumerate() {
        let open = b;
        if open != b'{' && open != b'[' {
            continue;
        }
        let close = if open == b'{' { b'}' } else { b']' };
        let mut depth = 0i32;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &c) in bytes.iter().enumerate().skip(start) {
            if in_string {
                if escaped {
                    escaped = false;
                } else if c == b'\\' {
                    escaped = true;
                } else if c == b'"' {
                    in_string = false;
                }
                continue;
            }
            match c {
                b'"' => in_string = true,
                _ if c == open => depth += 1,
                _ if c == close => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push(&text[start..=i]);
                        break;
                    }
                }
                _ => {}
            }
        }
        if spans.len() > 64 {
            break;
        }
    }
    spans
}

fn value_as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn value_as_list(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Array(items) => items.iter().map(value_as_f64).collect(),
        _ => value_as_f64(v).map(|x| vec![x]),
    }
}

/// Extract a parameter-style reply from free-form model text.
///
/// Finds a JSON object anywhere in the reply (code fences and prose are
/// fine), requires the seven parameter fields by their exact names, and
/// clamps out-of-range values into their valid ranges, recording one warning
/// per adjustment.
pub fn parse_param_response(text: &str) -> Result<(LlmParamResponse, Vec<String>), ParseError> {
    let mut saw_json = false;
    for candidate in json_candidates(text) {
        let Ok(Value::Object(map)) = serde_json::from_str::<Value>(candidate) else {
            continue;
        };
        saw_json = true;

        let list = |key: &'static str, alias: Option<&str>| -> Result<Vec<f64>, ParseError> {
            let v = map
                .get(key)
                .or_else(|| alias.and_then(|a| map.get(a)))
                .ok_or(ParseError::MissingField(key))?;
            value_as_list(v).ok_or(ParseError::NotNumeric(key))
        };
        let scalar = |key: &'static str| -> Result<f64, ParseError> {
            let v = map.get(key).ok_or(ParseError::MissingField(key))?;
            value_as_f64(v).ok_or(ParseError::NotNumeric(key))
        };

        let lateral_offsets = list("lateral_offsets", Some("lateral_offset"))?;
        let speed_limit_fractions =
            list("speed_limit_fraction", Some("speed_limit_fractions"))?;
        let raw = PlannerParams {
            lateral_offsets,
            speed_limit_fractions,
            fallback_target_velocity: scalar("fallback_target_velocity")?,
            min_gap_to_lead_agent: scalar("min_gap_to_lead_agent")?,
            headway_time: scalar("headway_time")?,
            accel_max: scalar("accel_max")?,
            decel_max: scalar("decel_max")?,
            idm_exponent: map
                .get("idm_exponent")
                .and_then(value_as_f64)
                .unwrap_or_else(|| PlannerParams::default().idm_exponent),
        };
        let (params, warnings) = raw.clamped();
        let rationale = map
            .get("rationale")
            .or_else(|| map.get("explanation"))
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_owned();
        let invoke_emergency_brake = map.get("invoke_emergency_brake").and_then(Value::as_bool);
        return Ok((
            LlmParamResponse {
                params,
                invoke_emergency_brake,
                rationale,
            },
            warnings,
        ));
    }
    if saw_json {
        Err(ParseError::MissingField("lateral_offsets"))
    } else {
        Err(ParseError::NoJson)
    }
}

fn waypoint_from_value(v: &Value) -> Option<(f64, f64)> {
    match v {
        Value::Array(xy) if xy.len() == 2 => {
            Some((value_as_f64(&xy[0])?, value_as_f64(&xy[1])?))
        }
        Value::Object(m) => Some((value_as_f64(m.get("x")?)?, value_as_f64(m.get("y")?)?)),
        _ => None,
    }
}

/// Extract a direct-trajectory reply: exactly four coordinate pairs, either
/// under a "waypoints" key or as a bare array. The spacing sanity bound
/// rejects replies whose implied speed exceeds the slack multiple of the
/// speed limit.
pub fn parse_trajectory_response(
    text: &str,
    ego: &EgoState,
    speed_limit: Option<f64>,
) -> Result<LlmTrajectoryResponse, ParseError> {
    let mut saw_json = false;
    for candidate in json_candidates(text) {
        let Ok(value) = serde_json::from_str::<Value>(candidate) else {
            continue;
        };
        saw_json = true;
        let (list, rationale) = match &value {
            Value::Object(map) => {
                let Some(w) = map.get("waypoints") else {
                    continue;
                };
                let Value::Array(items) = w else { continue };
                let rationale = map
                    .get("rationale")
                    .and_then(|v| v.as_str())
                    .unwrap_or("")
                    .to_owned();
                (items.clone(), rationale)
            }
            Value::Array(items) => (items.clone(), String::new()),
            _ => continue,
        };

        let points: Vec<(f64, f64)> = list
            .iter()
            .filter_map(waypoint_from_value)
            .collect();
        if points.len() != list.len() {
            continue; // array of something else, keep scanning
        }
        if points.len() != WAYPOINT_COUNT {
            return Err(ParseError::WaypointCount(points.len()));
        }

        let limit = speed_limit.unwrap_or(idm::ranges::FALLBACK_VELOCITY.1);
        let max_speed = WAYPOINT_SPEED_SLACK * limit;
        let mut prev = (ego.pose.x, ego.pose.y);
        for &(x, y) in &points {
            let implied = libm::hypot(x - prev.0, y - prev.1) / WAYPOINT_SPACING_S;
            if implied > max_speed {
                return Err(ParseError::ImplausibleSpeed(implied));
            }
            prev = (x, y);
        }

        let mut waypoints = [(0.0, 0.0); WAYPOINT_COUNT];
        waypoints.copy_from_slice(&points);
        return Ok(LlmTrajectoryResponse {
            waypoints,
            rationale,
        });
    }
    if saw_json {
        Err(ParseError::WaypointCount(0))
    } else {
        Err(ParseError::NoJson)
    }
}

/// Monotone cubic (Fritsch-Carlson) slopes for uniform-ish knots.
fn pchip_slopes(ts: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = ts.len();
    let mut deltas = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        deltas.push((ys[i + 1] - ys[i]) / (ts[i + 1] - ts[i]));
    }
    let mut slopes = vec![0.0; n];
    slopes[0] = deltas[0];
    slopes[n - 1] = deltas[n - 2];
    for i in 1..n - 1 {
        let (a, b) = (deltas[i - 1], deltas[i]);
        slopes[i] = if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
    }
    slopes
}

fn hermite(t: f64, t0: f64, t1: f64, y0: f64, y1: f64, m0: f64, m1: f64) -> (f64, f64) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let (s2, s3) = (s * s, s * s * s);
    let value = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * h * m0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * h * m1;
    let derivative = ((6.0 * s2 - 6.0 * s) * y0
        + (3.0 * s2 - 4.0 * s + 1.0) * h * m0
        + (-6.0 * s2 + 6.0 * s) * y1
        + (3.0 * s2 - 2.0 * s) * h * m1)
        / h;
    (value, derivative)
}

impl LlmTrajectoryResponse {
    /// Densify the waypoints to the tick grid with monotone cubic
    /// interpolation of x(t) and y(t); heading follows the path tangent and
    /// speed the finite position derivative.
    pub fn to_trajectory(&self, ego: &EgoState, dt: f64) -> Trajectory {
        let mut ts = Vec::with_capacity(WAYPOINT_COUNT + 1);
        let mut xs = Vec::with_capacity(WAYPOINT_COUNT + 1);
        let mut ys = Vec::with_capacity(WAYPOINT_COUNT + 1);
        ts.push(0.0);
        xs.push(ego.pose.x);
        ys.push(ego.pose.y);
        for (i, (x, y)) in self.waypoints.iter().enumerate() {
            ts.push((i + 1) as f64 * WAYPOINT_SPACING_S);
            xs.push(*x);
            ys.push(*y);
        }
        let mx = pchip_slopes(&ts, &xs);
        let my = pchip_slopes(&ts, &ys);

        let steps = (PROPOSAL_HORIZON / dt) as usize;
        let mut samples = Vec::with_capacity(steps + 1);
        let mut heading = ego.pose.heading;
        for k in 0..=steps {
            let t = (k as f64 * dt).min(*ts.last().unwrap());
            let seg = ts
                .windows(2)
                .position(|w| t >= w[0] && t <= w[1])
                .unwrap_or(ts.len() - 2);
            let (x, dx) = hermite(t, ts[seg], ts[seg + 1], xs[seg], xs[seg + 1], mx[seg], mx[seg + 1]);
            let (y, dy) = hermite(t, ts[seg], ts[seg + 1], ys[seg], ys[seg + 1], my[seg], my[seg + 1]);
            let speed = libm::hypot(dx, dy);
            if speed > 1e-6 {
                heading = libm::atan2(dy, dx);
            }
            if k == 0 {
                samples.push(TrajectorySample {
                    t: 0.0,
                    pose: ego.pose,
                    velocity: ego.velocity,
                });
            } else {
                samples.push(TrajectorySample {
                    t: k as f64 * dt,
                    pose: Pose2D::new(x, y, heading),
                    velocity: speed,
                });
            }
        }
        Trajectory::new(samples, PROPOSAL_HORIZON).expect("monotone waypoint times")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistVariant {
    /// Model returns base-planner parameters.
    Par,
    /// Model returns waypoints directly.
    Unc,
}

/// Which planner produced the executed trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Base,
    LlmPar,
    LlmUnc,
    Emergency,
}

/// Planner operating mode for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    Base,
    AssistPar,
    AssistUnc,
    LlmOnly,
}

impl PlanMode {
    fn variant(&self) -> Option<AssistVariant> {
        match self {
            PlanMode::Base => None,
            PlanMode::AssistPar => Some(AssistVariant::Par),
            PlanMode::AssistUnc | PlanMode::LlmOnly => Some(AssistVariant::Unc),
        }
    }
}

/// Outcome of one planning step.
#[derive(Debug, Clone)]
pub struct PlanDecision {
    pub trajectory: Trajectory,
    pub provenance: Provenance,
    pub rationale: Option<String>,
    /// Predicted scores of the executed trajectory.
    pub predicted: MetricReport,
    pub queries_used: u32,
    /// Degraded-mode notes and clamp warnings, in occurrence order.
    pub events: Vec<String>,
}

pub fn build_request(
    variant: AssistVariant,
    scene_text: &str,
    policy: &InvocationPolicy,
    model_name: &str,
) -> ChatRequest {
    let system_prompt = match variant {
        AssistVariant::Par => PARAM_SYSTEM_PROMPT,
        AssistVariant::Unc => TRAJECTORY_SYSTEM_PROMPT,
    };
    ChatRequest {
        system_prompt: system_prompt.to_owned(),
        user_prompt: USER_TURN_TEMPLATE.replace("{scene}", scene_text),
        temperature: policy.temperature,
        max_tokens: DEFAULT_MAX_TOKENS,
        model_name: model_name.to_owned(),
    }
}

struct Candidate {
    proposal: Proposal,
    provenance: Provenance,
    rationale: Option<String>,
    brake_decel: f64,
    brake_requested: bool,
}

fn aggregate_of(p: &Proposal) -> f64 {
    p.predicted_scores.as_ref().map_or(0.0, |r| r.aggregate)
}

/// One full planning step.
///
/// Runs the base planner, consults the backend while the predicted score
/// stays under the threshold and budget remains, selects the best candidate
/// seen (the base proposal stays in the pool), and applies the emergency
/// brake when an imminent collision is predicted or the model requests it.
pub fn plan_step(
    view: &WorldView,
    mode: PlanMode,
    base_params: &PlannerParams,
    policy: &InvocationPolicy,
    backend: Option<&dyn CompletionBackend>,
    model_name: &str,
    cfg: &MetricConfig,
) -> Result<PlanDecision, PlanError> {
    let forecast = forecast_constant_velocity(
        view.agents,
        &view.ego.pose.position(),
        PROPOSAL_HORIZON,
        view.scenario.dt,
    );

    let mut base_proposals = generate_proposals(view, base_params);
    score_proposals(&mut base_proposals, &forecast, view.scenario, cfg);
    let (base_idx, base_aggregate) =
        select_best(&base_proposals).map_err(|e| PlanError::Internal(e.to_string()))?;

    let mut events: Vec<String> = Vec::new();
    let mut candidates = vec![Candidate {
        proposal: base_proposals[base_idx].clone(),
        provenance: Provenance::Base,
        rationale: None,
        brake_decel: base_params.decel_max,
        brake_requested: false,
    }];

    let invoke = match mode {
        PlanMode::Base => false,
        PlanMode::AssistPar | PlanMode::AssistUnc => should_invoke(base_aggregate, policy),
        PlanMode::LlmOnly => policy.max_queries_per_step > 0,
    };

    let mut queries_used = 0u32;
    if invoke {
        match backend {
            None => events.push("no backend configured; using base planner".to_owned()),
            Some(backend) => {
                let variant = mode.variant().unwrap_or(AssistVariant::Par);
                let scene = serialize_scene(view, &base_proposals);
                let speed_limit = view.scenario.speed_limit_at(&view.ego.pose.position());

                while queries_used < policy.max_queries_per_step {
                    let mut scene_text = scene.clone();
                    let attempts: Vec<&Candidate> = candidates
                        .iter()
                        .filter(|c| c.provenance != Provenance::Base)
                        .collect();
                    if !attempts.is_empty() {
                        scene_text.push_str(&format!("PREVIOUS_ATTEMPTS {}\n", attempts.len()));
                        for c in &attempts {
                            scene_text.push_str(&format!(
                                "ATTEMPT offset {} target_speed {} score {}\n",
                                fmt2(c.proposal.source_offset),
                                fmt2(c.proposal.source_target_speed),
                                fmt2(aggregate_of(&c.proposal))
                            ));
                        }
                    }
                    let request = build_request(variant, &scene_text, policy, model_name);
                    queries_used += 1;
                    let reply = match backend.complete(&request) {
                        Ok(reply) => reply,
                        Err(e) => {
                            events.push(format!("backend error, degraded to base planner: {e}"));
                            break;
                        }
                    };

                    let candidate = match variant {
                        AssistVariant::Par => match parse_param_response(&reply) {
                            Ok((response, warnings)) => {
                                events.extend(
                                    warnings.into_iter().map(|w| format!("clamped: {w}")),
                                );
                                let mut proposals = generate_proposals(view, &response.params);
                                score_proposals(&mut proposals, &forecast, view.scenario, cfg);
                                match select_best(&proposals) {
                                    Ok((idx, _)) => Some(Candidate {
                                        proposal: proposals.swap_remove(idx),
                                        provenance: Provenance::LlmPar,
                                        rationale: Some(response.rationale),
                                        brake_decel: response.params.decel_max,
                                        brake_requested: response
                                            .invoke_emergency_brake
                                            .unwrap_or(false),
                                    }),
                                    Err(_) => None,
                                }
                            }
                            Err(e) => {
                                events.push(format!("query {queries_used}: {e}"));
                                None
                            }
                        },
                        AssistVariant::Unc => {
                            match parse_trajectory_response(&reply, view.ego, speed_limit) {
                                Ok(response) => {
                                    let trajectory =
                                        response.to_trajectory(view.ego, view.scenario.dt);
                                    let mut proposal = Proposal {
                                        trajectory,
                                        source_offset: 0.0,
                                        source_target_speed: response
                                            .waypoints
                                            .iter()
                                            .fold((ego_xy(view.ego), 0.0f64), |(prev, top), w| {
                                                let d = libm::hypot(w.0 - prev.0, w.1 - prev.1)
                                                    / WAYPOINT_SPACING_S;
                                                (*w, top.max(d))
                                            })
                                            .1,
                                        predicted_scores: None,
                                    };
                                    proposal.predicted_scores = Some(score_proposal(
                                        &proposal,
                                        &forecast,
                                        view.scenario,
                                        cfg,
                                    ));
                                    Some(Candidate {
                                        proposal,
                                        provenance: Provenance::LlmUnc,
                                        rationale: Some(response.rationale),
                                        brake_decel: base_params.decel_max,
                                        brake_requested: false,
                                    })
                                }
                                Err(e) => {
                                    events.push(format!("query {queries_used}: {e}"));
                                    None
                                }
                            }
                        }
                    };

                    let stop = candidate
                        .as_ref()
                        .is_some_and(|c| aggregate_of(&c.proposal) >= policy.score_threshold);
                    if let Some(c) = candidate {
                        candidates.push(c);
                    }
                    if stop {
                        break;
                    }
                }
            }
        }
    }

    // Final selection: highest predicted aggregate wins; the base candidate
    // is first, so exact ties keep it. Pure-model mode drops the base
    // proposal from the pool unless nothing else parsed.
    let pool: Vec<usize> = match mode {
        PlanMode::LlmOnly if candidates.len() > 1 => (1..candidates.len()).collect(),
        _ => (0..candidates.len()).collect(),
    };
    let selected = pool
        .into_iter()
        .max_by(|&a, &b| {
            let (sa, sb) = (
                aggregate_of(&candidates[a].proposal),
                aggregate_of(&candidates[b].proposal),
            );
            sa.partial_cmp(&sb)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(b.cmp(&a)) // earlier candidate wins ties
        })
        .unwrap_or(0);
    let chosen = &candidates[selected];

    let brake_now = (chosen.brake_requested && policy.allow_llm_emergency_brake)
        || check_emergency(&chosen.proposal, &forecast, view.scenario);

    if brake_now {
        let trajectory = emergency_brake(view.ego, chosen.brake_decel, view.scenario.dt);
        let proposal = Proposal {
            trajectory: trajectory.clone(),
            source_offset: 0.0,
            source_target_speed: 0.0,
            predicted_scores: None,
        };
        let predicted = score_proposal(&proposal, &forecast, view.scenario, cfg);
        events.push("emergency brake engaged".to_owned());
        return Ok(PlanDecision {
            trajectory,
            provenance: Provenance::Emergency,
            rationale: chosen.rationale.clone(),
            predicted,
            queries_used,
            events,
        });
    }

    Ok(PlanDecision {
        trajectory: chosen.proposal.trajectory.clone(),
        provenance: chosen.provenance,
        rationale: chosen.rationale.clone(),
        predicted: chosen
            .proposal
            .predicted_scores
            .clone()
            .unwrap_or_else(MetricReport::perfect),
        queries_used,
        events,
    })
}

fn ego_xy(ego: &EgoState) -> (f64, f64) {
    (ego.pose.x, ego.pose.y)
}
