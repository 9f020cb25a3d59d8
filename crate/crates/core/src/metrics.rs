//! The eight closed-loop driving metrics and the hierarchical aggregate
//! score. Every metric is a pure function over an episode view (ego samples
//! plus per-tick agent states), so driven episodes and internally simulated
//! proposals share one code path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::geom::{OrientedBox, Point2, Polyline};
use crate::model::{AgentKind, AgentState, Scenario, TrajectorySample};

/// Ego speeds below this count as standing still.
const STOPPED_SPEED_EPS: f64 = 0.05;
/// Slack for inclusive threshold comparisons on finite-difference values.
const THRESHOLD_SLACK: f64 = 1e-9;

/// Comfort bounds checked against finite-difference kinematics. The two
/// acceleration bounds are the published ones; the rest follow the standard
/// closed-loop evaluation defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortThresholds {
    pub max_abs_lon_accel: f64,
    pub max_abs_lat_accel: f64,
    pub max_abs_yaw_rate: f64,
    pub max_abs_yaw_accel: f64,
    pub max_abs_lon_jerk: f64,
    pub max_abs_mag_jerk: f64,
}

impl Default for ComfortThresholds {
    fn default() -> Self {
        Self {
            max_abs_lon_accel: 2.40,
            max_abs_lat_accel: 4.89,
            max_abs_yaw_rate: 0.95,
            max_abs_yaw_accel: 1.93,
            max_abs_lon_jerk: 4.13,
            max_abs_mag_jerk: 8.37,
        }
    }
}

/// Aggregation weights for the averaged metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub ttc: f64,
    pub progress: f64,
    pub speed_limit: f64,
    pub comfort: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            ttc: 5.0,
            progress: 5.0,
            speed_limit: 4.0,
            comfort: 2.0,
        }
    }
}

/// All tunable metric parameters with their evaluation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub comfort: ComfortThresholds,
    pub weights: MetricWeights,
    /// TTC below this (seconds) while moving fails the TTC metric.
    pub ttc_pass_threshold: f64,
    /// Constant-velocity projection horizon for TTC, seconds.
    pub ttc_horizon: f64,
    /// Projection sub-step for TTC, seconds.
    pub ttc_substep: f64,
    /// Maximum tolerated excursion outside the drivable area, meters.
    pub drivable_max_violation: f64,
    /// Overspeed (m/s) that scales a speed-limit violation to full penalty.
    pub overspeed_norm: f64,
    /// Progress ratio below which the episode counts as making no progress.
    pub min_progress_ratio: f64,
    /// Against-flow distance (m) over 1 s tolerated before halving/zeroing.
    pub direction_soft_limit: f64,
    pub direction_hard_limit: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            comfort: ComfortThresholds::default(),
            weights: MetricWeights::default(),
            ttc_pass_threshold: 0.95,
            ttc_horizon: 3.0,
            ttc_substep: 0.1,
            drivable_max_violation: 0.3,
            overspeed_norm: 2.23,
            min_progress_ratio: 0.2,
            direction_soft_limit: 2.0,
            direction_hard_limit: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Collisions,
    Ttc,
    Drivable,
    Comfort,
    Progress,
    SpeedLimit,
    Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub metric: MetricKind,
    pub tick: usize,
    pub detail: String,
}

/// Eight per-metric scores plus the aggregate for one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub collisions: f64,
    pub ttc: f64,
    pub drivable: f64,
    pub comfort: f64,
    pub progress: f64,
    pub speed_limit: f64,
    pub direction: f64,
    pub aggregate: f64,
    #[serde(default)]
    pub violations: Vec<Violation>,
}

impl MetricReport {
    pub fn perfect() -> Self {
        Self {
            collisions: 1.0,
            ttc: 1.0,
            drivable: 1.0,
            comfort: 1.0,
            progress: 1.0,
            speed_limit: 1.0,
            direction: 1.0,
            aggregate: 1.0,
            violations: Vec::new(),
        }
    }
}

/// Everything the metric suite needs to score a driven or simulated episode.
pub struct EpisodeView<'a> {
    pub scenario: &'a Scenario,
    pub ego: &'a [TrajectorySample],
    pub agents_per_tick: &'a [Vec<AgentState>],
    /// Reference progress for the Progress metric over this window.
    pub expert_progress: f64,
    pub ego_length: f64,
    pub ego_width: f64,
}

impl<'a> EpisodeView<'a> {
    pub fn new(
        scenario: &'a Scenario,
        ego: &'a [TrajectorySample],
        agents_per_tick: &'a [Vec<AgentState>],
        expert_progress: f64,
    ) -> Self {
        debug_assert_eq!(ego.len(), agents_per_tick.len());
        Self {
            scenario,
            ego,
            agents_per_tick,
            expert_progress,
            ego_length: scenario.ego_init.length,
            ego_width: scenario.ego_init.width,
        }
    }

    fn dt(&self) -> f64 {
        if self.ego.len() < 2 {
            self.scenario.dt
        } else {
            self.ego[1].t - self.ego[0].t
        }
    }

    fn ego_box(&self, tick: usize) -> OrientedBox {
        OrientedBox::from_pose(&self.ego[tick].pose, self.ego_length, self.ego_width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CollisionClass {
    AtFaultSevere,
    AtFaultObject,
    NotAtFault,
}

#[derive(Debug, Clone)]
pub struct CollisionSummary {
    pub score: f64,
    pub violations: Vec<Violation>,
    /// Agent id -> tick of first intersection; these tracks are excluded
    /// from later frames of every metric.
    pub collided: BTreeMap<String, usize>,
}

/// Collision detection and at-fault classification.
///
/// A collision is the first frame where the ego box intersects an agent box;
/// it is counted once and the agent is excluded afterwards. The ego is at
/// fault when the impact point lies on its front half or when it sits off
/// its route lane at impact.
pub fn metric_collisions(view: &EpisodeView, route: Option<&Polyline>) -> CollisionSummary {
    let mut collided: BTreeMap<String, usize> = BTreeMap::new();
    let mut classes: Vec<CollisionClass> = Vec::new();
    let mut violations = Vec::new();

    let route_lanes = view.scenario.route_lanes();
    for tick in 0..view.ego.len() {
        let ego_box = view.ego_box(tick);
        for agent in &view.agents_per_tick[tick] {
            if collided.contains_key(&agent.id) {
                continue;
            }
            let agent_box = agent.bounding_box();
            if !ego_box.intersects(&agent_box) {
                continue;
            }
            collided.insert(agent.id.clone(), tick);
            let class =
                classify_collision(view, tick, &ego_box, &agent_box, agent, route, &route_lanes);
            let detail = format!(
                "hit {} ({:?}, {})",
                agent.id,
                agent.kind,
                match class {
                    CollisionClass::AtFaultSevere | CollisionClass::AtFaultObject => "at fault",
                    CollisionClass::NotAtFault => "not at fault",
                }
            );
            violations.push(Violation {
                metric: MetricKind::Collisions,
                tick,
                detail,
            });
            classes.push(class);
        }
    }

    let severe = classes
        .iter()
        .filter(|c| **c == CollisionClass::AtFaultSevere)
        .count();
    let objects = classes
        .iter()
        .filter(|c| **c == CollisionClass::AtFaultObject)
        .count();
    let score = if severe > 0 || objects >= 2 {
        0.0
    } else if objects == 1 {
        0.5
    } else {
        1.0
    };
    CollisionSummary {
        score,
        violations,
        collided,
    }
}

#[allow(clippy::too_many_arguments)]
fn classify_collision(
    view: &EpisodeView,
    tick: usize,
    ego_box: &OrientedBox,
    agent_box: &OrientedBox,
    agent: &AgentState,
    route: Option<&Polyline>,
    route_lanes: &[&crate::model::Lane],
) -> CollisionClass {
    // Impact point: mean of the corners each box has inside the other, or
    // the midpoint of the centers when only edges cross.
    let mut sum = (0.0, 0.0);
    let mut n = 0;
    for c in agent_box.corners() {
        if ego_box.contains(&c) {
            sum = (sum.0 + c.x, sum.1 + c.y);
            n += 1;
        }
    }
    for c in ego_box.corners() {
        if agent_box.contains(&c) {
            sum = (sum.0 + c.x, sum.1 + c.y);
            n += 1;
        }
    }
    let impact = if n > 0 {
        Point2::new(sum.0 / n as f64, sum.1 / n as f64)
    } else {
        Point2::new(
            (ego_box.center.x + agent_box.center.x) / 2.0,
            (ego_box.center.y + agent_box.center.y) / 2.0,
        )
    };

    let pose = &view.ego[tick].pose;
    let (dx, dy) = (impact.x - pose.x, impact.y - pose.y);
    let lon = dx * libm::cos(pose.heading) + dy * libm::sin(pose.heading);
    let front_impact = lon >= 0.0;

    let off_route = ego_off_route(view, tick, route, route_lanes);
    let at_fault = front_impact || off_route;
    if !at_fault {
        return CollisionClass::NotAtFault;
    }
    match agent.kind {
        AgentKind::Vehicle | AgentKind::Pedestrian => CollisionClass::AtFaultSevere,
        AgentKind::StaticObject => CollisionClass::AtFaultObject,
    }
}

fn ego_off_route(
    view: &EpisodeView,
    tick: usize,
    route: Option<&Polyline>,
    route_lanes: &[&crate::model::Lane],
) -> bool {
    let pos = view.ego[tick].pose.position();
    let polygons: Vec<_> = route_lanes
        .iter()
        .filter_map(|l| l.boundary_polygon())
        .collect();
    if !polygons.is_empty() {
        return !polygons.iter().any(|p| p.contains(&pos));
    }
    match route {
        Some(r) => {
            let (_, lateral) = r.project(&pos);
            lateral.abs() > 2.25
        }
        None => false,
    }
}

/// Time-to-collision: at every tick where the ego is moving, project every
/// box forward at constant velocity in sub-steps; the metric fails if the
/// earliest intersection time drops below the pass threshold.
pub fn metric_ttc(
    view: &EpisodeView,
    excluded: &BTreeMap<String, usize>,
    cfg: &MetricConfig,
) -> (f64, Vec<Violation>) {
    let mut violations = Vec::new();
    let substeps = (cfg.ttc_horizon / cfg.ttc_substep) as usize;
    for tick in 0..view.ego.len() {
        let ego = &view.ego[tick];
        if ego.velocity <= STOPPED_SPEED_EPS {
            continue;
        }
        let (evx, evy) = (
            ego.velocity * libm::cos(ego.pose.heading),
            ego.velocity * libm::sin(ego.pose.heading),
        );
        let ego_box0 = view.ego_box(tick);
        for agent in &view.agents_per_tick[tick] {
            if excluded.get(&agent.id).is_some_and(|&t0| tick >= t0) {
                continue;
            }
            // Reachability bound: skip agents that cannot meet the ego
            // within the projection horizon.
            let closing_bound = (ego.velocity + agent.speed) * cfg.ttc_horizon
                + ego_box0.circumradius()
                + agent.bounding_box().circumradius();
            if agent.pose.position().distance(&ego.pose.position()) > closing_bound {
                continue;
            }
            let (avx, avy) = (
                agent.speed * libm::cos(agent.pose.heading),
                agent.speed * libm::sin(agent.pose.heading),
            );
            let agent_box0 = agent.bounding_box();
            for k in 1..=substeps {
                let tau = k as f64 * cfg.ttc_substep;
                let ego_box = OrientedBox::new(
                    Point2::new(ego_box0.center.x + evx * tau, ego_box0.center.y + evy * tau),
                    ego_box0.heading,
                    ego_box0.length,
                    ego_box0.width,
                );
                let agent_box = OrientedBox::new(
                    Point2::new(
                        agent_box0.center.x + avx * tau,
                        agent_box0.center.y + avy * tau,
                    ),
                    agent_box0.heading,
                    agent_box0.length,
                    agent_box0.width,
                );
                if ego_box.intersects(&agent_box) {
                    if tau < cfg.ttc_pass_threshold {
                        violations.push(Violation {
                            metric: MetricKind::Ttc,
                            tick,
                            detail: format!("ttc {tau:.1}s to {}", agent.id),
                        });
                    }
                    break;
                }
            }
        }
    }
    (if violations.is_empty() { 1.0 } else { 0.0 }, violations)
}

/// Drivable-area compliance: fails when any ego corner exceeds the tolerated
/// excursion outside the drivable polygon at any tick.
pub fn metric_drivable(view: &EpisodeView, cfg: &MetricConfig) -> (f64, Vec<Violation>) {
    let mut violations = Vec::new();
    for tick in 0..view.ego.len() {
        for corner in view.ego_box(tick).corners() {
            let excursion = view.scenario.drivable_polygon.distance_outside(&corner);
            if excursion > cfg.drivable_max_violation {
                violations.push(Violation {
                    metric: MetricKind::Drivable,
                    tick,
                    detail: format!("corner {excursion:.2} m outside drivable area"),
                });
            }
        }
    }
    (if violations.is_empty() { 1.0 } else { 0.0 }, violations)
}

/// Central difference with second-order one-sided stencils at the ends;
/// exact for quadratics everywhere.
fn differentiate(values: &[f64], dt: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    if n < 3 {
        let d = if n == 2 {
            (values[1] - values[0]) / dt
        } else {
            0.0
        };
        out.resize(n, d);
        return out;
    }
    out.push((-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt));
    for i in 1..n - 1 {
        out.push((values[i + 1] - values[i - 1]) / (2.0 * dt));
    }
    out.push((3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * dt));
    out
}

fn unwrap_headings(ego: &[TrajectorySample]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ego.len());
    let mut prev = ego[0].pose.heading;
    let mut acc = prev;
    out.push(acc);
    for s in &ego[1..] {
        let delta = crate::geom::normalize_angle(s.pose.heading - prev);
        acc += delta;
        prev = s.pose.heading;
        out.push(acc);
    }
    out
}

/// Comfort: finite-difference kinematics of the ego trajectory against the
/// threshold set. Binary pass/fail with inclusive bounds.
pub fn metric_comfort(
    ego: &[TrajectorySample],
    dt: f64,
    thresholds: &ComfortThresholds,
) -> (f64, Vec<Violation>) {
    if ego.len() < 2 {
        return (1.0, Vec::new());
    }
    let speeds: Vec<f64> = ego.iter().map(|s| s.velocity).collect();
    let headings = unwrap_headings(ego);

    let lon_accel = differentiate(&speeds, dt);
    let yaw_rate = differentiate(&headings, dt);
    let yaw_accel = differentiate(&yaw_rate, dt);
    let lat_accel: Vec<f64> = speeds.iter().zip(&yaw_rate).map(|(v, w)| v * w).collect();
    let lon_jerk = differentiate(&lon_accel, dt);
    let lat_jerk = differentiate(&lat_accel, dt);
    let mag_jerk: Vec<f64> = lon_jerk
        .iter()
        .zip(&lat_jerk)
        .map(|(a, b)| libm::hypot(*a, *b))
        .collect();

    let mut violations = Vec::new();
    let mut check = |name: &str, series: &[f64], bound: f64| {
        for (tick, v) in series.iter().enumerate() {
            if v.abs() > bound + THRESHOLD_SLACK {
                violations.push(Violation {
                    metric: MetricKind::Comfort,
                    tick,
                    detail: format!("{name} {:.2} exceeds {bound}", v.abs()),
                });
            }
        }
    };
    check("lon_accel", &lon_accel, thresholds.max_abs_lon_accel);
    check("lat_accel", &lat_accel, thresholds.max_abs_lat_accel);
    check("yaw_rate", &yaw_rate, thresholds.max_abs_yaw_rate);
    check("yaw_accel", &yaw_accel, thresholds.max_abs_yaw_accel);
    check("lon_jerk", &lon_jerk, thresholds.max_abs_lon_jerk);
    check("mag_jerk", &mag_jerk, thresholds.max_abs_mag_jerk);

    (if violations.is_empty() { 1.0 } else { 0.0 }, violations)
}

/// Net ego progress along the route polyline, meters (can be negative).
pub fn route_progress(ego: &[TrajectorySample], route: &Polyline) -> f64 {
    if ego.len() < 2 {
        return 0.0;
    }
    let (first, _) = route.project(&ego[0].pose.position());
    let (last, _) = route.project(&ego[ego.len() - 1].pose.position());
    last - first
}

/// Ego-to-expert progress ratio in [0, 1].
pub fn metric_progress(view: &EpisodeView, route: Option<&Polyline>) -> f64 {
    if view.expert_progress <= 0.0 {
        return 1.0;
    }
    let Some(route) = route else {
        return 1.0;
    };
    let progress = route_progress(view.ego, route);
    if progress < -0.1 {
        return 0.0;
    }
    (progress / view.expert_progress).clamp(0.0, 1.0)
}

/// Speed-limit compliance: one minus the mean normalized overspeed.
pub fn metric_speed_limit(view: &EpisodeView, cfg: &MetricConfig) -> (f64, Vec<Violation>) {
    let mut violations = Vec::new();
    let mut total_overspeed = 0.0;
    for (tick, s) in view.ego.iter().enumerate() {
        let Some(limit) = view.scenario.speed_limit_at(&s.pose.position()) else {
            continue;
        };
        let over = (s.velocity - limit).max(0.0);
        if over > 0.0 {
            total_overspeed += over;
            violations.push(Violation {
                metric: MetricKind::SpeedLimit,
                tick,
                detail: format!("{over:.2} m/s over the {limit:.2} m/s limit"),
            });
        }
    }
    let mean = total_overspeed / view.ego.len() as f64;
    let score = (1.0 - mean / cfg.overspeed_norm).clamp(0.0, 1.0);
    (score, violations)
}

/// Driving-direction compliance over 1-second sliding windows of along-route
/// movement of the ego center.
pub fn metric_direction(
    view: &EpisodeView,
    route: Option<&Polyline>,
    cfg: &MetricConfig,
) -> (f64, Vec<Violation>) {
    let Some(route) = route else {
        return (1.0, Vec::new());
    };
    let dt = view.dt();
    if dt <= 0.0 || view.ego.len() < 2 {
        return (1.0, Vec::new());
    }
    let window = (libm::round(1.0 / dt) as usize).max(1);
    let arcs: Vec<f64> = view
        .ego
        .iter()
        .map(|s| route.project(&s.pose.position()).0)
        .collect();

    let mut worst = 0.0_f64;
    let mut worst_tick = 0;
    for t in 1..arcs.len() {
        let from = t.saturating_sub(window);
        let against = -(arcs[t] - arcs[from]);
        if against > worst {
            worst = against;
            worst_tick = t;
        }
    }
    let mut violations = Vec::new();
    let score = if worst <= cfg.direction_soft_limit {
        1.0
    } else if worst <= cfg.direction_hard_limit {
        violations.push(Violation {
            metric: MetricKind::Direction,
            tick: worst_tick,
            detail: format!("{worst:.2} m against traffic flow"),
        });
        0.5
    } else {
        violations.push(Violation {
            metric: MetricKind::Direction,
            tick: worst_tick,
            detail: format!("{worst:.2} m against traffic flow"),
        });
        0.0
    };
    (score, violations)
}

/// The hybrid hierarchical-weighted aggregate.
///
/// Zero when any hard gate trips (at-fault severe collision or two object
/// collisions, drivable violation, hard oncoming, insufficient progress);
/// otherwise the weighted average of the averaged metrics times the
/// multiplier metrics (collisions and direction, each 1 or 0.5).
#[allow(clippy::too_many_arguments)]
pub fn aggregate_score(
    collisions: f64,
    ttc: f64,
    drivable: f64,
    comfort: f64,
    progress: f64,
    speed_limit: f64,
    direction: f64,
    cfg: &MetricConfig,
) -> f64 {
    if collisions == 0.0 || drivable == 0.0 || direction == 0.0 || progress < cfg.min_progress_ratio
    {
        return 0.0;
    }
    let w = &cfg.weights;
    let total = w.ttc + w.progress + w.speed_limit + w.comfort;
    let base = (w.ttc * ttc + w.progress * progress + w.speed_limit * speed_limit
        + w.comfort * comfort)
        / total;
    base * collisions * direction
}

/// Run every metric and assemble the report.
pub fn evaluate_episode(view: &EpisodeView, cfg: &MetricConfig) -> MetricReport {
    let route = view.scenario.route_polyline();
    let route_ref = route.as_ref();

    let coll = metric_collisions(view, route_ref);
    let (ttc, ttc_viol) = metric_ttc(view, &coll.collided, cfg);
    let (drivable, drv_viol) = metric_drivable(view, cfg);
    let (comfort, cmf_viol) = metric_comfort(view.ego, view.dt(), &cfg.comfort);
    let progress = metric_progress(view, route_ref);
    let (speed_limit, spd_viol) = metric_speed_limit(view, cfg);
    let (direction, dir_viol) = metric_direction(view, route_ref, cfg);

    let aggregate = aggregate_score(
        coll.score,
        ttc,
        drivable,
        comfort,
        progress,
        speed_limit,
        direction,
        cfg,
    );

    let mut violations = coll.violations;
    violations.extend(ttc_viol);
    violations.extend(drv_viol);
    violations.extend(cmf_viol);
    violations.extend(spd_viol);
    violations.extend(dir_viol);

    MetricReport {
        collisions: coll.score,
        ttc,
        drivable,
        comfort,
        progress,
        speed_limit,
        direction,
        aggregate,
        violations,
    }
}
