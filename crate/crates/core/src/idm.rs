//! Rule-based base planner: a grid of trajectory proposals generated by
//! rolling the intelligent driver model along laterally offset centerlines,
//! plus the emergency-brake maneuver.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::geom::{Point2, Polyline, Pose2D};
use crate::metrics::MetricReport;
use crate::model::{LightState, Trajectory, TrajectorySample, WorldView};

/// Proposal horizon in seconds.
pub const PROPOSAL_HORIZON: f64 = 8.0;
/// Pure-pursuit lookahead distance in meters.
pub const PURSUIT_LOOKAHEAD: f64 = 5.0;
/// Only agents within this radius of the ego are considered as leaders.
pub const LEADER_RADIUS: f64 = 50.0;
/// Extra corridor width beyond the ego's own width when matching leaders.
pub const CORRIDOR_EXTRA_WIDTH: f64 = 1.0;
/// Ego is treated as off-map when it is farther than this from its route.
const OFF_ROUTE_LATERAL: f64 = 6.0;

/// Valid ranges for each controllable parameter; used both for strict config
/// validation and for clamping model-provided values.
pub mod ranges {
    pub const LATERAL_OFFSET: (f64, f64) = (-3.0, 3.0);
    pub const SPEED_FRACTION: (f64, f64) = (0.05, 1.0);
    pub const FALLBACK_VELOCITY: (f64, f64) = (0.5, 30.0);
    pub const MIN_GAP: (f64, f64) = (0.1, 10.0);
    pub const HEADWAY: (f64, f64) = (0.1, 5.0);
    pub const ACCEL_MAX: (f64, f64) = (0.1, 5.0);
    pub const DECEL_MAX: (f64, f64) = (0.5, 10.0);
    pub const IDM_EXPONENT: (f64, f64) = (1.0, 10.0);
}

/// The seven controllable base-planner parameters plus the IDM exponent.
///
/// JSON field names are the exact names the parameter-mode assistant is asked
/// to produce, so config files and model responses share one schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerParams {
    /// Ego offsets relative to lane center, meters, any sign.
    #[serde(default = "default_lateral_offsets")]
    pub lateral_offsets: Vec<f64>,
    /// Target-speed fractions of the lane speed limit, each in (0, 1].
    #[serde(
        rename = "speed_limit_fraction",
        alias = "speed_limit_fractions",
        default = "default_speed_fractions"
    )]
    pub speed_limit_fractions: Vec<f64>,
    /// Target speed where no lane speed limit applies, m/s.
    #[serde(default = "default_fallback_velocity")]
    pub fallback_target_velocity: f64,
    /// Minimum bumper-to-bumper distance to the lead agent (s0), m.
    #[serde(default = "default_min_gap")]
    pub min_gap_to_lead_agent: f64,
    /// Desired time headway to the lead agent (T), s.
    #[serde(default = "default_headway")]
    pub headway_time: f64,
    /// Maximum acceleration (a), m/s^2.
    #[serde(default = "default_accel_max")]
    pub accel_max: f64,
    /// Maximum deceleration (b), m/s^2, stored positive.
    #[serde(default = "default_decel_max")]
    pub decel_max: f64,
    /// Free-flow exponent (delta).
    #[serde(default = "default_idm_exponent")]
    pub idm_exponent: f64,
}

fn default_lateral_offsets() -> Vec<f64> {
    vec![-1.0, 0.0, 1.0]
}

fn default_speed_fractions() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

fn default_fallback_velocity() -> f64 {
    15.0
}

fn default_min_gap() -> f64 {
    1.0
}

fn default_headway() -> f64 {
    1.5
}

fn default_accel_max() -> f64 {
    1.5
}

fn default_decel_max() -> f64 {
    3.0
}

fn default_idm_exponent() -> f64 {
    4.0
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            lateral_offsets: default_lateral_offsets(),
            speed_limit_fractions: default_speed_fractions(),
            fallback_target_velocity: default_fallback_velocity(),
            min_gap_to_lead_agent: default_min_gap(),
            headway_time: default_headway(),
            accel_max: default_accel_max(),
            decel_max: default_decel_max(),
            idm_exponent: default_idm_exponent(),
        }
    }
}

impl PlannerParams {
    /// Strict validation for configuration input: any out-of-range value is
    /// an error, never silently fixed.
    pub fn validate(&self) -> Result<(), String> {
        if self.lateral_offsets.is_empty() {
            return Err("lateral_offsets must not be empty".into());
        }
        if self.speed_limit_fractions.is_empty() {
            return Err("speed_limit_fraction must not be empty".into());
        }
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| -> Result<(), String> {
            if !v.is_finite() || v < lo || v > hi {
                Err(format!("{name} = {v} outside [{lo}, {hi}]"))
            } else {
                Ok(())
            }
        };
        for &o in &self.lateral_offsets {
            check("lateral_offsets", o, ranges::LATERAL_OFFSET)?;
        }
        for &f in &self.speed_limit_fractions {
            check("speed_limit_fraction", f, ranges::SPEED_FRACTION)?;
        }
        check(
            "fallback_target_velocity",
            self.fallback_target_velocity,
            ranges::FALLBACK_VELOCITY,
        )?;
        check(
            "min_gap_to_lead_agent",
            self.min_gap_to_lead_agent,
            ranges::MIN_GAP,
        )?;
        check("headway_time", self.headway_time, ranges::HEADWAY)?;
        check("accel_max", self.accel_max, ranges::ACCEL_MAX)?;
        check("decel_max", self.decel_max, ranges::DECEL_MAX)?;
        check("idm_exponent", self.idm_exponent, ranges::IDM_EXPONENT)?;
        Ok(())
    }

    /// Clamp every field into its valid range, recording one warning per
    /// adjusted value. Used for model-provided parameters, which must never
    /// be accepted out of range.
    pub fn clamped(mut self) -> (Self, Vec<String>) {
        let mut warnings = Vec::new();
        if self.lateral_offsets.is_empty() {
            warnings.push("lateral_offsets: empty, using [0.0]".into());
            self.lateral_offsets = vec![0.0];
        }
        if self.speed_limit_fractions.is_empty() {
            warnings.push("speed_limit_fraction: empty, using [1.0]".into());
            self.speed_limit_fractions = vec![1.0];
        }
        let mut clamp = |name: &str, v: &mut f64, (lo, hi): (f64, f64)| {
            let fixed = if v.is_finite() { v.clamp(lo, hi) } else { lo };
            if fixed != *v {
                warnings.push(format!("{name}: {v} clamped to {fixed}"));
                *v = fixed;
            }
        };
        for o in &mut self.lateral_offsets {
            clamp("lateral_offsets", o, ranges::LATERAL_OFFSET);
        }
        for f in &mut self.speed_limit_fractions {
            clamp("speed_limit_fraction", f, ranges::SPEED_FRACTION);
        }
        clamp(
            "fallback_target_velocity",
            &mut self.fallback_target_velocity,
            ranges::FALLBACK_VELOCITY,
        );
        clamp(
            "min_gap_to_lead_agent",
            &mut self.min_gap_to_lead_agent,
            ranges::MIN_GAP,
        );
        clamp("headway_time", &mut self.headway_time, ranges::HEADWAY);
        clamp("accel_max", &mut self.accel_max, ranges::ACCEL_MAX);
        clamp("decel_max", &mut self.decel_max, ranges::DECEL_MAX);
        clamp("idm_exponent", &mut self.idm_exponent, ranges::IDM_EXPONENT);
        (self, warnings)
    }
}

/// IDM longitudinal acceleration.
///
/// `gap` is the bumper-to-bumper distance to the leader (`f64::INFINITY`
/// when there is none) and `closing_speed` the ego speed minus the leader
/// speed. The desired gap is `s* = s0 + max(0, v*T + v*dv / (2*sqrt(a*b)))`
/// and the result is clamped to `[-decel_max, accel_max]`.
pub fn idm_acceleration(
    v: f64,
    v0: f64,
    gap: f64,
    closing_speed: f64,
    params: &PlannerParams,
) -> f64 {
    debug_assert!(v >= 0.0 && v0 > 0.0);
    if gap <= 0.0 {
        return -params.decel_max;
    }
    let free_term = libm::pow(v / v0, params.idm_exponent);
    let interaction = if gap.is_finite() {
        let desired = params.min_gap_to_lead_agent
            + (v * params.headway_time
                + v * closing_speed / (2.0 * libm::sqrt(params.accel_max * params.decel_max)))
                .max(0.0);
        let ratio = desired / gap;
        ratio * ratio
    } else {
        0.0
    };
    (params.accel_max * (1.0 - free_term - interaction)).clamp(-params.decel_max, params.accel_max)
}

/// A candidate ego trajectory plus the parameters that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub trajectory: Trajectory,
    pub source_offset: f64,
    pub source_target_speed: f64,
    pub predicted_scores: Option<MetricReport>,
}

/// Cartesian grid of planner parameters; one proposal per cell.
///
/// [`ProposalGrid::from_params`] yields the everyday |offsets| x |fractions|
/// grid; filling in the other axes reproduces enlarged sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrid {
    pub lateral_offsets: Vec<f64>,
    pub speed_limit_fractions: Vec<f64>,
    pub fallback_target_velocities: Vec<f64>,
    pub min_gaps: Vec<f64>,
    pub headway_times: Vec<f64>,
    pub accel_maxes: Vec<f64>,
    pub decel_maxes: Vec<f64>,
    pub idm_exponent: f64,
}

impl ProposalGrid {
    pub fn from_params(params: &PlannerParams) -> Self {
        Self {
            lateral_offsets: params.lateral_offsets.clone(),
            speed_limit_fractions: params.speed_limit_fractions.clone(),
            fallback_target_velocities: vec![params.fallback_target_velocity],
            min_gaps: vec![params.min_gap_to_lead_agent],
            headway_times: vec![params.headway_time],
            accel_maxes: vec![params.accel_max],
            decel_maxes: vec![params.decel_max],
            idm_exponent: params.idm_exponent,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.lateral_offsets.len()
            * self.speed_limit_fractions.len()
            * self.fallback_target_velocities.len()
            * self.min_gaps.len()
            * self.headway_times.len()
            * self.accel_maxes.len()
            * self.decel_maxes.len()
    }
}

/// Longitudinal view of one leader candidate along a proposal path.
#[derive(Debug, Clone, Copy)]
struct PathLeader {
    /// Arc position of the leader's center at rollout start.
    arc: f64,
    /// Leader speed projected on the path direction.
    along_speed: f64,
    /// Leader extent along the path (its length).
    length: f64,
}

/// Per-offset rollout context: the shifted path, the ego's arc position on
/// it, and the nearest leader ahead (agent or red-light stop line).
struct OffsetPath {
    path: Polyline,
    ego_arc: f64,
    leader: Option<PathLeader>,
}

fn build_offset_path(view: &WorldView, route: &Polyline, offset: f64) -> OffsetPath {
    let path = route.offset_left(offset);
    let ego_pos = view.ego.pose.position();
    let (ego_arc, _) = path.project(&ego_pos);

    let half_corridor = (view.ego.width + CORRIDOR_EXTRA_WIDTH) / 2.0;
    let mut leader: Option<PathLeader> = None;
    for agent in view.agents {
        if agent.pose.position().distance(&ego_pos) > LEADER_RADIUS {
            continue;
        }
        let bbox = agent.bounding_box();
        if path.distance_to_box(&bbox) > half_corridor {
            continue;
        }
        let (arc, _) = path.project(&agent.pose.position());
        if arc <= ego_arc {
            continue;
        }
        let (_, tangent) = path.sample_at(arc);
        let along_speed = agent.speed * libm::cos(agent.pose.heading - tangent);
        let candidate = PathLeader {
            arc,
            along_speed,
            length: agent.length,
        };
        if leader.map_or(true, |l| candidate.arc < l.arc) {
            leader = Some(candidate);
        }
    }

    // A red light on the route acts as a stationary zero-length leader at
    // the stop line (the end of the signalled lane).
    let mut stop_arc_acc = 0.0;
    for lane in view.scenario.route_lanes() {
        stop_arc_acc += lane.length();
        let red = view
            .scenario
            .traffic_lights
            .iter()
            .any(|tl| tl.lane_id == lane.id && tl.state_at(view.time) == LightState::Red);
        if red && stop_arc_acc > ego_arc {
            let candidate = PathLeader {
                arc: stop_arc_acc,
                along_speed: 0.0,
                length: 0.0,
            };
            if leader.map_or(true, |l| candidate.arc < l.arc) {
                leader = Some(candidate);
            }
            break;
        }
    }

    OffsetPath {
        path,
        ego_arc,
        leader,
    }
}

/// Roll one proposal forward: IDM longitudinally against the (constant
/// velocity) leader, pure pursuit laterally onto the offset path.
fn roll_proposal(
    view: &WorldView,
    ctx: &OffsetPath,
    v0: f64,
    offset: f64,
    cell: &PlannerParams,
) -> Proposal {
    let dt = view.scenario.dt;
    let steps = (PROPOSAL_HORIZON / dt) as usize;
    let ego = view.ego;
    let ego_half = ego.length / 2.0;

    let mut x = ego.pose.x;
    let mut y = ego.pose.y;
    let mut heading = ego.pose.heading;
    let mut v = ego.velocity;
    let mut arc = ctx.ego_arc;

    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(TrajectorySample {
        t: 0.0,
        pose: ego.pose,
        velocity: v,
    });

    for k in 1..=steps {
        let t = k as f64 * dt;
        let (gap, closing) = match ctx.leader {
            Some(l) => {
                let leader_arc = l.arc + l.along_speed * (t - dt);
                let gap = leader_arc - l.length / 2.0 - (arc + ego_half);
                (gap, v - l.along_speed)
            }
            None => (f64::INFINITY, 0.0),
        };
        let accel = idm_acceleration(v, v0, gap, closing, cell);
        // Never overshoot the target speed from below; from above, IDM
        // decays toward it without this cap ever raising the speed.
        let cap = v.max(v0);
        v = (v + accel * dt).clamp(0.0, cap);

        let (target, _) = ctx.path.sample_at_extended(arc + PURSUIT_LOOKAHEAD);
        let alpha =
            crate::geom::normalize_angle(libm::atan2(target.y - y, target.x - x) - heading);
        let curvature = 2.0 * libm::sin(alpha) / PURSUIT_LOOKAHEAD;
        heading = crate::geom::normalize_angle(heading + v * curvature * dt);
        x += v * libm::cos(heading) * dt;
        y += v * libm::sin(heading) * dt;
        let (new_arc, _) = ctx.path.project_near(&Point2::new(x, y), arc, 10.0);
        arc = new_arc.max(arc);

        samples.push(TrajectorySample {
            t,
            pose: Pose2D::new(x, y, heading),
            velocity: v,
        });
    }

    Proposal {
        trajectory: Trajectory::new(samples, PROPOSAL_HORIZON).expect("monotone rollout times"),
        source_offset: offset,
        source_target_speed: v0,
        predicted_scores: None,
    }
}

/// Generate the full cartesian product of proposals for a parameter grid.
///
/// Returns exactly `grid.cell_count()` proposals in deterministic order
/// (offsets outermost), except when the ego is off the mapped route, where a
/// single straight-line stopping proposal is returned instead.
pub fn generate_grid(view: &WorldView, grid: &ProposalGrid) -> Vec<Proposal> {
    let fallback_decel = grid.decel_maxes.first().copied().unwrap_or(3.0);
    let Some(route) = view.scenario.route_polyline() else {
        return vec![stopping_proposal(view, fallback_decel)];
    };
    let (_, ego_lateral) = route.project(&view.ego.pose.position());
    if ego_lateral.abs() > OFF_ROUTE_LATERAL {
        return vec![stopping_proposal(view, fallback_decel)];
    }

    let speed_limit = view.scenario.speed_limit_at(&view.ego.pose.position());

    let mut proposals = Vec::with_capacity(grid.cell_count());
    for &offset in &grid.lateral_offsets {
        let ctx = build_offset_path(view, &route, offset);
        for &fraction in &grid.speed_limit_fractions {
            for &fallback in &grid.fallback_target_velocities {
                let v0 = match speed_limit {
                    Some(limit) => fraction * limit,
                    None => fallback,
                };
                for &min_gap in &grid.min_gaps {
                    for &headway in &grid.headway_times {
                        for &accel in &grid.accel_maxes {
                            for &decel in &grid.decel_maxes {
                                let cell = PlannerParams {
                                    lateral_offsets: vec![offset],
                                    speed_limit_fractions: vec![fraction],
                                    fallback_target_velocity: fallback,
                                    min_gap_to_lead_agent: min_gap,
                                    headway_time: headway,
                                    accel_max: accel,
                                    decel_max: decel,
                                    idm_exponent: grid.idm_exponent,
                                };
                                proposals.push(roll_proposal(view, &ctx, v0, offset, &cell));
                            }
                        }
                    }
                }
            }
        }
    }
    proposals
}

/// Generate the |lateral_offsets| x |speed_limit_fractions| proposal grid
/// for one parameter set (15 proposals with the defaults).
pub fn generate_proposals(view: &WorldView, params: &PlannerParams) -> Vec<Proposal> {
    generate_grid(view, &ProposalGrid::from_params(params))
}

/// Maximum-deceleration straight-path trajectory until standstill, then
/// stationary for the remaining horizon. Positions are exact kinematics, so
/// the stopping distance is `v^2 / (2 * decel)`.
pub fn emergency_brake(ego: &crate::model::EgoState, decel: f64, dt: f64) -> Trajectory {
    let steps = (PROPOSAL_HORIZON / dt) as usize;
    let (dir_x, dir_y) = ego.pose.direction();
    let v_init = ego.velocity.max(0.0);
    let stop_time = v_init / decel;
    let stop_dist = v_init * v_init / (2.0 * decel);

    let samples = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let (dist, v) = if t < stop_time {
                (v_init * t - 0.5 * decel * t * t, v_init - decel * t)
            } else {
                (stop_dist, 0.0)
            };
            TrajectorySample {
                t,
                pose: Pose2D::new(
                    ego.pose.x + dir_x * dist,
                    ego.pose.y + dir_y * dist,
                    ego.pose.heading,
                ),
                velocity: v,
            }
        })
        .collect();
    Trajectory::new(samples, PROPOSAL_HORIZON).expect("monotone brake times")
}

fn stopping_proposal(view: &WorldView, decel: f64) -> Proposal {
    Proposal {
        trajectory: emergency_brake(view.ego, decel, view.scenario.dt),
        source_offset: 0.0,
        source_target_speed: 0.0,
        predicted_scores: None,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geom::{Point2, Polygon};
    use crate::model::{
        AgentKind, AgentPolicy, AgentState, EgoState, Lane, Scenario, DEFAULT_EGO_LENGTH,
        DEFAULT_EGO_WIDTH,
    };
    use alloc::borrow::ToOwned;
    use proptest::prelude::*;

    fn params() -> PlannerParams {
        PlannerParams::default()
    }

    pub(crate) fn test_scenario(agents: Vec<AgentState>) -> Scenario {
        let centerline = (0..=500).map(|i| Pose2D::new(i as f64, 0.0, 0.0)).collect();
        let lane = Lane::new(
            "main".to_owned(),
            centerline,
            10.0,
            alloc::vec![Point2::new(0.0, 1.75), Point2::new(500.0, 1.75)],
            alloc::vec![Point2::new(0.0, -1.75), Point2::new(500.0, -1.75)],
            alloc::vec![],
        )
        .unwrap();
        Scenario {
            id: "test".to_owned(),
            lanes: alloc::vec![lane],
            drivable_polygon: Polygon::new(alloc::vec![
                Point2::new(-10.0, -8.0),
                Point2::new(510.0, -8.0),
                Point2::new(510.0, 8.0),
                Point2::new(-10.0, 8.0),
            ]),
            ego_init: EgoState {
                pose: Pose2D::new(0.0, 0.0, 0.0),
                velocity: 5.0,
                acceleration: 0.0,
                length: DEFAULT_EGO_LENGTH,
                width: DEFAULT_EGO_WIDTH,
                timestamp: 0.0,
            },
            agents_init: agents,
            agent_policy: AgentPolicy::NonReactiveReplay,
            traffic_lights: alloc::vec![],
            duration_steps: 150,
            dt: 0.1,
            expert_progress: 100.0,
            agent_scripts: alloc::vec![],
        }
    }

    pub(crate) fn view_of(scenario: &Scenario) -> WorldView<'_> {
        WorldView {
            scenario,
            tick: 0,
            time: 0.0,
            ego: &scenario.ego_init,
            agents: &scenario.agents_init,
        }
    }

    #[test]
    fn accel_from_standstill_is_max() {
        let p = params();
        let a = idm_acceleration(0.0, 10.0, f64::INFINITY, 0.0, &p);
        assert!((a - p.accel_max).abs() < 1e-12);
    }

    #[test]
    fn accel_at_target_speed_is_zero() {
        let a = idm_acceleration(10.0, 10.0, f64::INFINITY, 0.0, &params());
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn accel_zero_gap_is_full_brake() {
        let p = params();
        assert_eq!(idm_acceleration(5.0, 10.0, 0.0, 0.0, &p), -p.decel_max);
        assert_eq!(idm_acceleration(5.0, 10.0, -2.0, 0.0, &p), -p.decel_max);
    }

    #[test]
    fn equilibrium_gap_by_bisection() {
        // Solve 1 - (v/v0)^delta = (s*/s)^2 for s by bisection, then the
        // model must be in equilibrium there.
        let p = params();
        let (v, v0) = (8.0, 10.0);
        let (mut lo, mut hi) = (0.01, 1000.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if idm_acceleration(v, v0, mid, 0.0, &p) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s_eq = 0.5 * (lo + hi);
        assert!(idm_acceleration(v, v0, s_eq, 0.0, &p).abs() < 1e-9);
    }

    #[test]
    fn default_grid_is_15_proposals() {
        let scenario = test_scenario(alloc::vec![]);
        let proposals = generate_proposals(&view_of(&scenario), &params());
        assert_eq!(proposals.len(), 15);
    }

    #[test]
    fn single_cell_grid_is_one_proposal() {
        let scenario = test_scenario(alloc::vec![]);
        let mut p = params();
        p.lateral_offsets = alloc::vec![0.0];
        p.speed_limit_fractions = alloc::vec![1.0];
        let proposals = generate_proposals(&view_of(&scenario), &p);
        assert_eq!(proposals.len(), 1);
    }

    #[test]
    fn sweep_grids_reproduce_published_counts() {
        let base = params();
        let mut grid = ProposalGrid::from_params(&base);
        grid.lateral_offsets = alloc::vec![-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
        grid.fallback_target_velocities = alloc::vec![10.0, 15.0, 20.0];
        grid.min_gaps = alloc::vec![0.5, 1.0, 2.0];
        grid.headway_times = alloc::vec![1.0, 1.5, 2.0];
        grid.accel_maxes = alloc::vec![1.0, 1.5, 2.0];
        grid.decel_maxes = alloc::vec![2.0, 3.0, 4.0];
        assert_eq!(grid.cell_count(), 8505);
        grid.lateral_offsets.pop();
        assert_eq!(grid.cell_count(), 7290);
    }

    #[test]
    fn emergency_brake_examples() {
        let mut ego = test_scenario(alloc::vec![]).ego_init;

        ego.velocity = 0.0;
        let traj = emergency_brake(&ego, 3.0, 0.1);
        assert!(traj.samples.iter().all(|s| s.velocity == 0.0));
        assert!(traj
            .samples
            .iter()
            .all(|s| s.pose.position().distance(&ego.pose.position()) < 1e-12));

        ego.velocity = 6.0;
        let traj = emergency_brake(&ego, 3.0, 0.1);
        let stopped = traj.samples.iter().find(|s| s.velocity == 0.0).unwrap();
        assert!((stopped.t - 2.0).abs() < 0.1 + 1e-9);
        let final_dist = traj
            .samples
            .last()
            .unwrap()
            .pose
            .position()
            .distance(&ego.pose.position());
        assert!((final_dist - 6.0).abs() < 1e-9);

        ego.velocity = 12.0;
        let traj = emergency_brake(&ego, 3.0, 0.1);
        let stopped = traj.samples.iter().find(|s| s.velocity == 0.0).unwrap();
        assert!((stopped.t - 4.0).abs() < 0.1 + 1e-9);
        let final_dist = traj
            .samples
            .last()
            .unwrap()
            .pose
            .position()
            .distance(&ego.pose.position());
        assert!((final_dist - 24.0).abs() < 1e-9);
    }

    #[test]
    fn off_map_ego_gets_single_stopping_proposal() {
        let mut scenario = test_scenario(alloc::vec![]);
        scenario.ego_init.pose = Pose2D::new(0.0, 7.5, 0.0);
        let proposals = generate_proposals(&view_of(&scenario), &params());
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].source_target_speed, 0.0);
        assert_eq!(
            proposals[0].trajectory.samples.last().unwrap().velocity,
            0.0
        );
    }

    #[test]
    fn leader_in_corridor_caps_approach() {
        // Stopped leader 30 m ahead: the rolled proposal must not hit it.
        let leader = AgentState {
            id: "lead".to_owned(),
            kind: AgentKind::Vehicle,
            pose: Pose2D::new(30.0, 0.0, 0.0),
            speed: 0.0,
            length: 4.0,
            width: 1.8,
            lane_id: Some("main".to_owned()),
        };
        let scenario = test_scenario(alloc::vec![leader]);
        let mut p = params();
        p.lateral_offsets = alloc::vec![0.0];
        p.speed_limit_fractions = alloc::vec![1.0];
        let proposals = generate_proposals(&view_of(&scenario), &p);
        let last = proposals[0].trajectory.samples.last().unwrap();
        // Front bumper must stay behind the leader's rear bumper.
        assert!(last.pose.x + DEFAULT_EGO_LENGTH / 2.0 < 28.0);
        assert!(last.velocity < 0.2);
    }

    #[test]
    fn red_light_acts_as_stop_line() {
        let mut scenario = test_scenario(alloc::vec![]);
        scenario.traffic_lights = alloc::vec![crate::model::TrafficLight {
            lane_id: "main".to_owned(),
            schedule: alloc::vec![crate::model::LightPhase {
                at: 0.0,
                state: LightState::Red,
            }],
        }];
        // Put the ego near the lane end so the stop line binds within 8 s.
        scenario.ego_init.pose = Pose2D::new(470.0, 0.0, 0.0);
        scenario.ego_init.velocity = 8.0;
        let mut p = params();
        p.lateral_offsets = alloc::vec![0.0];
        p.speed_limit_fractions = alloc::vec![1.0];
        let proposals = generate_proposals(&view_of(&scenario), &p);
        let last = proposals[0].trajectory.samples.last().unwrap();
        assert!(last.pose.x + DEFAULT_EGO_LENGTH / 2.0 <= 500.0 + 1e-6);
        assert!(last.velocity < 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn proposal_count_is_cartesian_product(
            n_off in 1usize..4, n_frac in 1usize..4,
        ) {
            let scenario = test_scenario(alloc::vec![]);
            let mut p = params();
            p.lateral_offsets = (0..n_off).map(|i| i as f64 * 0.5 - 0.5).collect();
            p.speed_limit_fractions = (1..=n_frac).map(|i| i as f64 / n_frac as f64).collect();
            let proposals = generate_proposals(&view_of(&scenario), &p);
            prop_assert_eq!(proposals.len(), n_off * n_frac);
        }

        #[test]
        fn proposal_speed_never_exceeds_target(
            start_v in 0.0f64..10.0, fraction in 0.2f64..1.0,
        ) {
            let mut scenario = test_scenario(alloc::vec![]);
            let v0 = fraction * 10.0;
            scenario.ego_init.velocity = start_v.min(v0);
            let mut p = params();
            p.lateral_offsets = alloc::vec![0.0];
            p.speed_limit_fractions = alloc::vec![fraction];
            let proposals = generate_proposals(&view_of(&scenario), &p);
            for s in &proposals[0].trajectory.samples {
                prop_assert!(s.velocity <= v0 + 1e-6);
            }
        }

        #[test]
        fn free_road_converges_to_target(start_factor in 0.0f64..2.0, v0 in 2.0f64..15.0) {
            let p = params();
            let mut v: f64 = start_factor * v0;
            let dt = 0.1;
            let mut converged = false;
            for _ in 0..300 {
                if (v - v0).abs() < 0.1 {
                    converged = true;
                    break;
                }
                v = (v + idm_acceleration(v, v0, f64::INFINITY, 0.0, &p) * dt).max(0.0);
            }
            prop_assert!(converged, "no convergence within 30 s");
        }

        #[test]
        fn following_never_violates_min_gap(
            leader_v in 2.0f64..10.0,
            rel_start in 0.0f64..1.0,
            extra_gap in 0.0f64..30.0,
        ) {
            // Feasible start: at or below the leader's speed, at least the
            // IDM desired gap away. The gap must stay >= s0 for 60 s.
            let p = params();
            let v0 = 12.0;
            let mut v = rel_start * leader_v;
            let desired0 = p.min_gap_to_lead_agent + v * p.headway_time;
            let mut gap = desired0 + extra_gap;
            let dt = 0.1;
            for _ in 0..600 {
                let a = idm_acceleration(v, v0, gap, v - leader_v, &p);
                v = (v + a * dt).max(0.0);
                gap += (leader_v - v) * dt;
                prop_assert!(gap >= p.min_gap_to_lead_agent - 1e-9,
                    "gap {gap} fell below s0");
            }
        }
    }
}
