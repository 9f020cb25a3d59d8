//! Domain types shared by every module: agents, lanes, scenarios, and
//! trajectories. All types are immutable value objects after construction
//! and safe to share across parallel scenario workers.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{GeomError, OrientedBox, Point2, Polygon, Polyline, Pose2D};

/// Maximum spacing between centerline points after load-time resampling.
/// Bounds the projection error of [`Lane::project`].
pub const CENTERLINE_MAX_SPACING: f64 = 1.0;

/// Default ego footprint. The source material never states the ego's
/// dimensions; these are typical mid-size values and are config-exposed.
pub const DEFAULT_EGO_LENGTH: f64 = 4.6;
pub const DEFAULT_EGO_WIDTH: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("lane {id}: {source}")]
    BadLane {
        id: String,
        #[source]
        source: GeomError,
    },
    #[error("scenario {0}: drivable polygon needs at least 3 vertices")]
    BadDrivable(String),
    #[error("scenario {0}: ego_init lies outside the drivable polygon")]
    EgoOffMap(String),
    #[error("scenario {id}: {what} must be positive")]
    NonPositive { id: String, what: &'static str },
    #[error("agent {0}: speed must be finite and >= 0")]
    BadAgentSpeed(String),
    #[error("agent {0}: length and width must be > 0")]
    BadAgentExtent(String),
    #[error("trajectory: {0}")]
    BadTrajectory(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    StaticObject,
}

/// One traffic participant at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: String,
    pub kind: AgentKind,
    pub pose: Pose2D,
    /// m/s, always >= 0; direction of motion is the pose heading.
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub lane_id: Option<String>,
}

impl AgentState {
    pub fn bounding_box(&self) -> OrientedBox {
        OrientedBox::from_pose(&self.pose, self.length, self.width)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.speed.is_finite() || self.speed < 0.0 {
            return Err(ModelError::BadAgentSpeed(self.id.clone()));
        }
        if self.length <= 0.0 || self.width <= 0.0 {
            return Err(ModelError::BadAgentExtent(self.id.clone()));
        }
        Ok(())
    }
}

/// The ego vehicle at one tick. No reverse is modeled: velocity >= 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose2D,
    pub velocity: f64,
    pub acceleration: f64,
    #[serde(default = "default_ego_length")]
    pub length: f64,
    #[serde(default = "default_ego_width")]
    pub width: f64,
    pub timestamp: f64,
}

fn default_ego_length() -> f64 {
    DEFAULT_EGO_LENGTH
}

fn default_ego_width() -> f64 {
    DEFAULT_EGO_WIDTH
}

impl EgoState {
    pub fn bounding_box(&self) -> OrientedBox {
        OrientedBox::from_pose(&self.pose, self.length, self.width)
    }
}

/// Lane with centerline poses, speed limit, and bracketing boundaries.
///
/// Construct through [`Lane::new`] (or deserialization, which routes through
/// it): the centerline is resampled to `CENTERLINE_MAX_SPACING` and the
/// projection polyline cached. Treat as immutable afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawLane")]
pub struct Lane {
    pub id: String,
    pub centerline: Vec<Pose2D>,
    pub speed_limit: f64,
    pub left_boundary: Vec<Point2>,
    pub right_boundary: Vec<Point2>,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(skip)]
    polyline: Polyline,
}

#[derive(Deserialize)]
struct RawLane {
    id: String,
    centerline: Vec<Pose2D>,
    speed_limit: f64,
    left_boundary: Vec<Point2>,
    right_boundary: Vec<Point2>,
    #[serde(default)]
    successors: Vec<String>,
}

impl TryFrom<RawLane> for Lane {
    type Error = ModelError;

    fn try_from(raw: RawLane) -> Result<Self, ModelError> {
        Lane::new(
            raw.id,
            raw.centerline,
            raw.speed_limit,
            raw.left_boundary,
            raw.right_boundary,
            raw.successors,
        )
    }
}

impl Lane {
    pub fn new(
        id: String,
        centerline: Vec<Pose2D>,
        speed_limit: f64,
        left_boundary: Vec<Point2>,
        right_boundary: Vec<Point2>,
        successors: Vec<String>,
    ) -> Result<Self, ModelError> {
        if speed_limit <= 0.0 {
            return Err(ModelError::NonPositive {
                id: id.clone(),
                what: "speed_limit",
            });
        }
        let points: Vec<Point2> = centerline.iter().map(Pose2D::position).collect();
        let polyline = Polyline::new(points)
            .map_err(|source| ModelError::BadLane {
                id: id.clone(),
                source,
            })?
            .resample(CENTERLINE_MAX_SPACING);
        // Re-derive poses from the resampled polyline so headings follow the
        // actual tangents.
        let centerline = polyline
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let pts = polyline.points();
                let (a, b) = if i + 1 < pts.len() {
                    (pts[i], pts[i + 1])
                } else {
                    (pts[i - 1], pts[i])
                };
                Pose2D::new(p.x, p.y, libm::atan2(b.y - a.y, b.x - a.x))
            })
            .collect();
        Ok(Self {
            id,
            centerline,
            speed_limit,
            left_boundary,
            right_boundary,
            successors,
            polyline,
        })
    }

    pub fn path(&self) -> &Polyline {
        &self.polyline
    }

    pub fn length(&self) -> f64 {
        self.polyline.length()
    }

    /// Nearest-segment projection onto the centerline:
    /// `(arc_length, signed_lateral_offset)`, positive offset left of travel.
    pub fn project(&self, point: &Point2) -> (f64, f64) {
        self.polyline.project(point)
    }

    /// Lane polygon from the two boundaries, when both are usable.
    pub fn boundary_polygon(&self) -> Option<Polygon> {
        if self.left_boundary.len() < 2 || self.right_boundary.len() < 2 {
            return None;
        }
        let mut vertices = self.left_boundary.clone();
        vertices.extend(self.right_boundary.iter().rev().copied());
        Some(Polygon::new(vertices))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPolicy {
    NonReactiveReplay,
    ReactiveIdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Green,
}

/// One timed switch of a traffic light; the state holds until the next entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightPhase {
    pub at: f64,
    pub state: LightState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub lane_id: String,
    pub schedule: Vec<LightPhase>,
}

impl TrafficLight {
    /// State at time `t`; green before the first scheduled phase.
    pub fn state_at(&self, t: f64) -> LightState {
        let mut state = LightState::Green;
        for phase in &self.schedule {
            if phase.at <= t {
                state = phase.state;
            }
        }
        state
    }
}

/// Timed override for a replayed agent: at time `t` the agent adopts the
/// given speed and/or heading. Lets non-reactive scenarios script events
/// like cross traffic that suddenly starts moving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub t: f64,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub heading: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub agent_id: String,
    pub events: Vec<ScriptEvent>,
}

/// A complete closed-loop scenario: static map, initial actors, background
/// policy, and episode length. `duration_steps * dt` is the episode length
/// in seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub lanes: Vec<Lane>,
    pub drivable_polygon: Polygon,
    pub ego_init: EgoState,
    pub agents_init: Vec<AgentState>,
    pub agent_policy: AgentPolicy,
    #[serde(default)]
    pub traffic_lights: Vec<TrafficLight>,
    #[serde(default = "default_duration_steps")]
    pub duration_steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Reference progress in meters for the Progress metric; <= 0 means no
    /// expert route is defined.
    #[serde(default)]
    pub expert_progress: f64,
    /// Timed overrides for replayed agents, keyed by agent id.
    #[serde(default)]
    pub agent_scripts: Vec<AgentScript>,
}

fn default_duration_steps() -> usize {
    150
}

fn default_dt() -> f64 {
    0.1
}

impl Scenario {
    pub fn duration_seconds(&self) -> f64 {
        self.duration_steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dt <= 0.0 {
            return Err(ModelError::NonPositive {
                id: self.id.clone(),
                what: "dt",
            });
        }
        if self.duration_steps == 0 {
            return Err(ModelError::NonPositive {
                id: self.id.clone(),
                what: "duration_steps",
            });
        }
        if self.drivable_polygon.vertices.len() < 3 {
            return Err(ModelError::BadDrivable(self.id.clone()));
        }
        if !self
            .drivable_polygon
            .contains(&self.ego_init.pose.position())
        {
            return Err(ModelError::EgoOffMap(self.id.clone()));
        }
        if self.ego_init.length <= 0.0 || self.ego_init.width <= 0.0 {
            return Err(ModelError::NonPositive {
                id: self.id.clone(),
                what: "ego extent",
            });
        }
        for agent in &self.agents_init {
            agent.validate()?;
        }
        Ok(())
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    /// Lane whose centerline is laterally closest to `point`.
    pub fn nearest_lane(&self, point: &Point2) -> Option<&Lane> {
        self.lanes
            .iter()
            .map(|l| {
                let (_, lateral) = l.project(point);
                (l, lateral.abs())
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(l, _)| l)
    }

    /// Intended route: the chain of lanes reached by following the first
    /// successor from the lane nearest the initial ego pose.
    pub fn route_lanes(&self) -> Vec<&Lane> {
        let mut route = Vec::new();
        let Some(mut lane) = self.nearest_lane(&self.ego_init.pose.position()) else {
            return route;
        };
        loop {
            route.push(lane);
            let Some(next) = lane
                .successors
                .first()
                .and_then(|id| self.lane(id))
            else {
                break;
            };
            if route.iter().any(|l| l.id == next.id) {
                break; // cycle guard
            }
            lane = next;
        }
        route
    }

    /// The route centerlines concatenated into one polyline.
    pub fn route_polyline(&self) -> Option<Polyline> {
        let route = self.route_lanes();
        if route.is_empty() {
            return None;
        }
        let mut pts: Vec<Point2> = Vec::new();
        for lane in route {
            for p in lane.path().points() {
                if pts.last().map_or(true, |last| last.distance(p) > 1e-9) {
                    pts.push(*p);
                }
            }
        }
        Polyline::new(pts).ok()
    }

    /// Speed limit applicable at `point`: the nearest lane's limit, taking
    /// the maximum over that lane's successors when the point is within the
    /// junction region at the lane's end (the connector inherits the higher
    /// limit of the connecting lanes).
    pub fn speed_limit_at(&self, point: &Point2) -> Option<f64> {
        let lane = self.nearest_lane(point)?;
        let (arc, _) = lane.project(point);
        let mut limit = lane.speed_limit;
        if lane.length() - arc < 1.0 {
            for succ in &lane.successors {
                if let Some(next) = self.lane(succ) {
                    limit = limit.max(next.speed_limit);
                }
            }
        }
        Some(limit)
    }

    /// Scripted events for one agent, if any.
    pub fn script_for(&self, agent_id: &str) -> Option<&[ScriptEvent]> {
        self.agent_scripts
            .iter()
            .find(|s| s.agent_id == agent_id)
            .map(|s| s.events.as_slice())
    }
}

/// One sample of an ego trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose2D,
    pub velocity: f64,
}

/// Time-parameterized ego trajectory at fixed `dt`; the first sample
/// coincides with the current ego state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>, horizon: f64) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::BadTrajectory("no samples"));
        }
        for w in samples.windows(2) {
            if w[1].t <= w[0].t {
                return Err(ModelError::BadTrajectory(
                    "timestamps must be strictly increasing",
                ));
            }
        }
        Ok(Self { samples, horizon })
    }

    pub fn dt(&self) -> f64 {
        if self.samples.len() < 2 {
            return 0.0;
        }
        self.samples[1].t - self.samples[0].t
    }

    /// Sample at or immediately before time `t` (relative to the first
    /// sample), clamped to the ends.
    pub fn sample_at(&self, t: f64) -> &TrajectorySample {
        let t0 = self.samples[0].t;
        let dt = self.dt();
        if dt <= 0.0 {
            return &self.samples[0];
        }
        let idx = (((t - t0) / dt) as usize).min(self.samples.len() - 1);
        &self.samples[idx]
    }
}

/// Immutable snapshot of the world handed to the planner each tick.
#[derive(Debug, Clone, Copy)]
pub struct WorldView<'a> {
    pub scenario: &'a Scenario,
    pub tick: usize,
    pub time: f64,
    pub ego: &'a EgoState,
    pub agents: &'a [AgentState],
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::borrow::ToOwned;
    use alloc::vec;

    pub(crate) fn straight_lane(id: &str, len: f64, y: f64, limit: f64) -> Lane {
        let n = len as usize;
        let centerline = (0..=n)
            .map(|i| Pose2D::new(i as f64 * len / n as f64, y, 0.0))
            .collect();
        let left = vec![Point2::new(0.0, y + 1.75), Point2::new(len, y + 1.75)];
        let right = vec![Point2::new(0.0, y - 1.75), Point2::new(len, y - 1.75)];
        Lane::new(id.to_owned(), centerline, limit, left, right, vec![]).unwrap()
    }

    #[test]
    fn lane_resamples_to_max_spacing() {
        let centerline = vec![Pose2D::new(0.0, 0.0, 0.0), Pose2D::new(10.0, 0.0, 0.0)];
        let lane = Lane::new(
            "a".to_owned(),
            centerline,
            10.0,
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        for w in lane.path().points().windows(2) {
            assert!(w[0].distance(&w[1]) <= CENTERLINE_MAX_SPACING + 1e-9);
        }
        assert!((lane.length() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn lane_rejects_degenerate_centerline() {
        let r = Lane::new(
            "a".to_owned(),
            vec![Pose2D::new(0.0, 0.0, 0.0)],
            10.0,
            vec![],
            vec![],
            vec![],
        );
        assert!(r.is_err());
    }

    #[test]
    fn traffic_light_schedule_lookup() {
        let light = TrafficLight {
            lane_id: "a".to_owned(),
            schedule: vec![
                LightPhase {
                    at: 0.0,
                    state: LightState::Red,
                },
                LightPhase {
                    at: 5.0,
                    state: LightState::Green,
                },
            ],
        };
        assert_eq!(light.state_at(-1.0), LightState::Green);
        assert_eq!(light.state_at(0.0), LightState::Red);
        assert_eq!(light.state_at(4.9), LightState::Red);
        assert_eq!(light.state_at(5.0), LightState::Green);
    }

    #[test]
    fn trajectory_rejects_non_increasing_time() {
        let mk = |t: f64| TrajectorySample {
            t,
            pose: Pose2D::new(0.0, 0.0, 0.0),
            velocity: 0.0,
        };
        assert!(Trajectory::new(vec![mk(0.0), mk(0.0)], 1.0).is_err());
        assert!(Trajectory::new(vec![mk(0.0), mk(0.1)], 1.0).is_ok());
    }

    #[test]
    fn route_follows_successors() {
        let mut a = straight_lane("a", 50.0, 0.0, 10.0);
        a.successors = vec!["b".to_owned()];
        let b = {
            let centerline = (0..=50)
                .map(|i| Pose2D::new(50.0 + i as f64, 0.0, 0.0))
                .collect();
            Lane::new("b".to_owned(), centerline, 10.0, vec![], vec![], vec![]).unwrap()
        };
        let scenario = Scenario {
            id: "s".to_owned(),
            lanes: vec![a, b],
            drivable_polygon: Polygon::new(vec![
                Point2::new(-10.0, -5.0),
                Point2::new(110.0, -5.0),
                Point2::new(110.0, 5.0),
                Point2::new(-10.0, 5.0),
            ]),
            ego_init: EgoState {
                pose: Pose2D::new(0.0, 0.0, 0.0),
                velocity: 5.0,
                acceleration: 0.0,
                length: DEFAULT_EGO_LENGTH,
                width: DEFAULT_EGO_WIDTH,
                timestamp: 0.0,
            },
            agents_init: vec![],
            agent_policy: AgentPolicy::NonReactiveReplay,
            traffic_lights: vec![],
            duration_steps: 150,
            dt: 0.1,
            expert_progress: 100.0,
            agent_scripts: vec![],
        };
        scenario.validate().unwrap();
        let route = scenario.route_lanes();
        assert_eq!(route.len(), 2);
        let poly = scenario.route_polyline().unwrap();
        assert!((poly.length() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn scenario_json_round_trip() {
        let lane = straight_lane("a", 20.0, 0.0, 13.9);
        let scenario = Scenario {
            id: "rt".to_owned(),
            lanes: vec![lane],
            drivable_polygon: Polygon::new(vec![
                Point2::new(-5.0, -4.0),
                Point2::new(25.0, -4.0),
                Point2::new(25.0, 4.0),
                Point2::new(-5.0, 4.0),
            ]),
            ego_init: EgoState {
                pose: Pose2D::new(0.0, 0.0, 0.0),
                velocity: 3.0,
                acceleration: 0.0,
                length: DEFAULT_EGO_LENGTH,
                width: DEFAULT_EGO_WIDTH,
                timestamp: 0.0,
            },
            agents_init: vec![AgentState {
                id: "v1".to_owned(),
                kind: AgentKind::Vehicle,
                pose: Pose2D::new(10.0, 0.0, 0.0),
                speed: 2.0,
                length: 4.0,
                width: 1.8,
                lane_id: Some("a".to_owned()),
            }],
            agent_policy: AgentPolicy::ReactiveIdm,
            traffic_lights: vec![],
            duration_steps: 150,
            dt: 0.1,
            expert_progress: 42.0,
            agent_scripts: vec![],
        };
        let json = serde_json::to_string(&scenario).unwrap();
        let back: Scenario = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.id, scenario.id);
        assert_eq!(back.agents_init, scenario.agents_init);
        assert_eq!(back.lanes[0].centerline, scenario.lanes[0].centerline);
    }
}
