//! The planner's internal scorer: forecast nearby agents at constant
//! velocity, simulate each proposal against the forecast, score it with the
//! full metric suite, and flag imminent collisions for the emergency brake.

use alloc::vec::Vec;
use thiserror::Error;

use crate::geom::{OrientedBox, Point2};
use crate::idm::{Proposal, LEADER_RADIUS};
use crate::metrics::{evaluate_episode, EpisodeView, MetricConfig, MetricReport};
use crate::model::{AgentState, Scenario};

/// Horizon of the imminent-collision check, seconds.
pub const EMERGENCY_WINDOW: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot select from an empty proposal list")]
    NoProposals,
}

/// Constant-velocity prediction of every nearby agent, one state list per
/// tick of the proposal horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub states_per_tick: Vec<Vec<AgentState>>,
    pub dt: f64,
}

/// Advance each agent along its heading at its current speed for the whole
/// horizon; agents farther than [`LEADER_RADIUS`] from the ego are excluded.
pub fn forecast_constant_velocity(
    agents: &[AgentState],
    ego_position: &Point2,
    horizon: f64,
    dt: f64,
) -> Forecast {
    debug_assert!(horizon > 0.0 && dt > 0.0);
    let steps = (horizon / dt) as usize;
    let nearby: Vec<&AgentState> = agents
        .iter()
        .filter(|a| a.pose.position().distance(ego_position) <= LEADER_RADIUS)
        .collect();

    let states_per_tick = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            nearby
                .iter()
                .map(|a| {
                    let (dx, dy) = a.pose.direction();
                    let mut state = (*a).clone();
                    state.pose.x += dx * a.speed * t;
                    state.pose.y += dy * a.speed * t;
                    state
                })
                .collect()
        })
        .collect();
    Forecast {
        states_per_tick,
        dt,
    }
}

/// Score one proposal against the forecast with the episode metric suite.
///
/// The progress reference is the scenario's expert progress scaled to the
/// proposal horizon, so predicted and final scores stay comparable.
pub fn score_proposal(
    proposal: &Proposal,
    forecast: &Forecast,
    scenario: &Scenario,
    cfg: &MetricConfig,
) -> MetricReport {
    let n = proposal.trajectory.samples.len().min(forecast.states_per_tick.len());
    let horizon_fraction = proposal.trajectory.horizon / scenario.duration_seconds();
    let expert = scenario.expert_progress * horizon_fraction.min(1.0);
    let view = EpisodeView::new(
        scenario,
        &proposal.trajectory.samples[..n],
        &forecast.states_per_tick[..n],
        expert,
    );
    evaluate_episode(&view, cfg)
}

/// Score every proposal in place.
pub fn score_proposals(
    proposals: &mut [Proposal],
    forecast: &Forecast,
    scenario: &Scenario,
    cfg: &MetricConfig,
) {
    for proposal in proposals.iter_mut() {
        proposal.predicted_scores = Some(score_proposal(proposal, forecast, scenario, cfg));
    }
}

/// Index of the best-scoring proposal and its predicted aggregate.
///
/// Exact argmax over the predicted aggregate; ties break deterministically
/// toward the smaller |lateral offset|, then the higher target speed.
pub fn select_best(proposals: &[Proposal]) -> Result<(usize, f64), SimError> {
    if proposals.is_empty() {
        return Err(SimError::NoProposals);
    }
    let mut best = 0;
    for i in 1..proposals.len() {
        if better(&proposals[i], &proposals[best]) {
            best = i;
        }
    }
    let aggregate = proposals[best]
        .predicted_scores
        .as_ref()
        .map_or(0.0, |r| r.aggregate);
    Ok((best, aggregate))
}

fn better(candidate: &Proposal, incumbent: &Proposal) -> bool {
    let score = |p: &Proposal| p.predicted_scores.as_ref().map_or(0.0, |r| r.aggregate);
    let (sc, si) = (score(candidate), score(incumbent));
    if sc != si {
        return sc > si;
    }
    let (oc, oi) = (
        candidate.source_offset.abs(),
        incumbent.source_offset.abs(),
    );
    if oc != oi {
        return oc < oi;
    }
    candidate.source_target_speed > incumbent.source_target_speed
}

/// True when the proposal's swept box intersects any forecast box at any
/// tick within [`EMERGENCY_WINDOW`].
pub fn check_emergency(proposal: &Proposal, forecast: &Forecast, scenario: &Scenario) -> bool {
    let ego_len = scenario.ego_init.length;
    let ego_wid = scenario.ego_init.width;
    let n = proposal.trajectory.samples.len().min(forecast.states_per_tick.len());
    for tick in 0..n {
        let sample = &proposal.trajectory.samples[tick];
        if sample.t > EMERGENCY_WINDOW + 1e-9 {
            break;
        }
        let ego_box = OrientedBox::from_pose(&sample.pose, ego_len, ego_wid);
        for agent in &forecast.states_per_tick[tick] {
            if ego_box.intersects(&agent.bounding_box()) {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2D;
    use crate::idm::tests::{test_scenario, view_of};
    use crate::idm::{generate_proposals, PlannerParams, PROPOSAL_HORIZON};
    use crate::model::{AgentKind, Trajectory, TrajectorySample};
    use alloc::borrow::ToOwned;
    use alloc::vec;

    fn agent(id: &str, x: f64, y: f64, heading: f64, speed: f64) -> AgentState {
        AgentState {
            id: id.to_owned(),
            kind: AgentKind::Vehicle,
            pose: Pose2D::new(x, y, heading),
            speed,
            length: 4.0,
            width: 2.0,
            lane_id: None,
        }
    }

    fn straight_proposal(start: Pose2D, speed: f64, dt: f64) -> Proposal {
        let steps = (PROPOSAL_HORIZON / dt) as usize;
        let samples = (0..=steps)
            .map(|k| {
                let t = k as f64 * dt;
                TrajectorySample {
                    t,
                    pose: Pose2D::new(
                        start.x + speed * t * libm::cos(start.heading),
                        start.y + speed * t * libm::sin(start.heading),
                        start.heading,
                    ),
                    velocity: speed,
                }
            })
            .collect();
        Proposal {
            trajectory: Trajectory::new(samples, PROPOSAL_HORIZON).unwrap(),
            source_offset: 0.0,
            source_target_speed: speed,
            predicted_scores: None,
        }
    }

    #[test]
    fn forecast_stationary_agent_is_constant() {
        let a = agent("a", 10.0, 0.0, 0.0, 0.0);
        let f = forecast_constant_velocity(&[a.clone()], &Point2::new(0.0, 0.0), 1.0, 0.1);
        assert_eq!(f.states_per_tick.len(), 11);
        for tick in &f.states_per_tick {
            assert_eq!(tick[0], a);
        }
    }

    #[test]
    fn forecast_advances_along_heading() {
        let a = agent("a", 0.0, 0.0, 0.0, 10.0);
        let f = forecast_constant_velocity(&[a], &Point2::new(0.0, 0.0), 1.0, 0.1);
        let last = &f.states_per_tick[10][0];
        assert!((last.pose.x - 10.0).abs() < 1e-9);
        assert!(last.pose.y.abs() < 1e-12);
    }

    #[test]
    fn forecast_excludes_agents_beyond_radius() {
        let near = agent("near", 30.0, 0.0, 0.0, 1.0);
        let far = agent("far", 60.0, 0.0, 0.0, 1.0);
        let f = forecast_constant_velocity(&[near, far], &Point2::new(0.0, 0.0), 1.0, 0.1);
        assert_eq!(f.states_per_tick[0].len(), 1);
        assert_eq!(f.states_per_tick[0][0].id, "near");
    }

    #[test]
    fn stationary_proposal_on_empty_road() {
        let scenario = test_scenario(vec![]);
        let proposal = straight_proposal(scenario.ego_init.pose, 0.0, scenario.dt);
        let forecast =
            forecast_constant_velocity(&[], &Point2::new(0.0, 0.0), PROPOSAL_HORIZON, scenario.dt);
        let report = score_proposal(&proposal, &forecast, &scenario, &MetricConfig::default());
        assert_eq!(report.collisions, 1.0);
        assert_eq!(report.drivable, 1.0);
        assert!(report.progress < 0.05);
    }

    #[test]
    fn proposal_through_agent_zeroes_aggregate() {
        let scenario = test_scenario(vec![]);
        let blocker = agent("x", 20.0, 0.0, 0.0, 0.0);
        let proposal = straight_proposal(scenario.ego_init.pose, 8.0, scenario.dt);
        let forecast = forecast_constant_velocity(
            &[blocker],
            &Point2::new(0.0, 0.0),
            PROPOSAL_HORIZON,
            scenario.dt,
        );
        let report = score_proposal(&proposal, &forecast, &scenario, &MetricConfig::default());
        assert_eq!(report.collisions, 0.0);
        assert_eq!(report.aggregate, 0.0);
    }

    #[test]
    fn select_best_single_and_ties() {
        let scenario = test_scenario(vec![]);
        let mk = |offset: f64, aggregate: f64| {
            let mut p = straight_proposal(scenario.ego_init.pose, 5.0, scenario.dt);
            p.source_offset = offset;
            p.predicted_scores = Some(MetricReport {
                aggregate,
                ..MetricReport::perfect()
            });
            p
        };
        let single = vec![mk(1.0, 0.4)];
        assert_eq!(select_best(&single).unwrap(), (0, 0.4));

        // Tie on 0.9 between offsets 0 and -1: centered proposal wins.
        let tied = vec![mk(1.0, 0.3), mk(0.0, 0.9), mk(-1.0, 0.9)];
        let (idx, agg) = select_best(&tied).unwrap();
        assert_eq!(idx, 1);
        assert!((agg - 0.9).abs() < 1e-12);

        // All zero: tie-break picks the centered one.
        let zeros = vec![mk(1.0, 0.0), mk(0.0, 0.0), mk(-1.0, 0.0)];
        assert_eq!(select_best(&zeros).unwrap().0, 1);

        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn select_best_is_exact_argmax() {
        let scenario = test_scenario(vec![]);
        let mut proposals = generate_proposals(&view_of(&scenario), &PlannerParams::default());
        let forecast = forecast_constant_velocity(
            &[],
            &scenario.ego_init.pose.position(),
            PROPOSAL_HORIZON,
            scenario.dt,
        );
        score_proposals(&mut proposals, &forecast, &scenario, &MetricConfig::default());
        let (best, aggregate) = select_best(&proposals).unwrap();
        for p in &proposals {
            assert!(p.predicted_scores.as_ref().unwrap().aggregate <= aggregate + 1e-12);
        }
        assert_eq!(
            proposals[best].predicted_scores.as_ref().unwrap().aggregate,
            aggregate
        );
    }

    #[test]
    fn emergency_empty_road_is_false() {
        let scenario = test_scenario(vec![]);
        let proposal = straight_proposal(scenario.ego_init.pose, 8.0, scenario.dt);
        let forecast = forecast_constant_velocity(
            &[],
            &Point2::new(0.0, 0.0),
            PROPOSAL_HORIZON,
            scenario.dt,
        );
        assert!(!check_emergency(&proposal, &forecast, &scenario));
    }

    #[test]
    fn emergency_head_on_within_two_seconds() {
        // Head-on agent 10 m ahead closing at 10 m/s (ego stationary agent
        // moving toward it): boxes meet well inside the window.
        let scenario = test_scenario(vec![]);
        let oncoming = agent("x", 10.0, 0.0, core::f64::consts::PI, 10.0);
        let proposal = straight_proposal(scenario.ego_init.pose, 0.0, scenario.dt);
        let forecast = forecast_constant_velocity(
            &[oncoming],
            &Point2::new(0.0, 0.0),
            PROPOSAL_HORIZON,
            scenario.dt,
        );
        assert!(check_emergency(&proposal, &forecast, &scenario));
    }

    #[test]
    fn emergency_ignores_impact_after_window() {
        // Closing at 4 m/s from a 14.3 m bumper gap: impact around 3.6 s,
        // outside the 2 s window.
        let scenario = test_scenario(vec![]);
        let oncoming = agent("x", 18.6, 0.0, core::f64::consts::PI, 4.0);
        let proposal = straight_proposal(scenario.ego_init.pose, 0.0, scenario.dt);
        let forecast = forecast_constant_velocity(
            &[oncoming],
            &Point2::new(0.0, 0.0),
            PROPOSAL_HORIZON,
            scenario.dt,
        );
        assert!(!check_emergency(&proposal, &forecast, &scenario));
    }

    #[test]
    fn emergency_matches_brute_force_on_random_scenes() {
        // Oracle: plain pairwise sweep over every tick in the window.
        let scenario = test_scenario(vec![]);
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let n_agents = 1 + (next() * 5.0) as usize;
            let agents: Vec<AgentState> = (0..n_agents)
                .map(|i| {
                    agent(
                        &alloc::format!("a{i}"),
                        next() * 40.0 - 5.0,
                        next() * 8.0 - 4.0,
                        next() * 6.28 - 3.14,
                        next() * 12.0,
                    )
                })
                .collect();
            let speed = next() * 12.0;
            let proposal = straight_proposal(scenario.ego_init.pose, speed, scenario.dt);
            let forecast = forecast_constant_velocity(
                &agents,
                &scenario.ego_init.pose.position(),
                PROPOSAL_HORIZON,
                scenario.dt,
            );

            let mut brute = false;
            'outer: for (tick, states) in forecast.states_per_tick.iter().enumerate() {
                let t = tick as f64 * scenario.dt;
                if t > EMERGENCY_WINDOW {
                    break;
                }
                let s = &proposal.trajectory.samples[tick];
                let ego_box = OrientedBox::from_pose(
                    &s.pose,
                    scenario.ego_init.length,
                    scenario.ego_init.width,
                );
                for a in states {
                    if ego_box.intersects(&a.bounding_box()) {
                        brute = true;
                        break 'outer;
                    }
                }
            }
            assert_eq!(check_emergency(&proposal, &forecast, &scenario), brute);
        }
    }

    #[test]
    fn scoring_is_deterministic() {
        let scenario = test_scenario(vec![agent("a", 25.0, 1.0, 0.2, 3.0)]);
        let run = || {
            let mut proposals = generate_proposals(&view_of(&scenario), &PlannerParams::default());
            let forecast = forecast_constant_velocity(
                &scenario.agents_init,
                &scenario.ego_init.pose.position(),
                PROPOSAL_HORIZON,
                scenario.dt,
            );
            score_proposals(&mut proposals, &forecast, &scenario, &MetricConfig::default());
            let (best, agg) = select_best(&proposals).unwrap();
            (best, agg, proposals[best].clone())
        };
        let (b1, a1, p1) = run();
        let (b2, a2, p2) = run();
        assert_eq!(b1, b2);
        assert_eq!(a1, a2);
        assert_eq!(p1, p2);
    }
}
