//! Pluggable text-completion backends. The crate ships deterministic mocks
//! (scripted sequences, request-hash rules, and a search-based oracle); the
//! live HTTP client lives in the companion CLI crate behind the same trait.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assist;
use crate::idm::{generate_proposals, PlannerParams};
use crate::metrics::MetricConfig;
use crate::model::{Scenario, WorldView};
use crate::sim::{forecast_constant_velocity, score_proposals, select_best};

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("backend returned status {0}")]
    Status(u16),
    #[error("mock script is empty")]
    EmptyScript,
    #[error("no scripted reply for request hash {0:#x}")]
    NoRuleMatch(u64),
}

/// A text-completion backend. Implementations must tolerate concurrent
/// calls from parallel scenario workers.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

/// FNV-1a hash of a request's user prompt; the serialized scene is the
/// world state, so this doubles as a world-state hash for rule mocks.
pub fn scene_hash(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic canned replies: either an ordered sequence or a rule
/// mapping world-state hashes to replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MockScript {
    /// Replies handed out in order; the last one repeats when exhausted.
    Sequence(Vec<String>),
    /// Reply selected by `scene_hash(user_prompt)`, with an optional
    /// fallback for unmatched requests.
    Rule {
        by_hash: BTreeMap<u64, String>,
        default: Option<String>,
    },
}

/// Scripted backend for tests and offline runs.
///
/// Sequence cursors are per-instance: construct one mock per scenario so
/// parallel episodes keep their own reply order.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    cursor: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(MockScript::Sequence(
            replies.into_iter().map(Into::into).collect(),
        ))
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        match &self.script {
            MockScript::Sequence(replies) => {
                if replies.is_empty() {
                    return Err(BackendError::EmptyScript);
                }
                let idx = self.cursor.fetch_add(1, Ordering::SeqCst);
                Ok(replies[idx.min(replies.len() - 1)].clone())
            }
            MockScript::Rule { by_hash, default } => {
                self.cursor.fetch_add(1, Ordering::SeqCst);
                let h = scene_hash(&request.user_prompt);
                by_hash
                    .get(&h)
                    .or(default.as_ref())
                    .cloned()
                    .ok_or(BackendError::NoRuleMatch(h))
            }
        }
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// The candidate parameter lattice explored by [`heuristic_oracle`]. The
/// default parameters are always cell zero, so the oracle can never do worse
/// than the base planner under the same scorer.
fn oracle_lattice(base: &PlannerParams) -> Vec<PlannerParams> {
    let mut cells = Vec::new();
    cells.push(base.clone());

    // Wider single-offset dodges at a few speeds.
    for &offset in &[-2.5, -2.0, -1.5, 1.5, 2.0, 2.5] {
        for &fraction in &[0.2, 0.5, 1.0] {
            cells.push(PlannerParams {
                lateral_offsets: alloc::vec![offset],
                speed_limit_fractions: alloc::vec![fraction],
                ..base.clone()
            });
        }
    }
    // Creep and hard-braking variants around the centerline.
    for &decel in &[base.decel_max, 6.0] {
        cells.push(PlannerParams {
            lateral_offsets: alloc::vec![-1.0, 0.0, 1.0],
            speed_limit_fractions: alloc::vec![0.1, 0.2, 0.4],
            decel_max: decel,
            min_gap_to_lead_agent: 2.0,
            ..base.clone()
        });
    }
    // Full-width sweep with stronger braking authority.
    cells.push(PlannerParams {
        lateral_offsets: alloc::vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        speed_limit_fractions: alloc::vec![0.2, 0.6, 1.0],
        decel_max: 6.0,
        ..base.clone()
    });
    cells
}

/// Search the oracle lattice with the internal simulator and return the
/// best-scoring parameter cell, exactly as an ideal parameter-mode assistant
/// would. Deterministic: ties keep the earlier cell.
pub fn heuristic_oracle(
    view: &WorldView,
    base: &PlannerParams,
    cfg: &MetricConfig,
) -> assist::LlmParamResponse {
    let forecast = forecast_constant_velocity(
        view.agents,
        &view.ego.pose.position(),
        crate::idm::PROPOSAL_HORIZON,
        view.scenario.dt,
    );
    let mut best_params = base.clone();
    let mut best_score = -1.0;
    for cell in oracle_lattice(base) {
        let mut proposals = generate_proposals(view, &cell);
        score_proposals(&mut proposals, &forecast, view.scenario, cfg);
        let score = select_best(&proposals).map(|(_, s)| s).unwrap_or(0.0);
        if score > best_score {
            best_score = score;
            best_params = cell;
        }
    }
    assist::LlmParamResponse {
        params: best_params,
        invoke_emergency_brake: None,
        rationale: alloc::format!(
            "Lattice search picked the parameter cell predicted to score {best_score:.2}."
        ),
    }
}

/// Backend wrapper around [`heuristic_oracle`]: parses the scene back out of
/// the serialized request, searches the lattice, and replies with the same
/// JSON an ideal assistant would produce. Handles both planner variants.
pub struct HeuristicOracleBackend {
    scenario: Scenario,
    base: PlannerParams,
    cfg: MetricConfig,
    calls: AtomicUsize,
}

impl HeuristicOracleBackend {
    pub fn new(scenario: Scenario, base: PlannerParams, cfg: MetricConfig) -> Self {
        Self {
            scenario,
            base,
            cfg,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for HeuristicOracleBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let parsed = assist::parse_scene_text(&request.user_prompt)
            .ok_or_else(|| BackendError::Transport("unrecognized scene text".to_owned()))?;
        let view = WorldView {
            scenario: &self.scenario,
            tick: parsed.tick,
            time: parsed.time,
            ego: &parsed.ego,
            agents: &parsed.agents,
        };
        let response = heuristic_oracle(&view, &self.base, &self.cfg);

        if request.system_prompt.contains("waypoint") {
            // Trajectory-mode request: roll the chosen parameters and emit
            // the waypoints an ideal direct planner would return.
            let forecast = forecast_constant_velocity(
                view.agents,
                &view.ego.pose.position(),
                crate::idm::PROPOSAL_HORIZON,
                view.scenario.dt,
            );
            let mut proposals = generate_proposals(&view, &response.params);
            score_proposals(&mut proposals, &forecast, view.scenario, &self.cfg);
            let (best, _) = select_best(&proposals).map_err(|_| BackendError::EmptyScript)?;
            let traj = &proposals[best].trajectory;
            let waypoints: Vec<String> = (1..=4)
                .map(|k| {
                    let s = traj.sample_at(k as f64 * 2.0);
                    alloc::format!("[{:.2}, {:.2}]", s.pose.x, s.pose.y)
                })
                .collect();
            Ok(alloc::format!(
                "{{\"waypoints\": [{}], \"rationale\": \"{}\"}}",
                waypoints.join(", "),
                response.rationale
            ))
        } else {
            serde_json::to_string(&SerializedParamReply {
                params: &response.params,
                rationale: &response.rationale,
            })
            .map_err(|e| BackendError::Transport(alloc::format!("serialize: {e}")))
        }
    }

    fn name(&self) -> &str {
        "heuristic-oracle"
    }
}

#[derive(Serialize)]
struct SerializedParamReply<'a> {
    #[serde(flatten)]
    params: &'a PlannerParams,
    rationale: &'a str,
}
