//! Decision policies. Every policy maps one agent's own state and the day
//! number to a choice; none of them can see another agent.

mod heuristic;
mod llm;
mod replay;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentState;
use crate::gateway::GatewayError;
use crate::prompt::TemplateError;
use crate::scenario::{CaseKind, PolicySpec, ReflectionToggles, Scenario};
use crate::traffic_sim::{AgentId, BottleneckModel, Choice, LinearRoute, ScheduleModel};

pub use heuristic::{
    day_one_departure, day_one_route, departure_adjustment, heuristic_decide_departure, heuristic_decide_route, route_estimates,
    Adjustment, HeuristicPolicy,
};
pub use llm::{llm_decide, LlmPolicy};
pub use replay::{ReplayPolicy, ReplayScript, ScriptEntry};

/// Read-only scenario view handed to policies.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub scenario: &'a Scenario,
}

impl<'a> DecisionContext<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        Self { scenario }
    }

    pub fn case_kind(&self) -> CaseKind {
        self.scenario.case_kind
    }

    pub fn schedule(&self) -> ScheduleModel<f64> {
        ScheduleModel::from_config(self.scenario.preferred_arrival(), &self.scenario.persona.cost_weights)
    }

    pub fn corridor(&self) -> Option<BottleneckModel<f64>> {
        self.scenario.corridor.as_ref().map(BottleneckModel::from_config)
    }

    pub fn routes(&self) -> Vec<LinearRoute<f64>> {
        self.scenario.routes().iter().map(LinearRoute::from_config).collect()
    }

    pub fn window(&self) -> (f64, f64) {
        self.scenario.departure_window()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub agent_id: AgentId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub request_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub malformed: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised: Option<bool>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub choice: Choice<f64>,
    /// Present only for policies with something worth logging.
    pub trace: Option<DecisionTrace>,
}

impl PolicyDecision {
    pub fn plain(choice: Choice<f64>) -> Self {
        Self { choice, trace: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetadata {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toggles: Option<ReflectionToggles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_set_hash: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub template_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("replay script has no entry for agent {agent_id} on day {day}")]
    MissingScript { agent_id: AgentId, day: u32 },
    #[error("replay script entry for agent {agent_id} on day {day} does not fit the {case} case")]
    ScriptCase { agent_id: AgentId, day: u32, case: CaseKind },
    #[error("cannot load replay script {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub trait DecisionPolicy: Send + Sync {
    fn decide(&self, state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError>;

    fn metadata(&self) -> PolicyMetadata;
}

/// Builds the policy a scenario asks for.
pub fn build_policy(scenario: &Scenario) -> Result<Box<dyn DecisionPolicy>, PolicyError> {
    Ok(match &scenario.policy {
        PolicySpec::Heuristic => Box::new(HeuristicPolicy),
        PolicySpec::Replay { script_path } => Box::new(ReplayPolicy::load(script_path)?),
        PolicySpec::Llm(spec) => Box::new(LlmPolicy::from_spec(spec)?),
    })
}
