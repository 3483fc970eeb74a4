use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DecisionContext, DecisionPolicy, PolicyDecision, PolicyError, PolicyMetadata};
use crate::agent::AgentState;
use crate::scenario::CaseKind;
use crate::time::parse_clock;
use crate::traffic_sim::{AgentId, Choice, RouteId};

/// One scripted decision. Departures are clock strings such as `"08:12"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub agent_id: AgentId,
    pub day: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departure_time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_id: Option<RouteId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayScript {
    pub decisions: Vec<ScriptEntry>,
}

/// Returns pre-written decisions verbatim.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    table: BTreeMap<(AgentId, u32), Choice<f64>>,
    script_id: String,
}

impl ReplayPolicy {
    pub fn from_script(script: &ReplayScript) -> Result<Self, String> {
        let mut table = BTreeMap::new();
        for e in &script.decisions {
            let choice = match (&e.departure_time, e.route_id) {
                (Some(t), None) => Choice::Departure(parse_clock(t).map_err(|err| err.to_string())?),
                (None, Some(r)) => Choice::Route(r),
                _ => return Err(format!("agent {} day {}: give exactly one of departure_time and route_id", e.agent_id, e.day)),
            };
            if table.insert((e.agent_id, e.day), choice).is_some() {
                return Err(format!("agent {} day {} listed twice", e.agent_id, e.day));
            }
        }
        let canonical = serde_json::to_vec(script).expect("script serializes");
        Ok(Self { table, script_id: hex::encode(Sha256::digest(&canonical)) })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let err = |message: String| PolicyError::Script { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let script: ReplayScript = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::from_script(&script).map_err(err)
    }

    pub fn replay_decide(&self, agent_id: AgentId, day: u32) -> Result<Choice<f64>, PolicyError> {
        self.table.get(&(agent_id, day)).copied().ok_or(PolicyError::MissingScript { agent_id, day })
    }
}

impl DecisionPolicy for ReplayPolicy {
    fn decide(&self, state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        let choice = self.replay_decide(state.agent_id, day)?;
        let fits = matches!(
            (ctx.case_kind(), choice),
            (CaseKind::BottleneckDeparture, Choice::Departure(_)) | (CaseKind::TwoRoute, Choice::Route(_))
        );
        if !fits {
            return Err(PolicyError::ScriptCase { agent_id: state.agent_id, day, case: ctx.case_kind() });
        }
        Ok(PolicyDecision::plain(choice))
    }

    fn metadata(&self) -> PolicyMetadata {
        PolicyMetadata { kind: "replay".into(), script_id: Some(self.script_id.clone()), ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> ReplayScript {
        ReplayScript {
            decisions: vec![
                ScriptEntry { agent_id: 3, day: 2, departure_time: Some("08:12".into()), route_id: None },
                ScriptEntry { agent_id: 1, day: 1, departure_time: None, route_id: Some(2) },
            ],
        }
    }

    #[test]
    fn returns_scripted_choice() {
        let p = ReplayPolicy::from_script(&script()).unwrap();
        assert_eq!(p.replay_decide(3, 2).unwrap(), Choice::Departure(492.0));
        assert_eq!(p.replay_decide(1, 1).unwrap(), Choice::Route(2));
    }

    #[test]
    fn missing_entry_names_agent_and_day() {
        let p = ReplayPolicy::from_script(&script()).unwrap();
        let err = p.replay_decide(3, 3).unwrap_err();
        assert!(matches!(err, PolicyError::MissingScript { agent_id: 3, day: 3 }));
        assert_eq!(err.to_string(), "replay script has no entry for agent 3 on day 3");
    }

    #[test]
    fn rejects_ambiguous_entries() {
        let bad =
            ReplayScript { decisions: vec![ScriptEntry { agent_id: 1, day: 1, departure_time: Some("08:00".into()), route_id: Some(1) }] };
        assert!(ReplayPolicy::from_script(&bad).is_err());
    }
}
