use std::sync::Arc;

use super::heuristic::{day_one_departure, day_one_route};
use super::{DecisionContext, DecisionPolicy, DecisionTrace, PolicyDecision, PolicyError, PolicyMetadata};
use crate::agent::AgentState;
use crate::gateway::{ChatMessage, LlmGateway};
use crate::prompt::{build_prompt, parse_decision, retry_text, self_correction_text, ParsedDecision, TemplateSet};
use crate::scenario::{CaseKind, LlmPolicySpec, ReflectionToggles};
use crate::traffic_sim::Choice;

/// Decisions delegated to a chat model through the gateway.
#[derive(Debug, Clone)]
pub struct LlmPolicy {
    gateway: Arc<LlmGateway>,
    templates: TemplateSet,
    toggles: ReflectionToggles,
    max_malformed: u32,
}

impl LlmPolicy {
    pub fn new(gateway: Arc<LlmGateway>, templates: TemplateSet, toggles: ReflectionToggles, max_malformed: u32) -> Self {
        Self { gateway, templates, toggles, max_malformed: max_malformed.max(1) }
    }

    pub fn from_spec(spec: &LlmPolicySpec) -> Result<Self, PolicyError> {
        let templates = match &spec.template_dir {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::bundled(),
        };
        let gateway = Arc::new(LlmGateway::new(spec.gateway.clone())?);
        Ok(Self::new(gateway, templates, spec.toggles, spec.max_malformed))
    }

    pub fn gateway(&self) -> &Arc<LlmGateway> {
        &self.gateway
    }
}

impl DecisionPolicy for LlmPolicy {
    fn decide(&self, state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        llm_decide(state, day, ctx, self.toggles, &self.gateway, &self.templates, self.max_malformed)
    }

    fn metadata(&self) -> PolicyMetadata {
        PolicyMetadata {
            kind: "llm".into(),
            toggles: Some(self.toggles),
            model_name: Some(self.gateway.config().model_name.clone()),
            template_set_hash: Some(self.templates.set_hash()),
            template_hashes: self.templates.hashes(),
            cassette_id: self.gateway.cassette_id(),
            script_id: None,
        }
    }
}

fn fallback_choice(state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> Choice<f64> {
    match state.last_entry() {
        Some(last) => last.decision,
        None => match ctx.case_kind() {
            CaseKind::BottleneckDeparture => Choice::Departure(day_one_departure(state, day, ctx)),
            CaseKind::TwoRoute => Choice::Route(day_one_route(&ctx.routes())),
        },
    }
}

/// Prompt, ask, parse, then optionally run one self-check turn.
///
/// An unusable answer gets a corrective turn, so every retry is a distinct
/// request. After `max_malformed` unusable answers in a row, or on a gateway
/// error, the agent repeats yesterday's choice (the first-day rule when it has
/// none) and the trace records why.
pub fn llm_decide(
    state: &AgentState,
    day: u32,
    ctx: &DecisionContext<'_>,
    toggles: ReflectionToggles,
    gateway: &LlmGateway,
    templates: &TemplateSet,
    max_malformed: u32,
) -> Result<PolicyDecision, PolicyError> {
    let bundle = build_prompt(state, day, ctx, toggles, templates)?;
    let mut trace = DecisionTrace { agent_id: state.agent_id, ..Default::default() };
    let mut messages = vec![ChatMessage::system(&bundle.system_text), ChatMessage::user(&bundle.user_text)];

    let mut first: Option<ParsedDecision> = None;
    let mut failure = String::new();
    while trace.malformed < max_malformed {
        let request = gateway.request(messages.clone());
        trace.request_hashes.push(request.request_hash());
        let reply = match gateway.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                failure = format!("gateway: {e}");
                trace.errors.push(failure.clone());
                break;
            }
        };
        match parse_decision(&reply.text, &bundle.expected_schema) {
            Ok(p) => {
                first = Some(p);
                break;
            }
            Err(e) => {
                trace.malformed += 1;
                trace.errors.push(format!("{}: {e}", e.kind()));
                failure = format!("{} unusable replies", trace.malformed);
                messages.push(ChatMessage::assistant(reply.text));
                messages.push(ChatMessage::user(retry_text(&e, &bundle.expected_schema, templates)?));
            }
        }
    }

    let Some(first) = first else {
        trace.fallback = Some(failure);
        return Ok(PolicyDecision { choice: fallback_choice(state, day, ctx), trace: Some(trace) });
    };
    if !toggles.self_correction {
        return Ok(PolicyDecision { choice: first.choice, trace: Some(trace) });
    }

    let check = vec![
        ChatMessage::system(&bundle.system_text),
        ChatMessage::user(&bundle.user_text),
        ChatMessage::assistant(&first.raw),
        ChatMessage::user(self_correction_text(&first, state, ctx, templates)?),
    ];
    let request = gateway.request(check);
    trace.request_hashes.push(request.request_hash());
    let revised = gateway
        .complete(&request)
        .map_err(|e| format!("self-check gateway: {e}"))
        .and_then(|r| parse_decision(&r.text, &bundle.expected_schema).map_err(|e| format!("self-check {}: {e}", e.kind())));
    let choice = match revised {
        Ok(p) => {
            trace.revised = Some(p.choice != first.choice);
            p.choice
        }
        Err(e) => {
            trace.errors.push(e);
            trace.revised = Some(false);
            first.choice
        }
    };
    Ok(PolicyDecision { choice, trace: Some(trace) })
}
