//! Prompt construction from an agent's own memory, structured decision
//! parsing, and the counterfactual used by the self-check pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::AgentState;
use crate::policy::DecisionContext;
use crate::scenario::{CaseKind, ReflectionToggles};
use crate::time::{format_clock, parse_clock, round_tenth, TimeError};
use crate::traffic_sim::{Choice, RouteId};

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{(\w+)\}\}").expect("static pattern"));

pub const TEMPLATE_NAMES: [&str; 10] = [
    "system_departure",
    "system_route",
    "long_term",
    "cot",
    "tom",
    "bounded_rationality",
    "format_departure",
    "format_route",
    "self_correct",
    "retry",
];

const BUNDLED: [(&str, &str); 10] = [
    ("system_departure", include_str!("../templates/system_departure.txt")),
    ("system_route", include_str!("../templates/system_route.txt")),
    ("long_term", include_str!("../templates/long_term.txt")),
    ("cot", include_str!("../templates/cot.txt")),
    ("tom", include_str!("../templates/tom.txt")),
    ("bounded_rationality", include_str!("../templates/bounded_rationality.txt")),
    ("format_departure", include_str!("../templates/format_departure.txt")),
    ("format_route", include_str!("../templates/format_route.txt")),
    ("self_correct", include_str!("../templates/self_correct.txt")),
    ("retry", include_str!("../templates/retry.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("template {template} leaves {{{{{key}}}}} unfilled")]
    Unfilled { template: String, key: String },
    #[error("no template named {0}")]
    Unknown(String),
}

/// Named prompt templates with `{{placeholder}}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self { templates: BUNDLED.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// Reads `<name>.txt` for every template name from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io { path: path.clone(), detail: e.to_string() })?;
            templates.insert(name.to_string(), text);
        }
        Ok(Self { templates })
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(k, v)| (k.clone(), hex::encode(Sha256::digest(v.as_bytes())))).collect()
    }

    /// Digest over every template name and body.
    pub fn set_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.templates {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn render(&self, name: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let template = self.templates.get(name).ok_or_else(|| TemplateError::Unknown(name.to_string()))?;
        let mut missing = None;
        let out = SLOT.replace_all(template, |caps: &regex::Captures<'_>| match values.get(&caps[1]) {
            Some(v) => v.clone(),
            None => {
                missing.get_or_insert_with(|| caps[1].to_string());
                String::new()
            }
        });
        match missing {
            Some(key) => Err(TemplateError::Unfilled { template: name.to_string(), key }),
            None => Ok(out.trim_end().to_string()),
        }
    }
}

/// What a valid answer looks like for the current case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSchema {
    pub case: CaseKind,
    pub field: String,
    pub departure_window: (f64, f64),
    pub route_ids: Vec<RouteId>,
}

impl ExpectedSchema {
    pub fn for_context(ctx: &DecisionContext<'_>) -> Self {
        let case = ctx.case_kind();
        Self {
            case,
            field: match case {
                CaseKind::BottleneckDeparture => "departure_time".into(),
                CaseKind::TwoRoute => "route_id".into(),
            },
            departure_window: ctx.window(),
            route_ids: ctx.scenario.routes().iter().map(|r| r.route_id).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub expected_schema: ExpectedSchema,
}

fn num(v: f64) -> String {
    let r = round_tenth(v);
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r:.1}")
    }
}

fn format_instruction(templates: &TemplateSet, schema: &ExpectedSchema) -> Result<String, TemplateError> {
    let mut v = BTreeMap::new();
    match schema.case {
        CaseKind::BottleneckDeparture => {
            v.insert("earliest", format_clock(schema.departure_window.0));
            v.insert("latest", format_clock(schema.departure_window.1));
            templates.render("format_departure", &v)
        }
        CaseKind::TwoRoute => {
            v.insert("route_ids", schema.route_ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
            templates.render("format_route", &v)
        }
    }
}

fn system_text(ctx: &DecisionContext<'_>, templates: &TemplateSet) -> Result<String, TemplateError> {
    let s = ctx.scenario;
    let w = &s.persona.cost_weights;
    let mut v = BTreeMap::new();
    v.insert("invehicle_per_min", num(w.invehicle_per_min));
    match s.case_kind {
        CaseKind::BottleneckDeparture => {
            v.insert("preferred_arrival", format_clock(s.preferred_arrival()));
            v.insert("early_per_min", num(w.early_per_min));
            v.insert("late_per_min", num(w.late_per_min));
            v.insert("free_flow", num(s.free_flow_min()));
            v.insert("headway", num(s.headway_min()));
            templates.render("system_departure", &v)
        }
        CaseKind::TwoRoute => {
            v.insert("nominal_departure", s.engine.route_nominal_departure_min.to_string());
            let lines: Vec<String> = s
                .routes()
                .iter()
                .map(|r| {
                    format!(
                        "- route {}: {} minutes plus {} minute(s) for every driver using it",
                        r.route_id,
                        num(r.intercept_min),
                        num(r.slope_min_per_agent)
                    )
                })
                .collect();
            v.insert("route_lines", lines.join("\n"));
            templates.render("system_route", &v)
        }
    }
}

fn memory_text(state: &AgentState, day: u32, ctx: &DecisionContext<'_>, templates: &TemplateSet) -> Result<String, TemplateError> {
    let lt = &state.long_term;
    let mut out = format!("Day {day} is about to begin.\n");
    match (lt.typical_travel_time_min, lt.best_cost_seen) {
        (Some(typical), Some(best)) => {
            let mut v = BTreeMap::new();
            v.insert("days", lt.entries_count.to_string());
            v.insert("typical", num(typical));
            v.insert("best_cost", num(best));
            out.push_str(&templates.render("long_term", &v)?);
            out.push('\n');
        }
        _ => out.push_str("You have no commuting experience yet.\n"),
    }
    if ctx.case_kind() == CaseKind::TwoRoute {
        for (route, m) in &lt.routes {
            let _ = writeln!(
                out,
                "Route {route}: used {} time(s), most recently on day {} when it took {} minutes.",
                m.visits,
                m.last_day,
                num(m.last_time_min)
            );
        }
    }

    let view = state.short_term_view(state.persona.short_term_days);
    if !view.entries.is_empty() {
        out.push_str("\nYour most recent days, oldest first:\n");
        match ctx.case_kind() {
            CaseKind::BottleneckDeparture => {
                out.push_str("day | left home | arrived | trip min | queue min | vs target min | cost\n");
                for e in &view.entries {
                    let o = &e.outcome;
                    let _ = writeln!(
                        out,
                        "{} | {} | {} | {} | {} | {:+.1} | {}",
                        e.day,
                        format_clock(o.departure_min),
                        format_clock(o.arrival_min),
                        num(o.travel_time_min),
                        num(o.queue_delay_min),
                        round_tenth(o.schedule_dev_min),
                        num(o.cost)
                    );
                }
            }
            CaseKind::TwoRoute => {
                out.push_str("day | route | trip min | cost\n");
                for e in &view.entries {
                    let route = e.decision.route().map_or_else(|| "-".to_string(), |r| r.to_string());
                    let _ = writeln!(out, "{} | {} | {} | {}", e.day, route, num(e.outcome.travel_time_min), num(e.outcome.cost));
                }
            }
        }
        let trend = match view.trend_sign {
            1 => "rising",
            -1 => "falling",
            _ => "flat",
        };
        let _ = write!(out, "Average trip {} min, spread {} min", num(view.mean_tt), num(view.tt_stdev));
        if ctx.case_kind() == CaseKind::BottleneckDeparture {
            let _ = write!(out, ", late {} time(s), early {} time(s)", view.late_count, view.early_count);
        }
        let _ = writeln!(out, ", trip times {trend}.");
    }
    Ok(out)
}

/// Builds the system and user texts for one agent-day. Only this agent's
/// memory goes into the texts; disabled reflection mechanisms add nothing.
pub fn build_prompt(
    state: &AgentState,
    day: u32,
    ctx: &DecisionContext<'_>,
    toggles: ReflectionToggles,
    templates: &TemplateSet,
) -> Result<PromptBundle, TemplateError> {
    let schema = ExpectedSchema::for_context(ctx);
    let mut user = memory_text(state, day, ctx, templates)?;
    let empty = BTreeMap::new();
    for (on, name) in [(toggles.bounded_rationality, "bounded_rationality"), (toggles.tom, "tom"), (toggles.cot, "cot")] {
        if on {
            user.push('\n');
            user.push_str(&templates.render(name, &empty)?);
            user.push('\n');
        }
    }
    user.push('\n');
    user.push_str(&format_instruction(templates, &schema)?);
    Ok(PromptBundle { system_text: system_text(ctx, templates)?, user_text: user, expected_schema: schema })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub choice: Choice<f64>,
    pub rationale: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no usable JSON object: {0}")]
    Malformed(String),
    #[error("{field} value {value} is out of range: {detail}")]
    OutOfRange { field: String, value: String, detail: String },
    #[error("answer gives {found} but this case needs {expected}")]
    WrongCase { found: String, expected: String },
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::Malformed(_) => "malformed",
            ParseError::OutOfRange { .. } => "out-of-range",
            ParseError::WrongCase { .. } => "wrong-case",
        }
    }
}

/// JSON objects embedded anywhere in `raw`, in order of their opening brace.
fn embedded_objects(raw: &str) -> Vec<serde_json::Map<String, Value>> {
    raw.match_indices('{')
        .filter_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
        .collect()
}

fn read_departure(value: &Value, schema: &ExpectedSchema) -> Result<f64, ParseError> {
    let out_of_range = |detail: String| ParseError::OutOfRange { field: "departure_time".into(), value: value.to_string(), detail };
    let minutes = match value {
        Value::String(s) => match parse_clock(s) {
            Ok(m) => m,
            Err(TimeError::OutOfRange(_)) => return Err(out_of_range("not a clock time".into())),
            Err(TimeError::Format(_)) => return Err(ParseError::Malformed(format!("unreadable departure_time {s:?}"))),
        },
        Value::Number(n) => round_tenth(n.as_f64().unwrap_or(f64::NAN)),
        other => return Err(ParseError::Malformed(format!("departure_time must be \"HH:MM\", got {other}"))),
    };
    let (lo, hi) = schema.departure_window;
    if !(lo..=hi).contains(&minutes) {
        return Err(out_of_range(format!("allowed window is {}-{}", format_clock(lo), format_clock(hi))));
    }
    Ok(minutes)
}

fn read_route(value: &Value, schema: &ExpectedSchema) -> Result<RouteId, ParseError> {
    let id = match value {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse::<u64>().ok(),
        _ => None,
    }
    .ok_or_else(|| ParseError::Malformed(format!("route_id must be an integer, got {value}")))?;
    match u32::try_from(id) {
        Ok(r) if schema.route_ids.contains(&r) => Ok(r),
        _ => Err(ParseError::OutOfRange {
            field: "route_id".into(),
            value: id.to_string(),
            detail: format!("known routes are {:?}", schema.route_ids),
        }),
    }
}

/// Extracts the first object carrying the expected decision field and checks
/// its range.
pub fn parse_decision(raw: &str, schema: &ExpectedSchema) -> Result<ParsedDecision, ParseError> {
    let (own, other) = match schema.case {
        CaseKind::BottleneckDeparture => ("departure_time", "route_id"),
        CaseKind::TwoRoute => ("route_id", "departure_time"),
    };
    let mut wrong_case = false;
    for obj in embedded_objects(raw) {
        if let Some(value) = obj.get(own) {
            let choice = match schema.case {
                CaseKind::BottleneckDeparture => Choice::Departure(read_departure(value, schema)?),
                CaseKind::TwoRoute => Choice::Route(read_route(value, schema)?),
            };
            let rationale = obj.get("reason").and_then(Value::as_str).unwrap_or_default().to_string();
            return Ok(ParsedDecision { choice, rationale, raw: raw.to_string() });
        }
        wrong_case |= obj.contains_key(other);
    }
    if wrong_case {
        return Err(ParseError::WrongCase { found: other.into(), expected: own.into() });
    }
    let preview: String = raw.chars().take(60).collect();
    Err(ParseError::Malformed(format!("expected an object with {own}, reply began {preview:?}")))
}

/// Outcome the agent expects from a choice, judged only from its own memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub arrival_min: f64,
    pub travel_time_min: f64,
    pub queue_delay_min: f64,
    pub cost: f64,
}

/// Departure case: the queue wait remembered for the nearest recent departure
/// (most recent on ties), none without memory. Route case: the last time seen
/// on that route, or its free-flow time.
pub fn counterfactual(choice: Choice<f64>, state: &AgentState, ctx: &DecisionContext<'_>) -> Counterfactual {
    let schedule = ctx.schedule();
    match choice {
        Choice::Departure(dep) => {
            let view = state.short_term_view(state.persona.short_term_days);
            let queue = view
                .entries
                .iter()
                .rev()
                .min_by(|a, b| (a.outcome.departure_min - dep).abs().total_cmp(&(b.outcome.departure_min - dep).abs()))
                .map_or(0.0, |e| e.outcome.queue_delay_min);
            let travel = ctx.scenario.free_flow_min() + queue;
            let arrival = dep + travel;
            Counterfactual { arrival_min: arrival, travel_time_min: travel, queue_delay_min: queue, cost: schedule.cost(travel, arrival) }
        }
        Choice::Route(r) => {
            let route = ctx.scenario.routes().iter().find(|x| x.route_id == r).copied();
            let travel = state.long_term.routes.get(&r).map(|m| m.last_time_min).or(route.map(|x| x.intercept_min)).unwrap_or(0.0);
            let arrival = ctx.scenario.engine.route_nominal_departure_min.minutes() + travel;
            Counterfactual {
                arrival_min: arrival,
                travel_time_min: travel,
                queue_delay_min: travel - route.map_or(0.0, |x| x.intercept_min),
                cost: schedule.invehicle_per_min * travel,
            }
        }
    }
}

fn describe_choice(choice: Choice<f64>) -> String {
    match choice {
        Choice::Departure(t) => format!("to leave at {}", format_clock(t)),
        Choice::Route(r) => format!("to take route {r}"),
    }
}

/// Text of the self-check turn for a first answer.
pub fn self_correction_text(
    first: &ParsedDecision,
    state: &AgentState,
    ctx: &DecisionContext<'_>,
    templates: &TemplateSet,
) -> Result<String, TemplateError> {
    let cf = counterfactual(first.choice, state, ctx);
    let outcome = match first.choice {
        Choice::Departure(_) => {
            let dev = cf.arrival_min - ctx.scenario.preferred_arrival();
            let relation = if dev > 0.0 {
                format!("{} min late", num(dev))
            } else if dev < 0.0 {
                format!("{} min early", num(-dev))
            } else {
                "exactly on time".to_string()
            };
            format!(
                "you would wait about {} min in the queue and arrive at {}, {relation}, for a cost of about {}.",
                num(cf.queue_delay_min),
                format_clock(cf.arrival_min),
                num(cf.cost)
            )
        }
        Choice::Route(_) => format!("the trip would take about {} minutes, for a cost of about {}.", num(cf.travel_time_min), num(cf.cost)),
    };
    let mut v = BTreeMap::new();
    v.insert("proposal", describe_choice(first.choice));
    v.insert("counterfactual", outcome);
    v.insert("format", format_instruction(templates, &ExpectedSchema::for_context(ctx))?);
    templates.render("self_correct", &v)
}

/// Corrective turn sent after an unusable answer.
pub fn retry_text(error: &ParseError, schema: &ExpectedSchema, templates: &TemplateSet) -> Result<String, TemplateError> {
    let mut v = BTreeMap::new();
    v.insert("error", error.to_string());
    v.insert("format", format_instruction(templates, schema)?);
    templates.render("retry", &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::MemoryEntry;
    use crate::scenario::builtin_scenario;
    use crate::Outcome;

    fn departure_schema() -> ExpectedSchema {
        ExpectedSchema {
            case: CaseKind::BottleneckDeparture,
            field: "departure_time".into(),
            departure_window: (360.0, 600.0),
            route_ids: vec![],
        }
    }

    fn route_schema() -> ExpectedSchema {
        ExpectedSchema { case: CaseKind::TwoRoute, field: "route_id".into(), departure_window: (360.0, 600.0), route_ids: vec![1, 2] }
    }

    #[test]
    fn parses_clock_answer() {
        let p = parse_decision(r#"{"departure_time":"08:12","reason":"beat the queue"}"#, &departure_schema()).unwrap();
        assert_eq!(p.choice, Choice::Departure(492.0));
        assert_eq!(p.rationale, "beat the queue");
    }

    #[test]
    fn finds_object_after_reasoning() {
        let raw = "Step 1: I was late {twice}.\nSo: {\"departure_time\": \"08:05\"} done";
        assert_eq!(parse_decision(raw, &departure_schema()).unwrap().choice, Choice::Departure(485.0));
        let nested = r#"{"answer": {"route_id": 2}}"#;
        assert_eq!(parse_decision(nested, &route_schema()).unwrap().choice, Choice::Route(2));
    }

    #[test]
    fn typed_rejections() {
        let s = departure_schema();
        assert!(matches!(parse_decision("I'll leave around 8ish", &s), Err(ParseError::Malformed(_))));
        assert!(matches!(parse_decision(r#"{"departure_time":"25:00"}"#, &s), Err(ParseError::OutOfRange { .. })));
        assert!(matches!(parse_decision(r#"{"departure_time":"05:00"}"#, &s), Err(ParseError::OutOfRange { .. })));
        assert!(matches!(parse_decision(r#"{"route_id": 1}"#, &s), Err(ParseError::WrongCase { .. })));
        assert!(matches!(parse_decision(r#"{"route_id": 3}"#, &route_schema()), Err(ParseError::OutOfRange { .. })));
        assert!(matches!(parse_decision(r#"{"departure_time":"8ish"}"#, &s), Err(ParseError::Malformed(_))));
    }

    #[test]
    fn toggles_control_text() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        let ctx = DecisionContext::new(&s);
        let st = AgentState::new(1, s.persona.clone(), 1);
        let t = TemplateSet::bundled();
        let off = build_prompt(&st, 1, &ctx, ReflectionToggles::ALL_OFF, &t).unwrap();
        let on = build_prompt(&st, 1, &ctx, ReflectionToggles::ALL_ON, &t).unwrap();
        let tom_text = t.render("tom", &BTreeMap::new()).unwrap();
        assert!(!off.user_text.contains(&tom_text));
        assert!(on.user_text.contains(&tom_text));
        assert!(off.user_text.contains("departure_time"));
        assert_eq!(on, build_prompt(&st, 1, &ctx, ReflectionToggles::ALL_ON, &t).unwrap());
    }

    #[test]
    fn render_reports_unfilled_slot() {
        let t = TemplateSet::bundled();
        assert!(matches!(t.render("retry", &BTreeMap::new()), Err(TemplateError::Unfilled { .. })));
        assert_eq!(t.set_hash().len(), 64);
    }

    #[test]
    fn counterfactual_uses_nearest_remembered_queue() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        let ctx = DecisionContext::new(&s);
        let mut st = AgentState::new(1, s.persona.clone(), 1);
        let mk = |day: u32, dep: f64, q: f64| MemoryEntry {
            day,
            decision: Choice::Departure(dep),
            outcome: Outcome {
                agent_id: 1,
                day,
                route_id: None,
                departure_min: dep,
                arrival_min: dep + 30.0 + q,
                travel_time_min: 30.0 + q,
                queue_delay_min: q,
                schedule_dev_min: dep + 30.0 + q - 540.0,
                cost: 0.0,
            },
        };
        st.record_outcome(mk(1, 480.0, 1.0)).unwrap();
        st.record_outcome(mk(2, 510.0, 12.0)).unwrap();
        let cf = counterfactual(Choice::Departure(480.0), &st, &ctx);
        assert_eq!(cf.arrival_min, 511.0);
        assert_eq!(cf.cost, 3.0 * 31.0 + 29.0);
    }
}
