//! Experiment configuration: network, population, behaviour constants, policy
//! selection and engine options, stored as one JSON document.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::time::TimeOfDay;

pub const SCHEMA_VERSION: u32 = 1;
pub const BUILTIN_NAMES: [&str; 2] = ["bottleneck_40", "two_route_40"];

const BOTTLENECK_40: &str = include_str!("../scenarios/bottleneck_40.json");
const TWO_ROUTE_40: &str = include_str!("../scenarios/two_route_40.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseKind {
    BottleneckDeparture,
    TwoRoute,
}

impl fmt::Display for CaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseKind::BottleneckDeparture => "bottleneck-departure",
            CaseKind::TwoRoute => "two-route",
        })
    }
}

/// Marginal disutility per minute of early arrival, in-vehicle time and late
/// arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub early_per_min: f64,
    pub invehicle_per_min: f64,
    pub late_per_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corridor {
    pub free_flow_min: f64,
    pub capacity_per_hour: f64,
}

impl Corridor {
    /// Minutes between consecutive exits of a saturated bottleneck.
    pub fn headway_min(&self) -> f64 {
        60.0 / self.capacity_per_hour
    }
}

/// Route with linear travel time `intercept + slope * flow`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteOption {
    pub route_id: u32,
    pub intercept_min: f64,
    pub slope_min_per_agent: f64,
}

impl RouteOption {
    pub fn travel_time(&self, flow: f64) -> f64 {
        self.intercept_min + self.slope_min_per_agent * flow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Persona {
    pub preferred_arrival_min: TimeOfDay,
    pub cost_weights: CostWeights,
    pub inertia_band: f64,
    pub short_term_days: usize,
    pub tom_damping: f64,
    pub exploration_rate: f64,
}

/// Tunables of the rule-based policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicParams {
    pub day1_jitter_min: u32,
    pub route_switch_threshold_min: f64,
    pub switch_inertia_prob: f64,
    pub clamp_early_min: f64,
    pub clamp_late_min: f64,
    pub early_shift_fraction: f64,
    pub queue_shift_fraction: f64,
    pub early_tolerance_headways: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionToggles {
    pub cot: bool,
    pub tom: bool,
    pub bounded_rationality: bool,
    pub self_correction: bool,
}

impl ReflectionToggles {
    pub const ALL_ON: Self = Self { cot: true, tom: true, bounded_rationality: true, self_correction: true };
    pub const ALL_OFF: Self = Self { cot: false, tom: false, bounded_rationality: false, self_correction: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub timeout_sec: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub parallelism_bound: usize,
    pub mode: GatewayMode,
    pub cassette_path: Option<PathBuf>,
    pub api_key_env_var_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmPolicySpec {
    pub toggles: ReflectionToggles,
    pub max_malformed: u32,
    /// Directory with replacement prompt templates; the bundled set when absent.
    pub template_dir: Option<PathBuf>,
    pub gateway: GatewayConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    Heuristic,
    Replay { script_path: PathBuf },
    Llm(LlmPolicySpec),
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Heuristic => "heuristic",
            PolicySpec::Replay { .. } => "replay",
            PolicySpec::Llm(_) => "llm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineOptions {
    pub threads: usize,
    pub convergence_window_days: usize,
    pub convergence_threshold: f64,
    pub flow_change_tolerance: f64,
    pub route_nominal_departure_min: TimeOfDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueSource {
    Default,
    Override,
}

/// A field whose value did not come from the scenario file itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedField {
    pub field: String,
    pub source: ValueSource,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub case_kind: CaseKind,
    pub n_agents: usize,
    pub horizon_days: u32,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corridor: Option<Corridor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<Vec<RouteOption>>,
    pub persona: Persona,
    pub heuristic: HeuristicParams,
    pub policy: PolicySpec,
    pub engine: EngineOptions,
    #[serde(default)]
    pub resolved: Vec<ResolvedField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Fatal,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Fatal => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed scenario document: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", list_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown builtin scenario {0:?} (known: bottleneck_40, two_route_40)")]
    UnknownBuiltin(String),
    #[error("cannot override {field}: {message}")]
    Override { field: String, message: String },
}

fn list_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Defaults applied to any field missing from a scenario document, keyed by
/// JSON pointer.
fn default_table() -> Vec<(&'static str, Value)> {
    vec![
        ("/schema_version", json!(SCHEMA_VERSION)),
        ("/master_seed", json!(0)),
        ("/persona/inertia_band", json!(0.10)),
        ("/persona/short_term_days", json!(5)),
        ("/persona/tom_damping", json!(0.8)),
        ("/persona/exploration_rate", json!(0.05)),
        ("/heuristic/day1_jitter_min", json!(10)),
        ("/heuristic/route_switch_threshold_min", json!(2.0)),
        ("/heuristic/switch_inertia_prob", json!(0.5)),
        ("/heuristic/clamp_early_min", json!(180.0)),
        ("/heuristic/clamp_late_min", json!(60.0)),
        ("/heuristic/early_shift_fraction", json!(0.25)),
        ("/heuristic/queue_shift_fraction", json!(1.0)),
        ("/heuristic/early_tolerance_headways", json!(2.0)),
        ("/policy/kind", json!("heuristic")),
        ("/engine/threads", json!(1)),
        ("/engine/convergence_window_days", json!(5)),
        ("/engine/convergence_threshold", json!(0.05)),
        ("/engine/flow_change_tolerance", json!(1.0)),
        ("/engine/route_nominal_departure_min", json!(480.0)),
    ]
}

fn llm_default_table() -> Vec<(&'static str, Value)> {
    vec![
        ("/policy/toggles/cot", json!(true)),
        ("/policy/toggles/tom", json!(true)),
        ("/policy/toggles/bounded_rationality", json!(true)),
        ("/policy/toggles/self_correction", json!(true)),
        ("/policy/max_malformed", json!(3)),
        ("/policy/template_dir", Value::Null),
        ("/policy/gateway/endpoint_url", json!("http://127.0.0.1:8080/v1/chat/completions")),
        ("/policy/gateway/model_name", json!("commuter-model")),
        ("/policy/gateway/temperature", json!(0.0)),
        ("/policy/gateway/timeout_sec", json!(30.0)),
        ("/policy/gateway/max_retries", json!(4)),
        ("/policy/gateway/backoff_base_ms", json!(1000)),
        ("/policy/gateway/parallelism_bound", json!(4)),
        ("/policy/gateway/mode", json!("replay")),
        ("/policy/gateway/cassette_path", Value::Null),
        ("/policy/gateway/api_key_env_var_name", json!("COMMUTE_LLM_API_KEY")),
    ]
}

fn pointer_tokens(pointer: &str) -> impl Iterator<Item = String> + '_ {
    pointer.split('/').skip(1).map(|t| t.replace("~1", "/").replace("~0", "~"))
}

/// Sets `value` at `pointer`, creating intermediate objects. Returns false if a
/// non-object sits on the path.
fn insert_at(root: &mut Value, pointer: &str, value: Value) -> bool {
    let tokens: Vec<String> = pointer_tokens(pointer).collect();
    let Some((last, parents)) = tokens.split_last() else {
        return false;
    };
    let mut node = root;
    for token in parents {
        let Some(obj) = node.as_object_mut() else {
            return false;
        };
        node = obj.entry(token.clone()).or_insert_with(|| json!({}));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(last.clone(), value);
            true
        }
        None => false,
    }
}

fn apply_defaults(doc: &mut Value, table: Vec<(&'static str, Value)>, resolved: &mut Vec<ResolvedField>) {
    for (pointer, value) in table {
        if doc.pointer(pointer).is_none() && insert_at(doc, pointer, value.clone()) {
            resolved.push(ResolvedField { field: pointer.to_string(), source: ValueSource::Default, value });
        }
    }
}

/// Parses a scenario document, fills defaults, resolves relative paths against
/// `base_dir` and validates.
pub fn scenario_from_str(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    if !doc.is_object() {
        return Err(ScenarioError::Parse("top level must be an object".into()));
    }
    let mut resolved: Vec<ResolvedField> = match doc.get("resolved") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| ScenarioError::Parse(format!("resolved: {e}")))?,
        None => Vec::new(),
    };
    apply_defaults(&mut doc, default_table(), &mut resolved);
    if doc.pointer("/policy/kind").and_then(Value::as_str) == Some("llm") {
        apply_defaults(&mut doc, llm_default_table(), &mut resolved);
    }
    doc["resolved"] = serde_json::to_value(&resolved).expect("resolved fields serialize");
    let mut scenario: Scenario = serde_json::from_value(doc).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    if let Some(base) = base_dir {
        scenario.resolve_paths(base);
    }
    let fatal: Vec<Violation> = validate_scenario(&scenario).into_iter().filter(|v| v.severity == Severity::Fatal).collect();
    if !fatal.is_empty() {
        return Err(ScenarioError::Invalid(fatal));
    }
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    scenario_from_str(&text, path.parent())
}

pub fn scenario_to_string(scenario: &Scenario) -> String {
    let mut text = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    text.push('\n');
    text
}

pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, scenario_to_string(scenario)).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

pub fn builtin_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    let text = match name {
        "bottleneck_40" => BOTTLENECK_40,
        "two_route_40" => TWO_ROUTE_40,
        other => return Err(ScenarioError::UnknownBuiltin(other.to_string())),
    };
    scenario_from_str(text, None)
}

impl Scenario {
    pub fn corridor(&self) -> Option<&Corridor> {
        self.corridor.as_ref()
    }

    pub fn routes(&self) -> &[RouteOption] {
        self.routes.as_deref().unwrap_or(&[])
    }

    pub fn preferred_arrival(&self) -> f64 {
        self.persona.preferred_arrival_min.minutes()
    }

    /// Departure window the policies may choose from.
    pub fn departure_window(&self) -> (f64, f64) {
        let t = self.preferred_arrival();
        (t - self.heuristic.clamp_early_min, t + self.heuristic.clamp_late_min)
    }

    pub fn headway_min(&self) -> f64 {
        self.corridor.map(|c| c.headway_min()).unwrap_or(0.0)
    }

    pub fn free_flow_min(&self) -> f64 {
        self.corridor.map(|c| c.free_flow_min).unwrap_or(0.0)
    }

    /// Makes relative file references absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.policy {
            PolicySpec::Heuristic => {}
            PolicySpec::Replay { script_path } => fix(script_path),
            PolicySpec::Llm(spec) => {
                if let Some(p) = spec.template_dir.as_mut() {
                    fix(p);
                }
                if let Some(p) = spec.gateway.cassette_path.as_mut() {
                    fix(p);
                }
            }
        }
    }

    /// Replaces the value at a JSON pointer, revalidates, and records the
    /// override.
    /// Sets one field and validates the result.
    pub fn apply_override(&mut self, pointer: &str, value: Value) -> Result<(), ScenarioError> {
        self.apply_overrides([(pointer.to_string(), value)])
    }

    /// Sets several fields, validating only the final scenario, so a later
    /// override can complete an earlier one.
    pub fn apply_overrides<I>(&mut self, overrides: I) -> Result<(), ScenarioError>
    where
        I: IntoIterator<Item = (String, Value)>,
    {
        let mut updated = self.clone();
        for (pointer, value) in overrides {
            updated.set_field(&pointer, value)?;
        }
        let fatal: Vec<Violation> = validate_scenario(&updated).into_iter().filter(|v| v.severity == Severity::Fatal).collect();
        if !fatal.is_empty() {
            return Err(ScenarioError::Invalid(fatal));
        }
        *self = updated;
        Ok(())
    }

    fn set_field(&mut self, pointer: &str, value: Value) -> Result<(), ScenarioError> {
        let err = |message: String| ScenarioError::Override { field: pointer.to_string(), message };
        let mut doc = serde_json::to_value(&*self).expect("scenario serializes");
        if pointer == "/policy/kind" {
            let kind = value.as_str().ok_or_else(|| err("expected a string".into()))?;
            if doc.pointer(pointer).and_then(Value::as_str) != Some(kind) {
                doc["policy"] = json!({ "kind": kind });
                let mut extra = Vec::new();
                if kind == "llm" {
                    apply_defaults(&mut doc, llm_default_table(), &mut extra);
                }
                self.resolved.retain(|r| !r.field.starts_with("/policy/"));
                self.resolved.extend(extra);
            }
        } else if !insert_at(&mut doc, pointer, value.clone()) {
            return Err(err("no such field".into()));
        }
        doc["resolved"] = serde_json::to_value(&self.resolved).expect("resolved fields serialize");
        let mut updated: Scenario = serde_json::from_value(doc).map_err(|e| err(e.to_string()))?;
        updated.resolved.retain(|r| r.field != pointer);
        updated.resolved.push(ResolvedField { field: pointer.to_string(), source: ValueSource::Override, value });
        *self = updated;
        Ok(())
    }
}

/// Every violated constraint, fatal and warning alike.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fatal = |field: &str, message: String| out.push(Violation { field: field.to_string(), severity: Severity::Fatal, message });

    if s.schema_version != SCHEMA_VERSION {
        fatal("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", s.schema_version));
    }
    if s.n_agents < 1 {
        fatal("n_agents", "must be at least 1".into());
    }
    if s.horizon_days < 1 {
        fatal("horizon_days", "must be at least 1".into());
    }
    match s.case_kind {
        CaseKind::BottleneckDeparture => {
            if s.corridor.is_none() {
                fatal("corridor", "bottleneck-departure case needs a corridor".into());
            }
            if s.routes.is_some() {
                fatal("routes", "bottleneck-departure case must not list routes".into());
            }
        }
        CaseKind::TwoRoute => {
            if s.corridor.is_some() {
                fatal("corridor", "two-route case must not define a corridor".into());
            }
            match &s.routes {
                None => fatal("routes", "two-route case needs at least 2 routes, found none".into()),
                Some(r) if r.len() < 2 => fatal("routes", format!("two-route case needs at least 2 routes, found {}", r.len())),
                Some(_) => {}
            }
        }
    }
    if let Some(c) = &s.corridor {
        if !(c.free_flow_min >= 0.0) {
            fatal("corridor.free_flow_min", format!("must be >= 0, got {}", c.free_flow_min));
        }
        if !(c.capacity_per_hour > 0.0) || !c.capacity_per_hour.is_finite() {
            fatal("corridor.capacity_per_hour", format!("must be > 0, got {}", c.capacity_per_hour));
        }
    }
    if let Some(routes) = &s.routes {
        let mut seen = std::collections::BTreeSet::new();
        for (i, r) in routes.iter().enumerate() {
            if r.route_id < 1 {
                fatal(&format!("routes[{i}].route_id"), "route ids start at 1".into());
            }
            if !seen.insert(r.route_id) {
                fatal(&format!("routes[{i}].route_id"), format!("duplicate route id {}", r.route_id));
            }
            if !(r.intercept_min >= 0.0) {
                fatal(&format!("routes[{i}].intercept_min"), format!("must be >= 0, got {}", r.intercept_min));
            }
            if !(r.slope_min_per_agent >= 0.0) {
                fatal(&format!("routes[{i}].slope_min_per_agent"), format!("must be >= 0, got {}", r.slope_min_per_agent));
            }
        }
    }

    let p = &s.persona;
    let w = &p.cost_weights;
    for (name, v) in [
        ("persona.cost_weights.early_per_min", w.early_per_min),
        ("persona.cost_weights.invehicle_per_min", w.invehicle_per_min),
        ("persona.cost_weights.late_per_min", w.late_per_min),
    ] {
        if !(v >= 0.0) {
            fatal(name, format!("must be >= 0, got {v}"));
        }
    }
    if !(p.inertia_band >= 0.0) {
        fatal("persona.inertia_band", format!("must be >= 0, got {}", p.inertia_band));
    }
    if p.short_term_days < 1 {
        fatal("persona.short_term_days", "must be at least 1".into());
    }
    if !(p.tom_damping > 0.0 && p.tom_damping <= 1.0) {
        fatal("persona.tom_damping", format!("must lie in (0, 1], got {}", p.tom_damping));
    }
    if !(p.exploration_rate >= 0.0 && p.exploration_rate < 1.0) {
        fatal("persona.exploration_rate", format!("must lie in [0, 1), got {}", p.exploration_rate));
    }

    let h = &s.heuristic;
    for (name, v) in [
        ("heuristic.route_switch_threshold_min", h.route_switch_threshold_min),
        ("heuristic.clamp_early_min", h.clamp_early_min),
        ("heuristic.clamp_late_min", h.clamp_late_min),
        ("heuristic.early_tolerance_headways", h.early_tolerance_headways),
        ("heuristic.early_shift_fraction", h.early_shift_fraction),
        ("heuristic.queue_shift_fraction", h.queue_shift_fraction),
    ] {
        if !(v >= 0.0) {
            fatal(name, format!("must be >= 0, got {v}"));
        }
    }
    if !(0.0..=1.0).contains(&h.switch_inertia_prob) {
        fatal("heuristic.switch_inertia_prob", format!("must lie in [0, 1], got {}", h.switch_inertia_prob));
    }
    let (lo, hi) = s.departure_window();
    if lo < 0.0 || hi >= 1440.0 {
        fatal("heuristic.clamp_early_min", format!("departure window [{lo}, {hi}] leaves the day"));
    }

    let e = &s.engine;
    if e.threads < 1 {
        fatal("engine.threads", "must be at least 1".into());
    }
    if e.convergence_window_days < 2 {
        fatal("engine.convergence_window_days", "must be at least 2".into());
    }
    if !(e.convergence_threshold >= 0.0) {
        fatal("engine.convergence_threshold", format!("must be >= 0, got {}", e.convergence_threshold));
    }
    if !(e.flow_change_tolerance >= 0.0) {
        fatal("engine.flow_change_tolerance", format!("must be >= 0, got {}", e.flow_change_tolerance));
    }

    if let PolicySpec::Llm(llm) = &s.policy {
        let g = &llm.gateway;
        if g.mode == GatewayMode::Replay && g.cassette_path.is_none() {
            fatal("policy.gateway.cassette_path", "replay mode requires a cassette".into());
        }
        if g.mode == GatewayMode::Record && g.cassette_path.is_none() {
            fatal("policy.gateway.cassette_path", "record mode requires a cassette".into());
        }
        if g.parallelism_bound < 1 {
            fatal("policy.gateway.parallelism_bound", "must be at least 1".into());
        }
        if !(g.temperature >= 0.0) {
            fatal("policy.gateway.temperature", format!("must be >= 0, got {}", g.temperature));
        }
        if !(g.timeout_sec > 0.0) {
            fatal("policy.gateway.timeout_sec", format!("must be > 0, got {}", g.timeout_sec));
        }
        if llm.max_malformed < 1 {
            fatal("policy.max_malformed", "must be at least 1".into());
        }
    }

    if s.case_kind == CaseKind::BottleneckDeparture && w.late_per_min <= w.early_per_min {
        out.push(Violation {
            field: "persona.cost_weights.late_per_min".into(),
            severity: Severity::Warning,
            message: "γ ≤ β: late penalty does not exceed early penalty, equilibrium is ill-posed".into(),
        });
    }
    out
}
