//! The day loop: decide, simulate, remember, check convergence.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{AgentState, MemoryEntry, MemoryError};
use crate::policy::{build_policy, DecisionContext, DecisionPolicy, DecisionTrace, PolicyError, PolicyMetadata};
use crate::scenario::{CaseKind, Scenario};
use crate::traffic_sim::{simulate_bottleneck_day, simulate_route_day, AgentId, RouteId, SimError, TravelDecision};
use crate::{Decision, Outcome};

pub const RUNLOG_FORMAT: &str = "commute-runlog";
pub const RUNLOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAggregates {
    pub mean_tt: f64,
    pub max_tt: f64,
    pub mean_cost: f64,
    pub mean_queue_delay: f64,
    pub late_share: f64,
    pub early_share: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub route_flows: BTreeMap<RouteId, usize>,
}

impl DayAggregates {
    pub fn from_outcomes(outcomes: &[Outcome], route_ids: &[RouteId]) -> Self {
        let n = outcomes.len().max(1) as f64;
        let sum = |f: fn(&Outcome) -> f64| outcomes.iter().map(f).sum::<f64>();
        let mut route_flows: BTreeMap<RouteId, usize> = route_ids.iter().map(|&r| (r, 0)).collect();
        for o in outcomes {
            if let Some(r) = o.route_id {
                *route_flows.entry(r).or_insert(0) += 1;
            }
        }
        Self {
            mean_tt: sum(|o| o.travel_time_min) / n,
            max_tt: outcomes.iter().map(|o| o.travel_time_min).fold(0.0, f64::max),
            mean_cost: sum(|o| o.cost) / n,
            mean_queue_delay: sum(|o| o.queue_delay_min) / n,
            late_share: outcomes.iter().filter(|o| o.schedule_dev_min > 0.0).count() as f64 / n,
            early_share: outcomes.iter().filter(|o| o.schedule_dev_min < 0.0).count() as f64 / n,
            route_flows,
        }
    }
}

/// Departure counts per whole minute, ascending.
pub fn departure_histogram(outcomes: &[Outcome]) -> Vec<(i64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for o in outcomes {
        *bins.entry(o.departure_min.floor() as i64).or_insert(0) += 1;
    }
    bins.into_iter().collect()
}

/// L1 distance between two histograms after normalising each to unit mass.
pub fn histogram_l1(a: &[(i64, usize)], b: &[(i64, usize)]) -> f64 {
    let total = |h: &[(i64, usize)]| h.iter().map(|x| x.1).sum::<usize>().max(1) as f64;
    let (ta, tb) = (total(a), total(b));
    let mut merged: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &(k, c) in a {
        merged.entry(k).or_default().0 = c as f64 / ta;
    }
    for &(k, c) in b {
        merged.entry(k).or_default().1 = c as f64 / tb;
    }
    merged.values().map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_flow_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: u32,
    pub decisions: Vec<Decision>,
    pub outcomes: Vec<Outcome>,
    pub aggregates: DayAggregates,
    pub departure_histogram: Vec<(i64, usize)>,
    pub convergence: ConvergenceMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<DecisionTrace>,
}

impl DayRecord {
    fn new(
        day: u32,
        decisions: Vec<Decision>,
        outcomes: Vec<Outcome>,
        route_ids: &[RouteId],
        traces: Vec<DecisionTrace>,
        previous: Option<&DayRecord>,
    ) -> Self {
        let aggregates = DayAggregates::from_outcomes(&outcomes, route_ids);
        let departure_histogram = departure_histogram(&outcomes);
        let mut record =
            Self { day, decisions, outcomes, aggregates, departure_histogram, convergence: ConvergenceMetrics::default(), traces };
        if let Some(prev) = previous {
            record.convergence = compare_days(prev, &record);
        }
        record
    }

    pub fn flow(&self, route_id: RouteId) -> usize {
        self.aggregates.route_flows.get(&route_id).copied().unwrap_or(0)
    }
}

pub fn compare_days(prev: &DayRecord, cur: &DayRecord) -> ConvergenceMetrics {
    let max_flow_change = (!cur.aggregates.route_flows.is_empty())
        .then(|| cur.aggregates.route_flows.iter().map(|(r, &f)| (f as f64 - prev.flow(*r) as f64).abs()).fold(0.0, f64::max));
    ConvergenceMetrics { histogram_l1: Some(histogram_l1(&prev.departure_histogram, &cur.departure_histogram)), max_flow_change }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ConvergenceVerdict {
    InsufficientData,
    NotConverged,
    /// First run of `window` consecutive stable days starts at `since_day`
    /// and completes at `confirmed_day`.
    Converged {
        since_day: u32,
        confirmed_day: u32,
    },
}

/// A day is stable when its departure histogram is within `threshold` (L1)
/// of the previous day's and no route gained or lost more than
/// `flow_tolerance` agents.
pub fn check_convergence(records: &[DayRecord], window: usize, threshold: f64, flow_tolerance: f64) -> ConvergenceVerdict {
    let window = window.max(2);
    if records.len() < window + 1 {
        return ConvergenceVerdict::InsufficientData;
    }
    let mut streak = 0;
    for i in 1..records.len() {
        let m = compare_days(&records[i - 1], &records[i]);
        let stable = m.histogram_l1.is_some_and(|d| d <= threshold) && m.max_flow_change.is_none_or(|c| c <= flow_tolerance);
        streak = if stable { streak + 1 } else { 0 };
        if streak == window {
            return ConvergenceVerdict::Converged { since_day: records[i + 1 - window].day, confirmed_day: records[i].day };
        }
    }
    ConvergenceVerdict::NotConverged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub scenario: Scenario,
    pub policy: PolicyMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub days: u32,
    pub verdict: ConvergenceVerdict,
    pub fallback_count: usize,
    pub malformed_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub days: Vec<DayRecord>,
    pub summary: Option<RunSummary>,
}

fn tagged_line<T: Serialize>(kind: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("log line serializes");
    v.as_object_mut().expect("log lines are objects").insert("type".into(), Value::String(kind.into()));
    let mut line = serde_json::to_string(&v).expect("log line serializes");
    line.push('\n');
    line
}

impl RunLog {
    pub fn header_line(&self) -> String {
        tagged_line("header", &self.header)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = self.header_line();
        for d in &self.days {
            out.push_str(&tagged_line("day", d));
        }
        if let Some(s) = &self.summary {
            out.push_str(&tagged_line("summary", s));
        }
        out
    }

    /// Parses a log; a torn last line (interrupted write) is dropped.
    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut header = None;
        let mut days = Vec::new();
        let mut summary = None;
        for (i, line) in lines.iter().enumerate() {
            let value: Value = match serde_json::from_str(line) {
                Ok(v) => v,
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
                Err(e) => return Err(EngineError::Log(format!("line {}: {e}", i + 1))),
            };
            let bad = |e: serde_json::Error| EngineError::Log(format!("line {}: {e}", i + 1));
            match value.get("type").and_then(Value::as_str) {
                Some("header") if i == 0 => header = Some(serde_json::from_value::<RunHeader>(value).map_err(bad)?),
                Some("day") => days.push(serde_json::from_value::<DayRecord>(value).map_err(bad)?),
                Some("summary") => summary = Some(serde_json::from_value::<RunSummary>(value).map_err(bad)?),
                other => return Err(EngineError::Log(format!("line {}: unexpected entry {other:?}", i + 1))),
            }
        }
        let header = header.ok_or_else(|| EngineError::Log("missing header line".into()))?;
        if header.format != RUNLOG_FORMAT {
            return Err(EngineError::Log(format!("not a run log: format {:?}", header.format)));
        }
        Ok(Self { header, days, summary })
    }

    pub fn read(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn verdict(&self) -> ConvergenceVerdict {
        let e = &self.header.scenario.engine;
        check_convergence(&self.days, e.convergence_window_days, e.convergence_threshold, e.flow_change_tolerance)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("agent {agent_id} on day {day}: {source}")]
    Policy { agent_id: AgentId, day: u32, source: PolicyError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run log: {0}")]
    Log(String),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("run log was produced by a different scenario")]
    ScenarioMismatch,
}

struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    fn create(path: &Path, contents: &str) -> Result<Self, EngineError> {
        let io = |source| EngineError::Io { path: path.to_path_buf(), source };
        std::fs::write(path, contents).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    fn append(&mut self, line: &str) -> Result<(), EngineError> {
        let io = |source| EngineError::Io { path: self.path.clone(), source };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)
    }
}

pub struct Engine<'a> {
    scenario: &'a Scenario,
    policy: &'a dyn DecisionPolicy,
    pool: rayon::ThreadPool,
}

impl<'a> Engine<'a> {
    pub fn new(scenario: &'a Scenario, policy: &'a dyn DecisionPolicy) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(scenario.engine.threads.max(1))
            .build()
            .map_err(|e| EngineError::Threads(e.to_string()))?;
        Ok(Self { scenario, policy, pool })
    }

    pub fn initial_states(&self) -> Vec<AgentState> {
        (1..=self.scenario.n_agents as AgentId)
            .map(|id| AgentState::new(id, self.scenario.persona.clone(), self.scenario.master_seed))
            .collect()
    }

    fn header(&self) -> RunHeader {
        RunHeader {
            format: RUNLOG_FORMAT.into(),
            version: RUNLOG_VERSION,
            master_seed: self.scenario.master_seed,
            scenario: self.scenario.clone(),
            policy: self.policy.metadata(),
        }
    }

    /// One day: every decision from yesterday's states, one simulation, then
    /// memory updates in agent order.
    pub fn run_day(&self, states: &mut [AgentState], day: u32, previous: Option<&DayRecord>) -> Result<DayRecord, EngineError> {
        let ctx = DecisionContext::new(self.scenario);
        let policy = self.policy;
        let frozen: &[AgentState] = states;
        let results: Vec<_> = self.pool.install(|| frozen.par_iter().map(|s| policy.decide(s, day, &ctx)).collect());

        let mut decisions = Vec::with_capacity(results.len());
        let mut traces = Vec::new();
        for (state, result) in states.iter().zip(results) {
            let d = result.map_err(|source| EngineError::Policy { agent_id: state.agent_id, day, source })?;
            decisions.push(TravelDecision { agent_id: state.agent_id, day, choice: d.choice });
            traces.extend(d.trace);
        }

        let schedule = ctx.schedule();
        let routes = ctx.routes();
        let outcomes = match self.scenario.case_kind {
            CaseKind::BottleneckDeparture => {
                let corridor = ctx.corridor().expect("validated bottleneck scenario has a corridor");
                simulate_bottleneck_day(&decisions, &corridor, &schedule)?
            }
            CaseKind::TwoRoute => {
                let nominal = self.scenario.engine.route_nominal_departure_min.minutes();
                simulate_route_day(&decisions, &routes, nominal, &schedule)?
            }
        };

        for ((state, d), o) in states.iter_mut().zip(&decisions).zip(&outcomes) {
            state.record_outcome(MemoryEntry::new(d, o))?;
        }
        let route_ids: Vec<RouteId> = routes.iter().map(|r| r.route_id).collect();
        Ok(DayRecord::new(day, decisions, outcomes, &route_ids, traces, previous))
    }

    fn finish(&self, mut log: RunLog, mut states: Vec<AgentState>, mut writer: Option<LogWriter>) -> Result<RunLog, EngineError> {
        let start = log.days.last().map_or(1, |d| d.day + 1);
        for day in start..=self.scenario.horizon_days {
            let record = self.run_day(&mut states, day, log.days.last())?;
            if let Some(w) = writer.as_mut() {
                w.append(&tagged_line("day", &record))?;
            }
            log.days.push(record);
        }
        let summary = RunSummary {
            days: log.days.len() as u32,
            verdict: log.verdict(),
            fallback_count: log.days.iter().flat_map(|d| &d.traces).filter(|t| t.fallback.is_some()).count(),
            malformed_count: log.days.iter().flat_map(|d| &d.traces).map(|t| u64::from(t.malformed)).sum(),
        };
        if let Some(w) = writer.as_mut() {
            w.append(&tagged_line("summary", &summary))?;
        }
        log.summary = Some(summary);
        Ok(log)
    }

    /// Runs every day, appending each record to `sink` as soon as it exists.
    pub fn run(&self, sink: Option<&Path>) -> Result<RunLog, EngineError> {
        let log = RunLog { header: self.header(), days: Vec::new(), summary: None };
        let writer = sink.map(|p| LogWriter::create(p, &log.header_line())).transpose()?;
        self.finish(log, self.initial_states(), writer)
    }

    /// Continues an interrupted run log in place.
    pub fn resume(&self, path: &Path) -> Result<RunLog, EngineError> {
        let mut log = RunLog::read(path)?;
        if log.header.scenario != *self.scenario {
            return Err(EngineError::ScenarioMismatch);
        }
        if log.summary.is_some() {
            return Ok(log);
        }
        let mut states = self.initial_states();
        for record in &log.days {
            for ((state, d), o) in states.iter_mut().zip(&record.decisions).zip(&record.outcomes) {
                state.record_outcome(MemoryEntry::new(d, o))?;
            }
        }
        log.header = self.header();
        let writer = LogWriter::create(path, &log.to_jsonl())?;
        self.finish(log, states, Some(writer))
    }
}

/// Builds the scenario's policy and runs it.
pub fn run_scenario(scenario: &Scenario, sink: Option<&Path>) -> Result<RunLog, EngineError> {
    let policy = build_policy(scenario).map_err(|source| EngineError::Policy { agent_id: 0, day: 0, source })?;
    Engine::new(scenario, policy.as_ref())?.run(sink)
}
