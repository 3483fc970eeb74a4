//! Interval shares, distance to the uniform arrival profile, equilibrium gaps
//! and CSV exports over a run log.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DayRecord, RunLog};
use crate::equilibrium::{vickrey_benchmark, wardrop_split_linear, EquilibriumError, VickreyBenchmark, WardropBenchmark};
use crate::policy::DecisionContext;
use crate::scalar::Scalar;
use crate::scenario::{CaseKind, Scenario};
use crate::time::format_clock;
use crate::traffic_sim::RouteId;
use crate::Outcome;

pub const BIN_WIDTH_MIN: f64 = 15.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no arrivals to compare")]
    Empty,
    #[error("window start {0} is not before end {1}")]
    Window(f64, f64),
    #[error("benchmark is for {benchmark:?} but the run is {run:?}")]
    CaseMismatch { benchmark: CaseKind, run: CaseKind },
    #[error("unknown export selector {0:?} (expected days, agent-days, intervals or gaps)")]
    UnknownSelector(String),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Percent of observations per 15-minute bin, pooled over day groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalShareTable {
    pub group_days: u32,
    /// Inclusive (first, last) day of each group.
    pub groups: Vec<(u32, u32)>,
    pub bin_starts: Vec<f64>,
    /// `departures[bin][group]`
    pub departures: Vec<Vec<f64>>,
    pub arrivals: Vec<Vec<f64>>,
}

impl IntervalShareTable {
    pub fn column_sum(shares: &[Vec<f64>], group: usize) -> f64 {
        shares.iter().map(|row| row[group]).sum()
    }
}

fn departure_bin(t: f64) -> i64 {
    (t / BIN_WIDTH_MIN).floor() as i64
}

// Arrivals are right-closed so an arrival exactly at a boundary is on time.
fn arrival_bin(t: f64) -> i64 {
    (t / BIN_WIDTH_MIN).ceil() as i64 - 1
}

/// Departures fall in `[s, s+15)`, arrivals in `(s, s+15]`.
pub fn interval_share_table(days: &[DayRecord], group_days: u32) -> IntervalShareTable {
    let group_days = group_days.max(1);
    let mut groups: Vec<(u32, u32)> = Vec::new();
    let mut members: Vec<Vec<&DayRecord>> = Vec::new();
    for d in days {
        let g = (d.day.saturating_sub(1) / group_days) as usize;
        while groups.len() <= g {
            let first = groups.len() as u32 * group_days + 1;
            groups.push((first, first + group_days - 1));
            members.push(Vec::new());
        }
        members[g].push(d);
    }
    for (g, m) in groups.iter_mut().zip(&members) {
        if let Some(last) = m.iter().map(|d| d.day).max() {
            g.1 = g.1.min(last);
        }
    }

    let bins = || days.iter().flat_map(|d| &d.outcomes).flat_map(|o| [departure_bin(o.departure_min), arrival_bin(o.arrival_min)]);
    let (Some(lo), Some(hi)) = (bins().min(), bins().max()) else {
        return IntervalShareTable { group_days, groups, bin_starts: Vec::new(), departures: Vec::new(), arrivals: Vec::new() };
    };
    let rows = (hi - lo + 1) as usize;
    let mut departures = vec![vec![0.0; groups.len()]; rows];
    let mut arrivals = vec![vec![0.0; groups.len()]; rows];
    for (g, m) in members.iter().enumerate() {
        let total = m.iter().map(|d| d.outcomes.len()).sum::<usize>();
        if total == 0 {
            continue;
        }
        let unit = 100.0 / total as f64;
        for o in m.iter().flat_map(|d| &d.outcomes) {
            departures[(departure_bin(o.departure_min) - lo) as usize][g] += unit;
            arrivals[(arrival_bin(o.arrival_min) - lo) as usize][g] += unit;
        }
    }
    IntervalShareTable { group_days, groups, bin_starts: (lo..=hi).map(|b| b as f64 * BIN_WIDTH_MIN).collect(), departures, arrivals }
}

/// `∫ |c − (x − a)/len| dx` over `[x0, x1]`, the uniform CDF being linear.
fn segment_area<T: Scalar>(c: T, x0: T, x1: T, start: T, len: T) -> T {
    if x1 <= x0 {
        return T::zero();
    }
    let u0 = (x0 - start) / len - c;
    let u1 = (x1 - start) / len - c;
    let half = T::lit(0.5);
    if (u0 >= T::zero()) == (u1 >= T::zero()) {
        return (u0 + u1).abs() * half * (x1 - x0);
    }
    // The line crosses c inside the segment.
    let cross = x0 + (x1 - x0) * u0.abs() / (u0.abs() + u1.abs());
    (u0.abs() * (cross - x0) + u1.abs() * (x1 - cross)) * half
}

/// Area between the empirical arrival CDF and the uniform CDF on the window,
/// in minutes. Arrivals outside the window are clamped to its ends.
pub fn emd_to_uniform<T: Scalar>(arrivals: &[T], start: T, end: T) -> Result<T, MetricsError> {
    if arrivals.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(start < end) {
        return Err(MetricsError::Window(start.to_f64().unwrap_or(f64::NAN), end.to_f64().unwrap_or(f64::NAN)));
    }
    let len = end - start;
    let n = T::from_count(arrivals.len());
    let mut xs: Vec<T> = arrivals.iter().map(|&a| a.max(start).min(end)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("arrival times are comparable"));

    let mut area = T::zero();
    let mut x = start;
    for (below, &next) in xs.iter().enumerate() {
        area = area + segment_area(T::from_count(below) / n, x, next, start, len);
        x = next;
    }
    Ok(area + segment_area(T::one(), x, end, start, len))
}

/// Analytic target for the scenario's case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case")]
pub enum Benchmark {
    BottleneckDeparture(VickreyBenchmark<f64>),
    TwoRoute(WardropBenchmark<f64>),
}

impl Benchmark {
    pub fn case_kind(&self) -> CaseKind {
        match self {
            Benchmark::BottleneckDeparture(_) => CaseKind::BottleneckDeparture,
            Benchmark::TwoRoute(_) => CaseKind::TwoRoute,
        }
    }
}

pub fn benchmark_for(scenario: &Scenario) -> Result<Benchmark, MetricsError> {
    let ctx = DecisionContext::new(scenario);
    Ok(match scenario.case_kind {
        CaseKind::BottleneckDeparture => {
            let corridor = ctx.corridor().ok_or_else(|| EquilibriumError::InvalidInput("scenario has no corridor".into()))?;
            Benchmark::BottleneckDeparture(vickrey_benchmark(scenario.n_agents, &corridor, &ctx.schedule())?)
        }
        CaseKind::TwoRoute => Benchmark::TwoRoute(wardrop_split_linear(&ctx.routes(), scenario.n_agents)?),
    })
}

/// One day's distance from the benchmark. Route runs fill `flow_gap`
/// (first route's flow against its equilibrium flow); bottleneck runs fill the
/// arrival EMD and the mean-cost gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub day: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_emd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_gap: Option<f64>,
}

pub fn equilibrium_gap(log: &RunLog, benchmark: &Benchmark) -> Result<Vec<GapRow>, MetricsError> {
    let run = log.header.scenario.case_kind;
    if run != benchmark.case_kind() {
        return Err(MetricsError::CaseMismatch { benchmark: benchmark.case_kind(), run });
    }
    log.days.iter().map(|d| day_gap(d, benchmark)).collect()
}

pub fn day_gap(day: &DayRecord, benchmark: &Benchmark) -> Result<GapRow, MetricsError> {
    let mut row = GapRow { day: day.day, flow_gap: None, arrival_emd: None, cost_gap: None };
    match benchmark {
        Benchmark::TwoRoute(w) => {
            let (&route, &target) = w.route_ids.first().zip(w.flows.first()).ok_or(MetricsError::Empty)?;
            row.flow_gap = Some((day.flow(route) as f64 - target).abs());
        }
        Benchmark::BottleneckDeparture(v) => {
            let arrivals: Vec<f64> = day.outcomes.iter().map(|o| o.arrival_min).collect();
            row.arrival_emd = Some(emd_to_uniform(&arrivals, v.arrival_window_start, v.arrival_window_end)?);
            row.cost_gap = v.equilibrium_cost.map(|c| (day.aggregates.mean_cost - c).abs());
        }
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Days,
    AgentDays,
    Intervals,
    Gaps,
}

impl FromStr for ExportKind {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "days" => Ok(Self::Days),
            "agent-days" => Ok(Self::AgentDays),
            "intervals" => Ok(Self::Intervals),
            "gaps" => Ok(Self::Gaps),
            other => Err(MetricsError::UnknownSelector(other.into())),
        }
    }
}

fn num(x: f64) -> String {
    format!("{}", (x * 1e6).round() / 1e6)
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn route_columns(log: &RunLog) -> Vec<RouteId> {
    log.header.scenario.routes.iter().flatten().map(|r| r.route_id).collect()
}

/// Day aggregates: `day,mean_tt,max_tt,mean_cost,mean_queue_delay,late_share,
/// early_share,f<route>...,histogram_l1,max_flow_change`.
pub fn write_days_csv<W: Write>(log: &RunLog, out: W) -> Result<(), MetricsError> {
    let routes = route_columns(log);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["day", "mean_tt", "max_tt", "mean_cost", "mean_queue_delay", "late_share", "early_share"].map(String::from).to_vec();
    header.extend(routes.iter().map(|r| format!("f{r}")));
    header.extend(["histogram_l1", "max_flow_change"].map(String::from));
    w.write_record(&header)?;
    for d in &log.days {
        let a = &d.aggregates;
        let mut row = vec![
            d.day.to_string(),
            num(a.mean_tt),
            num(a.max_tt),
            num(a.mean_cost),
            num(a.mean_queue_delay),
            num(a.late_share),
            num(a.early_share),
        ];
        row.extend(routes.iter().map(|&r| d.flow(r).to_string()));
        row.push(opt(d.convergence.histogram_l1));
        row.push(opt(d.convergence.max_flow_change));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub const AGENT_DAY_COLUMNS: [&str; 13] = [
    "day",
    "agent_id",
    "route_id",
    "departure_min",
    "departure_hhmm",
    "arrival_min",
    "arrival_hhmm",
    "travel_time_min",
    "queue_delay_min",
    "schedule_dev_min",
    "cost",
    "malformed",
    "fallback",
];

/// One row per agent and day. The minute columns reproduce every outcome
/// field; `read_agent_days_csv` parses them back.
pub fn write_agent_days_csv<W: Write>(log: &RunLog, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGENT_DAY_COLUMNS)?;
    for d in &log.days {
        for o in &d.outcomes {
            let trace = d.traces.iter().find(|t| t.agent_id == o.agent_id);
            w.write_record([
                o.day.to_string(),
                o.agent_id.to_string(),
                o.route_id.map(|r| r.to_string()).unwrap_or_default(),
                num(o.departure_min),
                format_clock(o.departure_min),
                num(o.arrival_min),
                format_clock(o.arrival_min),
                num(o.travel_time_min),
                num(o.queue_delay_min),
                num(o.schedule_dev_min),
                num(o.cost),
                trace.map(|t| t.malformed.to_string()).unwrap_or_default(),
                trace.and_then(|t| t.fallback.clone()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct AgentDayRow {
    day: u32,
    agent_id: u32,
    route_id: Option<RouteId>,
    departure_min: f64,
    arrival_min: f64,
    travel_time_min: f64,
    queue_delay_min: f64,
    schedule_dev_min: f64,
    cost: f64,
}

pub fn read_agent_days_csv<R: Read>(input: R) -> Result<Vec<Outcome>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<AgentDayRow>()
        .map(|row| {
            let row = row?;
            Ok(Outcome {
                agent_id: row.agent_id,
                day: row.day,
                route_id: row.route_id,
                departure_min: row.departure_min,
                arrival_min: row.arrival_min,
                travel_time_min: row.travel_time_min,
                queue_delay_min: row.queue_delay_min,
                schedule_dev_min: row.schedule_dev_min,
                cost: row.cost,
            })
        })
        .collect()
}

/// Interval table: one row per bin, departure then arrival columns per group.
pub fn write_intervals_csv<W: Write>(table: &IntervalShareTable, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["bin_start_min", "bin_start_hhmm", "bin_end_hhmm"].map(String::from).to_vec();
    header.extend(table.groups.iter().map(|(a, b)| format!("dep_days_{a}_{b}")));
    header.extend(table.groups.iter().map(|(a, b)| format!("arr_days_{a}_{b}")));
    w.write_record(&header)?;
    for (i, &s) in table.bin_starts.iter().enumerate() {
        let mut row = vec![num(s), format_clock(s), format_clock(s + BIN_WIDTH_MIN)];
        row.extend(table.departures[i].iter().map(|&x| format!("{x:.2}")));
        row.extend(table.arrivals[i].iter().map(|&x| format!("{x:.2}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `day,flow_gap,arrival_emd,cost_gap`; empty cells where a column does not
/// apply to the case.
pub fn write_gaps_csv<W: Write>(rows: &[GapRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "flow_gap", "arrival_emd", "cost_gap"])?;
    for r in rows {
        w.write_record([r.day.to_string(), opt(r.flow_gap), opt(r.arrival_emd), opt(r.cost_gap)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv<W: Write>(
    log: &RunLog,
    kind: ExportKind,
    benchmark: Option<&Benchmark>,
    group_days: u32,
    out: W,
) -> Result<(), MetricsError> {
    match kind {
        ExportKind::Days => write_days_csv(log, out),
        ExportKind::AgentDays => write_agent_days_csv(log, out),
        ExportKind::Intervals => write_intervals_csv(&interval_share_table(&log.days, group_days), out),
        ExportKind::Gaps => {
            let computed;
            let b = match benchmark {
                Some(b) => b,
                None => {
                    computed = benchmark_for(&log.header.scenario)?;
                    &computed
                }
            };
            write_gaps_csv(&equilibrium_gap(log, b)?, out)
        }
    }
}
