use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use commute_core::engine::{ConvergenceVerdict, Engine, RunLog};
use commute_core::equilibrium::{bottleneck_best_response_oracle, OracleSettings};
use commute_core::gateway::{serve_mock, MockScript};
use commute_core::metrics::{
    benchmark_for, equilibrium_gap, interval_share_table, write_agent_days_csv, write_days_csv, write_gaps_csv, write_intervals_csv,
    Benchmark, GapRow, IntervalShareTable,
};
use commute_core::policy::{build_policy, DecisionContext, LlmPolicy};
use commute_core::scenario::{builtin_scenario, load_scenario, scenario_to_string, validate_scenario, PolicySpec, Scenario, Severity};
use commute_core::time::format_clock;

use crate::{BenchmarkArgs, ExportArgs, ModeArg, Overrides, PolicyKind, RecordArgs, ReportArgs, RunArgs, ScenarioArgs};

/// Exit 1 for anything wrong with the inputs, exit 2 when a valid run fails.
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type CmdResult = Result<(), Failure>;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn path_value(p: &Path) -> Value {
    Value::String(absolute(p).display().to_string())
}

fn load(args: &ScenarioArgs) -> Result<Scenario, Failure> {
    let scenario = match (&args.scenario, &args.builtin) {
        (Some(path), _) => load_scenario(path).with_context(|| format!("scenario {}", path.display())),
        (None, Some(name)) => builtin_scenario(name).context("builtin scenario"),
        (None, None) => return Err(invalid(anyhow!("give --scenario PATH or --builtin NAME"))),
    };
    scenario.map_err(invalid)
}

fn override_pairs(o: &Overrides) -> Result<Vec<(String, Value)>, Failure> {
    let mut pairs: Vec<(String, Value)> = Vec::new();
    match (o.policy, &o.script) {
        (Some(PolicyKind::Replay), Some(script)) => {
            pairs.push(("/policy".into(), json!({ "kind": "replay", "script_path": path_value(script) })))
        }
        (Some(PolicyKind::Replay), None) => return Err(invalid(anyhow!("--policy replay needs --script"))),
        (Some(kind), _) => {
            let name = match kind {
                PolicyKind::Heuristic => "heuristic",
                PolicyKind::Llm => "llm",
                PolicyKind::Replay => unreachable!(),
            };
            pairs.push(("/policy/kind".into(), json!(name)));
        }
        (None, Some(script)) => pairs.push(("/policy/script_path".into(), path_value(script))),
        (None, None) => {}
    }
    let mut push = |pointer: &str, v: Option<Value>| {
        if let Some(v) = v {
            pairs.push((pointer.to_string(), v));
        }
    };
    push("/master_seed", o.seed.map(|x| json!(x)));
    push("/horizon_days", o.days.map(|x| json!(x)));
    push("/n_agents", o.agents.map(|x| json!(x)));
    push("/engine/threads", o.threads.map(|x| json!(x)));
    push(
        "/policy/gateway/mode",
        o.gateway_mode.map(|m| {
            json!(match m {
                ModeArg::Live => "live",
                ModeArg::Record => "record",
                ModeArg::Replay => "replay",
            })
        }),
    );
    push("/policy/gateway/cassette_path", o.cassette.as_deref().map(path_value));
    push("/policy/gateway/endpoint_url", o.endpoint.clone().map(Value::String));
    push("/policy/gateway/model_name", o.model.clone().map(Value::String));
    push("/policy/toggles/cot", o.cot.map(Value::Bool));
    push("/policy/toggles/tom", o.tom.map(Value::Bool));
    push("/policy/toggles/bounded_rationality", o.bounded_rationality.map(Value::Bool));
    push("/policy/toggles/self_correction", o.self_correction.map(Value::Bool));
    for raw in &o.set {
        let (pointer, text) = raw.split_once('=').ok_or_else(|| invalid(anyhow!("--set expects POINTER=JSON, got {raw:?}")))?;
        let value = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
        pairs.push((pointer.to_string(), value));
    }
    Ok(pairs)
}

fn prepare(args: &ScenarioArgs, o: &Overrides) -> Result<Scenario, Failure> {
    prepare_with(args, o, Vec::new())
}

/// Flags first, then `extra`; validated once after both.
fn prepare_with(args: &ScenarioArgs, o: &Overrides, extra: Vec<(String, Value)>) -> Result<Scenario, Failure> {
    let mut scenario = load(args)?;
    let mut pairs = override_pairs(o)?;
    pairs.extend(extra);
    scenario.apply_overrides(pairs).map_err(invalid)?;
    for v in validate_scenario(&scenario).into_iter().filter(|v| v.severity == Severity::Warning) {
        eprintln!("warning: {}: {}", v.field, v.message);
    }
    Ok(scenario)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), commute_core::metrics::MetricsError>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(runtime)?;
    Ok(buf)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    master_seed: Option<u64>,
    overrides: Vec<&'a commute_core::scenario::ResolvedField>,
    files: Vec<&'a str>,
}

fn write_manifest(dir: &Path, command: &str, scenario: Option<&Scenario>, files: &[&str]) -> Result<(), Failure> {
    let manifest = Manifest {
        command,
        scenario: scenario.map(|s| s.name.as_str()),
        master_seed: scenario.map(|s| s.master_seed),
        overrides: scenario
            .map(|s| s.resolved.iter().filter(|r| r.source == commute_core::scenario::ValueSource::Override).collect())
            .unwrap_or_default(),
        files: files.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(dir, "manifest.json", text.as_bytes())
}

fn day_line(log: &RunLog, i: usize) -> String {
    let d = &log.days[i];
    let a = &d.aggregates;
    let mut line =
        format!("day {:>3}  mean_tt {:>6.2}  mean_cost {:>7.2}  late {:>5.1}%", d.day, a.mean_tt, a.mean_cost, a.late_share * 100.0);
    for (r, f) in &a.route_flows {
        let _ = write!(line, "  f{r} {f:>3}");
    }
    if let Some(l1) = d.convergence.histogram_l1 {
        let _ = write!(line, "  l1 {l1:.3}");
    }
    let fallbacks = d.traces.iter().filter(|t| t.fallback.is_some()).count();
    if fallbacks > 0 {
        let _ = write!(line, "  fallbacks {fallbacks}");
    }
    line
}

fn verdict_text(v: &ConvergenceVerdict) -> String {
    match v {
        ConvergenceVerdict::InsufficientData => "insufficient data".into(),
        ConvergenceVerdict::NotConverged => "not converged".into(),
        ConvergenceVerdict::Converged { since_day, confirmed_day } => {
            format!("converged from day {since_day} (confirmed day {confirmed_day})")
        }
    }
}

pub fn run(args: RunArgs) -> CmdResult {
    let scenario = prepare(&args.scenario, &args.overrides)?;
    let policy = build_policy(&scenario).map_err(invalid)?;
    let engine = Engine::new(&scenario, policy.as_ref()).map_err(runtime)?;
    ensure_dir(&args.out)?;
    let log_path = args.out.join("runlog.jsonl");
    let log = if args.resume { engine.resume(&log_path) } else { engine.run(Some(&log_path)) };
    let log = log.map_err(runtime)?;

    if !args.quiet {
        for i in 0..log.days.len() {
            println!("{}", day_line(&log, i));
        }
    }
    println!("{}: {}", scenario.name, verdict_text(&log.verdict()));

    write_file(&args.out, "days.csv", &csv_bytes(|b| write_days_csv(&log, b))?)?;
    write_file(&args.out, "agent_days.csv", &csv_bytes(|b| write_agent_days_csv(&log, b))?)?;
    write_manifest(&args.out, "run", Some(&scenario), &["runlog.jsonl", "days.csv", "agent_days.csv"])
}

fn benchmark_csv(b: &Benchmark) -> String {
    let mut out = String::from("quantity,value\n");
    match b {
        Benchmark::BottleneckDeparture(v) => {
            let _ = writeln!(out, "arrival_window_start_min,{}", v.arrival_window_start);
            let _ = writeln!(out, "arrival_window_start_hhmm,{}", format_clock(v.arrival_window_start));
            let _ = writeln!(out, "arrival_window_end_min,{}", v.arrival_window_end);
            let _ = writeln!(out, "arrival_window_end_hhmm,{}", format_clock(v.arrival_window_end));
            let _ = writeln!(out, "rush_length_min,{}", v.rush_length_min);
            if let Some(c) = v.equilibrium_cost {
                let _ = writeln!(out, "equilibrium_cost,{c}");
            }
        }
        Benchmark::TwoRoute(w) => {
            for (r, f) in w.route_ids.iter().zip(&w.flows) {
                let _ = writeln!(out, "flow_route_{r},{f}");
            }
            let _ = writeln!(out, "common_time_min,{}", w.common_time);
        }
    }
    out
}

pub fn benchmark(args: BenchmarkArgs) -> CmdResult {
    let scenario = prepare(&args.scenario, &args.overrides)?;
    let b = benchmark_for(&scenario).map_err(invalid)?;
    match &b {
        Benchmark::BottleneckDeparture(v) => {
            println!(
                "arrival window {}-{} (rush {:.2} min)",
                format_clock(v.arrival_window_start),
                format_clock(v.arrival_window_end),
                v.rush_length_min
            );
            if let Some(c) = v.equilibrium_cost {
                println!("equilibrium cost {c:.2}");
            }
        }
        Benchmark::TwoRoute(w) => {
            let flows: Vec<String> = w.route_ids.iter().zip(&w.flows).map(|(r, f)| format!("route {r}: {f:.4}")).collect();
            println!("{}; common time {:.4} min", flows.join(", "), w.common_time);
            if let Some(note) = &w.note {
                println!("note: {note}");
            }
        }
    }

    if args.oracle {
        let ctx = DecisionContext::new(&scenario);
        let corridor = ctx.corridor().ok_or_else(|| invalid(anyhow!("--oracle needs a bottleneck scenario")))?;
        let settings = OracleSettings::new(args.grid_step, args.max_iters);
        let r = bottleneck_best_response_oracle(scenario.n_agents, &corridor, &ctx.schedule(), &settings).map_err(invalid)?;
        println!(
            "oracle: {} sweeps, converged {}, mean cost {:.2}, spread {:.2}, max regret {:.2}, arrivals {}-{}",
            r.iterations,
            r.converged,
            r.mean_cost,
            r.cost_spread,
            r.max_regret,
            format_clock(r.arrival_span.0),
            format_clock(r.arrival_span.1)
        );
    }

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let mut text = serde_json::to_string_pretty(&b).expect("benchmark serializes");
        text.push('\n');
        write_file(out, "benchmark.json", text.as_bytes())?;
        write_file(out, "benchmark.csv", benchmark_csv(&b).as_bytes())?;
        write_manifest(out, "benchmark", Some(&scenario), &["benchmark.json", "benchmark.csv"])?;
    }
    Ok(())
}

fn print_table(t: &IntervalShareTable) {
    let mut header = String::from("bin          ");
    for (a, b) in &t.groups {
        let _ = write!(header, " dep {a:>2}-{b:<2} arr {a:>2}-{b:<2}");
    }
    println!("{header}");
    for (i, &s) in t.bin_starts.iter().enumerate() {
        let mut line = format!("{}-{}", format_clock(s), format_clock(s + 15.0));
        for g in 0..t.groups.len() {
            let _ = write!(line, " {:>9.2}% {:>9.2}%", t.departures[i][g], t.arrivals[i][g]);
        }
        println!("{line}");
    }
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    scenario: &'a str,
    days: usize,
    verdict: ConvergenceVerdict,
    benchmark: &'a Benchmark,
    final_gap: Option<&'a GapRow>,
}

pub fn report(args: ReportArgs) -> CmdResult {
    let log = RunLog::read(&args.runlog).with_context(|| format!("run log {}", args.runlog.display())).map_err(invalid)?;
    let benchmark = match &args.benchmark {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("benchmark {}", path.display())).map_err(invalid)?;
            serde_json::from_str::<Benchmark>(&text).with_context(|| format!("benchmark {}", path.display())).map_err(invalid)?
        }
        None => benchmark_for(&log.header.scenario).map_err(invalid)?,
    };
    let gaps = equilibrium_gap(&log, &benchmark).map_err(invalid)?;
    let table = interval_share_table(&log.days, args.group_days);
    let verdict = log.verdict();

    print_table(&table);
    println!("{}", verdict_text(&verdict));
    if let Some(g) = gaps.last() {
        let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!("final gap (day {}): flow {} arrival_emd {} cost {}", g.day, cell(g.flow_gap), cell(g.arrival_emd), cell(g.cost_gap));
    }

    ensure_dir(&args.out)?;
    write_file(&args.out, "intervals.csv", &csv_bytes(|b| write_intervals_csv(&table, b))?)?;
    write_file(&args.out, "gaps.csv", &csv_bytes(|b| write_gaps_csv(&gaps, b))?)?;
    write_file(&args.out, "days.csv", &csv_bytes(|b| write_days_csv(&log, b))?)?;
    let summary =
        ReportSummary { scenario: &log.header.scenario.name, days: log.days.len(), verdict, benchmark: &benchmark, final_gap: gaps.last() };
    let mut text = serde_json::to_string_pretty(&summary).expect("report serializes");
    text.push('\n');
    write_file(&args.out, "report.json", text.as_bytes())?;
    write_manifest(&args.out, "report", Some(&log.header.scenario), &["intervals.csv", "gaps.csv", "days.csv", "report.json"])
}

pub fn record(args: RecordArgs) -> CmdResult {
    let llm = match args.overrides.policy {
        Some(kind) => kind == PolicyKind::Llm,
        None => matches!(load(&args.scenario)?.policy, PolicySpec::Llm(_)),
    };
    if !llm {
        return Err(invalid(anyhow!("record-cassette needs an llm policy (use --policy llm)")));
    }
    let mock = match &args.mock_script {
        Some(path) => {
            let script = MockScript::load(path).map_err(invalid)?;
            Some(serve_mock(script, 0).map_err(runtime)?)
        }
        None => None,
    };
    let mut extra =
        vec![("/policy/gateway/mode".to_string(), json!("record")), ("/policy/gateway/cassette_path".to_string(), path_value(&args.to))];
    if let Some(server) = &mock {
        extra.push(("/policy/gateway/endpoint_url".to_string(), json!(server.url())));
    }
    let scenario = prepare_with(&args.scenario, &args.overrides, extra)?;
    if args.fresh && args.to.exists() {
        fs::remove_file(&args.to).with_context(|| format!("removing {}", args.to.display())).map_err(runtime)?;
    }
    if let Some(dir) = args.to.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let PolicySpec::Llm(spec) = &scenario.policy else { unreachable!() };
    let policy = LlmPolicy::from_spec(spec).map_err(invalid)?;
    let engine = Engine::new(&scenario, &policy).map_err(runtime)?;
    let sink = args.out.as_ref().map(|d| ensure_dir(d).map(|_| d.join("runlog.jsonl"))).transpose()?;
    let log = engine.run(sink.as_deref()).map_err(runtime)?;

    let exchanges = fs::read_to_string(&args.to).map(|t| t.lines().filter(|l| !l.trim().is_empty()).count()).unwrap_or(0);
    println!(
        "{}: {} exchanges in {}, {} network calls this run, {} fallbacks",
        scenario.name,
        exchanges,
        args.to.display(),
        policy.gateway().network_calls(),
        log.summary.as_ref().map_or(0, |s| s.fallback_count)
    );
    drop(mock);
    if let Some(out) = &args.out {
        write_manifest(out, "record-cassette", Some(&scenario), &["runlog.jsonl"])?;
    }
    Ok(())
}

pub fn export_scenario(args: ExportArgs) -> CmdResult {
    let scenario = prepare(&args.scenario, &args.overrides)?;
    let text = scenario_to_string(&scenario);
    match &args.output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
