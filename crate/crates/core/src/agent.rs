//! Per-agent memory: full history, a fuzzy long-term summary and a short
//! window of recent days.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Persona;
use crate::traffic_sim::{AgentId, Choice, RouteId};
use crate::{Decision, Outcome};

pub const TYPICAL_EMA_WEIGHT: f64 = 0.2;
pub const TYPICAL_QUANTUM_MIN: f64 = 5.0;
/// Slopes smaller than this (minutes per day) count as flat.
pub const TREND_DEADBAND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub day: u32,
    pub decision: Choice<f64>,
    pub outcome: Outcome,
}

impl MemoryEntry {
    pub fn new(decision: &Decision, outcome: &Outcome) -> Self {
        Self { day: decision.day, decision: decision.choice, outcome: *outcome }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteMemory {
    pub last_time_min: f64,
    pub last_day: u32,
    pub visits: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongTermStats {
    /// Quantized impression of a usual trip; `None` before the first trip.
    pub typical_travel_time_min: Option<f64>,
    pub best_cost_seen: Option<f64>,
    /// Best cost over every day except the most recent one.
    pub best_cost_before_last: Option<f64>,
    pub routes: BTreeMap<RouteId, RouteMemory>,
    pub entries_count: usize,
}

pub fn quantize_typical(minutes: f64) -> f64 {
    (minutes / TYPICAL_QUANTUM_MIN).round() * TYPICAL_QUANTUM_MIN
}

impl LongTermStats {
    fn absorb(&mut self, entry: &MemoryEntry) {
        let tt = entry.outcome.travel_time_min;
        let blended = match self.typical_travel_time_min {
            None => tt,
            Some(prev) => (1.0 - TYPICAL_EMA_WEIGHT) * prev + TYPICAL_EMA_WEIGHT * tt,
        };
        self.typical_travel_time_min = Some(quantize_typical(blended));
        self.best_cost_before_last = self.best_cost_seen;
        let cost = entry.outcome.cost;
        self.best_cost_seen = Some(self.best_cost_seen.map_or(cost, |b| b.min(cost)));
        if let Choice::Route(r) = entry.decision {
            let slot = self.routes.entry(r).or_insert(RouteMemory { last_time_min: tt, last_day: entry.day, visits: 0 });
            slot.last_time_min = tt;
            slot.last_day = entry.day;
            slot.visits += 1;
        }
        self.entries_count += 1;
    }

    /// Recomputes every statistic directly from a history.
    pub fn from_history(history: &[MemoryEntry]) -> Self {
        let min_cost = |entries: &[MemoryEntry]| entries.iter().map(|e| e.outcome.cost).reduce(f64::min);
        let mut typical: Option<f64> = None;
        for e in history {
            let tt = e.outcome.travel_time_min;
            typical = Some(quantize_typical(typical.map_or(tt, |p| 0.8 * p + 0.2 * tt)));
        }
        let mut routes = BTreeMap::new();
        for e in history {
            if let Choice::Route(r) = e.decision {
                let visits = history.iter().filter(|x| x.decision == Choice::Route(r)).count() as u32;
                routes.insert(r, RouteMemory { last_time_min: e.outcome.travel_time_min, last_day: e.day, visits });
            }
        }
        Self {
            typical_travel_time_min: typical,
            best_cost_seen: min_cost(history),
            best_cost_before_last: history.split_last().and_then(|(_, rest)| min_cost(rest)),
            routes,
            entries_count: history.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortTermView {
    pub entries: Vec<MemoryEntry>,
    pub mean_tt: f64,
    pub tt_stdev: f64,
    pub late_count: usize,
    pub early_count: usize,
    pub trend_sign: i8,
}

/// Least-squares slope of `y` against `x`; zero for fewer than two points.
fn ls_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

impl ShortTermView {
    pub fn from_entries(entries: &[MemoryEntry]) -> Self {
        if entries.is_empty() {
            return Self { entries: Vec::new(), mean_tt: 0.0, tt_stdev: 0.0, late_count: 0, early_count: 0, trend_sign: 0 };
        }
        let n = entries.len() as f64;
        let mean = entries.iter().map(|e| e.outcome.travel_time_min).sum::<f64>() / n;
        let var = entries.iter().map(|e| (e.outcome.travel_time_min - mean).powi(2)).sum::<f64>() / n;
        let points: Vec<(f64, f64)> = entries.iter().map(|e| (f64::from(e.day), e.outcome.travel_time_min)).collect();
        let slope = ls_slope(&points);
        let trend_sign = if slope.abs() < TREND_DEADBAND {
            0
        } else if slope > 0.0 {
            1
        } else {
            -1
        };
        Self {
            entries: entries.to_vec(),
            mean_tt: mean,
            tt_stdev: var.sqrt(),
            late_count: entries.iter().filter(|e| e.outcome.schedule_dev_min > 0.0).count(),
            early_count: entries.iter().filter(|e| e.outcome.schedule_dev_min < 0.0).count(),
            trend_sign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("agent {agent_id}: expected day {expected}, got day {got}")]
    OutOfOrder { agent_id: AgentId, expected: u32, got: u32 },
    #[error("agent {agent_id}: entry belongs to agent {other}")]
    WrongAgent { agent_id: AgentId, other: AgentId },
    #[error("agent {agent_id}: entry day {day} does not match its outcome day {outcome_day}")]
    DayMismatch { agent_id: AgentId, day: u32, outcome_day: u32 },
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn agent_seed(master_seed: u64, agent_id: AgentId) -> u64 {
    mix(mix(master_seed) ^ u64::from(agent_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: AgentId,
    pub persona: Persona,
    pub history: Vec<MemoryEntry>,
    pub long_term: LongTermStats,
    pub rng_seed: u64,
}

impl AgentState {
    pub fn new(agent_id: AgentId, persona: Persona, master_seed: u64) -> Self {
        Self { agent_id, persona, history: Vec::new(), long_term: LongTermStats::default(), rng_seed: agent_seed(master_seed, agent_id) }
    }

    pub fn last_day(&self) -> u32 {
        self.history.last().map_or(0, |e| e.day)
    }

    pub fn last_entry(&self) -> Option<&MemoryEntry> {
        self.history.last()
    }

    /// Appends the day's experience and refreshes the long-term summary.
    pub fn record_outcome(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        let expected = self.last_day() + 1;
        if entry.day != expected {
            return Err(MemoryError::OutOfOrder { agent_id: self.agent_id, expected, got: entry.day });
        }
        if entry.outcome.agent_id != self.agent_id {
            return Err(MemoryError::WrongAgent { agent_id: self.agent_id, other: entry.outcome.agent_id });
        }
        if entry.outcome.day != entry.day {
            return Err(MemoryError::DayMismatch { agent_id: self.agent_id, day: entry.day, outcome_day: entry.outcome.day });
        }
        self.long_term.absorb(&entry);
        self.history.push(entry);
        Ok(())
    }

    pub fn short_term_view(&self, k: usize) -> ShortTermView {
        let k = k.max(1);
        let start = self.history.len().saturating_sub(k);
        ShortTermView::from_entries(&self.history[start..])
    }

    /// Random stream for one day, independent of every other (agent, day) pair.
    pub fn rng_for_day(&self, day: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(u64::from(day));
        rng
    }
}
