use rand::Rng;

use super::{DecisionContext, DecisionPolicy, PolicyDecision, PolicyError, PolicyMetadata};
use crate::agent::{AgentState, MemoryEntry};
use crate::scenario::{CaseKind, HeuristicParams, Persona};
use crate::traffic_sim::{Choice, LinearRoute, RouteId};

/// Rule-based stand-in for a boundedly rational commuter.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicPolicy;

impl DecisionPolicy for HeuristicPolicy {
    fn decide(&self, state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        let choice = match ctx.case_kind() {
            CaseKind::BottleneckDeparture => Choice::Departure(heuristic_decide_departure(state, day, ctx)),
            CaseKind::TwoRoute => Choice::Route(heuristic_decide_route(state, day, ctx)),
        };
        Ok(PolicyDecision::plain(choice))
    }

    fn metadata(&self) -> PolicyMetadata {
        PolicyMetadata { kind: "heuristic".into(), ..Default::default() }
    }
}

fn clamp_to_grid(minutes: f64, window: (f64, f64)) -> f64 {
    minutes.round().clamp(window.0, window.1)
}

/// First-day departure: aim to arrive on time given the remembered trip
/// length (free flow when nothing is remembered), plus integer jitter.
pub fn day_one_departure(state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> f64 {
    let s = ctx.scenario;
    let typical = state.long_term.typical_travel_time_min.unwrap_or_else(|| s.free_flow_min());
    let spread = i64::from(s.heuristic.day1_jitter_min);
    let jitter = if spread > 0 { state.rng_for_day(day).gen_range(-spread..=spread) } else { 0 };
    clamp_to_grid(s.preferred_arrival() - typical + jitter as f64, ctx.window())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adjustment {
    /// Yesterday was close enough to the best earlier day.
    Inertia,
    Late {
        shift: f64,
    },
    Early {
        shift: f64,
    },
    Queue {
        shift: f64,
    },
    Hold,
}

impl Adjustment {
    /// Signed change to yesterday's departure, before rounding and clamping.
    pub fn delta(&self) -> f64 {
        match *self {
            Adjustment::Inertia | Adjustment::Hold => 0.0,
            Adjustment::Late { shift } | Adjustment::Queue { shift } => -shift,
            Adjustment::Early { shift } => shift,
        }
    }
}

/// Decides how to move yesterday's departure.
///
/// Late by `L`: leave `λ·(L + h)` earlier. Early by more than the tolerance:
/// leave `λ·E·early_shift_fraction` later. Otherwise a queue wait above the
/// tolerance moves the departure `λ·q·queue_shift_fraction` earlier. The
/// inertia test compares yesterday's cost against the best cost of the days
/// before it.
pub fn departure_adjustment(
    yesterday: &MemoryEntry,
    best_before: Option<f64>,
    persona: &Persona,
    params: &HeuristicParams,
    headway: f64,
) -> Adjustment {
    if let Some(best) = best_before {
        if yesterday.outcome.cost <= (1.0 + persona.inertia_band) * best {
            return Adjustment::Inertia;
        }
    }
    let damping = persona.tom_damping;
    let tolerance = params.early_tolerance_headways * headway;
    let dev = yesterday.outcome.schedule_dev_min;
    let queue = yesterday.outcome.queue_delay_min;
    if dev > 0.0 {
        Adjustment::Late { shift: damping * (dev + headway) }
    } else if -dev > tolerance {
        Adjustment::Early { shift: damping * -dev * params.early_shift_fraction }
    } else if queue > tolerance {
        Adjustment::Queue { shift: damping * queue * params.queue_shift_fraction }
    } else {
        Adjustment::Hold
    }
}

pub fn heuristic_decide_departure(state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> f64 {
    let Some(last) = state.last_entry() else {
        return day_one_departure(state, day, ctx);
    };
    let yesterday = last.decision.departure().unwrap_or(last.outcome.departure_min);
    let adj = departure_adjustment(
        last,
        state.long_term.best_cost_before_last,
        &state.persona,
        &ctx.scenario.heuristic,
        ctx.scenario.headway_min(),
    );
    match adj {
        Adjustment::Inertia => yesterday,
        other => clamp_to_grid(yesterday + other.delta(), ctx.window()),
    }
}

/// Route with the smallest free-flow time, ties to the lower id.
pub fn day_one_route(routes: &[LinearRoute<f64>]) -> RouteId {
    routes
        .iter()
        .min_by(|a, b| a.intercept.total_cmp(&b.intercept).then(a.route_id.cmp(&b.route_id)))
        .map(|r| r.route_id)
        .expect("route case has routes")
}

/// Estimated time on every route other than `current`.
///
/// With two routes the agent backs out its own route's load from the time it
/// experienced, `f = (t − b)/a`, and prices the other route with itself added
/// to the remaining travellers. Otherwise it uses the last time it saw on a
/// route, or the free-flow time for a route never tried.
pub fn route_estimates(
    state: &AgentState,
    current: &LinearRoute<f64>,
    experienced: f64,
    routes: &[LinearRoute<f64>],
    n_agents: usize,
) -> Vec<(RouteId, f64)> {
    let load = (current.slope > 0.0).then(|| ((experienced - current.intercept) / current.slope).max(1.0));
    routes
        .iter()
        .filter(|r| r.route_id != current.route_id)
        .map(|r| {
            let est = match load {
                Some(f) if routes.len() == 2 => r.time(n_agents as f64 - f + 1.0),
                _ => state.long_term.routes.get(&r.route_id).map_or(r.intercept, |m| m.last_time_min),
            };
            (r.route_id, est)
        })
        .collect()
}

pub fn heuristic_decide_route(state: &AgentState, day: u32, ctx: &DecisionContext<'_>) -> RouteId {
    let routes = ctx.routes();
    let Some(last) = state.last_entry() else {
        return day_one_route(&routes);
    };
    let current_id = last.decision.route().expect("route-case history");
    let current = routes.iter().find(|r| r.route_id == current_id).expect("route in route set");
    let experienced = last.outcome.travel_time_min;
    let estimates = route_estimates(state, current, experienced, &routes, ctx.scenario.n_agents);
    let Some(&(alt_id, alt_time)) = estimates.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))) else {
        return current_id;
    };
    let params = &ctx.scenario.heuristic;
    let gain = experienced - alt_time;
    if gain <= params.route_switch_threshold_min {
        return current_id;
    }

    // Dissatisfied: switch with a probability that grows with the gain
    // relative to how far one switch moves both route times.
    let alt = routes.iter().find(|r| r.route_id == alt_id).expect("route in route set");
    let mut rng = state.rng_for_day(day);
    let mut p = 1.0 - params.switch_inertia_prob;
    if current.slope > 0.0 && routes.len() == 2 {
        let load = ((experienced - current.intercept) / current.slope).max(1.0);
        p *= (gain / ((current.slope + alt.slope) * load)).min(1.0);
    }
    let mut choice = if rng.gen::<f64>() < p { alt_id } else { current_id };
    if rng.gen::<f64>() < state.persona.exploration_rate {
        choice = routes[rng.gen_range(0..routes.len())].route_id;
    }
    choice
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::builtin_scenario;
    use crate::Outcome;

    fn bn_entry(day: u32, dep: f64, arr: f64, cost: f64) -> MemoryEntry {
        MemoryEntry {
            day,
            decision: Choice::Departure(dep),
            outcome: Outcome {
                agent_id: 1,
                day,
                route_id: None,
                departure_min: dep,
                arrival_min: arr,
                travel_time_min: arr - dep,
                queue_delay_min: arr - dep - 30.0,
                schedule_dev_min: arr - 540.0,
                cost,
            },
        }
    }

    fn route_entry(day: u32, route: u32, tt: f64) -> MemoryEntry {
        MemoryEntry {
            day,
            decision: Choice::Route(route),
            outcome: Outcome {
                agent_id: 1,
                day,
                route_id: Some(route),
                departure_min: 480.0,
                arrival_min: 480.0 + tt,
                travel_time_min: tt,
                queue_delay_min: 0.0,
                schedule_dev_min: 480.0 + tt - 540.0,
                cost: 3.0 * tt,
            },
        }
    }

    #[test]
    fn day_one_without_jitter() {
        let mut s = builtin_scenario("bottleneck_40").unwrap();
        s.heuristic.day1_jitter_min = 0;
        let st = AgentState::new(1, s.persona.clone(), 1);
        assert_eq!(heuristic_decide_departure(&st, 1, &DecisionContext::new(&s)), 510.0);
    }

    #[test]
    fn day_one_jitter_is_bounded_integer() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        for id in 1..=200 {
            let st = AgentState::new(id, s.persona.clone(), 3);
            let d = heuristic_decide_departure(&st, 1, &DecisionContext::new(&s));
            assert!((500.0..=520.0).contains(&d));
            assert_eq!(d.fract(), 0.0);
        }
    }

    #[test]
    fn late_arrival_shifts_earlier() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        let mut st = AgentState::new(1, s.persona.clone(), 1);
        st.record_outcome(bn_entry(1, 510.0, 545.0, 155.0)).unwrap();
        let adj = departure_adjustment(st.last_entry().unwrap(), None, &s.persona, &s.heuristic, 1.0);
        assert!(matches!(adj, Adjustment::Late { shift } if (shift - 4.8).abs() < 1e-12));
        assert_eq!(heuristic_decide_departure(&st, 2, &DecisionContext::new(&s)), 505.0);
    }

    #[test]
    fn inertia_within_band() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        let adj = departure_adjustment(&bn_entry(3, 500.0, 540.0, 100.0), Some(95.0), &s.persona, &s.heuristic, 1.0);
        assert_eq!(adj, Adjustment::Inertia);
        let adj = departure_adjustment(&bn_entry(3, 500.0, 545.0, 105.0), Some(95.0), &s.persona, &s.heuristic, 1.0);
        assert!(matches!(adj, Adjustment::Late { .. }));
    }

    #[test]
    fn early_and_queue_shifts() {
        let s = builtin_scenario("bottleneck_40").unwrap();
        let early = departure_adjustment(&bn_entry(2, 480.0, 510.0, 120.0), None, &s.persona, &s.heuristic, 1.0);
        assert!(matches!(early, Adjustment::Early { shift } if (shift - 0.8 * 30.0 * 0.25).abs() < 1e-12));
        let queued = departure_adjustment(&bn_entry(2, 500.0, 539.0, 118.0), None, &s.persona, &s.heuristic, 1.0);
        assert!(matches!(queued, Adjustment::Queue { shift } if (shift - 0.8 * 9.0).abs() < 1e-12));
        let on_time = departure_adjustment(&bn_entry(2, 509.0, 539.0, 91.0), None, &s.persona, &s.heuristic, 1.0);
        assert_eq!(on_time, Adjustment::Hold);
    }

    #[test]
    fn first_day_route_is_fastest_free_flow() {
        let s = builtin_scenario("two_route_40").unwrap();
        let st = AgentState::new(1, s.persona.clone(), 1);
        assert_eq!(heuristic_decide_route(&st, 1, &DecisionContext::new(&s)), 1);
    }

    #[test]
    fn stays_when_times_match() {
        let s = builtin_scenario("two_route_40").unwrap();
        let mut st = AgentState::new(1, s.persona.clone(), 1);
        st.record_outcome(route_entry(1, 1, 65.0)).unwrap();
        // 15 on route 1, so 26 on route 2 after a switch: 66 > 65.
        for day in 2..50 {
            assert_eq!(heuristic_decide_route(&st, day, &DecisionContext::new(&s)), 1);
        }
    }

    #[test]
    fn switch_branch_both_ways() {
        let s = builtin_scenario("two_route_40").unwrap();
        let mut st = AgentState::new(1, s.persona.clone(), 1);
        st.record_outcome(route_entry(1, 1, 140.0)).unwrap();
        let est =
            route_estimates(&st, &LinearRoute { route_id: 1, intercept: 20.0, slope: 3.0 }, 140.0, &DecisionContext::new(&s).routes(), 40);
        assert_eq!(est, vec![(2, 41.0)]);
        let picks: Vec<u32> = (2..202).map(|d| heuristic_decide_route(&st, d, &DecisionContext::new(&s))).collect();
        let switched = picks.iter().filter(|&&r| r == 2).count();
        // p = 0.5 * 99 / (4 * 40) ~ 0.31, plus exploration
        assert!(switched > 35 && switched < 95, "switched {switched} of 200");
    }
}
