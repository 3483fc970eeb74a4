//! Point-queue bottleneck loading, linear route loading and schedule cost.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::scenario::{Corridor, CostWeights, RouteOption};

pub type AgentId = u32;
pub type RouteId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice<T> {
    Departure(T),
    Route(RouteId),
}

impl<T: Copy> Choice<T> {
    pub fn departure(&self) -> Option<T> {
        match self {
            Choice::Departure(t) => Some(*t),
            Choice::Route(_) => None,
        }
    }

    pub fn route(&self) -> Option<RouteId> {
        match self {
            Choice::Route(r) => Some(*r),
            Choice::Departure(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelDecision<T> {
    pub agent_id: AgentId,
    pub day: u32,
    pub choice: Choice<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelOutcome<T> {
    pub agent_id: AgentId,
    pub day: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_id: Option<RouteId>,
    pub departure_min: T,
    pub arrival_min: T,
    pub travel_time_min: T,
    pub queue_delay_min: T,
    /// Arrival minus preferred arrival; positive when late.
    pub schedule_dev_min: T,
    pub cost: T,
}

/// Preferred arrival and per-minute penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleModel<T> {
    pub preferred_arrival: T,
    pub early_per_min: T,
    pub invehicle_per_min: T,
    pub late_per_min: T,
}

impl<T: Scalar> ScheduleModel<T> {
    pub fn from_config(preferred_arrival: f64, w: &CostWeights) -> Self {
        Self {
            preferred_arrival: T::lit(preferred_arrival),
            early_per_min: T::lit(w.early_per_min),
            invehicle_per_min: T::lit(w.invehicle_per_min),
            late_per_min: T::lit(w.late_per_min),
        }
    }

    pub fn cost(&self, travel_time: T, arrival: T) -> T {
        schedule_cost(travel_time, arrival, self)
    }
}

/// `α·TT + β·max(0, t* − arr) + γ·max(0, arr − t*)`.
pub fn schedule_cost<T: Scalar>(travel_time: T, arrival: T, m: &ScheduleModel<T>) -> T {
    let early = (m.preferred_arrival - arrival).max(T::zero());
    let late = (arrival - m.preferred_arrival).max(T::zero());
    m.invehicle_per_min * travel_time + m.early_per_min * early + m.late_per_min * late
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleneckModel<T> {
    pub free_flow_min: T,
    pub headway_min: T,
}

impl<T: Scalar> BottleneckModel<T> {
    pub fn from_config(c: &Corridor) -> Self {
        Self { free_flow_min: T::lit(c.free_flow_min), headway_min: T::lit(c.headway_min()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearRoute<T> {
    pub route_id: RouteId,
    pub intercept: T,
    pub slope: T,
}

impl<T: Copy + std::ops::Add<Output = T> + std::ops::Mul<Output = T>> LinearRoute<T> {
    pub fn time(&self, flow: T) -> T {
        self.intercept + self.slope * flow
    }
}

impl<T: Scalar> LinearRoute<T> {
    pub fn from_config(r: &RouteOption) -> Self {
        Self { route_id: r.route_id, intercept: T::lit(r.intercept_min), slope: T::lit(r.slope_min_per_agent) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("agent {agent_id} submitted a {found} decision to the {expected} simulator")]
    WrongCaseKind { agent_id: AgentId, expected: &'static str, found: &'static str },
    #[error("agent {agent_id} chose unknown route {route_id}")]
    UnknownRoute { agent_id: AgentId, route_id: RouteId },
    #[error("agent {0} appears more than once")]
    DuplicateAgent(AgentId),
}

fn check_unique<T>(decisions: &[TravelDecision<T>]) -> Result<(), SimError> {
    let mut seen = BTreeSet::new();
    for d in decisions {
        if !seen.insert(d.agent_id) {
            return Err(SimError::DuplicateAgent(d.agent_id));
        }
    }
    Ok(())
}

/// Exit times of a single point queue for departures given in queue order:
/// `exit_i = max(dep_i + T_ff, exit_{i-1} + h)`.
pub fn queue_exit_times<T: Scalar>(ordered_departures: &[T], corridor: &BottleneckModel<T>) -> Vec<T> {
    let mut exits = Vec::with_capacity(ordered_departures.len());
    let mut previous: Option<T> = None;
    for &dep in ordered_departures {
        let free = dep + corridor.free_flow_min;
        let exit = match previous {
            Some(p) => free.max(p + corridor.headway_min),
            None => free,
        };
        exits.push(exit);
        previous = Some(exit);
    }
    exits
}

/// Loads one day of departures onto the corridor. Ties in departure time are
/// served in ascending agent id; outcomes come back in input order.
pub fn simulate_bottleneck_day<T: Scalar>(
    decisions: &[TravelDecision<T>],
    corridor: &BottleneckModel<T>,
    schedule: &ScheduleModel<T>,
) -> Result<Vec<TravelOutcome<T>>, SimError> {
    let mut departures = Vec::with_capacity(decisions.len());
    for d in decisions {
        match d.choice {
            Choice::Departure(t) => departures.push(t),
            Choice::Route(_) => return Err(SimError::WrongCaseKind { agent_id: d.agent_id, expected: "bottleneck", found: "route" }),
        }
    }
    check_unique(decisions)?;

    let mut order: Vec<usize> = (0..decisions.len()).collect();
    order.sort_by(|&a, &b| {
        departures[a]
            .partial_cmp(&departures[b])
            .expect("departure times are comparable")
            .then(decisions[a].agent_id.cmp(&decisions[b].agent_id))
    });
    let ordered: Vec<T> = order.iter().map(|&i| departures[i]).collect();
    let exits = queue_exit_times(&ordered, corridor);

    let mut outcomes = vec![None; decisions.len()];
    for (slot, &i) in order.iter().enumerate() {
        let d = &decisions[i];
        let dep = departures[i];
        let arrival = exits[slot];
        let travel_time = arrival - dep;
        outcomes[i] = Some(TravelOutcome {
            agent_id: d.agent_id,
            day: d.day,
            route_id: None,
            departure_min: dep,
            arrival_min: arrival,
            travel_time_min: travel_time,
            queue_delay_min: travel_time - corridor.free_flow_min,
            schedule_dev_min: arrival - schedule.preferred_arrival,
            cost: schedule.cost(travel_time, arrival),
        });
    }
    Ok(outcomes.into_iter().map(|o| o.expect("every slot filled")).collect())
}

/// Counts agents per route, including routes nobody chose.
pub fn route_flows<T>(decisions: &[TravelDecision<T>], routes: &[LinearRoute<T>]) -> BTreeMap<RouteId, usize> {
    let mut flows: BTreeMap<RouteId, usize> = routes.iter().map(|r| (r.route_id, 0)).collect();
    for d in decisions {
        if let Choice::Route(r) = d.choice {
            if let Some(f) = flows.get_mut(&r) {
                *f += 1;
            }
        }
    }
    flows
}

/// Loads one day of route choices. Every user of route r experiences
/// `b_r + a_r·f_r`; trips start at `nominal_departure`. The cost is in-vehicle
/// time only since no departure time is chosen in this case.
pub fn simulate_route_day<T: Scalar>(
    decisions: &[TravelDecision<T>],
    routes: &[LinearRoute<T>],
    nominal_departure: T,
    schedule: &ScheduleModel<T>,
) -> Result<Vec<TravelOutcome<T>>, SimError> {
    for d in decisions {
        match d.choice {
            Choice::Route(r) if routes.iter().any(|x| x.route_id == r) => {}
            Choice::Route(r) => return Err(SimError::UnknownRoute { agent_id: d.agent_id, route_id: r }),
            Choice::Departure(_) => return Err(SimError::WrongCaseKind { agent_id: d.agent_id, expected: "route", found: "departure" }),
        }
    }
    check_unique(decisions)?;
    let flows = route_flows(decisions, routes);
    let times: BTreeMap<RouteId, (T, T)> =
        routes.iter().map(|r| (r.route_id, (r.time(T::from_count(flows[&r.route_id])), r.intercept))).collect();

    Ok(decisions
        .iter()
        .map(|d| {
            let route_id = d.choice.route().expect("checked above");
            let (travel_time, intercept) = times[&route_id];
            let arrival = nominal_departure + travel_time;
            TravelOutcome {
                agent_id: d.agent_id,
                day: d.day,
                route_id: Some(route_id),
                departure_min: nominal_departure,
                arrival_min: arrival,
                travel_time_min: travel_time,
                queue_delay_min: travel_time - intercept,
                schedule_dev_min: arrival - schedule.preferred_arrival,
                cost: schedule.invehicle_per_min * travel_time,
            }
        })
        .collect())
}
