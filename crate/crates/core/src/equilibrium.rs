//! Analytic benchmarks and brute-force oracles for both cases.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Field, Scalar};
use crate::traffic_sim::{
    simulate_bottleneck_day, BottleneckModel, Choice, LinearRoute, RouteId, ScheduleModel, TravelDecision, TravelOutcome,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EquilibriumError {
    #[error("early and late penalties sum to zero")]
    ZeroPenaltySum,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Arrival window and cost of the continuous bottleneck equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VickreyBenchmark<T> {
    pub arrival_window_start: T,
    pub arrival_window_end: T,
    pub rush_length_min: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium_cost: Option<T>,
}

/// Equilibrium arrival window for `n` commuters through a bottleneck serving
/// `capacity_per_hour`, split around `preferred_arrival` in proportion
/// late:early.
pub fn vickrey_window<T: Scalar>(
    n: usize,
    capacity_per_hour: T,
    preferred_arrival: T,
    early_per_min: T,
    late_per_min: T,
) -> Result<VickreyBenchmark<T>, EquilibriumError> {
    if n < 1 {
        return Err(EquilibriumError::InvalidInput("at least one commuter required".into()));
    }
    if !(capacity_per_hour > T::zero()) {
        return Err(EquilibriumError::InvalidInput("capacity must be positive".into()));
    }
    if early_per_min < T::zero() || late_per_min < T::zero() {
        return Err(EquilibriumError::InvalidInput("penalties must be non-negative".into()));
    }
    let sum = early_per_min + late_per_min;
    if sum == T::zero() {
        return Err(EquilibriumError::ZeroPenaltySum);
    }
    let rush = T::from_count(n) / capacity_per_hour * T::lit(60.0);
    Ok(VickreyBenchmark {
        arrival_window_start: preferred_arrival - late_per_min / sum * rush,
        arrival_window_end: preferred_arrival + early_per_min / sum * rush,
        rush_length_min: rush,
        equilibrium_cost: None,
    })
}

/// Window plus equilibrium cost `α·T_ff + βγ/(β+γ)·rush`.
pub fn vickrey_benchmark<T: Scalar>(
    n: usize,
    corridor: &BottleneckModel<T>,
    schedule: &ScheduleModel<T>,
) -> Result<VickreyBenchmark<T>, EquilibriumError> {
    if !(corridor.headway_min > T::zero()) {
        return Err(EquilibriumError::InvalidInput("headway must be positive".into()));
    }
    let capacity = T::lit(60.0) / corridor.headway_min;
    let mut b = vickrey_window(n, capacity, schedule.preferred_arrival, schedule.early_per_min, schedule.late_per_min)?;
    let (beta, gamma) = (schedule.early_per_min, schedule.late_per_min);
    b.equilibrium_cost = Some(schedule.invehicle_per_min * corridor.free_flow_min + beta * gamma / (beta + gamma) * b.rush_length_min);
    Ok(b)
}

/// Continuous user-equilibrium route flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WardropBenchmark<T> {
    pub route_ids: Vec<RouteId>,
    pub flows: Vec<T>,
    pub common_time: T,
    pub is_interior: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl<T: Copy> WardropBenchmark<T> {
    pub fn flow_of(&self, route_id: RouteId) -> Option<T> {
        self.route_ids.iter().position(|&r| r == route_id).map(|i| self.flows[i])
    }
}

fn cmp<T: PartialOrd>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("comparable values")
}

/// Equal-time split over linear routes by growing the set of used routes in
/// order of free-flow time.
pub fn wardrop_split_linear<T: Field>(routes: &[LinearRoute<T>], n: usize) -> Result<WardropBenchmark<T>, EquilibriumError> {
    if routes.len() < 2 {
        return Err(EquilibriumError::InvalidInput(format!("need at least 2 routes, got {}", routes.len())));
    }
    if routes.iter().any(|r| r.slope < T::zero() || r.intercept < T::zero()) {
        return Err(EquilibriumError::InvalidInput("intercepts and slopes must be non-negative".into()));
    }
    let total = T::from_count(n);
    let mut order: Vec<usize> = (0..routes.len()).collect();
    order.sort_by(|&a, &b| {
        cmp(&routes[a].intercept, &routes[b].intercept)
            .then(cmp(&routes[a].slope, &routes[b].slope))
            .then(routes[a].route_id.cmp(&routes[b].route_id))
    });

    // Common time when the first `k` routes in `order` carry all flow.
    let mut time: Option<T> = None;
    let mut active = 0;
    let mut absorbing: Option<T> = None;
    for (k, &idx) in order.iter().enumerate() {
        let r = &routes[idx];
        if let Some(t) = time {
            if t <= r.intercept {
                break;
            }
        }
        active = k + 1;
        if r.slope == T::zero() {
            // A flat route caps the common time at its intercept.
            absorbing = Some(r.intercept);
            break;
        }
        let mut inv_sum = T::zero();
        let mut weighted = T::zero();
        for &j in &order[..active] {
            inv_sum = inv_sum + T::one() / routes[j].slope;
            weighted = weighted + routes[j].intercept / routes[j].slope;
        }
        time = Some((total + weighted) / inv_sum);
    }

    let mut flows = vec![T::zero(); routes.len()];
    let mut note = None;
    let common_time = match absorbing {
        None => {
            let t = time.expect("at least one route considered");
            for &j in &order[..active] {
                flows[j] = (t - routes[j].intercept) / routes[j].slope;
            }
            t
        }
        Some(t) => {
            let mut assigned = T::zero();
            for &j in &order[..active] {
                if routes[j].slope > T::zero() {
                    flows[j] = (t - routes[j].intercept) / routes[j].slope;
                    assigned = assigned + flows[j];
                }
            }
            let flat: Vec<usize> = order.iter().copied().filter(|&j| routes[j].slope == T::zero() && routes[j].intercept == t).collect();
            let share = (total - assigned) / T::from_count(flat.len());
            for &j in &flat {
                flows[j] = share;
            }
            if flat.len() > 1 {
                note = Some(format!(
                    "degenerate: {} flat routes share time {:?}; any split among them is an equilibrium, uniform split returned",
                    flat.len(),
                    t
                ));
            }
            t
        }
    };
    Ok(WardropBenchmark {
        route_ids: routes.iter().map(|r| r.route_id).collect(),
        is_interior: flows.iter().all(|f| *f > T::zero()),
        flows,
        common_time,
        note,
    })
}

/// Closed form for two routes: `f1 = (b2 − b1 + a2·N)/(a1 + a2)` clamped to
/// `[0, N]`.
pub fn two_route_closed_form<T: Field>(r1: &LinearRoute<T>, r2: &LinearRoute<T>, n: usize) -> Option<(T, T)> {
    let total = T::from_count(n);
    let denom = r1.slope + r2.slope;
    if denom == T::zero() {
        return None;
    }
    let mut f1 = (r2.intercept - r1.intercept + r2.slope * total) / denom;
    if f1 < T::zero() {
        f1 = T::zero();
    }
    if f1 > total {
        f1 = total;
    }
    Some((f1, total - f1))
}

/// Integer splits `(f1, f2)` from which no single traveller gains by switching.
pub fn integer_equilibrium_bruteforce<T: Field>(
    r1: &LinearRoute<T>,
    r2: &LinearRoute<T>,
    n: usize,
) -> Result<Vec<(usize, usize)>, EquilibriumError> {
    if n > 10_000 {
        return Err(EquilibriumError::InvalidInput(format!("population {n} exceeds 10000")));
    }
    let t1 = |f: usize| r1.time(T::from_count(f));
    let t2 = |f: usize| r2.time(T::from_count(f));
    Ok((0..=n).map(|f1| (f1, n - f1)).filter(|&(f1, f2)| (f1 == 0 || t2(f2 + 1) >= t1(f1)) && (f2 == 0 || t1(f1 + 1) >= t2(f2))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings<T> {
    pub grid_step: T,
    pub max_iters: usize,
    /// Grid bounds; when absent the grid spans from `t* − T_ff − 2·N·h` to
    /// `t* − T_ff + N·h`.
    pub grid: Option<(T, T)>,
    /// Starting departures; everyone at `t* − T_ff` when absent.
    pub initial: Option<Vec<T>>,
}

impl<T: Scalar> OracleSettings<T> {
    pub fn new(grid_step: T, max_iters: usize) -> Self {
        Self { grid_step, max_iters, grid: None, initial: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport<T> {
    pub departures: Vec<T>,
    pub outcomes: Vec<TravelOutcome<T>>,
    /// Completed sweeps over all agents.
    pub iterations: usize,
    pub converged: bool,
    pub moves_in_last_sweep: usize,
    pub mean_cost: T,
    pub cost_spread: T,
    /// Largest gain any agent could still get by moving to another grid point.
    pub max_regret: T,
    pub arrival_span: (T, T),
}

/// Sorted view of everyone but one agent, used to price a candidate departure
/// for that agent. Its exit depends only on the travellers ahead of it.
struct OthersQueue<T> {
    keys: Vec<(T, usize)>,
    exits: Vec<T>,
}

impl<T: Scalar> OthersQueue<T> {
    fn new(departures: &[T], skip: usize, corridor: &BottleneckModel<T>) -> Self {
        let mut keys: Vec<(T, usize)> = departures.iter().enumerate().filter(|&(j, _)| j != skip).map(|(j, &d)| (d, j)).collect();
        keys.sort_by(|a, b| cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
        let ordered: Vec<T> = keys.iter().map(|k| k.0).collect();
        let exits = crate::traffic_sim::queue_exit_times(&ordered, corridor);
        Self { keys, exits }
    }

    fn exit_for(&self, agent: usize, departure: T, corridor: &BottleneckModel<T>) -> T {
        let ahead = self.keys.partition_point(|&(d, j)| d < departure || (d == departure && j < agent));
        let free = departure + corridor.free_flow_min;
        if ahead == 0 {
            free
        } else {
            free.max(self.exits[ahead - 1] + corridor.headway_min)
        }
    }
}

fn grid_points<T: Scalar>(start: T, end: T, step: T) -> Vec<T> {
    let count = ((end - start) / step).round().to_usize().unwrap_or(0);
    (0..=count).map(|k| start + step * T::from_count(k)).collect()
}

fn profile_outcomes<T: Scalar>(departures: &[T], corridor: &BottleneckModel<T>, schedule: &ScheduleModel<T>) -> Vec<TravelOutcome<T>> {
    let decisions: Vec<TravelDecision<T>> = departures
        .iter()
        .enumerate()
        .map(|(i, &d)| TravelDecision { agent_id: i as u32 + 1, day: 1, choice: Choice::Departure(d) })
        .collect();
    simulate_bottleneck_day(&decisions, corridor, schedule).expect("well-formed profile")
}

/// Round-robin best response over a departure grid. Agents are visited in
/// ascending id; an agent moves only on a strict improvement and then takes
/// the earliest grid point among its cost minimisers.
pub fn bottleneck_best_response_oracle<T: Scalar>(
    n: usize,
    corridor: &BottleneckModel<T>,
    schedule: &ScheduleModel<T>,
    settings: &OracleSettings<T>,
) -> Result<OracleReport<T>, EquilibriumError> {
    if !(settings.grid_step > T::zero()) {
        return Err(EquilibriumError::InvalidInput("grid step must be positive".into()));
    }
    if n < 1 {
        return Err(EquilibriumError::InvalidInput("at least one commuter required".into()));
    }
    let base = schedule.preferred_arrival - corridor.free_flow_min;
    let rush = T::from_count(n) * corridor.headway_min;
    let (start, end) = settings.grid.unwrap_or((base - rush - rush, base + rush));
    if !(end >= start) {
        return Err(EquilibriumError::InvalidInput("grid end precedes start".into()));
    }
    let grid = grid_points(start, end, settings.grid_step);
    let mut departures = match &settings.initial {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => return Err(EquilibriumError::InvalidInput(format!("initial profile has {} entries, expected {n}", v.len()))),
        None => vec![base; n],
    };
    let tolerance = T::lit(1e-9);
    let cost_at = |queue: &OthersQueue<T>, agent: usize, x: T| {
        let exit = queue.exit_for(agent, x, corridor);
        schedule.cost(exit - x, exit)
    };

    let mut iterations = 0;
    let mut moves = 0;
    let mut converged = false;
    while iterations < settings.max_iters {
        moves = 0;
        for agent in 0..n {
            let queue = OthersQueue::new(&departures, agent, corridor);
            let current = cost_at(&queue, agent, departures[agent]);
            let mut best = (current, departures[agent]);
            for &x in &grid {
                let c = cost_at(&queue, agent, x);
                if c < best.0 - tolerance {
                    best = (c, x);
                }
            }
            if best.1 != departures[agent] {
                departures[agent] = best.1;
                moves += 1;
            }
        }
        iterations += 1;
        if moves == 0 {
            converged = true;
            break;
        }
    }

    let outcomes = profile_outcomes(&departures, corridor, schedule);
    let mut max_regret = T::zero();
    for (agent, o) in outcomes.iter().enumerate() {
        let queue = OthersQueue::new(&departures, agent, corridor);
        let best = grid.iter().map(|&x| cost_at(&queue, agent, x)).fold(T::infinity(), T::min);
        max_regret = max_regret.max(o.cost - best);
    }
    let costs = outcomes.iter().map(|o| o.cost);
    let (lo, hi) = costs.clone().fold((T::infinity(), T::neg_infinity()), |(a, b), c| (a.min(c), b.max(c)));
    let mean = costs.fold(T::zero(), |a, c| a + c) / T::from_count(n);
    let span = outcomes.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), o| (a.min(o.arrival_min), b.max(o.arrival_min)));
    Ok(OracleReport {
        departures,
        outcomes,
        iterations,
        converged,
        moves_in_last_sweep: moves,
        mean_cost: mean,
        cost_spread: hi - lo,
        max_regret,
        arrival_span: span,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn paper_schedule(beta: f64, gamma: f64) -> ScheduleModel<f64> {
        ScheduleModel { preferred_arrival: 540.0, early_per_min: beta, invehicle_per_min: 3.0, late_per_min: gamma }
    }

    fn corridor() -> BottleneckModel<f64> {
        BottleneckModel { free_flow_min: 30.0, headway_min: 1.0 }
    }

    fn lr<T>(route_id: u32, intercept: T, slope: T) -> LinearRoute<T> {
        LinearRoute { route_id, intercept, slope }
    }

    #[test]
    fn vickrey_reference_window() {
        let b = vickrey_benchmark(40, &corridor(), &paper_schedule(1.0, 10.0)).unwrap();
        assert!((b.arrival_window_start - (540.0 - 400.0 / 11.0)).abs() < 1e-9);
        assert!((b.arrival_window_end - (540.0 + 40.0 / 11.0)).abs() < 1e-9);
        assert!((b.equilibrium_cost.unwrap() - (90.0 + 400.0 / 11.0)).abs() < 1e-9);
        assert_eq!(b.rush_length_min, 40.0);
    }

    #[test]
    fn vickrey_symmetric_and_other_ratio() {
        let b = vickrey_window(40, 60.0, 540.0, 5.0, 5.0).unwrap();
        assert_eq!((b.arrival_window_start, b.arrival_window_end), (520.0, 560.0));
        let b = vickrey_window(40, 60.0f64, 540.0, 2.0, 8.0).unwrap();
        assert!((b.arrival_window_start - 508.0).abs() < 1e-9);
        assert!((b.arrival_window_end - 548.0).abs() < 1e-9);
        assert!((2.0 * (540.0 - b.arrival_window_start) - 64.0).abs() < 1e-9);
        assert!((8.0 * (b.arrival_window_end - 540.0) - 64.0).abs() < 1e-9);
        assert_eq!(vickrey_window(40, 60.0, 540.0, 0.0, 0.0), Err(EquilibriumError::ZeroPenaltySum));
        assert!(vickrey_window(0, 60.0, 540.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn wardrop_reference_split() {
        let w = wardrop_split_linear(&[lr(1, 20.0f64, 3.0), lr(2, 40.0, 1.0)], 40).unwrap();
        assert!((w.flows[0] - 15.0).abs() < 1e-9 && (w.flows[1] - 25.0).abs() < 1e-9);
        assert!((w.common_time - 65.0).abs() < 1e-9);
        assert!(w.is_interior);
    }

    #[test]
    fn wardrop_exact_rational() {
        let q = |n: i64| Ratio::from_integer(n);
        let w = wardrop_split_linear(&[lr(1, q(10), q(2)), lr(2, q(30), q(1))], 30).unwrap();
        assert_eq!(w.flows[0], Ratio::new(50, 3));
        assert_eq!(w.common_time, Ratio::new(130, 3));
        let w = wardrop_split_linear(&[lr(1, q(20), q(3)), lr(2, q(40), q(1))], 40).unwrap();
        assert_eq!(w.flows, vec![q(15), q(25)]);
        assert_eq!(w.common_time, q(65));
    }

    #[test]
    fn wardrop_corner_and_symmetry() {
        let w = wardrop_split_linear(&[lr(1, 10.0, 1.0), lr(2, 100.0, 1.0)], 20).unwrap();
        assert_eq!(w.flows, vec![20.0, 0.0]);
        assert_eq!(w.common_time, 30.0);
        assert!(!w.is_interior);
        let w = wardrop_split_linear(&[lr(1, 7.0, 2.0), lr(2, 7.0, 2.0)], 10).unwrap();
        assert_eq!(w.flows, vec![5.0, 5.0]);
    }

    #[test]
    fn wardrop_flat_routes() {
        let w = wardrop_split_linear(&[lr(1, 5.0, 0.0), lr(2, 5.0, 0.0)], 10).unwrap();
        assert_eq!(w.flows, vec![5.0, 5.0]);
        assert!(w.note.is_some());
        let w = wardrop_split_linear(&[lr(1, 10.0, 1.0), lr(2, 15.0, 0.0)], 20).unwrap();
        assert_eq!(w.flows, vec![5.0, 15.0]);
        assert_eq!(w.common_time, 15.0);
        assert!(wardrop_split_linear(&[lr(1, 1.0, 1.0)], 3).is_err());
    }

    #[test]
    fn closed_form_agrees() {
        let (r1, r2) = (lr(1, 10.0f64, 2.0), lr(2, 30.0, 1.0));
        let (f1, _) = two_route_closed_form(&r1, &r2, 30).unwrap();
        assert!((f1 - 50.0 / 3.0).abs() < 1e-12);
        assert_eq!(two_route_closed_form(&lr(1, 10.0, 1.0), &lr(2, 100.0, 1.0), 20), Some((20.0, 0.0)));
    }

    #[test]
    fn integer_equilibria() {
        let s = integer_equilibrium_bruteforce(&lr(1, 20.0, 3.0), &lr(2, 40.0, 1.0), 40).unwrap();
        assert!(s.contains(&(15, 25)));
        assert_eq!(integer_equilibrium_bruteforce(&lr(1, 5.0, 1.0), &lr(2, 5.0, 1.0), 2).unwrap(), vec![(1, 1)]);
        assert_eq!(integer_equilibrium_bruteforce(&lr(1, 10.0, 1.0), &lr(2, 100.0, 1.0), 20).unwrap(), vec![(20, 0)]);
    }

    #[test]
    fn oracle_single_agent() {
        let r = bottleneck_best_response_oracle(1, &corridor(), &paper_schedule(1.0, 10.0), &OracleSettings::new(0.5, 50)).unwrap();
        assert!(r.converged);
        assert_eq!(r.departures, vec![510.0]);
        assert_eq!(r.outcomes[0].cost, 90.0);
    }

    #[test]
    fn oracle_pricing_matches_simulator() {
        let c = corridor();
        let m = paper_schedule(1.0, 10.0);
        let deps = [500.0, 505.5, 505.5, 507.0, 502.0, 505.5];
        for agent in 0..deps.len() {
            let q = OthersQueue::new(&deps, agent, &c);
            for x in [495.0, 502.0, 505.5, 506.0, 520.0] {
                let mut moved = deps.to_vec();
                moved[agent] = x;
                let sim = profile_outcomes(&moved, &c, &m);
                let exit = q.exit_for(agent, x, &c);
                assert_eq!(exit, sim[agent].arrival_min, "agent {agent} at {x}");
            }
        }
    }
}
