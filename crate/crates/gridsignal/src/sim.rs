//! Deterministic, seeded, 1 s-step microscopic vehicle simulation:
//! Poisson spawning per OD pair, shortest-path routing with uniform
//! tie-breaking, a collision-free car-following update, signal-obeying
//! stop behaviour, intersection transfer, and teardown on arrival.
//!
//! Two independent RNG streams flow through a state: `spawn` (Poisson
//! draws only, in row-major OD order over positive rates) and `route`
//! (shortest-path tie-breaking). This keeps spawn counts reproducible by
//! a standalone generator regardless of routing, and makes rollouts
//! bitwise-repeatable for a fixed action sequence.

use crate::demand::ODMatrix;
use crate::grid::{
    GridError, Movement, MovementClass, Network, SignalState, NUM_INTERSECTIONS,
    NUM_OUTER_EDGES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("origin and destination outer edges are both {0}")]
    SameOriginDest(usize),
    #[error("no route between outer edges {origin} and {dest}")]
    Unroutable { origin: usize, dest: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Car-following and insertion constants.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Free-flow speed cap, m/s.
    pub v_max: f64,
    /// Per-second acceleration, m/s^2.
    pub a_max: f64,
    /// Vehicle body length, m.
    pub vehicle_length: f64,
    /// Minimum standstill gap to the obstacle ahead, m.
    pub min_gap: f64,
    /// Speed below which a vehicle counts as queued, m/s.
    pub queue_speed_threshold: f64,
    /// Per-origin backlog bound; overflow drops the vehicle.
    pub backlog_cap: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            v_max: 13.9,
            a_max: 2.5,
            vehicle_length: 5.0,
            min_gap: 2.0,
            queue_speed_threshold: 0.1,
            backlog_cap: 200,
        }
    }
}

/// One vehicle, positioned by its front bumper along its current edge.
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub route: Vec<usize>,
    pub route_index: usize,
    pub lane: usize,
    pub pos: f64,
    pub speed: f64,
    pub spawn_time: u64,
    pub od: (usize, usize),
    /// Seconds spent below the queue threshold (in network or backlogged).
    pub queued_seconds: u64,
}

impl Vehicle {
    pub fn current_edge(&self) -> usize {
        self.route[self.route_index]
    }

    fn on_last_edge(&self) -> bool {
        self.route_index + 1 == self.route.len()
    }
}

/// Vehicle removed from the network after finishing its route.
#[derive(Debug, Clone, Copy)]
pub struct ArrivalRecord {
    pub id: u64,
    pub od: (usize, usize),
    pub spawn_time: u64,
    pub arrival_time: u64,
    pub queued_seconds: u64,
}

/// Stop-line crossing observed during the last step, for safety auditing.
#[derive(Debug, Clone, Copy)]
pub struct CrossingRecord {
    pub intersection: usize,
    pub movement: Movement,
}

/// Shortest-path DP table from one origin in-edge: BFS distance over the
/// directed edge graph plus the number of minimum-edge-count paths, which
/// backward sampling uses to draw uniformly among all shortest paths.
#[derive(Debug, Clone)]
struct RouteTable {
    dist: Vec<u32>,
    count: Vec<u64>,
}

fn build_route_table(network: &Network, origin_edge: usize) -> RouteTable {
    let n = network.edges.len();
    let mut dist = vec![u32::MAX; n];
    let mut count = vec![0u64; n];
    dist[origin_edge] = 0;
    count[origin_edge] = 1;
    let mut frontier = vec![origin_edge];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &e in &frontier {
            for s in network.successors(e) {
                if dist[s] == u32::MAX {
                    dist[s] = dist[e] + 1;
                    next.push(s);
                }
                if dist[s] == dist[e] + 1 {
                    count[s] += count[e];
                }
            }
        }
        frontier = next;
    }
    RouteTable { dist, count }
}

/// Full microscopic network state.
#[derive(Debug, Clone)]
pub struct SimState {
    pub network: Arc<Network>,
    pub params: SimParams,
    pub clock: u64,
    pub signals: [SignalState; NUM_INTERSECTIONS],
    vehicles: HashMap<u64, Vehicle>,
    /// lanes[edge][lane]: vehicle ids ordered by decreasing pos (front first).
    lanes: Vec<[VecDeque<u64>; 4]>,
    backlog: [VecDeque<Vehicle>; NUM_OUTER_EDGES],
    route_tables: Vec<RouteTable>,
    /// predecessors[edge]: edges whose end node is this edge's start node.
    predecessors: Vec<Vec<usize>>,
    spawn_rng: ChaCha8Rng,
    route_rng: ChaCha8Rng,
    next_vehicle_id: u64,
    /// Vehicles emitted by the arrival process (accepted or dropped).
    pub spawned_total: u64,
    pub arrived_total: u64,
    /// Emissions rejected because the origin backlog was at capacity.
    pub dropped_total: u64,
    arrivals_last_step: Vec<ArrivalRecord>,
    crossings_last_step: Vec<CrossingRecord>,
}

/// SplitMix64 step, used to derive independent sub-seeds from a master seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SimState {
    pub fn new(network: Arc<Network>, params: SimParams, seed: u64) -> SimState {
        let route_tables = network
            .outer_edges
            .iter()
            .map(|o| build_route_table(&network, o.in_edge))
            .collect();
        let mut predecessors = vec![Vec::new(); network.edges.len()];
        for e in 0..network.edges.len() {
            for s in network.successors(e) {
                predecessors[s].push(e);
            }
        }
        let lanes = (0..network.edges.len())
            .map(|_| std::array::from_fn(|_| VecDeque::new()))
            .collect();
        SimState {
            network,
            params,
            clock: 0,
            signals: std::array::from_fn(|_| SignalState::new(0)),
            vehicles: HashMap::new(),
            lanes,
            backlog: std::array::from_fn(|_| VecDeque::new()),
            route_tables,
            predecessors,
            spawn_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            route_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)),
            next_vehicle_id: 0,
            spawned_total: 0,
            arrived_total: 0,
            dropped_total: 0,
            arrivals_last_step: Vec::new(),
            crossings_last_step: Vec::new(),
        }
    }

    pub fn vehicle(&self, id: u64) -> &Vehicle {
        &self.vehicles[&id]
    }

    pub fn num_in_network(&self) -> usize {
        self.vehicles.len()
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.iter().map(|q| q.len()).sum()
    }

    /// Vehicle ids on one lane, front (largest pos) first.
    pub fn lane_ids(&self, edge: usize, lane: usize) -> &VecDeque<u64> {
        &self.lanes[edge][lane]
    }

    pub fn arrivals_last_step(&self) -> &[ArrivalRecord] {
        &self.arrivals_last_step
    }

    pub fn crossings_last_step(&self) -> &[CrossingRecord] {
        &self.crossings_last_step
    }

    /// Iterate vehicles on one edge across all lanes (unordered between lanes).
    pub fn edge_vehicles(&self, edge: usize) -> impl Iterator<Item = &Vehicle> {
        self.lanes[edge]
            .iter()
            .flat_map(move |lane| lane.iter().map(move |id| &self.vehicles[id]))
    }

    /// Sample a minimum-edge-count route between two outer edges, breaking
    /// ties uniformly at random among all shortest paths.
    pub fn route_shortest(&mut self, origin: usize, dest: usize) -> Result<Vec<usize>, SimError> {
        if origin == dest {
            return Err(SimError::SameOriginDest(origin));
        }
        let origin_edge = self.network.outer_edges[origin].in_edge;
        let dest_edge = self.network.outer_edges[dest].out_edge;
        let table = &self.route_tables[origin];
        if table.dist[dest_edge] == u32::MAX {
            return Err(SimError::Unroutable { origin, dest });
        }
        let mut path = vec![dest_edge];
        let mut cur = dest_edge;
        while cur != origin_edge {
            let want = table.dist[cur] - 1;
            let options: Vec<usize> = self.predecessors[cur]
                .iter()
                .copied()
                .filter(|&p| table.dist[p] == want && table.count[p] > 0)
                .collect();
            let total: u64 = options.iter().map(|&p| table.count[p]).sum();
            let mut draw = self.route_rng.random_range(0..total);
            cur = *options
                .iter()
                .find(|&&p| {
                    if draw < table.count[p] {
                        true
                    } else {
                        draw -= table.count[p];
                        false
                    }
                })
                .expect("cumulative weights cover the draw");
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// Number of shortest paths between two outer edges (testing aid).
    pub fn shortest_path_count(&self, origin: usize, dest: usize) -> u64 {
        self.route_tables[origin].count[self.network.outer_edges[dest].out_edge]
    }

    /// Edge count of a shortest route between two outer edges.
    pub fn shortest_edge_count(&self, origin: usize, dest: usize) -> u32 {
        self.route_tables[origin].dist[self.network.outer_edges[dest].out_edge] + 1
    }

    /// Total queued seconds accumulated by vehicles still present
    /// (in-network plus backlogged).
    pub fn live_queued_seconds(&self) -> u64 {
        let mut total = 0u64;
        for edge in 0..self.network.edges.len() {
            for lane in &self.lanes[edge] {
                for id in lane {
                    total += self.vehicles[id].queued_seconds;
                }
            }
        }
        total + self.backlog.iter().flatten().map(|v| v.queued_seconds).sum::<u64>()
    }

    /// Movement class the vehicle will need at the end of `edge`, or `None`
    /// when `edge` is its final route edge (any lane is fine).
    fn turn_class_on(&self, route: &[usize], idx: usize) -> Option<MovementClass> {
        route.get(idx + 1).map(|&next| {
            self.network
                .movement_between(route[idx], next)
                .class
        })
    }

    fn lane_tail_pos(&self, edge: usize, lane: usize) -> Option<f64> {
        self.lanes[edge][lane]
            .back()
            .map(|id| self.vehicles[&id].pos)
    }

    /// Least-occupied lane on `edge` compatible with `class` (all four lanes
    /// when `class` is `None`); ties resolve to the lowest index.
    fn choose_lane(&self, edge: usize, class: Option<MovementClass>) -> usize {
        let candidates: Vec<usize> = match class {
            Some(c) => c.lanes().to_vec(),
            None => (0..self.network.edges[edge].lanes).collect(),
        };
        *candidates
            .iter()
            .min_by_key(|&&l| self.lanes[edge][l].len())
            .expect("at least one candidate lane")
    }

    /// Insert a vehicle at the entry of its origin edge if some compatible
    /// lane has headway; returns false when it must stay backlogged.
    fn try_insert(&mut self, vehicle: &Vehicle) -> bool {
        let edge = vehicle.route[0];
        let class = self.turn_class_on(&vehicle.route, 0);
        let candidates: Vec<usize> = match class {
            Some(c) => c.lanes().to_vec(),
            None => (0..4).collect(),
        };
        let headway = self.params.vehicle_length + self.params.min_gap;
        let mut best: Option<(usize, usize)> = None; // (occupancy, lane)
        for &l in &candidates {
            let free = match self.lane_tail_pos(edge, l) {
                Some(tail) => tail >= headway,
                None => true,
            };
            if free {
                let occ = self.lanes[edge][l].len();
                if best.map_or(true, |(bocc, _)| occ < bocc) {
                    best = Some((occ, l));
                }
            }
        }
        match best {
            Some((_, lane)) => {
                let mut v = vehicle.clone();
                v.lane = lane;
                v.pos = 0.0;
                v.speed = 0.0;
                self.lanes[edge][lane].push_back(v.id);
                self.vehicles.insert(v.id, v);
                true
            }
            None => false,
        }
    }

    /// Draw this second's arrivals for every OD pair and insert or backlog
    /// them. Poisson draws consume the spawn stream in row-major OD order,
    /// skipping zero-rate pairs.
    pub fn spawn(&mut self, od: &ODMatrix) -> Result<(), SimError> {
        for origin in 0..NUM_OUTER_EDGES {
            for dest in 0..NUM_OUTER_EDGES {
                let rate = od.rate(origin, dest);
                if rate <= 0.0 {
                    continue;
                }
                let lambda = rate / 3600.0;
                let n = Poisson::new(lambda)
                    .expect("positive rate")
                    .sample(&mut self.spawn_rng) as u64;
                for _ in 0..n {
                    self.spawned_total += 1;
                    if self.backlog[origin].len() >= self.params.backlog_cap {
                        self.dropped_total += 1;
                        // Still consume a route draw? No: dropped vehicles
                        // never route, keeping the route stream in lockstep
                        // with accepted vehicles only.
                        continue;
                    }
                    let route = self.route_shortest(origin, dest)?;
                    let vehicle = Vehicle {
                        id: self.next_vehicle_id,
                        route,
                        route_index: 0,
                        lane: 0,
                        pos: 0.0,
                        speed: 0.0,
                        spawn_time: self.clock,
                        od: (origin, dest),
                        queued_seconds: 0,
                    };
                    self.next_vehicle_id += 1;
                    self.backlog[origin].push_back(vehicle);
                }
            }
        }
        // Drain backlogs head-first while insertion succeeds.
        for origin in 0..NUM_OUTER_EDGES {
            while let Some(front) = self.backlog[origin].front() {
                let candidate = front.clone();
                if self.try_insert(&candidate) {
                    self.backlog[origin].pop_front();
                } else {
                    break;
                }
            }
        }
        Ok(())
    }

    /// Advance the simulation by one second: apply the joint signal action,
    /// spawn, then move every vehicle with the discrete car-following rule
    /// (accelerate toward v_max, brake for the leader gap or the stop line
    /// when the movement lacks effective green), transferring across stop
    /// lines when the receiving lane has space and removing vehicles that
    /// finish their route.
    pub fn step(
        &mut self,
        actions: &[usize; NUM_INTERSECTIONS],
        od: &ODMatrix,
    ) -> Result<(), SimError> {
        self.clock += 1;
        for (signal, &action) in self.signals.iter_mut().zip(actions.iter()) {
            signal.request_phase(action)?;
            signal.tick();
        }
        self.spawn(od)?;
        self.move_vehicles();
        self.accumulate_queued_seconds();
        Ok(())
    }

    fn move_vehicles(&mut self) {
        self.arrivals_last_step.clear();
        self.crossings_last_step.clear();
        let n_edges = self.network.edges.len();
        // Snapshot lane membership before any movement so each vehicle is
        // processed exactly once even when it changes edges mid-step.
        let snapshot: Vec<Vec<u64>> = (0..n_edges)
            .flat_map(|e| (0..4).map(move |l| (e, l)))
            .map(|(e, l)| self.lanes[e][l].iter().copied().collect())
            .collect();
        for edge in 0..n_edges {
            let length = self.network.edges[edge].length;
            let end_intersection = self.network.edge_end_intersection(edge);
            for lane in 0..4 {
                let ids = &snapshot[edge * 4 + lane];
                let mut kept = 0usize;
                for &id in ids {
                    debug_assert_eq!(self.lanes[edge][lane][kept], id);
                    let vehicle = &self.vehicles[&id];
                    let pos = vehicle.pos;
                    let speed = vehicle.speed;
                    let last_edge = vehicle.on_last_edge();
                    // (movement, next_edge, chosen receiving lane) when the
                    // vehicle is the effective lane leader facing a signal.
                    let mut transfer_target: Option<(Movement, usize, usize)> = None;
                    let gap = if kept > 0 {
                        let leader = &self.vehicles[&self.lanes[edge][lane][kept - 1]];
                        leader.pos - self.params.vehicle_length - pos
                    } else if last_edge {
                        f64::INFINITY
                    } else {
                        let intersection =
                            end_intersection.expect("non-final edges end at intersections");
                        let route = &self.vehicles[&id].route;
                        let idx = self.vehicles[&id].route_index;
                        let next_edge = route[idx + 1];
                        let movement = self.network.movement_between(edge, next_edge);
                        if self.signals[intersection].effective_green().contains(movement) {
                            let class_after = self.turn_class_on(route, idx + 1);
                            let rec_lane = self.choose_lane(next_edge, class_after);
                            let rec_space = match self.lane_tail_pos(next_edge, rec_lane) {
                                Some(tail) => tail - self.params.vehicle_length,
                                None => self.network.edges[next_edge].length,
                            };
                            transfer_target = Some((movement, next_edge, rec_lane));
                            (length - pos) + rec_space
                        } else {
                            length - pos
                        }
                    };
                    let v_safe = (gap - self.params.min_gap).max(0.0);
                    let new_speed = (speed + self.params.a_max).min(self.params.v_max).min(v_safe);
                    let new_pos = pos + new_speed;

                    if new_pos > length && last_edge {
                        // Route complete: remove and record.
                        let v = self.vehicles.remove(&id).expect("vehicle exists");
                        self.lanes[edge][lane].remove(kept);
                        self.arrived_total += 1;
                        self.arrivals_last_step.push(ArrivalRecord {
                            id,
                            od: v.od,
                            spawn_time: v.spawn_time,
                            arrival_time: self.clock,
                            queued_seconds: v.queued_seconds,
                        });
                    } else if new_pos > length {
                        let (movement, next_edge, rec_lane) =
                            transfer_target.expect("crossing implies a green transfer target");
                        let entry_pos = new_pos - length;
                        debug_assert!(entry_pos <= self.network.edges[next_edge].length);
                        self.lanes[edge][lane].remove(kept);
                        self.lanes[next_edge][rec_lane].push_back(id);
                        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                        v.route_index += 1;
                        v.lane = rec_lane;
                        v.pos = entry_pos;
                        v.speed = new_speed;
                        self.crossings_last_step.push(CrossingRecord {
                            intersection: end_intersection.expect("transfer at intersection"),
                            movement,
                        });
                    } else {
                        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
                        v.pos = new_pos;
                        v.speed = new_speed;
                        kept += 1;
                    }
                }
            }
        }
    }

    fn accumulate_queued_seconds(&mut self) {
        let threshold = self.params.queue_speed_threshold;
        let queued: Vec<u64> = self
            .vehicles
            .values()
            .filter(|v| v.speed < threshold)
            .map(|v| v.id)
            .collect();
        for id in queued {
            self.vehicles.get_mut(&id).expect("vehicle exists").queued_seconds += 1;
        }
        for q in self.backlog.iter_mut() {
            for v in q.iter_mut() {
                v.queued_seconds += 1;
            }
        }
    }

    /// Number of queued vehicles: in-network below the speed threshold plus
    /// everything still backlogged at the origins.
    pub fn queue_count(&self) -> usize {
        let in_net = self
            .vehicles
            .values()
            .filter(|v| v.speed < self.params.queue_speed_threshold)
            .count();
        in_net + self.backlog_len()
    }

    /// Arithmetic mean speed over in-network vehicles; v_max when empty.
    /// Summation walks lanes in fixed edge order so the result is bitwise
    /// reproducible across runs.
    pub fn mean_speed(&self) -> f64 {
        if self.vehicles.is_empty() {
            return self.params.v_max;
        }
        let mut total = 0.0;
        for edge in 0..self.network.edges.len() {
            for lane in &self.lanes[edge] {
                for id in lane {
                    total += self.vehicles[id].speed;
                }
            }
        }
        total / self.vehicles.len() as f64
    }

    /// Place a vehicle directly on the first edge of `route`, bypassing the
    /// arrival process. Testing and debugging aid; keeps lane ordering and
    /// the conservation ledger intact.
    #[doc(hidden)]
    pub fn place_vehicle(&mut self, route: Vec<usize>, lane: usize, pos: f64, speed: f64) -> u64 {
        let id = 1_000_000_000 + self.next_vehicle_id;
        self.next_vehicle_id += 1;
        let edge = route[0];
        let vehicle = Vehicle {
            id,
            route,
            route_index: 0,
            lane,
            pos,
            speed,
            spawn_time: self.clock,
            od: (0, 0),
            queued_seconds: 0,
        };
        let q = &mut self.lanes[edge][lane];
        let at = q
            .iter()
            .position(|other| self.vehicles[other].pos < pos)
            .unwrap_or(q.len());
        q.insert(at, id);
        self.vehicles.insert(id, vehicle);
        self.spawned_total += 1;
        id
    }

    /// Vehicle ledger: every emission is arrived, in-network, backlogged,
    /// or dropped at the backlog cap.
    pub fn check_conservation(&self) -> Result<(), String> {
        let accounted = self.arrived_total
            + self.vehicles.len() as u64
            + self.backlog_len() as u64
            + self.dropped_total;
        if accounted == self.spawned_total {
            Ok(())
        } else {
            Err(format!(
                "conservation violated: spawned {} != arrived {} + in-network {} + backlog {} + dropped {}",
                self.spawned_total,
                self.arrived_total,
                self.vehicles.len(),
                self.backlog_len(),
                self.dropped_total
            ))
        }
    }

    /// Per-lane ordering and spacing: successive front-to-front distances of
    /// at least one vehicle length.
    pub fn check_lane_spacing(&self) -> Result<(), String> {
        for edge in 0..self.network.edges.len() {
            for lane in 0..4 {
                let ids = &self.lanes[edge][lane];
                for pair in ids.iter().zip(ids.iter().skip(1)) {
                    let front = &self.vehicles[pair.0];
                    let back = &self.vehicles[pair.1];
                    if front.pos - back.pos < self.params.vehicle_length - 1e-9 {
                        return Err(format!(
                            "spacing violated on edge {edge} lane {lane}: {} at {:.3} vs {} at {:.3}",
                            front.id, front.pos, back.id, back.pos
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
