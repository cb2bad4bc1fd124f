//! Encoders and rewards bridging the simulation to learning: the 79-dim
//! per-intersection observation, local and team rewards, the 18-dim
//! window-level network summary, and the window waiting-time reward.

use crate::grid::{Dir, MovementClass, NodeKind, NUM_INTERSECTIONS};
use crate::sim::SimState;
use thiserror::Error;

/// 8 movements x 8 traffic features + 5 signal blocks x 3 features.
pub const TL_OBS_LEN: usize = 79;

/// 9 intersections x (mean speed, mean density).
pub const WCE_OBS_LEN: usize = 18;

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("queue series has length {found}, expected the window length {expected}")]
    SeriesLength { expected: usize, found: usize },
}

/// Normalization constants for the observation encoders and rewards.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ObsParams {
    /// Detection range upstream of the stop line, m.
    pub detection_range: f64,
    /// Cap for the time-since-change signal feature, s.
    pub time_since_change_cap: f64,
    /// Queue-fraction normalization, vehicles.
    pub queue_fraction_cap: f64,
    /// Queue normalization for the local reward, vehicles.
    pub queue_cap: f64,
}

impl Default for ObsParams {
    fn default() -> Self {
        ObsParams {
            detection_range: 100.0,
            time_since_change_cap: 120.0,
            queue_fraction_cap: 10.0,
            queue_cap: 40.0,
        }
    }
}

/// Local reward weights, shared across all agents.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub kappa_s: f64,
    pub kappa_q: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            kappa_s: 1.0,
            kappa_q: 1.0,
        }
    }
}

/// The 79-dim per-intersection observation.
///
/// Layout: movements in index order (N-SR, N-LT, S-SR, S-LT, E-SR, E-LT,
/// W-SR, W-LT), each contributing [class id, closest distance, closest
/// speed, 2nd distance, 2nd speed, density, mean speed, queue fraction];
/// then signal blocks for self and the N/S/E/W neighbours, each [time since
/// change, phase index, clearance flag]. Missing neighbours are zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct TlObservation {
    pub values: [f64; TL_OBS_LEN],
}

/// The 18-dim window-level summary: per intersection, mean speed and mean
/// density over the preceding window.
#[derive(Debug, Clone, PartialEq)]
pub struct WceObservation {
    pub values: [f64; WCE_OBS_LEN],
}

/// Jam capacity of one movement's detection zone, vehicles.
fn movement_jam_capacity(state: &SimState, range: f64) -> f64 {
    let headway = state.params.vehicle_length + state.params.min_gap;
    2.0 * range / headway
}

pub fn encode_tl_observation(
    state: &SimState,
    intersection: usize,
    params: &ObsParams,
) -> TlObservation {
    let mut values = [0.0; TL_OBS_LEN];
    let net = &state.network;
    let v_max = state.params.v_max;
    let range = params.detection_range;
    let jam = movement_jam_capacity(state, range);
    let threshold = state.params.queue_speed_threshold;

    let mut at = 0;
    for approach_rank in 0..4 {
        let edge = net.incoming[intersection][approach_rank];
        let length = net.edges[edge].length;
        for class in [MovementClass::SR, MovementClass::LT] {
            // Gather (distance-to-line, speed) within range over the
            // movement's two lanes; lane fronts are nearest the line.
            let mut seen: Vec<(f64, f64)> = Vec::new();
            let mut stopped = 0usize;
            let mut speed_sum = 0.0;
            for lane in class.lanes() {
                for id in state.lane_ids(edge, lane) {
                    let v = state.vehicle(*id);
                    let dist = length - v.pos;
                    if dist <= range {
                        seen.push((dist, v.speed));
                        speed_sum += v.speed;
                        if v.speed < threshold {
                            stopped += 1;
                        }
                    }
                }
            }
            seen.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (d1, v1) = seen.first().copied().unwrap_or((range, 0.0));
            let (d2, v2) = seen.get(1).copied().unwrap_or((range, 0.0));
            let density = (seen.len() as f64 / jam).min(1.0);
            let mean_speed = if seen.is_empty() {
                0.0
            } else {
                // The sum can round a hair above count * v_max.
                (speed_sum / seen.len() as f64 / v_max).min(1.0)
            };
            let queue_fraction = (stopped as f64 / params.queue_fraction_cap).min(1.0);

            values[at] = if class == MovementClass::SR { 0.0 } else { 1.0 };
            values[at + 1] = d1 / range;
            values[at + 2] = v1 / v_max;
            values[at + 3] = d2 / range;
            values[at + 4] = v2 / v_max;
            values[at + 5] = density;
            values[at + 6] = mean_speed;
            values[at + 7] = queue_fraction;
            at += 8;
        }
    }

    let (row, col) = match net.nodes[intersection].kind {
        NodeKind::Intersection { row, col } => (row, col),
        NodeKind::Terminal { .. } => unreachable!("intersections are nodes 0..9"),
    };
    let neighbour = |dir: Dir| -> Option<usize> {
        match dir {
            Dir::N => (row > 0).then(|| (row - 1) * 3 + col),
            Dir::S => (row < 2).then(|| (row + 1) * 3 + col),
            Dir::E => (col < 2).then(|| row * 3 + col + 1),
            Dir::W => (col > 0).then(|| row * 3 + col - 1),
        }
    };
    let blocks = [
        Some(intersection),
        neighbour(Dir::N),
        neighbour(Dir::S),
        neighbour(Dir::E),
        neighbour(Dir::W),
    ];
    for block in blocks {
        match block {
            Some(i) => {
                let s = &state.signals[i];
                values[at] =
                    (s.time_since_change as f64).min(params.time_since_change_cap)
                        / params.time_since_change_cap;
                values[at + 1] = s.current_phase as f64 / 7.0;
                values[at + 2] = if s.in_clearance() { 1.0 } else { 0.0 };
            }
            None => {
                values[at] = 0.0;
                values[at + 1] = 0.0;
                values[at + 2] = 0.0;
            }
        }
        at += 3;
    }
    debug_assert_eq!(at, TL_OBS_LEN);
    TlObservation { values }
}

/// Normalized mean speed and queue over the intersection's incoming edges.
fn incoming_stats(state: &SimState, intersection: usize, queue_cap: f64) -> (f64, f64) {
    let mut count = 0usize;
    let mut speed_sum = 0.0;
    let mut stopped = 0usize;
    for approach_rank in 0..4 {
        let edge = state.network.incoming[intersection][approach_rank];
        for v in state.edge_vehicles(edge) {
            count += 1;
            speed_sum += v.speed;
            if v.speed < state.params.queue_speed_threshold {
                stopped += 1;
            }
        }
    }
    let s = if count == 0 {
        1.0
    } else {
        speed_sum / count as f64 / state.params.v_max
    };
    let q = (stopped as f64 / queue_cap).min(1.0);
    (s, q)
}

/// r_i = kappa_s * s_i - kappa_q * q_i over the intersection's incoming
/// edges, with s_i = 1 when no vehicles are present.
pub fn local_reward(
    state: &SimState,
    intersection: usize,
    weights: &RewardWeights,
    params: &ObsParams,
) -> f64 {
    let (s, q) = incoming_stats(state, intersection, params.queue_cap);
    weights.kappa_s * s - weights.kappa_q * q
}

/// Sum of local rewards over the nine intersections.
pub fn team_reward(state: &SimState, weights: &RewardWeights, params: &ObsParams) -> f64 {
    (0..NUM_INTERSECTIONS)
        .map(|i| local_reward(state, i, weights, params))
        .sum()
}

/// Accumulates per-second network statistics over one window: per
/// intersection the normalized mean speed and density on incoming edges,
/// plus the queue count series that defines the window waiting time.
#[derive(Debug, Clone, Default)]
pub struct WindowStats {
    seconds: usize,
    speed_sums: [f64; NUM_INTERSECTIONS],
    density_sums: [f64; NUM_INTERSECTIONS],
    queue_sum: f64,
}

impl WindowStats {
    pub fn new() -> WindowStats {
        WindowStats::default()
    }

    pub fn reset(&mut self) {
        *self = WindowStats::default();
    }

    pub fn seconds(&self) -> usize {
        self.seconds
    }

    /// Per-intersection (normalized mean speed, normalized density) right now.
    pub fn snapshot(state: &SimState) -> [(f64, f64); NUM_INTERSECTIONS] {
        let headway = state.params.vehicle_length + state.params.min_gap;
        std::array::from_fn(|i| {
            let mut count = 0usize;
            let mut speed_sum = 0.0;
            let mut jam = 0.0;
            for approach_rank in 0..4 {
                let edge = state.network.incoming[i][approach_rank];
                jam += state.network.edges[edge].lanes as f64
                    * state.network.edges[edge].length
                    / headway;
                for v in state.edge_vehicles(edge) {
                    count += 1;
                    speed_sum += v.speed;
                }
            }
            let speed = if count == 0 {
                1.0
            } else {
                (speed_sum / count as f64 / state.params.v_max).min(1.0)
            };
            let density = (count as f64 / jam).min(1.0);
            (speed, density)
        })
    }

    /// Record one second of simulation.
    pub fn record(&mut self, state: &SimState) {
        self.record_snapshot(&WindowStats::snapshot(state), state.queue_count() as f64);
    }

    /// Record one second from a precomputed snapshot.
    pub fn record_snapshot(
        &mut self,
        snapshot: &[(f64, f64); NUM_INTERSECTIONS],
        queue_count: f64,
    ) {
        self.seconds += 1;
        for (i, &(speed, density)) in snapshot.iter().enumerate() {
            self.speed_sums[i] += speed;
            self.density_sums[i] += density;
        }
        self.queue_sum += queue_count;
    }

    /// Total vehicle-seconds spent queued within the window.
    pub fn waiting_time(&self) -> f64 {
        self.queue_sum
    }
}

/// Encode the 18-dim window summary: per intersection the window-mean
/// normalized speed and density, in intersection index order. An empty
/// window encodes as the empty-network convention (speed 1, density 0).
pub fn encode_wce_observation(stats: &WindowStats) -> WceObservation {
    let mut values = [0.0; WCE_OBS_LEN];
    for i in 0..NUM_INTERSECTIONS {
        let (speed, density) = if stats.seconds == 0 {
            (1.0, 0.0)
        } else {
            (
                stats.speed_sums[i] / stats.seconds as f64,
                stats.density_sums[i] / stats.seconds as f64,
            )
        };
        values[2 * i] = speed;
        values[2 * i + 1] = density;
    }
    WceObservation { values }
}

/// Total waiting time implied by a per-second queue-count series covering
/// exactly one window.
pub fn window_waiting_time(queue_series: &[f64], t_win: usize) -> Result<f64, ObsError> {
    if queue_series.len() != t_win {
        return Err(ObsError::SeriesLength {
            expected: t_win,
            found: queue_series.len(),
        });
    }
    Ok(queue_series.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec};
    use crate::sim::{SimParams, SimState};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn new_state(seed: u64) -> SimState {
        let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
        SimState::new(net, SimParams::default(), seed)
    }

    #[test]
    fn empty_network_observation_defaults() {
        let state = new_state(0);
        let obs = encode_tl_observation(&state, 4, &ObsParams::default());
        assert_eq!(obs.values.len(), 79);
        for m in 0..8 {
            let f = &obs.values[m * 8..m * 8 + 8];
            let class_id = if m % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(f, &[class_id, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        // Fresh signals: phase 0, no clearance, zero time since change.
        for b in 0..5 {
            let f = &obs.values[64 + b * 3..64 + b * 3 + 3];
            assert_eq!(f, &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn corner_intersection_zero_fills_missing_neighbours() {
        let mut state = new_state(0);
        for s in state.signals.iter_mut() {
            s.current_phase = 7;
            s.time_since_change = 60;
        }
        // Intersection 0 (n00) has no N or W neighbour: blocks 1 and 4.
        let obs = encode_tl_observation(&state, 0, &ObsParams::default());
        let block = |b: usize| &obs.values[64 + b * 3..64 + b * 3 + 3];
        assert_eq!(block(0), &[0.5, 1.0, 0.0]); // self: 60/120, 7/7
        assert_eq!(block(1), &[0.0, 0.0, 0.0]); // N missing
        assert_eq!(block(2), &[0.5, 1.0, 0.0]); // S = n10
        assert_eq!(block(3), &[0.5, 1.0, 0.0]); // E = n01
        assert_eq!(block(4), &[0.0, 0.0, 0.0]); // W missing
    }

    #[test]
    fn stopped_vehicle_at_stop_line_shows_in_movement_features() {
        let mut state = new_state(0);
        // N1 -> S1 route: first edge arrives at intersection 1 from the north.
        let route = state.route_shortest(1, 7).unwrap();
        state.place_vehicle(route, 0, 100.0, 0.0);
        let obs = encode_tl_observation(&state, 1, &ObsParams::default());
        // Movement 0 is N-SR.
        let f = &obs.values[0..8];
        assert_eq!(f[0], 0.0);
        assert_relative_eq!(f[1], 0.0); // closest distance ~ 0
        assert_relative_eq!(f[2], 0.0); // closest speed 0
        assert_relative_eq!(f[3], 1.0); // no second vehicle
        assert_relative_eq!(f[7], 0.1); // 1 stopped / 10
        assert!(f[5] > 0.0);
    }

    #[test]
    fn observation_entries_stay_in_unit_interval_on_rollouts() {
        let od = crate::demand::make_even_demand().normalize_total(8000.0).unwrap();
        let mut state = new_state(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ObsParams::default();
        for _ in 0..400 {
            let action = std::array::from_fn(|_| rng.random_range(0..8));
            state.step(&action, &od).unwrap();
            for i in 0..NUM_INTERSECTIONS {
                let obs = encode_tl_observation(&state, i, &params);
                for (k, v) in obs.values.iter().enumerate() {
                    assert!(
                        (0.0..=1.0).contains(v),
                        "feature {k} = {v} outside [0,1]"
                    );
                }
            }
        }
    }

    #[test]
    fn local_reward_empty_network_is_kappa_s() {
        let state = new_state(0);
        let weights = RewardWeights::default();
        let params = ObsParams::default();
        assert_relative_eq!(local_reward(&state, 0, &weights, &params), 1.0);
        assert_relative_eq!(team_reward(&state, &weights, &params), 9.0);
    }

    #[test]
    fn local_reward_saturated_queue_is_minus_kappa_q() {
        let mut state = new_state(0);
        // 40 stopped vehicles distributed over the four lanes of the
        // northern approach to intersection 1.
        let route = state.route_shortest(1, 7).unwrap();
        for lane in 0..4 {
            for k in 0..10 {
                state.place_vehicle(route.clone(), lane, 100.0 - 7.0 * k as f64, 0.0);
            }
        }
        let weights = RewardWeights::default();
        let params = ObsParams::default();
        assert_relative_eq!(local_reward(&state, 1, &weights, &params), -1.0);
    }

    #[test]
    fn local_reward_mixed_example() {
        let mut state = new_state(0);
        let route = state.route_shortest(1, 7).unwrap();
        // 10 stopped on lanes 0-1, 10 at v_max on lanes 2-3: s = 0.5, q = 0.25.
        for k in 0..10 {
            state.place_vehicle(route.clone(), k % 2, 100.0 - 7.0 * (k / 2) as f64, 0.0);
        }
        for k in 0..10 {
            state.place_vehicle(route.clone(), 2 + k % 2, 100.0 - 7.0 * (k / 2) as f64, 13.9);
        }
        let weights = RewardWeights {
            kappa_s: 1.0,
            kappa_q: 2.0,
        };
        let params = ObsParams::default();
        assert_relative_eq!(local_reward(&state, 1, &weights, &params), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn local_reward_stays_in_bounds_on_rollouts() {
        let od = crate::demand::make_even_demand().normalize_total(9000.0).unwrap();
        let mut state = new_state(21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = RewardWeights {
            kappa_s: 1.3,
            kappa_q: 0.7,
        };
        let params = ObsParams::default();
        for _ in 0..300 {
            let action = std::array::from_fn(|_| rng.random_range(0..8));
            state.step(&action, &od).unwrap();
            for i in 0..NUM_INTERSECTIONS {
                let r = local_reward(&state, i, &weights, &params);
                assert!(r <= weights.kappa_s + 1e-12);
                assert!(r >= -weights.kappa_q - 1e-12);
            }
        }
    }

    #[test]
    fn empty_window_encodes_convention() {
        let stats = WindowStats::new();
        let obs = encode_wce_observation(&stats);
        assert_eq!(obs.values.len(), 18);
        for i in 0..9 {
            assert_eq!(obs.values[2 * i], 1.0);
            assert_eq!(obs.values[2 * i + 1], 0.0);
        }
    }

    #[test]
    fn jammed_window_encodes_saturation() {
        let mut stats = WindowStats::new();
        for _ in 0..600 {
            stats.record_snapshot(&[(0.0, 1.0); 9], 500.0);
        }
        let obs = encode_wce_observation(&stats);
        for i in 0..9 {
            assert_eq!(obs.values[2 * i], 0.0);
            assert_eq!(obs.values[2 * i + 1], 1.0);
        }
        assert_relative_eq!(stats.waiting_time(), 600.0 * 500.0);
    }

    #[test]
    fn snapshot_reflects_incoming_vehicles() {
        let mut state = new_state(0);
        let route = state.route_shortest(1, 7).unwrap();
        state.place_vehicle(route, 0, 50.0, 13.9);
        let snap = WindowStats::snapshot(&state);
        // Intersection 1 sees one vehicle at full speed.
        assert_relative_eq!(snap[1].0, 1.0);
        assert!(snap[1].1 > 0.0);
        // Empty intersections use the empty conventions.
        assert_relative_eq!(snap[4].0, 1.0);
        assert_relative_eq!(snap[4].1, 0.0);
    }

    #[test]
    fn wce_entries_stay_in_unit_interval_on_rollouts() {
        let od = crate::demand::make_even_demand().normalize_total(9000.0).unwrap();
        let mut state = new_state(31);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stats = WindowStats::new();
        for _ in 0..300 {
            let action = std::array::from_fn(|_| rng.random_range(0..8));
            state.step(&action, &od).unwrap();
            stats.record(&state);
        }
        let obs = encode_wce_observation(&stats);
        for v in obs.values.iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn window_waiting_time_examples() {
        assert_eq!(window_waiting_time(&[0.0; 600], 600).unwrap(), 0.0);
        assert_eq!(window_waiting_time(&[1.0; 600], 600).unwrap(), 600.0);
        let mut series = vec![0.0; 600];
        series[0] = 2.0;
        series[1] = 2.0;
        series[2] = 1.0;
        assert_eq!(window_waiting_time(&series, 600).unwrap(), 5.0);
        assert_eq!(
            window_waiting_time(&[1.0; 10], 600).unwrap_err(),
            ObsError::SeriesLength {
                expected: 600,
                found: 10
            }
        );
    }

    #[test]
    fn team_reward_sums_hand_built_locals() {
        let mut state = new_state(0);
        let weights = RewardWeights::default();
        let params = ObsParams::default();
        // One saturated intersection, the rest empty: 8 * 1.0 + (-1.0) = 7.0.
        let route = state.route_shortest(1, 7).unwrap();
        for lane in 0..4 {
            for k in 0..10 {
                state.place_vehicle(route.clone(), lane, 100.0 - 7.0 * k as f64, 0.0);
            }
        }
        let total = team_reward(&state, &weights, &params);
        let locals: f64 = (0..9).map(|i| local_reward(&state, i, &weights, &params)).sum();
        assert_relative_eq!(total, locals);
        assert_relative_eq!(total, 7.0);
    }
}
