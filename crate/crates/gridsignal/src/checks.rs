//! Parameterized invariant suites shared by the `selftest` subcommand and
//! the acceptance tests: signal safety under random control, conservation
//! and determinism, mixture algebra, gradient checks, observation
//! contracts, and low-demand throughput sanity.

use crate::control::{Controller, FixedCycleController, RandomController};
use crate::demand::{
    make_even_demand, mix, ScenarioSet, SyntheticParams, WeightVector, NUM_SCENARIOS,
};
use crate::grid::{
    movements_conflict, phase_green, GridSpec, Movement, MovementSet, Network, SignalState,
    NUM_INTERSECTIONS,
};
use crate::obs::{encode_tl_observation, encode_wce_observation, ObsParams, WindowStats};
use crate::policy::DensePolicy;
use crate::sim::{derive_seed, SimParams, SimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Result of one suite.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: String) -> CheckOutcome {
        CheckOutcome {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> CheckOutcome {
        CheckOutcome {
            name,
            passed: false,
            detail,
        }
    }
}

fn network() -> Arc<Network> {
    Arc::new(crate::grid::build_grid(&GridSpec::default()).expect("default grid"))
}

/// Mirror of one intersection's signal controller, tracking the clearance
/// envelope independently of the simulator's state machine.
struct SignalMirror {
    state: SignalState,
    /// green(old) n green(new) for the clearance in progress.
    envelope: MovementSet,
    /// Seconds since the clearance began.
    countdown_age: u8,
}

impl SignalMirror {
    fn new() -> SignalMirror {
        SignalMirror {
            state: SignalState::new(0),
            envelope: MovementSet::EMPTY,
            countdown_age: 0,
        }
    }

    /// Apply one action + tick; returns an error string on any violation.
    fn advance(&mut self, action: usize) -> Result<(), String> {
        let was_clearing = self.state.in_clearance();
        let current_before = self.state.current_phase;
        self.state.request_phase(action).map_err(|e| e.to_string())?;
        if self.state.in_clearance() && !was_clearing {
            // A switch just started; it is committed for 5 s.
            self.envelope = phase_green(current_before).intersect(phase_green(action));
            self.countdown_age = 0;
        }
        self.state.tick();
        if self.state.in_clearance() {
            self.countdown_age += 1;
            if !self.state.effective_green().is_subset_of(self.envelope) {
                return Err(format!(
                    "effective greens {:?} escape the clearance envelope {:?}",
                    self.state.effective_green(),
                    self.envelope
                ));
            }
            if self.countdown_age > 5 {
                return Err("clearance lasted more than 5 s".into());
            }
        } else if was_clearing && self.countdown_age != 4 {
            // Activation happens on the 5th tick after the clearance began.
            return Err(format!(
                "pending phase activated after {} ticks, expected 5",
                self.countdown_age + 1
            ));
        }
        Ok(())
    }
}

/// Safety under random control: over `rollouts` seeded rollouts of
/// `horizon` seconds, (a) effective greens are pairwise conflict-free,
/// (b) no stop line is crossed without effective green, (c) the clearance
/// envelope and 5 s countdown hold. Checked against an independent mirror
/// of the signal state machines.
pub fn check_safety(rollouts: usize, horizon: u64, seed: u64) -> CheckOutcome {
    const NAME: &str = "safety";
    let net = network();
    let od = make_even_demand();
    let failures: Vec<String> = (0..rollouts)
        .into_par_iter()
        .filter_map(|r| {
            let rollout_seed = derive_seed(seed, r as u64);
            let mut state = SimState::new(net.clone(), SimParams::default(), rollout_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rollout_seed, 7));
            let mut mirrors: Vec<SignalMirror> =
                (0..NUM_INTERSECTIONS).map(|_| SignalMirror::new()).collect();
            for t in 0..horizon {
                let actions: [usize; NUM_INTERSECTIONS] =
                    std::array::from_fn(|_| rng.random_range(0..8));
                for (i, mirror) in mirrors.iter_mut().enumerate() {
                    if let Err(e) = mirror.advance(actions[i]) {
                        return Some(format!("rollout {r} t {t} i {i}: {e}"));
                    }
                }
                if let Err(e) = state.step(&actions, &od) {
                    return Some(format!("rollout {r} t {t}: {e}"));
                }
                for (i, mirror) in mirrors.iter().enumerate() {
                    if mirror.state != state.signals[i] {
                        return Some(format!(
                            "rollout {r} t {t}: mirror diverged at intersection {i}"
                        ));
                    }
                    let greens: Vec<Movement> = state.signals[i].effective_green().iter().collect();
                    for a in &greens {
                        for b in &greens {
                            if movements_conflict(*a, *b) {
                                return Some(format!(
                                    "rollout {r} t {t}: conflicting greens {a:?} {b:?} at {i}"
                                ));
                            }
                        }
                    }
                }
                for crossing in state.crossings_last_step() {
                    let green = mirrors[crossing.intersection].state.effective_green();
                    if !green.contains(crossing.movement) {
                        return Some(format!(
                            "rollout {r} t {t}: crossing {:?} at {} without green",
                            crossing.movement, crossing.intersection
                        ));
                    }
                }
            }
            None
        })
        .collect();
    if failures.is_empty() {
        CheckOutcome::pass(
            NAME,
            format!("{rollouts} rollouts x {horizon} s: 0 violations"),
        )
    } else {
        CheckOutcome::fail(NAME, failures.join("; "))
    }
}

/// Conservation, collision-freedom, and bitwise determinism of metric
/// streams over seeded rollouts under mixed controllers.
pub fn check_conservation_determinism(rollouts: usize, horizon: u64, seed: u64) -> CheckOutcome {
    const NAME: &str = "conservation/determinism";
    let net = network();
    let od = make_even_demand();
    let run_stream = |rollout_seed: u64, controller: &dyn Controller| -> Result<u64, String> {
        let mut state = SimState::new(net.clone(), SimParams::default(), rollout_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rollout_seed, 7));
        let mut digest: u64 = 0xcbf29ce484222325;
        for _ in 0..horizon {
            let actions = controller.actions(&state, &mut rng);
            state.step(&actions, &od).map_err(|e| e.to_string())?;
            state.check_conservation()?;
            state.check_lane_spacing()?;
            for bits in [
                state.queue_count() as u64,
                state.mean_speed().to_bits(),
            ] {
                digest ^= bits;
                digest = digest.wrapping_mul(0x100000001b3);
            }
        }
        Ok(digest)
    };
    let controllers: [&dyn Controller; 2] = [&RandomController, &FixedCycleController::two_phase_30s()];
    let outcomes: Vec<Result<(), String>> = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let rollout_seed = derive_seed(seed, r as u64);
            let controller = controllers[r % controllers.len()];
            let a = run_stream(rollout_seed, controller)?;
            let b = run_stream(rollout_seed, controller)?;
            if a != b {
                return Err(format!("rollout {r}: metric streams differ across reruns"));
            }
            Ok(())
        })
        .collect();
    let failures: Vec<String> = outcomes.into_iter().filter_map(Result::err).collect();
    if failures.is_empty() {
        CheckOutcome::pass(
            NAME,
            format!("{rollouts} rollouts x {horizon} s: ledger exact, streams bitwise equal"),
        )
    } else {
        CheckOutcome::fail(NAME, failures.join("; "))
    }
}

/// Mixture algebra: vertex exactness, totals under convex combination,
/// linearity at 1e-12 relative, and scenario normalization.
pub fn check_mixture(draws: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "mixture";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = ScenarioSet::generate(&mut rng, &SyntheticParams::default());
    for (k, od) in set.iter().enumerate() {
        let total = od.total();
        if (total - 5000.0).abs() / 5000.0 > 1e-6 {
            return CheckOutcome::fail(NAME, format!("scenario {k} totals {total}"));
        }
    }
    for k in 0..NUM_SCENARIOS {
        let vertex = mix(&WeightVector::one_hot(k), &set);
        for o in 0..12 {
            for d in 0..12 {
                if vertex.rate(o, d) != set.scenario(k).rate(o, d) {
                    return CheckOutcome::fail(NAME, format!("vertex {k} not exact at ({o},{d})"));
                }
            }
        }
    }
    let sample_simplex = |rng: &mut ChaCha8Rng| -> WeightVector {
        crate::train::sample_uniform_mixture(rng)
    };
    for i in 0..draws {
        let u = sample_simplex(&mut rng);
        let v = sample_simplex(&mut rng);
        let alpha: f64 = rng.random_range(0.0..1.0);
        let mut blend = [0.0; NUM_SCENARIOS];
        for k in 0..NUM_SCENARIOS {
            blend[k] = alpha * u.get(k) + (1.0 - alpha) * v.get(k);
        }
        blend[7] = 1.0 - blend[..7].iter().sum::<f64>();
        let blend = match WeightVector::new(blend) {
            Ok(w) => w,
            Err(e) => return CheckOutcome::fail(NAME, format!("draw {i}: {e}")),
        };
        let lhs = mix(&blend, &set);
        let mu = mix(&u, &set);
        let mv = mix(&v, &set);
        let total = lhs.total();
        if (total - 5000.0).abs() / 5000.0 > 1e-9 {
            return CheckOutcome::fail(NAME, format!("draw {i}: mixture total {total}"));
        }
        for o in 0..12 {
            for d in 0..12 {
                let rhs = alpha * mu.rate(o, d) + (1.0 - alpha) * mv.rate(o, d);
                let tol = 1e-12 * rhs.abs().max(1.0);
                if (lhs.rate(o, d) - rhs).abs() > tol {
                    return CheckOutcome::fail(
                        NAME,
                        format!("draw {i}: linearity violated at ({o},{d})"),
                    );
                }
            }
        }
    }
    CheckOutcome::pass(NAME, format!("{draws} simplex draws: exact to 1e-12"))
}

/// Analytic score-function gradients vs central finite differences
/// (h = 1e-5) on `configs_per_head` random configurations per head,
/// 20 random coordinates each, at 1e-4 relative error.
pub fn check_gradients(configs_per_head: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "gradients";
    let h = 1e-5;
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..configs_per_head {
        let policy = DensePolicy::tl_policy(&[16, 16], &mut rng);
        let x: Vec<f64> = (0..79).map(|_| rng.random_range(0.0..1.0)).collect();
        let action = rng.random_range(0..8);
        let analytic = policy.grad_logprob_phase(&x, action).expect("grad");
        for _ in 0..20 {
            let j = rng.random_range(0..policy.num_params());
            let mut plus = policy.clone();
            plus.params[j] += h;
            let mut minus = policy.clone();
            minus.params[j] -= h;
            let numeric = (plus.logprob_phase(&x, action).unwrap()
                - minus.logprob_phase(&x, action).unwrap())
                / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / (analytic[j].abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
            if err > tol {
                return CheckOutcome::fail(
                    NAME,
                    format!("categorical trial {trial} coord {j}: rel err {err}"),
                );
            }
        }
    }
    for trial in 0..configs_per_head {
        let policy = DensePolicy::wce_policy(&[16], &mut rng);
        let x: Vec<f64> = (0..18).map(|_| rng.random_range(0.0..1.0)).collect();
        let (w, _) = policy.sample_weights(&x, &mut rng).expect("sample");
        let analytic = policy.grad_logprob_weights(&x, &w).expect("grad");
        for _ in 0..20 {
            let j = rng.random_range(0..policy.num_params());
            let mut plus = policy.clone();
            plus.params[j] += h;
            let mut minus = policy.clone();
            minus.params[j] -= h;
            let numeric = (plus.logprob_weights(&x, &w).unwrap()
                - minus.logprob_weights(&x, &w).unwrap())
                / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / (analytic[j].abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
            if err > tol {
                return CheckOutcome::fail(
                    NAME,
                    format!("dirichlet trial {trial} coord {j}: rel err {err}"),
                );
            }
        }
    }
    CheckOutcome::pass(
        NAME,
        format!("{configs_per_head} configs/head x 20 coords: worst rel err {worst:.2e}"),
    )
}

/// Observation contracts: lengths and [0,1] bounds for both encoders on
/// random rollouts, plus the exact waiting-time exchange identity.
pub fn check_observations(rollouts: usize, horizon: u64, seed: u64) -> CheckOutcome {
    const NAME: &str = "observations";
    let net = network();
    let od = make_even_demand().normalize_total(8000.0).expect("positive");
    let obs_params = ObsParams::default();
    let failures: Vec<String> = (0..rollouts)
        .into_par_iter()
        .filter_map(|r| {
            let rollout_seed = derive_seed(seed, r as u64);
            let mut state = SimState::new(net.clone(), SimParams::default(), rollout_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rollout_seed, 7));
            let mut stats = WindowStats::new();
            let mut series_sum: u64 = 0;
            let mut arrived_queued: u64 = 0;
            for t in 0..horizon {
                let actions: [usize; NUM_INTERSECTIONS] =
                    std::array::from_fn(|_| rng.random_range(0..8));
                if let Err(e) = state.step(&actions, &od) {
                    return Some(format!("rollout {r} t {t}: {e}"));
                }
                stats.record(&state);
                series_sum += state.queue_count() as u64;
                arrived_queued += state
                    .arrivals_last_step()
                    .iter()
                    .map(|a| a.queued_seconds)
                    .sum::<u64>();
                for i in 0..NUM_INTERSECTIONS {
                    let obs = encode_tl_observation(&state, i, &obs_params);
                    if obs.values.len() != 79 {
                        return Some(format!("tl obs length {}", obs.values.len()));
                    }
                    for (k, v) in obs.values.iter().enumerate() {
                        if !(0.0..=1.0).contains(v) {
                            return Some(format!(
                                "rollout {r} t {t} i {i}: tl feature {k} = {v}"
                            ));
                        }
                    }
                }
                let wce = encode_wce_observation(&stats);
                if wce.values.len() != 18 {
                    return Some(format!("wce obs length {}", wce.values.len()));
                }
                for (k, v) in wce.values.iter().enumerate() {
                    if !(0.0..=1.0).contains(v) {
                        return Some(format!("rollout {r} t {t}: wce feature {k} = {v}"));
                    }
                }
            }
            // Exchange identity: per-second queue sums equal per-vehicle
            // queued seconds (arrived plus still present).
            let live: u64 = state.live_queued_seconds();
            if series_sum != arrived_queued + live {
                return Some(format!(
                    "rollout {r}: exchange identity violated: {series_sum} != {} + {live}",
                    arrived_queued
                ));
            }
            None
        })
        .collect();
    if failures.is_empty() {
        CheckOutcome::pass(
            NAME,
            format!("{rollouts} rollouts x {horizon} s: contracts and exchange identity hold"),
        )
    } else {
        CheckOutcome::fail(NAME, failures.join("; "))
    }
}

/// Low-demand throughput sanity: under all-phase fixed cycling at
/// <= 100 veh/h total, the backlog stays empty and every spawned vehicle
/// arrives within 10x its free-flow travel time.
pub fn check_throughput_sanity(seed: u64) -> CheckOutcome {
    const NAME: &str = "throughput";
    let net = network();
    let od = make_even_demand().normalize_total(100.0).expect("positive");
    let controller = FixedCycleController::all_phases_10s();
    let mut state = SimState::new(net.clone(), SimParams::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let horizon = 1800u64;
    let drain = 600u64;
    let mut checked = 0usize;
    for t in 0..horizon + drain {
        let actions = controller.actions(&state, &mut rng);
        // Demand stops after the horizon so the network can drain.
        let demand = if t < horizon {
            od.clone()
        } else {
            crate::demand::ODMatrix::zeros("drain")
        };
        if let Err(e) = state.step(&actions, &demand) {
            return CheckOutcome::fail(NAME, format!("t {t}: {e}"));
        }
        if state.backlog_len() > 0 {
            return CheckOutcome::fail(NAME, format!("t {t}: backlog not empty"));
        }
        for arrival in state.arrivals_last_step() {
            let edges = state.shortest_edge_count(arrival.od.0, arrival.od.1);
            let free_flow = edges as f64 * 100.0 / SimParams::default().v_max;
            let travel = (arrival.arrival_time - arrival.spawn_time) as f64;
            if travel > 10.0 * free_flow {
                return CheckOutcome::fail(
                    NAME,
                    format!(
                        "vehicle {} travelled {travel} s, bound {:.1} s",
                        arrival.id,
                        10.0 * free_flow
                    ),
                );
            }
            checked += 1;
        }
    }
    if state.num_in_network() > 0 {
        return CheckOutcome::fail(
            NAME,
            format!("{} vehicles still in network after drain", state.num_in_network()),
        );
    }
    CheckOutcome::pass(NAME, format!("{checked} arrivals within 10x free-flow"))
}

/// The default selftest battery (small scales; the acceptance suite runs
/// the full criterion scales).
pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_safety(10, 300, derive_seed(seed, 1)),
        check_conservation_determinism(6, 300, derive_seed(seed, 2)),
        check_mixture(200, derive_seed(seed, 3)),
        check_gradients(10, derive_seed(seed, 4)),
        check_observations(4, 300, derive_seed(seed, 5)),
        check_throughput_sanity(derive_seed(seed, 6)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_battery_passes() {
        for outcome in run_selftest(7) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
