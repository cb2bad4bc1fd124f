use gridsignal::control::{Controller, FixedCycleController, PolicyController, RandomController};
use gridsignal::demand::make_even_demand;
use gridsignal::grid::{build_grid, GridSpec};
use gridsignal::obs::ObsParams;
use gridsignal::policy::DensePolicy;
use gridsignal::sim::{SimParams, SimState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn main() {
    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let od = make_even_demand();
    let mut state = SimState::new(net.clone(), SimParams::default(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Phase 1: jam the network with a random controller for 600 s.
    let random = RandomController;
    for _ in 0..600 {
        let a = random.actions(&state, &mut rng);
        state.step(&a, &od).unwrap();
    }
    println!("after 600s random: queue {} in-net {} backlog {}", state.queue_count(), state.num_in_network(), state.backlog_len());

    // Phase 2: hand over to the rotating controller; can it drain?
    let cycle = FixedCycleController::all_phases_10s();
    for t in 0..1800 {
        let a = cycle.actions(&state, &mut rng);
        state.step(&a, &od).unwrap();
        if (t + 1) % 300 == 0 {
            println!("  +{}s cycle: queue {} in-net {} backlog {} arrived {}", t + 1, state.queue_count(), state.num_in_network(), state.backlog_len(), state.arrived_total);
        }
    }

    // Also: trained policy queue series shape on a fresh run.
    if let Ok(policy) = DensePolicy::load(std::path::Path::new("/tmp/smoke/desk1/theta_baseline.ckpt")) {
        let ctrl = PolicyController::new(policy, ObsParams::default(), "trained");
        let mut s2 = SimState::new(net, SimParams::default(), 9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        for t in 0..1200 {
            let a = ctrl.actions(&s2, &mut rng2);
            s2.step(&a, &od).unwrap();
            if (t + 1) % 200 == 0 {
                println!("trained t={}: queue {} in-net {} arrived {}", t + 1, s2.queue_count(), s2.num_in_network(), s2.arrived_total);
            }
        }
    }
}
