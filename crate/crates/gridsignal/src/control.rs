//! Signal controllers: the learned policy wrapper plus the two reference
//! controllers used for comparisons (uniform random phases and fixed-time
//! cycling).

use crate::grid::{NUM_INTERSECTIONS, NUM_PHASES};
use crate::obs::{encode_tl_observation, ObsParams};
use crate::policy::DensePolicy;
use crate::sim::SimState;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Produces one phase request per intersection each second.
pub trait Controller: Send + Sync {
    fn actions(&self, state: &SimState, rng: &mut ChaCha8Rng) -> [usize; NUM_INTERSECTIONS];

    fn label(&self) -> String;
}

/// Requests an independent uniform-random phase at every intersection
/// every second.
pub struct RandomController;

impl Controller for RandomController {
    fn actions(&self, _state: &SimState, rng: &mut ChaCha8Rng) -> [usize; NUM_INTERSECTIONS] {
        std::array::from_fn(|_| rng.random_range(0..NUM_PHASES))
    }

    fn label(&self) -> String {
        "random".to_string()
    }
}

/// Cycles through a fixed phase list, holding each for `green_seconds`
/// (clearance time comes out of the green period). All intersections run
/// the same program in lockstep.
pub struct FixedCycleController {
    pub phases: Vec<usize>,
    pub green_seconds: u64,
}

impl FixedCycleController {
    /// The two-phase 30 s program: alternating through movements.
    pub fn two_phase_30s() -> FixedCycleController {
        FixedCycleController {
            phases: vec![0, 1],
            green_seconds: 30,
        }
    }

    /// Rotates through all eight phases with short greens so every movement
    /// is served each cycle.
    pub fn all_phases_10s() -> FixedCycleController {
        FixedCycleController {
            phases: (0..NUM_PHASES).collect(),
            green_seconds: 10,
        }
    }
}

impl Controller for FixedCycleController {
    fn actions(&self, state: &SimState, _rng: &mut ChaCha8Rng) -> [usize; NUM_INTERSECTIONS] {
        let slot = (state.clock / self.green_seconds) as usize % self.phases.len();
        [self.phases[slot]; NUM_INTERSECTIONS]
    }

    fn label(&self) -> String {
        format!("fixed{}x{}s", self.phases.len(), self.green_seconds)
    }
}

/// Samples phases from a trained categorical policy on the per-intersection
/// observations.
pub struct PolicyController {
    pub policy: DensePolicy,
    pub obs_params: ObsParams,
    pub label: String,
}

impl PolicyController {
    pub fn new(policy: DensePolicy, obs_params: ObsParams, label: &str) -> PolicyController {
        PolicyController {
            policy,
            obs_params,
            label: label.to_string(),
        }
    }
}

impl Controller for PolicyController {
    fn actions(&self, state: &SimState, rng: &mut ChaCha8Rng) -> [usize; NUM_INTERSECTIONS] {
        std::array::from_fn(|i| {
            let obs = encode_tl_observation(state, i, &self.obs_params);
            self.policy.sample_phase(&obs.values, rng).expect("categorical policy").0
        })
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}
