use gridsignal::control::Controller;
use gridsignal::demand::make_even_demand;
use gridsignal::eval::{evaluate_group, EvalContext, EvalParams};
use gridsignal::grid::{build_grid, GridSpec, phase_green, NUM_INTERSECTIONS};
use gridsignal::sim::SimState;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

struct HoldRandom(f64);
impl Controller for HoldRandom {
    fn actions(&self, state: &SimState, rng: &mut ChaCha8Rng) -> [usize; 9] {
        std::array::from_fn(|i| {
            if rng.random_range(0.0..1.0) < self.0 {
                state.signals[i].current_phase
            } else {
                rng.random_range(0..8)
            }
        })
    }
    fn label(&self) -> String { format!("hold{}", self.0) }
}

struct HoldRotate(f64);
impl Controller for HoldRotate {
    fn actions(&self, state: &SimState, rng: &mut ChaCha8Rng) -> [usize; 9] {
        std::array::from_fn(|i| {
            if rng.random_range(0.0..1.0) < self.0 {
                state.signals[i].current_phase
            } else {
                (state.signals[i].current_phase + 1) % 8
            }
        })
    }
    fn label(&self) -> String { format!("rot{}", self.0) }
}

/// Greedy queue-serving with minimum green: switch to the phase covering
/// the most queued vehicles once the current phase has run >= min_green.
struct LongestQueue { min_green: u32 }
impl Controller for LongestQueue {
    fn actions(&self, state: &SimState, _rng: &mut ChaCha8Rng) -> [usize; 9] {
        std::array::from_fn(|i| {
            let s = &state.signals[i];
            if s.in_clearance() || s.time_since_change < self.min_green {
                return s.current_phase;
            }
            // queued vehicles per movement
            let mut per_movement = [0usize; 8];
            for rank in 0..4 {
                let edge = state.network.incoming[i][rank];
                for v in state.edge_vehicles(edge) {
                    if v.speed < 0.1 {
                        let lane_class = if v.lane < 2 { 0 } else { 1 };
                        per_movement[rank * 2 + lane_class] += 1;
                    }
                }
            }
            (0..8)
                .max_by_key(|&p| {
                    phase_green(p).iter().map(|m| per_movement[m.index()]).sum::<usize>()
                })
                .unwrap()
        })
    }
    fn label(&self) -> String { "greedy".into() }
}

fn main() {
    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let ctx = EvalContext::default();
    let params = EvalParams { rollouts: 3, horizon: 900, warmup: 300 };
    let od = make_even_demand();
    let cs: Vec<Box<dyn Controller>> = vec![
        Box::new(HoldRandom(0.85)),
        Box::new(HoldRandom(0.90)),
        Box::new(HoldRandom(0.95)),
        Box::new(HoldRotate(0.90)),
        Box::new(HoldRotate(0.95)),
        Box::new(LongestQueue { min_green: 10 }),
        Box::new(LongestQueue { min_green: 5 }),
    ];
    let _ = NUM_INTERSECTIONS;
    for c in cs {
        let m = evaluate_group(&net, &ctx, c.as_ref(), 0, &od, &params, 42).unwrap();
        println!("{:>10}: queue {:>8.2}  speed {:>6.2}", c.label(), m.mean_queue, m.mean_speed);
    }
}
