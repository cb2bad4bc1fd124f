use gridsignal::config::Config;
use gridsignal::control::{Controller, PolicyController};
use gridsignal::demand::make_even_demand;
use gridsignal::grid::{build_grid, GridSpec};
use gridsignal::policy::DensePolicy;
use gridsignal::sim::{derive_seed, SimParams, SimState};
use gridsignal::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn entropy_and_hold(policy: &DensePolicy, state_seed: u64) -> (f64, f64) {
    // Roll the policy for 300 s; measure mean action entropy and P(request == current phase).
    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let mut state = SimState::new(net, SimParams::default(), state_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state_seed, 7));
    let od = make_even_demand();
    let ctrl = PolicyController::new(policy.clone(), Default::default(), "probe");
    let mut ent_sum = 0.0;
    let mut hold = 0usize;
    let mut count = 0usize;
    for _ in 0..300 {
        for i in 0..9 {
            let obs = gridsignal::obs::encode_tl_observation(&state, i, &Default::default());
            let logits = policy.forward(&obs.values).unwrap();
            let lse = {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
            };
            let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            ent_sum += -probs.iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            count += 1;
        }
        let actions = ctrl.actions(&state, &mut rng);
        for i in 0..9 {
            if actions[i] == state.signals[i].current_phase {
                hold += 1;
            }
        }
        state.step(&actions, &od).unwrap();
    }
    (ent_sum / count as f64, hold as f64 / (300.0 * 9.0))
}

fn main() {
    let mut config = Config::default();
    config.run.optimizer = OptimizerKind::Adam;
    config.run.advantage = AdvantageMode::PerStep;
    config.run.credit = CreditMode::ToGo;
    config.run.entropy_bonus = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    config.train.baseline.horizon = 900;
    config.train.baseline.rollouts_per_iter = 4;
    config.train.baseline.learning_rate = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    config.train.baseline.batch_size = 32400;

    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let ctx = config.train_context(1);
    let mut params = config.train.baseline.clone();

    // Manual loop: N iterations, printing parameter movement.
    let stage = |it: usize, theta: &DensePolicy, prev: &[f64]| {
        let delta: f64 = theta
            .params
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let (ent, hold) = entropy_and_hold(theta, 777);
        println!(
            "iter {it:>3}: |dparams| {delta:>8.4}  entropy {ent:>6.4}  P(hold) {hold:>6.3}"
        );
    };

    params.iterations = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(1, 0xB0), 0));
    let mut theta = DensePolicy::tl_policy(&[64, 64], &mut rng);
    stage(0, &theta, &theta.params.clone());
    for it in 0..60 {
        let prev = theta.params.clone();
        let mut ctx_it = ctx.clone();
        ctx_it.seed = derive_seed(1, 1000 + it as u64);
        let (next, curve) = train_baseline_from(&net, &ctx_it, &params, theta, &TrainHooks::none()).unwrap();
        theta = next;
        if it % 3 == 0 {
            stage(it + 1, &theta, &prev);
            println!("        curve: queue {:.1} speed {:.2}", curve[0].mean_queue, curve[0].mean_speed);
        }
    }
}
