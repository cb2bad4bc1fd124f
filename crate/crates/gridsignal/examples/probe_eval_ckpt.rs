use gridsignal::control::{Controller, FixedCycleController, PolicyController, RandomController};
use gridsignal::demand::make_even_demand;
use gridsignal::eval::{evaluate_group, EvalContext, EvalParams};
use gridsignal::grid::{build_grid, GridSpec};
use gridsignal::policy::DensePolicy;
use std::sync::Arc;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let ctx = EvalContext::default();
    let params = EvalParams { rollouts: 5, horizon: 900, warmup: 300 };
    let od = make_even_demand();
    let mut controllers: Vec<(String, Box<dyn Controller>)> = vec![
        ("random".into(), Box::new(RandomController)),
        ("fixed2x30".into(), Box::new(FixedCycleController::two_phase_30s())),
    ];
    for path in &args[1..] {
        let policy = DensePolicy::load(std::path::Path::new(path)).unwrap();
        controllers.push((path.clone(), Box::new(PolicyController::new(policy, Default::default(), "ckpt"))));
    }
    for (name, c) in controllers {
        let m = evaluate_group(&net, &ctx, c.as_ref(), 0, &od, &params, 777).unwrap();
        println!("{name}: queue {:>8.2}  speed {:>6.2}", m.mean_queue, m.mean_speed);
    }
}
