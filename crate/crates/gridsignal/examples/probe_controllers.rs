use gridsignal::control::{Controller, FixedCycleController, RandomController};
use gridsignal::demand::make_even_demand;
use gridsignal::eval::{evaluate_group, EvalContext, EvalParams};
use gridsignal::grid::{build_grid, GridSpec};
use std::sync::Arc;

fn main() {
    let net = Arc::new(build_grid(&GridSpec::default()).unwrap());
    let ctx = EvalContext::default();
    let params = EvalParams { rollouts: 3, horizon: 900, warmup: 300 };
    let od = make_even_demand();
    let controllers: Vec<(&str, Box<dyn Controller>)> = vec![
        ("random", Box::new(RandomController)),
        ("fixed2x30", Box::new(FixedCycleController::two_phase_30s())),
        ("cycle8x10", Box::new(FixedCycleController::all_phases_10s())),
        ("cycle8x20", Box::new(FixedCycleController { phases: (0..8).collect(), green_seconds: 20 })),
        ("cycle4x15", Box::new(FixedCycleController { phases: vec![0,1,2,3], green_seconds: 15 })),
    ];
    for (name, c) in controllers {
        let m = evaluate_group(&net, &ctx, c.as_ref(), 0, &od, &params, 42).unwrap();
        println!("{name:>10}: mean queue {:>8.2}  mean speed {:>6.2}  dropped {}", m.mean_queue, m.mean_speed, m.dropped);
    }
}
