use std::path::Path;
use chemeq::config::Config;
use chemeq::equilibrium::{equilibrate, EquilibriumOptions};

fn main() {
    let config = Config::load(Path::new("configs/column.toml")).unwrap();
    let problem = config.column_problem().unwrap();
    let sys = &problem.system;
    let opts = EquilibriumOptions::default();
    let b = nalgebra::DVector::from_vec(vec![
        110.68068714977154,
        847.3977647356176,
        4.874163286878934,
        0.6979013260210215,
        0.697931136101767,
        4.874102090955855,
        1.4050939271333008e-5,
        388.7174966945791,
        0.0,
    ]);
    match equilibrate(sys, &problem.model, 333.15, 1e7, &b, None, &opts) {
        Ok(sol) => println!("cold ok iters {}", sol.iterations),
        Err(e) => println!("cold ERR {e}"),
    }
}
