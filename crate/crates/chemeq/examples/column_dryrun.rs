use std::path::Path;
use std::time::Instant;

use chemeq::config::Config;
use chemeq::smart::{RecordStore, SearchConfig};
use chemeq::transport::{run_simulation, CellSolver, Column, RunConfig};
use chemeq::equilibrium::EquilibriumOptions;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let config = Config::load(Path::new("configs/column.toml")).unwrap();
    let mut problem = config.column_problem().unwrap();
    problem.params.nsteps = steps;

    let column = Column {
        system: &problem.system,
        model: &problem.model,
        grid: problem.grid.clone(),
        params: problem.params.clone(),
        boundary: chemeq::transport::Boundary::Open { inlet: problem.inlet.clone() },
        options: EquilibriumOptions::default(),
    };
    let store = RecordStore::new(&problem.system, problem.solver.search.clone());
    let solver = CellSolver::Smart { store, tolerances: problem.solver.tolerances };
    let run = RunConfig { parallel: false, bench: false, snapshot_steps: vec![] };

    let t0 = Instant::now();
    let out = run_simulation(&column, problem.initial.clone(), solver, &run, |stats: &chemeq::transport::StepStats, _: &chemeq::transport::CellField| {
        if stats.step % 25 == 0 || stats.step == steps {
            println!(
                "step {:4}  learned {:3}  predicted {:3}  chem {:.3}s",
                stats.step, stats.learned, stats.predicted, stats.seconds_chemistry
            );
        }
    })
    .unwrap();
    let total: (usize, usize) = out.steps.iter().fold((0, 0), |acc, s| (acc.0 + s.learned, acc.1 + s.predicted));
    println!("total learned {} predicted {}  ({:.1}% predicted)  wall {:.1}s",
        total.0, total.1, 100.0 * total.1 as f64 / (total.0 + total.1) as f64, t0.elapsed().as_secs_f64());

    let sys = &problem.system;
    let cal = sys.species_index("Calcite").unwrap();
    let dol = sys.species_index("Dolomite").unwrap();
    let co2 = sys.species_index("CO2(aq)").unwrap();
    let hplus = sys.species_index("H+").unwrap();
    let h2o = sys.species_index("H2O").unwrap();
    println!("cell  calcite(mol)  dolomite(mol)  CO2(molal)  pH-ish");
    for cell in [0usize, 2, 5, 10, 20, 40, 70, 99] {
        let n = &out.field.states[cell].n;
        let kg = n[h2o] * 0.018015;
        println!("{:4}  {:12.5}  {:13.6e}  {:10.5}  {:7.3}",
            cell, n[cal], n[dol], n[co2] / kg, -(n[hplus] / kg).log10());
    }
}
