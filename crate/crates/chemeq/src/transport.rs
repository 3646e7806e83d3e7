//! One-dimensional reactive transport: an operator-split column that
//! advects and diffuses fluid element totals implicitly, then restores
//! chemical equilibrium in every cell with either the conventional solver
//! or the record-and-predict layer.
//!
//! The column works in per-cell mole totals on a uniform grid with unit
//! cross-section, so amounts and per-volume concentrations differ only by
//! the cell volume. Solids do not move: only the fluid partition of each
//! element enters the transport substep, and the equilibration substep
//! repartitions the combined totals afterwards.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::chemsys::{ChemicalState, ChemicalSystem, PhaseKind};
use crate::equilibrium::{
    equilibrate, sensitivities, EquilibriumError, EquilibriumOptions, EquilibriumSolution,
};
use crate::linalg::solve_tridiagonal;
use crate::smart::{
    solve_smart, try_predict, EquilibriumRecord, RecordStore, SmartResult, SolveKind, TestKind,
    Tolerances,
};
use crate::thermo::{ThermoModel, WATER_MOLAR_MASS};

/// Uniform grid over a column of unit cross-section; the cell volume in
/// cubic metres equals the spacing.
#[derive(Debug, Clone)]
pub struct Grid1D {
    ncells: usize,
    length: f64,
}

impl Grid1D {
    pub fn new(ncells: usize, length: f64) -> Grid1D {
        assert!(ncells >= 2, "a column needs at least two cells");
        assert!(length > 0.0 && length.is_finite(), "column length must be positive");
        Grid1D { ncells, length }
    }

    pub fn ncells(&self) -> usize {
        self.ncells
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.ncells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx()
    }

    /// Centre coordinate of a cell, in metres from the inlet.
    pub fn center(&self, cell: usize) -> f64 {
        (cell as f64 + 0.5) * self.dx()
    }
}

/// Flow and stepping parameters. Flow runs from the inlet (cell 0) to the
/// outlet, so the velocity must be nonnegative.
#[derive(Debug, Clone)]
pub struct TransportParams {
    /// Fluid velocity in m/s.
    pub velocity: f64,
    /// Diffusion coefficient in m^2/s, shared by all elements.
    pub diffusion: f64,
    /// Time step in seconds.
    pub dt: f64,
    pub nsteps: usize,
}

impl TransportParams {
    pub fn new(velocity: f64, diffusion: f64, dt: f64, nsteps: usize) -> TransportParams {
        assert!(velocity >= 0.0 && velocity.is_finite(), "velocity must be nonnegative");
        assert!(diffusion >= 0.0 && diffusion.is_finite(), "diffusion must be nonnegative");
        assert!(dt > 0.0 && dt.is_finite(), "time step must be positive");
        TransportParams { velocity, diffusion, dt, nsteps }
    }
}

/// Column end conditions for the transport substep.
#[derive(Debug, Clone)]
pub enum Boundary {
    /// Fixed inlet fluid composition on the left (per-cell mole units,
    /// coupled through a half-cell diffusive gap) and advective outflow
    /// with zero diffusive gradient on the right.
    Open { inlet: DVector<f64> },
    /// Zero flux through both ends, so the column conserves every element
    /// exactly; the drift tests rely on this variant.
    Closed,
}

/// Per-cell solver states plus the fluid/solid split of the element
/// totals. The split columns always sum to the element totals of the
/// state they were partitioned from.
#[derive(Debug, Clone)]
pub struct CellField {
    pub states: Vec<ChemicalState>,
    /// Elements x cells, fluid element totals.
    pub bf: DMatrix<f64>,
    /// Elements x cells, solid element totals.
    pub bs: DMatrix<f64>,
    /// How each cell's latest equilibration was answered.
    pub kinds: Vec<SolveKind>,
}

/// Fluid and solid element totals of a composition. The fluid's charge row
/// is pinned to exact zero: the signed sum over ions is zero up to roundoff,
/// and transport requires nonnegative inputs.
fn partition_neutral(system: &ChemicalSystem, n: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (mut bf, bs) = system.partition_amounts(n).expect("amounts match the system");
    if let Some(z) = system.charge_row() {
        bf[z] = 0.0;
    }
    (bf, bs)
}

impl CellField {
    /// Replicates one state across the column.
    pub fn uniform(system: &ChemicalSystem, state: &ChemicalState, ncells: usize) -> CellField {
        let (bf, bs) = partition_neutral(system, &state.n);
        let mut field = CellField {
            states: vec![state.clone(); ncells],
            bf: DMatrix::zeros(system.n_elements(), ncells),
            bs: DMatrix::zeros(system.n_elements(), ncells),
            kinds: vec![SolveKind::Learned; ncells],
        };
        for cell in 0..ncells {
            field.bf.set_column(cell, &bf);
            field.bs.set_column(cell, &bs);
        }
        field
    }

    pub fn ncells(&self) -> usize {
        self.states.len()
    }

    /// Sum of fluid and solid element totals over the whole column.
    pub fn total_elements(&self) -> DVector<f64> {
        let mut total = DVector::zeros(self.bf.nrows());
        for cell in 0..self.bf.ncols() {
            total += self.bf.column(cell) + self.bs.column(cell);
        }
        total
    }

    fn apply(&mut self, system: &ChemicalSystem, cell: usize, n: DVector<f64>, kind: SolveKind) {
        let (bf, bs) = partition_neutral(system, &n);
        self.bf.set_column(cell, &bf);
        self.bs.set_column(cell, &bs);
        self.states[cell].n = n;
        self.kinds[cell] = kind;
    }
}

/// Everything about the column that stays fixed over a run.
pub struct Column<'a> {
    pub system: &'a ChemicalSystem,
    pub model: &'a ThermoModel,
    pub grid: Grid1D,
    pub params: TransportParams,
    pub boundary: Boundary,
    pub options: EquilibriumOptions,
}

/// How the equilibration substep answers each cell.
pub enum CellSolver {
    Conventional,
    Smart { store: RecordStore, tolerances: Tolerances },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Solve the cells of each step concurrently. Prediction then tests
    /// against the store as it stood at the start of the step, so cells
    /// cannot chain off records learned within the same step and a step
    /// may learn more than a sequential run would.
    pub parallel: bool,
    /// Replay every accepted input through the conventional solver each
    /// step (sequentially) and report its cost alongside.
    pub bench: bool,
    /// Steps after which to capture a full copy of the field; step 0 is
    /// the initial condition.
    pub snapshot_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig { parallel: false, bench: false, snapshot_steps: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    /// Full solves this step; a conventional run counts every cell here.
    pub learned: usize,
    pub predicted: usize,
    pub seconds_transport: f64,
    pub seconds_chemistry: f64,
    /// Cost of the conventional replay, in bench mode only.
    pub seconds_conventional: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    /// Simulated seconds since the start of the run.
    pub time: f64,
    pub field: CellField,
}

pub struct SimulationOutput {
    pub field: CellField,
    pub steps: Vec<StepStats>,
    pub snapshots: Vec<Snapshot>,
    /// The record store after a smart run, for persisting or inspection.
    pub store: Option<RecordStore>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cell {cell} failed to equilibrate at step {step}: {source}")]
    Solve {
        step: usize,
        cell: usize,
        #[source]
        source: EquilibriumError,
    },
}

/// One implicit transport substep on the fluid totals: first-order upwind
/// advection and central diffusion, solved per element with the Thomas
/// algorithm. The system matrix is diagonally dominant with nonpositive
/// off-diagonals, so elimination meets no cancellation and nonnegative
/// inputs stay nonnegative in floating point; the result is asserted.
pub fn transport_step(
    bf: &mut DMatrix<f64>,
    grid: &Grid1D,
    params: &TransportParams,
    boundary: &Boundary,
) {
    let c = grid.ncells();
    assert_eq!(bf.ncols(), c, "field width does not match the grid");
    let dx = grid.dx();
    let alpha = params.velocity * params.dt / dx;
    let beta = params.diffusion * params.dt / (dx * dx);

    let lower = vec![-(alpha + beta); c];
    let upper = vec![-beta; c];
    let mut diag = vec![1.0 + alpha + 2.0 * beta; c];
    match boundary {
        Boundary::Open { inlet } => {
            assert_eq!(inlet.len(), bf.nrows(), "inlet width does not match the field");
            assert!(inlet.iter().all(|&v| v >= 0.0), "inlet amounts must be nonnegative");
            // Dirichlet inlet a half cell away from the first centre
            diag[0] = 1.0 + alpha + 3.0 * beta;
            // advected out, no diffusive gradient
            diag[c - 1] = 1.0 + alpha + beta;
        }
        Boundary::Closed => {
            diag[0] = 1.0 + alpha + beta;
            diag[c - 1] = 1.0 + beta;
        }
    }

    let mut rhs = vec![0.0_f64; c];
    for e in 0..bf.nrows() {
        for i in 0..c {
            rhs[i] = bf[(e, i)];
        }
        if let Boundary::Open { inlet } = boundary {
            rhs[0] += (alpha + 2.0 * beta) * inlet[e];
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        for i in 0..c {
            assert!(rhs[i] >= 0.0, "transport produced a negative amount");
            bf[(e, i)] = rhs[i];
        }
    }
}

fn solve_error(step: usize, cell: usize) -> impl Fn(EquilibriumError) -> TransportError {
    move |source| TransportError::Solve { step, cell, source }
}

/// Combined per-cell totals and previous amounts, kept for the bench
/// replay.
struct StepInputs {
    b: Vec<DVector<f64>>,
    n_prev: Vec<DVector<f64>>,
}

fn gather_inputs(field: &CellField) -> StepInputs {
    let c = field.ncells();
    let mut b = Vec::with_capacity(c);
    let mut n_prev = Vec::with_capacity(c);
    for cell in 0..c {
        b.push(DVector::from(field.bf.column(cell) + field.bs.column(cell)));
        n_prev.push(field.states[cell].n.clone());
    }
    StepInputs { b, n_prev }
}

/// Restores equilibrium in every cell from its combined element totals,
/// warm-starting each solve from the cell's previous amounts. Returns the
/// (learned, predicted) counts for the step.
pub fn reactive_step(
    column: &Column,
    field: &mut CellField,
    solver: &mut CellSolver,
    parallel: bool,
    step: usize,
) -> Result<(usize, usize), TransportError> {
    let inputs = gather_inputs(field);
    react(column, field, solver, &inputs, parallel, step)
}

fn react(
    column: &Column,
    field: &mut CellField,
    solver: &mut CellSolver,
    inputs: &StepInputs,
    parallel: bool,
    step: usize,
) -> Result<(usize, usize), TransportError> {
    let c = field.ncells();
    let sys = column.system;
    let model = column.model;
    let opts = &column.options;
    match solver {
        CellSolver::Conventional => {
            let solve_one = |cell: usize| -> Result<(usize, EquilibriumSolution), TransportError> {
                let state = &field.states[cell];
                equilibrate(sys, model, state.t, state.p, &inputs.b[cell], Some(&inputs.n_prev[cell]), opts)
                    .map(|sol| (cell, sol))
                    .map_err(solve_error(step, cell))
            };
            let solved: Vec<(usize, EquilibriumSolution)> = if parallel {
                (0..c).into_par_iter().map(solve_one).collect::<Result<_, _>>()?
            } else {
                (0..c).map(solve_one).collect::<Result<_, _>>()?
            };
            for (cell, sol) in solved {
                field.apply(sys, cell, sol.state.n, SolveKind::Learned);
            }
            Ok((c, 0))
        }
        CellSolver::Smart { store, tolerances } => {
            let mut learned = 0;
            let mut predicted = 0;
            if parallel {
                // phase 1: predictions against the store as of step start
                let hits: Vec<Option<(SmartResult, f64)>> = (0..c)
                    .into_par_iter()
                    .map(|cell| {
                        let state = &field.states[cell];
                        let clock = Instant::now();
                        try_predict(store, sys, state.t, state.p, &inputs.b[cell], tolerances)
                            .map(|r| (r, clock.elapsed().as_secs_f64()))
                    })
                    .collect();
                // phase 2: full solves for the rejected cells
                let missed: Vec<usize> =
                    (0..c).filter(|&cell| hits[cell].is_none()).collect();
                type Solved = (usize, EquilibriumSolution, Option<crate::equilibrium::Sensitivities>, f64);
                let solutions: Vec<Solved> = missed
                    .par_iter()
                    .map(|&cell| {
                        let state = &field.states[cell];
                        let clock = Instant::now();
                        let sol = equilibrate(
                            sys,
                            model,
                            state.t,
                            state.p,
                            &inputs.b[cell],
                            Some(&inputs.n_prev[cell]),
                            opts,
                        )
                        .map_err(solve_error(step, cell))?;
                        let sens = sensitivities(sys, &sol, opts).ok();
                        Ok((cell, sol, sens, clock.elapsed().as_secs_f64()))
                    })
                    .collect::<Result<_, TransportError>>()?;
                // phase 3: apply in cell order so record ids stay deterministic
                let mut solved: Vec<Option<Solved>> = vec![None; c];
                for item in solutions {
                    let cell = item.0;
                    solved[cell] = Some(item);
                }
                let mut hits = hits;
                for cell in 0..c {
                    if let Some((result, seconds)) = hits[cell].take() {
                        store.log_call(SolveKind::Predicted, result.distance, seconds);
                        field.apply(sys, cell, result.state.n, SolveKind::Predicted);
                        predicted += 1;
                    } else {
                        let (_, sol, sens, seconds) = solved[cell].take().unwrap();
                        let state = &field.states[cell];
                        let distance = store
                            .nearest(state.t, state.p, &sol.b)
                            .map_or(f64::INFINITY, |(_, d)| d);
                        store.push(EquilibriumRecord::from_solution(
                            &sol,
                            sens,
                            tolerances.kind == TestKind::Activity,
                        ));
                        store.log_call(SolveKind::Learned, distance, seconds);
                        field.apply(sys, cell, sol.state.n, SolveKind::Learned);
                        learned += 1;
                    }
                }
            } else {
                for cell in 0..c {
                    let state = &field.states[cell];
                    let result = solve_smart(
                        store,
                        sys,
                        model,
                        state.t,
                        state.p,
                        &inputs.b[cell],
                        tolerances,
                        Some(&inputs.n_prev[cell]),
                        opts,
                    )
                    .map_err(solve_error(step, cell))?;
                    match result.kind {
                        SolveKind::Learned => learned += 1,
                        SolveKind::Predicted => predicted += 1,
                    }
                    field.apply(sys, cell, result.state.n, result.kind);
                }
            }
            Ok((learned, predicted))
        }
    }
}

/// Runs the column for `params.nsteps` steps. The observer sees every
/// completed step, in order, before the run moves on, so partial output
/// can be flushed as the run progresses.
pub fn run_simulation(
    column: &Column,
    initial: CellField,
    solver: CellSolver,
    run: &RunConfig,
    mut observer: impl FnMut(&StepStats, &CellField),
) -> Result<SimulationOutput, TransportError> {
    let mut field = initial;
    assert_eq!(field.ncells(), column.grid.ncells(), "field does not match the grid");
    let mut solver = solver;
    // concurrent cells would share the bench clock, so bench stays sequential
    let parallel = run.parallel && !run.bench;

    let mut steps = Vec::with_capacity(column.params.nsteps);
    let mut snapshots = Vec::new();
    if run.snapshot_steps.contains(&0) {
        snapshots.push(Snapshot { step: 0, time: 0.0, field: field.clone() });
    }

    for step in 1..=column.params.nsteps {
        let clock = Instant::now();
        transport_step(&mut field.bf, &column.grid, &column.params, &column.boundary);
        let seconds_transport = clock.elapsed().as_secs_f64();

        let inputs = gather_inputs(&field);
        let clock = Instant::now();
        let (learned, predicted) = react(column, &mut field, &mut solver, &inputs, parallel, step)?;
        let seconds_chemistry = clock.elapsed().as_secs_f64();

        let seconds_conventional = if run.bench {
            let clock = Instant::now();
            for cell in 0..field.ncells() {
                let state = &field.states[cell];
                equilibrate(
                    column.system,
                    column.model,
                    state.t,
                    state.p,
                    &inputs.b[cell],
                    Some(&inputs.n_prev[cell]),
                    &column.options,
                )
                .map_err(solve_error(step, cell))?;
            }
            Some(clock.elapsed().as_secs_f64())
        } else {
            None
        };

        let stats = StepStats {
            step,
            learned,
            predicted,
            seconds_transport,
            seconds_chemistry,
            seconds_conventional,
        };
        observer(&stats, &field);
        if run.snapshot_steps.contains(&step) {
            snapshots.push(Snapshot {
                step,
                time: step as f64 * column.params.dt,
                field: field.clone(),
            });
        }
        steps.push(stats);
    }

    let store = match solver {
        CellSolver::Smart { store, .. } => Some(store),
        CellSolver::Conventional => None,
    };
    Ok(SimulationOutput { field, steps, snapshots, store })
}

/// Equilibrates one total composition and replicates it across the column.
pub fn uniform_column(
    system: &ChemicalSystem,
    model: &ThermoModel,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    ncells: usize,
    options: &EquilibriumOptions,
) -> Result<CellField, EquilibriumError> {
    let sol = equilibrate(system, model, t, p, b, None, options)?;
    Ok(CellField::uniform(system, &sol.state, ncells))
}

/// Fluid element totals of the equilibrated composition; open columns use
/// this as the inlet value so the boundary state is itself an equilibrium
/// state.
pub fn equilibrated_fluid(
    system: &ChemicalSystem,
    model: &ThermoModel,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    options: &EquilibriumOptions,
) -> Result<DVector<f64>, EquilibriumError> {
    let sol = equilibrate(system, model, t, p, b, None, options)?;
    Ok(partition_neutral(system, &sol.state.n).0)
}

/// Reporting units for one species in a profile: aqueous solutes as
/// molality, the solvent as its mass, minerals with a known molar volume
/// as a volume fraction of the cell, anything else as an amount.
pub fn profile_header(system: &ChemicalSystem) -> Vec<String> {
    let phases = system.phases();
    system
        .species()
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            let phase = &phases[sp.phase_index];
            match phase.kind {
                PhaseKind::Aqueous if phase.solvent_index == Some(i) => format!("kg_{}", sp.name),
                PhaseKind::Aqueous => format!("m_{}", sp.name),
                PhaseKind::Mineral if sp.molar_volume > 0.0 => format!("vol_{}", sp.name),
                _ => format!("n_{}", sp.name),
            }
        })
        .collect()
}

/// Values matching [`profile_header`], for one cell.
pub fn profile_values(system: &ChemicalSystem, grid: &Grid1D, state: &ChemicalState) -> Vec<f64> {
    let phases = system.phases();
    system
        .species()
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            let phase = &phases[sp.phase_index];
            match phase.kind {
                PhaseKind::Aqueous if phase.solvent_index == Some(i) => {
                    state.n[i] * WATER_MOLAR_MASS
                }
                PhaseKind::Aqueous => {
                    let solvent = phase.solvent_index.expect("aqueous phase has a solvent");
                    state.n[i] / (state.n[solvent] * WATER_MOLAR_MASS)
                }
                PhaseKind::Mineral if sp.molar_volume > 0.0 => {
                    state.n[i] * sp.molar_volume / grid.cell_volume()
                }
                _ => state.n[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::smart::SearchConfig;
    use approx::assert_relative_eq;

    fn opts() -> EquilibriumOptions {
        EquilibriumOptions::default()
    }

    /// Equilibrates one total composition per cell and assembles the field.
    fn column_field(
        sys: &ChemicalSystem,
        model: &ThermoModel,
        t: f64,
        p: f64,
        totals: &[DVector<f64>],
    ) -> CellField {
        let states: Vec<ChemicalState> = totals
            .iter()
            .map(|b| equilibrate(sys, model, t, p, b, None, &opts()).unwrap().state)
            .collect();
        let e = sys.n_elements();
        let mut field = CellField {
            states,
            bf: DMatrix::zeros(e, totals.len()),
            bs: DMatrix::zeros(e, totals.len()),
            kinds: vec![SolveKind::Learned; totals.len()],
        };
        for cell in 0..totals.len() {
            let (bf, bs) = sys.partition_amounts(&field.states[cell].n).unwrap();
            field.bf.set_column(cell, &bf);
            field.bs.set_column(cell, &bs);
        }
        field
    }

    /// Saturated-with-solid cells, undersaturated inlet: a dissolution
    /// front moves through the column.
    fn dissolution_column(
        nsteps: usize,
    ) -> (ChemicalSystem, ThermoModel, Column<'static>, CellField) {
        // leak the system and model so Column can borrow them 'static;
        // tests only
        let (sys, model) = presets::mineral_saturation();
        let sys: &'static ChemicalSystem = Box::leak(Box::new(sys));
        let model: &'static ThermoModel = Box::leak(Box::new(model));
        let inlet =
            equilibrated_fluid(sys, model, 300.0, 1e5, &DVector::from_vec(vec![55.508, 0.05]), &opts())
                .unwrap();
        let column = Column {
            system: sys,
            model,
            grid: Grid1D::new(8, 1.0),
            params: TransportParams::new(1.0e-3, 1.0e-4, 50.0, nsteps),
            boundary: Boundary::Open { inlet },
            options: opts(),
        };
        // a gradient keeps every cell moving every step, so no transported
        // state ever repeats bitwise
        let totals: Vec<DVector<f64>> = (0..8)
            .map(|c| DVector::from_vec(vec![55.508, 1.2 - 0.1 * c as f64]))
            .collect();
        let field = column_field(sys, model, 300.0, 1e5, &totals);
        (sys.clone(), model.clone(), column, field)
    }

    fn run(
        column: &Column,
        field: &CellField,
        solver: CellSolver,
        parallel: bool,
    ) -> SimulationOutput {
        let run = RunConfig { parallel, ..RunConfig::default() };
        run_simulation(column, field.clone(), solver, &run, |_, _| {}).unwrap()
    }

    fn smart_solver(sys: &ChemicalSystem, eps: f64) -> CellSolver {
        CellSolver::Smart {
            store: RecordStore::new(sys, SearchConfig::default()),
            tolerances: Tolerances::new(eps, eps, TestKind::ChemicalPotential),
        }
    }

    #[test]
    fn zero_velocity_and_diffusion_leave_the_field_unchanged() {
        let grid = Grid1D::new(5, 2.0);
        let params = TransportParams::new(0.0, 0.0, 10.0, 1);
        let mut bf = DMatrix::from_fn(3, 5, |e, i| 1.0 + 0.3 * e as f64 + 0.07 * i as f64);
        let before = bf.clone();
        let inlet = DVector::from_vec(vec![9.0, 9.0, 9.0]);
        transport_step(&mut bf, &grid, &params, &Boundary::Open { inlet });
        for (a, b) in bf.iter().zip(before.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn a_column_already_at_the_inlet_composition_is_steady() {
        let grid = Grid1D::new(12, 1.0);
        let params = TransportParams::new(2.0e-3, 5.0e-4, 20.0, 1);
        let inlet = DVector::from_vec(vec![3.5, 0.25]);
        let mut bf = DMatrix::zeros(2, 12);
        for i in 0..12 {
            bf.set_column(i, &inlet);
        }
        for _ in 0..10 {
            transport_step(&mut bf, &grid, &params, &Boundary::Open { inlet: inlet.clone() });
        }
        for i in 0..12 {
            for e in 0..2 {
                assert_relative_eq!(bf[(e, i)], inlet[e], max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn closed_ends_conserve_every_element() {
        let grid = Grid1D::new(30, 3.0);
        let params = TransportParams::new(4.0e-3, 2.0e-4, 10.0, 1);
        let mut bf = DMatrix::from_fn(4, 30, |e, i| 1.0 + ((e * 31 + i * 7) % 11) as f64 * 0.1);
        let start: Vec<f64> = (0..4).map(|e| bf.row(e).sum()).collect();
        for _ in 0..300 {
            transport_step(&mut bf, &grid, &params, &Boundary::Closed);
        }
        for e in 0..4 {
            assert_relative_eq!(bf.row(e).sum(), start[e], max_relative = 1e-12);
        }
    }

    #[test]
    fn the_outlet_passes_the_inlet_signal_through() {
        let grid = Grid1D::new(20, 1.0);
        let params = TransportParams::new(5.0e-4, 2.5e-4, 50.0, 1);
        let inlet = DVector::from_vec(vec![2.0, 0.8]);
        let mut bf = DMatrix::from_fn(2, 20, |e, _| if e == 0 { 0.1 } else { 1.5 });
        for _ in 0..600 {
            transport_step(&mut bf, &grid, &params, &Boundary::Open { inlet: inlet.clone() });
        }
        for i in 0..20 {
            for e in 0..2 {
                assert_relative_eq!(bf[(e, i)], inlet[e], max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn an_equilibrated_uniform_column_is_a_fixed_point() {
        let (sys, model) = presets::mineral_saturation();
        let b = DVector::from_vec(vec![55.508, 1.2]);
        let field = uniform_column(&sys, &model, 300.0, 1e5, &b, 6, &opts()).unwrap();
        let inlet = DVector::from(field.bf.column(0));
        let column = Column {
            system: &sys,
            model: &model,
            grid: Grid1D::new(6, 1.0),
            params: TransportParams::new(1.0e-3, 1.0e-4, 50.0, 3),
            boundary: Boundary::Open { inlet },
            options: opts(),
        };
        let reference = field.states[0].n.clone();
        let out = run(&column, &field, CellSolver::Conventional, false);
        for state in &out.field.states {
            for i in 0..reference.len() {
                assert_relative_eq!(state.n[i], reference[i], max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn no_steps_returns_the_initial_condition() {
        let (_, _, column, field) = dissolution_column(0);
        let run_cfg = RunConfig { snapshot_steps: vec![0], ..RunConfig::default() };
        let out =
            run_simulation(&column, field.clone(), CellSolver::Conventional, &run_cfg, |_, _| {})
                .unwrap();
        assert!(out.steps.is_empty());
        assert_eq!(out.snapshots.len(), 1);
        for (a, b) in out.field.bf.iter().zip(field.bf.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn a_dissolution_front_moves_through_the_column() {
        let (_, _, column, field) = dissolution_column(20);
        let solid_before: f64 = field.bs.row(1).sum();
        let out = run(&column, &field, CellSolver::Conventional, false);
        let solid_after: f64 = out.field.bs.row(1).sum();
        assert!(
            solid_after < solid_before - 0.5,
            "undersaturated inflow should dissolve solid: {solid_before} -> {solid_after}"
        );
        // the front eats the inlet end first
        assert!(out.field.bs[(1, 0)] < out.field.bs[(1, 7)]);
    }

    #[test]
    fn smart_and_conventional_columns_agree() {
        let (sys, _, column, field) = dissolution_column(20);
        let conventional = run(&column, &field, CellSolver::Conventional, false);
        let smart = run(&column, &field, smart_solver(&sys, 1e-3), false);
        for cell in 0..field.ncells() {
            let a = &conventional.field.states[cell].n;
            let b = &smart.field.states[cell].n;
            for i in 0..a.len() {
                assert!(
                    (a[i] - b[i]).abs() <= 2e-2 * a[i].abs().max(1e-3),
                    "cell {cell} species {i}: conventional {} vs smart {}",
                    a[i],
                    b[i]
                );
            }
        }
        let stats = smart.store.unwrap();
        let stats = stats.stats();
        assert!(stats.predicted > 0, "the smart run should answer some cells from the store");
    }

    #[test]
    fn zero_tolerances_degenerate_to_the_conventional_run() {
        let (sys, _, column, field) = dissolution_column(10);
        let conventional = run(&column, &field, CellSolver::Conventional, false);
        // the amount test is the one that cannot accept at zero tolerance:
        // the potential test keeps accepting saturated-mineral predictions
        // whose potential change underflows f64 even though amounts move
        let smart = CellSolver::Smart {
            store: RecordStore::new(&sys, SearchConfig::default()),
            tolerances: Tolerances::new(0.0, 0.0, TestKind::Amounts),
        };
        let smart = run(&column, &field, smart, false);
        for (a, b) in conventional.field.bf.iter().zip(smart.field.bf.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in conventional.field.bs.iter().zip(smart.field.bs.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for cell in 0..field.ncells() {
            let a = &conventional.field.states[cell].n;
            let b = &smart.field.states[cell].n;
            for i in 0..a.len() {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
        let store = smart.store.unwrap();
        assert_eq!(store.stats().learned, 80);
        assert_eq!(store.stats().predicted, 0);
    }

    #[test]
    fn every_cell_is_counted_once_per_step() {
        let (sys, _, column, field) = dissolution_column(5);
        let out = run(&column, &field, smart_solver(&sys, 1e-2), false);
        assert_eq!(out.steps.len(), 5);
        for stats in &out.steps {
            assert_eq!(stats.learned + stats.predicted, 8);
        }
        let store = out.store.unwrap();
        assert_eq!(store.stats().log.len(), 40);
    }

    #[test]
    fn a_closed_reactive_column_conserves_mass() {
        let (sys, model) = presets::mineral_saturation();
        let totals: Vec<DVector<f64>> = (0..6)
            .map(|c| {
                let s = if c < 3 { 1.2 } else { 0.3 };
                DVector::from_vec(vec![55.508, s])
            })
            .collect();
        let field = column_field(&sys, &model, 300.0, 1e5, &totals);
        let column = Column {
            system: &sys,
            model: &model,
            grid: Grid1D::new(6, 1.0),
            params: TransportParams::new(0.0, 5.0e-4, 40.0, 50),
            boundary: Boundary::Closed,
            options: opts(),
        };
        let start = field.total_elements();
        let out = run(&column, &field, CellSolver::Conventional, false);
        let end = out.field.total_elements();
        for e in 0..start.len() {
            assert_relative_eq!(end[e], start[e], max_relative = 1e-10);
        }
        // the solid redistributes: the undersaturated half gains dissolved S
        assert!(out.field.bf[(1, 5)] > 0.3);
    }

    #[test]
    fn parallel_conventional_runs_match_sequential_bitwise() {
        let (_, _, column, field) = dissolution_column(6);
        let sequential = run(&column, &field, CellSolver::Conventional, false);
        let parallel = run(&column, &field, CellSolver::Conventional, true);
        for (a, b) in sequential.field.bf.iter().zip(parallel.field.bf.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for cell in 0..field.ncells() {
            let a = &sequential.field.states[cell].n;
            let b = &parallel.field.states[cell].n;
            for i in 0..a.len() {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
    }

    #[test]
    fn parallel_smart_runs_stay_within_the_acceptance_band() {
        let (sys, _, column, field) = dissolution_column(12);
        let reference = run(&column, &field, CellSolver::Conventional, false);
        let parallel = run(&column, &field, smart_solver(&sys, 1e-3), true);
        for cell in 0..field.ncells() {
            let a = &reference.field.states[cell].n;
            let b = &parallel.field.states[cell].n;
            for i in 0..a.len() {
                assert!(
                    (a[i] - b[i]).abs() <= 2e-2 * a[i].abs().max(1e-3),
                    "cell {cell} species {i}: {} vs {}",
                    a[i],
                    b[i]
                );
            }
        }
        let store = parallel.store.unwrap();
        let stats = store.stats();
        assert_eq!(stats.learned + stats.predicted, 96);
    }

    #[test]
    fn bench_mode_times_a_conventional_replay() {
        let (sys, _, column, field) = dissolution_column(4);
        let run_cfg = RunConfig { bench: true, ..RunConfig::default() };
        let out = run_simulation(&column, field.clone(), smart_solver(&sys, 1e-2), &run_cfg, |_, _| {})
            .unwrap();
        for stats in &out.steps {
            let replay = stats.seconds_conventional.expect("bench mode replays every step");
            assert!(replay > 0.0);
        }
    }

    #[test]
    fn snapshots_capture_the_requested_steps() {
        let (_, _, column, field) = dissolution_column(6);
        let run_cfg = RunConfig { snapshot_steps: vec![0, 3, 6], ..RunConfig::default() };
        let out = run_simulation(&column, field, CellSolver::Conventional, &run_cfg, |_, _| {})
            .unwrap();
        let steps: Vec<usize> = out.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 3, 6]);
        assert_relative_eq!(out.snapshots[1].time, 150.0);
        assert_eq!(out.snapshots[2].field.bf, out.field.bf);
    }

    #[test]
    fn profile_units_report_molality_and_volume_fraction() {
        let (sys, model) = presets::mineral_saturation();
        let grid = Grid1D::new(4, 2.0);
        let b = DVector::from_vec(vec![55.508, 1.2]);
        let sol = equilibrate(&sys, &model, 300.0, 1e5, &b, None, &opts()).unwrap();
        let header = profile_header(&sys);
        assert_eq!(header, vec!["kg_W(l)", "m_S(aq)", "vol_S(s)"]);
        let values = profile_values(&sys, &grid, &sol.state);
        let n = &sol.state.n;
        assert_relative_eq!(values[0], n[0] * WATER_MOLAR_MASS);
        assert_relative_eq!(values[1], n[1] / (n[0] * WATER_MOLAR_MASS));
        assert_relative_eq!(values[2], n[2] * 2.3e-5 / grid.cell_volume());
    }
}

