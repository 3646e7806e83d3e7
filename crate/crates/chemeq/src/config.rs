//! TOML problem definitions: the chemical system, its thermodynamic
//! parameters, fluid and rock recipes, and the column setup they assemble
//! into.
//!
//! Recipes list compounds by formula ("NaCl", "CaMg(CO3)2") with mole
//! amounts; a recipe's element totals are what the solver sees. Column
//! recipes are scaled so the equilibrated fluid fills the pore volume of a
//! cell: the scale anchors to the solvent's equilibrium amount and molar
//! volume, so no water-density constant is involved.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;
use thiserror::Error;

use crate::chemsys::{
    ChemSysError, ChemicalSystem, PhaseDef, PhaseKind, SpeciesDef, CHARGE_ELEMENT,
};
use crate::equilibrium::{equilibrate, EquilibriumError, EquilibriumOptions};
use crate::smart::{SearchBackend, SearchConfig, TestKind, Tolerances};
use crate::thermo::{
    ActivityModel, PhaseActivity, StandardPotentialModel, StdPotential, ThermoError, ThermoModel,
    A_DH_DEFAULT,
};
use crate::transport::{equilibrated_fluid, uniform_column, CellField, Grid1D, TransportParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("building the chemical system: {0}")]
    System(#[from] ChemSysError),
    #[error("building the thermodynamic model: {0}")]
    Thermo(#[from] ThermoError),
    #[error("equilibrating the {what}: {source}")]
    Setup {
        what: &'static str,
        #[source]
        source: EquilibriumError,
    },
}

fn invalid(message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(message.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub title: Option<String>,
    /// Element order; it fixes the layout of every total vector. The
    /// charge pseudo-element is appended automatically when any species
    /// carries a charge.
    pub elements: Vec<String>,
    pub conditions: Conditions,
    pub reference: Reference,
    pub phases: Vec<PhaseEntry>,
    pub species: Vec<SpeciesEntry>,
    #[serde(default)]
    pub recipes: BTreeMap<String, Recipe>,
    #[serde(default)]
    pub rock: Option<Rock>,
    #[serde(default)]
    pub grid: Option<GridEntry>,
    #[serde(default)]
    pub transport: Option<TransportEntry>,
    #[serde(default)]
    pub solver: SolverEntry,
    #[serde(default)]
    pub output: Output,
}

/// Compound formula -> mole amount.
pub type Recipe = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditions {
    /// K
    pub temperature: f64,
    /// Pa
    pub pressure: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    /// K; standard potentials are given at this temperature.
    pub temperature: f64,
    /// Pa
    pub pressure: f64,
    #[serde(default)]
    pub debye_huckel_a: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKindEntry {
    Aqueous,
    Gaseous,
    Mineral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AqueousActivity {
    Ideal,
    DebyeHuckel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseEntry {
    pub name: String,
    pub kind: PhaseKindEntry,
    /// Solvent species name; aqueous phases only.
    #[serde(default)]
    pub solvent: Option<String>,
    /// Aqueous phases only; defaults to debye-huckel.
    #[serde(default)]
    pub activity: Option<AqueousActivity>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesEntry {
    pub name: String,
    pub phase: String,
    /// Element -> coefficient; the charge is given separately.
    pub formula: BTreeMap<String, f64>,
    #[serde(default)]
    pub charge: f64,
    /// J/mol at the reference conditions.
    pub mu0: f64,
    /// J/(mol K)
    #[serde(default)]
    pub dmu0_dt: f64,
    /// m^3/mol (the pressure slope of mu0)
    #[serde(default)]
    pub dmu0_dp: f64,
    /// m^3/mol; required for minerals that should report volume fractions
    /// and for the solvent of a column config.
    #[serde(default)]
    pub molar_volume: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rock {
    /// Fluid volume fraction of a cell.
    pub porosity: f64,
    #[serde(default)]
    pub minerals: Vec<RockMineral>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockMineral {
    pub species: String,
    /// Volume fraction of the solid part.
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub cells: usize,
    /// m
    pub length: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportEntry {
    /// m/s
    pub velocity: f64,
    /// m^2/s
    pub diffusion: f64,
    /// s
    pub dt: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    Conventional,
    Smart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestEntry {
    ChemicalPotential,
    Activity,
    Amounts,
}

impl TestEntry {
    pub fn kind(self) -> TestKind {
        match self {
            TestEntry::ChemicalPotential => TestKind::ChemicalPotential,
            TestEntry::Activity => TestKind::Activity,
            TestEntry::Amounts => TestKind::Amounts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchEntry {
    Naive,
    KdTree,
}

impl SearchEntry {
    pub fn backend(self) -> SearchBackend {
        match self {
            SearchEntry::Naive => SearchBackend::Naive,
            SearchEntry::KdTree => SearchBackend::KdTree,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverEntry {
    pub mode: SolverMode,
    pub test: TestEntry,
    /// Relative acceptance tolerance.
    pub eps_rel: f64,
    /// Absolute acceptance tolerance; in units of RT for the
    /// chemical-potential test, dimensionless for the others.
    pub eps_abs: f64,
    pub search: SearchEntry,
    #[serde(default = "default_rebuild_interval")]
    pub rebuild_interval: usize,
    /// Input-space weights, length 2 + n_elements (T, P, then elements).
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub parallel: bool,
}

fn default_rebuild_interval() -> usize {
    16
}

impl Default for SolverEntry {
    fn default() -> SolverEntry {
        SolverEntry {
            mode: SolverMode::Smart,
            test: TestEntry::ChemicalPotential,
            eps_rel: 0.1,
            eps_abs: 0.1,
            search: SearchEntry::KdTree,
            rebuild_interval: default_rebuild_interval(),
            weights: None,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    /// Simulated seconds at which to write a profile; each must land on a
    /// whole step.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

/// A single equilibrium problem, for the point solver.
pub struct PointProblem {
    pub system: ChemicalSystem,
    pub model: ThermoModel,
    pub temperature: f64,
    pub pressure: f64,
    pub b: DVector<f64>,
}

/// Everything a column run needs, fully equilibrated and scaled.
pub struct ColumnProblem {
    pub system: ChemicalSystem,
    pub model: ThermoModel,
    pub grid: Grid1D,
    pub params: TransportParams,
    /// Fluid element totals entering at the inlet, per-cell units.
    pub inlet: DVector<f64>,
    pub initial: CellField,
    pub temperature: f64,
    pub pressure: f64,
    pub snapshot_steps: Vec<usize>,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub mode: SolverMode,
    pub tolerances: Tolerances,
    pub search: SearchConfig,
    pub parallel: bool,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Config = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.elements.is_empty() {
            return Err(invalid("at least one element is required"));
        }
        if self.elements.iter().any(|e| e == CHARGE_ELEMENT) {
            return Err(invalid(format!(
                "element list must not contain {CHARGE_ELEMENT:?}; charges are taken from the species"
            )));
        }
        if !(self.conditions.temperature > 0.0) || !(self.conditions.pressure > 0.0) {
            return Err(invalid("conditions require positive temperature and pressure"));
        }
        if !(self.reference.temperature > 0.0) || !(self.reference.pressure > 0.0) {
            return Err(invalid("reference requires positive temperature and pressure"));
        }
        for sp in &self.species {
            for element in sp.formula.keys() {
                if !self.elements.contains(element) {
                    return Err(invalid(format!(
                        "species {:?} uses element {element:?} which is not listed",
                        sp.name
                    )));
                }
            }
            if sp.molar_volume < 0.0 {
                return Err(invalid(format!("species {:?}: negative molar volume", sp.name)));
            }
        }
        for phase in &self.phases {
            if phase.kind != PhaseKindEntry::Aqueous {
                if phase.solvent.is_some() {
                    return Err(invalid(format!(
                        "phase {:?} is not aqueous and takes no solvent",
                        phase.name
                    )));
                }
                if phase.activity.is_some() {
                    return Err(invalid(format!(
                        "phase {:?} is not aqueous and takes no activity choice",
                        phase.name
                    )));
                }
            }
        }
        for (name, recipe) in &self.recipes {
            for (compound, amount) in recipe {
                if !(*amount >= 0.0) || !amount.is_finite() {
                    return Err(invalid(format!(
                        "recipe {name:?}: {compound:?} needs a nonnegative amount"
                    )));
                }
                for (element, _) in parse_formula(compound)? {
                    if !self.elements.contains(&element) {
                        return Err(invalid(format!(
                            "recipe {name:?}: {compound:?} uses element {element:?} which is not listed"
                        )));
                    }
                }
            }
        }
        if let Some(rock) = &self.rock {
            if !(rock.porosity > 0.0 && rock.porosity <= 1.0) {
                return Err(invalid("rock porosity must be in (0, 1]"));
            }
            let total: f64 = rock.minerals.iter().map(|m| m.fraction).sum();
            if rock.minerals.iter().any(|m| !(m.fraction > 0.0)) || total > 1.0 + 1e-9 {
                return Err(invalid("rock mineral fractions must be positive and sum to at most 1"));
            }
        }
        let s = &self.solver;
        if !(s.eps_rel >= 0.0) || !(s.eps_abs >= 0.0) {
            return Err(invalid("solver tolerances must be nonnegative"));
        }
        if s.rebuild_interval == 0 {
            return Err(invalid("solver rebuild_interval must be at least 1"));
        }
        if let Some(w) = &s.weights {
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("solver weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    fn charged(&self) -> bool {
        self.species.iter().any(|s| s.charge != 0.0)
    }

    pub fn system(&self) -> Result<ChemicalSystem, ConfigError> {
        let mut elements = self.elements.clone();
        if self.charged() {
            elements.push(CHARGE_ELEMENT.to_string());
        }
        let species = self
            .species
            .iter()
            .map(|s| {
                let mut formula: Vec<(&str, f64)> =
                    s.formula.iter().map(|(el, &c)| (el.as_str(), c)).collect();
                if s.charge != 0.0 {
                    formula.push((CHARGE_ELEMENT, s.charge));
                }
                SpeciesDef::new(&s.name, &s.phase, &formula).with_molar_volume(s.molar_volume)
            })
            .collect();
        let phases = self
            .phases
            .iter()
            .map(|p| match p.kind {
                PhaseKindEntry::Aqueous => {
                    let solvent = p.solvent.as_deref().ok_or_else(|| {
                        invalid(format!("aqueous phase {:?} needs a solvent", p.name))
                    })?;
                    Ok(PhaseDef::aqueous(&p.name, solvent))
                }
                PhaseKindEntry::Gaseous => Ok(PhaseDef::gaseous(&p.name)),
                PhaseKindEntry::Mineral => Ok(PhaseDef::mineral(&p.name)),
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(ChemicalSystem::build(&elements, species, phases)?)
    }

    pub fn model(&self, system: &ChemicalSystem) -> Result<ThermoModel, ConfigError> {
        let entries = self
            .species
            .iter()
            .map(|s| StdPotential { mu0: s.mu0, dmu0_dt: s.dmu0_dt, dmu0_dp: s.dmu0_dp })
            .collect();
        let potentials = StandardPotentialModel::new(
            self.reference.temperature,
            self.reference.pressure,
            entries,
        );
        let per_phase = self
            .phases
            .iter()
            .map(|p| match p.kind {
                PhaseKindEntry::Aqueous => match p.activity.unwrap_or(AqueousActivity::DebyeHuckel)
                {
                    AqueousActivity::Ideal => PhaseActivity::IdealAqueous,
                    AqueousActivity::DebyeHuckel => PhaseActivity::DebyeHuckelAqueous,
                },
                PhaseKindEntry::Gaseous => PhaseActivity::IdealGas,
                PhaseKindEntry::Mineral => PhaseActivity::PurePhase,
            })
            .collect();
        let activity = ActivityModel {
            per_phase,
            a_dh: self.reference.debye_huckel_a.unwrap_or(A_DH_DEFAULT),
        };
        Ok(ThermoModel::new(system, potentials, activity)?)
    }

    /// Element totals of a recipe, in the system's element order.
    pub fn recipe_totals(
        &self,
        system: &ChemicalSystem,
        name: &str,
    ) -> Result<DVector<f64>, ConfigError> {
        let recipe = self
            .recipes
            .get(name)
            .ok_or_else(|| invalid(format!("a [recipes.{name}] table is required")))?;
        let mut b = DVector::zeros(system.n_elements());
        for (compound, amount) in recipe {
            for (element, coeff) in parse_formula(compound)? {
                let row = system
                    .elements()
                    .index_of(&element)
                    .ok_or_else(|| invalid(format!("recipe element {element:?} missing")))?;
                b[row] += amount * coeff;
            }
        }
        Ok(b)
    }

    pub fn solver_settings(&self, system: &ChemicalSystem) -> Result<SolverSettings, ConfigError> {
        let s = &self.solver;
        let weights = match &s.weights {
            None => None,
            Some(w) => {
                let expected = 2 + system.n_elements();
                if w.len() != expected {
                    return Err(invalid(format!(
                        "solver weights need length {expected} (T, P, then elements), got {}",
                        w.len()
                    )));
                }
                Some(DVector::from_vec(w.clone()))
            }
        };
        Ok(SolverSettings {
            mode: s.mode,
            tolerances: Tolerances::new(s.eps_rel, s.eps_abs, s.test.kind()),
            search: SearchConfig {
                backend: s.search.backend(),
                weights,
                rebuild_interval: s.rebuild_interval,
            },
            parallel: s.parallel,
        })
    }

    /// The single-state problem solved by the point mode; takes its
    /// composition from `[recipes.feed]`.
    pub fn point_problem(&self) -> Result<PointProblem, ConfigError> {
        let system = self.system()?;
        let model = self.model(&system)?;
        let b = self.recipe_totals(&system, "feed")?;
        Ok(PointProblem {
            system,
            model,
            temperature: self.conditions.temperature,
            pressure: self.conditions.pressure,
            b,
        })
    }

    /// Assembles the full column: recipes are equilibrated and scaled so
    /// the fluid fills each cell's pore volume, rock minerals are added
    /// from their volume fractions, and the inlet is the fluid partition
    /// of the equilibrated injection (a mineral precipitating in the
    /// injection fluid would stay at the inlet rather than flow in).
    pub fn column_problem(&self) -> Result<ColumnProblem, ConfigError> {
        let system = self.system()?;
        let model = self.model(&system)?;
        let solver = self.solver_settings(&system)?;
        let grid_entry = self
            .grid
            .ok_or_else(|| invalid("a [grid] table is required for a column"))?;
        if grid_entry.cells < 2 || !(grid_entry.length > 0.0) {
            return Err(invalid("[grid] needs at least 2 cells and a positive length"));
        }
        let grid = Grid1D::new(grid_entry.cells, grid_entry.length);
        let tr = self
            .transport
            .ok_or_else(|| invalid("a [transport] table is required for a column"))?;
        if !(tr.velocity >= 0.0) || !(tr.diffusion >= 0.0) || !(tr.dt > 0.0) {
            return Err(invalid(
                "[transport] needs nonnegative velocity and diffusion and a positive dt",
            ));
        }
        let params = TransportParams::new(tr.velocity, tr.diffusion, tr.dt, tr.steps);
        let rock = self
            .rock
            .as_ref()
            .ok_or_else(|| invalid("a [rock] table is required for a column"))?;

        let t = self.conditions.temperature;
        let p = self.conditions.pressure;
        let options = EquilibriumOptions::default();

        let solvent = self.column_solvent(&system)?;
        let v_solvent = system.species()[solvent].molar_volume;
        if !(v_solvent > 0.0) {
            return Err(invalid(
                "the solvent needs a positive molar_volume to scale recipes to the pore volume",
            ));
        }
        let pore_volume = rock.porosity * grid.cell_volume();
        let scaled = |what: &'static str, b: &DVector<f64>| -> Result<DVector<f64>, ConfigError> {
            let sol = equilibrate(&system, &model, t, p, b, None, &options)
                .map_err(|source| ConfigError::Setup { what, source })?;
            Ok(b * (pore_volume / (sol.state.n[solvent] * v_solvent)))
        };

        let b_injection = scaled("injection recipe", &self.recipe_totals(&system, "injection")?)?;
        let inlet = equilibrated_fluid(&system, &model, t, p, &b_injection, &options)
            .map_err(|source| ConfigError::Setup { what: "scaled injection", source })?;

        let mut b_cell = scaled("resident recipe", &self.recipe_totals(&system, "resident")?)?;
        for mineral in &rock.minerals {
            let index = system
                .species_index(&mineral.species)
                .ok_or_else(|| invalid(format!("rock mineral {:?} is not a species", mineral.species)))?;
            let sp = &system.species()[index];
            if system.phases()[sp.phase_index].kind != PhaseKind::Mineral {
                return Err(invalid(format!("rock entry {:?} is not a mineral", mineral.species)));
            }
            if !(sp.molar_volume > 0.0) {
                return Err(invalid(format!(
                    "rock mineral {:?} needs a positive molar_volume",
                    mineral.species
                )));
            }
            let amount = mineral.fraction * (1.0 - rock.porosity) * grid.cell_volume() / sp.molar_volume;
            for &(row, coeff) in &sp.formula {
                b_cell[row] += amount * coeff;
            }
        }
        let initial = uniform_column(&system, &model, t, p, &b_cell, grid.ncells(), &options)
            .map_err(|source| ConfigError::Setup { what: "resident column", source })?;

        let snapshot_steps = self.snapshot_steps(tr.dt, tr.steps)?;
        Ok(ColumnProblem {
            system,
            model,
            grid,
            params,
            inlet,
            initial,
            temperature: t,
            pressure: p,
            snapshot_steps,
            solver,
        })
    }

    fn column_solvent(&self, system: &ChemicalSystem) -> Result<usize, ConfigError> {
        let aqueous: Vec<&crate::chemsys::Phase> = system
            .phases()
            .iter()
            .filter(|ph| ph.kind == PhaseKind::Aqueous)
            .collect();
        match aqueous.as_slice() {
            [phase] => Ok(phase.solvent_index.expect("aqueous phase has a solvent")),
            [] => Err(invalid("a column needs an aqueous phase")),
            _ => Err(invalid("a column supports exactly one aqueous phase")),
        }
    }

    /// Maps requested snapshot times onto steps; each must land on a whole
    /// step within the run.
    pub fn snapshot_steps(&self, dt: f64, nsteps: usize) -> Result<Vec<usize>, ConfigError> {
        let mut steps = Vec::new();
        for &time in &self.output.snapshot_times {
            if !(time >= 0.0) || !time.is_finite() {
                return Err(invalid(format!("snapshot time {time} is not a nonnegative number")));
            }
            let step = (time / dt).round();
            if (time - step * dt).abs() > 1e-6 * dt.max(time) {
                return Err(invalid(format!(
                    "snapshot time {time} s is not a multiple of dt = {dt} s"
                )));
            }
            let step = step as usize;
            if step > nsteps {
                return Err(invalid(format!(
                    "snapshot time {time} s is beyond the end of the run"
                )));
            }
            steps.push(step);
        }
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

/// Parses a compound formula like "CaMg(CO3)2" into element coefficients.
/// Element symbols are an uppercase letter plus lowercase letters, counts
/// are optional integers, and parenthesized groups take a multiplier.
pub fn parse_formula(text: &str) -> Result<Vec<(String, f64)>, ConfigError> {
    let bad = |why: &str| invalid(format!("formula {text:?}: {why}"));
    if !text.is_ascii() || text.is_empty() {
        return Err(bad("must be nonempty ASCII"));
    }
    let bytes = text.as_bytes();
    let mut stack: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    let mut i = 0;
    let count = |i: &mut usize| -> f64 {
        let start = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        if *i == start {
            1.0
        } else {
            text[start..*i].parse().expect("digits parse")
        }
    };
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                stack.push(BTreeMap::new());
                i += 1;
            }
            b')' => {
                if stack.len() < 2 {
                    return Err(bad("unbalanced ')'"));
                }
                let group = stack.pop().expect("group exists");
                i += 1;
                let factor = count(&mut i);
                let top = stack.last_mut().expect("root exists");
                for (element, coeff) in group {
                    *top.entry(element).or_insert(0.0) += coeff * factor;
                }
            }
            c if c.is_ascii_uppercase() => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_lowercase() {
                    i += 1;
                }
                let symbol = text[start..i].to_string();
                let factor = count(&mut i);
                let top = stack.last_mut().expect("root exists");
                *top.entry(symbol).or_insert(0.0) += factor;
            }
            _ => return Err(bad("expected an element symbol, digits, or parentheses")),
        }
    }
    if stack.len() != 1 {
        return Err(bad("unbalanced '('"));
    }
    let root = stack.pop().expect("root exists");
    if root.is_empty() {
        return Err(bad("no elements"));
    }
    Ok(root.into_iter().collect())
}
