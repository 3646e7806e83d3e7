//! Chemical system description: elements, species, phases, and the formula
//! matrix tying them together.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Label of the electrical-charge pseudo-element. When present it is always
/// stored as the last element row so row/column ordering is stable in output.
pub const CHARGE_ELEMENT: &str = "Z";

#[derive(Debug, Error)]
pub enum ChemSysError {
    #[error("system has no species")]
    EmptySystem,
    #[error("duplicate element label {0:?}")]
    DuplicateElement(String),
    #[error("duplicate species name {0:?}")]
    DuplicateSpecies(String),
    #[error("species {species:?} references undeclared element {element:?}")]
    UnknownElement { species: String, element: String },
    #[error("species {species:?} references undeclared phase {phase:?}")]
    UnknownPhase { species: String, phase: String },
    #[error("phase {0:?} contains no species")]
    EmptyPhase(String),
    #[error("mineral phase {phase:?} must contain exactly one species, found {count}")]
    MineralSpeciesCount { phase: String, count: usize },
    #[error("aqueous phase {phase:?} has no designated solvent")]
    MissingSolvent { phase: String },
    #[error("solvent {solvent:?} is not a species of phase {phase:?}")]
    SolventNotInPhase { phase: String, solvent: String },
    #[error(
        "formula matrix has rank {rank}, expected {elements}; dependent element rows: {dependent:?}"
    )]
    RankDeficient {
        rank: usize,
        elements: usize,
        dependent: Vec<String>,
    },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Aqueous,
    Gaseous,
    Mineral,
}

/// Build-time species description. The formula maps element labels to
/// stoichiometric coefficients; the charge coefficient may be negative.
#[derive(Debug, Clone)]
pub struct SpeciesDef {
    pub name: String,
    pub phase: String,
    pub formula: Vec<(String, f64)>,
    pub molar_volume: f64,
}

impl SpeciesDef {
    pub fn new(name: &str, phase: &str, formula: &[(&str, f64)]) -> Self {
        SpeciesDef {
            name: name.to_string(),
            phase: phase.to_string(),
            formula: formula.iter().map(|(e, c)| (e.to_string(), *c)).collect(),
            molar_volume: 0.0,
        }
    }

    pub fn with_molar_volume(mut self, molar_volume: f64) -> Self {
        self.molar_volume = molar_volume;
        self
    }
}

/// Build-time phase description. Aqueous phases must designate their solvent.
#[derive(Debug, Clone)]
pub struct PhaseDef {
    pub name: String,
    pub kind: PhaseKind,
    pub solvent: Option<String>,
}

impl PhaseDef {
    pub fn aqueous(name: &str, solvent: &str) -> Self {
        PhaseDef {
            name: name.to_string(),
            kind: PhaseKind::Aqueous,
            solvent: Some(solvent.to_string()),
        }
    }

    pub fn gaseous(name: &str) -> Self {
        PhaseDef {
            name: name.to_string(),
            kind: PhaseKind::Gaseous,
            solvent: None,
        }
    }

    pub fn mineral(name: &str) -> Self {
        PhaseDef {
            name: name.to_string(),
            kind: PhaseKind::Mineral,
            solvent: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Species {
    pub name: String,
    /// Sparse formula: (element index, coefficient).
    pub formula: Vec<(usize, f64)>,
    pub phase_index: usize,
    /// m^3/mol; only used to report mineral volume fractions, 0 for fluids.
    pub molar_volume: f64,
}

#[derive(Debug, Clone)]
pub struct Phase {
    pub name: String,
    pub kind: PhaseKind,
    pub species_indices: Vec<usize>,
    pub solvent_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ElementSet {
    names: Vec<String>,
}

impl ElementSet {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }
}

/// The (T, P, n) triplet describing a chemical state.
#[derive(Debug, Clone)]
pub struct ChemicalState {
    pub t: f64,
    pub p: f64,
    pub n: DVector<f64>,
}

/// Immutable system description. `formula_matrix` is E x N with A[(j, i)]
/// equal to species i's coefficient for element j; full rank is verified at
/// build time.
#[derive(Debug, Clone)]
pub struct ChemicalSystem {
    elements: ElementSet,
    species: Vec<Species>,
    phases: Vec<Phase>,
    formula_matrix: DMatrix<f64>,
    fluid_columns: Vec<usize>,
    solid_columns: Vec<usize>,
    is_fluid: Vec<bool>,
}

impl ChemicalSystem {
    /// Assembles and validates a system. Species order is preserved as the
    /// column order of the formula matrix; the charge pseudo-element is moved
    /// to the last row.
    pub fn build<S: AsRef<str>>(
        elements: &[S],
        species_defs: Vec<SpeciesDef>,
        phase_defs: Vec<PhaseDef>,
    ) -> Result<ChemicalSystem, ChemSysError> {
        if species_defs.is_empty() {
            return Err(ChemSysError::EmptySystem);
        }

        let mut names: Vec<String> = Vec::with_capacity(elements.len());
        for label in elements {
            let label = label.as_ref().to_string();
            if names.contains(&label) {
                return Err(ChemSysError::DuplicateElement(label));
            }
            names.push(label);
        }
        if let Some(pos) = names.iter().position(|n| n == CHARGE_ELEMENT) {
            let z = names.remove(pos);
            names.push(z);
        }
        let elements = ElementSet { names };

        let mut phases: Vec<Phase> = phase_defs
            .iter()
            .map(|def| Phase {
                name: def.name.clone(),
                kind: def.kind,
                species_indices: Vec::new(),
                solvent_index: None,
            })
            .collect();

        let mut species: Vec<Species> = Vec::with_capacity(species_defs.len());
        for (i, def) in species_defs.iter().enumerate() {
            if species_defs[..i].iter().any(|other| other.name == def.name) {
                return Err(ChemSysError::DuplicateSpecies(def.name.clone()));
            }
            let phase_index = phases
                .iter()
                .position(|p| p.name == def.phase)
                .ok_or_else(|| ChemSysError::UnknownPhase {
                    species: def.name.clone(),
                    phase: def.phase.clone(),
                })?;
            let mut formula = Vec::with_capacity(def.formula.len());
            for (label, coeff) in &def.formula {
                let j = elements.index_of(label).ok_or_else(|| ChemSysError::UnknownElement {
                    species: def.name.clone(),
                    element: label.clone(),
                })?;
                formula.push((j, *coeff));
            }
            phases[phase_index].species_indices.push(i);
            species.push(Species {
                name: def.name.clone(),
                formula,
                phase_index,
                molar_volume: def.molar_volume,
            });
        }

        for (phase, def) in phases.iter_mut().zip(&phase_defs) {
            if phase.species_indices.is_empty() {
                return Err(ChemSysError::EmptyPhase(phase.name.clone()));
            }
            match phase.kind {
                PhaseKind::Mineral => {
                    if phase.species_indices.len() != 1 {
                        return Err(ChemSysError::MineralSpeciesCount {
                            phase: phase.name.clone(),
                            count: phase.species_indices.len(),
                        });
                    }
                }
                PhaseKind::Aqueous => {
                    let solvent = def.solvent.clone().ok_or_else(|| ChemSysError::MissingSolvent {
                        phase: phase.name.clone(),
                    })?;
                    let idx = phase
                        .species_indices
                        .iter()
                        .copied()
                        .find(|&i| species[i].name == solvent)
                        .ok_or_else(|| ChemSysError::SolventNotInPhase {
                            phase: phase.name.clone(),
                            solvent: solvent.clone(),
                        })?;
                    phase.solvent_index = Some(idx);
                }
                PhaseKind::Gaseous => {}
            }
        }

        let n = species.len();
        let e = elements.len();
        let mut a = DMatrix::<f64>::zeros(e, n);
        for (i, sp) in species.iter().enumerate() {
            for &(j, coeff) in &sp.formula {
                a[(j, i)] = coeff;
            }
        }

        check_full_rank(&a, &elements)?;

        let mut fluid_columns = Vec::new();
        let mut solid_columns = Vec::new();
        let mut is_fluid = vec![false; n];
        for (i, sp) in species.iter().enumerate() {
            match phases[sp.phase_index].kind {
                PhaseKind::Aqueous | PhaseKind::Gaseous => {
                    fluid_columns.push(i);
                    is_fluid[i] = true;
                }
                PhaseKind::Mineral => solid_columns.push(i),
            }
        }

        Ok(ChemicalSystem {
            elements,
            species,
            phases,
            formula_matrix: a,
            fluid_columns,
            solid_columns,
            is_fluid,
        })
    }

    pub fn elements(&self) -> &ElementSet {
        &self.elements
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn formula_matrix(&self) -> &DMatrix<f64> {
        &self.formula_matrix
    }

    pub fn fluid_columns(&self) -> &[usize] {
        &self.fluid_columns
    }

    pub fn solid_columns(&self) -> &[usize] {
        &self.solid_columns
    }

    pub fn is_fluid(&self, species_index: usize) -> bool {
        self.is_fluid[species_index]
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// FNV-1a hash over element names, species names, and phase structure.
    /// Two systems share a signature exactly when stored records (which are
    /// plain vectors in this system's index order) are interchangeable.
    pub fn signature(&self) -> u64 {
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &byte in bytes {
                h ^= u64::from(byte);
                h = h.wrapping_mul(PRIME);
            }
        };
        for name in self.elements.names() {
            eat(name.as_bytes());
            eat(b"\0");
        }
        eat(b"|");
        for sp in &self.species {
            eat(sp.name.as_bytes());
            eat(&(sp.phase_index as u64).to_le_bytes());
            for &(j, c) in &sp.formula {
                eat(&(j as u64).to_le_bytes());
                eat(&c.to_le_bytes());
            }
            eat(b"\0");
        }
        h
    }

    /// Charge numbers of all species (the charge row of the formula matrix,
    /// or zeros when no charge element is declared).
    pub fn charges(&self) -> DVector<f64> {
        match self.charge_row() {
            Some(j) => self.formula_matrix.row(j).transpose(),
            None => DVector::zeros(self.n_species()),
        }
    }

    /// Index of the charge row of the formula matrix, if one is declared.
    pub fn charge_row(&self) -> Option<usize> {
        self.elements.index_of(CHARGE_ELEMENT)
    }

    /// b = A n. Computed as b_fluid + b_solid with the fixed accumulation
    /// order of `partition_amounts`, so the two agree bitwise.
    pub fn element_amounts(&self, n: &DVector<f64>) -> Result<DVector<f64>, ChemSysError> {
        let (bf, bs) = self.partition_amounts(n)?;
        Ok(bf + bs)
    }

    /// Element amounts split by partition: b_fluid = A^f n^f, b_solid = A^s n^s.
    /// Columns are accumulated in species order.
    pub fn partition_amounts(
        &self,
        n: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), ChemSysError> {
        if n.len() != self.n_species() {
            return Err(ChemSysError::DimensionMismatch {
                expected: self.n_species(),
                got: n.len(),
            });
        }
        let e = self.n_elements();
        let mut bf = DVector::zeros(e);
        let mut bs = DVector::zeros(e);
        for (i, sp) in self.species.iter().enumerate() {
            let acc = if self.is_fluid[i] { &mut bf } else { &mut bs };
            for &(j, coeff) in &sp.formula {
                acc[j] += coeff * n[i];
            }
        }
        Ok((bf, bs))
    }
}

/// Full-rank check with relative tolerance 1e-10 * ||A||. Dependent rows are
/// identified from near-null eigenvectors of A A^T and reported by name.
fn check_full_rank(a: &DMatrix<f64>, elements: &ElementSet) -> Result<(), ChemSysError> {
    let e = a.nrows();
    let gram = a * a.transpose();
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    // sigma_i <= 1e-10 * sigma_max corresponds to lambda_i <= 1e-20 * lambda_max
    let tol = 1e-20 * lambda_max;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();
    if rank == e {
        return Ok(());
    }
    let mut dependent = Vec::new();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        let umax = u.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
        for (j, &uj) in u.iter().enumerate() {
            if uj.abs() > 0.1 * umax && !dependent.contains(&elements.names()[j]) {
                dependent.push(elements.names()[j].clone());
            }
        }
    }
    dependent.sort();
    Err(ChemSysError::RankDeficient {
        rank,
        elements: e,
        dependent,
    })
}
