//! Ready-made small systems for examples and tests: gas isomer sets, aqueous
//! dimerization, mineral saturation, a salty water with charged solutes, and
//! a ten-species H/O/C demo with aqueous and gas phases.
//!
//! Each constructor returns a validated `(ChemicalSystem, ThermoModel)` pair.
//! Standard potentials are plain numbers in J/mol chosen to give sensible
//! equilibria; a few carry T and P slopes so derivative paths get exercised.

use nalgebra::DVector;

use crate::chemsys::{ChemicalState, ChemicalSystem, PhaseDef, SpeciesDef};
use crate::thermo::{
    ActivityModel, PhaseActivity, StandardPotentialModel, StdPotential, ThermoModel, A_DH_DEFAULT,
};

fn model(
    system: &ChemicalSystem,
    t_ref: f64,
    p_ref: f64,
    entries: Vec<StdPotential>,
    per_phase: Vec<PhaseActivity>,
) -> ThermoModel {
    ThermoModel::new(
        system,
        StandardPotentialModel::new(t_ref, p_ref, entries),
        ActivityModel {
            per_phase,
            a_dh: A_DH_DEFAULT,
        },
    )
    .expect("preset model is consistent with its system")
}

/// Two gas-phase isomers A and B of one element X, ideal mixing.
/// `delta_mu0` is mu0(B) - mu0(A); at P = 1 bar the equilibrium mole-fraction
/// ratio is x_B/x_A = exp(-delta_mu0 / RT).
pub fn isomer_pair(delta_mu0: f64) -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["X"],
        vec![
            SpeciesDef::new("A(g)", "gas", &[("X", 1.0)]),
            SpeciesDef::new("B(g)", "gas", &[("X", 1.0)]),
        ],
        vec![PhaseDef::gaseous("gas")],
    )
    .unwrap();
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            StdPotential::constant(0.0),
            StdPotential::constant(delta_mu0),
        ],
        vec![PhaseActivity::IdealGas],
    );
    (system, m)
}

/// Three gas-phase isomers of one element, two reaction degrees of freedom.
pub fn isomer_triple(delta_b: f64, delta_c: f64) -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["X"],
        vec![
            SpeciesDef::new("A(g)", "gas", &[("X", 1.0)]),
            SpeciesDef::new("B(g)", "gas", &[("X", 1.0)]),
            SpeciesDef::new("C(g)", "gas", &[("X", 1.0)]),
        ],
        vec![PhaseDef::gaseous("gas")],
    )
    .unwrap();
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            StdPotential::constant(0.0),
            StdPotential::constant(delta_b),
            StdPotential::constant(delta_c),
        ],
        vec![PhaseActivity::IdealGas],
    );
    (system, m)
}

/// Solvent W plus a solute X that dimerizes to X2; one reaction extent.
/// Dimerization constant K = 4 at 300 K.
pub fn aqueous_dimer() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["W", "X"],
        vec![
            SpeciesDef::new("W(l)", "aq", &[("W", 1.0)]),
            SpeciesDef::new("X(aq)", "aq", &[("X", 1.0)]),
            SpeciesDef::new("X2(aq)", "aq", &[("X", 2.0)]),
        ],
        vec![PhaseDef::aqueous("aq", "W(l)")],
    )
    .unwrap();
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            StdPotential::constant(-237140.0),
            StdPotential::constant(-50000.0),
            StdPotential::constant(-100000.0 - crate::thermo::R * 300.0 * 4.0_f64.ln()),
        ],
        vec![PhaseActivity::IdealAqueous],
    );
    (system, m)
}

/// Solvent, dissolved S, and solid S. Saturation molality 0.5 at 300 K.
pub fn mineral_saturation() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["W", "S"],
        vec![
            SpeciesDef::new("W(l)", "aq", &[("W", 1.0)]),
            SpeciesDef::new("S(aq)", "aq", &[("S", 1.0)]),
            SpeciesDef::new("S(s)", "solid", &[("S", 1.0)]).with_molar_volume(2.3e-5),
        ],
        vec![PhaseDef::aqueous("aq", "W(l)"), PhaseDef::mineral("solid")],
    )
    .unwrap();
    // mu0(solid) - mu0(aq) = RT ln(0.5) at 300 K
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            StdPotential::constant(-237140.0),
            StdPotential::constant(-20000.0),
            StdPotential::constant(-20000.0 + crate::thermo::R * 300.0 * 0.5_f64.ln()),
        ],
        vec![PhaseActivity::IdealAqueous, PhaseActivity::PurePhase],
    );
    (system, m)
}

/// Solvent plus two dissolving minerals; two reaction extents.
/// Saturation molalities at 300 K: S 0.3, T 0.05.
pub fn two_mineral_exchange() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["W", "S", "T"],
        vec![
            SpeciesDef::new("W(l)", "aq", &[("W", 1.0)]),
            SpeciesDef::new("S(aq)", "aq", &[("S", 1.0)]),
            SpeciesDef::new("T(aq)", "aq", &[("T", 1.0)]),
            SpeciesDef::new("S(s)", "s-solid", &[("S", 1.0)]).with_molar_volume(2.3e-5),
            SpeciesDef::new("T(s)", "t-solid", &[("T", 1.0)]).with_molar_volume(4.1e-5),
        ],
        vec![
            PhaseDef::aqueous("aq", "W(l)"),
            PhaseDef::mineral("s-solid"),
            PhaseDef::mineral("t-solid"),
        ],
    )
    .unwrap();
    let t0 = 300.0;
    let r = crate::thermo::R;
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            StdPotential::constant(-237140.0),
            StdPotential::constant(-50000.0),
            StdPotential::constant(-70000.0),
            StdPotential::constant(-50000.0 + r * t0 * 0.3_f64.ln()),
            StdPotential::constant(-70000.0 + r * t0 * 0.05_f64.ln()),
        ],
        vec![
            PhaseActivity::IdealAqueous,
            PhaseActivity::PurePhase,
            PhaseActivity::PurePhase,
        ],
    );
    (system, m)
}

/// Water with a monomer/dimer solute pair, water vapor and hydrogen in a gas
/// phase, and a solid form of the solute. Potentials carry T and P slopes.
pub fn dissolved_gas_water() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["H", "O", "X"],
        vec![
            SpeciesDef::new("H2O(l)", "aq", &[("H", 2.0), ("O", 1.0)])
                .with_molar_volume(1.8069e-5),
            SpeciesDef::new("X(aq)", "aq", &[("X", 1.0)]),
            SpeciesDef::new("X2(aq)", "aq", &[("X", 2.0)]),
            SpeciesDef::new("H2O(g)", "gas", &[("H", 2.0), ("O", 1.0)]),
            SpeciesDef::new("H2(g)", "gas", &[("H", 2.0)]),
            SpeciesDef::new("X(s)", "solid", &[("X", 1.0)]).with_molar_volume(2.3e-5),
        ],
        vec![
            PhaseDef::aqueous("aq", "H2O(l)"),
            PhaseDef::gaseous("gas"),
            PhaseDef::mineral("solid"),
        ],
    )
    .unwrap();
    let sp = |mu0: f64, dt: f64, dp: f64| StdPotential {
        mu0,
        dmu0_dt: dt,
        dmu0_dp: dp,
    };
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            sp(-237140.0, -70.0, 1.81e-5),
            sp(-50000.0, 10.0, 2.0e-6),
            sp(-110000.0, 15.0, 3.0e-6),
            sp(-228600.0, -189.0, 0.0),
            sp(0.0, -131.0, 0.0),
            sp(-55000.0, 5.0, 1.0e-6),
        ],
        vec![
            PhaseActivity::IdealAqueous,
            PhaseActivity::IdealGas,
            PhaseActivity::PurePhase,
        ],
    );
    (system, m)
}

/// NaCl brine with water self-ionization and dissolved oxygen, Debye-Huckel
/// activity corrections. Exercises every charged-solute derivative path.
pub fn saline_water() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["H", "O", "Na", "Cl", "Z"],
        vec![
            SpeciesDef::new("H2O(l)", "aq", &[("H", 2.0), ("O", 1.0)])
                .with_molar_volume(1.8069e-5),
            SpeciesDef::new("H+", "aq", &[("H", 1.0), ("Z", 1.0)]),
            SpeciesDef::new("OH-", "aq", &[("H", 1.0), ("O", 1.0), ("Z", -1.0)]),
            SpeciesDef::new("Na+", "aq", &[("Na", 1.0), ("Z", 1.0)]),
            SpeciesDef::new("Cl-", "aq", &[("Cl", 1.0), ("Z", -1.0)]),
            SpeciesDef::new("O2(aq)", "aq", &[("O", 2.0)]),
        ],
        vec![PhaseDef::aqueous("aq", "H2O(l)")],
    )
    .unwrap();
    let sp = |mu0: f64, dt: f64, dp: f64| StdPotential {
        mu0,
        dmu0_dt: dt,
        dmu0_dp: dp,
    };
    let m = model(
        &system,
        298.15,
        1e5,
        vec![
            sp(-237140.0, -70.0, 1.81e-5),
            sp(0.0, 0.0, 0.0),
            sp(-157220.0, 10.9, -5.0e-6),
            sp(-261880.0, -59.0, -1.2e-6),
            sp(-131290.0, -56.6, 1.7e-5),
            sp(16500.0, -31.0, 3.1e-5),
        ],
        vec![PhaseActivity::DebyeHuckelAqueous],
    );
    (system, m)
}

/// A representative acidified brine for [`saline_water`]: NaCl with an HCl
/// excess, so the pH sits far from the neutral knee and hydroxide is a
/// genuinely absent species.
pub fn saline_water_state() -> ChemicalState {
    ChemicalState {
        t: 320.0,
        p: 1.0e6,
        n: DVector::from_vec(vec![55.508, 0.012, 0.0, 0.62, 0.632, 2.4e-4]),
    }
}

/// Ten-species H/O/C system: eight aqueous species (water solvent, the
/// carbonate ladder, dissolved O2 and H2) plus CO2 and H2O vapor.
/// Potentials are referenced at 333.15 K and 100 bar.
pub fn ten_species_demo() -> (ChemicalSystem, ThermoModel) {
    let system = ChemicalSystem::build(
        &["H", "O", "C", "Z"],
        vec![
            SpeciesDef::new("H2O(l)", "aq", &[("H", 2.0), ("O", 1.0)])
                .with_molar_volume(1.8069e-5),
            SpeciesDef::new("H+", "aq", &[("H", 1.0), ("Z", 1.0)]),
            SpeciesDef::new("OH-", "aq", &[("H", 1.0), ("O", 1.0), ("Z", -1.0)]),
            SpeciesDef::new("CO2(aq)", "aq", &[("C", 1.0), ("O", 2.0)]),
            SpeciesDef::new("HCO3-", "aq", &[("H", 1.0), ("C", 1.0), ("O", 3.0), ("Z", -1.0)]),
            SpeciesDef::new("CO3-2", "aq", &[("C", 1.0), ("O", 3.0), ("Z", -2.0)]),
            SpeciesDef::new("O2(aq)", "aq", &[("O", 2.0)]),
            SpeciesDef::new("H2(aq)", "aq", &[("H", 2.0)]),
            SpeciesDef::new("CO2(g)", "gas", &[("C", 1.0), ("O", 2.0)]),
            SpeciesDef::new("H2O(g)", "gas", &[("H", 2.0), ("O", 1.0)]),
        ],
        vec![PhaseDef::aqueous("aq", "H2O(l)"), PhaseDef::gaseous("gas")],
    )
    .unwrap();
    let m = model(
        &system,
        333.15,
        1e7,
        vec![
            StdPotential::constant(-239000.0),
            StdPotential::constant(0.0),
            StdPotential::constant(-155899.0),
            StdPotential::constant(-389000.0),
            StdPotential::constant(-588012.0),
            StdPotential::constant(-523406.0),
            StdPotential::constant(16500.0),
            StdPotential::constant(17600.0),
            StdPotential::constant(-400133.0),
            StdPotential::constant(-234527.0),
        ],
        vec![PhaseActivity::DebyeHuckelAqueous, PhaseActivity::IdealGas],
    );
    (system, m)
}
