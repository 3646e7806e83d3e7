//! Chemical potentials and their derivatives: standard potentials (constant
//! or linear in T and P), activity models per phase, and the composed
//! mu = mu0 + RT ln a with analytic dT/dP/dn blocks.
//!
//! The aqueous model uses molalities for solutes. The solvent activity is the
//! ideal-dilute osmotic form ln a_w = -sum(n_s)/n_w (plus a matching
//! Debye-Huckel excess), chosen so that the Gibbs-Duhem identity
//! sum_j n_j d(ln a_j)/dn_i = 0 holds exactly. That identity is what makes
//! mu the gradient of the total Gibbs energy and d(mu)/dn its symmetric
//! Hessian, which the equilibrium solver and its oracle tests rely on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chemsys::{ChemicalState, ChemicalSystem, PhaseKind};

/// Universal gas constant, J/(mol K).
pub const R: f64 = 8.314462618;
/// Molar mass of water, kg/mol.
pub const WATER_MOLAR_MASS: f64 = 0.018015;
/// Standard pressure for the ideal-gas reference, Pa.
pub const STANDARD_PRESSURE: f64 = 1.0e5;
/// Amount floor keeping logarithms finite when a species amount is zero.
/// The equilibrium path keeps iterates strictly positive; this is a safety
/// net for direct property evaluations at boundary states.
pub const AMOUNT_FLOOR: f64 = 1e-50;

pub fn rt(t: f64) -> f64 {
    R * t
}

#[derive(Debug, Error)]
pub enum ThermoError {
    #[error("standard-potential model has {got} parameter sets, system has {expected} species")]
    WrongParameterCount { expected: usize, got: usize },
    #[error("activity model lists {got} phases, system has {expected}")]
    WrongPhaseCount { expected: usize, got: usize },
    #[error("phase {phase:?} ({kind:?}) cannot use activity model {model:?}")]
    IncompatibleActivityModel {
        phase: String,
        kind: &'static str,
        model: &'static str,
    },
    #[error("aqueous phase {phase:?} has zero solvent but nonzero solutes")]
    ZeroSolvent { phase: String },
    #[error("reaction {reaction} is not element-balanced (||A nu^T||_inf = {imbalance:.3e})")]
    UnbalancedReaction { reaction: usize, imbalance: f64 },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-species standard-potential parameters:
/// mu0(T,P) = mu0 + dmu0_dt (T - t_ref) + dmu0_dp (P - p_ref).
#[derive(Debug, Clone, Copy)]
pub struct StdPotential {
    pub mu0: f64,
    pub dmu0_dt: f64,
    pub dmu0_dp: f64,
}

impl StdPotential {
    pub fn constant(mu0: f64) -> Self {
        StdPotential {
            mu0,
            dmu0_dt: 0.0,
            dmu0_dp: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StandardPotentialModel {
    pub t_ref: f64,
    pub p_ref: f64,
    pub entries: Vec<StdPotential>,
}

impl StandardPotentialModel {
    pub fn new(t_ref: f64, p_ref: f64, entries: Vec<StdPotential>) -> Self {
        StandardPotentialModel {
            t_ref,
            p_ref,
            entries,
        }
    }

    /// (mu0, dmu0_dT, dmu0_dP) at the given conditions.
    pub fn evaluate(&self, t: f64, p: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.entries.len();
        let mut mu0 = DVector::zeros(n);
        let mut dt = DVector::zeros(n);
        let mut dp = DVector::zeros(n);
        for (i, e) in self.entries.iter().enumerate() {
            mu0[i] = e.mu0 + e.dmu0_dt * (t - self.t_ref) + e.dmu0_dp * (p - self.p_ref);
            dt[i] = e.dmu0_dt;
            dp[i] = e.dmu0_dp;
        }
        (mu0, dt, dp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseActivity {
    IdealAqueous,
    DebyeHuckelAqueous,
    IdealGas,
    PurePhase,
}

impl PhaseActivity {
    fn name(self) -> &'static str {
        match self {
            PhaseActivity::IdealAqueous => "ideal-aqueous",
            PhaseActivity::DebyeHuckelAqueous => "debye-huckel-aqueous",
            PhaseActivity::IdealGas => "ideal-gas",
            PhaseActivity::PurePhase => "pure-phase",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActivityModel {
    pub per_phase: Vec<PhaseActivity>,
    /// Debye-Huckel constant, kg^1/2 mol^-1/2.
    pub a_dh: f64,
}

/// Default Debye-Huckel constant (a standard near-25C value).
pub const A_DH_DEFAULT: f64 = 0.51;

/// ln-activity vector and its derivative blocks.
#[derive(Debug, Clone)]
pub struct ActivityProperties {
    pub ln_a: DVector<f64>,
    pub dlna_dt: DVector<f64>,
    pub dlna_dp: DVector<f64>,
    pub dlna_dn: DMatrix<f64>,
}

/// Everything the solvers need at a state: standard potentials, activities,
/// chemical potentials and the dT/dP/dn derivative blocks.
#[derive(Debug, Clone)]
pub struct ChemicalProperties {
    pub mu0: DVector<f64>,
    pub ln_a: DVector<f64>,
    pub mu: DVector<f64>,
    pub dmu_dt: DVector<f64>,
    pub dmu_dp: DVector<f64>,
    pub dmu_dn: DMatrix<f64>,
    pub dlna_dt: DVector<f64>,
    pub dlna_dp: DVector<f64>,
    pub dlna_dn: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ThermoModel {
    pub potentials: StandardPotentialModel,
    pub activity: ActivityModel,
}

impl ThermoModel {
    /// Validates parameter counts and the phase-kind/activity-model pairing
    /// (minerals are always pure-phase).
    pub fn new(
        system: &ChemicalSystem,
        potentials: StandardPotentialModel,
        activity: ActivityModel,
    ) -> Result<ThermoModel, ThermoError> {
        if potentials.entries.len() != system.n_species() {
            return Err(ThermoError::WrongParameterCount {
                expected: system.n_species(),
                got: potentials.entries.len(),
            });
        }
        if activity.per_phase.len() != system.phases().len() {
            return Err(ThermoError::WrongPhaseCount {
                expected: system.phases().len(),
                got: activity.per_phase.len(),
            });
        }
        for (phase, &model) in system.phases().iter().zip(&activity.per_phase) {
            let ok = match phase.kind {
                PhaseKind::Aqueous => matches!(
                    model,
                    PhaseActivity::IdealAqueous | PhaseActivity::DebyeHuckelAqueous
                ),
                PhaseKind::Gaseous => model == PhaseActivity::IdealGas,
                PhaseKind::Mineral => model == PhaseActivity::PurePhase,
            };
            if !ok {
                return Err(ThermoError::IncompatibleActivityModel {
                    phase: phase.name.clone(),
                    kind: match phase.kind {
                        PhaseKind::Aqueous => "aqueous",
                        PhaseKind::Gaseous => "gaseous",
                        PhaseKind::Mineral => "mineral",
                    },
                    model: model.name(),
                });
            }
        }
        Ok(ThermoModel {
            potentials,
            activity,
        })
    }

    pub fn standard_potentials(&self, t: f64, p: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        self.potentials.evaluate(t, p)
    }

    /// ln-activities and derivatives at a state. Amounts at or below
    /// [`AMOUNT_FLOOR`] are treated as frozen: their logs use the floor and
    /// their derivative columns are zero.
    pub fn activities(
        &self,
        system: &ChemicalSystem,
        state: &ChemicalState,
    ) -> Result<ActivityProperties, ThermoError> {
        let nsp = system.n_species();
        if state.n.len() != nsp {
            return Err(ThermoError::DimensionMismatch {
                expected: nsp,
                got: state.n.len(),
            });
        }
        let mut props = ActivityProperties {
            ln_a: DVector::zeros(nsp),
            dlna_dt: DVector::zeros(nsp),
            dlna_dp: DVector::zeros(nsp),
            dlna_dn: DMatrix::zeros(nsp, nsp),
        };
        let charges = system.charges();
        for (pi, phase) in system.phases().iter().enumerate() {
            match self.activity.per_phase[pi] {
                PhaseActivity::PurePhase => {}
                PhaseActivity::IdealGas => {
                    gas_block(&phase.species_indices, state, &mut props);
                }
                PhaseActivity::IdealAqueous => {
                    aqueous_block(phase, state, None, &charges, &mut props)?;
                }
                PhaseActivity::DebyeHuckelAqueous => {
                    aqueous_block(
                        phase,
                        state,
                        Some(self.activity.a_dh),
                        &charges,
                        &mut props,
                    )?;
                }
            }
        }
        Ok(props)
    }

    /// mu = mu0 + RT ln a with all derivative blocks assembled by chain rule.
    pub fn properties(
        &self,
        system: &ChemicalSystem,
        state: &ChemicalState,
    ) -> Result<ChemicalProperties, ThermoError> {
        let (mu0, dmu0_dt, dmu0_dp) = self.potentials.evaluate(state.t, state.p);
        let act = self.activities(system, state)?;
        let rt = R * state.t;
        let mu = &mu0 + &act.ln_a * rt;
        let dmu_dt = &dmu0_dt + &act.ln_a * R + &act.dlna_dt * rt;
        let dmu_dp = &dmu0_dp + &act.dlna_dp * rt;
        let dmu_dn = &act.dlna_dn * rt;
        Ok(ChemicalProperties {
            mu0,
            ln_a: act.ln_a,
            mu,
            dmu_dt,
            dmu_dp,
            dmu_dn,
            dlna_dt: act.dlna_dt,
            dlna_dp: act.dlna_dp,
            dlna_dn: act.dlna_dn,
        })
    }

    /// ln K_m = -(sum_i nu_mi mu0_i) / RT for element-balanced reactions
    /// (rows of `nu` must lie in the null space of the formula matrix).
    pub fn reaction_ln_k(
        &self,
        system: &ChemicalSystem,
        nu: &DMatrix<f64>,
        t: f64,
        p: f64,
    ) -> Result<DVector<f64>, ThermoError> {
        if nu.ncols() != system.n_species() {
            return Err(ThermoError::DimensionMismatch {
                expected: system.n_species(),
                got: nu.ncols(),
            });
        }
        let a = system.formula_matrix();
        let (mu0, _, _) = self.potentials.evaluate(t, p);
        let mut ln_k = DVector::zeros(nu.nrows());
        for m in 0..nu.nrows() {
            let row = nu.row(m).transpose();
            let imbalance = (a * &row).amax();
            if imbalance > 1e-10 * (1.0 + row.amax()) {
                return Err(ThermoError::UnbalancedReaction {
                    reaction: m,
                    imbalance,
                });
            }
            ln_k[m] = -row.dot(&mu0) / (R * t);
        }
        Ok(ln_k)
    }
}

fn gas_block(indices: &[usize], state: &ChemicalState, props: &mut ActivityProperties) {
    let ln_pp = (state.p / STANDARD_PRESSURE).ln();
    let floored: Vec<f64> = indices.iter().map(|&i| state.n[i].max(AMOUNT_FLOOR)).collect();
    let active: Vec<bool> = indices.iter().map(|&i| state.n[i] > AMOUNT_FLOOR).collect();
    let total: f64 = floored.iter().sum();
    for (k, &i) in indices.iter().enumerate() {
        props.ln_a[i] = floored[k].ln() - total.ln() + ln_pp;
        props.dlna_dp[i] = 1.0 / state.p;
        if active[k] {
            props.dlna_dn[(i, i)] += 1.0 / floored[k];
        }
    }
    // shared -1/total term: d(ln x_i)/dn_j = delta_ij/n_i - 1/total
    let neg_inv_total = -1.0 / total;
    for &i in indices {
        for (kj, &j) in indices.iter().enumerate() {
            if active[kj] {
                props.dlna_dn[(i, j)] += neg_inv_total;
            }
        }
    }
}

fn aqueous_block(
    phase: &crate::chemsys::Phase,
    state: &ChemicalState,
    dh: Option<f64>,
    charges: &DVector<f64>,
    props: &mut ActivityProperties,
) -> Result<(), ThermoError> {
    let w = phase
        .solvent_index
        .expect("aqueous phase has a solvent (validated at build)");
    let solutes: Vec<usize> = phase
        .species_indices
        .iter()
        .copied()
        .filter(|&i| i != w)
        .collect();
    let raw_solute_sum: f64 = solutes.iter().map(|&s| state.n[s]).sum();
    if state.n[w] <= AMOUNT_FLOOR && raw_solute_sum > AMOUNT_FLOOR {
        return Err(ThermoError::ZeroSolvent {
            phase: phase.name.clone(),
        });
    }
    let nw = state.n[w].max(AMOUNT_FLOOR);
    let w_active = state.n[w] > AMOUNT_FLOOR;
    let kg_water = nw * WATER_MOLAR_MASS;
    let ln_kg = kg_water.ln();

    let mut solute_sum = 0.0;
    for &s in &solutes {
        let ns = state.n[s].max(AMOUNT_FLOOR);
        solute_sum += ns;
        props.ln_a[s] = ns.ln() - ln_kg;
        if state.n[s] > AMOUNT_FLOOR {
            props.dlna_dn[(s, s)] += 1.0 / ns;
        }
    }
    props.ln_a[w] = -solute_sum / nw;

    let neg_inv_nw = -1.0 / nw;
    for &s in &solutes {
        if w_active {
            props.dlna_dn[(s, w)] += neg_inv_nw;
        }
        if state.n[s] > AMOUNT_FLOOR {
            props.dlna_dn[(w, s)] += neg_inv_nw;
        }
    }
    if w_active {
        props.dlna_dn[(w, w)] += solute_sum / (nw * nw);
    }

    let Some(a_dh) = dh else {
        return Ok(());
    };
    // ionic strength I = 1/2 sum m_s z_s^2 over solutes
    let mut ionic = 0.0;
    for &s in &solutes {
        let z = charges[s];
        ionic += 0.5 * state.n[s].max(AMOUNT_FLOOR) / kg_water * z * z;
    }
    if ionic <= 0.0 {
        return Ok(());
    }
    let sq = ionic.sqrt();
    let one = 1.0 + sq;
    // solute: ln gamma_s = -A z^2 sqrt(I)/(1+sqrt(I));
    // solvent excess: M_w * 2A * ((1+s) - 1/(1+s) - 2 ln(1+s)), the unique
    // form closing the Gibbs-Duhem identity against the solute term.
    let f = sq / one;
    let fp = 1.0 / (2.0 * sq * one * one); // d/dI of f
    let g = 2.0 * a_dh * (one - 1.0 / one - 2.0 * one.ln());
    for &s in &solutes {
        let z2 = charges[s] * charges[s];
        props.ln_a[s] += -a_dh * z2 * f;
    }
    props.ln_a[w] += WATER_MOLAR_MASS * g;

    for (ks, &s) in solutes.iter().enumerate() {
        let zs2 = charges[s] * charges[s];
        for &t in &solutes[ks..] {
            let zt2 = charges[t] * charges[t];
            let val = -a_dh * fp * zs2 * zt2 / (2.0 * kg_water);
            if state.n[t] > AMOUNT_FLOOR {
                props.dlna_dn[(s, t)] += val;
            }
            if t != s && state.n[s] > AMOUNT_FLOOR {
                props.dlna_dn[(t, s)] += val;
            }
        }
        // solute-solvent coupling, identical value both ways
        let val = a_dh * fp * ionic * zs2 / nw;
        if w_active {
            props.dlna_dn[(s, w)] += val;
        }
        if state.n[s] > AMOUNT_FLOOR {
            props.dlna_dn[(w, s)] += val;
        }
    }
    if w_active {
        props.dlna_dn[(w, w)] += -2.0 * WATER_MOLAR_MASS * a_dh * ionic * ionic * fp / nw;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn close(fd: f64, an: f64, rel: f64, abs: f64) -> bool {
        (fd - an).abs() <= rel * an.abs().max(fd.abs()) + abs
    }

    #[test]
    fn constant_potential_has_zero_derivatives() {
        let model = StandardPotentialModel::new(298.15, 1e5, vec![StdPotential::constant(-100000.0)]);
        let (mu0, dt, dp) = model.evaluate(350.0, 2e6);
        assert_eq!(mu0[0], -100000.0);
        assert_eq!(dt[0], 0.0);
        assert_eq!(dp[0], 0.0);
    }

    #[test]
    fn linear_potential_read_off() {
        let model = StandardPotentialModel::new(
            300.0,
            1e5,
            vec![StdPotential {
                mu0: 0.0,
                dmu0_dt: 10.0,
                dmu0_dp: 0.0,
            }],
        );
        let (mu0, dt, _) = model.evaluate(302.0, 1e5);
        assert_eq!(mu0[0], 20.0);
        assert_eq!(dt[0], 10.0);
    }

    #[test]
    fn standard_potentials_match_finite_differences() {
        let model = StandardPotentialModel::new(
            310.0,
            2e6,
            vec![StdPotential {
                mu0: -5.0e4,
                dmu0_dt: 33.0,
                dmu0_dp: 1.9e-5,
            }],
        );
        let (t, p) = (355.0, 8.6e6);
        let ht = 1e-3 * t;
        let hp = 1e-3 * p;
        let fd_t = (model.evaluate(t + ht, p).0[0] - model.evaluate(t - ht, p).0[0]) / (2.0 * ht);
        let fd_p = (model.evaluate(t, p + hp).0[0] - model.evaluate(t, p - hp).0[0]) / (2.0 * hp);
        let (_, dt, dp) = model.evaluate(t, p);
        assert!(close(fd_t, dt[0], 1e-6, 1e-12));
        assert!(close(fd_p, dp[0], 1e-6, 1e-12));
    }

    #[test]
    fn pure_mineral_activity_is_zero() {
        let (sys, model) = presets::mineral_saturation();
        let m = sys.species_index("S(s)").unwrap();
        let state = ChemicalState {
            t: 300.0,
            p: 1e5,
            n: DVector::from_vec(vec![55.0, 0.1, 3.0]),
        };
        let act = model.activities(&sys, &state).unwrap();
        assert_eq!(act.ln_a[m], 0.0);
        assert_eq!(act.dlna_dt[m], 0.0);
        assert_eq!(act.dlna_dp[m], 0.0);
        assert!(act.dlna_dn.row(m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn molality_read_off() {
        let (sys, model) = presets::mineral_saturation();
        let s = sys.species_index("S(aq)").unwrap();
        let state = ChemicalState {
            t: 300.0,
            p: 1e5,
            n: DVector::from_vec(vec![55.508, 0.1, 0.0]),
        };
        let act = model.activities(&sys, &state).unwrap();
        let exact = (0.1 / (55.508 * WATER_MOLAR_MASS)).ln();
        assert_eq!(act.ln_a[s], exact);
        assert!((act.ln_a[s] - 0.1_f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn single_gas_at_standard_pressure() {
        let (sys, model) = presets::isomer_pair(0.0);
        let state = ChemicalState {
            t: 400.0,
            p: STANDARD_PRESSURE,
            n: DVector::from_vec(vec![2.0, 0.0]),
        };
        // lone active species: mole fraction 1 at P = P0 gives ln a ~ 0 up to
        // the floored partner's 1e-50 share
        let act = model.activities(&sys, &state).unwrap();
        assert!(act.ln_a[0].abs() < 1e-40);
    }

    #[test]
    fn mu_composition_identity() {
        let (sys, model) = presets::saline_water();
        let state = presets::saline_water_state();
        let props = model.properties(&sys, &state).unwrap();
        let rt = R * state.t;
        for i in 0..sys.n_species() {
            assert_relative_eq!(
                props.mu[i],
                props.mu0[i] + rt * props.ln_a[i],
                epsilon = 1e-9,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn doubling_gas_amounts_leaves_mu_unchanged() {
        let (sys, model) = presets::isomer_pair(500.0);
        let s1 = ChemicalState {
            t: 350.0,
            p: 7e5,
            n: DVector::from_vec(vec![0.4, 1.1]),
        };
        let s2 = ChemicalState {
            t: 350.0,
            p: 7e5,
            n: &s1.n * 2.0,
        };
        let p1 = model.properties(&sys, &s1).unwrap();
        let p2 = model.properties(&sys, &s2).unwrap();
        assert_relative_eq!(p1.mu, p2.mu, max_relative = 1e-14);
    }

    #[test]
    fn hessian_is_symmetric_bitwise() {
        // strictly interior amounts: frozen species get zeroed derivative
        // columns, so exact symmetry is only promised away from the floor
        let (sys, model) = presets::saline_water();
        let state = ChemicalState {
            t: 320.0,
            p: 1.0e6,
            n: DVector::from_vec(vec![55.508, 0.012, 3.1e-9, 0.62, 0.632, 2.4e-4]),
        };
        let props = model.properties(&sys, &state).unwrap();
        let n = sys.n_species();
        for i in 0..n {
            for j in (i + 1)..n {
                assert_eq!(
                    props.dmu_dn[(i, j)].to_bits(),
                    props.dmu_dn[(j, i)].to_bits(),
                    "asymmetry at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn gibbs_duhem_identity_holds() {
        let (sys, model) = presets::saline_water();
        let state = presets::saline_water_state();
        let act = model.activities(&sys, &state).unwrap();
        // sum_j n_j d(ln a_j)/dn_i = 0 for every i
        let r = act.dlna_dn.transpose() * &state.n;
        for i in 0..sys.n_species() {
            let scale: f64 = (0..sys.n_species())
                .map(|j| (act.dlna_dn[(j, i)] * state.n[j]).abs())
                .sum();
            assert!(
                r[i].abs() <= 1e-12 * scale.max(1e-30),
                "gibbs-duhem residual {} at column {i} (scale {scale})",
                r[i]
            );
        }
    }

    #[test]
    fn zero_solvent_with_solutes_is_an_error() {
        let (sys, model) = presets::mineral_saturation();
        let state = ChemicalState {
            t: 300.0,
            p: 1e5,
            n: DVector::from_vec(vec![0.0, 0.5, 0.0]),
        };
        assert!(matches!(
            model.activities(&sys, &state),
            Err(ThermoError::ZeroSolvent { .. })
        ));
    }

    #[test]
    fn reaction_ln_k_cases() {
        let (sys, model) = presets::isomer_pair(R * 300.0 * 2.0_f64.ln());
        // zero row
        let nu = DMatrix::<f64>::zeros(1, 2);
        let k = model.reaction_ln_k(&sys, &nu, 300.0, 1e5).unwrap();
        assert_eq!(k[0], 0.0);
        // A -> B with mu0_B - mu0_A = RT ln 2 gives ln K = -ln 2
        let nu = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let k = model.reaction_ln_k(&sys, &nu, 300.0, 1e5).unwrap();
        assert_relative_eq!(k[0], -(2.0_f64.ln()), epsilon = 1e-12);
        // unbalanced row
        let nu = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(matches!(
            model.reaction_ln_k(&sys, &nu, 300.0, 1e5),
            Err(ThermoError::UnbalancedReaction { .. })
        ));
    }

    /// Central finite differences of mu against the analytic blocks.
    fn check_fd(sys: &ChemicalSystem, model: &ThermoModel, state: &ChemicalState, rel: f64) {
        let props = model.properties(sys, state).unwrap();
        let rt_scale = R * state.t;
        let eval = |t: f64, p: f64, n: &DVector<f64>| {
            model
                .properties(
                    sys,
                    &ChemicalState {
                        t,
                        p,
                        n: n.clone(),
                    },
                )
                .unwrap()
                .mu
        };
        let ht = 1e-6 * state.t;
        let fd_t = (eval(state.t + ht, state.p, &state.n) - eval(state.t - ht, state.p, &state.n))
            / (2.0 * ht);
        let hp = 1e-6 * state.p;
        let fd_p = (eval(state.t, state.p + hp, &state.n) - eval(state.t, state.p - hp, &state.n))
            / (2.0 * hp);
        for i in 0..sys.n_species() {
            assert!(
                close(fd_t[i], props.dmu_dt[i], rel, 1e-6 * rt_scale / state.t),
                "dmu_dt[{i}]: fd {} vs {}",
                fd_t[i],
                props.dmu_dt[i]
            );
            assert!(
                close(fd_p[i], props.dmu_dp[i], rel, 1e-9),
                "dmu_dp[{i}]: fd {} vs {}",
                fd_p[i],
                props.dmu_dp[i]
            );
        }
        for j in 0..sys.n_species() {
            let h = 1e-6 * state.n[j].max(1e-3);
            let mut np = state.n.clone();
            let mut nm = state.n.clone();
            np[j] += h;
            nm[j] -= h;
            if nm[j] <= 0.0 {
                continue;
            }
            let fd = (eval(state.t, state.p, &np) - eval(state.t, state.p, &nm)) / (2.0 * h);
            for i in 0..sys.n_species() {
                assert!(
                    close(fd[i], props.dmu_dn[(i, j)], rel, 1e-5 * rt_scale),
                    "dmu_dn[({i},{j})]: fd {} vs {}",
                    fd[i],
                    props.dmu_dn[(i, j)]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (sys, model) = presets::dissolved_gas_water();
        let state = ChemicalState {
            t: 330.0,
            p: 6.0e6,
            n: DVector::from_vec(vec![55.0, 0.3, 0.05, 0.8, 0.2, 1.5]),
        };
        check_fd(&sys, &model, &state, 1e-5);
        let (sys, model) = presets::saline_water();
        check_fd(&sys, &model, &presets::saline_water_state(), 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fd_consistency_randomized(
            t in 285.0_f64..375.0,
            p in 2e5_f64..1.5e7,
            nw in 20.0_f64..80.0,
            n1 in 0.01_f64..2.0,
            n2 in 0.01_f64..2.0,
            n3 in 0.01_f64..2.0,
            n4 in 0.01_f64..2.0,
            n5 in 0.01_f64..2.0,
        ) {
            let (sys, model) = presets::saline_water();
            let state = ChemicalState {
                t,
                p,
                n: DVector::from_vec(vec![nw, n1, n2, n3, n3, n4]),
            };
            check_fd(&sys, &model, &state, 1e-4);
            let (sys, model) = presets::dissolved_gas_water();
            let state = ChemicalState {
                t,
                p,
                n: DVector::from_vec(vec![nw, n1, n2, n3, n4, n5]),
            };
            check_fd(&sys, &model, &state, 1e-4);
        }

        #[test]
        fn activities_are_intensive(
            lambda in 0.2_f64..5.0,
            nw in 20.0_f64..80.0,
            n1 in 0.01_f64..2.0,
            n2 in 0.01_f64..2.0,
        ) {
            // aqueous solutes: molality scales out
            let (sys, model) = presets::saline_water();
            let n = DVector::from_vec(vec![nw, n1, n1, n2, n2, 0.1 * n1]);
            let s1 = ChemicalState { t: 320.0, p: 1e6, n: n.clone() };
            let s2 = ChemicalState { t: 320.0, p: 1e6, n: &n * lambda };
            let a1 = model.activities(&sys, &s1).unwrap();
            let a2 = model.activities(&sys, &s2).unwrap();
            for i in 0..sys.n_species() {
                prop_assert!((a1.ln_a[i] - a2.ln_a[i]).abs() < 1e-10);
            }
            // single-phase ideal gas at fixed P: mole fractions scale out
            let (sys, model) = presets::isomer_pair(250.0);
            let n = DVector::from_vec(vec![n1, n2]);
            let g1 = ChemicalState { t: 320.0, p: 1e6, n: n.clone() };
            let g2 = ChemicalState { t: 320.0, p: 1e6, n: &n * lambda };
            let a1 = model.activities(&sys, &g1).unwrap();
            let a2 = model.activities(&sys, &g2).unwrap();
            for i in 0..sys.n_species() {
                prop_assert!((a1.ln_a[i] - a2.ln_a[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn hessian_symmetry_randomized(
            nw in 10.0_f64..90.0,
            n1 in 1e-6_f64..3.0,
            n2 in 1e-6_f64..3.0,
            n3 in 1e-6_f64..3.0,
        ) {
            let (sys, model) = presets::saline_water();
            let state = ChemicalState {
                t: 333.15,
                p: 1e7,
                n: DVector::from_vec(vec![nw, n1, n2, n3, n2, n1]),
            };
            let props = model.properties(&sys, &state).unwrap();
            let nsp = sys.n_species();
            for i in 0..nsp {
                for j in (i + 1)..nsp {
                    prop_assert_eq!(
                        props.dmu_dn[(i, j)].to_bits(),
                        props.dmu_dn[(j, i)].to_bits()
                    );
                }
            }
        }
    }
}
