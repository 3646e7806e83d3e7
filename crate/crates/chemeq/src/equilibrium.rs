//! Gibbs-energy minimization by a primal-dual interior-point method.
//!
//! The first-order conditions solved here are, in RT-scaled form
//! (mu_hat = mu/RT, z_hat = z/RT):
//!
//! ```text
//!   mu_hat(n) - A^T y_hat - z_hat = 0      (stationarity)
//!   A n = b                                (element balance)
//!   n_i z_hat_i = 0,  n >= 0,  z_hat >= 0  (complementarity)
//! ```
//!
//! Iterations use a Mehrotra predictor-corrector step on the bordered system
//! `[[H_hat + diag(z_hat/n), -A^T], [A, 0]]` with separate primal/dual step
//! lengths, a fraction-to-boundary rule, and a residual-norm backtracking
//! safeguard. After the tolerances are met, a few damped Newton polish steps
//! push the complementarity products toward machine level so that stable and
//! unstable species separate sharply; the sensitivity system depends on that
//! separation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chemsys::{ChemicalState, ChemicalSystem};
use crate::linalg::{nnls, RefinedLu};
use crate::thermo::{ChemicalProperties, ThermoError, ThermoModel, R};

#[derive(Debug, Clone)]
pub struct EquilibriumOptions {
    /// Tolerance on the scaled dual residual and on max n_i z_hat_i.
    pub tol_kkt: f64,
    pub max_iterations: usize,
    /// Species with max(n_i/||n||, z_hat_i/max(1,||z_hat||)) below this are
    /// degenerate: neither clearly present nor clearly absent.
    pub eps_stability: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            tol_kkt: 1e-8,
            max_iterations: 200,
            eps_stability: 1e-12,
        }
    }
}

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("element amounts are not reachable by any nonnegative composition (residual {residual:.3e})")]
    InfeasibleElements { residual: f64 },
    #[error("no convergence after {iterations} iterations (dual {dual:.3e}, primal {primal:.3e}, complementarity {complementarity:.3e})")]
    MaxIterations {
        iterations: usize,
        dual: f64,
        primal: f64,
        complementarity: f64,
    },
    #[error("linear system is singular beyond repair at iteration {iteration}")]
    SingularSystem { iteration: usize },
    #[error("species {species:?} is degenerate: amount and slack are both numerically zero")]
    DegenerateSpecies { species: String },
    #[error("reaction {reaction} involves unstable species {species:?}")]
    UnstableReactant { reaction: usize, species: String },
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Converged state with multipliers and the property blocks evaluated there.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub state: ChemicalState,
    pub b: DVector<f64>,
    /// Element multipliers, J/mol.
    pub y: DVector<f64>,
    /// Species slacks mu_i - sum_j A_ji y_j, J/mol; zero for stable species.
    pub z: DVector<f64>,
    pub properties: ChemicalProperties,
    pub iterations: usize,
    pub dual_infeasibility: f64,
    pub primal_infeasibility: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KktResidual {
    /// ||mu/RT - A^T y/RT - z/RT||_inf
    pub dual: f64,
    /// ||A n - b||_inf
    pub primal: f64,
    /// max_i n_i z_i / RT
    pub complementarity: f64,
}

/// First-order derivatives of the equilibrium amounts with respect to
/// temperature, pressure, and each element total. Unstable species rows are
/// zero: their amounts stay pinned at the boundary under small perturbations.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub dn_dt: DVector<f64>,
    pub dn_dp: DVector<f64>,
    /// N x E; column j responds to a unit increase of element j.
    pub dn_db: DMatrix<f64>,
    pub stable: Vec<bool>,
}

const FRACTION_TO_BOUNDARY: f64 = 0.995;
const GUESS_FLOOR: f64 = 1e-12;
/// Warm starts floor amounts relative to the guess's own scale.
const WARM_REL_FLOOR: f64 = 1e-9;
/// Initial n_i z_i floor for warm starts.
const WARM_PRODUCT: f64 = 1e-9;
const NNLS_FLOOR: f64 = 1e-6;
const POLISH_TARGET: f64 = 1e-13;
const MAX_POLISH: usize = 8;
/// Floor on the centering target, relative to amax(n), while the
/// tolerances are unmet. The barrier is what keeps the bordered
/// factorization solvable; letting the products collapse ahead of
/// feasibility turns z/n into a condition bomb and freezes the dual
/// residual at the factorization noise.
const BARRIER_KEEP: f64 = 1e-13;
/// Species below this fraction of the largest amount get the exact scalar
/// treatment in `refine_trace_species`.
const TRACE_REL: f64 = 1e-7;

fn primal_tolerance(b_norm: f64) -> f64 {
    1e-12 * b_norm + 1e-14
}

/// Damped componentwise update keeping every coordinate strictly positive:
/// a coordinate shrinks by at most the fraction-to-boundary factor and grows
/// by at most ~9 log units per step. A collapsing trace species therefore
/// throttles only its own coordinate, never the whole step; the element
/// balance it perturbs is linear and gets restored exactly by the next
/// Newton iteration.
fn apply_clipped(x: &DVector<f64>, dx: &DVector<f64>, t: f64) -> DVector<f64> {
    const GROWTH_CAP: f64 = 1e4;
    const GROWTH_ABS: f64 = 1e-8;
    DVector::from_fn(x.len(), |i, _| {
        let lo = (1.0 - FRACTION_TO_BOUNDARY) * x[i];
        let hi = GROWTH_CAP * x[i] + GROWTH_ABS;
        (x[i] + t * dx[i]).clamp(lo, hi)
    })
}

/// Principal branch of the Lambert W function for x >= 0, by Halley's
/// iteration. Accurate to machine precision over the range used here.
fn lambert_w0(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mut w = if x > std::f64::consts::E {
        let lx = x.ln();
        lx - lx.ln()
    } else {
        let e = std::f64::consts::E;
        x * e / (1.0 + x * e)
    };
    for _ in 0..40 {
        let ew = w.exp();
        let f = w * ew - x;
        let step = f / (ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0));
        w -= step;
        if step.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    w
}

/// Amount solving `ln n + g = c/n`, i.e. n = exp(W(c e^g) - g). This is the
/// stationarity of one log-activity species against a frozen environment,
/// paired with the centered complementarity n z = c.
fn scalar_amount(g: f64, c: f64) -> f64 {
    if g > 500.0 {
        // far in the absent regime the log term is negligible: n ~ c/g
        return c / g;
    }
    let s = lambert_w0(c * g.exp());
    (s - g).clamp(-690.0, 690.0).exp()
}

/// Exact update for species far below the dominant amounts. The global
/// Newton step linearizes ln n and is therefore badly wrong for coordinates
/// that must move by many orders of magnitude; a trace species, however,
/// barely feeds back into the multipliers, so its stationarity plus the
/// centered complementarity n_i z_i = c reduce to scalar problems solved
/// here in closed form:
///
/// - a trace species in a phase with a dominant member sees a frozen
///   environment: `ln n + g = c/n` with g from the current state,
/// - a mineral's potential does not depend on its amount at all: z is the
///   slack and n = c/z,
/// - a collapsing multi-species gas phase couples through its total; with
///   per-species Boltzmann factors phi_i frozen, the total T solves
///   `sum_i n_i(T) = T` by bisection, each n_i(T) a scalar problem as above.
///
/// Returns true if any coordinate moved; the element-balance perturbation is
/// linear and the next global step restores it exactly.
fn refine_trace_species(
    system: &ChemicalSystem,
    props: &crate::thermo::ChemicalProperties,
    rt: f64,
    a: &DMatrix<f64>,
    y_hat: &DVector<f64>,
    c: f64,
    n: &mut DVector<f64>,
    z_hat: &mut DVector<f64>,
) -> bool {
    let n_max = n.amax();
    let threshold = TRACE_REL * n_max;
    let cap = 10.0 * threshold;
    let c = c.max(1e-300);
    let mut changed = false;
    // a solution above the cap means the species wants to grow out of the
    // trace regime; plain Newton handles growth fine, so leave it alone
    let mut set = |i: usize, n_new: f64, n: &mut DVector<f64>, z_hat: &mut DVector<f64>| {
        if n_new > 0.0 && n_new <= cap && (n_new - n[i]).abs() > 1e-14 * n[i] {
            n[i] = n_new;
            z_hat[i] = c / n_new;
            changed = true;
        }
    };
    for phase in system.phases() {
        let members = &phase.species_indices;
        let total: f64 = members.iter().map(|&i| n[i]).sum();
        let slack_of = |i: usize| props.mu[i] / rt - a.column(i).dot(y_hat);
        let all_trace = members.iter().all(|&i| n[i] <= threshold);
        let is_mixture = members.len() > 1;

        if phase.kind == crate::chemsys::PhaseKind::Gaseous && is_mixture && all_trace {
            // whole-phase collapse: composition and total move together
            let ln_phi: Vec<f64> = members
                .iter()
                .map(|&i| (n[i] / total).ln() - slack_of(i))
                .collect();
            let amounts = |ln_t: f64| -> f64 {
                members
                    .iter()
                    .zip(&ln_phi)
                    .map(|(_, &lp)| scalar_amount(-ln_t - lp, c))
                    .sum::<f64>()
            };
            let h = |ln_t: f64| amounts(ln_t).ln() - ln_t;
            let mut hi = (2.0 * total).ln();
            if h(hi) < 0.0 {
                let mut lo = (1e-280_f64).ln();
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if h(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                for (k, &i) in members.iter().enumerate() {
                    set(i, scalar_amount(-hi - ln_phi[k], c), n, z_hat);
                }
            }
            continue;
        }

        for &i in members {
            if n[i] > threshold || Some(i) == phase.solvent_index {
                continue;
            }
            let slack = slack_of(i);
            match phase.kind {
                crate::chemsys::PhaseKind::Mineral => {
                    // the potential is independent of the amount; only the
                    // slack side of complementarity is adjustable
                    if slack > 1e-9 {
                        set(i, c / slack, n, z_hat);
                    }
                }
                _ => {
                    // frozen phase environment; a single-species gas phase
                    // that is not collapsing never reaches this arm
                    let omega = if is_mixture { 1.0 - n[i] / total } else { 0.0 };
                    if omega < 0.5 {
                        if slack > 1e-9 {
                            set(i, c / slack, n, z_hat);
                        }
                        continue;
                    }
                    let g = (slack - omega * n[i].ln()) / omega;
                    set(i, scalar_amount(g, c / omega), n, z_hat);
                }
            }
        }
    }
    changed
}

/// Same without the margin, for the affine predictor.
fn boundary_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha
}

struct Residuals {
    r_d: DVector<f64>,
    r_p: DVector<f64>,
    dual: f64,
    primal: f64,
    comp: f64,
    merit: f64,
}

fn residuals(
    mu_hat: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    b_norm: f64,
    n: &DVector<f64>,
    y_hat: &DVector<f64>,
    z_hat: &DVector<f64>,
) -> Residuals {
    let r_d = mu_hat - a.transpose() * y_hat - z_hat;
    let r_p = a * n - b;
    let dual = r_d.amax();
    let primal = r_p.amax();
    let comp = n.zip_fold(z_hat, 0.0_f64, |acc, ni, zi| acc.max(ni * zi));
    // the merit tracks the mean complementarity, not the max: centering
    // steps deliberately raise individual products toward the mean
    let merit = dual + primal / (1.0 + b_norm) + n.dot(z_hat) / n.len() as f64;
    Residuals {
        r_d,
        r_p,
        dual,
        primal,
        comp,
        merit,
    }
}

/// Assembles and factors [[tl + diag(extra), -A^T], [A, 0]], retrying with an
/// escalating diagonal shift if the factorization is singular.
fn factor_bordered(
    tl: &DMatrix<f64>,
    extra_diag: Option<&DVector<f64>>,
    a: &DMatrix<f64>,
) -> Option<RefinedLu> {
    let nsp = tl.nrows();
    let ne = a.nrows();
    let dim = nsp + ne;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (nsp, nsp)).copy_from(tl);
    if let Some(d) = extra_diag {
        for i in 0..nsp {
            m[(i, i)] += d[i];
        }
    }
    m.view_mut((0, nsp), (nsp, ne)).copy_from(&(-a.transpose()));
    m.view_mut((nsp, 0), (ne, nsp)).copy_from(a);
    let scale = m.amax().max(1.0);
    for shift in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut shifted = m.clone();
        for i in 0..nsp {
            shifted[(i, i)] += shift * scale;
        }
        for i in nsp..dim {
            shifted[(i, i)] -= shift * scale;
        }
        if let Some(lu) = RefinedLu::try_new(shifted) {
            return Some(lu);
        }
    }
    None
}

/// Solves for the equilibrium composition at fixed T, P, and element totals.
/// `guess` warm-starts the iteration; otherwise a nonnegative least-squares
/// projection of `b` seeds it (and detects unreachable element totals).
///
/// A guess is a pure optimization: if the warm-started iteration strands
/// (a guess can be arbitrarily far from any equilibrium), the solve is
/// repeated from the cold seed before the failure is reported.
pub fn equilibrate(
    system: &ChemicalSystem,
    model: &ThermoModel,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    guess: Option<&DVector<f64>>,
    options: &EquilibriumOptions,
) -> Result<EquilibriumSolution, EquilibriumError> {
    match solve(system, model, t, p, b, guess, options) {
        Err(
            EquilibriumError::MaxIterations { .. } | EquilibriumError::SingularSystem { .. },
        ) if guess.is_some() => solve(system, model, t, p, b, None, options),
        other => other,
    }
}

fn solve(
    system: &ChemicalSystem,
    model: &ThermoModel,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    guess: Option<&DVector<f64>>,
    options: &EquilibriumOptions,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let nsp = system.n_species();
    let ne = system.n_elements();
    if b.len() != ne {
        return Err(EquilibriumError::DimensionMismatch {
            expected: ne,
            got: b.len(),
        });
    }
    let a = system.formula_matrix();
    let b_norm = b.amax();
    let p_tol = primal_tolerance(b_norm);
    let rt = R * t;

    let mut n = match guess {
        Some(g) => {
            if g.len() != nsp {
                return Err(EquilibriumError::DimensionMismatch {
                    expected: nsp,
                    got: g.len(),
                });
            }
            // a converged guess has species at machine-level amounts; lift
            // them to a relative interior floor so the first complementarity
            // products are representable (the balance perturbation is linear
            // and restored by the first full step)
            let floor = WARM_REL_FLOOR * g.amax().max(GUESS_FLOOR);
            g.map(|v| v.max(floor))
        }
        None => {
            let x = nnls(a, b);
            let residual = (a * &x - b).amax();
            if residual > 1e-10 * (1.0 + b_norm) {
                return Err(EquilibriumError::InfeasibleElements { residual });
            }
            // the least-squares projection lands on a vertex with at most E
            // nonzero species; spreading a little mass over the rest keeps
            // the initial activities (and the Hessian) tame
            let floor = (1e-2 * x.sum() / nsp as f64).max(NNLS_FLOOR);
            x.map(|v| v.max(floor))
        }
    };

    let state_at = |n: &DVector<f64>| ChemicalState {
        t,
        p,
        n: n.clone(),
    };
    let mut props = model.properties(system, &state_at(&n))?;
    let mu_hat = &props.mu / rt;

    let (mut y_hat, mut z_hat) = match guess {
        // near a solution the multipliers are recoverable: fit y by
        // amount-weighted least squares (present species carry the
        // information, floored ones barely any), keep the fitted slacks as
        // duals, and floor only the complementarity products. A blanket
        // dual floor here unbalances the products by many orders and sends
        // the centering haywire.
        Some(_) => {
            let an = DMatrix::from_fn(ne, nsp, |j, i| a[(j, i)] * n[i]);
            let y = (&an * a.transpose())
                .lu()
                .solve(&(an * &mu_hat))
                .unwrap_or_else(|| DVector::zeros(ne));
            let slack = &mu_hat - a.transpose() * &y;
            let z = DVector::from_fn(nsp, |i, _| slack[i].max(WARM_PRODUCT / n[i]));
            (y, z)
        }
        // a cold start is centered by construction: y from plain least
        // squares on stationarity, z from the positive part
        None => {
            let aat = a * a.transpose();
            let y = aat
                .lu()
                .solve(&(a * &mu_hat))
                .unwrap_or_else(|| DVector::zeros(ne));
            let z = (&mu_hat - a.transpose() * &y).map(|v| v.max(1e-2));
            (y, z)
        }
    };

    let mut res = residuals(&mu_hat, a, b, b_norm, &n, &y_hat, &z_hat);
    let mut iterations = 0;
    let mut stall = 0;
    let mut polish_used = 0;

    loop {
        // after the tolerances are met, spend a few more iterations pushing
        // the complementarity products toward machine level: the sharp
        // stable/unstable separation downstream depends on it
        let base_ok =
            res.dual <= options.tol_kkt && res.primal <= p_tol && res.comp <= options.tol_kkt;
        if base_ok && (res.comp <= POLISH_TARGET || polish_used >= MAX_POLISH) {
            break;
        }
        if !base_ok && iterations >= options.max_iterations {
            if std::env::var_os("CHEMEQ_TRACE").is_some() {
                eprintln!("STUCK b = {:?}", b.as_slice());
                eprintln!("STUCK warm = {}", guess.is_some());
                for i in 0..nsp {
                    eprintln!(
                        "  {:10} n {:12.5e} z {:12.5e} r_d {:12.5e}",
                        system.species()[i].name, n[i], z_hat[i], res.r_d[i]
                    );
                }
            }
            return Err(EquilibriumError::MaxIterations {
                iterations,
                dual: res.dual,
                primal: res.primal,
                complementarity: res.comp,
            });
        }
        if base_ok {
            polish_used += 1;
        }
        iterations += 1;

        let h_hat = &props.dmu_dn / rt;
        let zn = z_hat.component_div(&n);
        let lu = factor_bordered(&h_hat, Some(&zn), a).ok_or(
            EquilibriumError::SingularSystem {
                iteration: iterations,
            },
        )?;

        let mu_c = n.dot(&z_hat) / nsp as f64;

        // affine predictor
        let mut rhs = DVector::zeros(nsp + ne);
        for i in 0..nsp {
            rhs[i] = -res.r_d[i] - z_hat[i];
        }
        for j in 0..ne {
            rhs[nsp + j] = -res.r_p[j];
        }
        let sol = lu.solve(&rhs).ok_or(EquilibriumError::SingularSystem {
            iteration: iterations,
        })?;
        let dn_aff = sol.rows(0, nsp).into_owned();
        let dz_aff: DVector<f64> =
            DVector::from_fn(nsp, |i, _| -z_hat[i] - z_hat[i] / n[i] * dn_aff[i]);

        let alpha_p_aff = boundary_step(&n, &dn_aff);
        let alpha_d_aff = boundary_step(&z_hat, &dz_aff);
        let mu_aff = (0..nsp)
            .map(|i| (n[i] + alpha_p_aff * dn_aff[i]) * (z_hat[i] + alpha_d_aff * dz_aff[i]))
            .sum::<f64>()
            / nsp as f64;
        let sigma = (mu_aff / mu_c).clamp(0.0, 1.0).powi(3);
        let target = if base_ok {
            sigma * mu_c
        } else {
            (sigma * mu_c).max(BARRIER_KEEP * n.amax())
        };

        // corrector with centering
        for i in 0..nsp {
            rhs[i] = -res.r_d[i] - z_hat[i] - (dn_aff[i] * dz_aff[i] - target) / n[i];
        }
        let sol = lu.solve(&rhs).ok_or(EquilibriumError::SingularSystem {
            iteration: iterations,
        })?;
        let dn = sol.rows(0, nsp).into_owned();
        let dy = sol.rows(nsp, ne).into_owned();
        let dz: DVector<f64> = DVector::from_fn(nsp, |i, _| {
            -z_hat[i] - (dn_aff[i] * dz_aff[i] - target) / n[i] - z_hat[i] / n[i] * dn[i]
        });

        // a trial step refines its trace species before being judged: the
        // merit would otherwise reject every aggressive step on account of
        // log-activity curvature the refinement removes exactly
        type Trial = (
            DVector<f64>,
            DVector<f64>,
            DVector<f64>,
            crate::thermo::ChemicalProperties,
            Residuals,
        );
        let try_step = |t_step: f64| -> Result<Trial, ThermoError> {
            let mut n_try = apply_clipped(&n, &dn, t_step);
            let y_try = &y_hat + &dy * t_step;
            let mut z_try = apply_clipped(&z_hat, &dz, t_step);
            let mut props_try = model.properties(system, &state_at(&n_try))?;
            let c_center = n_try.dot(&z_try) / nsp as f64;
            if refine_trace_species(
                system, &props_try, rt, a, &y_try, c_center, &mut n_try, &mut z_try,
            ) {
                props_try = model.properties(system, &state_at(&n_try))?;
            }
            let mu_try = &props_try.mu / rt;
            let res_try = residuals(&mu_try, a, b, b_norm, &n_try, &y_try, &z_try);
            Ok((n_try, y_try, z_try, props_try, res_try))
        };

        // backtrack on the residual merit; accept the first decrease, else
        // fall back to the most damped trial so the iteration keeps moving
        let mut accepted = None;
        let mut last = None;
        let mut t_step = 1.0;
        for _ in 0..8 {
            let candidate = try_step(t_step)?;
            if candidate.4.merit < res.merit {
                accepted = Some(candidate);
                break;
            }
            last = Some(candidate);
            t_step *= 0.5;
        }
        let (n_new, y_new, z_new, props_new, res_new) = match accepted {
            Some(c) => {
                stall = 0;
                c
            }
            None => {
                stall += 1;
                if stall >= 20 {
                    return Err(EquilibriumError::MaxIterations {
                        iterations,
                        dual: res.dual,
                        primal: res.primal,
                        complementarity: res.comp,
                    });
                }
                last.expect("at least one trial evaluated")
            }
        };

        if base_ok
            && !(res_new.dual <= options.tol_kkt
                && res_new.primal <= p_tol
                && res_new.comp < res.comp)
        {
            // a polish step that fails to improve would undo convergence
            break;
        }
        n = n_new;
        y_hat = y_new;
        z_hat = z_new;
        props = props_new;
        res = res_new;
        if std::env::var_os("CHEMEQ_TRACE").is_some() {
            let worst = res.r_d.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(i, _)| i).unwrap();
            eprintln!(
                "it {iterations:3} dual {:9.2e} primal {:9.2e} comp {:9.2e} mu_c {:9.2e} stall {stall} worst {} r_d {:9.2e} n {:9.2e} z {:9.2e}",
                res.dual, res.primal, res.comp, n.dot(&z_hat) / nsp as f64,
                system.species()[worst].name, res.r_d[worst], n[worst], z_hat[worst]
            );
        }
    }

    Ok(EquilibriumSolution {
        state: state_at(&n),
        b: b.clone(),
        y: &y_hat * rt,
        z: &z_hat * rt,
        properties: props,
        iterations,
        dual_infeasibility: res.dual,
        primal_infeasibility: res.primal,
        complementarity: res.comp,
    })
}

/// KKT residuals of an arbitrary (state, multiplier) triple, in the same
/// scaled units the solver converges on.
pub fn kkt_residual(
    system: &ChemicalSystem,
    model: &ThermoModel,
    state: &ChemicalState,
    b: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<KktResidual, ThermoError> {
    let props = model.properties(system, state)?;
    let rt = R * state.t;
    let a = system.formula_matrix();
    let r_d = &props.mu / rt - a.transpose() * &(y / rt) - z / rt;
    let r_p = a * &state.n - b;
    let comp = state
        .n
        .zip_fold(z, 0.0_f64, |acc, ni, zi| acc.max((ni * zi / rt).abs()));
    Ok(KktResidual {
        dual: r_d.amax(),
        primal: r_p.amax(),
        complementarity: comp,
    })
}

/// Splits species into stable (present) and unstable (absent) by comparing
/// the normalized amount against the normalized slack. Errors if a species
/// is degenerate: both indistinguishable from zero.
pub fn stable_species(
    system: &ChemicalSystem,
    solution: &EquilibriumSolution,
    eps_stability: f64,
) -> Result<Vec<bool>, EquilibriumError> {
    let rt = R * solution.state.t;
    let n = &solution.state.n;
    let z_hat = &solution.z / rt;
    let n_scale = n.amax();
    let z_scale = z_hat.amax().max(1.0);
    let mut stable = Vec::with_capacity(n.len());
    for i in 0..n.len() {
        let presence = n[i] / n_scale;
        let absence = z_hat[i] / z_scale;
        if presence.max(absence) < eps_stability {
            return Err(EquilibriumError::DegenerateSpecies {
                species: system.species()[i].name.clone(),
            });
        }
        stable.push(presence >= absence);
    }
    Ok(stable)
}

/// Derivatives of the equilibrium amounts with respect to T, P, and b.
///
/// Differentiating the active-set KKT conditions (stable species S only;
/// unstable amounts stay zero) gives one bordered system
/// `[[H_SS/RT, -A_S^T], [A_S, 0]]` with E + 2 right-hand sides sharing a
/// single factorization.
pub fn sensitivities(
    system: &ChemicalSystem,
    solution: &EquilibriumSolution,
    options: &EquilibriumOptions,
) -> Result<Sensitivities, EquilibriumError> {
    let stable = stable_species(system, solution, options.eps_stability)?;
    let idx: Vec<usize> = (0..system.n_species()).filter(|&i| stable[i]).collect();
    let ns = idx.len();
    let ne = system.n_elements();
    let nsp = system.n_species();
    let rt = R * solution.state.t;
    let a = system.formula_matrix();

    let mut h_ss = DMatrix::zeros(ns, ns);
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            h_ss[(r, c)] = solution.properties.dmu_dn[(i, j)] / rt;
        }
    }
    let mut a_s = DMatrix::zeros(ne, ns);
    for (c, &j) in idx.iter().enumerate() {
        a_s.column_mut(c).copy_from(&a.column(j));
    }

    let lu = factor_bordered(&h_ss, None, &a_s).ok_or(EquilibriumError::SingularSystem {
        iteration: 0,
    })?;

    let solve_for = |top: &DVector<f64>, bottom: &DVector<f64>| -> Result<DVector<f64>, EquilibriumError> {
        let mut rhs = DVector::zeros(ns + ne);
        rhs.rows_mut(0, ns).copy_from(top);
        rhs.rows_mut(ns, ne).copy_from(bottom);
        let sol = lu
            .solve(&rhs)
            .ok_or(EquilibriumError::SingularSystem { iteration: 0 })?;
        let mut dn = DVector::zeros(nsp);
        for (r, &i) in idx.iter().enumerate() {
            dn[i] = sol[r];
        }
        Ok(dn)
    };

    let zero_e = DVector::zeros(ne);
    let top_t = DVector::from_fn(ns, |r, _| -solution.properties.dmu_dt[idx[r]] / rt);
    let dn_dt = solve_for(&top_t, &zero_e)?;
    let top_p = DVector::from_fn(ns, |r, _| -solution.properties.dmu_dp[idx[r]] / rt);
    let dn_dp = solve_for(&top_p, &zero_e)?;

    let zero_s = DVector::zeros(ns);
    let mut dn_db = DMatrix::zeros(nsp, ne);
    for j in 0..ne {
        let mut e_j = DVector::zeros(ne);
        e_j[j] = 1.0;
        let col = solve_for(&zero_s, &e_j)?;
        dn_db.column_mut(j).copy_from(&col);
    }

    Ok(Sensitivities {
        dn_dt,
        dn_dp,
        dn_db,
        stable,
    })
}

/// Total Gibbs energy n . mu at a state, J.
pub fn gibbs_energy(
    system: &ChemicalSystem,
    model: &ThermoModel,
    state: &ChemicalState,
) -> Result<f64, ThermoError> {
    let props = model.properties(system, state)?;
    Ok(state.n.dot(&props.mu))
}

/// Per-reaction mass-action residuals ln K_m - sum_i nu_mi ln a_i at a
/// converged solution. All participating species must be stable; the
/// activity of an absent species is meaningless and is reported as an error
/// rather than silently evaluated at the floor.
pub fn lma_residual(
    system: &ChemicalSystem,
    model: &ThermoModel,
    solution: &EquilibriumSolution,
    nu: &DMatrix<f64>,
    options: &EquilibriumOptions,
) -> Result<DVector<f64>, EquilibriumError> {
    let stable = stable_species(system, solution, options.eps_stability)?;
    let ln_k = model.reaction_ln_k(system, nu, solution.state.t, solution.state.p)?;
    let mut r = DVector::zeros(nu.nrows());
    for m in 0..nu.nrows() {
        let mut q = 0.0;
        for i in 0..system.n_species() {
            let c = nu[(m, i)];
            if c == 0.0 {
                continue;
            }
            if !stable[i] {
                return Err(EquilibriumError::UnstableReactant {
                    reaction: m,
                    species: system.species()[i].name.clone(),
                });
            }
            q += c * solution.properties.ln_a[i];
        }
        r[m] = ln_k[m] - q;
    }
    Ok(r)
}
