//! Record-and-predict layer over the equilibrium solver.
//!
//! Every full solve is saved together with its sensitivity derivatives and
//! chemical-potential tangent. A later query is answered by a first-order
//! expansion around the nearest saved input whenever the extrapolated
//! potentials stay within tolerance; otherwise the problem is solved in
//! full and appended as a new record. Predictions conserve mass by
//! construction: the stored derivatives satisfy `A dn_db = I` and
//! `A dn_dT = A dn_dP = 0`, so `A n_predicted = b_query` up to the solver's
//! own balance residual (unless the nonnegativity clip fires).

pub mod kdtree;
mod persist;

pub use persist::StoreError;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::chemsys::{ChemicalState, ChemicalSystem};
use crate::equilibrium::{
    equilibrate, sensitivities, EquilibriumError, EquilibriumOptions, EquilibriumSolution,
    Sensitivities,
};
use crate::thermo::{ThermoModel, R};
use kdtree::{dist2, KdTree};

/// A fully solved equilibrium state with everything needed to extrapolate
/// around it: the inputs, the amounts, the amount sensitivities, and the
/// chemical-potential tangent.
#[derive(Debug, Clone)]
pub struct EquilibriumRecord {
    /// Position in the store; assigned on insertion.
    pub id: usize,
    pub t: f64,
    pub p: f64,
    pub b: DVector<f64>,
    pub n: DVector<f64>,
    pub mu: DVector<f64>,
    pub ln_a: DVector<f64>,
    pub dmu_dt: DVector<f64>,
    pub dmu_dp: DVector<f64>,
    pub dmu_dn: DMatrix<f64>,
    /// `None` when the active set was degenerate at the solution; such a
    /// record is searchable but never seeds a prediction.
    pub sens: Option<Sensitivities>,
    /// Stored only when the activity acceptance test is in use.
    pub act: Option<ActivityTangent>,
}

/// First-order expansion data for ln-activities, the extra payload of the
/// activity acceptance test.
#[derive(Debug, Clone)]
pub struct ActivityTangent {
    pub dlna_dt: DVector<f64>,
    pub dlna_dp: DVector<f64>,
    pub dlna_dn: DMatrix<f64>,
}

impl EquilibriumRecord {
    /// Snapshot of a converged solution; the id is assigned by the store.
    pub fn from_solution(
        solution: &EquilibriumSolution,
        sens: Option<Sensitivities>,
        keep_activity_tangent: bool,
    ) -> Self {
        let pr = &solution.properties;
        EquilibriumRecord {
            id: 0,
            t: solution.state.t,
            p: solution.state.p,
            b: solution.b.clone(),
            n: solution.state.n.clone(),
            mu: pr.mu.clone(),
            ln_a: pr.ln_a.clone(),
            dmu_dt: pr.dmu_dt.clone(),
            dmu_dp: pr.dmu_dp.clone(),
            dmu_dn: pr.dmu_dn.clone(),
            sens,
            act: keep_activity_tangent.then(|| ActivityTangent {
                dlna_dt: pr.dlna_dt.clone(),
                dlna_dp: pr.dlna_dp.clone(),
                dlna_dn: pr.dlna_dn.clone(),
            }),
        }
    }
}

/// Which quantity the acceptance test compares against its tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    /// Extrapolated chemical potentials, scaled by RT. Robust to the
    /// saturated-mineral case: adding more of an equilibrated mineral moves
    /// amounts arbitrarily far while potentials stay put.
    ChemicalPotential,
    /// Extrapolated ln-activities. Requires records stored with the
    /// activity tangent.
    Activity,
    /// Raw species amounts. Spuriously rejects the saturated-mineral case;
    /// kept as the baseline the potential test is measured against.
    Amounts,
}

/// Acceptance thresholds: accept iff `|q_i - p_i| <= eps_rel |p_i| + eps_abs`
/// for all species. For [`TestKind::ChemicalPotential`] both sides are
/// divided by RT at the recorded temperature, making `eps_abs` dimensionless
/// (RT units) rather than J/mol; for the other kinds the comparison is in
/// the quantity's own units (ln-activity, mol).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eps_rel: f64,
    pub eps_abs: f64,
    pub kind: TestKind,
}

impl Tolerances {
    pub fn new(eps_rel: f64, eps_abs: f64, kind: TestKind) -> Self {
        assert!(
            eps_rel >= 0.0 && eps_abs >= 0.0,
            "acceptance tolerances must be nonnegative"
        );
        Tolerances {
            eps_rel,
            eps_abs,
            kind,
        }
    }
}

impl Default for Tolerances {
    /// 10% relative, 0.1 RT absolute, on chemical potentials.
    fn default() -> Self {
        Tolerances::new(0.1, 0.1, TestKind::ChemicalPotential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchBackend {
    /// Linear scan over all records.
    Naive,
    /// Exact kd-tree over indexed records plus a linear scan of the
    /// unindexed tail; both backends return the same record for the same
    /// store and query.
    KdTree,
}

/// Search configuration of a record store.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub backend: SearchBackend,
    /// Per-dimension scale factors for the (T, P, b) input metric; `None`
    /// keeps the plain Euclidean norm. A zero weight drops a dimension from
    /// the metric entirely.
    pub weights: Option<DVector<f64>>,
    /// Insertions tolerated since the last kd-tree build before rebuilding.
    pub rebuild_interval: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            backend: SearchBackend::KdTree,
            weights: None,
            rebuild_interval: 16,
        }
    }
}

/// How a smart call was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveKind {
    Predicted,
    Learned,
}

/// One line of the per-call log.
#[derive(Debug, Clone)]
pub struct CallLog {
    pub call: usize,
    pub kind: SolveKind,
    /// Input-space distance to the nearest record at call time (infinite on
    /// the first call).
    pub distance: f64,
    pub seconds: f64,
}

/// Session counters. Learned/predicted counts cover calls made through
/// [`solve_smart`] on this store instance; records loaded from disk are not
/// counted as learned.
#[derive(Debug, Clone, Default)]
pub struct SessionStats {
    pub learned: usize,
    pub predicted: usize,
    pub log: Vec<CallLog>,
}

/// Result of a smart solve.
#[derive(Debug, Clone)]
pub struct SmartResult {
    pub state: ChemicalState,
    pub kind: SolveKind,
    pub nearest_id: Option<usize>,
    /// Input-space distance to the nearest record (infinite when the store
    /// was empty).
    pub distance: f64,
    /// Acceptance margins (test left side minus right side, nonpositive
    /// means pass) of the prediction that was evaluated, if any.
    pub margins: Option<DVector<f64>>,
    /// Amount removed from each species by the nonnegativity clip of the
    /// prediction that was evaluated, if any.
    pub clipped: Option<DVector<f64>>,
}

/// Ordered collection of equilibrium records with nearest-neighbor search
/// over their (T, P, b) inputs.
///
/// Reads (`nearest`, accessors) take `&self` and may proceed concurrently;
/// learning takes `&mut self` and therefore serializes. Sequential use is
/// bitwise deterministic.
#[derive(Debug, Clone)]
pub struct RecordStore {
    signature: u64,
    n_species: usize,
    /// len 2 + E; premultiplied into the stored points.
    weights: DVector<f64>,
    backend: SearchBackend,
    rebuild_interval: usize,
    records: Vec<EquilibriumRecord>,
    points: Vec<DVector<f64>>,
    tree: KdTree,
    indexed: usize,
    stats: SessionStats,
}

impl RecordStore {
    pub fn new(system: &ChemicalSystem, config: SearchConfig) -> Self {
        Self::from_parts(
            system.signature(),
            system.n_elements(),
            system.n_species(),
            config,
        )
    }

    pub(crate) fn from_parts(
        signature: u64,
        n_elements: usize,
        n_species: usize,
        config: SearchConfig,
    ) -> Self {
        let dim = 2 + n_elements;
        let weights = config
            .weights
            .unwrap_or_else(|| DVector::repeat(dim, 1.0));
        assert_eq!(weights.len(), dim, "need one weight per (T, P, b) dimension");
        assert!(
            weights.iter().all(|w| *w >= 0.0 && w.is_finite()),
            "weights must be finite and nonnegative"
        );
        RecordStore {
            signature,
            n_species,
            weights,
            backend: config.backend,
            rebuild_interval: config.rebuild_interval.max(1),
            records: Vec::new(),
            points: Vec::new(),
            tree: KdTree::build(&[], 0),
            indexed: 0,
            stats: SessionStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EquilibriumRecord] {
        &self.records
    }

    pub fn get(&self, id: usize) -> Option<&EquilibriumRecord> {
        self.records.get(id)
    }

    /// Hash of the chemical system the records belong to.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    /// Appends one call to the session log and bumps the matching counter.
    /// [`solve_smart`] accounts for its own calls; this is for drivers that
    /// answer calls through [`try_predict`] and solve the rest themselves.
    pub fn log_call(&mut self, kind: SolveKind, distance: f64, seconds: f64) {
        let call = self.stats.learned + self.stats.predicted;
        match kind {
            SolveKind::Predicted => self.stats.predicted += 1,
            SolveKind::Learned => self.stats.learned += 1,
        }
        self.stats.log.push(CallLog { call, kind, distance, seconds });
    }

    fn point_of(&self, t: f64, p: f64, b: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(2 + b.len());
        q[0] = t * self.weights[0];
        q[1] = p * self.weights[1];
        for j in 0..b.len() {
            q[2 + j] = b[j] * self.weights[2 + j];
        }
        q
    }

    /// Appends a record, assigning its id; returns the id. Rebuilds the
    /// kd-tree once enough unindexed records accumulate.
    pub fn push(&mut self, mut record: EquilibriumRecord) -> usize {
        assert_eq!(record.b.len() + 2, self.weights.len(), "element count mismatch");
        assert_eq!(record.n.len(), self.n_species, "species count mismatch");
        let id = self.records.len();
        record.id = id;
        self.points.push(self.point_of(record.t, record.p, &record.b));
        self.records.push(record);
        if self.backend == SearchBackend::KdTree
            && self.points.len() - self.indexed >= self.rebuild_interval
        {
            self.rebuild();
        }
        id
    }

    fn rebuild(&mut self) {
        self.tree = KdTree::build(&self.points, self.points.len());
        self.indexed = self.points.len();
    }

    /// Record minimizing the weighted Euclidean distance in (T, P, b) input
    /// space, with that distance; ties go to the lowest id. `None` when the
    /// store is empty.
    pub fn nearest(&self, t: f64, p: f64, b: &DVector<f64>) -> Option<(&EquilibriumRecord, f64)> {
        let (idx, d2) = self.nearest_idx(&self.point_of(t, p, b))?;
        Some((&self.records[idx], d2.sqrt()))
    }

    fn nearest_idx(&self, query: &DVector<f64>) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        let tail_from = match self.backend {
            SearchBackend::Naive => 0,
            SearchBackend::KdTree => {
                if let Some(hit) = self.tree.nearest(&self.points, query) {
                    best = hit;
                }
                self.indexed
            }
        };
        // tail indices exceed every indexed id, so ties keep the tree's pick
        for i in tail_from..self.points.len() {
            let d2 = dist2(&self.points[i], query);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0 != usize::MAX).then_some(best)
    }
}

/// A first-order amount prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub n: DVector<f64>,
    /// Magnitude clipped away from each species to keep amounts nonnegative.
    pub clipped: DVector<f64>,
}

/// Extrapolates the recorded amounts to the query inputs:
/// `n_q = n_p + dn_dT (T - T_p) + dn_dP (P - P_p) + dn_db (b - b_p)`.
/// `None` when the record carries no sensitivities.
pub fn predict(record: &EquilibriumRecord, t: f64, p: f64, b: &DVector<f64>) -> Option<Prediction> {
    let sens = record.sens.as_ref()?;
    let mut n = &record.n
        + &sens.dn_dt * (t - record.t)
        + &sens.dn_dp * (p - record.p)
        + &sens.dn_db * (b - &record.b);
    let mut clipped = DVector::zeros(n.len());
    for i in 0..n.len() {
        if n[i] < 0.0 {
            clipped[i] = -n[i];
            n[i] = 0.0;
        }
    }
    Some(Prediction { n, clipped })
}

/// Extrapolated chemical potentials at the query state, from recorded data
/// alone: `mu_q = mu_p + dmu_dT dT + dmu_dP dP + dmu_dn (n_q - n_p)`.
pub fn predict_potentials(
    record: &EquilibriumRecord,
    n_predicted: &DVector<f64>,
    t: f64,
    p: f64,
) -> DVector<f64> {
    &record.mu
        + &record.dmu_dt * (t - record.t)
        + &record.dmu_dp * (p - record.p)
        + &record.dmu_dn * (n_predicted - &record.n)
}

/// Extrapolated ln-activities; `None` when the record was stored without
/// the activity tangent.
pub fn predict_activities(
    record: &EquilibriumRecord,
    n_predicted: &DVector<f64>,
    t: f64,
    p: f64,
) -> Option<DVector<f64>> {
    let act = record.act.as_ref()?;
    Some(
        &record.ln_a
            + &act.dlna_dt * (t - record.t)
            + &act.dlna_dp * (p - record.p)
            + &act.dlna_dn * (n_predicted - &record.n),
    )
}

/// margin_i = |q_i - p_i|/scale - (eps_rel |p_i|/scale + eps_abs);
/// accepted iff every margin is <= 0 (inclusive).
fn margins_against(
    reference: &DVector<f64>,
    predicted: &DVector<f64>,
    scale: f64,
    tol: &Tolerances,
) -> (bool, DVector<f64>) {
    debug_assert!(tol.eps_rel >= 0.0 && tol.eps_abs >= 0.0);
    let m = DVector::from_fn(reference.len(), |i, _| {
        (predicted[i] - reference[i]).abs() / scale
            - (tol.eps_rel * reference[i].abs() / scale + tol.eps_abs)
    });
    (m.iter().all(|v| *v <= 0.0), m)
}

/// Chemical-potential acceptance test, both sides in RT units at the
/// recorded temperature.
pub fn accept(
    record: &EquilibriumRecord,
    mu_predicted: &DVector<f64>,
    tol: &Tolerances,
) -> (bool, DVector<f64>) {
    margins_against(&record.mu, mu_predicted, R * record.t, tol)
}

/// ln-activity acceptance test.
pub fn accept_activities(
    record: &EquilibriumRecord,
    lna_predicted: &DVector<f64>,
    tol: &Tolerances,
) -> (bool, DVector<f64>) {
    margins_against(&record.ln_a, lna_predicted, 1.0, tol)
}

/// Species-amount acceptance test. Rejects any prediction that moves an
/// amount far in absolute terms, even when the move is thermodynamically
/// exact (a saturated mineral absorbing added mass), which is why the
/// potential test is the default.
pub fn accept_amounts(
    record: &EquilibriumRecord,
    n_predicted: &DVector<f64>,
    tol: &Tolerances,
) -> (bool, DVector<f64>) {
    margins_against(&record.n, n_predicted, 1.0, tol)
}

/// Largest relative mass-balance defect, ‖A·clip‖∞ / (1 + ‖b‖∞), an
/// accepted prediction may carry from clipping. Unclipped predictions
/// conserve mass structurally; this keeps the clipped ones to the same
/// standard instead of letting a zeroed mineral column hide an
/// arbitrarily large defect from the potential test.
pub const MAX_CLIP_DEFECT: f64 = 1e-10;

struct Attempt {
    nearest_id: Option<usize>,
    distance: f64,
    margins: Option<DVector<f64>>,
    clipped: Option<DVector<f64>>,
    /// Predicted amounts when the acceptance test passed.
    accepted: Option<DVector<f64>>,
    /// Warm-start hint when it failed: the rejected prediction, or the
    /// nearest record's amounts when that record cannot predict.
    guess: Option<DVector<f64>>,
}

fn attempt(
    store: &RecordStore,
    system: &ChemicalSystem,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    tol: &Tolerances,
) -> Attempt {
    let mut out = Attempt {
        nearest_id: None,
        distance: f64::INFINITY,
        margins: None,
        clipped: None,
        accepted: None,
        guess: None,
    };
    let Some((idx, d2)) = store.nearest_idx(&store.point_of(t, p, b)) else {
        return out;
    };
    let record = &store.records[idx];
    out.nearest_id = Some(record.id);
    out.distance = d2.sqrt();
    match predict(record, t, p, b) {
        Some(pred) => {
            let (ok, m) = match tol.kind {
                TestKind::ChemicalPotential => {
                    accept(record, &predict_potentials(record, &pred.n, t, p), tol)
                }
                TestKind::Activity => match predict_activities(record, &pred.n, t, p) {
                    Some(lna) => accept_activities(record, &lna, tol),
                    // record predates the activity tangent: cannot test
                    None => (false, DVector::zeros(record.n.len())),
                },
                TestKind::Amounts => accept_amounts(record, &pred.n, tol),
            };
            let defect = (system.formula_matrix() * &pred.clipped).amax();
            let sound = defect <= MAX_CLIP_DEFECT * (1.0 + b.amax());
            out.margins = Some(m);
            out.clipped = Some(pred.clipped);
            if ok && sound {
                out.accepted = Some(pred.n);
            } else {
                out.guess = Some(pred.n);
            }
        }
        None => out.guess = Some(record.n.clone()),
    }
    out
}

/// Prediction-only half of [`solve_smart`]: answers from the store when the
/// acceptance test passes and returns `None` otherwise, never solving and
/// never touching the session counters. Batch drivers that run predictions
/// concurrently account for their calls through [`RecordStore::log_call`].
pub fn try_predict(
    store: &RecordStore,
    system: &ChemicalSystem,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    tol: &Tolerances,
) -> Option<SmartResult> {
    let got = attempt(store, system, t, p, b, tol);
    got.accepted.map(|n| SmartResult {
        state: ChemicalState { t, p, n },
        kind: SolveKind::Predicted,
        nearest_id: got.nearest_id,
        distance: got.distance,
        margins: got.margins,
        clipped: got.clipped,
    })
}

/// Answers an equilibrium query from the store when possible, solving and
/// recording otherwise.
///
/// The predicted path runs no thermodynamic model evaluation and no linear
/// solve: nearest lookup, the Taylor expansions, and the acceptance test
/// are all matrix-vector products against stored data. The learned path
/// runs the full solver and appends the solution; a failed solve appends
/// nothing. `guess` warm-starts the learned path; without one it starts
/// from the rejected prediction when there is one.
///
/// A prediction that had to clip negative amounts is answered only while
/// the clipped mass stays below [`MAX_CLIP_DEFECT`] relative to the query
/// totals; a material clip means the record's active set no longer covers
/// the query (a mineral ran out), so the call learns instead.
pub fn solve_smart(
    store: &mut RecordStore,
    system: &ChemicalSystem,
    model: &ThermoModel,
    t: f64,
    p: f64,
    b: &DVector<f64>,
    tol: &Tolerances,
    guess: Option<&DVector<f64>>,
    options: &EquilibriumOptions,
) -> Result<SmartResult, EquilibriumError> {
    assert_eq!(
        store.signature,
        system.signature(),
        "record store belongs to a different chemical system"
    );
    let clock = Instant::now();

    let got = attempt(store, system, t, p, b, tol);
    let Attempt { nearest_id, distance, margins, clipped, accepted, guess: hint } = got;
    if let Some(n) = accepted {
        store.log_call(SolveKind::Predicted, distance, clock.elapsed().as_secs_f64());
        return Ok(SmartResult {
            state: ChemicalState { t, p, n },
            kind: SolveKind::Predicted,
            nearest_id,
            distance,
            margins,
            clipped,
        });
    }

    let start = guess.or(hint.as_ref());
    let solution = equilibrate(system, model, t, p, b, start, options)?;
    // a degenerate active set leaves the record without sensitivities; it
    // stays searchable but never seeds a prediction
    let sens = sensitivities(system, &solution, options).ok();
    store.push(EquilibriumRecord::from_solution(
        &solution,
        sens,
        tol.kind == TestKind::Activity,
    ));
    store.log_call(SolveKind::Learned, distance, clock.elapsed().as_secs_f64());
    Ok(SmartResult {
        state: solution.state,
        kind: SolveKind::Learned,
        nearest_id,
        distance,
        margins,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn opts() -> EquilibriumOptions {
        EquilibriumOptions::default()
    }

    fn stub_record(t: f64, p: f64, b: &[f64]) -> EquilibriumRecord {
        let nsp = 2;
        EquilibriumRecord {
            id: 0,
            t,
            p,
            b: DVector::from_row_slice(b),
            n: DVector::repeat(nsp, 1.0),
            mu: DVector::zeros(nsp),
            ln_a: DVector::zeros(nsp),
            dmu_dt: DVector::zeros(nsp),
            dmu_dp: DVector::zeros(nsp),
            dmu_dn: DMatrix::zeros(nsp, nsp),
            sens: None,
            act: None,
        }
    }

    fn stub_store(n_elements: usize, backend: SearchBackend) -> RecordStore {
        RecordStore::from_parts(
            7,
            n_elements,
            2,
            SearchConfig {
                backend,
                ..SearchConfig::default()
            },
        )
    }

    #[test]
    fn nearest_at_a_stored_input_has_distance_zero() {
        let mut store = stub_store(1, SearchBackend::Naive);
        store.push(stub_record(300.0, 1e5, &[1.0]));
        store.push(stub_record(340.0, 2e5, &[3.0]));
        let (rec, d) = store.nearest(340.0, 2e5, &DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(rec.id, 1);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn nearest_distance_is_the_euclidean_input_norm() {
        let mut store = stub_store(1, SearchBackend::Naive);
        store.push(stub_record(300.0, 1e7, &[1.0]));
        let (_, d) = store
            .nearest(303.0, 1e7 + 4.0, &DVector::from_vec(vec![1.0]))
            .unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn weights_rescale_the_metric() {
        let mut store = RecordStore::from_parts(
            7,
            1,
            2,
            SearchConfig {
                backend: SearchBackend::Naive,
                // temperature ignored, amounts amplified
                weights: Some(DVector::from_vec(vec![0.0, 1.0, 10.0])),
                ..SearchConfig::default()
            },
        );
        store.push(stub_record(300.0, 1e5, &[1.0]));
        store.push(stub_record(400.0, 1e5, &[1.05]));
        // unweighted, record 1 is 100 K away and record 0 matches T exactly;
        // with w_T = 0 only the amount term counts
        let (rec, d) = store.nearest(400.0, 1e5, &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(rec.id, 0);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn empty_store_has_no_nearest() {
        let store = stub_store(1, SearchBackend::KdTree);
        assert!(store.nearest(300.0, 1e5, &DVector::from_vec(vec![1.0])).is_none());
    }

    proptest! {
        #[test]
        fn backends_agree_on_the_minimizer(
            inputs in prop::collection::vec((250.0..450.0f64, 1e4..1e6f64, 0.0..10.0f64, 0.0..10.0f64), 1..100),
            queries in prop::collection::vec((250.0..450.0f64, 1e4..1e6f64, 0.0..10.0f64, 0.0..10.0f64), 1..12),
        ) {
            let mut kd = stub_store(2, SearchBackend::KdTree);
            let mut naive = stub_store(2, SearchBackend::Naive);
            for (i, &(t, p, b0, b1)) in inputs.iter().enumerate() {
                kd.push(stub_record(t, p, &[b0, b1]));
                naive.push(stub_record(t, p, &[b0, b1]));
                if i % 7 == 3 {
                    // query mid-insertion so the unindexed tail is exercised
                    let q = DVector::from_vec(vec![b0 + 0.1, b1]);
                    let a = kd.nearest(t, p, &q).unwrap();
                    let e = naive.nearest(t, p, &q).unwrap();
                    prop_assert_eq!(a.0.id, e.0.id);
                    prop_assert_eq!(a.1.to_bits(), e.1.to_bits());
                }
            }
            for &(t, p, b0, b1) in &queries {
                let q = DVector::from_vec(vec![b0, b1]);
                let a = kd.nearest(t, p, &q).unwrap();
                let e = naive.nearest(t, p, &q).unwrap();
                prop_assert_eq!(a.0.id, e.0.id);
                prop_assert_eq!(a.1.to_bits(), e.1.to_bits());
            }
        }

        #[test]
        fn wider_tolerances_never_reject_an_accepted_prediction(
            mu_p in prop::collection::vec(-1e5..1e5f64, 4),
            dmu in prop::collection::vec(-1e4..1e4f64, 4),
            r1 in 0.0..0.5f64,
            dr in 0.0..0.5f64,
            a1 in 0.0..0.5f64,
            da in 0.0..0.5f64,
        ) {
            let mut rec = stub_record(300.0, 1e5, &[1.0]);
            rec.mu = DVector::from_fn(4, |i, _| mu_p[i]);
            let mu_q = DVector::from_fn(4, |i, _| mu_p[i] + dmu[i]);
            let narrow = Tolerances::new(r1, a1, TestKind::ChemicalPotential);
            let wide = Tolerances::new(r1 + dr, a1 + da, TestKind::ChemicalPotential);
            let (ok_narrow, _) = accept(&rec, &mu_q, &narrow);
            let (ok_wide, _) = accept(&rec, &mu_q, &wide);
            prop_assert!(!ok_narrow || ok_wide);
        }
    }

    #[test]
    fn unchanged_potentials_are_accepted_at_any_tolerance() {
        let mut rec = stub_record(300.0, 1e5, &[1.0]);
        rec.mu = DVector::from_vec(vec![-1.2e5, 3.4e4]);
        let (ok, m) = accept(&rec, &rec.mu.clone(), &Tolerances::new(0.0, 0.0, TestKind::ChemicalPotential));
        assert!(ok);
        assert!(m.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn one_species_over_its_bound_rejects_with_a_single_positive_margin() {
        let mut rec = stub_record(300.0, 1e5, &[1.0]);
        rec.mu = DVector::from_vec(vec![-1.0e5, 2.0e4]);
        let rt = R * rec.t;
        let mut mu_q = rec.mu.clone();
        mu_q[1] += 0.2 * rt;
        let (ok, m) = accept(&rec, &mu_q, &Tolerances::new(0.0, 0.1, TestKind::ChemicalPotential));
        assert!(!ok);
        assert!(m[0] < 0.0);
        assert!(m[1] > 0.0);
    }

    #[test]
    fn amount_test_boundary_is_inclusive() {
        let rec = stub_record(300.0, 1e5, &[1.0]); // n = [1, 1]
        let n_q = DVector::from_vec(vec![1.5, 0.5]);
        // |dn| = 0.5 exactly equals eps_rel |n| + eps_abs = 0.4 + 0.1
        let (ok, m) = accept_amounts(&rec, &n_q, &Tolerances::new(0.4, 0.1, TestKind::Amounts));
        assert!(ok);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[1], 0.0);
    }

    #[test]
    fn activity_test_matches_the_same_margin_shape() {
        let mut rec = stub_record(300.0, 1e5, &[1.0]);
        rec.ln_a = DVector::from_vec(vec![-2.0, -4.0]);
        let tol = Tolerances::new(0.1, 0.05, TestKind::Activity);
        let (ok, _) = accept_activities(&rec, &rec.ln_a.clone(), &tol);
        assert!(ok);
        let mut lna_q = rec.ln_a.clone();
        lna_q[1] -= 1.0;
        let (ok, m) = accept_activities(&rec, &lna_q, &tol);
        assert!(!ok);
        assert!(m[1] > 0.0 && m[0] < 0.0);
    }

    #[test]
    fn predict_without_sensitivities_is_unavailable() {
        let rec = stub_record(300.0, 1e5, &[1.0]);
        assert!(predict(&rec, 301.0, 1e5, &DVector::from_vec(vec![1.1])).is_none());
    }

    #[test]
    fn predict_at_the_record_input_returns_the_recorded_amounts() {
        let mut rec = stub_record(300.0, 1e5, &[2.0]);
        rec.n = DVector::from_vec(vec![0.75, 1.25]);
        rec.sens = Some(Sensitivities {
            dn_dt: DVector::from_vec(vec![0.3, -0.3]),
            dn_dp: DVector::from_vec(vec![1e-6, -1e-6]),
            dn_db: DMatrix::from_column_slice(2, 1, &[0.5, 0.5]),
            stable: vec![true, true],
        });
        let pred = predict(&rec, 300.0, 1e5, &rec.b.clone()).unwrap();
        assert_eq!(pred.n[0].to_bits(), rec.n[0].to_bits());
        assert_eq!(pred.n[1].to_bits(), rec.n[1].to_bits());
        assert_eq!(pred.clipped.amax(), 0.0);
    }

    #[test]
    fn identity_amount_sensitivity_shifts_amounts_by_delta_b() {
        let mut rec = stub_record(300.0, 1e5, &[1.0, 2.0]);
        rec.sens = Some(Sensitivities {
            dn_dt: DVector::zeros(2),
            dn_dp: DVector::zeros(2),
            dn_db: DMatrix::identity(2, 2),
            stable: vec![true, true],
        });
        let pred = predict(&rec, 300.0, 1e5, &DVector::from_vec(vec![1.25, 2.5])).unwrap();
        assert_eq!(pred.n[0], 1.25);
        assert_eq!(pred.n[1], 1.5);
    }

    #[test]
    fn negative_predictions_clip_to_zero_and_report_the_magnitude() {
        let mut rec = stub_record(300.0, 1e5, &[1.0]);
        rec.n = DVector::from_vec(vec![0.1, 0.9]);
        rec.sens = Some(Sensitivities {
            dn_dt: DVector::zeros(2),
            dn_dp: DVector::zeros(2),
            dn_db: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            stable: vec![true, true],
        });
        let pred = predict(&rec, 300.0, 1e5, &DVector::from_vec(vec![0.7])).unwrap();
        assert_eq!(pred.n[0], 0.0);
        assert_relative_eq!(pred.clipped[0], 0.2, epsilon = 1e-15);
        assert_eq!(pred.clipped[1], 0.0);
    }

    #[test]
    fn potentials_at_the_record_input_are_the_recorded_potentials() {
        let mut rec = stub_record(300.0, 1e5, &[1.0]);
        rec.mu = DVector::from_vec(vec![-5.0e4, -6.0e4]);
        rec.dmu_dt = DVector::from_vec(vec![12.0, -7.0]);
        rec.dmu_dn = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mu = predict_potentials(&rec, &rec.n.clone(), rec.t, rec.p);
        assert_eq!(mu[0].to_bits(), rec.mu[0].to_bits());
        assert_eq!(mu[1].to_bits(), rec.mu[1].to_bits());
    }

    fn saturated_record(b: &DVector<f64>) -> (crate::chemsys::ChemicalSystem, ThermoModel, EquilibriumRecord) {
        let (sys, model) = presets::mineral_saturation();
        let sol = equilibrate(&sys, &model, 300.0, 1e5, b, None, &opts()).unwrap();
        let sens = sensitivities(&sys, &sol, &opts()).unwrap();
        let rec = EquilibriumRecord::from_solution(&sol, Some(sens), false);
        (sys, model, rec)
    }

    #[test]
    fn mineral_addition_changes_only_the_mineral_amount() {
        // saturated solution: 0.5 molal dissolved, the rest as solid
        let b = DVector::from_vec(vec![55.508, 1.5]);
        let (sys, model, rec) = saturated_record(&b);
        let solid = sys.species_index("S(s)").unwrap();
        assert!(rec.n[solid] > 0.9);

        let b_q = DVector::from_vec(vec![55.508, 1001.5]);
        let pred = predict(&rec, 300.0, 1e5, &b_q).unwrap();
        // the added thousand moles all land in the solid
        assert_relative_eq!(pred.n[solid], rec.n[solid] + 1000.0, max_relative = 1e-9);
        for i in 0..sys.n_species() {
            if i != solid {
                assert_relative_eq!(pred.n[i], rec.n[i], max_relative = 1e-9);
            }
        }
        // and the full solver agrees with the extrapolation
        let oracle = equilibrate(&sys, &model, 300.0, 1e5, &b_q, None, &opts()).unwrap();
        for i in 0..sys.n_species() {
            assert_relative_eq!(pred.n[i], oracle.state.n[i], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn mineral_addition_leaves_predicted_potentials_unchanged() {
        let b = DVector::from_vec(vec![55.508, 1.5]);
        let (_, _, rec) = saturated_record(&b);
        let b_q = DVector::from_vec(vec![55.508, 1001.5]);
        let pred = predict(&rec, 300.0, 1e5, &b_q).unwrap();
        let mu_q = predict_potentials(&rec, &pred.n, 300.0, 1e5);
        let rt = R * 300.0;
        for i in 0..mu_q.len() {
            assert!((mu_q[i] - rec.mu[i]).abs() / rt < 1e-8);
        }
    }

    #[test]
    fn potential_test_accepts_the_mineral_addition_the_amount_test_rejects() {
        let b = DVector::from_vec(vec![55.508, 1.5]);
        let (sys, _, rec) = saturated_record(&b);
        let solid = sys.species_index("S(s)").unwrap();
        let b_q = DVector::from_vec(vec![55.508, 1001.5]);
        let pred = predict(&rec, 300.0, 1e5, &b_q).unwrap();

        let mu_q = predict_potentials(&rec, &pred.n, 300.0, 1e5);
        let (ok_mu, _) = accept(&rec, &mu_q, &Tolerances::new(0.1, 0.1, TestKind::ChemicalPotential));
        assert!(ok_mu);

        let (ok_n, m) = accept_amounts(&rec, &pred.n, &Tolerances::new(0.1, 0.1, TestKind::Amounts));
        assert!(!ok_n);
        // the violation is the mineral alone
        for i in 0..m.len() {
            assert_eq!(m[i] > 0.0, i == solid, "margin sign at species {i}");
        }
    }

    #[test]
    fn a_materially_clipped_prediction_learns_instead_of_answering() {
        let (sys, model) = presets::mineral_saturation();
        let mut store = RecordStore::new(&sys, SearchConfig::default());
        let tol = Tolerances::default();
        let b = DVector::from_vec(vec![55.508, 1.5]);
        let first =
            solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b, &tol, None, &opts()).unwrap();
        assert_eq!(first.kind, SolveKind::Learned);

        // removing more S than the solid holds extrapolates the mineral
        // negative; the potentials still match the record, but the clipped
        // mass defect is material, so the call must learn
        let b_q = DVector::from_vec(vec![55.508, 0.4]);
        let exhausted =
            solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b_q, &tol, None, &opts()).unwrap();
        assert_eq!(exhausted.kind, SolveKind::Learned);
        assert!(exhausted.clipped.unwrap().amax() > 1e-3);
        assert_eq!(store.len(), 2);

        // a query that keeps the mineral present is still answered
        let b_ok = DVector::from_vec(vec![55.508, 1.2]);
        let kept =
            solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b_ok, &tol, None, &opts()).unwrap();
        assert_eq!(kept.kind, SolveKind::Predicted);
    }

    #[test]
    fn predicted_potentials_converge_quadratically_to_evaluated_ones() {
        let (sys, model) = presets::aqueous_dimer();
        let b = DVector::from_vec(vec![55.508, 1.0]);
        let sol = equilibrate(&sys, &model, 300.0, 1e5, &b, None, &opts()).unwrap();
        let sens = sensitivities(&sys, &sol, &opts()).unwrap();
        let rec = EquilibriumRecord::from_solution(&sol, Some(sens), false);
        let rt = R * 300.0;

        let mut pts = Vec::new();
        for k in 0..6 {
            let h = 0.2 / f64::powi(2.0, k);
            let b_q = DVector::from_vec(vec![55.508, 1.0 + h]);
            let pred = predict(&rec, 300.0, 1e5, &b_q).unwrap();
            let mu_est = predict_potentials(&rec, &pred.n, 300.0, 1e5);
            let state = ChemicalState { t: 300.0, p: 1e5, n: pred.n };
            let mu_eval = model.properties(&sys, &state).unwrap().mu;
            let err = (mu_est - mu_eval).amax() / rt;
            pts.push((h.ln(), err.ln()));
        }
        let xm = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let ym = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - xm) * (p.0 - xm)).sum::<f64>();
        assert!(slope >= 1.8, "potential extrapolation error slope {slope}");
    }

    #[test]
    fn first_call_learns_and_an_exact_repeat_predicts() {
        let (sys, model) = presets::aqueous_dimer();
        let mut store = RecordStore::new(&sys, SearchConfig::default());
        let b = DVector::from_vec(vec![55.508, 1.0]);
        let tol = Tolerances::default();
        assert_eq!((store.stats().learned, store.stats().predicted), (0, 0));

        let first = solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b, &tol, None, &opts()).unwrap();
        assert_eq!(first.kind, SolveKind::Learned);
        assert_eq!(first.nearest_id, None);
        assert!(first.distance.is_infinite());
        assert_eq!((store.stats().learned, store.stats().predicted), (1, 0));
        assert_eq!(store.stats().learned, store.len());

        let again = solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b, &tol, None, &opts()).unwrap();
        assert_eq!(again.kind, SolveKind::Predicted);
        assert_eq!(again.nearest_id, Some(0));
        assert_eq!(again.distance, 0.0);
        // exact repeat reproduces the stored amounts bit for bit
        for i in 0..sys.n_species() {
            assert_eq!(again.state.n[i].to_bits(), store.records()[0].n[i].to_bits());
        }
        assert_eq!((store.stats().learned, store.stats().predicted), (1, 1));
        assert_eq!(store.len(), 1);
        assert_eq!(store.stats().log.len(), 2);
        assert_eq!(store.stats().log[1].kind, SolveKind::Predicted);
        assert!(store.stats().log.iter().all(|l| l.seconds >= 0.0));
    }

    #[test]
    fn drifting_totals_relearn_once_the_tolerance_is_crossed() {
        let (sys, model) = presets::aqueous_dimer();
        let a = sys.formula_matrix().clone();
        let mut store = RecordStore::new(&sys, SearchConfig::default());
        let tol = Tolerances::new(1e-3, 1e-3, TestKind::ChemicalPotential);
        let o = opts();

        let mut kinds = Vec::new();
        for k in 0..14 {
            let b = DVector::from_vec(vec![55.508, 1.0 + 0.004 * k as f64]);
            let r = solve_smart(&mut store, &sys, &model, 300.0, 1e5, &b, &tol, None, &o).unwrap();
            kinds.push(r.kind);
            if r.kind == SolveKind::Predicted {
                // every prediction conserves mass and stays near the truth
                assert_eq!(r.clipped.as_ref().unwrap().amax(), 0.0);
                let resid = (&a * &r.state.n - &b).amax();
                assert!(resid <= 1e-10 * (1.0 + b.amax()), "balance residual {resid}");
                let oracle = equilibrate(&sys, &model, 300.0, 1e5, &b, None, &o).unwrap();
                for i in 0..sys.n_species() {
                    let err = (r.state.n[i] - oracle.state.n[i]).abs();
                    assert!(
                        err <= 1e-2 * oracle.state.n[i].max(1e-9),
                        "species {i}: predicted {} vs solved {}",
                        r.state.n[i],
                        oracle.state.n[i]
                    );
                }
            }
        }
        let learned: Vec<usize> = (0..kinds.len())
            .filter(|&k| kinds[k] == SolveKind::Learned)
            .collect();
        assert_eq!(kinds[0], SolveKind::Learned);
        assert_eq!(learned.len(), 2, "kinds {kinds:?}");
        // the relearn happens after at least one successful prediction and
        // everything after it predicts again
        assert!(learned[1] > 1);
        assert!(learned[1] < kinds.len() - 1);
        assert_eq!(store.stats().learned, 2);
        assert_eq!(store.stats().predicted, kinds.len() - 2);
    }

    #[test]
    fn store_and_system_signatures_must_match() {
        let (dimer, _) = presets::aqueous_dimer();
        let (mineral, model) = presets::mineral_saturation();
        let mut store = RecordStore::new(&dimer, SearchConfig::default());
        let b = DVector::from_vec(vec![55.508, 1.5]);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = solve_smart(
                &mut store,
                &mineral,
                &model,
                300.0,
                1e5,
                &b,
                &Tolerances::default(),
                None,
                &opts(),
            );
        }));
        assert!(result.is_err());
    }
}
