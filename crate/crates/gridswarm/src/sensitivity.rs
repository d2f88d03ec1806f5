//! Voltage sensitivity analysis and grid-edge voltage inference.
//!
//! # Sensitivities
//!
//! Both sensitivity variants answer: how does the voltage magnitude at bus
//! `k` move per unit of *injected* (generated) power at bus `j`? Injection
//! convention throughout — positive entries mean extra generation raises
//! voltage.
//!
//! * [`lossless_sensitivity`] drops the loss terms of the branch-flow
//!   equations, which collapses the answer to shared-path impedance over
//!   the head voltage: `R_kj / V0` and `X_kj / V0`. These matrices are
//!   operating-point independent.
//! * [`exact_sensitivity`] differentiates the full model at a solved
//!   operating point. The explicit squared-voltage identity and the subtree
//!   loss aggregation couple the unknowns `{dV_k}` and `{d loss_i}` into one
//!   linear system that is assembled once, LU-factored once, and solved for
//!   every injection column (columns are independent, so they parallelize).
//!
//! The system, per differentiation variable `u` (= p or q injected at `j`):
//!
//! ```text
//! V_k dV_k + sum_i (c_ki / 2) dL_i                     = R_kj   (or X_kj)
//! dL_i + (2 L_i / V_i) dV_i
//!      - (2 r_i / V_i^2) sum_{m in D_i} (P_i + b_m Q_i) dL_m
//!                                                      = -(2 r_i / V_i^2) S_i [j in T_i]
//! ```
//!
//! where `c_ki` are the exact loss coefficients, `L_i` the segment losses,
//! `P_i`/`Q_i` the receiving-end segment powers, `D_i` strict descendants,
//! `T_i` the subtree including `i`, and `S_i` is `P_i` for p-columns and
//! `Q_i` for q-columns. The loss-row coupling admits two printed variants
//! (see [`ExactOptions`]); the defaults are the product-rule-correct ones
//! and a regression test pins them against finite differences.
//!
//! # Metering and inference
//!
//! [`MeterBank`] models two meter classes: realtime buses report every
//! step, sampled buses only refresh a snapshot every `sample_period`. For a
//! bus with only a stale snapshot, [`infer_bus_voltage`] estimates the
//! present voltage from realtime anchor buses: it locates the nearest
//! metered ancestor and descendant, places the bus fractionally between
//! them using the snapshot profile, and re-evaluates that fraction on the
//! live anchor readings ([`InferenceForm`] selects among three published
//! variants). When anchors are missing or their snapshot readings
//! coincide, it falls back to rigid-offset tracking of the closest anchor.

use serde::{Deserialize, Serialize};

use crate::error::SensitivityError;
use crate::feeder::{BusId, RadialNetwork};
use crate::par::{map_indices, Execution};
use crate::powerflow::PowerFlowSolution;

/// Anchor snapshot readings closer than this are considered degenerate for
/// the ratio-based inference forms.
pub const DEGENERATE_ANCHOR_GAP: f64 = 1e-4;

/// Dense voltage-sensitivity matrices in injection convention.
///
/// `dv_dp[k][j]` is the change of `V_k` per unit of real power *generated*
/// at bus `j` (and `dv_dq` likewise for reactive power). Row and column 0
/// are zero: the head voltage is fixed and injections at the head land on
/// the slack.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub dv_dp: Vec<Vec<f64>>,
    pub dv_dq: Vec<Vec<f64>>,
}

impl SensitivityMatrices {
    /// Self-sensitivity of voltage to reactive injection at `bus` — the
    /// voltage-control gain used by the reactive controllers.
    pub fn self_dq(&self, bus: BusId) -> f64 {
        self.dv_dq[bus][bus]
    }

    fn zeros(n: usize) -> Self {
        SensitivityMatrices { dv_dp: vec![vec![0.0; n]; n], dv_dq: vec![vec![0.0; n]; n] }
    }
}

/// Loss-free sensitivities: shared-path impedance over the head voltage.
pub fn lossless_sensitivity(network: &RadialNetwork) -> SensitivityMatrices {
    let n = network.bus_count();
    let v0 = network.v0();
    let mut out = SensitivityMatrices::zeros(n);
    for k in 1..n {
        for j in 1..n {
            out.dv_dp[k][j] = network.common_path_resistance(k, j) / v0;
            out.dv_dq[k][j] = network.common_path_reactance(k, j) / v0;
        }
    }
    out
}

/// Which set of downstream segments couples into each loss derivative row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossRecursionSet {
    /// All strict descendants — the full product-rule expansion.
    #[default]
    Descendants,
    /// Direct children only. Kept for comparison; underestimates the
    /// coupling on feeders deeper than two levels.
    Children,
}

/// Which segment's receiving-end powers weight the loss coupling terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingFlow {
    /// The aggregating (upstream) segment `i` — the product-rule factor.
    #[default]
    UpstreamSupply,
    /// The member segment `m` itself. Kept for comparison.
    MemberSupply,
}

/// Assembly options for [`exact_sensitivity`]. Defaults are the verified
/// formulation; the alternates exist so the difference can be demonstrated.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactOptions {
    pub recursion_set: LossRecursionSet,
    pub coupling: CouplingFlow,
    pub execution: Execution,
}

/// Differentiates the full branch-flow model at the operating point `sol`.
///
/// Builds the coupled `{dV, dLoss}` system (independent of the injection
/// column), factors it once, and solves one RHS pair per bus. Errors only
/// if the system is singular at this operating point.
pub fn exact_sensitivity(
    network: &RadialNetwork,
    sol: &PowerFlowSolution,
    opts: &ExactOptions,
) -> Result<SensitivityMatrices, SensitivityError> {
    let n = network.bus_count();
    let mut out = SensitivityMatrices::zeros(n);
    if n <= 1 {
        return Ok(out);
    }
    let m = n - 1; // unknowns indexed by bus 1..n
    let v_idx = |k: BusId| k - 1;
    let l_idx = |i: BusId| m + i - 1;

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * m, 2 * m);
    for k in 1..n {
        let row = v_idx(k);
        a[(row, v_idx(k))] = sol.v[k];
        for i in 1..n {
            a[(row, l_idx(i))] = network.loss_coefficient(k, i) / 2.0;
        }
    }
    for i in 1..n {
        let row = l_idx(i);
        a[(row, l_idx(i))] += 1.0;
        a[(row, v_idx(i))] += 2.0 * sol.p_loss[i] / sol.v[i];
        let scale = 2.0 * network.segment_r(i) / sol.v_sq[i];
        let members: &[BusId] = match opts.recursion_set {
            LossRecursionSet::Descendants => network.descendants(i),
            LossRecursionSet::Children => network.children(i),
        };
        for &mm in members {
            let (p_ref, q_ref) = match opts.coupling {
                CouplingFlow::UpstreamSupply => (sol.p_supply[i], sol.q_supply[i]),
                CouplingFlow::MemberSupply => (sol.p_supply[mm], sol.q_supply[mm]),
            };
            a[(row, l_idx(mm))] -= scale * (p_ref + network.segment_xr_ratio(mm) * q_ref);
        }
    }
    let lu = a.lu();

    // One RHS pair (p-column, q-column) per injection bus; the factored
    // system is shared read-only, so the columns can run on the pool.
    let columns = map_indices(opts.execution, m, |idx| {
        let j = idx + 1;
        let mut rhs = nalgebra::DMatrix::<f64>::zeros(2 * m, 2);
        for k in 1..n {
            rhs[(v_idx(k), 0)] = network.common_path_resistance(k, j);
            rhs[(v_idx(k), 1)] = network.common_path_reactance(k, j);
        }
        for i in 1..n {
            if network.is_ancestor_or_self(i, j) {
                let scale = 2.0 * network.segment_r(i) / sol.v_sq[i];
                rhs[(l_idx(i), 0)] = -scale * sol.p_supply[i];
                rhs[(l_idx(i), 1)] = -scale * sol.q_supply[i];
            }
        }
        lu.solve(&rhs)
    });

    for (idx, col) in columns.into_iter().enumerate() {
        let j = idx + 1;
        let col = col.ok_or(SensitivityError::SingularSystem)?;
        for k in 1..n {
            out.dv_dp[k][j] = col[(v_idx(k), 0)];
            out.dv_dq[k][j] = col[(v_idx(k), 1)];
        }
    }
    Ok(out)
}

/// Normalized worst-entry disagreement between two sensitivity variants:
/// `max |a - b|` over both matrices, divided by `max |b|`.
pub fn sensitivity_gap(a: &SensitivityMatrices, b: &SensitivityMatrices) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (ra, rb) in a.dv_dp.iter().zip(&b.dv_dp).chain(a.dv_dq.iter().zip(&b.dv_dq)) {
        for (&ea, &eb) in ra.iter().zip(rb) {
            num = num.max((ea - eb).abs());
            den = den.max(eb.abs());
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

// ---------------------------------------------------------------------------
// Metering
// ---------------------------------------------------------------------------

/// Meter classes attached to buses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeterKind {
    /// Reports the live voltage every simulation step.
    Realtime,
    /// Reports only at sampling instants (default every 900 s).
    Sampled,
}

/// Voltage meter state for a feeder: live readings at realtime buses plus
/// the most recent synchronized snapshot of *all* metered buses.
///
/// Snapshots are taken at `t = 0` and then every `sample_period_ms`. The
/// snapshot also covers realtime buses — inference needs anchor readings
/// from the same instant as the stale bus reading.
#[derive(Debug, Clone)]
pub struct MeterBank {
    realtime: Vec<BusId>,
    sampled: Vec<BusId>,
    sample_period_ms: u64,
    last_sample_ms: Option<u64>,
    snapshot: Vec<Option<f64>>,
    current: Vec<Option<f64>>,
}

impl MeterBank {
    /// `realtime` and `sampled` are bus lists (deduplicated here; a bus in
    /// both lists counts as realtime). `bus_count` sizes the tables.
    pub fn new(
        bus_count: usize,
        realtime: &[BusId],
        sampled: &[BusId],
        sample_period_ms: u64,
    ) -> Self {
        let mut rt: Vec<BusId> = realtime.to_vec();
        rt.sort_unstable();
        rt.dedup();
        let mut sp: Vec<BusId> = sampled
            .iter()
            .copied()
            .filter(|b| !rt.contains(b))
            .collect();
        sp.sort_unstable();
        sp.dedup();
        MeterBank {
            realtime: rt,
            sampled: sp,
            sample_period_ms: sample_period_ms.max(1),
            last_sample_ms: None,
            snapshot: vec![None; bus_count],
            current: vec![None; bus_count],
        }
    }

    pub fn realtime_buses(&self) -> &[BusId] {
        &self.realtime
    }

    pub fn sampled_buses(&self) -> &[BusId] {
        &self.sampled
    }

    pub fn is_realtime(&self, bus: BusId) -> bool {
        self.realtime.binary_search(&bus).is_ok()
    }

    pub fn is_sampled(&self, bus: BusId) -> bool {
        self.sampled.binary_search(&bus).is_ok()
    }

    /// Feeds the solved voltages for time `t_ms` into the bank: realtime
    /// readings always, and a synchronized snapshot when a sampling instant
    /// has been reached.
    pub fn update(&mut self, t_ms: u64, v: &[f64]) {
        for &b in &self.realtime {
            self.current[b] = Some(v[b]);
        }
        let due = match self.last_sample_ms {
            None => true,
            Some(last) => t_ms >= last + self.sample_period_ms,
        };
        if due {
            self.last_sample_ms = Some(t_ms);
            for &b in self.realtime.iter().chain(&self.sampled) {
                self.snapshot[b] = Some(v[b]);
            }
        }
    }

    /// Live reading at a realtime bus.
    pub fn current_v(&self, bus: BusId) -> Option<f64> {
        self.current.get(bus).copied().flatten()
    }

    /// Reading of `bus` from the latest synchronized snapshot.
    pub fn snapshot_v(&self, bus: BusId) -> Option<f64> {
        self.snapshot.get(bus).copied().flatten()
    }

    /// Time of the latest snapshot, if one has been taken.
    pub fn last_sample_ms(&self) -> Option<u64> {
        self.last_sample_ms
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Variants of the two-anchor estimator. All three place bus `j` at the
/// snapshot-profile fraction
/// `sigma = (V_j(tk) - V_up(tk)) / (V_dn(tk) - V_up(tk))`
/// between the anchors and differ in which live/stale readings the fraction
/// is re-applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceForm {
    /// `V_up(tk) + sigma * (V_dn(t) - V_up(tk))`: one live reading against
    /// one stale reading.
    Verbatim,
    /// `V_up(t) + sigma * (V_dn(t) - V_up(t))`: the live anchor span. This
    /// is the only variant exact under both a uniform voltage translation
    /// and at `t = tk`, hence the default.
    #[default]
    AnchorSpan,
    /// `V_j(tk) + sigma * (V_dn(t) - V_dn(tk))`: track the downstream
    /// anchor's movement only.
    AnchorDelta,
}

/// Nearest comparable anchors for a bus: closest metered strict ancestor
/// and closest metered strict descendant, when they exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorChoice {
    pub upstream: Option<BusId>,
    pub downstream: Option<BusId>,
}

/// Selects anchors for `j` among `candidates` (realtime-metered buses).
///
/// Upstream: the deepest candidate that is a strict ancestor of `j`.
/// Downstream: the shallowest candidate strictly below `j`; depth ties go
/// to the lower bus id. `j` itself is never its own anchor.
pub fn select_anchors(network: &RadialNetwork, j: BusId, candidates: &[BusId]) -> AnchorChoice {
    let mut upstream: Option<BusId> = None;
    let mut downstream: Option<BusId> = None;
    for &c in candidates {
        if c == j {
            continue;
        }
        if network.is_strict_descendant(j, c) {
            // c above j
            if upstream.is_none_or(|u| {
                network.depth(c) > network.depth(u)
                    || (network.depth(c) == network.depth(u) && c < u)
            }) {
                upstream = Some(c);
            }
        } else if network.is_strict_descendant(c, j) {
            if downstream.is_none_or(|d| {
                network.depth(c) < network.depth(d)
                    || (network.depth(c) == network.depth(d) && c < d)
            }) {
                downstream = Some(c);
            }
        }
    }
    AnchorChoice { upstream, downstream }
}

/// Two-anchor estimate of the live voltage at a bus from its snapshot
/// reading and the anchors' snapshot + live readings.
///
/// Errors with [`SensitivityError::DegenerateAnchor`] when the snapshot
/// profile between the anchors is too flat to carry a ratio.
pub fn infer_between_anchors(
    form: InferenceForm,
    v_j_snap: f64,
    v_up_snap: f64,
    v_dn_snap: f64,
    v_up_live: f64,
    v_dn_live: f64,
) -> Result<f64, SensitivityError> {
    let span = v_dn_snap - v_up_snap;
    if span.abs() < DEGENERATE_ANCHOR_GAP {
        return Err(SensitivityError::DegenerateAnchor { gap: span.abs() });
    }
    let sigma = (v_j_snap - v_up_snap) / span;
    Ok(match form {
        InferenceForm::Verbatim => v_up_snap + sigma * (v_dn_live - v_up_snap),
        InferenceForm::AnchorSpan => v_up_live + sigma * (v_dn_live - v_up_live),
        InferenceForm::AnchorDelta => v_j_snap + sigma * (v_dn_live - v_dn_snap),
    })
}

/// Rigid-offset estimate: the bus keeps its snapshot offset from a single
/// anchor, `V_j(tk) + (V_a(t) - V_a(tk))`.
pub fn infer_offset(v_j_snap: f64, v_anchor_snap: f64, v_anchor_live: f64) -> f64 {
    v_j_snap + (v_anchor_live - v_anchor_snap)
}

/// Full inference pipeline for one bus.
///
/// Picks anchors from `candidates`, applies the two-anchor `form` when both
/// exist, and degrades gracefully: degenerate or one-sided anchor pairs
/// fall back to rigid-offset tracking (preferring the upstream anchor); if
/// no candidate is comparable with `j`, the candidate sharing the longest
/// head path with `j` (ties to the lower id) serves as the offset anchor.
pub fn infer_bus_voltage(
    network: &RadialNetwork,
    bank: &MeterBank,
    form: InferenceForm,
    j: BusId,
    candidates: &[BusId],
) -> Result<f64, SensitivityError> {
    if j >= network.bus_count() {
        return Err(SensitivityError::UnknownBus(j));
    }
    let v_j_snap = bank.snapshot_v(j).ok_or(SensitivityError::UnknownBus(j))?;
    let reading = |b: BusId| -> Result<(f64, f64), SensitivityError> {
        match (bank.snapshot_v(b), bank.current_v(b)) {
            (Some(s), Some(c)) => Ok((s, c)),
            _ => Err(SensitivityError::NoAnchor { bus: j }),
        }
    };
    let anchors = select_anchors(network, j, candidates);
    match (anchors.upstream, anchors.downstream) {
        (Some(up), Some(dn)) => {
            let (up_snap, up_live) = reading(up)?;
            let (dn_snap, dn_live) = reading(dn)?;
            match infer_between_anchors(form, v_j_snap, up_snap, dn_snap, up_live, dn_live) {
                Ok(v) => Ok(v),
                Err(SensitivityError::DegenerateAnchor { .. }) => {
                    Ok(infer_offset(v_j_snap, up_snap, up_live))
                }
                Err(e) => Err(e),
            }
        }
        (Some(a), None) | (None, Some(a)) => {
            let (a_snap, a_live) = reading(a)?;
            Ok(infer_offset(v_j_snap, a_snap, a_live))
        }
        (None, None) => {
            // No comparable anchor: offset against the candidate sharing the
            // longest head path with j.
            let mut best: Option<(usize, BusId)> = None;
            for &c in candidates {
                if c == j {
                    continue;
                }
                let share = network.depth(network.deepest_common_bus(j, c));
                if best.is_none_or(|(s, b)| share > s || (share == s && c < b)) {
                    best = Some((share, c));
                }
            }
            let (_, anchor) = best.ok_or(SensitivityError::NoAnchor { bus: j })?;
            let (a_snap, a_live) = reading(anchor)?;
            Ok(infer_offset(v_j_snap, a_snap, a_live))
        }
    }
}
