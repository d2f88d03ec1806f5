//! Branch-flow power-flow solver for radial networks.
//!
//! The solver iterates a backward/forward sweep over the tree:
//!
//! * **backward** (leaves to head): accumulate the receiving-end power of
//!   every segment from net injections, child segment powers, and child
//!   segment losses, using the squared voltages of the previous pass;
//! * **forward** (head to leaves): update squared voltages from the
//!   per-segment drop identity.
//!
//! Convergence is declared on the maximum residual of the four branch-flow
//! equations (power balance per phase, voltage drop, and the current
//! definition `V_i^2 * l_i = P_si^2 + Q_si^2`), evaluated together after each
//! pass. Angles never appear; a radial network is fully described by
//! magnitudes and segment flows.
//!
//! [`eval_der_explicit_voltage`] and [`eval_segment_loss`] evaluate the
//! closed-form identities that express squared voltages and segment losses
//! directly from injections and losses (see the `feeder` module docs); they
//! exist to cross-validate the solver and the sensitivity analysis.

use crate::error::PowerFlowError;
use crate::feeder::{BusId, RadialNetwork};

/// Solver knobs. Defaults: tolerance 1e-10, 100 iterations, flat start.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Maximum residual of the branch-flow equations at which the iteration
    /// stops and the solution is declared converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: 100 }
    }
}

/// Converged (or best-effort) operating point of a radial network.
///
/// Segment quantities are indexed by downstream bus; index 0 is unused and
/// zero. `p_supply[i]`/`q_supply[i]` are the *receiving-end* powers arriving
/// at bus `i` through its upstream segment, so the current definition reads
/// `current_sq[i] = (p_supply[i]^2 + q_supply[i]^2) / v_sq[i]`.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltage magnitude per bus.
    pub v: Vec<f64>,
    /// Squared voltage magnitude per bus.
    pub v_sq: Vec<f64>,
    /// Real power delivered to each bus through its upstream segment.
    pub p_supply: Vec<f64>,
    /// Reactive power delivered to each bus through its upstream segment.
    pub q_supply: Vec<f64>,
    /// Squared current magnitude per segment.
    pub current_sq: Vec<f64>,
    /// Real loss per segment (`r * current_sq`).
    pub p_loss: Vec<f64>,
    /// Reactive loss per segment (`x * current_sq`).
    pub q_loss: Vec<f64>,
    /// Real power supplied at the feeder head (covers net load and losses).
    pub p_head: f64,
    /// Reactive power supplied at the feeder head.
    pub q_head: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Maximum branch-flow equation residual at the last iteration.
    pub max_residual: f64,
}

impl PowerFlowSolution {
    /// Total real loss across all segments.
    pub fn total_loss(&self) -> f64 {
        self.p_loss.iter().sum()
    }
}

/// Maximum residuals of the four branch-flow equations, one per family.
#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    /// Real power balance per segment.
    pub power_p: f64,
    /// Reactive power balance per segment.
    pub power_q: f64,
    /// Voltage-drop identity per segment.
    pub voltage: f64,
    /// Current definition per segment.
    pub current: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.power_p.max(self.power_q).max(self.voltage).max(self.current)
    }
}

/// Evaluates the branch-flow equation residuals of `sol` against `injections`.
pub fn residuals(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    sol: &PowerFlowSolution,
) -> Residuals {
    let mut res = Residuals::default();
    for &b in network.preorder().iter().skip(1) {
        let (pi, qi) = injections[b];
        let mut sum_p = 0.0;
        let mut sum_q = 0.0;
        for &c in network.children(b) {
            sum_p += sol.p_supply[c] + sol.p_loss[c];
            sum_q += sol.q_supply[c] + sol.q_loss[c];
        }
        let r = network.segment_r(b);
        let x = network.segment_x(b);
        let p = network.parent(b).expect("non-head bus has a parent");
        res.power_p = res.power_p.max((sol.p_supply[b] - pi - sum_p).abs());
        res.power_q = res.power_q.max((sol.q_supply[b] - qi - sum_q).abs());
        let drop = sol.v_sq[p]
            - sol.v_sq[b]
            - 2.0 * (r * sol.p_supply[b] + x * sol.q_supply[b])
            - (r * r + x * x) * sol.current_sq[b];
        res.voltage = res.voltage.max(drop.abs());
        let cur = sol.v_sq[b] * sol.current_sq[b]
            - (sol.p_supply[b] * sol.p_supply[b] + sol.q_supply[b] * sol.q_supply[b]);
        res.current = res.current.max(cur.abs());
    }
    res
}

/// Solves the branch-flow equations by backward/forward sweeps.
///
/// `injections[b]` is the net `(p, q)` consumed at bus `b` (demand minus
/// generation). Returns `Ok` with `converged == false` if the iteration cap
/// ran out (best-effort solution for inspection); returns an error only when
/// a squared voltage collapses to zero or below.
pub fn solve(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    opts: SolveOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = network.bus_count();
    assert_eq!(injections.len(), n, "one injection pair per bus");
    let v0_sq = network.v0() * network.v0();

    let mut sol = PowerFlowSolution {
        v: vec![network.v0(); n],
        v_sq: vec![v0_sq; n],
        p_supply: vec![0.0; n],
        q_supply: vec![0.0; n],
        current_sq: vec![0.0; n],
        p_loss: vec![0.0; n],
        q_loss: vec![0.0; n],
        p_head: 0.0,
        q_head: 0.0,
        iterations: 0,
        converged: false,
        max_residual: f64::INFINITY,
    };

    for it in 1..=opts.max_iter {
        // Backward: children appear after their parent in preorder, so the
        // reverse order visits every child before its parent.
        for &b in network.preorder().iter().rev() {
            if b == 0 {
                continue;
            }
            let (pi, qi) = injections[b];
            let mut p = pi;
            let mut q = qi;
            for &c in network.children(b) {
                p += sol.p_supply[c] + sol.p_loss[c];
                q += sol.q_supply[c] + sol.q_loss[c];
            }
            let cur = (p * p + q * q) / sol.v_sq[b];
            sol.p_supply[b] = p;
            sol.q_supply[b] = q;
            sol.current_sq[b] = cur;
            sol.p_loss[b] = network.segment_r(b) * cur;
            sol.q_loss[b] = network.segment_x(b) * cur;
        }
        // Forward: propagate the squared-voltage drop from the head out.
        for &b in network.preorder().iter().skip(1) {
            let p = network.parent(b).expect("non-head bus has a parent");
            let r = network.segment_r(b);
            let x = network.segment_x(b);
            let v2 = sol.v_sq[p]
                - 2.0 * (r * sol.p_supply[b] + x * sol.q_supply[b])
                - (r * r + x * x) * sol.current_sq[b];
            if v2 <= 0.0 {
                return Err(PowerFlowError::VoltageCollapse { bus: b, iteration: it });
            }
            sol.v_sq[b] = v2;
        }
        sol.iterations = it;
        sol.max_residual = residuals(network, injections, &sol).max();
        if sol.max_residual < opts.tol {
            sol.converged = true;
            break;
        }
    }

    for b in 0..n {
        sol.v[b] = sol.v_sq[b].sqrt();
    }
    let (p0, q0) = injections[0];
    sol.p_head = p0
        + network
            .children(0)
            .iter()
            .map(|&c| sol.p_supply[c] + sol.p_loss[c])
            .sum::<f64>();
    sol.q_head = q0
        + network
            .children(0)
            .iter()
            .map(|&c| sol.q_supply[c] + sol.q_loss[c])
            .sum::<f64>();
    Ok(sol)
}

/// Evaluates the explicit squared-voltage identity at every bus from the
/// injections and the solved segment losses, using the exact telescoped loss
/// coefficients. At a converged solution this reproduces `sol.v_sq` to
/// solver precision; it exists to validate the explicit model the
/// sensitivity analysis is built on.
pub fn eval_der_explicit_voltage(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    sol: &PowerFlowSolution,
) -> Vec<f64> {
    let n = network.bus_count();
    let v0_sq = network.v0() * network.v0();
    let mut out = vec![v0_sq; n];
    for k in 1..n {
        let mut acc = v0_sq;
        for i in 1..n {
            let (pi, qi) = injections[i];
            if pi != 0.0 || qi != 0.0 {
                acc -= 2.0
                    * (network.common_path_resistance(k, i) * pi
                        + network.common_path_reactance(k, i) * qi);
            }
            if sol.p_loss[i] != 0.0 {
                acc -= network.loss_coefficient(k, i) * sol.p_loss[i];
            }
        }
        out[k] = acc;
    }
    out
}

/// Same identity with the first-order loss-transfer coefficients
/// (`2 * loss_transfer`) instead of the exact ones. The gap to the exact form
/// equals `sum over segments i on the head-to-k path of
/// (r_i + b_i x_i) * p_loss[i]`; a regression test pins that relation.
pub fn eval_der_explicit_voltage_as_printed(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    sol: &PowerFlowSolution,
) -> Vec<f64> {
    let n = network.bus_count();
    let v0_sq = network.v0() * network.v0();
    let mut out = vec![v0_sq; n];
    for k in 1..n {
        let mut acc = v0_sq;
        for i in 1..n {
            let (pi, qi) = injections[i];
            acc -= 2.0
                * (network.common_path_resistance(k, i) * pi
                    + network.common_path_reactance(k, i) * qi);
            acc -= 2.0 * network.loss_transfer(k, i) * sol.p_loss[i];
        }
        out[k] = acc;
    }
    out
}

/// Evaluates the real loss of the segment into bus `k` from net injections
/// and the other segments' solved losses, via the subtree aggregation
/// identity:
///
/// ```text
/// loss_k = r_k / V_k^2 * [ (p_k + sum_desc (p_m + loss_m))^2
///                        + (q_k + sum_desc (q_m + b_m * loss_m))^2 ]
/// ```
///
/// At a converged solution this equals `sol.p_loss[k]`.
pub fn eval_segment_loss(
    network: &RadialNetwork,
    injections: &[(f64, f64)],
    sol: &PowerFlowSolution,
    k: BusId,
) -> Result<f64, PowerFlowError> {
    if k == 0 || k >= network.bus_count() {
        return Err(PowerFlowError::UnknownBus(k));
    }
    let (mut p, mut q) = injections[k];
    for &m in network.descendants(k) {
        let (pm, qm) = injections[m];
        p += pm + sol.p_loss[m];
        q += qm + network.segment_xr_ratio(m) * sol.p_loss[m];
    }
    Ok(network.segment_r(k) / sol.v_sq[k] * (p * p + q * q))
}
