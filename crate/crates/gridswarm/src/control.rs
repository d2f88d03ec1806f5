//! Two-level distributed DER control.
//!
//! Each agent runs two coupled consensus controllers on its inverter:
//!
//! * **Reactive level** ([`step_q`]): the reactive utilization `q_util`
//!   (fraction of the momentary reactive capability, in `[-1, 1]`) follows
//!   a cooperative consensus term plus a local voltage-error term — the
//!   deadzone-filtered deviation of the bus voltage from an adaptive
//!   reference, weighted by the bus's own voltage/reactive-power
//!   sensitivity. Absorbing reactive power pulls the local voltage down.
//!
//! * **Active level** ([`step_p`]): the curtailment fraction `curtail`
//!   (share of available active power withheld, in `[0, 1]`) follows a
//!   network-wide consensus term plus forcing from the margin/violation
//!   indices computed off the network voltage extrema: violations push
//!   curtailment up, spare margin lets it relax back — each rate gated by
//!   the agent's remaining reactive headroom with a small floor, so active
//!   power is touched mainly once reactive capability is exhausted, and
//!   released only while reactive headroom exists.
//!
//! Both states integrate with a projected Euler step whose clamp realizes
//! the published boundary-hold rules exactly. Curtailing active power
//! enlarges the reactive capability circle, so each combined sub-step runs
//! active first, re-derives the reactive capability, then steps reactive
//! ([`der_substep`]).

use crate::error::ControlError;
use crate::feeder::DerUnit;

/// Reactive-level parameters (also carries the voltage band shared by the
/// margin/violation indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QControlParams {
    /// Deadzone half-width on the voltage error, pu.
    pub deadband: f64,
    /// Self-weight of the adaptive reference (`1.0` ignores neighbors).
    pub self_weight: f64,
    /// Cooperative consensus gain.
    pub consensus_gain: f64,
    /// Voltage-error gain.
    pub volt_gain: f64,
    /// Lower operational voltage limit, pu.
    pub v_lo: f64,
    /// Upper operational voltage limit, pu.
    pub v_hi: f64,
}

impl Default for QControlParams {
    fn default() -> Self {
        QControlParams {
            deadband: 0.005,
            self_weight: 0.5,
            consensus_gain: 1.0,
            volt_gain: 50.0,
            v_lo: 0.95,
            v_hi: 1.05,
        }
    }
}

impl QControlParams {
    /// Inner band edges the controllers steer into.
    pub fn band(&self) -> (f64, f64) {
        (self.v_lo + self.deadband, self.v_hi - self.deadband)
    }
}

/// Active-level (curtailment) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PControlParams {
    /// Cooperative consensus gain.
    pub consensus_gain: f64,
    /// Margin/violation forcing gain.
    pub volt_gain: f64,
    /// Reactive-headroom floor: violations keep at least this rate even
    /// with reactive power exhausted, and relaxation never exceeds it.
    pub q_headroom_eps: f64,
}

impl Default for PControlParams {
    fn default() -> Self {
        PControlParams { consensus_gain: 1.0, volt_gain: 50.0, q_headroom_eps: 0.02 }
    }
}

/// Controller state of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    /// Reactive utilization in `[-1, 1]` (setpoint = `q_util * q_cap`).
    pub q_util: f64,
    /// Curtailment fraction in `[0, 1]` (setpoint = `(1 - curtail) * p_avail`).
    pub curtail: f64,
    /// Adaptive voltage reference, pu.
    pub v_ref: f64,
    /// Running estimate of the network maximum voltage.
    pub v_max_est: f64,
    /// Running estimate of the network minimum voltage.
    pub v_min_est: f64,
    /// Voltage margin (distance of the estimated extremes inside the band).
    pub margin: f64,
    /// Voltage violation (worst excursion of the extremes past the band).
    pub violation: f64,
}

impl AgentState {
    /// Fresh state at a measured voltage: no utilization, no curtailment,
    /// extremes seeded with the local reading.
    pub fn at_voltage(v: f64) -> Self {
        AgentState {
            q_util: 0.0,
            curtail: 0.0,
            v_ref: v,
            v_max_est: v,
            v_min_est: v,
            margin: 0.0,
            violation: 0.0,
        }
    }

    /// Active utilization, the complement of curtailment.
    pub fn p_util(&self) -> f64 {
        1.0 - self.curtail
    }
}

/// Deadzone filter: passes `x` through when `|x| >= width`, else 0.
/// The boundary belongs to the pass-through branch.
pub fn deadzone(x: f64, width: f64) -> f64 {
    if x.abs() >= width {
        x
    } else {
        0.0
    }
}

/// Clamp to `[lo, hi]`.
pub fn saturate(x: f64, lo: f64, hi: f64) -> f64 {
    x.clamp(lo, hi)
}

/// Adaptive voltage reference: self-weighted blend of the own reading and
/// the mean neighbor reading, saturated into the inner band.
pub fn update_vref(
    v_i: f64,
    neighbor_vs: &[f64],
    params: &QControlParams,
) -> Result<f64, ControlError> {
    if neighbor_vs.is_empty() {
        return Err(ControlError::EmptyNeighborhood);
    }
    let mean = neighbor_vs.iter().sum::<f64>() / neighbor_vs.len() as f64;
    let (lo, hi) = params.band();
    Ok(saturate(params.self_weight * v_i + (1.0 - params.self_weight) * mean, lo, hi))
}

/// One Euler sub-step of the reactive utilization.
///
/// `q_cap` is the momentary reactive capability and `x_self` the bus's own
/// voltage/reactive-power sensitivity (positive: injection raises the local
/// voltage). Returns the new utilization and the reactive setpoint
/// `q_util * q_cap`. The clamp realizes the boundary holds: at `+1` the
/// state moves only for negative drive, at `-1` only for positive.
pub fn step_q(
    q_util: f64,
    v_i: f64,
    v_ref: f64,
    neighbor_q_utils: &[f64],
    q_cap: f64,
    x_self: f64,
    params: &QControlParams,
    dt: f64,
) -> (f64, f64) {
    let consensus: f64 =
        neighbor_q_utils.iter().map(|&g| g - q_util).sum::<f64>() * params.consensus_gain;
    let drive = params.volt_gain
        * (1.0 - params.self_weight)
        * q_cap
        * deadzone(v_i - v_ref, params.deadband)
        * x_self;
    let next = saturate(q_util + dt * (consensus - drive), -1.0, 1.0);
    (next, next * q_cap)
}

/// Margin and violation indices from the agent's extrema estimates.
///
/// The margin is how far *both* estimated extremes sit inside the inner
/// band (zero as soon as either touches it); the violation is the worst
/// excursion past the band. By construction at most one is positive:
/// `margin * violation == 0` always.
pub fn compute_margin_violation(
    v_min_est: f64,
    v_max_est: f64,
    params: &QControlParams,
) -> (f64, f64) {
    let (lo, hi) = params.band();
    let margin = (v_min_est - lo).max(0.0).min((hi - v_max_est).max(0.0));
    let violation = (lo - v_min_est).max(0.0).max((v_max_est - hi).max(0.0));
    (margin, violation)
}

/// One Euler sub-step of the curtailment fraction.
///
/// Violations raise curtailment at a rate gated by the agent's spent
/// reactive headroom (floored by `q_headroom_eps` so saturated agents keep
/// responding); margin relaxes it at a rate capped by the same threshold
/// and vanishing when reactive power is exhausted. Returns the new
/// curtailment and the active setpoint `(1 - curtail) * p_avail`.
pub fn step_p(
    curtail: f64,
    q_util: f64,
    margin: f64,
    violation: f64,
    neighbor_curtails: &[f64],
    p_avail: f64,
    params: &PControlParams,
    dt: f64,
) -> (f64, f64) {
    let consensus: f64 =
        neighbor_curtails.iter().map(|&c| c - curtail).sum::<f64>() * params.consensus_gain;
    let headroom = 1.0 - q_util.abs();
    let up = params.volt_gain * headroom.max(params.q_headroom_eps) * violation;
    let down = params.volt_gain * headroom.min(params.q_headroom_eps) * margin;
    let next = saturate(curtail + dt * (consensus + up - down), 0.0, 1.0);
    (next, (1.0 - next) * p_avail)
}

/// Inputs one agent needs for one combined control sub-step.
#[derive(Debug, Clone, Copy)]
pub struct SubstepInputs<'a> {
    /// Own realtime bus voltage, pu.
    pub v_i: f64,
    /// Latest received neighbor utilizations.
    pub neighbor_q_utils: &'a [f64],
    /// Latest received neighbor curtailments.
    pub neighbor_curtails: &'a [f64],
    /// Inverter apparent-power rating.
    pub s_cap: f64,
    /// Momentarily available active power (already capped at `s_cap`).
    pub p_avail: f64,
    /// Own voltage/reactive-power sensitivity.
    pub x_self: f64,
    /// Whether the active level runs (reactive always does).
    pub curtailment_on: bool,
}

/// One combined sub-step: active level first, then the reactive capability
/// is re-derived from the new active setpoint, then the reactive level
/// steps. Because the reactive setpoint is `q_util * q_cap` with
/// `|q_util| <= 1`, the capability circle `p^2 + q^2 <= s_cap^2` holds by
/// construction after every sub-step. Returns `(p_g, q_g)`.
pub fn der_substep(
    state: &mut AgentState,
    inputs: &SubstepInputs,
    qp: &QControlParams,
    pp: &PControlParams,
    dt: f64,
) -> (f64, f64) {
    let p_g = if inputs.curtailment_on {
        let (next_c, p_g) = step_p(
            state.curtail,
            state.q_util,
            state.margin,
            state.violation,
            inputs.neighbor_curtails,
            inputs.p_avail,
            pp,
            dt,
        );
        state.curtail = next_c;
        p_g
    } else {
        (1.0 - state.curtail) * inputs.p_avail
    };
    let q_cap = DerUnit::q_capability(inputs.s_cap, p_g);
    let (next_g, q_g) = step_q(
        state.q_util,
        inputs.v_i,
        state.v_ref,
        inputs.neighbor_q_utils,
        q_cap,
        inputs.x_self,
        qp,
        dt,
    );
    state.q_util = next_g;
    (p_g, q_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_network, LineSegment};
    use crate::powerflow::{solve, SolveOptions};
    use crate::sensitivity::{exact_sensitivity, ExactOptions};

    #[test]
    fn deadzone_branches() {
        assert_eq!(deadzone(0.03, 0.005), 0.03);
        assert_eq!(deadzone(0.004, 0.005), 0.0);
        assert_eq!(deadzone(-0.005, 0.005), -0.005, "boundary passes through");
    }

    #[test]
    fn saturate_branches() {
        assert_eq!(saturate(0.90, 0.955, 1.045), 0.955);
        assert_eq!(saturate(1.00, 0.955, 1.045), 1.00);
        assert_eq!(saturate(1.10, 0.955, 1.045), 1.045);
    }

    #[test]
    fn vref_blend_and_saturation() {
        let p = QControlParams::default();
        // Self-weight 1 ignores neighbors entirely.
        let solo = QControlParams { self_weight: 1.0, ..p };
        assert_eq!(update_vref(1.0, &[0.5, 2.0], &solo).unwrap(), 1.0);
        // Uniform case stays put.
        assert_eq!(update_vref(1.0, &[1.0, 1.0], &p).unwrap(), 1.0);
        // High readings saturate at the inner band edge.
        assert_eq!(update_vref(1.2, &[1.2], &p).unwrap(), p.band().1);
        assert_eq!(update_vref(1.0, &[], &p).unwrap_err(), ControlError::EmptyNeighborhood);
    }

    #[test]
    fn q_step_neutral_and_boundary_hold() {
        let p = QControlParams::default();
        // Error inside deadzone and neighbors in agreement: no motion.
        let (g, q) = step_q(0.3, 1.000, 1.001, &[0.3, 0.3], 0.5, 0.05, &p, 0.01);
        assert_eq!(g, 0.3);
        assert!((q - 0.15).abs() < 1e-15);
        // At +1 with non-negative drive the state holds exactly.
        let (g, _) = step_q(1.0, 0.90, 1.00, &[1.0], 0.5, 0.05, &p, 0.01);
        assert_eq!(g, 1.0, "under-voltage keeps pushing up; clamp holds at 1");
        // Over-voltage with positive sensitivity drives absorption.
        let (g, q) = step_q(0.0, 1.06, 1.045, &[0.0], 0.5, 0.05, &p, 0.01);
        assert!(g < 0.0 && q < 0.0, "got {g}");
    }

    #[test]
    fn margin_violation_examples_and_complementarity() {
        let p = QControlParams::default();
        let (m, x) = compute_margin_violation(0.99, 1.01, &p);
        assert!((m - 0.035).abs() < 1e-15 && x == 0.0);
        let (m, x) = compute_margin_violation(0.93, 1.00, &p);
        assert!(m == 0.0 && (x - 0.025).abs() < 1e-15);
        // Exactly on the inner band: both zero (the boundary case).
        let (m, x) = compute_margin_violation(0.955, 1.045, &p);
        assert!(m == 0.0 && x == 0.0);
        // Structural complementarity over a sweep of estimate pairs.
        for i in 0..40 {
            for j in i..40 {
                let lo = 0.90 + 0.005 * i as f64;
                let hi = 0.90 + 0.005 * j as f64;
                let (m, x) = compute_margin_violation(lo, hi, &p);
                assert!(m >= 0.0 && x >= 0.0);
                assert_eq!(m * x, 0.0, "margin {m} and violation {x} both active");
            }
        }
    }

    #[test]
    fn p_step_rates_and_holds() {
        let p = PControlParams::default();
        // Everything quiet: no motion.
        let (c, pg) = step_p(0.2, 0.5, 0.0, 0.0, &[0.2], 0.8, &p, 0.01);
        assert_eq!(c, 0.2);
        assert!((pg - 0.64).abs() < 1e-15);
        // Violation with reactive power exhausted: the floor rate applies.
        let (c, _) = step_p(0.0, 1.0, 0.0, 0.02, &[0.0], 0.8, &p, 0.01);
        let expected = 0.01 * 50.0 * 0.02 * 0.02;
        assert!((c - expected).abs() < 1e-15, "{c} vs {expected}");
        // Margin with ample headroom: relaxation at the capped rate.
        let (c, _) = step_p(0.5, 0.0, 0.03, 0.0, &[0.5], 0.8, &p, 0.01);
        let expected = 0.5 - 0.01 * 50.0 * 0.02 * 0.03;
        assert!((c - expected).abs() < 1e-15);
        // Hold at 0: relaxation cannot go negative.
        let (c, _) = step_p(0.0, 0.0, 0.05, 0.0, &[0.0], 0.8, &p, 0.01);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn substep_keeps_capability_circle() {
        let qp = QControlParams::default();
        let pp = PControlParams::default();
        let mut state = AgentState::at_voltage(1.0);
        state.q_util = -0.9;
        state.violation = 0.05;
        let mut worst: f64 = 0.0;
        for k in 0..500 {
            let v = 1.0 + 0.08 * ((k as f64) * 0.37).sin();
            let inputs = SubstepInputs {
                v_i: v,
                neighbor_q_utils: &[-0.4, 0.9],
                neighbor_curtails: &[0.3, 0.7],
                s_cap: 1.0,
                p_avail: 0.95,
                x_self: 0.06,
                curtailment_on: true,
            };
            let (p_g, q_g) = der_substep(&mut state, &inputs, &qp, &pp, 0.01);
            assert!((0.0..=0.95 + 1e-15).contains(&p_g));
            assert!((-1.0..=1.0).contains(&state.q_util));
            assert!((0.0..=1.0).contains(&state.curtail));
            worst = worst.max(p_g * p_g + q_g * q_g);
        }
        assert!(worst <= 1.0 + 1e-12, "capability exceeded: {worst}");
    }

    #[test]
    fn curtailment_frees_reactive_capability() {
        // Fully utilized reactive power: raising curtailment must enlarge
        // the usable reactive magnitude.
        let qp = QControlParams::default();
        let pp = PControlParams::default();
        let mk = |curtail: f64| {
            let mut st = AgentState::at_voltage(1.0);
            st.q_util = -1.0;
            st.curtail = curtail;
            let inputs = SubstepInputs {
                v_i: 1.0,
                neighbor_q_utils: &[-1.0],
                neighbor_curtails: &[curtail],
                s_cap: 1.0,
                p_avail: 1.0,
                x_self: 0.05,
                curtailment_on: true,
            };
            let mut st2 = st;
            der_substep(&mut st2, &inputs, &qp, &pp, 0.0)
        };
        let (_, q_low) = mk(0.0);
        let (p_hi, q_hi) = mk(0.5);
        assert!(q_low.abs() < 1e-12, "no reactive room at full output");
        assert!((p_hi - 0.5).abs() < 1e-15);
        assert!(q_hi.abs() > 0.8, "curtailment should free capability, got {q_hi}");
    }

    /// Closed-loop reactive control with two agents on nearly symmetric
    /// laterals, both in over-voltage: utilizations reach consensus (the
    /// deadzones eventually close, leaving pure consensus dynamics) and
    /// the worst voltage comes down monotonically toward the band.
    #[test]
    fn closed_loop_consensus_on_forked_feeder() {
        let segs = vec![
            LineSegment { from: 0, to: 1, r: 0.05, x: 0.05 },
            LineSegment { from: 1, to: 2, r: 0.05, x: 0.05 },
            LineSegment { from: 1, to: 3, r: 0.055, x: 0.055 },
        ];
        let net = build_network(4, 1.0, &segs).unwrap();
        let qp = QControlParams::default();
        let (s_cap, p_gen) = (1.0, 0.8);
        let q_cap = DerUnit::q_capability(s_cap, p_gen);

        let solve_with = |q2: f64, q3: f64| {
            let inj = vec![(0.0, 0.0), (0.0, 0.0), (-p_gen, -q2), (-p_gen, -q3)];
            solve(&net, &inj, SolveOptions::default()).unwrap()
        };
        let base = solve_with(0.0, 0.0);
        assert!(base.v[3] > 1.05, "fixture must start in over-voltage, got {}", base.v[3]);
        let sens = exact_sensitivity(&net, &base, &ExactOptions::default()).unwrap();

        let mut g = [0.0f64; 2];
        let mut prev_max = base.v[2].max(base.v[3]);
        let mut sol = base;
        let dt = 0.01;
        for _ in 0..6000 {
            let v = [sol.v[2], sol.v[3]];
            let vref = [
                update_vref(v[0], &[v[1]], &qp).unwrap(),
                update_vref(v[1], &[v[0]], &qp).unwrap(),
            ];
            let (g0, _) =
                step_q(g[0], v[0], vref[0], &[g[1]], q_cap, sens.self_dq(2), &qp, dt);
            let (g1, _) =
                step_q(g[1], v[1], vref[1], &[g[0]], q_cap, sens.self_dq(3), &qp, dt);
            g = [g0, g1];
            sol = solve_with(g[0] * q_cap, g[1] * q_cap);
            // Slack of one Euler step's worth of chatter at the deadzone
            // edge; the trajectory must never rebound beyond that.
            let vmax = sol.v[2].max(sol.v[3]);
            assert!(vmax <= prev_max + 1e-5, "voltage rebounded: {vmax} > {prev_max}");
            prev_max = prev_max.min(vmax);
        }
        assert!((g[0] - g[1]).abs() < 1e-3, "consensus gap {}", (g[0] - g[1]).abs());
        assert!(g[0] < 0.0, "agents must absorb reactive power");
        let vmax = sol.v[2].max(sol.v[3]);
        assert!(vmax < 1.0501, "final worst voltage {vmax}");
        assert!(sol.v.iter().all(|&v| v >= 0.95));
    }
}
