//! Closed-loop co-simulation engine.
//!
//! Each physics step couples four layers and keeps their timing honest:
//!
//! 1. device schedules are applied and the feeder is solved;
//! 2. meters update — realtime channels every step, sampled channels only at
//!    their period — and grid-edge voltages are inferred from the metered
//!    subset;
//! 3. one or more communication rounds run: due messages are delivered from
//!    the delay queue, every agent revises its network-extrema estimates,
//!    adaptive reference, and margin/violation indices, integrates its
//!    controller sub-steps against the *latest received* neighbor state, and
//!    broadcasts;
//! 4. setpoints are committed to the devices (they take effect at the next
//!    solve) and a log row is appended.
//!
//! A controller never reads anything newer than its meters and inbox allow:
//! message payloads become visible only at their delivery time (asserted in
//! debug builds), sampled buses are seen through their stale snapshots, and
//! inferred values stand in for unmetered live readings.
//!
//! Runs are deterministic for a fixed scenario: time is integer
//! milliseconds, message delivery is globally ordered, agents update through
//! an order-preserving parallel map, and log floats are written with Rust's
//! shortest round-trip formatting — so repeated runs (with any worker count)
//! produce byte-identical artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use crate::comms::{
    build_comm_graph, step_extrema, step_extrema_ttl, CommGraph, DelayQueue, ExtremaEstimate,
    ExtremaRecord, Payload,
};
use crate::control::{
    compute_margin_violation, der_substep, saturate, update_vref, AgentState, PControlParams,
    QControlParams, SubstepInputs,
};
use crate::error::{ConfigError, EngineError};
use crate::feeder::{BusId, DeviceSet};
use crate::par::{map_indices, Execution};
use crate::powerflow::{solve, SolveOptions};
use crate::scenario::{ControlMode, ExtremaMode, Scenario};
use crate::sensitivity::{exact_sensitivity, infer_bus_voltage, ExactOptions, MeterBank};

/// Per-run knobs that do not belong to the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Override the scenario's control mode.
    pub mode: Option<ControlMode>,
    /// Override the scenario's seed (recorded in the summary).
    pub seed: Option<u64>,
    /// Sequential or work-stealing execution of the per-agent updates.
    pub execution: Execution,
    /// Record every delivered message (implied when the scenario configures
    /// a message-trace output).
    pub capture_trace: bool,
}

/// Column-labeled numeric time series with one row per physics step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSeriesLog {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl TimeSeriesLog {
    fn new(header: Vec<String>) -> Self {
        TimeSeriesLog { header, rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Index of a named column.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Value of a named column in one row.
    pub fn value(&self, row: usize, name: &str) -> Option<f64> {
        Some(self.rows.get(row)?[self.column(name)?])
    }

    /// Full column by name.
    pub fn series(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// Renders the log as CSV: header line, then one line per row. Floats
    /// use Rust's shortest round-trip formatting, so output is reproducible
    /// to the byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(32 * self.header.len() * (self.rows.len() + 1));
        s.push_str(&self.header.join(","));
        s.push('\n');
        for row in &self.rows {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(',');
                }
                first = false;
                s.push_str(&format!("{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// One delivered message, for the optional newline-delimited JSON trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRecord {
    pub send_s: f64,
    pub deliver_s: f64,
    pub from: BusId,
    pub to: BusId,
    pub v: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub q_util: f64,
    pub curtail: f64,
}

/// End-of-run digest, serialized as the JSON summary artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub control_mode: String,
    pub seed: u64,
    /// Horizon actually covered (may stop early on a solver abort).
    pub steps_run: usize,
    pub duration_s: f64,
    /// Physics step the run aborted at, if it did.
    pub aborted_at_step: Option<usize>,
    /// Network extremes, losses, and curtailment at the last logged step.
    pub final_v_max: f64,
    pub final_v_min: f64,
    pub final_loss_total: f64,
    pub final_curtail_pct: f64,
    /// Spread (max - min) of the reactive utilizations inside each cluster
    /// at the last step; consensus closes these.
    pub q_util_gap_by_cluster: Vec<f64>,
    /// Network-wide spread of the curtailment fractions at the last step.
    pub curtail_gap: f64,
    pub messages_sent: u64,
    /// Steps x agents where margin and violation were simultaneously
    /// nonzero (zero by construction).
    pub complementarity_violations: usize,
    /// Steps x generators where the committed setpoints left the capability
    /// circle (zero by construction).
    pub capability_violations: usize,
}

/// Everything a run produces in memory.
#[derive(Debug)]
pub struct SimOutcome {
    pub log: TimeSeriesLog,
    pub summary: RunSummary,
    pub trace: Vec<TraceRecord>,
    /// A solver abort, if one ended the run early; the log holds every row
    /// up to the failed step.
    pub failure: Option<EngineError>,
}

/// Runtime state of one agent (a generator bus, or a realtime-metered bus
/// relaying consensus and estimates without any capability).
struct AgentRt {
    bus: BusId,
    /// Index into the device set, `None` for relay agents.
    der: Option<usize>,
    /// Cluster index (into the scenario's cluster list).
    cluster: usize,
    qp: QControlParams,
    pp: PControlParams,
    /// Own-bus voltage/reactive-power sensitivity, fixed at the initial
    /// operating point.
    x_self: f64,
    state: AgentState,
    max_rec: ExtremaRecord,
    min_rec: ExtremaRecord,
    /// Latest payload received per neighbor (graph adjacency order).
    inbox: Vec<Option<Payload>>,
}

/// Shared read-only context for one communication round.
struct RoundCtx<'a> {
    bank: &'a MeterBank,
    devices: &'a DeviceSet,
    cluster_inferred: &'a [Vec<f64>],
    mode: ControlMode,
    extrema: ExtremaMode,
    ttl_ms: u64,
    now_ms: u64,
    t_s: f64,
    dt_round_s: f64,
    dt_ctrl_s: f64,
    substeps: usize,
}

struct AgentDelta {
    state: AgentState,
    max_rec: ExtremaRecord,
    min_rec: ExtremaRecord,
    payload: Payload,
    p_set: f64,
    q_set: f64,
}

/// One agent's full round: extrema estimation, margin/violation, adaptive
/// reference, controller sub-steps, and the outgoing payload.
fn agent_round(a: &AgentRt, ctx: &RoundCtx) -> AgentDelta {
    let v_own = ctx.bank.current_v(a.bus).expect("agent buses carry realtime meters");
    let inferred = ctx.cluster_inferred.get(a.cluster).map_or(&[][..], Vec::as_slice);

    // Fresh readings visible this round: own bus, inferred buses in the
    // cluster, and the neighbors' own readings from the latest payloads.
    let mut fresh = Vec::with_capacity(1 + inferred.len() + a.inbox.len());
    fresh.push(v_own);
    fresh.extend_from_slice(inferred);
    let mut neighbor_vs: Vec<f64> = Vec::with_capacity(a.inbox.len());
    let mut neighbor_q: Vec<f64> = Vec::with_capacity(a.inbox.len());
    let mut neighbor_c: Vec<f64> = Vec::with_capacity(a.inbox.len());
    let mut prior_recs: Vec<(ExtremaRecord, ExtremaRecord)> = vec![(a.max_rec, a.min_rec)];
    let mut prior_ests: Vec<ExtremaEstimate> =
        vec![ExtremaEstimate { v_h: a.state.v_max_est, v_l: a.state.v_min_est }];
    for p in a.inbox.iter().flatten() {
        fresh.push(p.v);
        neighbor_vs.push(p.v);
        neighbor_q.push(p.q_util);
        neighbor_c.push(p.curtail);
        prior_recs.push((
            ExtremaRecord { value: p.v_max, birth_ms: p.v_max_birth_ms },
            ExtremaRecord { value: p.v_min, birth_ms: p.v_min_birth_ms },
        ));
        prior_ests.push(ExtremaEstimate { v_h: p.v_max, v_l: p.v_min });
    }

    let mut st = a.state;
    let (max_rec, min_rec) = match ctx.extrema {
        ExtremaMode::Ttl => step_extrema_ttl(ctx.now_ms, ctx.ttl_ms, &fresh, &prior_recs),
        ExtremaMode::Forgetting => {
            let e = step_extrema(&fresh, &prior_ests, ctx.dt_round_s);
            (
                ExtremaRecord { value: e.v_h, birth_ms: ctx.now_ms },
                ExtremaRecord { value: e.v_l, birth_ms: ctx.now_ms },
            )
        }
    };
    st.v_max_est = max_rec.value;
    st.v_min_est = min_rec.value;
    let (margin, violation) = compute_margin_violation(st.v_min_est, st.v_max_est, &a.qp);
    st.margin = margin;
    st.violation = violation;

    // Adaptive reference over everything the agent can see; before any
    // message arrives it tracks the own reading saturated into the band.
    let mut ref_vs = neighbor_vs;
    ref_vs.extend_from_slice(inferred);
    let (lo, hi) = a.qp.band();
    st.v_ref = update_vref(v_own, &ref_vs, &a.qp).unwrap_or_else(|_| saturate(v_own, lo, hi));

    let (s_cap, p_avail) = match a.der {
        Some(di) => (ctx.devices.ders[di].s_cap, ctx.devices.der_p_avail_at(di, ctx.t_s)),
        None => (0.0, 0.0),
    };
    let (mut p_set, mut q_set) = (p_avail, 0.0);
    if ctx.mode != ControlMode::None {
        let inputs = SubstepInputs {
            v_i: v_own,
            neighbor_q_utils: &neighbor_q,
            neighbor_curtails: &neighbor_c,
            s_cap,
            p_avail,
            x_self: a.x_self,
            curtailment_on: ctx.mode == ControlMode::QAndP,
        };
        for _ in 0..ctx.substeps {
            let (p, q) = der_substep(&mut st, &inputs, &a.qp, &a.pp, ctx.dt_ctrl_s);
            p_set = p;
            q_set = q;
        }
    }

    let payload = Payload {
        v: v_own,
        v_max: max_rec.value,
        v_max_birth_ms: max_rec.birth_ms,
        v_min: min_rec.value,
        v_min_birth_ms: min_rec.birth_ms,
        q_util: st.q_util,
        curtail: st.curtail,
    };
    AgentDelta { state: st, max_rec, min_rec, payload, p_set, q_set }
}

/// Runs a scenario to completion (or to the first solver abort) and returns
/// the log, summary, and optional message trace. Setup problems (bad
/// communication topology, a singular sensitivity system) surface as `Err`;
/// a mid-run solver abort is reported in [`SimOutcome::failure`] with the
/// partial log intact.
pub fn simulate(sc: &Scenario, opts: &RunOptions) -> Result<SimOutcome, EngineError> {
    let mode = opts.mode.unwrap_or(sc.control_mode);
    let seed = opts.seed.unwrap_or(sc.seed);
    let exec = opts.execution;
    let n = sc.network.bus_count();
    let mut devices = sc.devices.clone();
    let steps = sc.steps();
    let rounds_per_step = sc.rounds_per_step();
    let substeps = sc.substeps_per_round();
    let dt_ctrl_s = sc.dt_ctrl_ms as f64 / 1000.0;
    let dt_round_s = sc.dt_round_ms as f64 / 1000.0;

    // Agent roster: generator buses plus realtime-metered buses, in cluster
    // order. A bus listed in several clusters belongs to the first.
    let der_at: BTreeMap<BusId, usize> =
        devices.ders.iter().enumerate().map(|(i, d)| (d.bus, i)).collect();
    let rt_listed: BTreeSet<BusId> = sc.realtime_meters.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut agent_clusters: Vec<Vec<BusId>> = Vec::with_capacity(sc.clusters.len());
    for cluster in &sc.clusters {
        let mut members = Vec::new();
        for &b in cluster {
            if (der_at.contains_key(&b) || rt_listed.contains(&b)) && seen.insert(b) {
                members.push(b);
            }
        }
        agent_clusters.push(members);
    }
    let graph: Option<CommGraph> = if agent_clusters.iter().all(Vec::is_empty) {
        if mode != ControlMode::None {
            warn!("scenario '{}' has no agents; controllers are inert", sc.name);
        }
        None
    } else {
        Some(build_comm_graph(
            &agent_clusters,
            sc.intra_delay_ms,
            sc.inter_delay_ms,
            &sc.comm_extra,
        )?)
    };

    // Meters: agents always read their own bus in realtime.
    let mut realtime = sc.realtime_meters.clone();
    if let Some(g) = &graph {
        realtime.extend_from_slice(g.agents());
    }
    let mut bank = MeterBank::new(n, &realtime, &sc.sampled_meters, sc.sample_period_ms);

    // Anchor pools for inference: realtime buses of the sampled bus's own
    // cluster when that pool is non-empty, else every realtime bus.
    let cluster_of_bus =
        |b: BusId| sc.clusters.iter().position(|c| c.contains(&b));
    let candidate_pools: BTreeMap<BusId, Vec<BusId>> = bank
        .sampled_buses()
        .iter()
        .map(|&j| {
            let pool = cluster_of_bus(j)
                .map(|ci| {
                    sc.clusters[ci]
                        .iter()
                        .copied()
                        .filter(|&b| bank.is_realtime(b))
                        .collect::<Vec<_>>()
                })
                .filter(|p| !p.is_empty())
                .unwrap_or_else(|| bank.realtime_buses().to_vec());
            (j, pool)
        })
        .collect();
    let sampled_cluster: BTreeMap<BusId, usize> = bank
        .sampled_buses()
        .iter()
        .filter_map(|&j| cluster_of_bus(j).map(|ci| (j, ci)))
        .collect();

    // Initial setpoints: full available power, unity power factor.
    for i in 0..devices.ders.len() {
        devices.ders[i].p_g = devices.der_p_avail_at(i, 0.0);
        devices.ders[i].q_g = 0.0;
    }

    // Column layout (fixed for the whole run).
    let mut header = vec!["t_s".to_string()];
    header.extend((0..n).map(|b| format!("v_{b}")));
    header.extend(bank.sampled_buses().iter().map(|b| format!("vhat_{b}")));
    let agent_buses: Vec<BusId> = graph.as_ref().map_or(Vec::new(), |g| g.agents().to_vec());
    for &b in &agent_buses {
        for field in [
            "q_util", "curtail", "p_util", "v_max_est", "v_min_est", "margin", "violation",
            "p_set", "q_set",
        ] {
            header.push(format!("agent{b}_{field}"));
        }
    }
    header.extend(["v_max_true", "v_min_true", "curtail_pct", "loss_total"].map(String::from));
    let mut log = TimeSeriesLog::new(header);

    let mut agents: Vec<AgentRt> = Vec::new();
    let mut queue = DelayQueue::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut failure: Option<EngineError> = None;
    let mut complementarity_violations = 0usize;
    let mut capability_violations = 0usize;
    let mut warned_inference = false;
    let mut last_globals = (sc.network.v0(), sc.network.v0(), 0.0, 0.0);
    let solve_opts = SolveOptions::default();

    for step in 0..steps {
        let t_ms = step as u64 * sc.dt_pf_ms;
        let t_s = t_ms as f64 / 1000.0;

        // (1) schedules. Uncontrolled generators track their resource.
        if mode == ControlMode::None {
            for i in 0..devices.ders.len() {
                devices.ders[i].p_g = devices.der_p_avail_at(i, t_s);
                devices.ders[i].q_g = 0.0;
            }
        }
        let injections = devices.injections_at(n, t_s);

        // (2) physics.
        let sol = match solve(&sc.network, &injections, solve_opts) {
            Ok(s) if s.converged => s,
            Ok(_) => {
                failure = Some(EngineError::NotConverged { step, t_s });
                break;
            }
            Err(e) => {
                failure = Some(e.into());
                break;
            }
        };

        // First step: sensitivities at the initial operating point, then
        // the agent roster.
        if step == 0 {
            if let Some(g) = &graph {
                let sens = exact_sensitivity(
                    &sc.network,
                    &sol,
                    &ExactOptions { execution: exec, ..Default::default() },
                )?;
                agents = (0..g.len())
                    .map(|node| {
                        let bus = g.bus(node);
                        AgentRt {
                            bus,
                            der: der_at.get(&bus).copied(),
                            cluster: g.cluster_of(node),
                            qp: sc.q_overrides.get(&bus).copied().unwrap_or(sc.q_params),
                            pp: sc.p_overrides.get(&bus).copied().unwrap_or(sc.p_params),
                            x_self: sens.self_dq(bus),
                            state: AgentState::at_voltage(sol.v[bus]),
                            max_rec: ExtremaRecord { value: sol.v[bus], birth_ms: 0 },
                            min_rec: ExtremaRecord { value: sol.v[bus], birth_ms: 0 },
                            inbox: vec![None; g.neighbors(node).len()],
                        }
                    })
                    .collect();
            }
        }

        // (3) meters.
        bank.update(t_ms, &sol.v);

        // (4) grid-edge inference.
        let mut inferred_rows: Vec<(BusId, f64)> = Vec::with_capacity(bank.sampled_buses().len());
        let mut cluster_inferred: Vec<Vec<f64>> = vec![Vec::new(); sc.clusters.len()];
        for &j in bank.sampled_buses() {
            let v = match infer_bus_voltage(
                &sc.network,
                &bank,
                sc.inference_form,
                j,
                &candidate_pools[&j],
            ) {
                Ok(v) => v,
                Err(e) => {
                    if !warned_inference {
                        warn!("voltage inference fell back to the stale snapshot at bus {j}: {e}");
                        warned_inference = true;
                    }
                    bank.snapshot_v(j).unwrap_or(sc.network.v0())
                }
            };
            inferred_rows.push((j, v));
            if let Some(&ci) = sampled_cluster.get(&j) {
                cluster_inferred[ci].push(v);
            }
        }

        // (5)+(6) communication rounds with controller sub-steps.
        if let Some(g) = &graph {
            for round in 0..rounds_per_step {
                let now_ms = t_ms + round as u64 * sc.dt_round_ms;
                for msg in queue.route(now_ms) {
                    debug_assert!(
                        msg.deliver_ms <= now_ms,
                        "a message must never be read before its delivery time"
                    );
                    let to_node = g.node_index(msg.to).expect("delivery to a known agent");
                    let from_node = g.node_index(msg.from).expect("sender is a known agent");
                    let slot = g
                        .neighbors(to_node)
                        .iter()
                        .position(|&(nb, _)| nb == from_node)
                        .expect("delivery along an existing link");
                    if opts.capture_trace {
                        trace.push(TraceRecord {
                            send_s: msg.sent_ms as f64 / 1000.0,
                            deliver_s: msg.deliver_ms as f64 / 1000.0,
                            from: msg.from,
                            to: msg.to,
                            v: msg.payload.v,
                            v_max: msg.payload.v_max,
                            v_min: msg.payload.v_min,
                            q_util: msg.payload.q_util,
                            curtail: msg.payload.curtail,
                        });
                    }
                    agents[to_node].inbox[slot] = Some(msg.payload);
                }

                let ctx = RoundCtx {
                    bank: &bank,
                    devices: &devices,
                    cluster_inferred: &cluster_inferred,
                    mode,
                    extrema: sc.extrema_mode,
                    ttl_ms: sc.ttl_ms,
                    now_ms,
                    t_s: now_ms as f64 / 1000.0,
                    dt_round_s,
                    dt_ctrl_s,
                    substeps,
                };
                let agents_ref = &agents;
                let deltas =
                    map_indices(exec, agents_ref.len(), |i| agent_round(&agents_ref[i], &ctx));

                // (7) commit, in deterministic node order.
                for (node, delta) in deltas.into_iter().enumerate() {
                    agents[node].state = delta.state;
                    agents[node].max_rec = delta.max_rec;
                    agents[node].min_rec = delta.min_rec;
                    if let Some(di) = agents[node].der {
                        devices.ders[di].p_g = delta.p_set;
                        devices.ders[di].q_g = delta.q_set;
                    }
                    queue.broadcast(g, node, delta.payload, now_ms);
                }
            }
        }

        // Invariant counters.
        for a in &agents {
            if a.state.margin * a.state.violation != 0.0 {
                complementarity_violations += 1;
            }
        }
        for d in &devices.ders {
            if d.p_g * d.p_g + d.q_g * d.q_g > d.s_cap * d.s_cap + 1e-12 {
                capability_violations += 1;
            }
        }

        // (8) log row.
        let v_max_true = sol.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v_min_true = sol.v.iter().copied().fold(f64::INFINITY, f64::min);
        let avail: f64 = (0..devices.ders.len()).map(|i| devices.der_p_avail_at(i, t_s)).sum();
        let produced: f64 = devices.ders.iter().map(|d| d.p_g).sum();
        let curtail_pct =
            if avail > 0.0 { (100.0 * (1.0 - produced / avail)).max(0.0) } else { 0.0 };
        let loss_total = sol.total_loss();
        last_globals = (v_max_true, v_min_true, curtail_pct, loss_total);

        let mut row = Vec::with_capacity(log.header.len());
        row.push(t_s);
        row.extend_from_slice(&sol.v);
        row.extend(inferred_rows.iter().map(|&(_, v)| v));
        for a in &agents {
            let (p_set, q_set) = a
                .der
                .map_or((0.0, 0.0), |di| (devices.ders[di].p_g, devices.ders[di].q_g));
            row.extend([
                a.state.q_util,
                a.state.curtail,
                a.state.p_util(),
                a.state.v_max_est,
                a.state.v_min_est,
                a.state.margin,
                a.state.violation,
                p_set,
                q_set,
            ]);
        }
        row.extend([v_max_true, v_min_true, curtail_pct, loss_total]);
        debug_assert_eq!(row.len(), log.header.len());
        log.rows.push(row);
    }

    // Consensus spreads at the end of the run.
    let mut q_util_gap_by_cluster = Vec::with_capacity(sc.clusters.len());
    for ci in 0..sc.clusters.len() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut count = 0;
        for a in agents.iter().filter(|a| a.cluster == ci) {
            lo = lo.min(a.state.q_util);
            hi = hi.max(a.state.q_util);
            count += 1;
        }
        q_util_gap_by_cluster.push(if count >= 2 { hi - lo } else { 0.0 });
    }
    let curtail_gap = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in &agents {
            lo = lo.min(a.state.curtail);
            hi = hi.max(a.state.curtail);
        }
        if agents.len() >= 2 { hi - lo } else { 0.0 }
    };

    let aborted_at_step = failure.as_ref().map(|_| log.rows.len());
    let summary = RunSummary {
        name: sc.name.clone(),
        control_mode: mode.name().to_string(),
        seed,
        steps_run: log.rows.len(),
        duration_s: sc.duration_ms as f64 / 1000.0,
        aborted_at_step,
        final_v_max: last_globals.0,
        final_v_min: last_globals.1,
        final_curtail_pct: last_globals.2,
        final_loss_total: last_globals.3,
        q_util_gap_by_cluster,
        curtail_gap,
        messages_sent: queue.sent_total(),
        complementarity_violations,
        capability_violations,
    };
    Ok(SimOutcome { log, summary, trace, failure })
}

fn write_file(path: &Path, contents: &str) -> Result<(), EngineError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| EngineError::Output {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|source| EngineError::Output {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the artifacts the scenario's output plan asks for — CSV log, JSON
/// summary, newline-delimited JSON message trace — into `out_dir`. Returns
/// the paths written. Called even after an aborted run, so partial logs
/// reach disk.
pub fn write_artifacts(
    outcome: &SimOutcome,
    sc: &Scenario,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EngineError> {
    let mut written = Vec::new();
    if let Some(name) = &sc.outputs.csv {
        let path = out_dir.join(name);
        write_file(&path, &outcome.log.to_csv())?;
        written.push(path);
    }
    if let Some(name) = &sc.outputs.summary {
        let path = out_dir.join(name);
        let mut text = serde_json::to_string_pretty(&outcome.summary).expect("summary is finite");
        text.push('\n');
        write_file(&path, &text)?;
        written.push(path);
    }
    if let Some(name) = &sc.outputs.message_trace {
        let path = out_dir.join(name);
        let mut text = String::new();
        for rec in &outcome.trace {
            text.push_str(&serde_json::to_string(rec).expect("trace records are finite"));
            text.push('\n');
        }
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs a scenario and writes its artifacts. The partial log is flushed
/// even when the run aborts; the abort is reported in the returned outcome.
pub fn run_to_files(
    sc: &Scenario,
    opts: &RunOptions,
    out_dir: &Path,
) -> Result<(SimOutcome, Vec<PathBuf>), EngineError> {
    let mut opts = *opts;
    opts.capture_trace = opts.capture_trace || sc.outputs.message_trace.is_some();
    let outcome = simulate(sc, &opts)?;
    let written = write_artifacts(&outcome, sc, out_dir)?;
    Ok((outcome, written))
}

/// One row of a penetration sweep: a static no-control solve with the
/// fleet's available power scaled to `penetration` times the total demand.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    /// Available DER real power over total demand.
    pub penetration: f64,
    /// Multiplier applied to every generator's availability.
    pub der_scale: f64,
    pub v_max: f64,
    pub v_min: f64,
    /// Worst excursion of the true extremes outside the inner band.
    pub violation: f64,
    pub converged: bool,
}

/// Static penetration sweep from `from` to `to` (inclusive) in steps of
/// `step`: no control, full available output at unity power factor,
/// schedules evaluated at `t = 0`.
pub fn sweep(
    sc: &Scenario,
    from: f64,
    to: f64,
    step: f64,
    execution: Execution,
) -> Result<Vec<SweepRow>, EngineError> {
    let bad = |message: &str| {
        EngineError::Config(ConfigError::Validation {
            path: sc.name.clone(),
            message: message.to_string(),
        })
    };
    if !(step > 0.0 && from >= 0.0 && to >= from) {
        return Err(bad("sweep range must satisfy 0 <= from <= to with a positive step"));
    }
    let base_avail: f64 = sc.devices.ders.iter().map(|d| d.p_avail.value_at(0.0)).sum();
    if base_avail <= 0.0 {
        return Err(bad("the feeder has no available DER power to scale"));
    }
    let demand = sc.devices.total_demand_at(0.0);
    if demand <= 0.0 {
        return Err(bad("penetration is undefined without load"));
    }

    let mut levels = Vec::new();
    let mut k = 0u32;
    loop {
        let level = from + f64::from(k) * step;
        if level > to + 1e-9 {
            break;
        }
        levels.push(level);
        k += 1;
    }

    let n = sc.network.bus_count();
    let solve_opts = SolveOptions::default();
    Ok(map_indices(execution, levels.len(), |i| {
        let penetration = levels[i];
        let mut devices = sc.devices.clone();
        devices.der_scale = penetration * demand / base_avail;
        for d in 0..devices.ders.len() {
            devices.ders[d].p_g = devices.der_p_avail_at(d, 0.0);
            devices.ders[d].q_g = 0.0;
        }
        let injections = devices.injections_at(n, 0.0);
        match solve(&sc.network, &injections, solve_opts) {
            Ok(sol) if sol.converged => {
                let v_max = sol.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v_min = sol.v.iter().copied().fold(f64::INFINITY, f64::min);
                let (_, violation) = compute_margin_violation(v_min, v_max, &sc.q_params);
                SweepRow {
                    penetration,
                    der_scale: devices.der_scale,
                    v_max,
                    v_min,
                    violation,
                    converged: true,
                }
            }
            _ => SweepRow {
                penetration,
                der_scale: devices.der_scale,
                v_max: 0.0,
                v_min: 0.0,
                violation: 0.0,
                converged: false,
            },
        }
    }))
}

/// One sampled bus in an inference demonstration: the true final voltage,
/// the live inferred value, and the stale snapshot a meter-only scheme
/// would report.
#[derive(Debug, Clone, Copy)]
pub struct InferenceReportRow {
    pub bus: BusId,
    pub truth: f64,
    pub inferred: f64,
    pub error_pct: f64,
    pub stale: f64,
    pub stale_error_pct: f64,
}

/// Runs the scenario open-loop (mode `none`) and compares, at the final
/// step, the inferred voltage of every sampled bus against the truth and
/// against its stale snapshot.
pub fn infer_demo(sc: &Scenario, opts: &RunOptions) -> Result<Vec<InferenceReportRow>, EngineError> {
    let mut opts = *opts;
    opts.mode = Some(ControlMode::None);
    opts.capture_trace = false;
    let outcome = simulate(sc, &opts)?;
    if let Some(f) = outcome.failure {
        return Err(f);
    }
    let log = &outcome.log;
    let rows = log.rows();
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        return Err(EngineError::Config(ConfigError::Validation {
            path: sc.name.clone(),
            message: "the horizon produced no steps".into(),
        }));
    };
    let mut report = Vec::new();
    for (ci, name) in log.header().iter().enumerate() {
        let Some(bus_str) = name.strip_prefix("vhat_") else { continue };
        let bus: BusId = bus_str.parse().expect("vhat columns are engine-named");
        let truth_col = log.column(&format!("v_{bus}")).expect("every bus is logged");
        let truth = last[truth_col];
        let inferred = last[ci];
        let stale = first[truth_col];
        report.push(InferenceReportRow {
            bus,
            truth,
            inferred,
            error_pct: 100.0 * (inferred - truth).abs() / truth,
            stale,
            stale_error_pct: 100.0 * (stale - truth).abs() / truth,
        });
    }
    Ok(report)
}
