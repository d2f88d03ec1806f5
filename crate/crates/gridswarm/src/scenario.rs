//! Feeder and scenario file formats.
//!
//! Both files are JSON with a `"format": 1` marker. A *feeder* file is the
//! physical description: buses, line impedances, generators, loads, and the
//! default metering plan. A *scenario* file points at a feeder and layers
//! everything episodic on top: horizon and time steps, control mode,
//! communication clusters and delays, controller gains, device schedules,
//! and output destinations.
//!
//! Loading is strict: unknown keys, bad bus ids, inconsistent time steps, or
//! clusters that miss a generator bus are reported as [`ConfigError`]s with
//! the offending path and a human-readable message, rather than surfacing
//! later as mid-run surprises.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{PControlParams, QControlParams};
use crate::error::ConfigError;
use crate::feeder::{
    build_network, BusId, DerUnit, DeviceSet, LineSegment, LoadPoint, Profile, RadialNetwork,
};
use crate::sensitivity::InferenceForm;

/// Which control layers run during a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// No control: generators track their available power at unity power
    /// factor, communication and estimation still run for observability.
    None,
    /// Reactive (voltage consensus) layer only.
    QOnly,
    /// Both layers: reactive control plus coordinated curtailment.
    #[default]
    QAndP,
}

impl ControlMode {
    /// Stable lowercase name used in logs and summaries.
    pub fn name(self) -> &'static str {
        match self {
            ControlMode::None => "none",
            ControlMode::QOnly => "q_only",
            ControlMode::QAndP => "q_and_p",
        }
    }
}

/// Which network-extrema estimator the agents run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremaMode {
    /// Forgetting-factor max/min consensus: prior estimates decay by
    /// `(1 - dt)` each round. Kept as the baseline estimator; on per-unit
    /// levels the decay leaves a standing bias on relayed extremes.
    Forgetting,
    /// Timestamped records with expiry: constant fields propagate exactly
    /// and vanished extremes age out after `ttl_s`.
    #[default]
    Ttl,
}

/// Output destinations for a run, resolved relative to the chosen output
/// directory. `None` disables that artifact.
#[derive(Debug, Clone, Default)]
pub struct OutputPlan {
    /// Step-by-step CSV log.
    pub csv: Option<String>,
    /// JSON run summary.
    pub summary: Option<String>,
    /// Newline-delimited JSON record per delivered message.
    pub message_trace: Option<String>,
}

/// A fully resolved simulation setup: network, devices, timing, topology of
/// the communication overlay, controller parameters, and output plan.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: RadialNetwork,
    pub devices: DeviceSet,
    /// Simulated horizon, integer milliseconds.
    pub duration_ms: u64,
    /// Physics (power-flow) step.
    pub dt_pf_ms: u64,
    /// Communication round period; divides `dt_pf_ms`.
    pub dt_round_ms: u64,
    /// Controller Euler sub-step; divides `dt_round_ms`.
    pub dt_ctrl_ms: u64,
    pub control_mode: ControlMode,
    /// Recorded in the summary and reserved for stochastic schedule
    /// extensions; the bundled engine is deterministic for a fixed config.
    pub seed: u64,
    /// Communication clusters as bus-id lists, in file order. Agents within
    /// a cluster are chained in listed order.
    pub clusters: Vec<Vec<BusId>>,
    /// Extra point-to-point links between agent buses.
    pub comm_extra: Vec<(BusId, BusId)>,
    pub intra_delay_ms: u64,
    pub inter_delay_ms: u64,
    pub extrema_mode: ExtremaMode,
    /// Record lifetime for the TTL extrema estimator.
    pub ttl_ms: u64,
    /// Buses with realtime meters (agent buses are added implicitly).
    pub realtime_meters: Vec<BusId>,
    /// Buses with slow sampled meters; their live voltage is inferred.
    pub sampled_meters: Vec<BusId>,
    pub sample_period_ms: u64,
    pub q_params: QControlParams,
    pub p_params: PControlParams,
    /// Per-bus parameter overrides (missing buses use the globals).
    pub q_overrides: BTreeMap<BusId, QControlParams>,
    pub p_overrides: BTreeMap<BusId, PControlParams>,
    pub inference_form: InferenceForm,
    pub outputs: OutputPlan,
}

impl Scenario {
    /// A runnable scenario from parts, with engine defaults everywhere
    /// else: 10 s horizon, 100 ms physics and round steps, 10 ms control
    /// sub-steps, one cluster spanning every generator bus, 100/800 ms
    /// delays, TTL extrema (8 s), default gains, and no file outputs.
    pub fn from_parts(name: &str, network: RadialNetwork, devices: DeviceSet) -> Self {
        let der_buses: Vec<BusId> = der_bus_set(&devices).into_iter().collect();
        Scenario {
            name: name.to_string(),
            network,
            devices,
            duration_ms: 10_000,
            dt_pf_ms: 100,
            dt_round_ms: 100,
            dt_ctrl_ms: 10,
            control_mode: ControlMode::QAndP,
            seed: 0,
            clusters: vec![der_buses],
            comm_extra: Vec::new(),
            intra_delay_ms: 100,
            inter_delay_ms: 800,
            extrema_mode: ExtremaMode::Ttl,
            ttl_ms: 8_000,
            realtime_meters: Vec::new(),
            sampled_meters: Vec::new(),
            sample_period_ms: 900_000,
            q_params: QControlParams::default(),
            p_params: PControlParams::default(),
            q_overrides: BTreeMap::new(),
            p_overrides: BTreeMap::new(),
            inference_form: InferenceForm::default(),
            outputs: OutputPlan::default(),
        }
    }

    /// Number of physics steps in the horizon.
    pub fn steps(&self) -> usize {
        (self.duration_ms / self.dt_pf_ms) as usize
    }

    /// Communication rounds per physics step.
    pub fn rounds_per_step(&self) -> usize {
        (self.dt_pf_ms / self.dt_round_ms) as usize
    }

    /// Controller sub-steps per communication round.
    pub fn substeps_per_round(&self) -> usize {
        (self.dt_round_ms / self.dt_ctrl_ms) as usize
    }

    /// Consistency checks shared by the file loader and programmatic
    /// construction. `path` labels error messages.
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError::Validation { path: path.to_string(), message };
        if self.duration_ms == 0 {
            return Err(err("duration_s must be positive".into()));
        }
        if self.dt_ctrl_ms == 0 || self.dt_round_ms == 0 || self.dt_pf_ms == 0 {
            return Err(err("time steps must be positive".into()));
        }
        if !(self.dt_ctrl_ms <= self.dt_round_ms && self.dt_round_ms <= self.dt_pf_ms) {
            return Err(err(format!(
                "time steps must satisfy dt_ctrl <= dt_round <= dt_pf (got {} ms / {} ms / {} ms)",
                self.dt_ctrl_ms, self.dt_round_ms, self.dt_pf_ms
            )));
        }
        if self.dt_round_ms % self.dt_ctrl_ms != 0 {
            return Err(err("dt_round_s must be a whole multiple of dt_ctrl_s".into()));
        }
        if self.dt_pf_ms % self.dt_round_ms != 0 {
            return Err(err("dt_pf_s must be a whole multiple of dt_round_s".into()));
        }
        if self.duration_ms % self.dt_pf_ms != 0 {
            return Err(err("duration_s must be a whole multiple of dt_pf_s".into()));
        }
        if self.extrema_mode == ExtremaMode::Forgetting && self.dt_round_ms >= 1000 {
            return Err(err(
                "the forgetting extrema estimator needs a round period below 1 s".into(),
            ));
        }
        let n = self.network.bus_count();
        for (ci, cluster) in self.clusters.iter().enumerate() {
            for &b in cluster {
                if b >= n {
                    return Err(err(format!("cluster {ci} references unknown bus {b}")));
                }
            }
        }
        for &b in self.realtime_meters.iter().chain(&self.sampled_meters) {
            if b >= n {
                return Err(err(format!("meter on unknown bus {b}")));
            }
        }
        for &(a, b) in &self.comm_extra {
            if a >= n || b >= n {
                return Err(err(format!("comm edge ({a}, {b}) references an unknown bus")));
            }
        }
        let covered: BTreeSet<BusId> = self.clusters.iter().flatten().copied().collect();
        for d in &self.devices.ders {
            if !covered.contains(&d.bus) {
                return Err(err(format!(
                    "generator bus {} is not covered by any cluster",
                    d.bus
                )));
            }
        }
        self.devices
            .validate(&self.network)
            .map_err(|e| err(e.to_string()))?;
        Ok(())
    }
}

/// A loaded feeder file: the network, its devices, and the default
/// metering plan (which a scenario may override).
#[derive(Debug, Clone)]
pub struct FeederBundle {
    pub name: String,
    pub network: RadialNetwork,
    pub devices: DeviceSet,
    pub realtime_meters: Vec<BusId>,
    pub sampled_meters: Vec<BusId>,
    pub sample_period_ms: Option<u64>,
}

// ---------------------------------------------------------------------------
// Raw serde shapes (file schemas)

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    format: u32,
    name: Option<String>,
    #[serde(default = "default_v0")]
    v0: f64,
    buses: usize,
    lines: Vec<LineEntry>,
    #[serde(default)]
    ders: Vec<DerEntry>,
    #[serde(default)]
    loads: Vec<LoadEntry>,
    meters: Option<MeterSpec>,
}

fn default_v0() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineEntry {
    from: usize,
    to: usize,
    r: f64,
    x: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerEntry {
    bus: usize,
    s_cap: f64,
    p_avail: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadEntry {
    bus: usize,
    p: f64,
    q: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeterSpec {
    #[serde(default)]
    realtime: Vec<usize>,
    #[serde(default)]
    sampled: Vec<usize>,
    sample_period_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format: u32,
    name: Option<String>,
    /// Feeder file path, relative to this scenario file.
    feeder: String,
    duration_s: f64,
    #[serde(default = "default_dt_pf")]
    dt_pf_s: f64,
    #[serde(default = "default_dt_pf")]
    dt_round_s: f64,
    #[serde(default = "default_dt_ctrl")]
    dt_ctrl_s: f64,
    control_mode: Option<ControlMode>,
    #[serde(default)]
    seed: u64,
    clusters: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    comm_edges: Vec<(usize, usize)>,
    comm: Option<CommSpec>,
    meters: Option<MeterSpec>,
    q_control: Option<QControlSpec>,
    p_control: Option<PControlSpec>,
    #[serde(default)]
    q_control_overrides: Vec<QControlOverride>,
    #[serde(default)]
    p_control_overrides: Vec<PControlOverride>,
    #[serde(default)]
    der_profiles: Vec<DerProfileEntry>,
    #[serde(default)]
    load_profiles: Vec<LoadProfileEntry>,
    load_scale: Option<Vec<(f64, f64)>>,
    inference_form: Option<InferenceForm>,
    outputs: Option<OutputSpec>,
}

fn default_dt_pf() -> f64 {
    0.1
}

fn default_dt_ctrl() -> f64 {
    0.01
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommSpec {
    intra_delay_s: Option<f64>,
    inter_delay_s: Option<f64>,
    extrema_mode: Option<ExtremaMode>,
    ttl_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct QControlSpec {
    deadband: Option<f64>,
    self_weight: Option<f64>,
    consensus_gain: Option<f64>,
    volt_gain: Option<f64>,
    v_lo: Option<f64>,
    v_hi: Option<f64>,
}

impl QControlSpec {
    fn apply(self, base: QControlParams) -> QControlParams {
        QControlParams {
            deadband: self.deadband.unwrap_or(base.deadband),
            self_weight: self.self_weight.unwrap_or(base.self_weight),
            consensus_gain: self.consensus_gain.unwrap_or(base.consensus_gain),
            volt_gain: self.volt_gain.unwrap_or(base.volt_gain),
            v_lo: self.v_lo.unwrap_or(base.v_lo),
            v_hi: self.v_hi.unwrap_or(base.v_hi),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PControlSpec {
    consensus_gain: Option<f64>,
    volt_gain: Option<f64>,
    q_headroom_eps: Option<f64>,
}

impl PControlSpec {
    fn apply(self, base: PControlParams) -> PControlParams {
        PControlParams {
            consensus_gain: self.consensus_gain.unwrap_or(base.consensus_gain),
            volt_gain: self.volt_gain.unwrap_or(base.volt_gain),
            q_headroom_eps: self.q_headroom_eps.unwrap_or(base.q_headroom_eps),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QControlOverride {
    bus: usize,
    #[serde(flatten)]
    spec: QControlSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PControlOverride {
    bus: usize,
    #[serde(flatten)]
    spec: PControlSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerProfileEntry {
    bus: usize,
    /// `[t_seconds, value]` pairs, piecewise-constant.
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadProfileEntry {
    bus: usize,
    p_points: Option<Vec<(f64, f64)>>,
    q_points: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSpec {
    csv: Option<String>,
    summary: Option<String>,
    message_trace: Option<String>,
}

// ---------------------------------------------------------------------------
// Loading

fn read_to_string(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_json<'a, T: Deserialize<'a>>(path: &Path, text: &'a str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn validation(path: &Path, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Converts a duration in seconds to whole milliseconds, rejecting negative
/// values and sub-millisecond residue.
fn secs_to_ms(path: &Path, field: &str, s: f64) -> Result<u64, ConfigError> {
    if !s.is_finite() || s < 0.0 {
        return Err(validation(path, format!("{field} must be a finite non-negative number")));
    }
    let ms = s * 1000.0;
    let rounded = ms.round();
    if (ms - rounded).abs() > 1e-6 * rounded.abs().max(1.0) {
        return Err(validation(
            path,
            format!("{field} = {s} s is not a whole number of milliseconds"),
        ));
    }
    Ok(rounded as u64)
}

fn der_bus_set(devices: &DeviceSet) -> BTreeSet<BusId> {
    devices.ders.iter().map(|d| d.bus).collect()
}

/// Loads and validates a feeder file.
pub fn load_feeder(path: &Path) -> Result<FeederBundle, ConfigError> {
    let text = read_to_string(path)?;
    let file: FeederFile = parse_json(path, &text)?;
    if file.format != 1 {
        return Err(validation(path, format!("unsupported format {}", file.format)));
    }
    if file.buses == 0 {
        return Err(validation(path, "a feeder needs at least the head bus"));
    }
    if !(file.v0.is_finite() && file.v0 > 0.0) {
        return Err(validation(path, "v0 must be positive"));
    }
    let segments: Vec<LineSegment> = file
        .lines
        .iter()
        .map(|l| LineSegment { from: l.from, to: l.to, r: l.r, x: l.x })
        .collect();
    let network = build_network(file.buses, file.v0, &segments).map_err(ConfigError::Build)?;

    let mut der_buses = BTreeSet::new();
    let mut ders = Vec::with_capacity(file.ders.len());
    for d in &file.ders {
        if d.bus == 0 || d.bus >= file.buses {
            return Err(validation(path, format!("generator on invalid bus {}", d.bus)));
        }
        if !der_buses.insert(d.bus) {
            return Err(validation(
                path,
                format!("multiple generators at bus {}; aggregate them into one", d.bus),
            ));
        }
        if !(d.s_cap.is_finite() && d.s_cap > 0.0) {
            return Err(validation(path, format!("generator at bus {}: s_cap must be positive", d.bus)));
        }
        if !(d.p_avail.is_finite() && d.p_avail >= 0.0) {
            return Err(validation(
                path,
                format!("generator at bus {}: p_avail must be non-negative", d.bus),
            ));
        }
        if d.p_avail > d.s_cap {
            return Err(validation(
                path,
                format!(
                    "generator at bus {}: p_avail {} exceeds the rating {}",
                    d.bus, d.p_avail, d.s_cap
                ),
            ));
        }
        ders.push(DerUnit {
            bus: d.bus,
            s_cap: d.s_cap,
            p_avail: Profile::constant(d.p_avail),
            p_g: d.p_avail,
            q_g: 0.0,
        });
    }

    let mut load_buses = BTreeSet::new();
    let mut loads = Vec::with_capacity(file.loads.len());
    for l in &file.loads {
        if l.bus == 0 || l.bus >= file.buses {
            return Err(validation(path, format!("load on invalid bus {}", l.bus)));
        }
        if !load_buses.insert(l.bus) {
            return Err(validation(
                path,
                format!("multiple loads at bus {}; aggregate them into one", l.bus),
            ));
        }
        if !(l.p.is_finite() && l.q.is_finite()) {
            return Err(validation(path, format!("load at bus {}: p and q must be finite", l.bus)));
        }
        loads.push(LoadPoint {
            bus: l.bus,
            p_d: Profile::constant(l.p),
            q_d: Profile::constant(l.q),
        });
    }

    let meters = file.meters.unwrap_or_default();
    for &b in meters.realtime.iter().chain(&meters.sampled) {
        if b >= file.buses {
            return Err(validation(path, format!("meter on unknown bus {b}")));
        }
    }
    let sample_period_ms = meters
        .sample_period_s
        .map(|s| secs_to_ms(path, "meters.sample_period_s", s))
        .transpose()?;

    let name = file
        .name
        .unwrap_or_else(|| path.file_stem().map_or("feeder".into(), |s| s.to_string_lossy().into_owned()));
    Ok(FeederBundle {
        name,
        network,
        devices: DeviceSet::new(ders, loads),
        realtime_meters: meters.realtime,
        sampled_meters: meters.sampled,
        sample_period_ms,
    })
}

/// Loads a scenario file, resolves its feeder (relative to the scenario's
/// directory), applies schedules and overrides, and validates the result.
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = read_to_string(path)?;
    let file: ScenarioFile = parse_json(path, &text)?;
    if file.format != 1 {
        return Err(validation(path, format!("unsupported format {}", file.format)));
    }

    let feeder_path: PathBuf = {
        let raw = PathBuf::from(&file.feeder);
        if raw.is_absolute() {
            raw
        } else {
            path.parent().unwrap_or_else(|| Path::new(".")).join(raw)
        }
    };
    let feeder = load_feeder(&feeder_path)?;
    let mut devices = feeder.devices;
    let n = feeder.network.bus_count();

    // Device schedules override the feeder's constant values.
    for entry in &file.der_profiles {
        if entry.points.is_empty() {
            return Err(validation(path, format!("der profile for bus {} has no points", entry.bus)));
        }
        let der = devices
            .ders
            .iter_mut()
            .find(|d| d.bus == entry.bus)
            .ok_or_else(|| validation(path, format!("der profile targets bus {} which hosts no generator", entry.bus)))?;
        if entry.points.iter().any(|&(t, v)| !t.is_finite() || !v.is_finite() || v < 0.0) {
            return Err(validation(
                path,
                format!("der profile for bus {}: times must be finite, values non-negative", entry.bus),
            ));
        }
        der.p_avail = Profile::from_points(entry.points.clone());
        der.p_g = der.p_avail.value_at(0.0).min(der.s_cap);
    }
    for entry in &file.load_profiles {
        let load = devices
            .loads
            .iter_mut()
            .find(|l| l.bus == entry.bus)
            .ok_or_else(|| validation(path, format!("load profile targets bus {} which hosts no load", entry.bus)))?;
        if let Some(p) = &entry.p_points {
            if p.is_empty() {
                return Err(validation(path, format!("load profile for bus {} has empty p_points", entry.bus)));
            }
            load.p_d = Profile::from_points(p.clone());
        }
        if let Some(q) = &entry.q_points {
            if q.is_empty() {
                return Err(validation(path, format!("load profile for bus {} has empty q_points", entry.bus)));
            }
            load.q_d = Profile::from_points(q.clone());
        }
    }
    if let Some(scale) = &file.load_scale {
        if scale.is_empty() {
            return Err(validation(path, "load_scale needs at least one point"));
        }
        devices.load_scale = Some(Profile::from_points(scale.clone()));
    }

    // Meters: a scenario block replaces the feeder's plan wholesale.
    let (realtime_meters, sampled_meters, sample_period_s) = match &file.meters {
        Some(m) => (m.realtime.clone(), m.sampled.clone(), m.sample_period_s),
        None => (
            feeder.realtime_meters.clone(),
            feeder.sampled_meters.clone(),
            feeder.sample_period_ms.map(|ms| ms as f64 / 1000.0),
        ),
    };
    let sample_period_ms = match sample_period_s {
        Some(s) => {
            let ms = secs_to_ms(path, "meters.sample_period_s", s)?;
            if ms == 0 {
                return Err(validation(path, "meters.sample_period_s must be positive"));
            }
            ms
        }
        None => 900_000,
    };

    // Clusters default to one cluster spanning every generator bus.
    let clusters: Vec<Vec<BusId>> = match &file.clusters {
        Some(c) => c.clone(),
        None => vec![der_bus_set(&devices).into_iter().collect()],
    };

    let comm = file.comm.unwrap_or_default();
    let intra_delay_ms = secs_to_ms(path, "comm.intra_delay_s", comm.intra_delay_s.unwrap_or(0.1))?;
    let inter_delay_ms = secs_to_ms(path, "comm.inter_delay_s", comm.inter_delay_s.unwrap_or(0.8))?;
    let ttl_ms = secs_to_ms(path, "comm.ttl_s", comm.ttl_s.unwrap_or(8.0))?;
    if ttl_ms == 0 {
        return Err(validation(path, "comm.ttl_s must be positive"));
    }

    let q_params = file.q_control.unwrap_or_default().apply(QControlParams::default());
    let p_params = file.p_control.unwrap_or_default().apply(PControlParams::default());
    let mut q_overrides = BTreeMap::new();
    for o in &file.q_control_overrides {
        if o.bus >= n {
            return Err(validation(path, format!("q_control override on unknown bus {}", o.bus)));
        }
        if q_overrides.insert(o.bus, o.spec.apply(q_params)).is_some() {
            return Err(validation(path, format!("duplicate q_control override for bus {}", o.bus)));
        }
    }
    let mut p_overrides = BTreeMap::new();
    for o in &file.p_control_overrides {
        if o.bus >= n {
            return Err(validation(path, format!("p_control override on unknown bus {}", o.bus)));
        }
        if p_overrides.insert(o.bus, o.spec.apply(p_params)).is_some() {
            return Err(validation(path, format!("duplicate p_control override for bus {}", o.bus)));
        }
    }

    let name = file
        .name
        .unwrap_or_else(|| path.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned()));

    // Output names default from the scenario name; an empty string disables
    // an artifact.
    let out = file.outputs.unwrap_or_default();
    let resolve = |given: &Option<String>, default: String| -> Option<String> {
        match given {
            None => Some(default),
            Some(s) if s.is_empty() => None,
            Some(s) => Some(s.clone()),
        }
    };
    let outputs = OutputPlan {
        csv: resolve(&out.csv, format!("{name}.csv")),
        summary: resolve(&out.summary, format!("{name}_summary.json")),
        message_trace: match &out.message_trace {
            None => None, // traces are opt-in
            Some(s) if s.is_empty() => None,
            Some(s) => Some(s.clone()),
        },
    };

    let scenario = Scenario {
        name,
        network: feeder.network,
        devices,
        duration_ms: secs_to_ms(path, "duration_s", file.duration_s)?,
        dt_pf_ms: secs_to_ms(path, "dt_pf_s", file.dt_pf_s)?,
        dt_round_ms: secs_to_ms(path, "dt_round_s", file.dt_round_s)?,
        dt_ctrl_ms: secs_to_ms(path, "dt_ctrl_s", file.dt_ctrl_s)?,
        control_mode: file.control_mode.unwrap_or_default(),
        seed: file.seed,
        clusters,
        comm_extra: file.comm_edges.clone(),
        intra_delay_ms,
        inter_delay_ms,
        extrema_mode: comm.extrema_mode.unwrap_or_default(),
        ttl_ms,
        realtime_meters,
        sampled_meters,
        sample_period_ms,
        q_params,
        p_params,
        q_overrides,
        p_overrides,
        inference_form: file.inference_form.unwrap_or_default(),
        outputs,
    };
    scenario.validate(&path.display().to_string())?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    const FEEDER: &str = r#"{
        "format": 1,
        "name": "tiny",
        "v0": 1.0,
        "buses": 4,
        "lines": [
            {"from": 0, "to": 1, "r": 0.01, "x": 0.02},
            {"from": 1, "to": 2, "r": 0.02, "x": 0.03},
            {"from": 1, "to": 3, "r": 0.015, "x": 0.025}
        ],
        "ders": [{"bus": 2, "s_cap": 0.5, "p_avail": 0.4}],
        "loads": [{"bus": 3, "p": 0.2, "q": 0.05}],
        "meters": {"realtime": [1], "sampled": [3], "sample_period_s": 900}
    }"#;

    #[test]
    fn feeder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "tiny.json", FEEDER);
        let f = load_feeder(&p).unwrap();
        assert_eq!(f.name, "tiny");
        assert_eq!(f.network.bus_count(), 4);
        assert_eq!(f.devices.ders.len(), 1);
        assert_eq!(f.devices.loads.len(), 1);
        assert_eq!(f.realtime_meters, vec![1]);
        assert_eq!(f.sample_period_ms, Some(900_000));
    }

    #[test]
    fn feeder_rejects_overrated_generator() {
        let dir = tempfile::tempdir().unwrap();
        let bad = FEEDER.replace("\"p_avail\": 0.4", "\"p_avail\": 0.6");
        let p = write_file(dir.path(), "bad.json", &bad);
        let e = load_feeder(&p).unwrap_err();
        assert!(e.to_string().contains("exceeds the rating"), "{e}");
    }

    #[test]
    fn feeder_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let bad = FEEDER.replace("\"v0\": 1.0", "\"v_zero\": 1.0");
        let p = write_file(dir.path(), "bad2.json", &bad);
        let e = load_feeder(&p).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }), "{e}");
    }

    #[test]
    fn scenario_applies_overrides_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "tiny.json", FEEDER);
        let scn = r#"{
            "format": 1,
            "feeder": "tiny.json",
            "duration_s": 2.0,
            "dt_pf_s": 0.1,
            "dt_round_s": 0.1,
            "dt_ctrl_s": 0.01,
            "control_mode": "q_only",
            "clusters": [[2, 3]],
            "comm": {"intra_delay_s": 0.1, "inter_delay_s": 0.8, "extrema_mode": "ttl", "ttl_s": 4.0},
            "q_control": {"volt_gain": 80.0},
            "q_control_overrides": [{"bus": 2, "volt_gain": 120.0}],
            "der_profiles": [{"bus": 2, "points": [[0.0, 0.1], [1.0, 0.4]]}],
            "load_profiles": [{"bus": 3, "p_points": [[0.0, 0.2], [1.0, 0.3]]}],
            "load_scale": [[0.0, 1.0], [1.5, 0.8]],
            "outputs": {"csv": "run.csv", "summary": ""}
        }"#;
        let p = write_file(dir.path(), "scn.json", scn);
        let s = load_scenario(&p).unwrap();
        assert_eq!(s.name, "scn");
        assert_eq!(s.control_mode, ControlMode::QOnly);
        assert_eq!(s.duration_ms, 2000);
        assert_eq!(s.steps(), 20);
        assert_eq!(s.rounds_per_step(), 1);
        assert_eq!(s.substeps_per_round(), 10);
        assert_eq!(s.q_params.volt_gain, 80.0);
        assert_eq!(s.q_overrides[&2].volt_gain, 120.0);
        assert_eq!(s.q_overrides[&2].deadband, QControlParams::default().deadband);
        assert_eq!(s.devices.ders[0].p_avail.value_at(0.5), 0.1);
        assert_eq!(s.devices.ders[0].p_avail.value_at(1.5), 0.4);
        assert_eq!(s.devices.loads[0].p_d.value_at(2.0), 0.3);
        assert_eq!(s.ttl_ms, 4000);
        assert_eq!(s.outputs.csv.as_deref(), Some("run.csv"));
        assert_eq!(s.outputs.summary, None, "empty string disables");
        assert_eq!(s.outputs.message_trace, None);
    }

    #[test]
    fn scenario_rejects_uncovered_generator() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "tiny.json", FEEDER);
        let scn = r#"{
            "format": 1,
            "feeder": "tiny.json",
            "duration_s": 1.0,
            "clusters": [[3]]
        }"#;
        let p = write_file(dir.path(), "scn.json", scn);
        let e = load_scenario(&p).unwrap_err();
        assert!(e.to_string().contains("not covered by any cluster"), "{e}");
    }

    #[test]
    fn scenario_rejects_inconsistent_steps() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "tiny.json", FEEDER);
        let scn = r#"{
            "format": 1,
            "feeder": "tiny.json",
            "duration_s": 1.0,
            "dt_pf_s": 0.1,
            "dt_round_s": 0.2,
            "dt_ctrl_s": 0.01
        }"#;
        let p = write_file(dir.path(), "scn.json", scn);
        let e = load_scenario(&p).unwrap_err();
        assert!(e.to_string().contains("dt_ctrl <= dt_round <= dt_pf"), "{e}");
    }

    #[test]
    fn scenario_rejects_fractional_milliseconds() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "tiny.json", FEEDER);
        let scn = r#"{
            "format": 1,
            "feeder": "tiny.json",
            "duration_s": 1.0,
            "dt_ctrl_s": 0.0001
        }"#;
        let p = write_file(dir.path(), "scn.json", scn);
        let e = load_scenario(&p).unwrap_err();
        assert!(e.to_string().contains("whole number of milliseconds"), "{e}");
    }

    #[test]
    fn default_cluster_covers_generators() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "tiny.json", FEEDER);
        let scn = r#"{"format": 1, "feeder": "tiny.json", "duration_s": 1.0}"#;
        let p = write_file(dir.path(), "scn.json", scn);
        let s = load_scenario(&p).unwrap();
        assert_eq!(s.clusters, vec![vec![2]]);
        assert_eq!(s.control_mode, ControlMode::QAndP);
        assert_eq!(s.outputs.csv.as_deref(), Some("scn.csv"));
        assert_eq!(s.outputs.summary.as_deref(), Some("scn_summary.json"));
    }
}
