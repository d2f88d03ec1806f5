//! Error types shared across the crate.
//!
//! Library code returns typed errors; only the CLI binary flattens them
//! into exit codes and a machine-readable stderr line.

use thiserror::Error;

/// Errors raised while assembling a radial network from line segments.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    /// A parent chain loops back on itself (or a segment points into bus 0).
    #[error("cycle detected involving bus {0}")]
    CycleDetected(usize),
    /// A bus is not reachable from the feeder head.
    #[error("bus {0} is not connected to the feeder head")]
    DisconnectedBus(usize),
    /// Two segments claim the same downstream bus.
    #[error("duplicate line into bus {0}")]
    DuplicateLine(usize),
    /// Segment resistance must be strictly positive.
    #[error("non-positive resistance on line into bus {0}")]
    NonPositiveResistance(usize),
    /// Segment reactance must be non-negative.
    #[error("negative reactance on line into bus {0}")]
    NegativeReactance(usize),
    /// A device or line references a bus outside `0..bus_count`.
    #[error("unknown bus {0}")]
    UnknownBus(usize),
}

/// Errors raised by the power-flow solver.
///
/// Plain failure to reach tolerance is *not* an error: `solve` returns a
/// best-effort solution with `converged == false` so callers can inspect it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerFlowError {
    /// A squared voltage went non-positive during iteration; the operating
    /// point is beyond the solvable regime.
    #[error("voltage collapse at bus {bus} during iteration {iteration}")]
    VoltageCollapse { bus: usize, iteration: usize },
    /// A query referenced a bus with no upstream segment (or out of range).
    #[error("unknown bus {0}")]
    UnknownBus(usize),
}

/// Errors raised by sensitivity analysis and voltage inference.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    /// The linear system for the exact sensitivities could not be factored.
    #[error("sensitivity system is singular at this operating point")]
    SingularSystem,
    /// The two anchor readings coincide; the ratio form is unusable and the
    /// caller should fall back to offset inference.
    #[error("degenerate anchor pair: |V_l(t_k) - V_i(t_k)| = {gap:e} below threshold")]
    DegenerateAnchor { gap: f64 },
    /// No metered bus is available to anchor an inference for this bus.
    #[error("no anchor bus available to infer voltage at bus {bus}")]
    NoAnchor { bus: usize },
    /// A query referenced a bus outside the network.
    #[error("unknown bus {0}")]
    UnknownBus(usize),
}

/// Errors raised while assembling the communication graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommsError {
    /// No agent buses were supplied.
    #[error("communication graph has no agents")]
    Empty,
    /// An explicit link references a bus that hosts no agent.
    #[error("communication link references bus {0} which hosts no agent")]
    UnknownAgent(usize),
    /// An agent cannot be reached from the first agent.
    #[error("agent at bus {0} is unreachable in the communication graph")]
    Disconnected(usize),
}

/// Errors raised by the distributed controllers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    /// The adaptive voltage reference needs at least one neighbor reading.
    #[error("adaptive reference needs at least one neighbor voltage")]
    EmptyNeighborhood,
}

/// Errors raised while loading feeder or scenario files.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Structural parse failure, with position information from the parser.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    /// The file parsed but violates a documented constraint.
    #[error("invalid {path}: {message}")]
    Validation { path: String, message: String },
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Errors raised by the simulation engine.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    /// The solver failed to reach tolerance at a step; the partial log has
    /// been flushed before this is returned.
    #[error("power flow did not converge at step {step} (t = {t_s} s)")]
    NotConverged { step: usize, t_s: f64 },
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
