//! Radial feeder model: tree topology, per-segment impedances, devices, and
//! the path-impedance matrices that make bus voltages an explicit function of
//! injections.
//!
//! Buses are numbered `0..bus_count`; bus 0 is the feeder head (slack), held
//! at voltage `v0`. Every other bus has exactly one upstream segment, keyed by
//! its downstream bus. All quantities are per-unit on a common base.
//!
//! For buses `k` and `i`, `common_path_resistance(k, i)` is the sum of segment
//! resistances on the shared portion of the two head-to-bus paths (equal to
//! the full path resistance of their deepest common bus). These matrices give
//! the exact voltage identity used throughout the crate: with net injections
//! `p_i + j q_i` (consumption positive) and segment real losses `loss_i`,
//!
//! ```text
//! V_k^2 = v0^2 - sum_i [2 R_ki p_i + 2 X_ki q_i] - sum_i coeff_ki * loss_i
//! ```
//!
//! where `coeff_ki = loss_coefficient(k, i)`. The loss coefficients follow
//! from telescoping the per-segment voltage-drop identity down the path, so
//! the identity holds to solver precision, not just approximately.

use crate::error::BuildError;

/// Bus index. Bus 0 is the feeder head.
pub type BusId = usize;

/// Networks up to this size precompute dense path matrices; larger networks
/// answer matrix queries on demand from cumulative path sums.
pub const DENSE_BUS_LIMIT: usize = 2000;

/// One line segment, keyed by its downstream bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    /// Upstream bus.
    pub from: BusId,
    /// Downstream bus; unique per segment in a radial network.
    pub to: BusId,
    /// Series resistance, per-unit. Must be > 0.
    pub r: f64,
    /// Series reactance, per-unit. Must be >= 0.
    pub x: f64,
}

/// Immutable radial network: topology, impedances, and path matrices.
///
/// Built once by [`build_network`]; safe to share across threads.
#[derive(Debug, Clone)]
pub struct RadialNetwork {
    n: usize,
    v0: f64,
    /// Upstream bus per bus; `None` for the head.
    parent: Vec<Option<BusId>>,
    children: Vec<Vec<BusId>>,
    depth: Vec<usize>,
    /// Segment parameters indexed by downstream bus (index 0 unused).
    seg_r: Vec<f64>,
    seg_x: Vec<f64>,
    /// Reactance-to-resistance ratio per segment (x/r), indexed by bus.
    xr_ratio: Vec<f64>,
    /// Head-to-bus cumulative path sums.
    cum_r: Vec<f64>,
    cum_x: Vec<f64>,
    /// Depth-first visit order (head first); a bus's subtree is a contiguous
    /// slice of this list.
    preorder: Vec<BusId>,
    /// Subtree interval per bus: `preorder[tin[b]..tout[b]]` is b's subtree.
    tin: Vec<usize>,
    tout: Vec<usize>,
    /// Dense common-path matrices, present when `n <= DENSE_BUS_LIMIT`.
    dense_r: Option<Vec<f64>>,
    dense_x: Option<Vec<f64>>,
}

/// Builds and validates a radial network.
///
/// `segments` must describe a tree rooted at bus 0: one segment per non-head
/// bus. Validation rejects duplicate downstream buses, cycles, unreachable
/// buses, non-positive resistance, and negative reactance.
///
/// The head voltage `v0` must be positive (asserted).
pub fn build_network(
    bus_count: usize,
    v0: f64,
    segments: &[LineSegment],
) -> Result<RadialNetwork, BuildError> {
    assert!(bus_count >= 1, "a network needs at least the head bus");
    assert!(v0 > 0.0, "head voltage must be positive");
    let n = bus_count;

    let mut parent: Vec<Option<BusId>> = vec![None; n];
    let mut seg_r = vec![0.0; n];
    let mut seg_x = vec![0.0; n];
    for seg in segments {
        if seg.from >= n {
            return Err(BuildError::UnknownBus(seg.from));
        }
        if seg.to >= n {
            return Err(BuildError::UnknownBus(seg.to));
        }
        if seg.to == 0 {
            // A segment into the head would give the root an upstream bus.
            return Err(BuildError::CycleDetected(0));
        }
        if parent[seg.to].is_some() {
            return Err(BuildError::DuplicateLine(seg.to));
        }
        if !(seg.r > 0.0) {
            return Err(BuildError::NonPositiveResistance(seg.to));
        }
        if seg.x < 0.0 {
            return Err(BuildError::NegativeReactance(seg.to));
        }
        parent[seg.to] = Some(seg.from);
        seg_r[seg.to] = seg.r;
        seg_x[seg.to] = seg.x;
    }

    let mut children: Vec<Vec<BusId>> = vec![Vec::new(); n];
    for b in 1..n {
        match parent[b] {
            Some(p) => children[p].push(b),
            None => return Err(BuildError::DisconnectedBus(b)),
        }
    }
    for c in &mut children {
        c.sort_unstable();
    }

    // Reachability from the head. Anything unreached sits on (or hangs off)
    // a parent cycle, or references buses that never lead back to the head.
    let mut reached = vec![false; n];
    let mut stack = vec![0usize];
    reached[0] = true;
    let mut preorder = Vec::with_capacity(n);
    // Iterative DFS; children pushed in reverse so the slice order is
    // ascending-bus preorder.
    while let Some(b) = stack.pop() {
        preorder.push(b);
        for &c in children[b].iter().rev() {
            reached[c] = true;
            stack.push(c);
        }
    }
    if preorder.len() != n {
        // Distinguish a cycle from a dangling subtree: walk the parent chain
        // of the first unreached bus; revisiting a bus proves a cycle.
        let lost = (0..n).find(|&b| !reached[b]).expect("some bus unreached");
        let mut seen = vec![false; n];
        let mut cur = lost;
        loop {
            if seen[cur] {
                return Err(BuildError::CycleDetected(cur));
            }
            seen[cur] = true;
            match parent[cur] {
                Some(p) if reached[p] => return Err(BuildError::DisconnectedBus(lost)),
                Some(p) => cur = p,
                None => return Err(BuildError::DisconnectedBus(lost)),
            }
        }
    }

    let mut tin = vec![0usize; n];
    let mut tout = vec![0usize; n];
    for (pos, &b) in preorder.iter().enumerate() {
        tin[b] = pos;
    }
    // tout in reverse preorder: a subtree ends where its last child's does.
    for &b in preorder.iter().rev() {
        tout[b] = children[b]
            .iter()
            .map(|&c| tout[c])
            .max()
            .unwrap_or(tin[b] + 1);
    }

    let mut depth = vec![0usize; n];
    let mut cum_r = vec![0.0; n];
    let mut cum_x = vec![0.0; n];
    for &b in preorder.iter().skip(1) {
        let p = parent[b].expect("non-head bus has a parent");
        depth[b] = depth[p] + 1;
        cum_r[b] = cum_r[p] + seg_r[b];
        cum_x[b] = cum_x[p] + seg_x[b];
    }

    let xr_ratio = (0..n).map(|b| if b == 0 { 0.0 } else { seg_x[b] / seg_r[b] }).collect();

    let (dense_r, dense_x) = if n <= DENSE_BUS_LIMIT {
        // Row recursion: the shared path of (k, i) extends the shared path of
        // (parent(k), i) by segment k exactly when i lies in k's subtree.
        let mut mr = vec![0.0; n * n];
        let mut mx = vec![0.0; n * n];
        for &k in preorder.iter().skip(1) {
            let p = parent[k].expect("non-head bus has a parent");
            let (pr, px) = (p * n, p * n);
            let (kr, kx) = (k * n, k * n);
            for i in 0..n {
                mr[kr + i] = mr[pr + i];
                mx[kx + i] = mx[px + i];
            }
            for &i in &preorder[tin[k]..tout[k]] {
                mr[kr + i] += seg_r[k];
                mx[kx + i] += seg_x[k];
            }
        }
        (Some(mr), Some(mx))
    } else {
        (None, None)
    };

    Ok(RadialNetwork {
        n,
        v0,
        parent,
        children,
        depth,
        seg_r,
        seg_x,
        xr_ratio,
        cum_r,
        cum_x,
        preorder,
        tin,
        tout,
        dense_r,
        dense_x,
    })
}

impl RadialNetwork {
    pub fn bus_count(&self) -> usize {
        self.n
    }

    /// Head (slack) voltage magnitude, per-unit.
    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Upstream bus, `None` for the head.
    pub fn parent(&self, bus: BusId) -> Option<BusId> {
        self.parent[bus]
    }

    /// Directly downstream buses, ascending.
    pub fn children(&self, bus: BusId) -> &[BusId] {
        &self.children[bus]
    }

    /// Number of segments between the head and `bus`.
    pub fn depth(&self, bus: BusId) -> usize {
        self.depth[bus]
    }

    /// Resistance of the segment ending at `bus` (0.0 for the head).
    pub fn segment_r(&self, bus: BusId) -> f64 {
        self.seg_r[bus]
    }

    /// Reactance of the segment ending at `bus` (0.0 for the head).
    pub fn segment_x(&self, bus: BusId) -> f64 {
        self.seg_x[bus]
    }

    /// Reactance-to-resistance ratio of the segment ending at `bus`.
    pub fn segment_xr_ratio(&self, bus: BusId) -> f64 {
        self.xr_ratio[bus]
    }

    /// Buses in depth-first order from the head; each subtree is contiguous.
    pub fn preorder(&self) -> &[BusId] {
        &self.preorder
    }

    /// Strict descendants of `bus` (excluding `bus`), in depth-first order.
    pub fn descendants(&self, bus: BusId) -> &[BusId] {
        &self.preorder[self.tin[bus] + 1..self.tout[bus]]
    }

    /// True when `a` lies on the head-to-`b` path, `a == b` included.
    pub fn is_ancestor_or_self(&self, a: BusId, b: BusId) -> bool {
        self.tin[a] <= self.tin[b] && self.tin[b] < self.tout[a]
    }

    /// True when `b` is strictly below `a`.
    pub fn is_strict_descendant(&self, b: BusId, a: BusId) -> bool {
        a != b && self.is_ancestor_or_self(a, b)
    }

    /// Buses on the path from the head to `bus`, excluding the head itself
    /// (each entry names a segment by its downstream bus), head-side first.
    pub fn path_to(&self, bus: BusId) -> Vec<BusId> {
        let mut path = Vec::with_capacity(self.depth[bus]);
        let mut cur = bus;
        while let Some(p) = self.parent[cur] {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Total path resistance from the head to `bus`.
    pub fn path_resistance_to(&self, bus: BusId) -> f64 {
        self.cum_r[bus]
    }

    /// Total path reactance from the head to `bus`.
    pub fn path_reactance_to(&self, bus: BusId) -> f64 {
        self.cum_x[bus]
    }

    /// Deepest bus common to the head-to-`a` and head-to-`b` paths.
    pub fn deepest_common_bus(&self, a: BusId, b: BusId) -> BusId {
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("deeper bus has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("deeper bus has a parent");
        }
        while a != b {
            a = self.parent[a].expect("distinct buses at equal depth have parents");
            b = self.parent[b].expect("distinct buses at equal depth have parents");
        }
        a
    }

    /// Sum of segment resistances shared by the head-to-`k` and head-to-`i`
    /// paths. Symmetric; zero when either bus is the head or the paths split
    /// immediately.
    pub fn common_path_resistance(&self, k: BusId, i: BusId) -> f64 {
        match &self.dense_r {
            Some(m) => m[k * self.n + i],
            None => self.cum_r[self.deepest_common_bus(k, i)],
        }
    }

    /// Reactance analogue of [`common_path_resistance`].
    ///
    /// [`common_path_resistance`]: RadialNetwork::common_path_resistance
    pub fn common_path_reactance(&self, k: BusId, i: BusId) -> f64 {
        match &self.dense_x {
            Some(m) => m[k * self.n + i],
            None => self.cum_x[self.deepest_common_bus(k, i)],
        }
    }

    /// First-order transfer impedance from segment-`i` real loss to the
    /// squared voltage at bus `k`: the common-path sums, with the own-segment
    /// term removed when `k` sits strictly below `i`.
    ///
    /// This is the coefficient in the *linearized* explicit voltage equation;
    /// [`loss_coefficient`] is the exact one.
    ///
    /// [`loss_coefficient`]: RadialNetwork::loss_coefficient
    pub fn loss_transfer(&self, k: BusId, i: BusId) -> f64 {
        let (mut rr, mut xx) = (
            self.common_path_resistance(k, i),
            self.common_path_reactance(k, i),
        );
        if self.is_strict_descendant(k, i) {
            rr -= self.seg_r[i];
            xx -= self.seg_x[i];
        }
        rr + self.xr_ratio[i] * xx
    }

    /// Exact coefficient of segment-`i` real loss in the explicit identity
    /// for the squared voltage at bus `k` (see the module docs). Telescoping
    /// the per-segment drop identity gives
    ///
    /// ```text
    /// coeff_ki = (R_ki + b_i X_ki) + (R'_ki + b_i X'_ki)
    /// ```
    ///
    /// where the primed terms subtract the own-segment impedance whenever `i`
    /// lies on the head-to-`k` path (including `i == k`), and `b_i` is the
    /// segment's x/r ratio.
    pub fn loss_coefficient(&self, k: BusId, i: BusId) -> f64 {
        let (mut rr, mut xx) = (
            self.common_path_resistance(k, i),
            self.common_path_reactance(k, i),
        );
        let (full_r, full_x) = (rr, xx);
        if self.is_ancestor_or_self(i, k) {
            rr -= self.seg_r[i];
            xx -= self.seg_x[i];
        }
        (full_r + self.xr_ratio[i] * full_x) + (rr + self.xr_ratio[i] * xx)
    }

    /// Materializes the full common-path resistance matrix (row `k`, col `i`).
    pub fn resistance_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|k| (0..self.n).map(|i| self.common_path_resistance(k, i)).collect())
            .collect()
    }

    /// Materializes the full common-path reactance matrix.
    pub fn reactance_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|k| (0..self.n).map(|i| self.common_path_reactance(k, i)).collect())
            .collect()
    }
}

/// Piecewise-constant time profile: the value at `t` is the value of the last
/// point at or before `t`; before the first point the first value holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Profile {
    points: Vec<(f64, f64)>,
}

impl Profile {
    /// A profile that holds `value` forever.
    pub fn constant(value: f64) -> Self {
        Profile { points: vec![(0.0, value)] }
    }

    /// Builds from `(t_seconds, value)` points; sorts by time.
    ///
    /// Panics if `points` is empty.
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Self {
        assert!(!points.is_empty(), "a profile needs at least one point");
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Profile { points }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let mut v = self.points[0].1;
        for &(pt, pv) in &self.points {
            if pt <= t {
                v = pv;
            } else {
                break;
            }
        }
        v
    }

    /// Largest value the profile ever takes.
    pub fn max_value(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// A distributed generator (inverter-interfaced) at one bus.
#[derive(Debug, Clone)]
pub struct DerUnit {
    pub bus: BusId,
    /// Apparent-power capability, per-unit. Bounds `p_g^2 + q_g^2`.
    pub s_cap: f64,
    /// Available real power over time (resource curve).
    pub p_avail: Profile,
    /// Commanded real output; controllers keep `0 <= p_g <= p_avail(t)`.
    pub p_g: f64,
    /// Commanded reactive output; controllers keep `|q_g|` within the
    /// capability left over at the current `p_g`.
    pub q_g: f64,
}

impl DerUnit {
    /// Reactive capability at real output `p_g`: the rest of the capability
    /// circle, `sqrt(s_cap^2 - p_g^2)` (0 when `p_g` saturates it).
    pub fn q_capability(s_cap: f64, p_g: f64) -> f64 {
        (s_cap * s_cap - p_g * p_g).max(0.0).sqrt()
    }
}

/// A constant-power demand at one bus, with piecewise-constant schedules.
#[derive(Debug, Clone)]
pub struct LoadPoint {
    pub bus: BusId,
    pub p_d: Profile,
    pub q_d: Profile,
}

/// All devices on a feeder, plus global scaling knobs.
#[derive(Debug, Clone, Default)]
pub struct DeviceSet {
    pub ders: Vec<DerUnit>,
    pub loads: Vec<LoadPoint>,
    /// Multiplier applied to every load (demand-response / scenario steps).
    pub load_scale: Option<Profile>,
    /// Multiplier applied to every `p_avail` (penetration sweeps).
    pub der_scale: f64,
}

impl DeviceSet {
    pub fn new(ders: Vec<DerUnit>, loads: Vec<LoadPoint>) -> Self {
        DeviceSet { ders, loads, load_scale: None, der_scale: 1.0 }
    }

    /// Bus-range validation against a built network.
    pub fn validate(&self, network: &RadialNetwork) -> Result<(), BuildError> {
        let n = network.bus_count();
        for d in &self.ders {
            if d.bus >= n {
                return Err(BuildError::UnknownBus(d.bus));
            }
        }
        for l in &self.loads {
            if l.bus >= n {
                return Err(BuildError::UnknownBus(l.bus));
            }
        }
        Ok(())
    }

    fn load_scale_at(&self, t: f64) -> f64 {
        self.load_scale.as_ref().map_or(1.0, |p| p.value_at(t))
    }

    /// Scaled available real power of DER `idx` at time `t`.
    pub fn der_p_avail_at(&self, idx: usize, t: f64) -> f64 {
        (self.ders[idx].p_avail.value_at(t) * self.der_scale).min(self.ders[idx].s_cap)
    }

    /// Net complex injection `(p, q)` at `bus` and time `t`, with consumption
    /// positive: demand minus generation, summed over co-located devices.
    pub fn net_injection(&self, bus: BusId, t: f64) -> (f64, f64) {
        let ls = self.load_scale_at(t);
        let mut p = 0.0;
        let mut q = 0.0;
        for l in &self.loads {
            if l.bus == bus {
                p += l.p_d.value_at(t) * ls;
                q += l.q_d.value_at(t) * ls;
            }
        }
        for d in &self.ders {
            if d.bus == bus {
                p -= d.p_g;
                q -= d.q_g;
            }
        }
        (p, q)
    }

    /// Net injections for every bus at time `t`, indexed by bus.
    pub fn injections_at(&self, bus_count: usize, t: f64) -> Vec<(f64, f64)> {
        let ls = self.load_scale_at(t);
        let mut inj = vec![(0.0, 0.0); bus_count];
        for l in &self.loads {
            inj[l.bus].0 += l.p_d.value_at(t) * ls;
            inj[l.bus].1 += l.q_d.value_at(t) * ls;
        }
        for d in &self.ders {
            inj[d.bus].0 -= d.p_g;
            inj[d.bus].1 -= d.q_g;
        }
        inj
    }

    /// Total scaled demand at time `t`.
    pub fn total_demand_at(&self, t: f64) -> f64 {
        let ls = self.load_scale_at(t);
        self.loads.iter().map(|l| l.p_d.value_at(t) * ls).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize, r: f64, x: f64) -> Vec<LineSegment> {
        (1..n).map(|b| LineSegment { from: b - 1, to: b, r, x }).collect()
    }

    #[test]
    fn three_bus_chain_matrices() {
        // 0 -1- 2 chain, r = 0.01 per segment.
        let net = build_network(3, 1.0, &chain(3, 0.01, 0.02)).unwrap();
        assert_eq!(net.common_path_resistance(2, 2), 0.02);
        assert_eq!(net.common_path_resistance(2, 1), 0.01);
        assert_eq!(net.common_path_resistance(1, 2), 0.01);
        assert_eq!(net.common_path_resistance(0, 2), 0.0);
        // Loss transfer drops the own segment only when k is strictly below i.
        assert_eq!(net.loss_transfer(2, 1), 0.0); // (0.01-0.01) + 2*(0.02-0.02)
        let b = 0.02 / 0.01;
        assert!((net.loss_transfer(1, 2) - (0.01 + b * 0.02)).abs() < 1e-15);
    }

    #[test]
    fn fork_common_path_is_shared_trunk() {
        // 0 - 1, then 1 - 2 and 1 - 3 (siblings).
        let segs = vec![
            LineSegment { from: 0, to: 1, r: 0.02, x: 0.04 },
            LineSegment { from: 1, to: 2, r: 0.01, x: 0.02 },
            LineSegment { from: 1, to: 3, r: 0.03, x: 0.01 },
        ];
        let net = build_network(4, 1.0, &segs).unwrap();
        assert_eq!(net.common_path_resistance(2, 3), 0.02);
        assert_eq!(net.common_path_reactance(3, 2), 0.04);
        assert_eq!(net.descendants(1), &[2, 3]);
        assert!(net.is_strict_descendant(3, 1));
        assert!(!net.is_strict_descendant(2, 3));
        assert_eq!(net.path_to(3), vec![1, 3]);
    }

    #[test]
    fn diagonal_equals_full_path_sum() {
        let net = build_network(5, 1.0, &chain(5, 0.015, 0.03)).unwrap();
        for k in 0..5 {
            assert!((net.common_path_resistance(k, k) - net.path_resistance_to(k)).abs() < 1e-15);
            for i in 0..5 {
                let v = net.common_path_resistance(k, i);
                assert!(v <= net.path_resistance_to(k) + 1e-15);
                assert!(v <= net.path_resistance_to(i) + 1e-15);
                assert_eq!(v, net.common_path_resistance(i, k));
            }
        }
    }

    #[test]
    fn build_rejects_duplicate_line() {
        let segs = vec![
            LineSegment { from: 0, to: 1, r: 0.01, x: 0.0 },
            LineSegment { from: 0, to: 1, r: 0.02, x: 0.0 },
        ];
        assert_eq!(build_network(2, 1.0, &segs).unwrap_err(), BuildError::DuplicateLine(1));
    }

    #[test]
    fn build_rejects_disconnected_bus() {
        let segs = vec![LineSegment { from: 0, to: 1, r: 0.01, x: 0.0 }];
        assert_eq!(build_network(3, 1.0, &segs).unwrap_err(), BuildError::DisconnectedBus(2));
    }

    #[test]
    fn build_rejects_cycle() {
        // 2 -> 3 -> 2 loop hanging off nothing.
        let segs = vec![
            LineSegment { from: 0, to: 1, r: 0.01, x: 0.0 },
            LineSegment { from: 3, to: 2, r: 0.01, x: 0.0 },
            LineSegment { from: 2, to: 3, r: 0.01, x: 0.0 },
        ];
        let err = build_network(4, 1.0, &segs).unwrap_err();
        assert!(matches!(err, BuildError::CycleDetected(_)), "got {err:?}");
    }

    #[test]
    fn build_rejects_bad_impedance() {
        let segs = vec![LineSegment { from: 0, to: 1, r: 0.0, x: 0.0 }];
        assert_eq!(
            build_network(2, 1.0, &segs).unwrap_err(),
            BuildError::NonPositiveResistance(1)
        );
        let segs = vec![LineSegment { from: 0, to: 1, r: 0.01, x: -0.1 }];
        assert_eq!(build_network(2, 1.0, &segs).unwrap_err(), BuildError::NegativeReactance(1));
    }

    #[test]
    fn net_injection_signs() {
        let mut dev = DeviceSet::new(
            vec![DerUnit {
                bus: 1,
                s_cap: 0.5,
                p_avail: Profile::constant(0.4),
                p_g: 0.3,
                q_g: 0.1,
            }],
            vec![LoadPoint { bus: 1, p_d: Profile::constant(0.2), q_d: Profile::constant(0.05) }],
        );
        // Demand minus generation.
        let (p, q) = dev.net_injection(1, 0.0);
        assert!((p - (0.2 - 0.3)).abs() < 1e-15);
        assert!((q - (0.05 - 0.1)).abs() < 1e-15);
        assert_eq!(dev.net_injection(0, 0.0), (0.0, 0.0));
        // Load scaling applies to demand only.
        dev.load_scale = Some(Profile::from_points(vec![(0.0, 1.0), (10.0, 0.5)]));
        let (p, _) = dev.net_injection(1, 10.0);
        assert!((p - (0.1 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn profile_steps_hold_left_value() {
        let p = Profile::from_points(vec![(10.0, 2.0), (0.0, 1.0)]);
        assert_eq!(p.value_at(-5.0), 1.0);
        assert_eq!(p.value_at(9.999), 1.0);
        assert_eq!(p.value_at(10.0), 2.0);
        assert_eq!(p.value_at(1e9), 2.0);
        assert_eq!(p.max_value(), 2.0);
    }

    #[test]
    fn q_capability_circle() {
        assert!((DerUnit::q_capability(0.5, 0.3) - 0.4).abs() < 1e-15);
        assert_eq!(DerUnit::q_capability(0.5, 0.5), 0.0);
        // Guard against fp dust pushing the radicand negative.
        assert_eq!(DerUnit::q_capability(0.5, 0.5000000001), 0.0);
    }
}
