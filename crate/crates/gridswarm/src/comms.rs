//! Simulated clustered communication network with delivery delays.
//!
//! Agents sit on feeder buses, organized into clusters. Inside a cluster
//! the agents form a chain in the order the cluster lists them; consecutive
//! clusters are joined either through a shared agent bus or, failing that,
//! by one boundary link between their adjacent ends. Intra-cluster links
//! are fast (default 0.1 s), boundary links slow (default 0.8 s).
//!
//! Messages travel through a single [`DelayQueue`]: broadcast enqueues one
//! copy per neighbor with the link's delay; [`DelayQueue::route`] hands
//! back everything due at the current time in a deterministic order
//! (delivery time, then sender bus, then send sequence), which also makes
//! every link FIFO.
//!
//! The module owns the two network-extrema estimators the controllers feed
//! on: [`step_extrema`], the published forgetting-factor max/min-consensus
//! update, and [`step_extrema_ttl`], a timestamped variant whose records
//! age out after a TTL instead of decaying multiplicatively (see the
//! function docs for the trade-off; the engine defaults to TTL).

use std::collections::BTreeMap;

use crate::error::CommsError;
use crate::feeder::BusId;

/// Undirected agent-to-agent communication topology with per-link delays.
#[derive(Debug, Clone)]
pub struct CommGraph {
    /// Sorted, deduplicated agent bus ids; node indices point into this.
    agents: Vec<BusId>,
    /// Per node: `(neighbor node index, link delay in ms)`, sorted by index.
    neighbors: Vec<Vec<(usize, u64)>>,
    /// Per node: index of the first cluster that listed the bus.
    cluster: Vec<usize>,
    edge_count: usize,
}

impl CommGraph {
    pub fn agents(&self) -> &[BusId] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn node_index(&self, bus: BusId) -> Option<usize> {
        self.agents.binary_search(&bus).ok()
    }

    pub fn bus(&self, node: usize) -> BusId {
        self.agents[node]
    }

    /// Neighbors of a node as `(node index, delay_ms)`, ascending by index.
    pub fn neighbors(&self, node: usize) -> &[(usize, u64)] {
        &self.neighbors[node]
    }

    /// Index of the first cluster that listed this node's bus.
    pub fn cluster_of(&self, node: usize) -> usize {
        self.cluster[node]
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Longest shortest path between any two agents, in hops.
    pub fn diameter_hops(&self) -> usize {
        let n = self.agents.len();
        let mut best = 0;
        for start in 0..n {
            let mut dist = vec![usize::MAX; n];
            let mut frontier = vec![start];
            dist[start] = 0;
            while let Some(u) = frontier.pop() {
                for &(v, _) in &self.neighbors[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        frontier.insert(0, v);
                    }
                }
            }
            best = best.max(*dist.iter().filter(|&&d| d != usize::MAX).max().unwrap_or(&0));
        }
        best
    }
}

/// Builds the clustered chain topology.
///
/// `clusters` lists the agent buses of each cluster in chain order (clusters
/// may share buses; empty clusters are skipped). `extra_links` adds explicit
/// agent-to-agent links; their delay is `intra_delay_ms` when both endpoints
/// share a cluster and `inter_delay_ms` otherwise. Parallel links keep the
/// smaller delay.
pub fn build_comm_graph(
    clusters: &[Vec<BusId>],
    intra_delay_ms: u64,
    inter_delay_ms: u64,
    extra_links: &[(BusId, BusId)],
) -> Result<CommGraph, CommsError> {
    let mut agents: Vec<BusId> = clusters.iter().flatten().copied().collect();
    agents.sort_unstable();
    agents.dedup();
    if agents.is_empty() {
        return Err(CommsError::Empty);
    }
    let idx = |bus: BusId| agents.binary_search(&bus);

    let n = agents.len();
    let mut cluster_of = vec![usize::MAX; n];
    for (ci, members) in clusters.iter().enumerate() {
        for &b in members {
            let i = idx(b).expect("member is an agent");
            if cluster_of[i] == usize::MAX {
                cluster_of[i] = ci;
            }
        }
    }

    // Edge map keyed by (min node, max node), value = delay; keep smallest.
    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let add = |a: usize, b: usize, delay: u64, edges: &mut BTreeMap<(usize, usize), u64>| {
        if a == b {
            return;
        }
        let key = (a.min(b), a.max(b));
        let slot = edges.entry(key).or_insert(delay);
        *slot = (*slot).min(delay);
    };

    for members in clusters.iter() {
        for pair in members.windows(2) {
            let a = idx(pair[0]).unwrap();
            let b = idx(pair[1]).unwrap();
            add(a, b, intra_delay_ms, &mut edges);
        }
    }
    // Chain consecutive non-empty clusters that do not already share a bus.
    let nonempty: Vec<&Vec<BusId>> = clusters.iter().filter(|c| !c.is_empty()).collect();
    for pair in nonempty.windows(2) {
        let (left, right) = (pair[0], pair[1]);
        if left.iter().any(|b| right.contains(b)) {
            continue;
        }
        let a = idx(*left.last().unwrap()).unwrap();
        let b = idx(right[0]).unwrap();
        add(a, b, inter_delay_ms, &mut edges);
    }
    for &(ba, bb) in extra_links {
        let a = idx(ba).map_err(|_| CommsError::UnknownAgent(ba))?;
        let b = idx(bb).map_err(|_| CommsError::UnknownAgent(bb))?;
        let delay = if cluster_of[a] == cluster_of[b] { intra_delay_ms } else { inter_delay_ms };
        add(a, b, delay, &mut edges);
    }

    let mut neighbors = vec![Vec::new(); n];
    for (&(a, b), &delay) in &edges {
        neighbors[a].push((b, delay));
        neighbors[b].push((a, delay));
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }

    // Reachability from the first agent.
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &(v, _) in &neighbors[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(CommsError::Disconnected(agents[i]));
    }

    let edge_count = edges.len();
    Ok(CommGraph { agents, neighbors, cluster: cluster_of, edge_count })
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// State snapshot an agent shares with its neighbors each round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Payload {
    /// Sender's own bus voltage (its freshest local reading).
    pub v: f64,
    /// Sender's running network-max estimate and the measurement birth time
    /// backing it (birth is only meaningful in TTL mode).
    pub v_max: f64,
    pub v_max_birth_ms: u64,
    /// Sender's running network-min estimate and its birth time.
    pub v_min: f64,
    pub v_min_birth_ms: u64,
    /// Sender's reactive utilization state (consensus variable).
    pub q_util: f64,
    /// Sender's curtailment state (consensus variable).
    pub curtail: f64,
}

/// One queued transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: BusId,
    pub to: BusId,
    pub sent_ms: u64,
    pub deliver_ms: u64,
    pub payload: Payload,
}

/// Global delay queue with deterministic delivery order.
///
/// Messages come out ordered by `(deliver_ms, sender bus, send sequence)`.
/// Links share one constant delay each, so this order is also per-link FIFO.
#[derive(Debug, Clone, Default)]
pub struct DelayQueue {
    queue: BTreeMap<(u64, BusId, u64), Message>,
    seq: u64,
    sent: u64,
}

impl DelayQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: Message) {
        let key = (msg.deliver_ms, msg.from, self.seq);
        self.seq += 1;
        self.sent += 1;
        self.queue.insert(key, msg);
    }

    /// Sends `payload` from the node to every neighbor, stamping each copy
    /// with its link delay.
    pub fn broadcast(&mut self, graph: &CommGraph, from_node: usize, payload: Payload, now_ms: u64) {
        for &(to_node, delay) in graph.neighbors(from_node) {
            self.push(Message {
                from: graph.bus(from_node),
                to: graph.bus(to_node),
                sent_ms: now_ms,
                deliver_ms: now_ms + delay,
                payload,
            });
        }
    }

    /// Removes and returns every message due at `now_ms`, in delivery order.
    pub fn route(&mut self, now_ms: u64) -> Vec<Message> {
        let rest = self.queue.split_off(&(now_ms + 1, 0, 0));
        let due = std::mem::replace(&mut self.queue, rest);
        due.into_values().collect()
    }

    /// Messages still in flight.
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Total messages ever enqueued.
    pub fn sent_total(&self) -> u64 {
        self.sent
    }
}

// ---------------------------------------------------------------------------
// Network extrema estimation
// ---------------------------------------------------------------------------

/// A node's running estimate of the network-wide voltage extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremaEstimate {
    /// Estimated network maximum voltage.
    pub v_h: f64,
    /// Estimated network minimum voltage.
    pub v_l: f64,
}

/// One round of the forgetting-factor max/min-consensus update.
///
/// `received_values` are this round's fresh voltage readings visible to the
/// node (its own bus, inferred buses it covers, and values relayed by
/// neighbors); `received_estimates` are the prior-round estimates of the
/// node and its neighbors. Both must include the node's own entries and be
/// non-empty. The previous estimates are shrunk by `(1 - dt)` so that stale
/// extremes decay and current readings take over:
///
/// ```text
/// v_h = max( max fresh, (1 - dt) * max prior v_h )
/// v_l = min( min fresh, (1 - dt) * min prior v_l )
/// ```
///
/// Note the decay relaxes estimates toward zero, not toward the present
/// field. On per-unit voltage levels (around 1.0) this leaves a standing
/// bias of order `1 - (1 - dt)^hops` on relayed extremes, which is why the
/// engine defaults to the TTL estimator below; this form is kept as the
/// published baseline and for fields expressed as deviations.
pub fn step_extrema(
    received_values: &[f64],
    received_estimates: &[ExtremaEstimate],
    dt: f64,
) -> ExtremaEstimate {
    assert!(dt > 0.0 && dt < 1.0, "round fraction must sit in (0, 1)");
    assert!(!received_values.is_empty(), "fresh set must include the node's own reading");
    let fresh_max = received_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fresh_min = received_values.iter().copied().fold(f64::INFINITY, f64::min);
    let prior_max = received_estimates.iter().map(|e| e.v_h).fold(f64::NEG_INFINITY, f64::max);
    let prior_min = received_estimates.iter().map(|e| e.v_l).fold(f64::INFINITY, f64::min);
    let v_h = if received_estimates.is_empty() {
        fresh_max
    } else {
        fresh_max.max((1.0 - dt) * prior_max)
    };
    let v_l = if received_estimates.is_empty() {
        fresh_min
    } else {
        fresh_min.min((1.0 - dt) * prior_min)
    };
    ExtremaEstimate { v_h, v_l }
}

/// A voltage reading paired with the time it was measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremaRecord {
    pub value: f64,
    pub birth_ms: u64,
}

/// One round of timestamped max/min consensus with record expiry.
///
/// Candidates are this round's fresh readings (born now) plus the prior
/// records of the node and its neighbors whose measurements are younger
/// than `ttl_ms`. The max record is the candidate with the largest value
/// (ties to the newer birth), the min record symmetric. Because records
/// carry their measurement time, a constant field propagates *exactly* (no
/// decay bias), and a vanished extreme is forgotten once its record ages
/// out — at the price of choosing a TTL longer than the network traversal
/// time.
pub fn step_extrema_ttl(
    now_ms: u64,
    ttl_ms: u64,
    fresh: &[f64],
    prior: &[(ExtremaRecord, ExtremaRecord)],
) -> (ExtremaRecord, ExtremaRecord) {
    assert!(!fresh.is_empty(), "fresh set must include the node's own reading");
    let mut best_max = ExtremaRecord { value: f64::NEG_INFINITY, birth_ms: 0 };
    let mut best_min = ExtremaRecord { value: f64::INFINITY, birth_ms: 0 };
    let mut consider_max = |rec: ExtremaRecord| {
        if rec.value > best_max.value
            || (rec.value == best_max.value && rec.birth_ms > best_max.birth_ms)
        {
            best_max = rec;
        }
    };
    let mut consider_min = |rec: ExtremaRecord| {
        if rec.value < best_min.value
            || (rec.value == best_min.value && rec.birth_ms > best_min.birth_ms)
        {
            best_min = rec;
        }
    };
    for &v in fresh {
        consider_max(ExtremaRecord { value: v, birth_ms: now_ms });
        consider_min(ExtremaRecord { value: v, birth_ms: now_ms });
    }
    for &(mx, mn) in prior {
        if now_ms.saturating_sub(mx.birth_ms) <= ttl_ms {
            consider_max(mx);
        }
        if now_ms.saturating_sub(mn.birth_ms) <= ttl_ms {
            consider_min(mn);
        }
    }
    (best_max, best_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(v: f64) -> Payload {
        Payload { v, ..Default::default() }
    }

    #[test]
    fn clustered_chain_topology() {
        let clusters = vec![vec![10, 11, 12], vec![20, 21, 22]];
        let g = build_comm_graph(&clusters, 100, 800, &[]).unwrap();
        assert_eq!(g.agents(), &[10, 11, 12, 20, 21, 22]);
        assert_eq!(g.edge_count(), 5); // two chains of 2 + one boundary
        let i12 = g.node_index(12).unwrap();
        let i20 = g.node_index(20).unwrap();
        // Boundary link last-of-left to first-of-right, slow.
        assert!(g.neighbors(i12).contains(&(i20, 800)));
        // Intra link fast.
        let i10 = g.node_index(10).unwrap();
        let i11 = g.node_index(11).unwrap();
        assert!(g.neighbors(i10).contains(&(i11, 100)));
        assert_eq!(g.cluster_of(i10), 0);
        assert_eq!(g.cluster_of(i20), 1);
        assert_eq!(g.diameter_hops(), 5);
    }

    #[test]
    fn shared_agent_joins_clusters_without_boundary_link() {
        let clusters = vec![vec![1, 2], vec![2, 3]];
        let g = build_comm_graph(&clusters, 100, 800, &[]).unwrap();
        assert_eq!(g.edge_count(), 2);
        // All links are intra-cluster here.
        for node in 0..g.len() {
            for &(_, d) in g.neighbors(node) {
                assert_eq!(d, 100);
            }
        }
        // Bus 2 keeps its first cluster.
        assert_eq!(g.cluster_of(g.node_index(2).unwrap()), 0);
    }

    #[test]
    fn explicit_links_and_errors() {
        assert_eq!(build_comm_graph(&[], 100, 800, &[]).unwrap_err(), CommsError::Empty);
        let clusters = vec![vec![1, 2], vec![3, 4]];
        let err = build_comm_graph(&clusters, 100, 800, &[(1, 99)]).unwrap_err();
        assert_eq!(err, CommsError::UnknownAgent(99));
        // An extra cross-cluster link takes the slow delay.
        let g = build_comm_graph(&clusters, 100, 800, &[(1, 4)]).unwrap();
        let i1 = g.node_index(1).unwrap();
        let i4 = g.node_index(4).unwrap();
        assert!(g.neighbors(i1).contains(&(i4, 800)));
    }

    #[test]
    fn route_orders_by_time_sender_sequence() {
        let mut q = DelayQueue::new();
        let mk = |from: BusId, deliver: u64, v: f64| Message {
            from,
            to: 0,
            sent_ms: 0,
            deliver_ms: deliver,
            payload: payload(v),
        };
        q.push(mk(5, 800, 1.0));
        q.push(mk(2, 100, 2.0));
        q.push(mk(5, 100, 3.0));
        q.push(mk(2, 100, 4.0));
        assert_eq!(q.pending(), 4);

        let at_50 = q.route(50);
        assert!(at_50.is_empty());
        let at_100 = q.route(100);
        // Time first, then sender bus, then send order within the sender.
        let got: Vec<(BusId, f64)> = at_100.iter().map(|m| (m.from, m.payload.v)).collect();
        assert_eq!(got, vec![(2, 2.0), (2, 4.0), (5, 3.0)]);
        assert_eq!(q.pending(), 1);
        let rest = q.route(10_000);
        assert_eq!(rest[0].payload.v, 1.0);
        assert_eq!(q.sent_total(), 4);
    }

    #[test]
    fn broadcast_stamps_link_delays() {
        let g = build_comm_graph(&[vec![1, 2], vec![3]], 100, 800, &[]).unwrap();
        let mut q = DelayQueue::new();
        let n2 = g.node_index(2).unwrap();
        q.broadcast(&g, n2, payload(0.99), 5_000);
        let msgs = q.route(6_000);
        assert_eq!(msgs.len(), 2);
        let to_1 = msgs.iter().find(|m| m.to == 1).unwrap();
        let to_3 = msgs.iter().find(|m| m.to == 3).unwrap();
        assert_eq!(to_1.deliver_ms, 5_100);
        assert_eq!(to_3.deliver_ms, 5_800);
    }

    #[test]
    fn forgetting_update_matches_hand_arithmetic() {
        // Single node: fresh own reading vs decayed prior estimate.
        let e = step_extrema(&[1.02], &[ExtremaEstimate { v_h: 1.10, v_l: 0.95 }], 0.1);
        assert!((e.v_h - 1.02).abs() < 1e-15, "max(1.02, 0.9*1.10) = 1.02");
        assert!((e.v_l - 0.855).abs() < 1e-15, "min(1.02, 0.9*0.95) = 0.855");
        assert!(e.v_l <= e.v_h);
    }

    #[test]
    fn forgetting_flood_reaches_everyone_within_diameter_rounds() {
        // Path graph of 5 nodes, static voltages, max at one end.
        let volts = [1.05, 1.0, 1.0, 1.0, 1.0];
        let dt = 0.1;
        let mut est: Vec<ExtremaEstimate> =
            volts.iter().map(|&v| ExtremaEstimate { v_h: v, v_l: v }).collect();
        let d = 4;
        for _ in 0..d {
            let prev = est.clone();
            for i in 0..5 {
                let mut fresh = vec![volts[i]];
                let mut prior = vec![prev[i]];
                if i > 0 {
                    fresh.push(volts[i - 1]);
                    prior.push(prev[i - 1]);
                }
                if i < 4 {
                    fresh.push(volts[i + 1]);
                    prior.push(prev[i + 1]);
                }
                est[i] = step_extrema(&fresh, &prior, dt);
            }
        }
        let floor = (1.0f64 - dt).powi(d as i32) * 1.05;
        for (i, e) in est.iter().enumerate() {
            assert!(e.v_h <= 1.05 + 1e-15, "node {i} overshot: {}", e.v_h);
            assert!(e.v_h >= floor - 1e-15, "node {i} below decay floor: {}", e.v_h);
        }
        // The far end witnesses the decay bias that motivates the TTL mode.
        assert!(est[4].v_h < 1.05 - 1e-3);
    }

    #[test]
    fn forgetting_spike_decays_away() {
        // One node briefly reads 1.2, then the field is flat at 1.0.
        let dt = 0.1;
        let mut e = ExtremaEstimate { v_h: 1.2, v_l: 1.0 };
        let bound = ((1.2f64 / 1.0).ln() / dt).ceil() as usize + 1;
        let mut rounds = 0;
        while e.v_h > 1.0 + 1e-12 {
            e = step_extrema(&[1.0], &[e], dt);
            rounds += 1;
            assert!(rounds <= 2 * bound, "spike survived {rounds} rounds");
        }
        assert!((e.v_h - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ttl_records_propagate_exactly_and_expire() {
        let ttl = 8_000;
        // Fresh reading dominates and is stamped now.
        let (mx, mn) = step_extrema_ttl(1_000, ttl, &[1.01], &[]);
        assert_eq!(mx, ExtremaRecord { value: 1.01, birth_ms: 1_000 });
        assert_eq!(mn, ExtremaRecord { value: 1.01, birth_ms: 1_000 });

        // A relayed young record wins over a weaker fresh reading, keeping
        // its birth stamp (no decay anywhere).
        let relayed = ExtremaRecord { value: 1.06, birth_ms: 500 };
        let weak_min = ExtremaRecord { value: 1.06, birth_ms: 500 };
        let (mx, _) = step_extrema_ttl(1_000, ttl, &[1.01], &[(relayed, weak_min)]);
        assert_eq!(mx, relayed);

        // The same record is ignored once it ages past the TTL.
        let (mx, _) = step_extrema_ttl(9_000, ttl, &[1.01], &[(relayed, weak_min)]);
        assert_eq!(mx.value, 1.01);
        assert_eq!(mx.birth_ms, 9_000);

        // Value ties break toward the newer measurement.
        let old = ExtremaRecord { value: 1.03, birth_ms: 100 };
        let new = ExtremaRecord { value: 1.03, birth_ms: 900 };
        let (mx, _) = step_extrema_ttl(1_000, ttl, &[0.99], &[(old, old), (new, new)]);
        assert_eq!(mx.birth_ms, 900);
    }
}
