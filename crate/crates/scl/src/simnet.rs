//! Deterministic discrete-event simulation of the multicast network.
//!
//! The network under test is a tree of links, each with independent loss
//! probability and a delay range. A multicast floods outward from the
//! sender: every link crossing draws its own loss and delay, and losing a
//! link silences the entire subtree behind it — exactly the correlated
//! loss pattern a forwarding tree produces. There is no unicast at this
//! layer; anything point-to-point is an addressed payload inside a
//! multicast, as on the real wire.
//!
//! Everything is driven by one event heap ordered by virtual time (in
//! microseconds) with a monotone sequence number as tie-breaker, and all
//! randomness comes from one seeded stream drawn in heap order — the same
//! seed replays the same run, byte for byte. With `reorder` off every
//! link uses its minimum delay, so per-path FIFO holds; with it on,
//! delays are drawn uniformly and messages can overtake each other.
//!
//! Nodes are state machines implementing [`SimNode`]: they react to
//! delivered messages, timers, and injected client operations, and from
//! inside a callback they may multicast and arm timers through [`Ctx`].
//! A run that exceeds the configured event budget stops and reports a
//! suspected livelock instead of spinning forever.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Index of a node in the simulation (not a protocol identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIdx(pub usize);

/// Loss and delay characteristics of one link.
#[derive(Debug, Clone, Copy)]
pub struct LinkCfg {
    /// Probability a crossing of this link drops the message.
    pub loss: f64,
    pub delay_min_us: u64,
    pub delay_max_us: u64,
}

impl Default for LinkCfg {
    fn default() -> Self {
        LinkCfg {
            loss: 0.0,
            delay_min_us: 500,
            delay_max_us: 1_500,
        }
    }
}

#[derive(Debug, Clone)]
struct Edge {
    a: usize,
    b: usize,
    cfg: LinkCfg,
}

/// A tree of nodes and links. Multicast assumes tree-shaped forwarding,
/// so construction rejects cycles and disconnected graphs.
#[derive(Debug, Clone)]
pub struct Topology {
    node_count: usize,
    edges: Vec<Edge>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("edge endpoint {0} out of range")]
    BadEndpoint(usize),
    #[error("loss probability {0} outside [0, 1]")]
    BadLoss(f64),
    #[error("delay range inverted (min > max)")]
    BadDelay,
    #[error("links form a cycle")]
    Cycle,
    #[error("node {0} is unreachable")]
    Disconnected(usize),
}

impl Topology {
    pub fn new(node_count: usize) -> Topology {
        Topology {
            node_count,
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn add_link(&mut self, a: NodeIdx, b: NodeIdx, cfg: LinkCfg) -> Result<(), TopologyError> {
        if a.0 >= self.node_count {
            return Err(TopologyError::BadEndpoint(a.0));
        }
        if b.0 >= self.node_count {
            return Err(TopologyError::BadEndpoint(b.0));
        }
        if !(0.0..=1.0).contains(&cfg.loss) {
            return Err(TopologyError::BadLoss(cfg.loss));
        }
        if cfg.delay_min_us > cfg.delay_max_us {
            return Err(TopologyError::BadDelay);
        }
        self.edges.push(Edge { a: a.0, b: b.0, cfg });
        Ok(())
    }

    /// All nodes attached directly to node 0.
    pub fn star(node_count: usize, cfg: LinkCfg) -> Topology {
        let mut t = Topology::new(node_count);
        for i in 1..node_count {
            t.add_link(NodeIdx(0), NodeIdx(i), cfg).unwrap();
        }
        t
    }

    /// Nodes in a line: 0 — 1 — 2 — …
    pub fn chain(node_count: usize, cfg: LinkCfg) -> Topology {
        let mut t = Topology::new(node_count);
        for i in 1..node_count {
            t.add_link(NodeIdx(i - 1), NodeIdx(i), cfg).unwrap();
        }
        t
    }

    fn validate(&self) -> Result<Vec<Vec<(usize, LinkCfg)>>, TopologyError> {
        if self.edges.len() + 1 != self.node_count && self.node_count > 0 {
            // A tree on n nodes has exactly n-1 edges; more means a cycle,
            // fewer means a disconnect. Pin down which for the error.
            if self.edges.len() + 1 > self.node_count {
                return Err(TopologyError::Cycle);
            }
        }
        let mut adj: Vec<Vec<(usize, LinkCfg)>> = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            adj[e.a].push((e.b, e.cfg));
            adj[e.b].push((e.a, e.cfg));
        }
        for nbrs in &mut adj {
            nbrs.sort_by_key(|&(n, _)| n);
        }
        // Reachability walk from node 0 detects both disconnects and cycles.
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0usize];
        if self.node_count > 0 {
            seen[0] = true;
        }
        let mut visits = 0usize;
        while let Some(u) = stack.pop() {
            visits += 1;
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(lonely) = seen.iter().position(|s| !s) {
            return Err(TopologyError::Disconnected(lonely));
        }
        if visits < self.node_count || self.edges.len() + 1 != self.node_count.max(1) {
            return Err(TopologyError::Cycle);
        }
        Ok(adj)
    }
}

/// Global simulation knobs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    /// Draw per-link delays uniformly from the configured range; when off,
    /// every crossing takes the minimum delay and FIFO order holds.
    pub reorder: bool,
    /// Stop and flag a livelock after this many processed events.
    pub event_cap: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            reorder: true,
            event_cap: 100_000_000,
        }
    }
}

/// Effects a node can cause from inside a callback. They are applied by
/// the simulator after the callback returns.
pub struct Ctx<'a> {
    /// Current virtual time in microseconds.
    pub now_us: u64,
    /// The node being called.
    pub node: NodeIdx,
    rng: &'a mut ChaCha20Rng,
    actions: Vec<Action>,
}

enum Action {
    Multicast(Vec<u8>),
    Timer { delay_us: u64, token: u64 },
}

impl Ctx<'_> {
    /// Queues a multicast of `msg` from this node.
    pub fn multicast(&mut self, msg: Vec<u8>) {
        self.actions.push(Action::Multicast(msg));
    }

    /// Arms a timer that fires `delay_us` from now with `token`.
    pub fn set_timer(&mut self, delay_us: u64, token: u64) {
        self.actions.push(Action::Timer { delay_us, token });
    }

    /// Deterministic per-run randomness for node-level decisions.
    pub fn rng(&mut self) -> &mut impl RngCore {
        self.rng
    }
}

/// A protocol state machine living on one simulated node.
pub trait SimNode {
    /// A multicast originated elsewhere reached this node.
    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &[u8]);
    /// A timer this node armed (or the harness scheduled) fired.
    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64);
    /// The harness injected a client operation at this node.
    fn on_client(&mut self, ctx: &mut Ctx<'_>, op: &[u8]);
}

enum EventKind {
    Deliver(Arc<Vec<u8>>),
    Timer(u64),
    Client(Vec<u8>),
}

struct Event {
    time_us: u64,
    seq: u64,
    node: usize,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (u64, u64) {
        (self.time_us, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub events: u64,
    pub multicasts: u64,
    pub deliveries: u64,
    /// Link crossings that dropped the message (pruning whole subtrees).
    pub link_drops: u64,
    pub timers_fired: u64,
    pub client_ops: u64,
}

/// Result of driving the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimReport {
    pub stats: SimStats,
    pub end_time_us: u64,
    /// The event budget ran out before the heap drained.
    pub livelock_detected: bool,
}

pub struct Sim<N: SimNode> {
    nodes: Vec<N>,
    adj: Vec<Vec<(usize, LinkCfg)>>,
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now_us: u64,
    rng: ChaCha20Rng,
    config: SimConfig,
    stats: SimStats,
}

impl<N: SimNode> Sim<N> {
    /// Builds a simulator over `topology` with one state machine per node.
    pub fn new(topology: &Topology, config: SimConfig, nodes: Vec<N>) -> Result<Sim<N>, TopologyError> {
        assert_eq!(
            nodes.len(),
            topology.node_count(),
            "one state machine per topology node"
        );
        let adj = topology.validate()?;
        Ok(Sim {
            nodes,
            adj,
            heap: BinaryHeap::new(),
            next_seq: 0,
            now_us: 0,
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            config,
            stats: SimStats::default(),
        })
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn node(&self, idx: NodeIdx) -> &N {
        &self.nodes[idx.0]
    }

    pub fn node_mut(&mut self, idx: NodeIdx) -> &mut N {
        &mut self.nodes[idx.0]
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    fn push_event(&mut self, time_us: u64, node: usize, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event {
            time_us,
            seq,
            node,
            kind,
        }));
    }

    /// Schedules a timer externally (e.g. a boot tick at time zero).
    pub fn schedule_timer(&mut self, time_us: u64, node: NodeIdx, token: u64) {
        self.push_event(time_us, node.0, EventKind::Timer(token));
    }

    /// Schedules a client operation for delivery to `node`.
    pub fn schedule_client(&mut self, time_us: u64, node: NodeIdx, op: Vec<u8>) {
        self.push_event(time_us, node.0, EventKind::Client(op));
    }

    /// Floods a message through the tree away from `from`, drawing loss
    /// and delay per link in deterministic (node-index) order.
    fn flood(&mut self, from: usize, sent_at: u64, msg: Arc<Vec<u8>>) {
        self.stats.multicasts += 1;
        let n = self.adj.len();
        let mut visited = vec![false; n];
        visited[from] = true;
        // (node, arrival time) frontier; BFS over the unique tree paths.
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back((from, sent_at));
        while let Some((u, at)) = frontier.pop_front() {
            // Clone of neighbor list keeps the borrow checker out of the
            // rng draws below; lists are tiny.
            let nbrs = self.adj[u].clone();
            for (v, cfg) in nbrs {
                if visited[v] {
                    continue;
                }
                visited[v] = true;
                if cfg.loss > 0.0 && self.rng.gen::<f64>() < cfg.loss {
                    self.stats.link_drops += 1;
                    continue; // subtree behind this link never sees it
                }
                let delay = if self.config.reorder && cfg.delay_max_us > cfg.delay_min_us {
                    self.rng.gen_range(cfg.delay_min_us..=cfg.delay_max_us)
                } else {
                    cfg.delay_min_us
                };
                let arrival = at + delay;
                self.push_event(arrival, v, EventKind::Deliver(Arc::clone(&msg)));
                frontier.push_back((v, arrival));
            }
        }
    }

    fn dispatch(&mut self, event: Event) {
        self.now_us = event.time_us;
        let mut ctx = Ctx {
            now_us: event.time_us,
            node: NodeIdx(event.node),
            rng: &mut self.rng,
            actions: Vec::new(),
        };
        let node = &mut self.nodes[event.node];
        match event.kind {
            EventKind::Deliver(msg) => {
                self.stats.deliveries += 1;
                node.on_message(&mut ctx, &msg);
            }
            EventKind::Timer(token) => {
                self.stats.timers_fired += 1;
                node.on_timer(&mut ctx, token);
            }
            EventKind::Client(op) => {
                self.stats.client_ops += 1;
                node.on_client(&mut ctx, &op);
            }
        }
        let actions = ctx.actions;
        for action in actions {
            match action {
                Action::Multicast(msg) => {
                    self.flood(event.node, self.now_us, Arc::new(msg));
                }
                Action::Timer { delay_us, token } => {
                    self.push_event(self.now_us + delay_us, event.node, EventKind::Timer(token));
                }
            }
        }
    }

    /// Runs until the heap drains or the event budget is exhausted.
    pub fn run(&mut self) -> SimReport {
        self.run_until(u64::MAX)
    }

    /// Processes every event with time ≤ `until_us` (subject to the event
    /// budget), then advances the clock to `until_us` if it lies ahead.
    pub fn run_until(&mut self, until_us: u64) -> SimReport {
        let mut livelock = false;
        loop {
            let ready = self
                .heap
                .peek()
                .is_some_and(|Reverse(e)| e.time_us <= until_us);
            if !ready {
                break;
            }
            if self.stats.events >= self.config.event_cap {
                livelock = true;
                break;
            }
            let Reverse(ev) = self.heap.pop().unwrap();
            self.stats.events += 1;
            self.dispatch(ev);
        }
        if until_us != u64::MAX && self.now_us < until_us && !livelock {
            self.now_us = until_us;
        }
        SimReport {
            stats: self.stats,
            end_time_us: self.now_us,
            livelock_detected: livelock,
        }
    }
}
