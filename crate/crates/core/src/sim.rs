//! Deterministic discrete-event engine.
//!
//! One global queue ordered by `(fire_time, sequence)`. All randomness comes
//! from a single seeded ChaCha8 stream owned by the engine, so a run is a pure
//! function of its seed and inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, Hash};

/// Simulated milliseconds.
pub type SimTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// What the engine needs to know about a payload to trace it.
pub trait Payload {
    fn kind(&self) -> &'static str;
    fn digest(&self) -> Hash;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event at {fire_time} ms is in the past (now {now} ms)")]
    PastEvent { fire_time: SimTime, now: SimTime },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone)]
pub struct SimEvent<M> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub target: NodeId,
    pub payload: M,
}

impl<M> PartialEq for SimEvent<M> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.sequence == other.sequence
    }
}

impl<M> Eq for SimEvent<M> {}

impl<M> PartialOrd for SimEvent<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for SimEvent<M> {
    // Reversed so that BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_time, other.sequence).cmp(&(self.fire_time, self.sequence))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: u64,
    pub jitter_ms: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_ms: 50,
            jitter_ms: 20,
        }
    }
}

impl LatencyModel {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        self.base_ms + if self.jitter_ms == 0 { 0 } else { rng.gen_range(0..=self.jitter_ms) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn now(&self) -> SimTime {
        self.now
    }

    fn advance_to(&mut self, t: SimTime) {
        debug_assert!(t >= self.now);
        self.now = self.now.max(t);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ms: SimTime,
    pub target: NodeId,
    pub kind: String,
    pub payload_digest: Hash,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.time_ms,
            self.target.0,
            self.kind,
            self.payload_digest.to_hex()
        )
    }
}

pub struct Network<M> {
    clock: SimClock,
    next_seq: u64,
    queue: BinaryHeap<SimEvent<M>>,
    node_count: u32,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    trace: Vec<TraceRecord>,
    messages_sent: u64,
}

impl<M: Payload> Network<M> {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Self {
            clock: SimClock::default(),
            next_seq: 0,
            queue: BinaryHeap::new(),
            node_count: 0,
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
            messages_sent: 0,
        }
    }

    pub fn add_node(&mut self) -> NodeId {
        let id = NodeId(self.node_count);
        self.node_count += 1;
        id
    }

    pub fn node_count(&self) -> usize {
        self.node_count as usize
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count).map(NodeId)
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    fn check_node(&self, node: NodeId) -> Result<(), SimError> {
        if node.0 < self.node_count {
            Ok(())
        } else {
            Err(SimError::UnknownNode(node))
        }
    }

    /// Enqueue `payload` for `target` at absolute time `fire_time`.
    /// Returns the tie-break sequence assigned to the event.
    pub fn schedule(&mut self, fire_time: SimTime, target: NodeId, payload: M) -> Result<u64, SimError> {
        if fire_time < self.now() {
            return Err(SimError::PastEvent {
                fire_time,
                now: self.now(),
            });
        }
        self.check_node(target)?;
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.queue.push(SimEvent {
            fire_time,
            sequence,
            target,
            payload,
        });
        Ok(sequence)
    }

    pub fn schedule_after(&mut self, delay: SimTime, target: NodeId, payload: M) -> Result<u64, SimError> {
        self.schedule(self.now() + delay, target, payload)
    }

    /// Deliver `msg` to `to` after one latency draw. Returns the delivery time.
    pub fn unicast(&mut self, from: NodeId, to: NodeId, msg: M) -> Result<SimTime, SimError> {
        self.check_node(from)?;
        self.check_node(to)?;
        let at = self.now() + self.latency.sample(&mut self.rng);
        self.schedule(at, to, msg)?;
        self.messages_sent += 1;
        Ok(at)
    }

    /// Deliver a copy of `msg` to every other node, each with its own latency
    /// draw. Returns the number of deliveries scheduled.
    pub fn broadcast(&mut self, from: NodeId, msg: M) -> Result<usize, SimError>
    where
        M: Clone,
    {
        self.check_node(from)?;
        let targets: Vec<NodeId> = self.nodes().filter(|&n| n != from).collect();
        for &to in &targets {
            self.unicast(from, to, msg.clone())?;
        }
        Ok(targets.len())
    }

    /// Pop the next event if it fires at or before `horizon`, advancing the clock.
    pub fn next_event(&mut self, horizon: SimTime) -> Option<SimEvent<M>> {
        if self.queue.peek()?.fire_time > horizon {
            return None;
        }
        let ev = self.queue.pop()?;
        self.clock.advance_to(ev.fire_time);
        self.trace.push(TraceRecord {
            time_ms: ev.fire_time,
            target: ev.target,
            kind: ev.payload.kind().to_string(),
            payload_digest: ev.payload.digest(),
        });
        Some(ev)
    }

    /// Process every event with `fire_time ≤ t` in order, then set the clock
    /// to `t`. Events the handler schedules inside the horizon are processed
    /// in the same call.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, SimEvent<M>),
    {
        if t < self.now() {
            return 0;
        }
        let mut n = 0;
        while let Some(ev) = self.next_event(t) {
            handler(self, ev);
            n += 1;
        }
        self.clock.advance_to(t);
        n
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn trace_digest(&self) -> Hash {
        digest(self.trace_lines().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::digest;

    #[derive(Debug, Clone, PartialEq)]
    struct Msg(u32);

    impl Payload for Msg {
        fn kind(&self) -> &'static str {
            "msg"
        }
        fn digest(&self) -> Hash {
            digest(&self.0.to_le_bytes())
        }
    }

    fn net(n: usize, latency: LatencyModel) -> Network<Msg> {
        let mut net = Network::new(latency, 42);
        for _ in 0..n {
            net.add_node();
        }
        net
    }

    #[test]
    fn ties_break_fifo() {
        let mut n = net(1, LatencyModel::default());
        n.schedule(100, NodeId(0), Msg(1)).unwrap();
        n.schedule(100, NodeId(0), Msg(2)).unwrap();
        let mut seen = vec![];
        n.run_until(100, |_, ev| seen.push(ev.payload.0));
        assert_eq!(seen, vec![1, 2]);
    }

    #[test]
    fn past_and_unknown_rejected() {
        let mut n = net(1, LatencyModel::default());
        n.run_until(60, |_, _| {});
        assert_eq!(
            n.schedule(50, NodeId(0), Msg(0)),
            Err(SimError::PastEvent { fire_time: 50, now: 60 })
        );
        assert_eq!(n.schedule(70, NodeId(3), Msg(0)), Err(SimError::UnknownNode(NodeId(3))));
        assert_eq!(n.unicast(NodeId(0), NodeId(1), Msg(0)), Err(SimError::UnknownNode(NodeId(1))));
    }

    #[test]
    fn random_events_match_independent_sort() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut n = net(1, LatencyModel::default());
        let mut expected = Vec::new();
        for i in 0..10_000u32 {
            let t = rng.gen_range(0..500u64);
            let seq = n.schedule(t, NodeId(0), Msg(i)).unwrap();
            expected.push((t, seq, i));
        }
        expected.sort();
        let mut got = Vec::new();
        n.run_until(1000, |_, ev| got.push((ev.fire_time, ev.sequence, ev.payload.0)));
        assert_eq!(got, expected);
    }

    #[test]
    fn broadcast_fans_out() {
        let mut n = net(4, LatencyModel { base_ms: 50, jitter_ms: 0 });
        assert_eq!(n.broadcast(NodeId(0), Msg(9)).unwrap(), 3);
        let mut seen = vec![];
        n.run_until(1000, |_, ev| seen.push((ev.fire_time, ev.target)));
        assert_eq!(seen, vec![(50, NodeId(1)), (50, NodeId(2)), (50, NodeId(3))]);
        assert_eq!(n.messages_sent(), 3);
    }

    #[test]
    fn same_seed_same_delivery_times() {
        let run = || {
            let mut n = net(5, LatencyModel::default());
            for i in 0..5 {
                n.broadcast(NodeId(i), Msg(i)).unwrap();
            }
            let mut times = vec![];
            n.run_until(10_000, |_, ev| times.push((ev.fire_time, ev.target)));
            (times, n.trace_digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut n = net(1, LatencyModel::default());
        assert_eq!(n.run_until(500, |_, _| unreachable!()), 0);
        assert_eq!(n.now(), 500);
    }

    #[test]
    fn cascading_events_within_horizon() {
        let mut n = net(2, LatencyModel { base_ms: 10, jitter_ms: 0 });
        n.schedule(0, NodeId(0), Msg(0)).unwrap();
        let processed = n.run_until(100, |net, ev| {
            if ev.payload.0 == 0 {
                net.unicast(NodeId(0), NodeId(1), Msg(1)).unwrap();
            }
        });
        assert_eq!(processed, 2);
        assert_eq!(n.trace().len(), 2);
        assert_eq!(n.trace()[1].time_ms, 10);
    }

    #[test]
    fn causality_and_exactly_once() {
        let mut n = net(3, LatencyModel::default());
        for i in 0..50 {
            n.broadcast(NodeId(i % 3), Msg(i)).unwrap();
        }
        n.schedule(5_000, NodeId(0), Msg(999)).unwrap();
        let mut last = 0;
        let mut count = 0;
        n.run_until(1_000, |_, ev| {
            assert!(ev.fire_time >= last);
            last = ev.fire_time;
            count += 1;
        });
        assert_eq!(count, 100);
        assert_eq!(n.pending(), 1);
    }

    #[test]
    fn trace_line_format() {
        let mut n = net(1, LatencyModel::default());
        n.schedule(5, NodeId(0), Msg(1)).unwrap();
        n.run_until(5, |_, _| {});
        let line = n.trace_lines();
        assert_eq!(line, format!("5,0,msg,{}\n", digest(&1u32.to_le_bytes()).to_hex()));
    }
}
