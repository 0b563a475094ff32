// SPDX-License-Identifier: Apache-2.0

//! Event queue and the message delivery model.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::crypto::SeededStream;
use crate::scenario::NetworkSection;

/// Index of a node in the simulation.
pub type NodeId = usize;

/// Totally ordered by (time, sequence number assigned at scheduling).
#[derive(Debug)]
pub struct Scheduler<E> {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, (NodeId, E)>,
    seq: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), events: HashMap::new(), seq: 0 }
    }
}

impl<E> Scheduler<E> {
    pub fn push(&mut self, at: u64, node: NodeId, ev: E) {
        self.seq += 1;
        self.events.insert(self.seq, (node, ev));
        self.heap.push(Reverse((at, self.seq)));
    }

    pub fn pop(&mut self) -> Option<(u64, NodeId, E)> {
        let Reverse((t, seq)) = self.heap.pop()?;
        let (node, ev) = self.events.remove(&seq).expect("scheduled event");
        Some((t, node, ev))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _))| *t)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Delivery delays and losses. All draws come from one seeded stream, in
/// send order.
#[derive(Debug, Clone)]
pub struct NetModel {
    pub delta_t: u64,
    pub gst: u64,
    pub drop: f64,
    pub pre_gst_delay_factor: u64,
    /// Per partition: (start, end, side of every node).
    partitions: Vec<(u64, u64, Vec<usize>)>,
    stream: SeededStream,
}

impl NetModel {
    pub fn new(cfg: &NetworkSection, names: &[String], stream: SeededStream) -> Self {
        let partitions = cfg
            .partitions
            .iter()
            .map(|p| {
                let side = names
                    .iter()
                    .map(|n| p.groups.iter().position(|g| g.contains(n)).unwrap_or(p.groups.len()))
                    .collect();
                (p.start, p.end, side)
            })
            .collect();
        Self {
            delta_t: cfg.delta_t,
            gst: cfg.gst,
            drop: cfg.drop,
            pre_gst_delay_factor: cfg.pre_gst_delay_factor,
            partitions,
            stream,
        }
    }

    pub fn partitioned(&self, from: NodeId, to: NodeId, now: u64) -> bool {
        self.partitions.iter().any(|(s, e, side)| *s <= now && now < *e && side[from] != side[to])
    }

    /// Delay of a message sent at `now`, or `None` if it is lost.
    pub fn delay(&mut self, from: NodeId, to: NodeId, now: u64) -> Option<u64> {
        if from == to {
            return Some(0);
        }
        if self.partitioned(from, to, now) {
            return None;
        }
        if now >= self.gst {
            return Some(1 + self.stream.next_below(self.delta_t));
        }
        if self.drop > 0.0 && self.stream.next_unit() < self.drop {
            return None;
        }
        Some(1 + self.stream.next_below(self.delta_t * self.pre_gst_delay_factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_seed, SeededStream};
    use crate::scenario::Partition;

    fn model(gst: u64, drop: f64, partitions: Vec<Partition>) -> NetModel {
        let cfg = NetworkSection { gst, drop, partitions, ..NetworkSection::default() };
        let names: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        NetModel::new(&cfg, &names, SeededStream::new(derive_seed(&["net"], b"test").unwrap()))
    }

    #[test]
    fn post_gst_broadcast_arrives_within_delta() {
        let mut m = model(0, 0.9, vec![]);
        for _ in 0..1000 {
            let d: Vec<u64> = (1..10).map(|to| m.delay(0, to, 50).unwrap()).collect();
            assert!(d.iter().all(|x| (1..=100).contains(x)));
        }
    }

    #[test]
    fn full_loss_before_gst() {
        let mut m = model(1000, 1.0, vec![]);
        assert!((0..500).all(|i| m.delay(0, 1 + i % 9, i as u64).is_none()));
        assert!(m.delay(0, 1, 1000).is_some());
    }

    #[test]
    fn pre_gst_loss_rate() {
        let mut m = model(u64::MAX, 0.3, vec![]);
        let n = 10_000;
        let lost = (0..n).filter(|_| m.delay(0, 1, 0).is_none()).count() as f64;
        let sigma = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((lost - 0.3 * n as f64).abs() <= 3.0 * sigma, "lost {lost}");
    }

    #[test]
    fn partition_blocks_cross_traffic_only() {
        let p = Partition { start: 10, end: 20, groups: vec![vec!["n0".into(), "n1".into()]] };
        let mut m = model(0, 0.0, vec![p]);
        assert!(m.delay(0, 1, 15).is_some());
        assert!(m.delay(0, 2, 15).is_none());
        assert!(m.delay(2, 3, 15).is_some());
        assert!(m.delay(0, 2, 20).is_some());
    }

    #[test]
    fn same_tick_events_pop_in_schedule_order() {
        let mut s = Scheduler::default();
        s.push(5, 0, "b");
        s.push(3, 0, "a");
        s.push(5, 1, "c");
        let order: Vec<&str> = std::iter::from_fn(|| s.pop().map(|(_, _, e)| e)).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }
}
