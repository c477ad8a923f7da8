//! Discrete-event kernel and named random streams.
//!
//! Events are ordered by `(time, sequence)`; the sequence is the insertion
//! counter, so equal-time events dispatch in the order they were scheduled.
//! Every stochastic subsystem draws from its own [`RngStream`], keyed by the
//! master seed and a string label.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream labels used across the crate.
pub mod streams {
    pub const SHADOWING: &str = "shadowing";
    pub const FADING: &str = "fading";
    pub const TRAFFIC: &str = "traffic";
    pub const EXPLORATION: &str = "exploration";
    pub const MEASUREMENT: &str = "measurement";
    pub const BAGGING: &str = "bagging";
    pub const QUERIES: &str = "queries";
    pub const MODE_JITTER: &str = "mode-jitter";
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub time: f64,
    pub sequence: u64,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // Reversed so the max-heap pops the earliest (time, sequence).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.sequence.cmp(&self.0.sequence))
    }
}

/// Record of one dispatched event, used for replay comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchRecord {
    pub time: f64,
    pub sequence: u64,
}

pub struct Kernel<P> {
    clock: f64,
    next_sequence: u64,
    queue: BinaryHeap<Queued<P>>,
    cancelled: HashSet<u64>,
    log: Vec<DispatchRecord>,
}

impl<P> Default for Kernel<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Kernel<P> {
    pub fn new() -> Self {
        Kernel {
            clock: 0.0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            log: Vec::new(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, time: f64, payload: P) -> Result<EventHandle> {
        if !(time >= self.clock) {
            return Err(Error::CausalityViolation {
                event_time: time,
                clock: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Queued(Event {
            time,
            sequence,
            payload,
        }));
        Ok(EventHandle(sequence))
    }

    /// Returns false if the event already dispatched or was cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let live = self.queue.iter().any(|q| q.0.sequence == handle.0);
        live && self.cancelled.insert(handle.0)
    }

    /// Dispatches every event with `time <= t_end`, including events the
    /// handler schedules inside the horizon, then advances the clock to `t_end`.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> Result<usize>
    where
        F: FnMut(&mut Kernel<P>, Event<P>),
    {
        if t_end < self.clock {
            return Err(Error::TimeReversal {
                t_end,
                clock: self.clock,
            });
        }
        let mut dispatched = 0;
        while let Some(top) = self.queue.peek() {
            if top.0.time > t_end {
                break;
            }
            let Queued(event) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&event.sequence) {
                continue;
            }
            self.clock = event.time;
            self.log.push(DispatchRecord {
                time: event.time,
                sequence: event.sequence,
            });
            dispatched += 1;
            handler(self, event);
        }
        self.clock = t_end;
        Ok(dispatched)
    }

    pub fn dispatch_log(&self) -> &[DispatchRecord] {
        &self.log
    }

    /// Byte form of the dispatch log; equal for equal replays.
    pub fn serialized_log(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.log.len() * 16);
        for rec in &self.log {
            out.extend_from_slice(&rec.time.to_le_bytes());
            out.extend_from_slice(&rec.sequence.to_le_bytes());
        }
        out
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha8 stream keyed by `(master_seed, stream_id)`. The stream id
/// selects the ChaCha stream number, so labels never share keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(fnv1a64(stream_id.as_bytes()));
        RngStream {
            master_seed,
            stream_id: stream_id.to_string(),
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// A child stream, e.g. one per device.
    pub fn substream(&self, label: &str) -> RngStream {
        RngStream::new(self.master_seed, &format!("{}/{}", self.stream_id, label))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(&mut self.rng)
    }

    /// Random-access draw: a standard normal that depends only on `(key, index)`
    /// and the stream identity, not on how many draws came before.
    pub fn keyed_normal(&self, key: u64, index: u64) -> f64 {
        let (u1, u2) = self.keyed_uniform_pair(key, index);
        // Box-Muller on (0,1] x [0,1).
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    pub fn keyed_uniform_pair(&self, key: u64, index: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(fnv1a64(self.stream_id.as_bytes()) ^ key.rotate_left(17));
        rng.set_word_pos(u128::from(index) * 4);
        let a = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let b = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (a, b)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

pub fn rng_stream(master_seed: u64, stream_id: &str) -> RngStream {
    RngStream::new(master_seed, stream_id)
}

pub(crate) fn hash_label(label: &str) -> u64 {
    fnv1a64(label.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_event_dispatches() {
        let mut k = Kernel::new();
        k.schedule(0.0, ()).unwrap();
        assert_eq!(k.run_until(0.0, |_, _| {}).unwrap(), 1);
    }

    #[test]
    fn equal_times_dispatch_in_insertion_order() {
        let mut k = Kernel::new();
        k.schedule(1.0, "a").unwrap();
        k.schedule(1.0, "b").unwrap();
        k.schedule(0.5, "c").unwrap();
        let mut seen = Vec::new();
        k.run_until(2.0, |_, e| seen.push(e.payload)).unwrap();
        assert_eq!(seen, vec!["c", "a", "b"]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut k: Kernel<()> = Kernel::new();
        k.run_until(5.0, |_, _| {}).unwrap();
        let err = k.schedule(4.0, ()).unwrap_err();
        assert!(matches!(err, Error::CausalityViolation { .. }));
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut k: Kernel<()> = Kernel::new();
        assert_eq!(k.run_until(10.0, |_, _| {}).unwrap(), 0);
        assert_eq!(k.clock(), 10.0);
    }

    #[test]
    fn run_until_is_inclusive_of_horizon() {
        let mut k = Kernel::new();
        for t in [1.0, 2.0, 3.0] {
            k.schedule(t, ()).unwrap();
        }
        assert_eq!(k.run_until(2.0, |_, _| {}).unwrap(), 2);
        assert_eq!(k.pending(), 1);
    }

    #[test]
    fn handler_follow_ups_dispatch_within_horizon() {
        let mut k = Kernel::new();
        k.schedule(0.0, 0u32).unwrap();
        let n = k
            .run_until(1.0, |k, e| {
                if e.payload < 3 {
                    k.schedule(e.time + 0.25, e.payload + 1).unwrap();
                }
            })
            .unwrap();
        assert_eq!(n, 4);
    }

    #[test]
    fn cancelled_events_never_dispatch() {
        let mut k = Kernel::new();
        let h = k.schedule(1.0, "x").unwrap();
        k.schedule(1.0, "y").unwrap();
        assert!(k.cancel(h));
        assert!(!k.cancel(h));
        let mut seen = Vec::new();
        k.run_until(2.0, |_, e| seen.push(e.payload)).unwrap();
        assert_eq!(seen, vec!["y"]);
    }

    #[test]
    fn replay_log_is_byte_equal() {
        let build = || {
            let mut k = Kernel::new();
            let mut rng = rng_stream(9, "traffic");
            for _ in 0..50 {
                k.schedule(rng.uniform() * 10.0, ()).unwrap();
            }
            k.run_until(10.0, |_, _| {}).unwrap();
            k.serialized_log()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = rng_stream(42, "radio");
        let mut b = rng_stream(42, "radio");
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_labels_differ() {
        let mut a = rng_stream(42, "radio");
        let mut b = rng_stream(42, "traffic");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_mean_converges() {
        let mut s = rng_stream(7, "lln");
        let n = 100_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn keyed_draws_are_random_access() {
        let s = rng_stream(3, "traffic");
        let a = s.keyed_normal(11, 5);
        let _ = s.keyed_normal(11, 4);
        assert_eq!(a, s.keyed_normal(11, 5));
        assert_ne!(a, s.keyed_normal(12, 5));
    }
}
