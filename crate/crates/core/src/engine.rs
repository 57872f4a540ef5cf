//! Discrete-event core: simulated clock, deterministic event queue, the
//! per-direction link model with Bernoulli loss, and the analytic early-ACK
//! predicate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulated time in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
}

struct Scheduled<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Events fire in `(time, insertion sequence)` order.
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Scheduled<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<(), EngineError> {
        if at < self.now {
            return Err(EngineError::InPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { at, seq, event });
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: SimTime, event: E) {
        let at = self.now + delay;
        // Cannot be in the past.
        let _ = self.schedule(at, event);
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let next = self.heap.pop()?;
        self.now = next.at;
        Some((next.at, next.event))
    }

    /// Drains the queue through `handler`, which may schedule further events.
    /// Returns the final clock.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> SimTime
    where
        F: FnMut(&mut EventQueue<E>, SimTime, E),
    {
        while let Some((at, event)) = self.pop() {
            handler(self, at, event);
        }
        self.now
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for a named sub-stream of the global seed.
pub fn derive_seed(global: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(global), |acc, p| mix64(acc ^ mix64(*p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// From the link's A endpoint to its B endpoint.
    AtoB,
    BtoA,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::AtoB => 0,
            Direction::BtoA => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelCounters {
    pub offered_frames: u64,
    pub delivered_frames: u64,
    pub dropped_frames: u64,
    pub delivered_bytes: u64,
    pub dropped_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Arrives(SimTime),
    Dropped,
}

/// One direction of a full-duplex link: a FIFO serializer followed by a
/// propagation delay, with an independent loss stream.
#[derive(Debug, Clone)]
pub struct LinkChannel {
    bandwidth: u64,
    delay: SimTime,
    loss: f64,
    busy_until: SimTime,
    rng: ChaCha8Rng,
    counters: ChannelCounters,
}

impl LinkChannel {
    /// `bandwidth` is in bytes per second.
    pub fn new(bandwidth: u64, delay: SimTime, loss: f64, seed: u64) -> Self {
        assert!(bandwidth > 0, "link bandwidth must be positive");
        LinkChannel {
            bandwidth,
            delay,
            loss: loss.clamp(0.0, 1.0),
            busy_until: SimTime::ZERO,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: ChannelCounters::default(),
        }
    }

    pub fn serialization(&self, bytes: usize) -> SimTime {
        let ns = (bytes as u128 * 1_000_000_000).div_ceil(self.bandwidth as u128);
        SimTime(ns as u64)
    }

    pub fn counters(&self) -> ChannelCounters {
        self.counters
    }

    pub fn set_loss(&mut self, loss: f64) {
        self.loss = loss.clamp(0.0, 1.0);
    }

    /// Offers a frame of `bytes` to the channel at `now`. Drops still occupy
    /// the serializer. `force_drop` injects a deterministic loss.
    pub fn transmit(&mut self, now: SimTime, bytes: usize, force_drop: bool) -> Transmission {
        assert!(bytes > 0, "frames must be non-empty");
        let start = now.max(self.busy_until);
        let done = start + self.serialization(bytes);
        self.busy_until = done;
        self.counters.offered_frames += 1;
        // Always draw so the stream position depends only on offered frames.
        let draw: f64 = self.rng.gen();
        if force_drop || draw < self.loss {
            self.counters.dropped_frames += 1;
            self.counters.dropped_bytes += bytes as u64;
            Transmission::Dropped
        } else {
            self.counters.delivered_frames += 1;
            self.counters.delivered_bytes += bytes as u64;
            Transmission::Arrives(done + self.delay)
        }
    }
}

/// Terms of the early-ACK predicate for one hop `D_{j-1} -> D_j`. All values
/// are durations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyAckTiming {
    /// Client to `D_{j-1}` one-way travel.
    pub client_to_prev: SimTime,
    /// `D_{j-1}`'s delay between receiving a segment and virtually
    /// transmitting it (includes assembling the application packet).
    pub prev_vtx_delay: SimTime,
    /// Client to `D_j` one-way travel.
    pub client_to_next: SimTime,
    /// `D_j`'s delay between receiving a segment and emitting its ACK.
    pub next_ack_delay: SimTime,
    /// `D_j` to `D_{j-1}` one-way travel.
    pub next_to_prev: SimTime,
}

impl EarlyAckTiming {
    pub fn virtual_tx_time(&self) -> SimTime {
        self.client_to_prev + self.prev_vtx_delay
    }

    pub fn ack_time(&self) -> SimTime {
        self.client_to_next + self.next_ack_delay + self.next_to_prev
    }

    /// Signed margin `T_vtx - T_ack` in nanoseconds.
    pub fn margin_ns(&self) -> i128 {
        self.virtual_tx_time().0 as i128 - self.ack_time().0 as i128
    }
}

/// True when an ACK from `D_j` is predicted to reach `D_{j-1}` before the
/// matching virtual transmission.
pub fn check_early_ack_condition(timing: &EarlyAckTiming) -> bool {
    timing.virtual_tx_time() > timing.ack_time()
}
