//! Discrete-event engine primitives: simulated clock, ordered event queue and
//! named random streams.
//!
//! Time is continuous and measured in microseconds. Events with equal
//! timestamps are dispatched in insertion order, so a run is fully determined
//! by its configuration and seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// A point on the simulated clock, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input.
    pub fn from_us(us: f64) -> Self {
        assert!(us.is_finite() && us >= 0.0, "invalid simulated time {us}");
        SimTime(us)
    }

    pub fn as_us(self) -> f64 {
        self.0
    }

    /// Microseconds elapsed since `earlier` (may be negative).
    pub fn since(self, earlier: SimTime) -> f64 {
        self.0 - earlier.0
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;

    fn add(self, delta_us: f64) -> SimTime {
        SimTime::from_us(self.0 + delta_us)
    }
}

impl AddAssign<f64> for SimTime {
    fn add_assign(&mut self, delta_us: f64) {
        *self = *self + delta_us;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule event at {at} before current clock {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
}

struct Entry<E> {
    time: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
        other
            .time
            .0
            .total_cmp(&self.time.0)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Pending events ordered by `(time, insertion sequence)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now: SimTime,
    next_seq: u64,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            dispatched: 0,
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

    /// Number of events popped so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, time: SimTime, event: E) -> Result<(), SimError> {
        if time < self.now {
            return Err(SimError::ScheduleInPast { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, event });
        Ok(())
    }

    /// Schedules `event` after a non-negative delay from the current clock.
    pub fn schedule_in(&mut self, delay_us: f64, event: E) {
        debug_assert!(delay_us >= 0.0);
        let at = self.now + delay_us;
        self.schedule(at, event)
            .expect("non-negative delay cannot land in the past");
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pops the next event and advances the clock to its timestamp.
    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let entry = self.heap.pop()?;
        debug_assert!(entry.time >= self.now, "clock went backwards");
        self.now = entry.time;
        self.dispatched += 1;
        Some((entry.time, entry.event))
    }

    /// Pops the next event only if it is due at or before `end`.
    pub fn pop_until(&mut self, end: SimTime) -> Option<(SimTime, E)> {
        match self.peek_time() {
            Some(t) if t <= end => self.pop(),
            _ => None,
        }
    }

    /// Advances the clock without dispatching anything.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

pub type SimRng = ChaCha8Rng;

/// Role of a random stream. Each role draws from its own ChaCha stream so
/// changing one knob does not perturb the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamId {
    Arrivals = 1,
    Service = 2,
    Sampling = 3,
    Loss = 4,
    Hashing = 5,
    Mix = 6,
    Monitor = 7,
    Clients = 8,
    Counting = 9,
}

/// Deterministic generator for `(seed, role)`.
pub fn rng_stream(seed: u64, id: StreamId) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// SplitMix64 finalizer; stable across platforms and toolchains.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
