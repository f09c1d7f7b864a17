//! Timestamps and the ordering predicates built on them.
//!
//! Every renamed micro-op receives a [`Timestamp`] drawn from a sliding
//! window of `2N` values, where `N` is the reorder-buffer capacity. At most
//! `N` timestamps are live at once, so the windowed distance between any two
//! live values is at most `N` and comparison stays unambiguous.
//!
//! A shadow counter that never wraps is carried alongside the windowed value.
//! It is only consulted when a window is built with [`TimestampWindow::unbounded`]
//! and, in debug builds, to assert that windowed and unbounded comparison agree.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Windowed speculative-program-order tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    value: u32,
    shadow: u64,
}

impl Timestamp {
    /// Builds a timestamp from its windowed value and its unbounded shadow.
    pub fn new(value: u32, shadow: u64) -> Self {
        Self { value, shadow }
    }

    /// Windowed value in `[0, 2N)`.
    pub fn value(self) -> u32 {
        self.value
    }

    /// Unbounded allocation counter that produced this timestamp.
    pub fn shadow(self) -> u64 {
        self.shadow
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ts{}", self.value)
    }
}

/// Comparison context: the window size and whether to compare shadows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimestampWindow {
    half: u32,
    unbounded: bool,
}

impl TimestampWindow {
    /// Window for a reorder buffer of `rob_capacity` entries (size `2N`).
    pub fn for_capacity(rob_capacity: u32) -> Self {
        assert!(rob_capacity > 0, "timestamp window needs a nonzero capacity");
        Self { half: rob_capacity, unbounded: false }
    }

    /// Same window, but comparisons use the never-wrapping shadow counter.
    pub fn unbounded(self) -> Self {
        Self { unbounded: true, ..self }
    }

    pub fn is_unbounded(self) -> bool {
        self.unbounded
    }

    /// Maximum number of simultaneously live timestamps (`N`).
    pub fn capacity(self) -> u32 {
        self.half
    }

    /// Number of distinct windowed values (`2N`).
    pub fn size(self) -> u32 {
        self.half * 2
    }

    /// True iff `a` was allocated no later than `b`.
    ///
    /// Windowed rule: `(b - a) mod 2N <= N`. Equality counts as "not after".
    pub fn not_after(self, a: Timestamp, b: Timestamp) -> bool {
        let windowed = self.windowed_not_after(a.value, b.value);
        debug_assert!(
            a.shadow.abs_diff(b.shadow) >= u64::from(self.half) || windowed == (a.shadow <= b.shadow),
            "windowed comparison disagrees with unbounded order for {a:?}/{} vs {b:?}/{}",
            a.shadow,
            b.shadow
        );
        if self.unbounded {
            a.shadow <= b.shadow
        } else {
            windowed
        }
    }

    /// Strict form of [`not_after`](Self::not_after).
    pub fn before(self, a: Timestamp, b: Timestamp) -> bool {
        a != b && self.not_after(a, b)
    }

    /// Windowed comparison on raw values, exposed for the allocator tests.
    pub fn windowed_not_after(self, a: u32, b: u32) -> bool {
        let size = self.size();
        debug_assert!(a < size && b < size);
        (b + size - a) % size <= self.half
    }

    /// Orders two live timestamps; older first.
    pub fn cmp(self, a: Timestamp, b: Timestamp) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        if a == b {
            Ordering::Equal
        } else if self.not_after(a, b) {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrderError {
    #[error("timestamp window overflow: {live} timestamps already live (capacity {capacity})")]
    WindowOverflow { live: u32, capacity: u32 },
    #[error("no recorded fate for instruction {0}")]
    UnknownFate(u64),
}

/// In-order timestamp allocator with wrap-around at `2N`.
#[derive(Clone, Debug)]
pub struct TimestampAllocator {
    window: TimestampWindow,
    next: u32,
    next_shadow: u64,
    live: u32,
}

impl TimestampAllocator {
    pub fn new(window: TimestampWindow) -> Self {
        Self { window, next: 0, next_shadow: 0, live: 0 }
    }

    /// Starts allocation at an arbitrary windowed value.
    pub fn starting_at(window: TimestampWindow, next: u32) -> Self {
        assert!(next < window.size());
        Self { window, next, next_shadow: 0, live: 0 }
    }

    pub fn window(&self) -> TimestampWindow {
        self.window
    }

    pub fn live(&self) -> u32 {
        self.live
    }

    /// Value the next allocation will return.
    pub fn peek(&self) -> u32 {
        self.next
    }

    /// Timestamp the next allocation will return, without allocating it.
    pub fn peek_timestamp(&self) -> Timestamp {
        Timestamp::new(self.next, self.next_shadow)
    }

    pub fn allocate(&mut self) -> Result<Timestamp, OrderError> {
        if self.live >= self.window.capacity() {
            return Err(OrderError::WindowOverflow { live: self.live, capacity: self.window.capacity() });
        }
        let ts = Timestamp::new(self.next, self.next_shadow);
        self.next = (self.next + 1) % self.window.size();
        self.next_shadow += 1;
        self.live += 1;
        Ok(ts)
    }

    /// The oldest live timestamp retired (committed).
    pub fn release_oldest(&mut self) {
        assert!(self.live > 0, "release with no live timestamps");
        self.live -= 1;
    }

    /// Discards every live timestamp after `keep`; the next allocation
    /// returns the successor of `keep`.
    pub fn rewind_after(&mut self, keep: Timestamp, discarded: u32) {
        assert!(discarded <= self.live);
        self.live -= discarded;
        self.next = (keep.value + 1) % self.window.size();
        self.next_shadow = keep.shadow + 1;
    }

    /// Discards every live timestamp (used when the youngest survivor has
    /// already retired, e.g. a squash at the ROB head).
    pub fn rewind_to(&mut self, next: Timestamp, discarded: u32) {
        assert!(discarded <= self.live);
        self.live -= discarded;
        self.next = next.value;
        self.next_shadow = next.shadow;
    }
}

/// Anything that carries a timestamp and a commit flag.
pub trait Ordered {
    fn timestamp(&self) -> Timestamp;
    fn is_committed(&self) -> bool;
}

/// `x` may influence the timing of `y`: `x` has committed, or `x` precedes
/// or equals `y` in speculative program order.
pub fn temporally_succeeds<X: Ordered + ?Sized, Y: Ordered + ?Sized>(window: TimestampWindow, x: &X, y: &Y) -> bool {
    x.is_committed() || window.not_after(x.timestamp(), y.timestamp())
}

/// Final per-instruction verdict, recorded after a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fate {
    Committed,
    Squashed,
}

/// `commit(y) -> commit(x)` under the recorded fates.
pub fn strictly_observes(x: u64, y: u64, fates: &HashMap<u64, Fate>) -> Result<bool, OrderError> {
    let fx = fates.get(&x).ok_or(OrderError::UnknownFate(x))?;
    let fy = fates.get(&y).ok_or(OrderError::UnknownFate(y))?;
    Ok(*fy != Fate::Committed || *fx == Fate::Committed)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Op {
        ts: Timestamp,
        committed: bool,
    }

    impl Ordered for Op {
        fn timestamp(&self) -> Timestamp {
            self.ts
        }
        fn is_committed(&self) -> bool {
            self.committed
        }
    }

    fn ts(v: u32) -> Timestamp {
        Timestamp::new(v, u64::from(v))
    }

    #[test]
    fn allocate_from_zero() {
        let mut a = TimestampAllocator::new(TimestampWindow::for_capacity(192));
        assert_eq!(a.allocate().unwrap().value(), 0);
        assert_eq!(a.peek(), 1);
    }

    #[test]
    fn allocate_wraps_at_window() {
        let mut a = TimestampAllocator::starting_at(TimestampWindow::for_capacity(192), 383);
        assert_eq!(a.allocate().unwrap().value(), 383);
        assert_eq!(a.peek(), 0);
    }

    #[test]
    fn allocation_sequence_matches_unbounded_counter() {
        let window = TimestampWindow::for_capacity(4);
        let mut a = TimestampAllocator::starting_at(window, 6);
        let got: Vec<u32> = (0..5)
            .map(|_| {
                let t = a.allocate().unwrap().value();
                a.release_oldest();
                t
            })
            .collect();
        // oracle: unbounded counter 6, 7, 8, 9, 10 reduced mod 8
        let oracle: Vec<u32> = (6u64..11).map(|c| (c % 8) as u32).collect();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![6, 7, 0, 1, 2]);
    }

    #[test]
    fn allocate_rejects_overflow() {
        let mut a = TimestampAllocator::new(TimestampWindow::for_capacity(2));
        a.allocate().unwrap();
        a.allocate().unwrap();
        assert_eq!(a.allocate(), Err(OrderError::WindowOverflow { live: 2, capacity: 2 }));
        a.release_oldest();
        assert!(a.allocate().is_ok());
    }

    #[test]
    fn not_after_examples() {
        let w = TimestampWindow::for_capacity(192);
        assert!(w.not_after(ts(21), ts(22)));
        assert!(w.not_after(ts(7), ts(7)));
        let w8 = TimestampWindow::for_capacity(4);
        // 1 was allocated after 6 wrapped past 7
        let six = Timestamp::new(6, 6);
        let one = Timestamp::new(1, 9);
        assert!(w8.not_after(six, one));
        assert!(!w8.not_after(one, six));
    }

    #[test]
    fn temporal_succession_examples() {
        let w = TimestampWindow::for_capacity(192);
        let committed = Op { ts: ts(40), committed: true };
        let any = Op { ts: ts(3), committed: false };
        assert!(temporally_succeeds(w, &committed, &any));
        let x = Op { ts: ts(27), committed: false };
        let y = Op { ts: ts(28), committed: false };
        assert!(temporally_succeeds(w, &x, &y));
        let x = Op { ts: ts(28), committed: false };
        let y = Op { ts: ts(25), committed: false };
        assert!(!temporally_succeeds(w, &x, &y));
    }

    #[test]
    fn strictly_observes_truth_table() {
        let fates: HashMap<u64, Fate> =
            [(1, Fate::Committed), (2, Fate::Squashed), (3, Fate::Committed)].into_iter().collect();
        assert!(strictly_observes(1, 2, &fates).unwrap());
        assert!(strictly_observes(2, 2, &fates).unwrap());
        assert!(strictly_observes(1, 3, &fates).unwrap());
        assert!(!strictly_observes(2, 3, &fates).unwrap());
        assert_eq!(strictly_observes(9, 3, &fates), Err(OrderError::UnknownFate(9)));
    }

    #[test]
    fn rewind_restarts_after_survivor() {
        let mut a = TimestampAllocator::new(TimestampWindow::for_capacity(4));
        let t0 = a.allocate().unwrap();
        a.allocate().unwrap();
        a.allocate().unwrap();
        a.rewind_after(t0, 2);
        assert_eq!(a.live(), 1);
        let t = a.allocate().unwrap();
        assert_eq!((t.value(), t.shadow()), (1, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Any pair that can be live together (fewer than N allocations
            // apart) compares the same under the window as unbounded.
            #[test]
            fn windowed_matches_unbounded(cap in 1u32..64, start in 0u64..10_000, da in 0u64..64, db in 0u64..64) {
                let w = TimestampWindow::for_capacity(cap);
                let size = u64::from(w.size());
                let (ua, ub) = (start + da % u64::from(cap), start + db % u64::from(cap));
                let a = Timestamp::new((ua % size) as u32, ua);
                let b = Timestamp::new((ub % size) as u32, ub);
                prop_assert_eq!(w.not_after(a, b), ua <= ub);
                prop_assert_eq!(w.unbounded().not_after(a, b), ua <= ub);
            }

            #[test]
            fn totality_and_transitivity(cap in 1u32..32, start in 0u64..1000, offs in proptest::collection::vec(0u64..32, 3)) {
                let w = TimestampWindow::for_capacity(cap);
                let size = u64::from(w.size());
                let live: Vec<Timestamp> = offs
                    .iter()
                    .map(|o| {
                        let u = start + o % u64::from(cap);
                        Timestamp::new((u % size) as u32, u)
                    })
                    .collect();
                let (a, b, c) = (live[0], live[1], live[2]);
                prop_assert!(w.not_after(a, b) || w.not_after(b, a));
                if w.not_after(a, b) && w.not_after(b, c) {
                    prop_assert!(w.not_after(a, c));
                }
            }
        }
    }
}
