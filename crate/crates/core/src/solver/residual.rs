//! Message residuals and the max-residual priority queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Distance between two consecutive messages on one directed edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub value: f64,
    /// The two precisions had opposite signs (or one was zero), so the log
    /// ratio was taken on magnitudes.
    pub sign_flip: bool,
}

/// Bhattacharyya-style residual between the previously transmitted message
/// `(P_prev, μ_prev)` and the new one:
///
/// ```text
/// r = ¼·ln(¼·(P_new/P_prev + P_prev/P_new + 2)) + ¼·(P_prev + P_new)·(μ_prev − μ_new)²
/// ```
///
/// Message precisions are routinely negative, so both terms are evaluated on
/// `|P|`. For same-sign pairs the log term is unchanged by this; the
/// quadratic term keeps its magnitude and stays non-negative.
pub fn residual(prev: (f64, f64), new: (f64, f64)) -> Residual {
    let (pp, mp) = (prev.0.abs(), prev.1);
    let (pn, mn) = (new.0.abs(), new.1);
    let sign_flip = prev.0 * new.0 <= 0.0 && !(prev.0 == 0.0 && new.0 == 0.0);
    let dm = mp - mn;
    let mean_term = 0.25 * (pp + pn) * dm * dm;
    let log_term = if pp == pn {
        0.0
    } else if pp == 0.0 || pn == 0.0 {
        f64::INFINITY
    } else {
        let ratio = pn / pp;
        // ¼·ln((1 + ratio)² / (4·ratio)), clamped against rounding below zero
        (0.25 * (0.25 * (ratio + 1.0 / ratio + 2.0)).ln()).max(0.0)
    };
    Residual {
        value: log_term + mean_term,
        sign_flip,
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    residual: f64,
    id: u32,
    stamp: u32,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // larger residual first, then the lower id
    fn cmp(&self, other: &Self) -> Ordering {
        self.residual
            .total_cmp(&other.residual)
            .then_with(|| other.id.cmp(&self.id))
            .then_with(|| self.stamp.cmp(&other.stamp))
    }
}

/// Max-priority queue over directed-edge ids with in-place key updates.
///
/// Updates push a fresh heap entry and bump the id's stamp; stale entries are
/// discarded when they surface. Ties on residual go to the lowest id.
#[derive(Clone, Debug, Default)]
pub struct ResidualQueue {
    heap: BinaryHeap<Entry>,
    current: Vec<f64>,
    stamps: Vec<u32>,
}

impl ResidualQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, id: u32) {
        let need = id as usize + 1;
        if self.current.len() < need {
            self.current.resize(need, 0.0);
            self.stamps.resize(need, 0);
        }
    }

    /// Sets the tracked residual of `id`. Zero removes it from contention.
    pub fn update(&mut self, id: u32, residual: f64) {
        debug_assert!(residual >= 0.0 || residual.is_nan());
        self.ensure(id);
        let i = id as usize;
        self.stamps[i] = self.stamps[i].wrapping_add(1);
        self.current[i] = residual;
        if residual > 0.0 {
            self.heap.push(Entry {
                residual,
                id,
                stamp: self.stamps[i],
            });
        }
        if self.heap.len() > 4 * self.current.len() + 64 {
            self.compact();
        }
    }

    pub fn get(&self, id: u32) -> f64 {
        self.current.get(id as usize).copied().unwrap_or(0.0)
    }

    fn is_live(&self, e: &Entry) -> bool {
        self.stamps[e.id as usize] == e.stamp
    }

    fn drop_stale(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.is_live(top) {
                break;
            }
            self.heap.pop();
        }
    }

    /// The id with the largest residual, without removing it.
    pub fn peek_max(&mut self) -> Option<(u32, f64)> {
        self.drop_stale();
        self.heap.peek().map(|e| (e.id, e.residual))
    }

    pub fn pop_max(&mut self) -> Option<(u32, f64)> {
        self.drop_stale();
        let e = self.heap.pop()?;
        self.stamps[e.id as usize] = self.stamps[e.id as usize].wrapping_add(1);
        self.current[e.id as usize] = 0.0;
        Some((e.id, e.residual))
    }

    pub fn len(&self) -> usize {
        self.current.iter().filter(|&&r| r > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.current.iter().any(|&r| r > 0.0)
    }

    fn compact(&mut self) {
        let live: Vec<Entry> = self
            .current
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(i, &r)| Entry {
                residual: r,
                id: i as u32,
                stamp: self.stamps[i],
            })
            .collect();
        self.heap = BinaryHeap::from(live);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(residual((1.0, 0.0), (1.0, 0.0)).value, 0.0);
        assert!((residual((1.0, 0.0), (1.0, 1.0)).value - 0.5).abs() < 1e-15);
        let r = residual((1.0, 0.0), (2.0, 0.0)).value;
        assert!((r - 0.25 * 1.125f64.ln()).abs() < 1e-15);
        assert!((r - 0.02945).abs() < 1e-5);
    }

    #[test]
    fn negative_precisions() {
        // same-sign negative pair: log term identical to the positive case
        let a = residual((-1.0, 0.0), (-2.0, 0.0));
        let b = residual((1.0, 0.0), (2.0, 0.0));
        assert_eq!(a.value, b.value);
        assert!(!a.sign_flip);
        let r = residual((-1.0, 0.0), (-1.0, 1.0));
        assert!((r.value - 0.5).abs() < 1e-15);
        // the prior message is positive, real messages are negative
        let f = residual((0.5, 0.0), (-0.5, 0.0));
        assert!(f.sign_flip);
        assert_eq!(f.value, 0.0);
    }

    #[test]
    fn zero_precisions() {
        assert_eq!(residual((0.0, 0.0), (0.0, 3.0)).value, 0.0);
        assert!(residual((0.0, 0.0), (1.0, 0.0)).value.is_infinite());
    }

    #[test]
    fn queue_orders_by_residual_then_id() {
        let mut q = ResidualQueue::new();
        q.update(5, 1.0);
        q.update(2, 3.0);
        q.update(7, 3.0);
        q.update(1, 0.5);
        assert_eq!(q.pop_max(), Some((2, 3.0)));
        assert_eq!(q.pop_max(), Some((7, 3.0)));
        q.update(1, 4.0);
        assert_eq!(q.pop_max(), Some((1, 4.0)));
        q.update(5, 0.0);
        assert_eq!(q.pop_max(), None);
    }

    proptest! {
        #[test]
        fn residual_nonnegative_and_zero_iff_equal(
            p1 in -10.0f64..10.0, m1 in -10.0f64..10.0, p2 in -10.0f64..10.0, m2 in -10.0f64..10.0
        ) {
            let r = residual((p1, m1), (p2, m2)).value;
            prop_assert!(r >= 0.0);
            prop_assert_eq!(residual((p1, m1), (p1, m1)).value, 0.0);
            if p1.abs() > 1e-3 && p2.abs() > 1e-3 && (p1.abs() - p2.abs()).abs() > 1e-6 {
                prop_assert!(r > 0.0);
            }
        }

        #[test]
        fn queue_matches_brute_force(ops in proptest::collection::vec((0u32..20, 0.0f64..5.0), 1..200)) {
            let mut q = ResidualQueue::new();
            let mut model = [0.0f64; 20];
            for (i, (id, r)) in ops.iter().enumerate() {
                let r = if i % 7 == 0 { 0.0 } else { *r };
                q.update(*id, r);
                model[*id as usize] = r;
                if i % 5 == 0 {
                    let expect = model
                        .iter()
                        .enumerate()
                        .filter(|(_, &r)| r > 0.0)
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(i, &r)| (i as u32, r));
                    prop_assert_eq!(q.pop_max(), expect);
                    if let Some((id, _)) = expect {
                        model[id as usize] = 0.0;
                    }
                }
            }
        }
    }
}
