//! Forward auction for the capacity-constrained token → expert assignment.
//!
//! Each expert owns `capacity` slots, each with its own price. Unassigned
//! tokens bid for the cheapest slot of their most profitable expert, raising
//! its price by the profit margin over their second-best option plus `ε`,
//! and evict the previous holder. Slots start at price zero and never fall
//! vacant once taken, which bounds the result within `T·ε` of the optimum.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Price(f64);

impl Eq for Price {}

impl PartialOrd for Price {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Price {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `⌈T/N⌉`.
pub fn default_capacity(tokens: usize, num_experts: usize) -> usize {
    tokens.div_ceil(num_experts.max(1))
}

/// `1e-3` of the score range, or `1e-3` when all scores are equal.
pub fn default_epsilon(scores: &[f64]) -> f64 {
    scaled_epsilon(scores, 1e-3)
}

/// `scale` times the score range, or `scale` itself when the range is zero.
pub fn scaled_epsilon(scores: &[f64], scale: f64) -> f64 {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let range = hi - lo;
    if range.is_finite() && range > 0.0 {
        scale * range
    } else {
        scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    pub assignment: Vec<usize>,
    /// Final slot prices per expert.
    pub prices: Vec<Vec<f64>>,
    pub bids: usize,
}

#[derive(Debug, Clone)]
pub struct AuctionState<'a> {
    scores: &'a [f64],
    num_experts: usize,
    capacity: usize,
    epsilon: f64,
    prices: Vec<Vec<f64>>,
    holders: Vec<Vec<Option<usize>>>,
    heaps: Vec<BinaryHeap<Reverse<(Price, usize)>>>,
    owner: Vec<Option<usize>>,
    queue: VecDeque<usize>,
    bids: usize,
}

impl<'a> AuctionState<'a> {
    pub fn new(scores: &'a [f64], num_experts: usize, capacity: usize, epsilon: f64) -> Result<Self> {
        ensure!(num_experts > 0, Contract, "auction needs at least one expert");
        ensure!(
            scores.len().is_multiple_of(num_experts),
            Dimension,
            "{} scores do not form rows of {num_experts}",
            scores.len()
        );
        ensure!(epsilon > 0.0 && epsilon.is_finite(), Contract, "auction epsilon must be positive, got {epsilon}");
        ensure!(scores.iter().all(|s| s.is_finite()), Contract, "auction scores must be finite");
        let tokens = scores.len() / num_experts;
        ensure!(
            capacity * num_experts >= tokens,
            Contract,
            "capacity {capacity} × {num_experts} experts cannot hold {tokens} tokens"
        );
        Ok(AuctionState {
            scores,
            num_experts,
            capacity,
            epsilon,
            prices: vec![vec![0.0; capacity]; num_experts],
            holders: vec![vec![None; capacity]; num_experts],
            heaps: (0..num_experts)
                .map(|_| (0..capacity).map(|s| Reverse((Price(0.0), s))).collect())
                .collect(),
            owner: vec![None; tokens],
            queue: (0..tokens).collect(),
            bids: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn slot_prices(&self, expert: usize) -> &[f64] {
        &self.prices[expert]
    }

    pub fn remaining_capacity(&self, expert: usize) -> usize {
        self.holders[expert].iter().filter(|h| h.is_none()).count()
    }

    pub fn unassigned(&self) -> usize {
        self.queue.len()
    }

    fn cheapest(&self, e: usize) -> (f64, usize) {
        let Reverse((p, s)) = *self.heaps[e].peek().expect("experts always have slots");
        (p.0, s)
    }

    fn second_cheapest(&mut self, e: usize) -> Option<f64> {
        let first = self.heaps[e].pop()?;
        let second = self.heaps[e].peek().map(|Reverse((p, _))| p.0);
        self.heaps[e].push(first);
        second
    }

    /// Processes one bid. Returns `false` once every token holds a slot.
    pub fn step(&mut self) -> bool {
        let Some(t) = self.queue.pop_front() else {
            return false;
        };
        let row = &self.scores[t * self.num_experts..(t + 1) * self.num_experts];
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        let mut second_val = f64::NEG_INFINITY;
        for (e, &s) in row.iter().enumerate() {
            let v = s - self.cheapest(e).0;
            if v > best_val {
                second_val = best_val;
                best_val = v;
                best = e;
            } else if v > second_val {
                second_val = v;
            }
        }
        if let Some(p2) = self.second_cheapest(best) {
            second_val = second_val.max(row[best] - p2);
        }
        if second_val == f64::NEG_INFINITY {
            second_val = best_val;
        }
        let (price, slot) = self.cheapest(best);
        let new_price = price + (best_val - second_val) + self.epsilon;
        self.heaps[best].pop();
        self.heaps[best].push(Reverse((Price(new_price), slot)));
        self.prices[best][slot] = new_price;
        if let Some(prev) = self.holders[best][slot].replace(t) {
            self.owner[prev] = None;
            self.queue.push_back(prev);
        }
        self.owner[t] = Some(best);
        self.bids += 1;
        true
    }

    pub fn run(mut self) -> AuctionOutcome {
        while self.step() {}
        let slot_of = |e: usize, t: usize| self.holders[e].contains(&Some(t));
        debug_assert!(self.owner.iter().enumerate().all(|(t, o)| o.is_some_and(|e| slot_of(e, t))));
        AuctionOutcome {
            assignment: self.owner.iter().map(|o| o.expect("auction finished")).collect(),
            prices: self.prices,
            bids: self.bids,
        }
    }
}

/// Capacity-respecting assignment within `T·ε` of the maximum total affinity.
pub fn auction_assign(scores: &[f64], num_experts: usize, capacity: usize, epsilon: f64) -> Result<Vec<usize>> {
    Ok(AuctionState::new(scores, num_experts, capacity, epsilon)?.run().assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::loads;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(scores: &[f64], n: usize, a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(t, &e)| scores[t * n + e]).sum()
    }

    fn brute_force(scores: &[f64], t: usize, n: usize, cap: usize) -> f64 {
        fn go(scores: &[f64], t: usize, n: usize, load: &mut [usize], cap: usize, i: usize) -> f64 {
            if i == t {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for e in 0..n {
                if load[e] < cap {
                    load[e] += 1;
                    best = best.max(scores[i * n + e] + go(scores, t, n, load, cap, i + 1));
                    load[e] -= 1;
                }
            }
            best
        }
        go(scores, t, n, &mut vec![0; n], cap, 0)
    }

    #[test]
    fn two_by_two_picks_larger_matching() {
        let a = auction_assign(&[3.0, 1.0, 2.0, 1.0], 2, 1, 1e-3).unwrap();
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn equal_scores_balance_exactly() {
        let a = auction_assign(&[0.7; 18], 3, 2, 1e-3).unwrap();
        assert_eq!(loads(&a, 3), vec![2, 2, 2]);
    }

    #[test]
    fn random_six_by_three_is_near_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = default_epsilon(&s);
            let a = auction_assign(&s, 3, 2, eps).unwrap();
            assert!(loads(&a, 3).iter().all(|&l| l <= 2));
            assert!(total(&s, 3, &a) >= brute_force(&s, 6, 3, 2) - 6.0 * eps - 1e-12);
        }
    }

    #[test]
    fn contract_errors() {
        assert!(auction_assign(&[0.0; 6], 2, 1, 1e-3).unwrap_err().to_string().starts_with("contract"));
        assert!(auction_assign(&[0.0; 4], 2, 2, 0.0).is_err());
        assert!(auction_assign(&[f64::NAN, 0.0], 2, 1, 1e-3).is_err());
    }

    #[test]
    fn single_slot_single_token() {
        assert_eq!(auction_assign(&[2.5], 1, 1, 1e-3).unwrap(), vec![0]);
    }

    #[test]
    fn prices_only_rise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut st = AuctionState::new(&s, 4, 2, 1e-2).unwrap();
        let mut last: Vec<Vec<f64>> = (0..4).map(|e| st.slot_prices(e).to_vec()).collect();
        while st.step() {
            for (e, prev) in last.iter_mut().enumerate() {
                let now = st.slot_prices(e);
                assert!(now.iter().zip(prev.iter()).all(|(a, b)| a >= b && *a >= 0.0));
                prev.copy_from_slice(now);
            }
        }
        assert!((0..4).all(|e| st.remaining_capacity(e) == 0));
    }

    #[test]
    fn defaults() {
        assert_eq!(default_capacity(10, 4), 3);
        assert_eq!(default_capacity(8, 4), 2);
        assert!((default_epsilon(&[-1.0, 3.0]) - 4e-3).abs() < 1e-15);
        assert_eq!(default_epsilon(&[2.0, 2.0]), 1e-3);
    }
}
