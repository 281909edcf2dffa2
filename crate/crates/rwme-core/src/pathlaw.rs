//! The local environment seen from the particle, as symbolic dynamics.
//!
//! A symbol is a pair (chain state, jump taken); histories are words over
//! the alphabet `B = {(a,v) : q_av > 0}` with the newest symbol last. The
//! weight of a symbol given its past is
//!
//! ```text
//! e^phi = p_{z_l, z_0}(-l) * q_{z_0, v_0}   if the walk last sat on its
//!                                           current site at offset l < 0
//!       = pi_{z_0} * q_{z_0, v_0}           if it never did (within the word)
//! ```
//!
//! With the standard-past convention "no prior visit", the product of these
//! weights over the prefixes of a word is the exact probability of that
//! history for a walk started at the origin in a fresh stationary
//! environment: every actual visit since time 0 lies inside the word, and
//! an unvisited site really is stationary.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::model::ChainAnalysis;

/// Index into a [`SymbolAlphabet`].
pub type SymbolId = u16;

/// Enumeration guard: `|B|^n` may not exceed this many paths.
pub const ENUMERATION_GUARD: f64 = 1e8;

#[derive(Debug, Error)]
pub enum PathLawError {
    #[error("enumeration would visit |B|^{n} = {paths:.3e} paths, over the {guard:.0e} guard")]
    EnumerationTooLarge { n: usize, paths: f64, guard: f64 },
}

/// A symbol of the local-environment process: which state the walker saw at
/// its current site, and which jump it then took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Symbol {
    pub state: usize,
    pub jump: usize,
}

/// The alphabet `B`: all (state, jump) pairs with positive jump probability,
/// in lexicographic order.
#[derive(Debug)]
pub struct SymbolAlphabet {
    symbols: Vec<Symbol>,
    /// state * num_jumps + jump -> symbol id.
    lookup: Vec<Option<SymbolId>>,
    /// q_{a,v} per symbol.
    q: Vec<f64>,
    /// Jump displacement per symbol, length-d each.
    displacement: Vec<Vec<i64>>,
}

impl SymbolAlphabet {
    pub fn new(chain: &ChainAnalysis) -> Self {
        let model = chain.model();
        let nj = model.num_jumps();
        let mut symbols = Vec::new();
        let mut lookup = vec![None; model.num_states() * nj];
        let mut q = Vec::new();
        let mut displacement = Vec::new();
        for state in 0..model.num_states() {
            for jump in 0..nj {
                let prob = model.jump_prob(state, jump);
                if prob > 0.0 {
                    lookup[state * nj + jump] = Some(symbols.len() as SymbolId);
                    symbols.push(Symbol { state, jump });
                    q.push(prob);
                    displacement.push(model.jumps()[jump].clone());
                }
            }
        }
        SymbolAlphabet {
            symbols,
            lookup,
            q,
            displacement,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: SymbolId) -> Symbol {
        self.symbols[id as usize]
    }

    pub fn state_of(&self, id: SymbolId) -> usize {
        self.symbols[id as usize].state
    }

    pub fn jump_of(&self, id: SymbolId) -> usize {
        self.symbols[id as usize].jump
    }

    pub fn q_prob(&self, id: SymbolId) -> f64 {
        self.q[id as usize]
    }

    pub fn displacement(&self, id: SymbolId) -> &[i64] {
        &self.displacement[id as usize]
    }

    pub fn id_of(&self, state: usize, jump: usize, num_jumps: usize) -> Option<SymbolId> {
        self.lookup[state * num_jumps + jump]
    }

    /// Base-|B| integer encoding of a word; the newest symbol is the least
    /// significant digit.
    pub fn word_index(&self, word: &[SymbolId]) -> usize {
        let b = self.len();
        word.iter().fold(0usize, |acc, &s| acc * b + s as usize)
    }

    pub fn word_from_index(&self, mut index: usize, len: usize) -> Vec<SymbolId> {
        let b = self.len();
        let mut word = vec![0 as SymbolId; len];
        for slot in word.iter_mut().rev() {
            *slot = (index % b) as SymbolId;
            index /= b;
        }
        word
    }
}

/// Convention for the unobservable past beyond a finite word.
///
/// `NoPriorVisits` answers every query about times before the word's start
/// with "site never visited", which routes the potential to its stationary
/// branch. Serialized into reports so runs are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StandardPast {
    NoPriorVisits,
}

/// Exact distribution of the walk position after `n` steps, by full
/// enumeration of symbol histories.
#[derive(Debug, Clone, Serialize)]
pub struct WalkLaw {
    pub n: usize,
    /// (lattice point, probability), sorted by point.
    pub points: Vec<(Vec<i64>, f64)>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Total mass reached; 1 up to roundoff in exact mode, possibly less
    /// when pruning.
    pub total_probability: f64,
    /// Branches below this probability were dropped (0 = exact).
    pub prune_threshold: f64,
}

/// Potentials and exact history probabilities for one model.
#[derive(Debug)]
pub struct PathLaw {
    chain: Arc<ChainAnalysis>,
    alphabet: SymbolAlphabet,
    standard_past: StandardPast,
}

impl PathLaw {
    pub fn new(chain: Arc<ChainAnalysis>) -> Self {
        let alphabet = SymbolAlphabet::new(&chain);
        PathLaw {
            chain,
            alphabet,
            standard_past: StandardPast::NoPriorVisits,
        }
    }

    pub fn chain(&self) -> &Arc<ChainAnalysis> {
        &self.chain
    }

    pub fn alphabet(&self) -> &SymbolAlphabet {
        &self.alphabet
    }

    pub fn standard_past(&self) -> StandardPast {
        self.standard_past
    }

    /// Largest offset `l < 0` (relative to the final symbol at offset 0)
    /// with `v_l + ... + v_{-1} = 0`, scanning only inside the word.
    ///
    /// Displacements are summed in exact integer arithmetic, so the answer
    /// is bit-exact.
    pub fn last_return(&self, word: &[SymbolId]) -> Option<isize> {
        let d = self.chain.model().dimension();
        let mut sum = vec![0i64; d];
        // Walk backward from the symbol at offset -1.
        for (steps_back, &sym) in word.iter().rev().skip(1).enumerate() {
            let disp = self.alphabet.displacement(sym);
            for (acc, &v) in sum.iter_mut().zip(disp) {
                *acc += v;
            }
            if sum.iter().all(|&c| c == 0) {
                return Some(-(steps_back as isize) - 1);
            }
        }
        None
    }

    /// `e^{phi_n}` of the word's final symbol given the preceding symbols
    /// (available depth n = length - 1). Equals `e^phi` whenever the true
    /// last return falls inside the word.
    pub fn weight(&self, word: &[SymbolId]) -> f64 {
        let current = *word.last().expect("weight of a nonempty word");
        let z0 = self.alphabet.state_of(current);
        let q = self.alphabet.q_prob(current);
        match self.last_return(word) {
            Some(l) => {
                let zl = self.alphabet.state_of(word[(word.len() as isize - 1 + l) as usize]);
                self.chain.transition_row(zl, (-l) as usize)[z0] * q
            }
            None => self.chain.pi()[z0] * q,
        }
    }

    /// `phi_n` itself (log of [`PathLaw::weight`]).
    pub fn potential(&self, word: &[SymbolId]) -> f64 {
        self.weight(word).ln()
    }

    /// Exact probability that a stationary-start walk produces this symbol
    /// history: the chain-rule product of prefix weights, left to right.
    pub fn exact_word_probability(&self, word: &[SymbolId]) -> f64 {
        let mut prob = 1.0;
        for len in 1..=word.len() {
            prob *= self.weight(&word[..len]);
        }
        prob
    }

    /// Exact law of `S_n` by depth-first enumeration of all `|B|^n` histories.
    pub fn enumerate_walk_law(&self, n: usize) -> Result<WalkLaw, PathLawError> {
        self.enumerate_walk_law_pruned(n, 0.0)
    }

    /// Enumeration that drops branches with probability below
    /// `prune_threshold` (0 disables pruning and is exact); pruned results
    /// are approximate and show it in `total_probability`.
    pub fn enumerate_walk_law_pruned(
        &self,
        n: usize,
        prune_threshold: f64,
    ) -> Result<WalkLaw, PathLawError> {
        assert!(n >= 1, "enumeration needs n >= 1");
        let paths = (self.alphabet.len() as f64).powi(n as i32);
        if prune_threshold <= 0.0 && paths > ENUMERATION_GUARD {
            return Err(PathLawError::EnumerationTooLarge {
                n,
                paths,
                guard: ENUMERATION_GUARD,
            });
        }
        let d = self.chain.model().dimension();
        let mut state = Enumeration {
            law: self,
            n,
            prune: prune_threshold,
            word: Vec::with_capacity(n),
            position: vec![0i64; d],
            prob: 1.0,
            points: BTreeMap::new(),
            mean: vec![0.0; d],
            second: vec![0.0; d * d],
            total: 0.0,
        };
        state.descend();
        let Enumeration {
            points,
            mean,
            second,
            total,
            ..
        } = state;
        let mut covariance = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                covariance[i][j] = second[i * d + j] - mean[i] * mean[j];
            }
        }
        Ok(WalkLaw {
            n,
            points: points.into_iter().collect(),
            mean,
            covariance,
            total_probability: total,
            prune_threshold,
        })
    }
}

struct Enumeration<'a> {
    law: &'a PathLaw,
    n: usize,
    prune: f64,
    word: Vec<SymbolId>,
    position: Vec<i64>,
    prob: f64,
    points: BTreeMap<Vec<i64>, f64>,
    mean: Vec<f64>,
    second: Vec<f64>,
    total: f64,
}

impl Enumeration<'_> {
    fn descend(&mut self) {
        if self.word.len() == self.n {
            let d = self.position.len();
            *self.points.entry(self.position.clone()).or_insert(0.0) += self.prob;
            self.total += self.prob;
            for i in 0..d {
                let xi = self.position[i] as f64;
                self.mean[i] += self.prob * xi;
                for j in 0..d {
                    self.second[i * d + j] += self.prob * xi * self.position[j] as f64;
                }
            }
            return;
        }
        for id in 0..self.law.alphabet.len() as SymbolId {
            self.word.push(id);
            let w = self.law.weight(&self.word);
            let p = self.prob * w;
            if self.prune > 0.0 && p < self.prune {
                self.word.pop();
                continue;
            }
            let saved = self.prob;
            self.prob = p;
            let disp = self.law.alphabet.displacement(id);
            for (x, &v) in self.position.iter_mut().zip(disp) {
                *x += v;
            }
            self.descend();
            let disp = self.law.alphabet.displacement(id);
            for (x, &v) in self.position.iter_mut().zip(disp) {
                *x -= v;
            }
            self.prob = saved;
            self.word.pop();
        }
    }
}

/// Render a lattice point as a stable map key, e.g. `"1,-2"`.
pub fn point_key(point: &[i64]) -> String {
    point
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn pathlaw(model: ModelSpec) -> PathLaw {
        PathLaw::new(Arc::new(ChainAnalysis::new(Arc::new(model)).unwrap()))
    }

    fn two_state() -> PathLaw {
        pathlaw(
            ModelSpec::new(
                1,
                vec!["a".into(), "b".into()],
                vec![vec![0.7, 0.3], vec![0.4, 0.6]],
                vec![vec![1], vec![-1]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            )
            .unwrap(),
        )
    }

    fn iid_d1() -> PathLaw {
        pathlaw(
            ModelSpec::new(
                1,
                vec!["only".into()],
                vec![vec![1.0]],
                vec![vec![1], vec![-1]],
                vec![vec![0.75, 0.25]],
            )
            .unwrap(),
        )
    }

    fn tri_d2() -> PathLaw {
        pathlaw(
            ModelSpec::new(
                2,
                vec!["only".into()],
                vec![vec![1.0]],
                vec![vec![1, 0], vec![0, 1], vec![-1, -1]],
                vec![vec![0.5, 0.3, 0.2]],
            )
            .unwrap(),
        )
    }

    #[test]
    fn alphabet_skips_zero_probability_pairs() {
        let law = two_state();
        assert_eq!(law.alphabet().len(), 2);
        assert_eq!(law.alphabet().symbol(0), Symbol { state: 0, jump: 0 });
        assert_eq!(law.alphabet().symbol(1), Symbol { state: 1, jump: 1 });
        assert_eq!(law.alphabet().id_of(0, 1, 2), None);
    }

    #[test]
    fn word_index_round_trips() {
        let law = tri_d2();
        let b = law.alphabet();
        for idx in 0..27 {
            let word = b.word_from_index(idx, 3);
            assert_eq!(b.word_index(&word), idx);
        }
        // Newest symbol is the least significant digit.
        assert_eq!(b.word_index(&[2, 0]), 6);
    }

    #[test]
    fn last_return_cancelling_pair() {
        let law = two_state();
        // jumps (+1, -1 | current): l = -2.
        assert_eq!(law.last_return(&[0, 1, 0]), Some(-2));
    }

    #[test]
    fn last_return_none_when_sums_never_vanish() {
        let law = two_state();
        assert_eq!(law.last_return(&[0, 0, 0, 0]), None);
    }

    #[test]
    fn last_return_d2_three_back() {
        let law = tri_d2();
        // (1,0), (0,1), (-1,-1) before the current symbol sum to zero only
        // over all three.
        assert_eq!(law.last_return(&[0, 1, 2, 0]), Some(-3));
    }

    #[test]
    fn last_return_prefers_most_recent() {
        let law = two_state();
        // Returns at -2 and -4; the larger offset wins.
        assert_eq!(law.last_return(&[0, 1, 0, 1, 0]), Some(-2));
    }

    #[test]
    fn weight_length_one_is_stationary_branch() {
        let law = two_state();
        let pi = law.chain().pi();
        assert!((law.weight(&[0]) - pi[0] * 1.0).abs() < 1e-15);
        assert!((law.weight(&[1]) - pi[1] * 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_return_branch_is_two_step_transition() {
        let law = two_state();
        // States (0,1) with jumps (+1,-1), then (0,+1): e^phi = p_00(2) * 1.
        let w = law.weight(&[0, 1, 0]);
        assert!((w - 0.61).abs() < 1e-14, "weight {w}");
    }

    #[test]
    fn weights_normalize_over_symbol_extensions() {
        let law = two_state();
        for past_idx in 0..16usize {
            let past = law.alphabet().word_from_index(past_idx, 4);
            let mut sum = 0.0;
            let mut word = past.clone();
            for b in 0..law.alphabet().len() as SymbolId {
                word.push(b);
                sum += law.weight(&word);
                word.pop();
            }
            assert!((sum - 1.0).abs() <= 1e-12, "past {past_idx}: sum {sum}");
        }
    }

    #[test]
    fn exact_word_probability_first_step() {
        let law = two_state();
        let pi = law.chain().pi();
        assert!((law.exact_word_probability(&[1]) - pi[1]).abs() < 1e-15);
    }

    #[test]
    fn exact_word_probability_is_prefix_product() {
        let law = two_state();
        let word = [0, 1, 0, 0, 1, 1, 0];
        for split in 1..word.len() {
            let mut p = law.exact_word_probability(&word[..split]);
            for len in split + 1..=word.len() {
                p *= law.weight(&word[..len]);
            }
            assert_eq!(p, law.exact_word_probability(&word), "split {split}");
        }
    }

    #[test]
    fn word_probabilities_are_consistent_under_marginalization() {
        let law = two_state();
        for len in 1..=5usize {
            for idx in 0..law.alphabet().len().pow(len as u32) {
                let word = law.alphabet().word_from_index(idx, len);
                let p = law.exact_word_probability(&word);
                let mut extended = 0.0;
                let mut w = word.clone();
                for b in 0..law.alphabet().len() as SymbolId {
                    w.push(b);
                    extended += law.exact_word_probability(&w);
                    w.pop();
                }
                assert!((p - extended).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn iid_two_step_law() {
        let walk = iid_d1().enumerate_walk_law(2).unwrap();
        let expect = [(vec![-2], 0.0625), (vec![0], 0.375), (vec![2], 0.5625)];
        assert_eq!(walk.points.len(), 3);
        for ((point, prob), (epoint, eprob)) in walk.points.iter().zip(expect.iter()) {
            assert_eq!(point, epoint);
            assert!((prob - eprob).abs() < 1e-14);
        }
        assert!((walk.total_probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_jump_law_is_point_mass() {
        let law = pathlaw(
            ModelSpec::new(
                1,
                vec!["only".into()],
                vec![vec![1.0]],
                vec![vec![1]],
                vec![vec![1.0]],
            )
            .unwrap(),
        );
        let walk = law.enumerate_walk_law(9).unwrap();
        assert_eq!(walk.points, vec![(vec![9], 1.0)]);
        assert!((walk.mean[0] - 9.0).abs() < 1e-12);
        assert!(walk.covariance[0][0].abs() < 1e-12);
    }

    #[test]
    fn two_state_one_step_mean_is_one_seventh() {
        let walk = two_state().enumerate_walk_law(1).unwrap();
        assert!((walk.mean[0] - 1.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn two_state_six_step_mass_sums_to_one() {
        let walk = two_state().enumerate_walk_law(6).unwrap();
        assert!((walk.total_probability - 1.0).abs() < 1e-10);
    }

    #[test]
    fn enumeration_guard_trips() {
        let err = two_state().enumerate_walk_law(40).unwrap_err();
        assert!(matches!(err, PathLawError::EnumerationTooLarge { n: 40, .. }));
    }

    #[test]
    fn pruned_enumeration_loses_little_mass() {
        let law = two_state();
        let exact = law.enumerate_walk_law(10).unwrap();
        let pruned = law.enumerate_walk_law_pruned(10, 1e-9).unwrap();
        assert!(pruned.total_probability <= exact.total_probability + 1e-15);
        assert!(exact.total_probability - pruned.total_probability < 1e-5);
    }

    #[test]
    fn truncated_weights_match_once_depth_covers_return() {
        let law = two_state();
        // Last return at -4: jumps +1,+1,-1,-1 then current.
        let word = [0, 0, 1, 1, 0];
        assert_eq!(law.last_return(&word), Some(-4));
        let full = law.weight(&word);
        for n in 0..word.len() {
            let truncated = law.weight(&word[word.len() - 1 - n..]);
            if n >= 4 {
                assert_eq!(truncated, full);
            } else {
                let pi = law.chain().pi();
                assert_eq!(truncated, pi[0]);
            }
        }
    }

    #[test]
    fn point_keys_are_stable() {
        assert_eq!(point_key(&[1, -2]), "1,-2");
        assert_eq!(point_key(&[0]), "0");
    }
}
