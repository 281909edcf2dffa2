//! Truncated-past transfer operators, their fixed point, and conditional
//! expectations.
//!
//! Functions of the infinite past are replaced by tables over the last `D`
//! symbols. On those tables the transfer operator
//!
//! ```text
//! (Lf)(w) = sum over b of  e^{phi_D(w·b)} · f(last D symbols of w·b)
//! ```
//!
//! is a row-stochastic Markov kernel on the `|B|^D` depth-`D` words: the
//! truncated potential supplies the transition weights and `L1 = 1` holds
//! exactly. Its stationary law `mu_minus` gives cylinder probabilities of
//! the Gibbs measure, power iteration gives the spectral gap estimate, and
//! depth-`D` truncation inherits the potential's geometric loss of memory.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::pathlaw::{PathLaw, SymbolId};
use crate::rng;
use crate::util::sha256_hex;

/// Above this table size the fixed point switches from the full indicator
/// basis to probe functions for gap estimation.
const FULL_BASIS_LIMIT: usize = 1024;

/// Hard cap on operator weight-table entries (`|B|^(D+1)`).
pub const WEIGHT_TABLE_GUARD: usize = 32_000_000;

/// Cap on cylinder-table entries (`|B|^D`).
pub const CYLINDER_TABLE_GUARD: usize = 10_000_000;

/// Power-iteration cap for the fixed point.
pub const MAX_FIXED_POINT_ITERATIONS: usize = 5000;

/// Residuals below this floor carry no rate information. Sup-norm changes
/// this small are normalization rounding jitter (it scales with the table
/// size), so convergence requests tighter than the floor are clamped to it.
const RESIDUAL_NOISE_FLOOR: f64 = 1e-13;

/// The rounding floor grows with the table: tables past a million words
/// plateau above `RESIDUAL_NOISE_FLOOR`. A residual this small that stops
/// improving is treated as converged-at-floor rather than iterated to the
/// cap.
const STAGNATION_CEILING: f64 = 1e-10;

/// Consecutive iterations that must fail to beat the best residual by
/// `STAGNATION_IMPROVEMENT` before the plateau is accepted.
const STAGNATION_WINDOW: usize = 8;

/// An iteration counts as progress only if it improves the best residual
/// by at least this factor; 0.98 tolerates true contraction rates up to
/// that value before the ceiling check applies.
const STAGNATION_IMPROVEMENT: f64 = 0.98;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("depth {depth} needs {entries} table entries, over the {guard} guard")]
    DepthTooLarge {
        depth: usize,
        entries: u128,
        guard: usize,
    },
    #[error("fixed point did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("conditional expectation needs {paths:.3e} continuation paths, over the {guard:.0e} guard")]
    HorizonTooLarge { paths: f64, guard: f64 },
}

/// A function of the last `depth` symbols, possibly vector-valued:
/// `values[word_index * components + c]`.
#[derive(Debug, Clone)]
pub struct TruncatedPastFunction {
    depth: usize,
    components: usize,
    values: Vec<f64>,
}

impl TruncatedPastFunction {
    pub fn new(depth: usize, components: usize, values: Vec<f64>) -> Self {
        assert!(components >= 1);
        TruncatedPastFunction {
            depth,
            components,
            values,
        }
    }

    pub fn constant(value: f64) -> Self {
        TruncatedPastFunction {
            depth: 0,
            components: 1,
            values: vec![value],
        }
    }

    /// Indicator of one depth-`word.len()` cylinder.
    pub fn indicator(law: &PathLaw, word: &[SymbolId]) -> Self {
        let b = law.alphabet().len();
        let mut values = vec![0.0; b.pow(word.len() as u32)];
        values[law.alphabet().word_index(word)] = 1.0;
        TruncatedPastFunction {
            depth: word.len(),
            components: 1,
            values,
        }
    }

    /// The jump of the current symbol, as a d-vector function of depth 1.
    pub fn jump_function(law: &PathLaw) -> Self {
        let alphabet = law.alphabet();
        let d = law.chain().model().dimension();
        let mut values = vec![0.0; alphabet.len() * d];
        for s in 0..alphabet.len() {
            for (c, &v) in alphabet.displacement(s as SymbolId).iter().enumerate() {
                values[s * d + c] = v as f64;
            }
        }
        TruncatedPastFunction {
            depth: 1,
            components: d,
            values,
        }
    }

    /// Indicator that the current symbol's chain state equals `state`.
    pub fn state_indicator(law: &PathLaw, state: usize) -> Self {
        let alphabet = law.alphabet();
        let values = (0..alphabet.len())
            .map(|s| (alphabet.state_of(s as SymbolId) == state) as u8 as f64)
            .collect();
        TruncatedPastFunction {
            depth: 1,
            components: 1,
            values,
        }
    }

    pub fn from_fn(
        law: &PathLaw,
        depth: usize,
        components: usize,
        mut f: impl FnMut(&[SymbolId]) -> Vec<f64>,
    ) -> Self {
        let b = law.alphabet().len();
        let size = b.pow(depth as u32);
        let mut values = Vec::with_capacity(size * components);
        for idx in 0..size {
            let word = law.alphabet().word_from_index(idx, depth);
            let v = f(&word);
            assert_eq!(v.len(), components);
            values.extend(v);
        }
        TruncatedPastFunction {
            depth,
            components,
            values,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn value(&self, word_index: usize) -> &[f64] {
        &self.values[word_index * self.components..(word_index + 1) * self.components]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Evaluate on the trailing `depth` symbols of a word.
    pub fn eval_on_word(&self, law: &PathLaw, word: &[SymbolId]) -> &[f64] {
        assert!(word.len() >= self.depth, "word shorter than function depth");
        let idx = law.alphabet().word_index(&word[word.len() - self.depth..]);
        self.value(idx)
    }
}

/// The depth-`D` transfer operator with truncated potential `phi_D`.
#[derive(Debug)]
pub struct Operator {
    law: Arc<PathLaw>,
    depth: usize,
    /// weights[u * |B| + b] = e^{phi_D(word(u)·b)}.
    weights: Vec<f64>,
    /// |B|^(D-1): successor(u, b) = (u % stride) * |B| + b.
    stride: usize,
}

impl Operator {
    pub fn new(law: Arc<PathLaw>, depth: usize) -> Result<Self, TransferError> {
        assert!(depth >= 1, "operator depth must be at least 1");
        let b = law.alphabet().len();
        let entries = (b as u128).pow(depth as u32 + 1);
        if entries > WEIGHT_TABLE_GUARD as u128
            || (b as u128).pow(depth as u32) > CYLINDER_TABLE_GUARD as u128
        {
            return Err(TransferError::DepthTooLarge {
                depth,
                entries,
                guard: WEIGHT_TABLE_GUARD,
            });
        }
        let words = b.pow(depth as u32);
        let mut weights = vec![0.0; words * b];
        let mut buf = vec![0 as SymbolId; depth + 1];
        for u in 0..words {
            let mut rem = u;
            for k in (0..depth).rev() {
                buf[k] = (rem % b) as SymbolId;
                rem /= b;
            }
            for sym in 0..b {
                buf[depth] = sym as SymbolId;
                weights[u * b + sym] = law.weight(&buf);
            }
        }
        Ok(Operator {
            law,
            depth,
            weights,
            stride: words / b,
        })
    }

    pub fn law(&self) -> &Arc<PathLaw> {
        &self.law
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_words(&self) -> usize {
        self.stride * self.law.alphabet().len()
    }

    #[inline]
    fn successor(&self, u: usize, b: usize) -> usize {
        (u % self.stride) * self.law.alphabet().len() + b
    }

    /// Lift a shallower function to this operator's depth.
    pub fn lift(&self, f: &TruncatedPastFunction) -> TruncatedPastFunction {
        assert!(f.depth <= self.depth, "cannot lift depth {} to {}", f.depth, self.depth);
        if f.depth == self.depth {
            return f.clone();
        }
        let words = self.num_words();
        let b = self.law.alphabet().len();
        let modulus = b.pow(f.depth as u32);
        let c = f.components;
        let mut values = vec![0.0; words * c];
        for u in 0..words {
            values[u * c..(u + 1) * c].copy_from_slice(f.value(u % modulus));
        }
        TruncatedPastFunction {
            depth: self.depth,
            components: c,
            values,
        }
    }

    /// One application of the operator. Accepts any depth ≤ D; the result
    /// depends on the full depth-D word.
    pub fn apply(&self, f: &TruncatedPastFunction) -> TruncatedPastFunction {
        assert!(f.depth <= self.depth);
        let b = self.law.alphabet().len();
        let words = self.num_words();
        let modulus = b.pow(f.depth as u32);
        let c = f.components;
        let mut values = vec![0.0; words * c];
        for u in 0..words {
            let out = &mut values[u * c..(u + 1) * c];
            for sym in 0..b {
                let w = self.weights[u * b + sym];
                let fv = f.value(self.successor(u, sym) % modulus);
                for (acc, &v) in out.iter_mut().zip(fv) {
                    *acc += w * v;
                }
            }
        }
        TruncatedPastFunction {
            depth: self.depth,
            components: c,
            values,
        }
    }

    /// Stationary law and spectral-gap estimate of the operator.
    ///
    /// The stationary vector comes from left power iteration, refined to
    /// machine precision. The gap estimate gamma_hat is the median of
    /// successive residual ratios over the last informative iterations: on
    /// tables up to 1024 words the residuals track the full basis of
    /// depth-D indicators (each `L^n 1_w` must flatten to the constant
    /// `mu_minus(w)`); on larger tables a fixed set of probe functions
    /// stands in for the basis.
    ///
    /// `tol` below the double-precision noise floor is clamped to it. The
    /// floor itself grows with the table; a residual under
    /// `STAGNATION_CEILING` that stops improving is accepted as converged
    /// at the table's floor, with `residual()` reporting what was reached.
    pub fn rpf_fixed_point(&self, tol: f64) -> Result<RPFAnalysis, TransferError> {
        assert!(tol > 0.0);
        let tol = tol.max(RESIDUAL_NOISE_FLOOR);
        let words = self.num_words();
        let b = self.law.alphabet().len();

        // Left power iteration: mu <- mu L, normalized. Scatter order is
        // fixed, so the result is deterministic.
        let mut mu = vec![1.0 / words as f64; words];
        let mut converged = false;
        let mut left_residual = f64::INFINITY;
        let mut floor = StagnationTracker::new();
        for _ in 0..MAX_FIXED_POINT_ITERATIONS {
            let mut next = vec![0.0; words];
            for u in 0..words {
                let m = mu[u];
                if m == 0.0 {
                    continue;
                }
                for sym in 0..b {
                    next[self.successor(u, sym)] += m * self.weights[u * b + sym];
                }
            }
            let norm: f64 = next.iter().sum();
            for v in next.iter_mut() {
                *v /= norm;
            }
            left_residual = mu
                .iter()
                .zip(next.iter())
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            mu = next;
            if left_residual <= tol || floor.stalled(left_residual) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(TransferError::NoConvergence {
                iterations: MAX_FIXED_POINT_ITERATIONS,
                residual: left_residual,
            });
        }

        let (gamma_hat, iterations, residual, recent_ratios) = if words <= FULL_BASIS_LIMIT {
            self.gap_from_full_basis(&mu, tol)?
        } else {
            self.gap_from_probes(&mu, tol)?
        };

        Ok(RPFAnalysis {
            law: self.law.clone(),
            depth: self.depth,
            mu_minus: mu,
            gamma_hat,
            iterations,
            residual,
            recent_ratios,
        })
    }

    /// Gap estimation by iterating the whole indicator basis at once:
    /// column j of K^n is `L^n 1_j`.
    fn gap_from_full_basis(
        &self,
        mu: &[f64],
        tol: f64,
    ) -> Result<(f64, usize, f64, Vec<f64>), TransferError> {
        let words = self.num_words();
        let b = self.law.alphabet().len();
        let mut a: Vec<f64> = (0..words * words)
            .map(|i| (i / words == i % words) as u8 as f64)
            .collect();
        let mut next = vec![0.0; words * words];
        // residual history per column, most recent last
        let mut history: Vec<Vec<f64>> = Vec::new();
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut floor = StagnationTracker::new();
        let mut floored = false;
        for n in 1..=MAX_FIXED_POINT_ITERATIONS {
            next.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..words {
                for sym in 0..b {
                    let w = self.weights[u * b + sym];
                    let s = self.successor(u, sym);
                    let src = &a[s * words..(s + 1) * words];
                    let dst = &mut next[u * words..(u + 1) * words];
                    for (acc, &v) in dst.iter_mut().zip(src) {
                        *acc += w * v;
                    }
                }
            }
            std::mem::swap(&mut a, &mut next);
            let mut col_res = vec![0.0f64; words];
            for u in 0..words {
                for j in 0..words {
                    let r = (a[u * words + j] - mu[j]).abs();
                    if r > col_res[j] {
                        col_res[j] = r;
                    }
                }
            }
            residual = col_res.iter().fold(0.0f64, |m, &v| m.max(v));
            history.push(col_res);
            iterations = n;
            if residual <= tol {
                break;
            }
            if floor.stalled(residual) {
                floored = true;
                break;
            }
        }
        if residual > tol && !floored {
            return Err(TransferError::NoConvergence {
                iterations,
                residual,
            });
        }
        Ok(finish_gap_estimate(
            floor.informative(&history, floored),
            iterations,
            residual,
            floor.ratio_floor(floored),
        ))
    }

    /// Gap estimation from a fixed probe set: jump components, state
    /// indicators, and seeded random cylinder indicators.
    fn gap_from_probes(
        &self,
        mu: &[f64],
        tol: f64,
    ) -> Result<(f64, usize, f64, Vec<f64>), TransferError> {
        use rand::Rng;
        let words = self.num_words();
        let law = &self.law;
        let mut probes: Vec<TruncatedPastFunction> = Vec::new();
        probes.push(self.lift(&TruncatedPastFunction::jump_function(law)));
        let states = law.chain().model().num_states().min(2);
        for s in 0..states {
            probes.push(self.lift(&TruncatedPastFunction::state_indicator(law, s)));
        }
        let mut rng = rng::derive_rng(0, rng::purpose::PROBE, &[self.depth as u64]);
        for _ in 0..4 {
            let w = rng.gen_range(0..words);
            let word = law.alphabet().word_from_index(w, self.depth);
            probes.push(TruncatedPastFunction::indicator(law, &word));
        }
        // Split vector probes into scalar components against one shared
        // residual history.
        let mut scalar: Vec<(TruncatedPastFunction, f64, f64)> = Vec::new();
        for p in probes {
            for comp in 0..p.components {
                let values: Vec<f64> = (0..words).map(|u| p.value(u)[comp]).collect();
                let f = TruncatedPastFunction::new(self.depth, 1, values);
                let mean: f64 = f.values.iter().zip(mu).map(|(v, m)| v * m).sum();
                let scale = f.sup_norm().max(1e-300);
                scalar.push((f, mean, scale));
            }
        }
        let mut history: Vec<Vec<f64>> = Vec::new();
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut floor = StagnationTracker::new();
        let mut floored = false;
        for n in 1..=MAX_FIXED_POINT_ITERATIONS {
            let mut col_res = vec![0.0f64; scalar.len()];
            for (idx, (f, mean, scale)) in scalar.iter_mut().enumerate() {
                *f = self.apply(f);
                let r = f
                    .values
                    .iter()
                    .map(|v| (v - *mean).abs())
                    .fold(0.0, f64::max);
                col_res[idx] = r / *scale;
            }
            residual = col_res.iter().fold(0.0f64, |m, &v| m.max(v));
            history.push(col_res);
            iterations = n;
            if residual <= tol {
                break;
            }
            if floor.stalled(residual) {
                floored = true;
                break;
            }
        }
        if residual > tol && !floored {
            return Err(TransferError::NoConvergence {
                iterations,
                residual,
            });
        }
        Ok(finish_gap_estimate(
            floor.informative(&history, floored),
            iterations,
            residual,
            floor.ratio_floor(floored),
        ))
    }
}

/// Detects the rounding floor of a residual sequence: residuals under
/// `STAGNATION_CEILING` that fail to beat the best seen so far by
/// `STAGNATION_IMPROVEMENT` for `STAGNATION_WINDOW` consecutive
/// iterations. Once stalled, the trailing plateau carries no rate
/// information and is cut from gap estimation.
struct StagnationTracker {
    best: f64,
    stall: usize,
}

impl StagnationTracker {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stall: 0,
        }
    }

    fn stalled(&mut self, residual: f64) -> bool {
        if residual < STAGNATION_CEILING && residual > self.best * STAGNATION_IMPROVEMENT {
            self.stall += 1;
        } else {
            self.stall = 0;
        }
        if residual < self.best {
            self.best = residual;
        }
        self.stall >= STAGNATION_WINDOW
    }

    /// History with the stalled plateau removed.
    fn informative<'a>(&self, history: &'a [Vec<f64>], floored: bool) -> &'a [Vec<f64>] {
        if floored {
            &history[..history.len().saturating_sub(self.stall)]
        } else {
            history
        }
    }

    /// Ratio cutoff for gap estimation: floor-adjacent residuals are
    /// jitter, not decay.
    fn ratio_floor(&self, floored: bool) -> f64 {
        if floored {
            (2.0 * self.best).max(RESIDUAL_NOISE_FLOOR)
        } else {
            RESIDUAL_NOISE_FLOOR
        }
    }
}

/// Gap estimate from per-basis-function residual histories.
///
/// Ratios are taken over two iterations and square-rooted: the subleading
/// spectrum often carries negative or complex eigenvalues, which make
/// one-step sup-norm ratios oscillate with period two even though the
/// residual envelope decays cleanly. The two-step geometric mean estimates
/// the eigenvalue modulus and is stable. gamma_hat is the median over all
/// (function, iteration) ratios in the trailing window; the per-iteration
/// medians are kept for stability reporting.
fn finish_gap_estimate(
    history: &[Vec<f64>],
    iterations: usize,
    residual: f64,
    ratio_floor: f64,
) -> (f64, usize, f64, Vec<f64>) {
    let mut per_iteration = Vec::new();
    let mut all = Vec::new();
    let window = history.len().saturating_sub(5).max(2);
    for n in window..history.len() {
        let mut ratios: Vec<f64> = history[n]
            .iter()
            .zip(history[n - 2].iter())
            .filter(|(&cur, &prev)| cur > ratio_floor && prev > ratio_floor)
            .map(|(&cur, &prev)| (cur / prev).sqrt())
            .collect();
        all.extend_from_slice(&ratios);
        if let Some(m) = median(&mut ratios) {
            per_iteration.push(m);
        }
    }
    let gamma_hat = median(&mut all).unwrap_or(0.0);
    (gamma_hat, iterations, residual, per_iteration)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Converged fixed point of a depth-`D` operator.
#[derive(Debug, Clone)]
pub struct RPFAnalysis {
    law: Arc<PathLaw>,
    depth: usize,
    mu_minus: Vec<f64>,
    gamma_hat: f64,
    iterations: usize,
    residual: f64,
    recent_ratios: Vec<f64>,
}

/// Serializable view of an [`RPFAnalysis`].
#[derive(Debug, Clone, Serialize)]
pub struct RPFSummary {
    pub depth: usize,
    pub alphabet_size: usize,
    pub gamma_hat: f64,
    pub iterations: usize,
    pub residual: f64,
    pub recent_ratios: Vec<f64>,
    pub mu_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cylinders: Option<Vec<(String, f64)>>,
}

impl RPFAnalysis {
    pub fn law(&self) -> &Arc<PathLaw> {
        &self.law
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn mu_minus(&self) -> &[f64] {
        &self.mu_minus
    }

    pub fn gamma_hat(&self) -> f64 {
        self.gamma_hat
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn recent_ratios(&self) -> &[f64] {
        &self.recent_ratios
    }

    /// mu_minus expectation of a function of depth ≤ D.
    pub fn expectation(&self, f: &TruncatedPastFunction) -> Vec<f64> {
        assert!(f.depth <= self.depth);
        let b = self.law.alphabet().len();
        let modulus = b.pow(f.depth as u32);
        let mut out = vec![0.0; f.components];
        for (u, &m) in self.mu_minus.iter().enumerate() {
            for (acc, &v) in out.iter_mut().zip(f.value(u % modulus)) {
                *acc += m * v;
            }
        }
        out
    }

    /// Cylinder probabilities at depth `k ≤ D` (keeping the newest k
    /// symbols; by shift invariance this is the depth-k law).
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        assert!(k <= self.depth);
        let b = self.law.alphabet().len();
        let modulus = b.pow(k as u32);
        let mut out = vec![0.0; modulus];
        for (u, &m) in self.mu_minus.iter().enumerate() {
            out[u % modulus] += m;
        }
        out
    }

    /// Marginal over the oldest symbol: depth-(D-1) probabilities indexed by
    /// the remaining word.
    pub fn marginal_drop_oldest(&self) -> Vec<f64> {
        let b = self.law.alphabet().len();
        let stride = self.mu_minus.len() / b;
        let mut out = vec![0.0; stride];
        for (u, &m) in self.mu_minus.iter().enumerate() {
            out[u % stride] += m;
        }
        out
    }

    pub fn summary(&self, include_cylinders: bool) -> RPFSummary {
        let mut bytes = Vec::with_capacity(self.mu_minus.len() * 8);
        for v in &self.mu_minus {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cylinders = include_cylinders.then(|| {
            self.mu_minus
                .iter()
                .enumerate()
                .map(|(u, &m)| {
                    let word = self.law.alphabet().word_from_index(u, self.depth);
                    let label = word
                        .iter()
                        .map(|&s| {
                            let sym = self.law.alphabet().symbol(s);
                            format!("{}:{}", sym.state, sym.jump)
                        })
                        .collect::<Vec<_>>()
                        .join(" ");
                    (label, m)
                })
                .collect()
        });
        RPFSummary {
            depth: self.depth,
            alphabet_size: self.law.alphabet().len(),
            gamma_hat: self.gamma_hat,
            iterations: self.iterations,
            residual: self.residual,
            recent_ratios: self.recent_ratios.clone(),
            mu_digest: sha256_hex(&bytes),
            cylinders,
        }
    }
}

/// Lagged autocovariance `mu(ḡ · ḡ∘shift^j)` as a components × components
/// matrix; `g` is centered internally.
///
/// Uses the Markov-chain duality `E[ḡ(w_0) ⊗ ḡ(w_j)] = mu_minus(ḡ ⊗ L^j ḡ)`,
/// which the cross-check suite validates against the exact enumeration
/// oracle before anything downstream trusts it.
pub fn lagged_covariance(
    op: &Operator,
    rpf: &RPFAnalysis,
    g: &TruncatedPastFunction,
    j: usize,
) -> Vec<Vec<f64>> {
    let mean = rpf.expectation(g);
    let mut centered = op.lift(g);
    let c = centered.components;
    for chunk in centered.values.chunks_mut(c) {
        for (v, m) in chunk.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut h = centered.clone();
    for _ in 0..j {
        h = op.apply(&h);
    }
    cross_moment(rpf, &centered, &h)
}

/// `sum_u mu[u] · f(u) ⊗ h(u)`.
pub(crate) fn cross_moment(
    rpf: &RPFAnalysis,
    f: &TruncatedPastFunction,
    h: &TruncatedPastFunction,
) -> Vec<Vec<f64>> {
    assert_eq!(f.depth, rpf.depth);
    assert_eq!(h.depth, rpf.depth);
    let c = f.components;
    let mut out = vec![vec![0.0; h.components]; c];
    for (u, &m) in rpf.mu_minus().iter().enumerate() {
        let fv = f.value(u);
        let hv = h.value(u);
        for r in 0..c {
            let w = m * fv[r];
            for (acc, &hvs) in out[r].iter_mut().zip(hv) {
                *acc += w * hvs;
            }
        }
    }
    out
}

/// Exact conditional expectation `E(f at time `horizon` | first symbols =
/// prefix)` for a stationary-start walk, by depth-first integration over
/// the unobserved symbols with exact potentials.
///
/// `f` reads the `f.depth()` symbols ending at time `horizon` (times are
/// 0-based), so the earliest admissible horizon is `f.depth() - 1`.
pub fn conditional_expectation(
    law: &PathLaw,
    prefix: &[SymbolId],
    f: &TruncatedPastFunction,
    horizon: usize,
) -> Result<f64, TransferError> {
    assert_eq!(f.components(), 1, "conditional expectation is scalar");
    assert!(
        horizon + 1 >= f.depth(),
        "horizon {horizon} does not fit a depth-{} window",
        f.depth()
    );
    let total_len = horizon + 1;
    if total_len <= prefix.len() {
        return Ok(f.eval_on_word(law, &prefix[..total_len])[0]);
    }
    let unobserved = total_len - prefix.len();
    let paths = (law.alphabet().len() as f64).powi(unobserved as i32);
    if paths > crate::pathlaw::ENUMERATION_GUARD {
        return Err(TransferError::HorizonTooLarge {
            paths,
            guard: crate::pathlaw::ENUMERATION_GUARD,
        });
    }
    let mut word = prefix.to_vec();
    word.reserve(unobserved);
    Ok(integrate_continuations(law, &mut word, total_len, 1.0, f))
}

fn integrate_continuations(
    law: &PathLaw,
    word: &mut Vec<SymbolId>,
    total_len: usize,
    prob: f64,
    f: &TruncatedPastFunction,
) -> f64 {
    if word.len() == total_len {
        return prob * f.eval_on_word(law, word)[0];
    }
    let mut acc = 0.0;
    for b in 0..law.alphabet().len() as SymbolId {
        word.push(b);
        let w = law.weight(word);
        acc += integrate_continuations(law, word, total_len, prob * w, f);
        word.pop();
    }
    acc
}

/// Absolute-continuity check: fit a single constant `C'` from the depth-
/// `fit_depth` cylinder table, then verify `P(cyl) ≤ C'·mu(cyl)` at the
/// check depths.
///
/// The raw maximum ratio is nondecreasing under cylinder refinement, so it
/// cannot itself serve as `C'` for deeper cylinders. The fit therefore pads
/// it with the geometric tail that loss of memory allows: ratio increments
/// between consecutive depths shrink by a factor `lambda` per depth, so
/// `C' = R_k + (R_k - R_{k-1}) · lambda / (1 - lambda)` bounds the limit
/// using only data at depths ≤ k plus the model's own mixing rate.
#[derive(Debug, Clone, Serialize)]
pub struct AbsoluteContinuityReport {
    pub fit_depth: usize,
    /// Raw max ratio at the fit depth.
    pub max_ratio_fit: f64,
    /// Padded constant actually used for the bound.
    pub c_prime: f64,
    /// (depth, max ratio) per checked depth.
    pub checked: Vec<(usize, f64)>,
    pub pass: bool,
}

pub fn absolute_continuity_check(
    rpf: &RPFAnalysis,
    fit_depth: usize,
    check_depths: &[usize],
) -> AbsoluteContinuityReport {
    assert!(fit_depth >= 1);
    let law = rpf.law();
    let r_fit = max_path_to_mu_ratio(law, rpf, fit_depth).0;
    let r_prev = if fit_depth == 1 {
        1.0
    } else {
        max_path_to_mu_ratio(law, rpf, fit_depth - 1).0
    };
    let lambda = law.chain().lambda();
    let pad = (r_fit - r_prev).max(0.0) * lambda / (1.0 - lambda).max(1e-12);
    let c_prime = r_fit + pad;
    let mut checked = Vec::new();
    let mut pass = true;
    for &k in check_depths {
        let (ratio, _) = max_path_to_mu_ratio(law, rpf, k);
        if ratio > c_prime * (1.0 + 1e-12) {
            pass = false;
        }
        checked.push((k, ratio));
    }
    AbsoluteContinuityReport {
        fit_depth,
        max_ratio_fit: r_fit,
        c_prime,
        checked,
        pass,
    }
}

fn max_path_to_mu_ratio(law: &PathLaw, rpf: &RPFAnalysis, k: usize) -> (f64, usize) {
    assert!(k <= rpf.depth());
    let mu_k = rpf.marginal(k);
    let mut worst = (0.0f64, 0usize);
    for (idx, &m) in mu_k.iter().enumerate() {
        let word = law.alphabet().word_from_index(idx, k);
        let p = law.exact_word_probability(&word);
        if m > 0.0 {
            let ratio = p / m;
            if ratio > worst.0 {
                worst = (ratio, idx);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChainAnalysis, ModelSpec};

    fn pathlaw(model: ModelSpec) -> Arc<PathLaw> {
        Arc::new(PathLaw::new(Arc::new(
            ChainAnalysis::new(Arc::new(model)).unwrap(),
        )))
    }

    fn two_state() -> Arc<PathLaw> {
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

    fn iid_d1() -> Arc<PathLaw> {
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

    fn env_independent() -> Arc<PathLaw> {
        pathlaw(
            ModelSpec::new(
                1,
                vec!["a".into(), "b".into()],
                vec![vec![0.7, 0.3], vec![0.4, 0.6]],
                vec![vec![1], vec![-1]],
                vec![vec![0.75, 0.25], vec![0.75, 0.25]],
            )
            .unwrap(),
        )
    }

    #[test]
    fn operator_preserves_constants_exactly() {
        for depth in 1..=6 {
            let op = Operator::new(two_state(), depth).unwrap();
            let one = op.lift(&TruncatedPastFunction::constant(1.0));
            let lone = op.apply(&one);
            for &v in lone.values() {
                assert!((v - 1.0).abs() <= 1e-14, "depth {depth}: L1 = {v}");
            }
        }
    }

    #[test]
    fn operator_is_a_sup_norm_contraction() {
        use rand::Rng;
        let op = Operator::new(two_state(), 4).unwrap();
        let mut rng = rng::derive_rng(7, rng::purpose::HARNESS, &[0]);
        for trial in 0..20 {
            let values: Vec<f64> = (0..op.num_words()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f = TruncatedPastFunction::new(4, 1, values);
            let lf = op.apply(&f);
            assert!(
                lf.sup_norm() <= f.sup_norm() + 1e-12,
                "trial {trial}: |Lf| {} > |f| {}",
                lf.sup_norm(),
                f.sup_norm()
            );
        }
    }

    #[test]
    fn iid_depth1_indicator_averages_to_jump_probability() {
        let law = iid_d1();
        let op = Operator::new(law.clone(), 1).unwrap();
        let f = TruncatedPastFunction::indicator(&law, &[0]);
        let lf = op.apply(&f);
        for &v in lf.values() {
            assert!((v - 0.75).abs() < 1e-14);
        }
    }

    #[test]
    fn iid_fixed_point_is_product_measure() {
        let law = iid_d1();
        let op = Operator::new(law.clone(), 3).unwrap();
        let rpf = op.rpf_fixed_point(1e-12).unwrap();
        for (u, &m) in rpf.mu_minus().iter().enumerate() {
            let word = law.alphabet().word_from_index(u, 3);
            let expect: f64 = word.iter().map(|&s| law.alphabet().q_prob(s)).product();
            assert!((m - expect).abs() < 1e-12, "word {u}: {m} vs {expect}");
        }
        // The i.i.d. operator collapses to the constant in exactly D steps;
        // no informative residual pair survives, so the gap reads as instant.
        assert!(rpf.iterations() <= 4, "iid converged in {}", rpf.iterations());
        assert_eq!(rpf.gamma_hat(), 0.0);
    }

    #[test]
    fn env_independent_depth1_cylinders_are_pi_times_q() {
        let law = env_independent();
        let op = Operator::new(law.clone(), 4).unwrap();
        let rpf = op.rpf_fixed_point(1e-12).unwrap();
        let marg = rpf.marginal(1);
        let pi = law.chain().pi();
        for (s, &m) in marg.iter().enumerate() {
            let sym = law.alphabet().symbol(s as SymbolId);
            let expect = pi[sym.state] * law.chain().model().jump_prob(sym.state, sym.jump);
            assert!((m - expect).abs() < 1e-10, "symbol {s}: {m} vs {expect}");
        }
    }

    #[test]
    fn fixed_point_mass_and_shift_consistency() {
        let op = Operator::new(two_state(), 6).unwrap();
        let rpf = op.rpf_fixed_point(1e-10).unwrap();
        let total: f64 = rpf.mu_minus().iter().sum();
        assert!((total - 1.0).abs() <= 1e-10);
        let newest = rpf.marginal(rpf.depth() - 1);
        let oldest = rpf.marginal_drop_oldest();
        for (a, b) in newest.iter().zip(oldest.iter()) {
            assert!((a - b).abs() <= 1e-10, "shift consistency {a} vs {b}");
        }
        assert!(rpf.gamma_hat() > 0.0 && rpf.gamma_hat() < 1.0);
    }

    #[test]
    fn iid_lagged_covariances_vanish() {
        let law = iid_d1();
        let op = Operator::new(law.clone(), 3).unwrap();
        let rpf = op.rpf_fixed_point(1e-12).unwrap();
        let g = TruncatedPastFunction::jump_function(&law);
        let c0 = lagged_covariance(&op, &rpf, &g, 0);
        assert!((c0[0][0] - 0.75).abs() < 1e-12, "C0 = {}", c0[0][0]);
        for j in 1..=5 {
            let cj = lagged_covariance(&op, &rpf, &g, j);
            assert!(cj[0][0].abs() < 1e-12, "C{j} = {}", cj[0][0]);
        }
    }

    #[test]
    fn conditional_expectation_is_deterministic_inside_prefix() {
        let law = two_state();
        let f = TruncatedPastFunction::indicator(&law, &[1]);
        let prefix = [0 as SymbolId, 1, 0];
        let e = conditional_expectation(&law, &prefix, &f, 1).unwrap();
        assert_eq!(e, 1.0);
        let e = conditional_expectation(&law, &prefix, &f, 2).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn conditional_expectation_empty_prefix_is_stationary_start() {
        let law = two_state();
        let pi = law.chain().pi();
        let f = TruncatedPastFunction::state_indicator(&law, 0);
        let e = conditional_expectation(&law, &[], &f, 0).unwrap();
        assert!((e - pi[0]).abs() < 1e-14);
    }

    #[test]
    fn conditional_expectation_normalizes_over_any_f_one() {
        let law = two_state();
        let one = TruncatedPastFunction::new(1, 1, vec![1.0, 1.0]);
        let e = conditional_expectation(&law, &[0, 0], &one, 7).unwrap();
        assert!((e - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn horizon_guard_trips() {
        let law = two_state();
        let f = TruncatedPastFunction::state_indicator(&law, 0);
        let err = conditional_expectation(&law, &[], &f, 40).unwrap_err();
        assert!(matches!(err, TransferError::HorizonTooLarge { .. }));
    }

    #[test]
    fn depth_guard_trips() {
        let err = Operator::new(two_state(), 40).unwrap_err();
        assert!(matches!(err, TransferError::DepthTooLarge { .. }));
    }

    #[test]
    fn iid_absolute_continuity_is_tight() {
        // P+ equals mu for the i.i.d. model, so every ratio is exactly 1.
        let law = iid_d1();
        let op = Operator::new(law, 5).unwrap();
        let rpf = op.rpf_fixed_point(1e-12).unwrap();
        let report = absolute_continuity_check(&rpf, 2, &[3, 4]);
        assert!(report.pass);
        assert!((report.c_prime - 1.0).abs() < 1e-10);
    }
}
