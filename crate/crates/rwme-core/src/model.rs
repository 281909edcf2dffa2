//! Problem instances and the per-site Markov chain.
//!
//! A [`ModelSpec`] bundles the site chain (alphabet `A`, transition matrix
//! `p`) with the jump kernel of the walk (jump set `Λ`, per-state jump
//! distributions `q`). [`ChainAnalysis`] precomputes everything the rest of
//! the crate needs from `p`: the stationary distribution, the second
//! eigenvalue modulus, and multi-step transition rows `p(k)` with a cutoff
//! beyond which rows are indistinguishable from stationary.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums of `p` and `q` must match 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Residual required of the stationary distribution: `‖π·p − π‖∞ ≤ 1e-12`.
pub const STATIONARY_TOL: f64 = 1e-12;

/// `p(k)` rows whose distance to `π` falls below this are replaced by `π`.
const PI_CUTOFF_EPS: f64 = 1e-15;

/// Cap on floats spent caching matrix powers; beyond it, powers below the
/// cutoff are recomputed on demand by repeated squaring.
const POWER_CACHE_BUDGET: usize = 1 << 22;

/// Jump components are capped so that positions accumulated over any
/// realistic horizon stay far from `i64` overflow.
pub const MAX_JUMP_ABS: i64 = 1 << 31;

/// Symbols (state, jump) are indexed by `u16`, so the product of state and
/// jump counts must fit.
pub const MAX_SYMBOLS: usize = u16::MAX as usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{matrix}[{row}] sums to {sum:.17}, expected 1 within {ROW_SUM_TOL:e}")]
    NonStochasticRow {
        matrix: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("p[{from}][{to}] = {value} violates the strict positivity requirement p_ab > 0")]
    NonPositiveTransition { from: usize, to: usize, value: f64 },
    #[error("{matrix}[{row}][{col}] = {value} is negative")]
    NegativeEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("jumps[{first}] and jumps[{second}] are identical")]
    DuplicateJump { first: usize, second: usize },
    #[error("{path} = {value} exceeds the supported magnitude {MAX_JUMP_ABS}")]
    JumpOutOfRange { path: String, value: i64 },
    #[error("{states} states x {jumps} jumps exceeds the symbol id range {MAX_SYMBOLS}")]
    AlphabetTooLarge { states: usize, jumps: usize },
    #[error("{path}: expected length {expected}, got {got}")]
    DimensionMismatch {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
}

/// A full problem instance: site chain plus jump kernel.
///
/// Invariants are established by [`ModelSpec::new`] and hold for every value
/// of this type: `p` and `q` are row-stochastic within [`ROW_SUM_TOL`], `p`
/// is entrywise positive, `q` is entrywise nonnegative, and the jump vectors
/// are pairwise distinct integer vectors of length `d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    d: usize,
    alphabet: Vec<String>,
    p: Vec<Vec<f64>>,
    jumps: Vec<Vec<i64>>,
    q: Vec<Vec<f64>>,
}

/// Mirror of the JSON schema, prior to validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawModelSpec {
    d: usize,
    alphabet: Vec<String>,
    p: Vec<Vec<f64>>,
    jumps: Vec<Vec<i64>>,
    q: Vec<Vec<f64>>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = ModelError;
    fn try_from(raw: RawModelSpec) -> Result<Self, ModelError> {
        ModelSpec::new(raw.d, raw.alphabet, raw.p, raw.jumps, raw.q)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(m: ModelSpec) -> Self {
        RawModelSpec {
            d: m.d,
            alphabet: m.alphabet,
            p: m.p,
            jumps: m.jumps,
            q: m.q,
        }
    }
}

impl ModelSpec {
    /// Validate a candidate model description.
    pub fn new(
        d: usize,
        alphabet: Vec<String>,
        p: Vec<Vec<f64>>,
        jumps: Vec<Vec<i64>>,
        q: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::Parse {
                path: "d".into(),
                detail: "dimension must be a positive integer".into(),
            });
        }
        let n = alphabet.len();
        if n == 0 {
            return Err(ModelError::Parse {
                path: "alphabet".into(),
                detail: "alphabet must be nonempty".into(),
            });
        }
        if jumps.is_empty() {
            return Err(ModelError::Parse {
                path: "jumps".into(),
                detail: "jump set must be nonempty".into(),
            });
        }
        if n.saturating_mul(jumps.len()) > MAX_SYMBOLS {
            return Err(ModelError::AlphabetTooLarge {
                states: n,
                jumps: jumps.len(),
            });
        }
        if p.len() != n {
            return Err(ModelError::DimensionMismatch {
                path: "p".into(),
                expected: n,
                got: p.len(),
            });
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::DimensionMismatch {
                    path: format!("p[{i}]"),
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::Parse {
                        path: format!("p[{i}][{j}]"),
                        detail: "entry is not a finite number".into(),
                    });
                }
                if v <= 0.0 {
                    return Err(ModelError::NonPositiveTransition {
                        from: i,
                        to: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ModelError::NonStochasticRow {
                    matrix: "p",
                    row: i,
                    sum,
                });
            }
        }
        for (i, v) in jumps.iter().enumerate() {
            if v.len() != d {
                return Err(ModelError::DimensionMismatch {
                    path: format!("jumps[{i}]"),
                    expected: d,
                    got: v.len(),
                });
            }
            for (c, &entry) in v.iter().enumerate() {
                if entry.abs() > MAX_JUMP_ABS {
                    return Err(ModelError::JumpOutOfRange {
                        path: format!("jumps[{i}][{c}]"),
                        value: entry,
                    });
                }
            }
        }
        for i in 0..jumps.len() {
            for j in (i + 1)..jumps.len() {
                if jumps[i] == jumps[j] {
                    return Err(ModelError::DuplicateJump {
                        first: i,
                        second: j,
                    });
                }
            }
        }
        if q.len() != n {
            return Err(ModelError::DimensionMismatch {
                path: "q".into(),
                expected: n,
                got: q.len(),
            });
        }
        for (i, row) in q.iter().enumerate() {
            if row.len() != jumps.len() {
                return Err(ModelError::DimensionMismatch {
                    path: format!("q[{i}]"),
                    expected: jumps.len(),
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::Parse {
                        path: format!("q[{i}][{j}]"),
                        detail: "entry is not a finite number".into(),
                    });
                }
                if v < 0.0 {
                    return Err(ModelError::NegativeEntry {
                        matrix: "q",
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ModelError::NonStochasticRow {
                    matrix: "q",
                    row: i,
                    sum,
                });
            }
        }
        Ok(ModelSpec {
            d,
            alphabet,
            p,
            jumps,
            q,
        })
    }

    /// Parse and validate a model-spec JSON document.
    ///
    /// Schema: an object with fields `d` (positive integer), `alphabet`
    /// (array of strings), `p` (array of rows of numbers), `jumps` (array of
    /// length-`d` integer arrays) and `q` (array of rows aligned with
    /// `jumps`). Errors cite the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Parse {
                path: "(document)".into(),
                detail: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| ModelError::Parse {
            path: "(document)".into(),
            detail: "expected a JSON object".into(),
        })?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "d" | "alphabet" | "p" | "jumps" | "q") {
                return Err(ModelError::Parse {
                    path: key.clone(),
                    detail: "unknown field".into(),
                });
            }
        }
        let d = parse_usize(obj, "d")?;
        let alphabet = parse_string_array(obj, "alphabet")?;
        let p = parse_number_rows(obj, "p")?;
        let jumps = parse_integer_rows(obj, "jumps")?;
        let q = parse_number_rows(obj, "q")?;
        ModelSpec::new(d, alphabet, p, jumps, q)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// SHA-256 over the canonical JSON form, as lowercase hex.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical =
            serde_json::to_string(self).expect("model serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in hash {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn num_states(&self) -> usize {
        self.alphabet.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn jumps(&self) -> &[Vec<i64>] {
        &self.jumps
    }

    pub fn num_jumps(&self) -> usize {
        self.jumps.len()
    }

    pub fn jump_distributions(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn jump_prob(&self, state: usize, jump: usize) -> f64 {
        self.q[state][jump]
    }

    /// Largest `|v_i|` over all jump vectors and coordinates.
    pub fn max_jump_norm(&self) -> i64 {
        self.jumps
            .iter()
            .flat_map(|v| v.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0)
    }
}

fn get_field<'v>(
    obj: &'v serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<&'v serde_json::Value, ModelError> {
    obj.get(key).ok_or_else(|| ModelError::Parse {
        path: key.into(),
        detail: "missing field".into(),
    })
}

fn parse_usize(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<usize, ModelError> {
    get_field(obj, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| ModelError::Parse {
            path: key.into(),
            detail: "expected a nonnegative integer".into(),
        })
}

fn parse_string_array(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<Vec<String>, ModelError> {
    let arr = get_field(obj, key)?
        .as_array()
        .ok_or_else(|| ModelError::Parse {
            path: key.into(),
            detail: "expected an array".into(),
        })?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str().map(String::from).ok_or_else(|| ModelError::Parse {
                path: format!("{key}[{i}]"),
                detail: "expected a string".into(),
            })
        })
        .collect()
}

fn parse_number_rows(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let arr = get_field(obj, key)?
        .as_array()
        .ok_or_else(|| ModelError::Parse {
            path: key.into(),
            detail: "expected an array of rows".into(),
        })?;
    arr.iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.as_array().ok_or_else(|| ModelError::Parse {
                path: format!("{key}[{i}]"),
                detail: "expected an array of numbers".into(),
            })?;
            row.iter()
                .enumerate()
                .map(|(j, v)| {
                    v.as_f64().ok_or_else(|| ModelError::Parse {
                        path: format!("{key}[{i}][{j}]"),
                        detail: "expected a number".into(),
                    })
                })
                .collect()
        })
        .collect()
}

fn parse_integer_rows(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<Vec<Vec<i64>>, ModelError> {
    let arr = get_field(obj, key)?
        .as_array()
        .ok_or_else(|| ModelError::Parse {
            path: key.into(),
            detail: "expected an array of integer vectors".into(),
        })?;
    arr.iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.as_array().ok_or_else(|| ModelError::Parse {
                path: format!("{key}[{i}]"),
                detail: "expected an array of integers".into(),
            })?;
            row.iter()
                .enumerate()
                .map(|(j, v)| {
                    v.as_i64().ok_or_else(|| ModelError::Parse {
                        path: format!("{key}[{i}][{j}]"),
                        detail: "expected an integer".into(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Stationary distribution of a row-stochastic, entrywise-positive matrix.
///
/// Direct solve of `π(p − I) = 0, Σπ = 1`, then fixed-point refinement until
/// `‖π·p − π‖∞ ≤ 1e-12`.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    let n = p.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    // Solve Mᵀ x = e_n where M = (p − I) with its last column replaced by 1.
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if j == n - 1 {
                1.0
            } else {
                p[i][j] - if i == j { 1.0 } else { 0.0 }
            };
            m[(j, i)] = v;
        }
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let mut pi: Vec<f64> = match m.lu().solve(&rhs) {
        Some(x) => x.iter().copied().collect(),
        None => vec![1.0 / n as f64; n],
    };
    // Refinement also recovers from a singular or ill-conditioned solve.
    let mut residual = f64::INFINITY;
    for iter in 0..10_000 {
        let next = row_vec_times(&pi, p);
        let norm: f64 = next.iter().sum();
        let next: Vec<f64> = next.iter().map(|v| v / norm).collect();
        residual = pi
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if residual <= STATIONARY_TOL && pi.iter().all(|&v| v > 0.0) {
            return Ok(pi);
        }
        if iter > 64 && residual <= STATIONARY_TOL {
            break;
        }
    }
    Err(ModelError::NoConvergence {
        what: "stationary distribution",
        iterations: 10_000,
        residual,
    })
}

fn row_vec_times(v: &[f64], p: &[Vec<f64>]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for (i, &vi) in v.iter().enumerate() {
        let row = &p[i];
        for j in 0..n {
            out[j] += vi * row[j];
        }
    }
    out
}

/// Modulus of the second-largest eigenvalue of a stochastic matrix.
pub fn second_eigenvalue_modulus(p: &[Vec<f64>]) -> f64 {
    let n = p.len();
    if n == 1 {
        return 0.0;
    }
    let m = DMatrix::from_fn(n, n, |i, j| p[i][j]);
    let mut moduli: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .collect();
    moduli.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    moduli[1].min(1.0)
}

/// Least-squares fit of `ln(max_ab |p(k)_ab − π_b|) = ln C + k·ln(rate)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PowerDecayFit {
    pub c: f64,
    pub rate: f64,
    /// Number of k values that carried signal above the noise floor.
    pub points_used: usize,
}

/// Immutable spectral and multi-step analysis of the site chain.
///
/// The power cache is fully populated at construction (up to the π-cutoff,
/// subject to a memory budget), so a `ChainAnalysis` can be shared freely
/// across threads without interior synchronization.
#[derive(Debug)]
pub struct ChainAnalysis {
    model: Arc<ModelSpec>,
    pi: Vec<f64>,
    pi_cumulative: Vec<f64>,
    lambda: f64,
    /// Gaps ≥ cutoff use the stationary row directly.
    cutoff: usize,
    /// powers[k-1] = p^k, row-major, for k = 1..=cached.
    powers: Vec<Vec<f64>>,
    /// Cumulative sums of each cached power row, for inverse-CDF sampling.
    powers_cumulative: Vec<Vec<f64>>,
    /// Cumulative sums of the q rows.
    q_cumulative: Vec<Vec<f64>>,
}

impl ChainAnalysis {
    pub fn new(model: Arc<ModelSpec>) -> Result<Self, ModelError> {
        let p = model.transition();
        let n = model.num_states();
        let pi = stationary_distribution(p)?;
        let lambda = second_eigenvalue_modulus(p);

        let cutoff = if lambda <= 0.0 {
            1
        } else {
            (PI_CUTOFF_EPS.ln() / lambda.ln()).ceil() as usize
        };
        let budget_powers = (POWER_CACHE_BUDGET / (n * n)).max(16);
        let cached = cutoff.min(budget_powers);

        let mut powers: Vec<Vec<f64>> = Vec::with_capacity(cached);
        let mut flat_p = vec![0.0; n * n];
        for i in 0..n {
            flat_p[i * n..(i + 1) * n].copy_from_slice(&p[i]);
        }
        powers.push(flat_p.clone());
        for _ in 1..cached {
            let prev = powers.last().expect("nonempty");
            powers.push(mat_mul(prev, &flat_p, n));
        }
        let powers_cumulative = powers.iter().map(|m| cumulative_rows(m, n)).collect();
        let pi_cumulative = cumulative(&pi);
        let q_cumulative = model
            .jump_distributions()
            .iter()
            .map(|row| cumulative(row))
            .collect();

        Ok(ChainAnalysis {
            model,
            pi,
            pi_cumulative,
            lambda,
            cutoff,
            powers,
            powers_cumulative,
            q_cumulative,
        })
    }

    pub fn model(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Gap beyond which `p(k)` rows are returned as `π`.
    pub fn pi_cutoff(&self) -> usize {
        self.cutoff
    }

    /// The k-step transition matrix `p^k`, row-major.
    pub fn k_step(&self, k: usize) -> Cow<'_, [f64]> {
        assert!(k >= 1, "k_step requires k >= 1");
        let n = self.model.num_states();
        if k <= self.powers.len() {
            return Cow::Borrowed(&self.powers[k - 1]);
        }
        if k >= self.cutoff {
            let mut rows = vec![0.0; n * n];
            for i in 0..n {
                rows[i * n..(i + 1) * n].copy_from_slice(&self.pi);
            }
            return Cow::Owned(rows);
        }
        Cow::Owned(self.power_by_squaring(k))
    }

    /// Row `a` of `p^gap`: the state distribution after `gap` unobserved
    /// steps from state `a`.
    pub fn transition_row(&self, state: usize, gap: usize) -> Cow<'_, [f64]> {
        assert!(gap >= 1, "transition_row requires gap >= 1");
        let n = self.model.num_states();
        if gap <= self.powers.len() {
            let m = &self.powers[gap - 1];
            return Cow::Borrowed(&m[state * n..(state + 1) * n]);
        }
        if gap >= self.cutoff {
            return Cow::Borrowed(&self.pi);
        }
        let m = self.power_by_squaring(gap);
        Cow::Owned(m[state * n..(state + 1) * n].to_vec())
    }

    /// Draw the state after `gap` unobserved steps from `prev`, by
    /// inverse-CDF on a cached cumulative row. `u` must be in [0, 1).
    #[inline]
    pub fn sample_state(&self, prev: usize, gap: usize, u: f64) -> usize {
        let n = self.model.num_states();
        if gap >= 1 && gap <= self.powers_cumulative.len() {
            let row = &self.powers_cumulative[gap - 1][prev * n..(prev + 1) * n];
            return inverse_cdf(row, u);
        }
        if gap >= self.cutoff {
            return inverse_cdf(&self.pi_cumulative, u);
        }
        let row = self.transition_row(prev, gap);
        inverse_cdf_probs(&row, u)
    }

    #[inline]
    pub fn sample_stationary(&self, u: f64) -> usize {
        inverse_cdf(&self.pi_cumulative, u)
    }

    /// Draw a jump index from `q[state]`. `u` must be in [0, 1).
    #[inline]
    pub fn sample_jump(&self, state: usize, u: f64) -> usize {
        inverse_cdf(&self.q_cumulative[state], u)
    }

    fn power_by_squaring(&self, k: usize) -> Vec<f64> {
        let n = self.model.num_states();
        let base = &self.powers[0];
        let mut result: Option<Vec<f64>> = None;
        let mut sq = base.clone();
        let mut rem = k;
        loop {
            if rem & 1 == 1 {
                result = Some(match result {
                    Some(r) => mat_mul(&r, &sq, n),
                    None => sq.clone(),
                });
            }
            rem >>= 1;
            if rem == 0 {
                break;
            }
            sq = mat_mul(&sq, &sq, n);
        }
        result.expect("k >= 1")
    }

    /// Fit the geometric decay of `max_ab |p(k)_ab − π_b|` over `k = 1..=k_max`.
    pub fn fit_power_decay(&self, k_max: usize) -> PowerDecayFit {
        let n = self.model.num_states();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 1..=k_max {
            let m = self.k_step(k);
            let mut dev: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    dev = dev.max((m[i * n + j] - self.pi[j]).abs());
                }
            }
            if dev > 1e-280 {
                xs.push(k as f64);
                ys.push(dev.ln());
            }
        }
        if xs.len() < 2 {
            return PowerDecayFit {
                c: 0.0,
                rate: 0.0,
                points_used: xs.len(),
            };
        }
        let (intercept, slope) = linear_fit(&xs, &ys);
        PowerDecayFit {
            c: intercept.exp(),
            rate: slope.exp(),
            points_used: xs.len(),
        }
    }
}

/// Ordinary least squares for `y = a + b·x`; returns `(a, b)`.
pub(crate) fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let b = sxy / sxx;
    (my - b * mx, b)
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(row.len());
    for &v in row {
        acc += v;
        out.push(acc);
    }
    out
}

fn cumulative_rows(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for row in m.chunks(n) {
        out.extend(cumulative(row));
    }
    out
}

#[inline]
fn inverse_cdf(cumulative_row: &[f64], u: f64) -> usize {
    let last = cumulative_row.len() - 1;
    for (i, &c) in cumulative_row.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    last
}

#[inline]
fn inverse_cdf_probs(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let last = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> ModelSpec {
        ModelSpec::new(
            1,
            vec!["a".into(), "b".into()],
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![1], vec![-1]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .expect("valid model")
    }

    #[test]
    fn single_state_model_is_valid() {
        let m = ModelSpec::new(
            1,
            vec!["only".into()],
            vec![vec![1.0]],
            vec![vec![1]],
            vec![vec![1.0]],
        );
        assert!(m.is_ok());
    }

    #[test]
    fn two_state_rows_validate() {
        two_state();
    }

    #[test]
    fn zero_transition_entry_rejected() {
        let err = ModelSpec::new(
            1,
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![1], vec![-1]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::NonPositiveTransition { from: 0, to: 1, .. }
        ));
    }

    #[test]
    fn non_stochastic_row_rejected() {
        let err = ModelSpec::new(
            1,
            vec!["a".into()],
            vec![vec![0.9]],
            vec![vec![1]],
            vec![vec![1.0]],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::NonStochasticRow { matrix: "p", row: 0, .. }
        ));
    }

    #[test]
    fn duplicate_jump_rejected() {
        let err = ModelSpec::new(
            2,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![1, 0], vec![1, 0]],
            vec![vec![0.5, 0.5]],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DuplicateJump { first: 0, second: 1 }));
    }

    #[test]
    fn oversized_alphabet_rejected() {
        // 256 states x 257 jumps overflows the u16 symbol id space.
        let states = 256;
        let jumps: Vec<Vec<i64>> = (0..257).map(|j| vec![j]).collect();
        let p = vec![vec![1.0 / states as f64; states]; states];
        let q = vec![vec![1.0 / 257.0; 257]; states];
        let names = (0..states).map(|i| format!("s{i}")).collect();
        let err = ModelSpec::new(1, names, p, jumps, q).unwrap_err();
        assert!(matches!(
            err,
            ModelError::AlphabetTooLarge { states: 256, jumps: 257 }
        ));
    }

    #[test]
    fn oversized_jump_rejected() {
        let err = ModelSpec::new(
            1,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![MAX_JUMP_ABS + 1]],
            vec![vec![1.0]],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::JumpOutOfRange { .. }));
        assert!(ModelSpec::new(
            1,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![-MAX_JUMP_ABS]],
            vec![vec![1.0]],
        )
        .is_ok());
    }

    #[test]
    fn jump_dimension_mismatch_rejected() {
        let err = ModelSpec::new(
            2,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![1]],
            vec![vec![1.0]],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
    }

    #[test]
    fn json_parse_cites_field_path() {
        let text = r#"{"d": 1, "alphabet": ["a"], "p": [[1.0]], "jumps": [[1]], "q": [["x"]]}"#;
        let err = ModelSpec::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("q[0][0]"), "got: {err}");
    }

    #[test]
    fn json_round_trip() {
        let m = two_state();
        let text = m.to_json_string();
        let back = ModelSpec::from_json_str(&text).expect("round trip");
        assert_eq!(back.transition(), m.transition());
        assert_eq!(back.jumps(), m.jumps());
        assert_eq!(m.digest(), back.digest());
    }

    #[test]
    fn stationary_single_state() {
        assert_eq!(stationary_distribution(&[vec![1.0]]).unwrap(), vec![1.0]);
    }

    #[test]
    fn stationary_two_state_is_4_7_3_7() {
        let pi = stationary_distribution(two_state().transition()).unwrap();
        assert!((pi[0] - 4.0 / 7.0).abs() < 1e-12);
        assert!((pi[1] - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_symmetric_is_uniform() {
        let pi = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12);
        assert!((pi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_is_fixed_point() {
        let p = two_state();
        let pi = stationary_distribution(p.transition()).unwrap();
        let next = row_vec_times(&pi, p.transition());
        let residual = pi
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(residual <= 1e-10);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn second_eigenvalue_two_by_two_is_trace_minus_one() {
        assert!((second_eigenvalue_modulus(two_state().transition()) - 0.3).abs() < 1e-10);
        assert!(
            (second_eigenvalue_modulus(&[vec![0.9, 0.1], vec![0.1, 0.9]]) - 0.8).abs() < 1e-10
        );
    }

    #[test]
    fn second_eigenvalue_identical_rows_is_zero() {
        let lambda = second_eigenvalue_modulus(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert!(lambda.abs() < 1e-10);
    }

    #[test]
    fn k_step_one_is_p() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let m = chain.k_step(1);
        assert_eq!(&m[..], &[0.7, 0.3, 0.4, 0.6]);
    }

    #[test]
    fn k_step_two_entry_00_is_0_61() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let m = chain.k_step(2);
        assert!((m[0] - 0.61).abs() < 1e-14);
    }

    #[test]
    fn cached_powers_are_row_stochastic_and_consistent() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let n = 2;
        for k in 1..chain.powers.len() {
            let a = &chain.powers[k - 1];
            let b = &chain.powers[k];
            let step = mat_mul(a, &chain.powers[0], n);
            for (x, y) in step.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
            for row in b.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rows_converge_to_pi_at_rate_lambda() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let fit = chain.fit_power_decay(20);
        assert!(fit.points_used >= 15);
        let lambda = chain.lambda();
        assert!(
            (fit.rate - lambda).abs() <= 0.1 * lambda,
            "fitted rate {} vs lambda {}",
            fit.rate,
            lambda
        );
        // And the deviations themselves sit below the fitted envelope.
        for k in 1..=20 {
            let m = chain.k_step(k);
            let mut dev: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    dev = dev.max((m[i * 2 + j] - chain.pi()[j]).abs());
                }
            }
            assert!(dev <= 2.0 * fit.c * fit.rate.powi(k as i32) + 1e-14);
        }
    }

    #[test]
    fn beyond_cutoff_returns_pi_rows() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let k = chain.pi_cutoff() + 5;
        let m = chain.k_step(k);
        for row in m.chunks(2) {
            for (a, b) in row.iter().zip(chain.pi()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let row = chain.transition_row(1, k);
        for (a, b) in row.iter().zip(chain.pi()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn power_by_squaring_matches_iterated_product() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        let direct = chain.power_by_squaring(7);
        let cached = chain.k_step(7);
        for (a, b) in direct.iter().zip(cached.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn sampling_helpers_match_rows() {
        let chain = ChainAnalysis::new(Arc::new(two_state())).unwrap();
        // transition_row(0, 2) = (0.61, 0.39): u below 0.61 picks state 0.
        assert_eq!(chain.sample_state(0, 2, 0.60), 0);
        assert_eq!(chain.sample_state(0, 2, 0.62), 1);
        assert_eq!(chain.sample_stationary(0.5714), 0);
        assert_eq!(chain.sample_stationary(0.58), 1);
        assert_eq!(chain.sample_jump(0, 0.999), 0);
        assert_eq!(chain.sample_jump(1, 0.0), 1);
    }
}
