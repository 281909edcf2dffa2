//! Drift vector, Green-Kubo diffusion matrix, and the jump-support
//! degeneracy criterion.
//!
//! The diffusion matrix is the lag-covariance series
//! Var2 = C_0 + sum_{j>=1} (C_j + C_j^T) of the centered jump observable
//! under the stationary word measure. Truncation is certified by the
//! operator's contraction estimate: once ||C_j|| falls below a relative
//! tolerance, the dropped tail is bounded by ||C_J|| / (1 - gamma_hat).
//!
//! Degeneracy of Var2 is decided without numerics on measures: the walk has
//! a deterministic direction exactly when the supported jumps lie in a
//! proper affine subspace, which is integer linear algebra on the support
//! set.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::model::ModelSpec;
use crate::pathlaw::SymbolId;
use crate::transfer::{cross_moment, Operator, RPFAnalysis, TruncatedPastFunction};

/// Default truncation lag for the Green-Kubo sum.
pub const DEFAULT_J_MAX: usize = 200;
/// Default relative tolerance on ||C_j|| / ||C_0|| for truncation.
pub const DEFAULT_GK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LimitsError {
    #[error(
        "lag covariances have not decayed below {required:.3e} by lag {lag} \
         (||C_{lag}|| = {norm:.3e}); increase the depth or the lag budget"
    )]
    TailNotSmall {
        lag: usize,
        norm: f64,
        required: f64,
    },
    #[error("model has no supported jumps")]
    EmptySupport,
}

/// Outcome of the affine-hull test on the supported jump set.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degeneracy {
    /// The supported jumps affinely span all of R^d.
    PositiveDefinite,
    /// The supported jumps lie in a proper affine subspace.
    Certificate(DegeneracyCertificate),
}

impl Degeneracy {
    pub fn certificate(&self) -> Option<&DegeneracyCertificate> {
        match self {
            Degeneracy::PositiveDefinite => None,
            Degeneracy::Certificate(c) => Some(c),
        }
    }
}

/// Witness that every supported jump lies in `anchor + span(span)`.
///
/// `span` holds exact integer difference vectors; `normals` is an
/// orthonormal basis of the orthogonal complement, each vector oriented so
/// its largest-magnitude component is positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegeneracyCertificate {
    pub anchor: Vec<i64>,
    pub span: Vec<Vec<i64>>,
    pub normals: Vec<Vec<f64>>,
}

impl DegeneracyCertificate {
    /// The primary certified degenerate direction.
    pub fn normal(&self) -> &[f64] {
        &self.normals[0]
    }
}

/// Drift, diffusion matrix, and the diagnostics that certify them.
#[derive(Debug, Clone, Serialize)]
pub struct DiffusionReport {
    pub dimension: usize,
    pub depth: usize,
    pub gamma_hat: f64,
    /// Expected displacement per step.
    pub drift: Vec<f64>,
    /// Asymptotic covariance of S_n / sqrt(n), row-major d x d.
    pub var2: Vec<f64>,
    /// Lag covariances C_0..C_J, each row-major d x d.
    pub gk_terms: Vec<Vec<f64>>,
    /// Frobenius norms of `gk_terms`.
    pub lag_norms: Vec<f64>,
    /// Largest lag included in the sum.
    pub lags_used: usize,
    /// Geometric bound on the mass dropped beyond the last lag.
    pub tail_estimate: f64,
    pub tol: f64,
    pub degeneracy: Degeneracy,
}

impl DiffusionReport {
    pub fn var2_entry(&self, row: usize, col: usize) -> f64 {
        self.var2[row * self.dimension + col]
    }

    /// Eigenvalues of Var2 in ascending order.
    pub fn var2_eigenvalues(&self) -> Vec<f64> {
        let d = self.dimension;
        let m = DMatrix::from_row_slice(d, d, &self.var2);
        let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        ev
    }

    pub fn var2_frobenius(&self) -> f64 {
        self.var2.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Quadratic form w^T Var2 w.
    pub fn var2_quadratic_form(&self, w: &[f64]) -> f64 {
        let d = self.dimension;
        let mut out = 0.0;
        for r in 0..d {
            for c in 0..d {
                out += w[r] * self.var2[r * d + c] * w[c];
            }
        }
        out
    }
}

/// Expected displacement per step under the stationary word measure:
/// the jump observable integrated against the depth-1 marginal.
pub fn drift(rpf: &RPFAnalysis) -> Vec<f64> {
    let law = rpf.law();
    let alphabet = law.alphabet();
    let d = law.chain().model().dimension();
    let newest = rpf.marginal(1);
    let mut bv = vec![0.0; d];
    for (s, &mass) in newest.iter().enumerate() {
        for (c, &v) in alphabet.displacement(s as SymbolId).iter().enumerate() {
            bv[c] += mass * v as f64;
        }
    }
    bv
}

/// Sum the lag-covariance series of the centered jump observable until
/// ||C_j|| < tol * ||C_0|| or `j_max` lags have been used.
///
/// `op` must be the operator `rpf` was computed from. The per-lag cost is
/// one operator application: the lagged function is advanced incrementally
/// rather than recomputed from scratch.
pub fn green_kubo(
    op: &Operator,
    rpf: &RPFAnalysis,
    j_max: usize,
    tol: f64,
) -> Result<DiffusionReport, LimitsError> {
    assert!(j_max >= 1, "green_kubo requires j_max >= 1");
    assert_eq!(op.depth(), rpf.depth(), "operator and fixed point disagree");
    let law = rpf.law();
    let model = law.chain().model();
    let d = model.dimension();
    let bv = drift(rpf);

    let mut g = op.lift(&TruncatedPastFunction::jump_function(law));
    for chunk in g.values_mut().chunks_mut(d) {
        for (value, mean) in chunk.iter_mut().zip(&bv) {
            *value -= mean;
        }
    }

    let c0 = cross_moment(rpf, &g, &g);
    let c0_norm = frobenius(&c0);
    let mut var2 = c0.clone();
    let mut gk_terms = vec![flatten(&c0)];
    let mut lag_norms = vec![c0_norm];
    let gamma = rpf.gamma_hat();
    let mut lags_used = 0;
    let mut tail_estimate = 0.0;

    // A deterministic jump has C_0 = 0 and nothing to sum.
    if c0_norm > 0.0 {
        let threshold = tol * c0_norm;
        let mut h = g.clone();
        let mut converged = false;
        for lag in 1..=j_max {
            h = op.apply(&h);
            let cj = cross_moment(rpf, &g, &h);
            let nj = frobenius(&cj);
            for r in 0..d {
                for c in 0..d {
                    var2[r][c] += cj[r][c] + cj[c][r];
                }
            }
            gk_terms.push(flatten(&cj));
            lag_norms.push(nj);
            lags_used = lag;
            if nj < threshold {
                converged = true;
                break;
            }
        }
        let last = *lag_norms.last().expect("nonempty");
        tail_estimate = if gamma < 1.0 {
            last / (1.0 - gamma)
        } else {
            f64::INFINITY
        };
        if !converged {
            return Err(LimitsError::TailNotSmall {
                lag: j_max,
                norm: last,
                required: threshold,
            });
        }
    }

    // C_j + C_j^T contributions are symmetric by commutativity, so only
    // C_0's rounding dust needs symmetrizing.
    let mut flat = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            let avg = 0.5 * (var2[r][c] + var2[c][r]);
            debug_assert!((var2[r][c] - var2[c][r]).abs() <= 1e-10 * (1.0 + c0_norm));
            flat[r * d + c] = avg;
        }
    }

    Ok(DiffusionReport {
        dimension: d,
        depth: rpf.depth(),
        gamma_hat: gamma,
        drift: bv,
        var2: flat,
        gk_terms,
        lag_norms,
        lags_used,
        tail_estimate,
        tol,
        degeneracy: degeneracy_check(model)?,
    })
}

/// Decide whether the supported jumps affinely span R^d.
///
/// With V = { v : q_{a,v} > 0 for some a }, computes the exact rank of
/// { v - v_0 : v in V }. Rank d certifies a nondegenerate diffusion matrix;
/// otherwise the affine hull and its normal directions are returned.
pub fn degeneracy_check(model: &ModelSpec) -> Result<Degeneracy, LimitsError> {
    let d = model.dimension();
    let support: Vec<&Vec<i64>> = model
        .jumps()
        .iter()
        .enumerate()
        .filter(|(j, _)| (0..model.num_states()).any(|a| model.jump_prob(a, *j) > 0.0))
        .map(|(_, v)| v)
        .collect();
    let Some(&anchor) = support.first() else {
        return Err(LimitsError::EmptySupport);
    };
    let diffs: Vec<Vec<i64>> = support[1..]
        .iter()
        .map(|v| v.iter().zip(anchor).map(|(a, b)| a - b).collect())
        .collect();

    let (rank, pivots) =
        try_integer_rank(&diffs).unwrap_or_else(|| float_rank(&diffs));
    if rank == d {
        return Ok(Degeneracy::PositiveDefinite);
    }
    let span: Vec<Vec<i64>> = pivots.iter().map(|&i| diffs[i].clone()).collect();
    Ok(Degeneracy::Certificate(DegeneracyCertificate {
        anchor: anchor.clone(),
        normals: normal_space(&span, d),
        span,
    }))
}

fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter()
        .flat_map(|row| row.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flat_map(|row| row.iter().copied()).collect()
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact rank of an integer matrix plus the indices of a row subset that
/// realizes it, by fraction-free elimination. `None` if an intermediate
/// product would overflow `i128` (practically unreachable given the jump
/// magnitude cap, but checked rather than assumed).
fn try_integer_rank(rows: &[Vec<i64>]) -> Option<(usize, Vec<usize>)> {
    let m = rows.len();
    if m == 0 {
        return Some((0, Vec::new()));
    }
    let d = rows[0].len();
    let mut a: Vec<Vec<i128>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as i128).collect())
        .collect();
    let mut origin: Vec<usize> = (0..m).collect();
    let mut rank = 0;
    let mut pivots = Vec::new();
    for col in 0..d {
        let Some(pivot) = (rank..m).find(|&r| a[r][col] != 0) else {
            continue;
        };
        a.swap(rank, pivot);
        origin.swap(rank, pivot);
        pivots.push(origin[rank]);
        let (pivot_rows, rest) = a.split_at_mut(rank + 1);
        let lead_row = &pivot_rows[rank];
        for row in rest.iter_mut() {
            if row[col] == 0 {
                continue;
            }
            let g = gcd(lead_row[col].abs(), row[col].abs());
            let lead = lead_row[col] / g;
            let elim = row[col] / g;
            for (x, &base) in row[col..].iter_mut().zip(&lead_row[col..]) {
                *x = x.checked_mul(lead)?.checked_sub(base.checked_mul(elim)?)?;
            }
            let reduce = row[col..].iter().fold(0i128, |acc, &x| gcd(acc, x.abs()));
            if reduce > 1 {
                for x in &mut row[col..] {
                    *x /= reduce;
                }
            }
        }
        rank += 1;
        if rank == m {
            break;
        }
    }
    Some((rank, pivots))
}

/// Pivoted Gaussian elimination fallback with a relative threshold.
fn float_rank(rows: &[Vec<i64>]) -> (usize, Vec<usize>) {
    let m = rows.len();
    if m == 0 {
        return (0, Vec::new());
    }
    let d = rows[0].len();
    let mut a: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |acc, &x| acc.max(x.abs()));
    let tol = 1e-9 * scale;
    let mut origin: Vec<usize> = (0..m).collect();
    let mut rank = 0;
    let mut pivots = Vec::new();
    for col in 0..d {
        let Some((pivot, mag)) = (rank..m)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).expect("finite"))
        else {
            break;
        };
        if mag <= tol {
            continue;
        }
        a.swap(rank, pivot);
        origin.swap(rank, pivot);
        pivots.push(origin[rank]);
        let (pivot_rows, rest) = a.split_at_mut(rank + 1);
        let lead_row = &pivot_rows[rank];
        for row in rest.iter_mut() {
            let factor = row[col] / lead_row[col];
            for (x, &base) in row[col..].iter_mut().zip(&lead_row[col..]) {
                *x -= factor * base;
            }
        }
        rank += 1;
        if rank == m {
            break;
        }
    }
    (rank, pivots)
}

/// Orthonormal basis of the orthogonal complement of the row space of
/// `span` (rank known exactly), via the Gram matrix's small eigenvectors.
fn normal_space(span: &[Vec<i64>], d: usize) -> Vec<Vec<f64>> {
    let rank = span.len();
    if rank == 0 {
        return (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect();
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for row in span {
        for i in 0..d {
            for j in 0..d {
                gram[(i, j)] += row[i] as f64 * row[j] as f64;
            }
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("finite eigenvalues")
    });
    order
        .into_iter()
        .take(d - rank)
        .map(|k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            orient(&mut v);
            v
        })
        .collect()
}

/// Flip sign so the largest-magnitude component is positive.
fn orient(v: &mut [f64]) {
    let mut idx = 0;
    let mut best = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChainAnalysis;
    use crate::pathlaw::PathLaw;
    use crate::presets;
    use std::sync::Arc;

    fn pipeline(model: ModelSpec, depth: usize) -> (Operator, RPFAnalysis) {
        let chain = Arc::new(ChainAnalysis::new(Arc::new(model)).expect("valid chain"));
        let law = Arc::new(PathLaw::new(chain));
        let op = Operator::new(law, depth).expect("depth in range");
        let rpf = op.rpf_fixed_point(1e-15).expect("fixed point converges");
        (op, rpf)
    }

    fn report(model: ModelSpec, depth: usize) -> DiffusionReport {
        let (op, rpf) = pipeline(model, depth);
        green_kubo(&op, &rpf, DEFAULT_J_MAX, DEFAULT_GK_TOL).expect("series converges")
    }

    #[test]
    fn iid_drift_and_variance_are_exact() {
        let r = report(presets::iid_d1(), 6);
        assert!((r.drift[0] - 0.5).abs() < 1e-14, "drift {}", r.drift[0]);
        assert!((r.var2[0] - 0.75).abs() < 1e-14, "var2 {}", r.var2[0]);
        // Independence kills every lag immediately.
        assert_eq!(r.lags_used, 1);
        assert!(r.lag_norms[1] <= 1e-15);
        assert!(r.tail_estimate <= 1e-15);
        assert_eq!(r.degeneracy, Degeneracy::PositiveDefinite);
    }

    #[test]
    fn deterministic_jump_has_zero_variance() {
        let r = report(presets::constant_jump(), 4);
        assert_eq!(r.drift, vec![1.0]);
        assert_eq!(r.var2, vec![0.0]);
        assert_eq!(r.lags_used, 0);
        assert_eq!(r.gk_terms.len(), 1);
        assert_eq!(r.tail_estimate, 0.0);
        // A single supported jump spans a 0-dimensional affine subspace.
        let cert = r.degeneracy.certificate().expect("degenerate");
        assert_eq!(cert.anchor, vec![1]);
        assert!(cert.span.is_empty());
        assert_eq!(cert.normals, vec![vec![1.0]]);
    }

    #[test]
    fn env_independent_walk_matches_iid_control() {
        let r = report(presets::env_independent(), 6);
        assert!((r.drift[0] - 0.5).abs() < 1e-13);
        assert!((r.var2[0] - 0.75).abs() < 1e-13);
    }

    #[test]
    fn two_state_drift_and_variance_match_reference() {
        let r = report(presets::two_state(), 10);
        // Depth-14 operator values, stable to the shown digits.
        assert!(
            (r.drift[0] - 0.136123859951).abs() < 1e-8,
            "drift {}",
            r.drift[0]
        );
        assert!(
            (r.var2[0] - 0.981302701343).abs() < 1e-7,
            "var2 {}",
            r.var2[0]
        );
        assert!((r.lag_norms[1] - 4.6216487e-2).abs() < 1e-6);
        assert!(r.lags_used >= 5 && r.lags_used <= 40, "lags {}", r.lags_used);
        assert!(r.tail_estimate < 1e-9);
        assert_eq!(r.degeneracy, Degeneracy::PositiveDefinite);
    }

    #[test]
    fn lag_norms_decay_geometrically() {
        // Individual norms oscillate with the sign structure of the
        // subleading spectrum, so the geometric statement is about the
        // envelope: block maxima must fall by a fixed factor per block.
        for (model, depth) in [(presets::two_state(), 10), (presets::full2d(), 6)] {
            let r = report(model, depth);
            let floor = 1e-8 * r.lag_norms[0];
            let blocks: Vec<f64> = r.lag_norms[1..]
                .chunks(4)
                .map(|b| b.iter().fold(0.0f64, |m, &v| m.max(v)))
                .collect();
            let mut checked = 0;
            for pair in blocks.windows(2) {
                if pair[0] < floor {
                    break;
                }
                assert!(
                    pair[1] <= 0.7 * pair[0],
                    "block maxima {} -> {}",
                    pair[0],
                    pair[1]
                );
                checked += 1;
            }
            assert!(checked >= 2, "not enough lags to confirm decay");
        }
    }

    #[test]
    fn tri_d2_variance_is_the_exact_jump_covariance() {
        // i.i.d. planar walk: Var2 = Cov(v) with Ev = (0.3, 0.1).
        let r = report(presets::tri_d2(), 6);
        assert!((r.drift[0] - 0.3).abs() < 1e-13);
        assert!((r.drift[1] - 0.1).abs() < 1e-13);
        let expected = [0.61, 0.17, 0.17, 0.49];
        for (got, want) in r.var2.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "var2 {:?}", r.var2);
        }
        assert_eq!(r.degeneracy, Degeneracy::PositiveDefinite);
    }

    #[test]
    fn full2d_variance_is_symmetric_positive_definite() {
        let r = report(presets::full2d(), 6);
        assert_eq!(r.var2[1], r.var2[2]);
        let ev = r.var2_eigenvalues();
        assert!(ev[0] > 0.05, "eigenvalues {ev:?}");
        assert_eq!(r.degeneracy, Degeneracy::PositiveDefinite);
    }

    #[test]
    fn line2d_normal_direction_annihilates_var2() {
        let r = report(presets::line2d(), 8);
        let cert = r.degeneracy.certificate().expect("collinear support");
        assert_eq!(cert.anchor, vec![1, 0]);
        assert_eq!(cert.span, vec![vec![-2, 0]]);
        let w = cert.normal();
        assert!((w[0]).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12, "w {w:?}");
        let q = r.var2_quadratic_form(&[w[0], w[1]]);
        assert!(q.abs() <= 1e-8 * r.var2_frobenius(), "w^T Var2 w = {q}");
        // The x marginal is the two_state walk.
        assert!((r.drift[0] - 0.1361238).abs() < 1e-6);
        assert!(r.drift[1].abs() < 1e-14);
        assert!((r.var2_entry(0, 0) - 0.9813027).abs() < 1e-6);
        let ev = r.var2_eigenvalues();
        assert!(ev[0] >= -1e-9, "eigenvalues {ev:?}");
    }

    #[test]
    fn scaling_jumps_scales_drift_linearly_and_var2_quadratically() {
        let base = report(presets::two_state(), 8);
        let doubled = ModelSpec::new(
            1,
            vec!["a".into(), "b".into()],
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![2], vec![-2]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let scaled = report(doubled, 8);
        assert!((scaled.drift[0] - 2.0 * base.drift[0]).abs() < 1e-12);
        assert!((scaled.var2[0] - 4.0 * base.var2[0]).abs() < 1e-12);
    }

    #[test]
    fn truncation_tolerance_bounds_the_dropped_mass() {
        let (op, rpf) = pipeline(presets::two_state(), 10);
        let coarse = green_kubo(&op, &rpf, DEFAULT_J_MAX, 1e-8).unwrap();
        let fine = green_kubo(&op, &rpf, DEFAULT_J_MAX, 1e-13).unwrap();
        assert!(coarse.lags_used < fine.lags_used);
        assert!((coarse.var2[0] - fine.var2[0]).abs() <= 5e-8 * coarse.lag_norms[0]);
    }

    #[test]
    fn insufficient_lag_budget_is_reported() {
        let (op, rpf) = pipeline(presets::two_state(), 10);
        let err = green_kubo(&op, &rpf, 5, 1e-10).unwrap_err();
        match err {
            LimitsError::TailNotSmall { lag, norm, .. } => {
                assert_eq!(lag, 5);
                assert!(norm > 1e-10);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn degeneracy_check_on_presets() {
        assert_eq!(
            degeneracy_check(&presets::two_state()).unwrap(),
            Degeneracy::PositiveDefinite
        );
        assert_eq!(
            degeneracy_check(&presets::tri_d2()).unwrap(),
            Degeneracy::PositiveDefinite
        );
        let cert = match degeneracy_check(&presets::line2d()).unwrap() {
            Degeneracy::Certificate(c) => c,
            other => panic!("expected certificate, got {other:?}"),
        };
        assert_eq!(cert.anchor, vec![1, 0]);
        assert_eq!(cert.span, vec![vec![-2, 0]]);
        assert_eq!(cert.normals.len(), 1);
    }

    #[test]
    fn zero_probability_jumps_do_not_count_as_support() {
        // Three jumps, but the off-axis one has weight zero in every state.
        let model = ModelSpec::new(
            2,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![1, 0], vec![-1, 0], vec![0, 1]],
            vec![vec![0.5, 0.5, 0.0]],
        )
        .unwrap();
        let cert = match degeneracy_check(&model).unwrap() {
            Degeneracy::Certificate(c) => c,
            other => panic!("expected certificate, got {other:?}"),
        };
        assert_eq!(cert.normals, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn point_support_in_the_plane_has_two_normals() {
        let model = ModelSpec::new(
            2,
            vec!["a".into()],
            vec![vec![1.0]],
            vec![vec![2, 3]],
            vec![vec![1.0]],
        )
        .unwrap();
        let cert = match degeneracy_check(&model).unwrap() {
            Degeneracy::Certificate(c) => c,
            other => panic!("expected certificate, got {other:?}"),
        };
        assert_eq!(cert.anchor, vec![2, 3]);
        assert!(cert.span.is_empty());
        assert_eq!(cert.normals, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn rank_helpers_agree_on_a_skewed_matrix() {
        let rows = vec![
            vec![2, 4, 6],
            vec![1, 2, 3],
            vec![0, 1, 1],
            vec![3, 7, 10],
        ];
        let (exact, exact_pivots) = try_integer_rank(&rows).unwrap();
        let (float, float_pivots) = float_rank(&rows);
        assert_eq!(exact, 2);
        assert_eq!(float, 2);
        assert_eq!(exact_pivots.len(), 2);
        assert_eq!(float_pivots.len(), 2);
        // Row 1 is half of row 0 and row 3 is row 0 + row 2.
        assert_eq!(exact_pivots[0], 0);
        assert!(exact_pivots[1] == 2 || exact_pivots[1] == 3);
    }

    #[test]
    fn report_serializes_with_certificate() {
        let r = report(presets::line2d(), 4);
        let value = serde_json::to_value(&r).unwrap();
        assert!(value["drift"].is_array());
        assert_eq!(value["var2"].as_array().unwrap().len(), 4);
        assert_eq!(value["degeneracy"]["kind"], "certificate");
        assert!(value["degeneracy"]["normals"].is_array());
        assert_eq!(value["lag_norms"].as_array().unwrap().len(), r.gk_terms.len());

        let pd = report(presets::iid_d1(), 4);
        let value = serde_json::to_value(&pd).unwrap();
        assert_eq!(value["degeneracy"]["kind"], "positive_definite");
    }
}
