//! Reference models shared by tests, examples, and the CLI documentation.
//!
//! Every preset is small enough to enumerate or analyze exactly, and each one
//! exists to pin down a distinct regime: a genuinely Markovian environment, an
//! i.i.d. control, an environment-independent walk, full-rank and degenerate
//! jump supports, and a deterministic walk with zero variance.

use crate::model::ModelSpec;

fn build(
    d: usize,
    alphabet: Vec<String>,
    p: Vec<Vec<f64>>,
    jumps: Vec<Vec<i64>>,
    q: Vec<Vec<f64>>,
) -> ModelSpec {
    ModelSpec::new(d, alphabet, p, jumps, q).expect("preset models are valid by construction")
}

/// Two-state chain, state-determined unit jumps: state `a` always steps +1,
/// state `b` always steps −1. Second eigenvalue 0.3. The main worked example.
pub fn two_state() -> ModelSpec {
    build(
        1,
        vec!["a".into(), "b".into()],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![1], vec![-1]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )
}

/// Single-state control: steps are i.i.d. ±1 with P(+1) = 0.75.
/// Drift 0.5 and variance 0.75 exactly; every mixing diagnostic degenerates.
pub fn iid_d1() -> ModelSpec {
    build(
        1,
        vec!["only".into()],
        vec![vec![1.0]],
        vec![vec![1], vec![-1]],
        vec![vec![0.75, 0.25]],
    )
}

/// Two-state chain whose jump distribution ignores the state. The walk is
/// i.i.d. even though the environment mixes slowly.
pub fn env_independent() -> ModelSpec {
    build(
        1,
        vec!["a".into(), "b".into()],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![1], vec![-1]],
        vec![vec![0.75, 0.25], vec![0.75, 0.25]],
    )
}

/// Planar i.i.d. walk on three jumps whose support affinely spans the plane.
pub fn tri_d2() -> ModelSpec {
    build(
        2,
        vec!["only".into()],
        vec![vec![1.0]],
        vec![vec![1, 0], vec![0, 1], vec![-1, -1]],
        vec![vec![0.5, 0.3, 0.2]],
    )
}

/// Planar two-state model with state-dependent weights on a full-rank jump
/// support; the richest preset, used for the d = 2 limit-theorem checks.
pub fn full2d() -> ModelSpec {
    build(
        2,
        vec!["a".into(), "b".into()],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![1, 0], vec![0, 1], vec![-1, -1]],
        vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]],
    )
}

/// Planar embedding of [`two_state`]: all supported jumps lie on the x-axis,
/// so the vertical direction is degenerate.
pub fn line2d() -> ModelSpec {
    build(
        2,
        vec!["a".into(), "b".into()],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![1, 0], vec![-1, 0]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )
}

/// Deterministic walk: one state, one jump. Drift 1, variance 0.
pub fn constant_jump() -> ModelSpec {
    build(
        1,
        vec!["only".into()],
        vec![vec![1.0]],
        vec![vec![1]],
        vec![vec![1.0]],
    )
}

/// All presets with their canonical names, for fixtures and round-trip tests.
pub fn all() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("two_state", two_state()),
        ("iid_d1", iid_d1()),
        ("env_independent", env_independent()),
        ("tri_d2", tri_d2()),
        ("full2d", full2d()),
        ("line2d", line2d()),
        ("constant_jump", constant_jump()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_construct_and_digest_uniquely() {
        let all = all();
        assert_eq!(all.len(), 7);
        let mut digests: Vec<String> = all.iter().map(|(_, m)| m.digest()).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), all.len(), "digest collision between presets");
    }

    #[test]
    fn presets_round_trip_through_json() {
        for (name, model) in all() {
            let text = model.to_json_string();
            let back = ModelSpec::from_json_str(&text).unwrap_or_else(|e| {
                panic!("preset {name} failed to round-trip: {e}");
            });
            assert_eq!(back.digest(), model.digest(), "digest drift for {name}");
        }
    }
}
