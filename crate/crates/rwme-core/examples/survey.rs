//! Numeric survey of operator quantities across depths; used while pinning
//! test tolerances and handy when eyeballing a new model.

use std::sync::Arc;

use rwme_core::model::{ChainAnalysis, ModelSpec};
use rwme_core::pathlaw::{PathLaw, SymbolId};
use rwme_core::transfer::{
    absolute_continuity_check, conditional_expectation, lagged_covariance, Operator,
    TruncatedPastFunction,
};

fn main() {
    let model = ModelSpec::new(
        1,
        vec!["a".into(), "b".into()],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![1], vec![-1]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap();
    let chain = Arc::new(ChainAnalysis::new(Arc::new(model)).unwrap());
    let law = Arc::new(PathLaw::new(chain));
    println!("lambda = {}", law.chain().lambda());

    println!("\n== drift and Var by depth ==");
    for depth in (2..=14).step_by(2) {
        let op = Operator::new(law.clone(), depth).unwrap();
        let rpf = op.rpf_fixed_point(1e-11).unwrap();
        let g = TruncatedPastFunction::jump_function(&law);
        let drift = rpf.expectation(&g)[0];
        // Green-Kubo sum up to lag 60.
        let mean = drift;
        let mut centered = op.lift(&g);
        for v in centered.values_mut() {
            *v -= mean;
        }
        let c0 = lagged_covariance(&op, &rpf, &g, 0)[0][0];
        let mut var = c0;
        let mut h = centered.clone();
        for _ in 1..=60 {
            h = op.apply(&h);
            let cj = {
                let mut acc = 0.0;
                for (u, &m) in rpf.mu_minus().iter().enumerate() {
                    acc += m * centered.value(u)[0] * h.value(u)[0];
                }
                acc
            };
            var += 2.0 * cj;
        }
        println!(
            "depth {depth:2}: drift {:.12}  gamma {:.4}  iters {:3}  Var2 {:.12}  ratios {:?}",
            drift,
            rpf.gamma_hat(),
            rpf.iterations(),
            var,
            rpf.recent_ratios()
                .iter()
                .map(|r| (r * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
    }

    println!("\n== per-lag covariances at depth 10 ==");
    let op = Operator::new(law.clone(), 10).unwrap();
    let rpf = op.rpf_fixed_point(1e-11).unwrap();
    let g = TruncatedPastFunction::jump_function(&law);
    for j in 0..=12 {
        let cj = lagged_covariance(&op, &rpf, &g, j)[0][0];
        println!("C_{j} = {cj:+.12e}");
    }

    println!("\n== absolute continuity (depth 12 reference) ==");
    let op12 = Operator::new(law.clone(), 12).unwrap();
    let rpf12 = op12.rpf_fixed_point(1e-11).unwrap();
    for k in 1..=6 {
        let mu_k = rpf12.marginal(k);
        let mut max_ratio = 0.0f64;
        let mut min_ratio = f64::INFINITY;
        for idx in 0..law.alphabet().len().pow(k as u32) {
            let word = law.alphabet().word_from_index(idx, k);
            let p = law.exact_word_probability(&word);
            let ratio = p / mu_k[idx];
            max_ratio = max_ratio.max(ratio);
            min_ratio = min_ratio.min(ratio);
        }
        println!("depth {k}: ratio range [{min_ratio:.9}, {max_ratio:.9}]");
    }
    let rep = absolute_continuity_check(&rpf12, 2, &[3, 4]);
    println!("C' = {:.9}, pass = {}, checked = {:?}", rep.c_prime, rep.pass, rep.checked);

    println!("\n== mixing: exact conditional expectations, prefix len 2 ==");
    let f = TruncatedPastFunction::state_indicator(&law, 0);
    let mu_f = rpf12.expectation(&f)[0];
    println!("mu(f) at depth 12 = {mu_f:.12}; depth 14 check:");
    let op14 = Operator::new(law.clone(), 14).unwrap();
    let rpf14 = op14.rpf_fixed_point(1e-11).unwrap();
    let mu_f14 = rpf14.expectation(&f)[0];
    println!("mu(f) at depth 14 = {mu_f14:.12} (diff {:.3e})", (mu_f - mu_f14).abs());
    for gap in 1..=10usize {
        let mut worst = 0.0f64;
        for pidx in 0..4usize {
            let prefix: Vec<SymbolId> = law.alphabet().word_from_index(pidx, 2);
            let horizon = 1 + gap;
            let e = conditional_expectation(&law, &prefix, &f, horizon).unwrap();
            worst = worst.max((e - mu_f14).abs());
        }
        println!("gap {gap:2}: max |E - mu(f)| = {worst:.6e}");
    }

    println!("\n== duality gate: lag-1 covariance vs enumeration ==");
    // Exact E[v_9 v_10] etc. by direct enumeration of length-11 words.
    let n = 11;
    let mut m9 = 0.0;
    let mut m10 = 0.0;
    let mut m910 = 0.0;
    let bsz = law.alphabet().len();
    for idx in 0..bsz.pow(n as u32) {
        let word = law.alphabet().word_from_index(idx, n);
        let p = law.exact_word_probability(&word);
        let v9 = law.alphabet().displacement(word[9])[0] as f64;
        let v10 = law.alphabet().displacement(word[10])[0] as f64;
        m9 += p * v9;
        m10 += p * v10;
        m910 += p * v9 * v10;
    }
    let cov_enum = m910 - m9 * m10;
    let c1_op = lagged_covariance(&op12, &rpf12, &g, 1)[0][0];
    println!("enumeration Cov(v9, v10) = {cov_enum:.9}");
    println!("operator    C_1          = {c1_op:.9}  (diff {:.3e})", (cov_enum - c1_op).abs());
    println!("enumeration E v9 = {m9:.9}, E v10 = {m10:.9}");
}
