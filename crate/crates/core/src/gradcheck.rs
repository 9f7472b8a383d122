//! Central finite-difference verification of every analytic gradient used in
//! training: attention refinement, importance weighting, the alignment
//! losses, cycle/adversarial translation losses, and both task losses.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::{
    diversity_regularizer_graph, mi_estimator_loss_graph, sample_alignment_loss_graph, CriticVars,
    MiForm,
};
use crate::autodiff::{Arr, Tape, Var};
use crate::imputation::{
    adversarial_losses_graph, cycle_loss_graph, generator_adversarial_graph,
    DiscriminatorPairVars, DiscriminatorVars, TranslatorPairVars, TranslatorVars,
};
use crate::prototyping::{importance_graph, refine_graph, AttentionVars, ImportanceVars};
use crate::tasks::{classification_loss_graph, survival_loss_graph};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Arr {
    Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Checks analytic gradients of `build` (a scalar graph over the given leaf
/// values) against central finite differences, leaf by leaf, entry by entry.
fn check(
    name: &str,
    leaves: &[Arr],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> CheckResult {
    let eval = |ls: &[Arr]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ls.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut max_rel = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]);
        for ((i, j), _) in leaf.indexed_iter() {
            let mut plus = leaves.to_vec();
            plus[li][[i, j]] += EPS;
            let mut minus = leaves.to_vec();
            minus[li][[i, j]] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[[i, j]];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
    }
}

fn attention_vars(v: &[Var], at: usize) -> AttentionVars {
    AttentionVars {
        w_q: v[at],
        w_k: v[at + 1],
        w_v: v[at + 2],
    }
}

fn translator_pair(v: &[Var], at: usize) -> TranslatorPairVars {
    TranslatorPairVars {
        p_to_g: TranslatorVars {
            w1: v[at],
            b1: v[at + 1],
            w2: v[at + 2],
            b2: v[at + 3],
        },
        g_to_p: TranslatorVars {
            w1: v[at + 4],
            b1: v[at + 5],
            w2: v[at + 6],
            b2: v[at + 7],
        },
    }
}

fn discriminator_pair(v: &[Var], at: usize) -> DiscriminatorPairVars {
    DiscriminatorPairVars {
        d_g: DiscriminatorVars {
            w1: v[at],
            b1: v[at + 1],
            w2: v[at + 2],
            b2: v[at + 3],
        },
        d_p: DiscriminatorVars {
            w1: v[at + 4],
            b1: v[at + 5],
            w2: v[at + 6],
            b2: v[at + 7],
        },
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let d = 4;
    let h = 3;
    let b = 4;
    let mut out = Vec::new();

    // prototype refinement: two shared-weight cross-attention iterations,
    // scalarized through a fixed mixing matrix
    {
        let leaves = vec![
            randn(3, d, r),      // prototypes
            randn(b, d, r),      // patches
            randn(d, d, r),      // w_q
            randn(d, d, r),      // w_k
            randn(d, d, r),      // w_v
            randn(3, d, r),      // mixing weights
        ];
        out.push(check("prototype_refinement", &leaves, |tape, v| {
            let params = attention_vars(v, 2);
            let (refined, _) = refine_graph(tape, v[0], v[1], &params, 2);
            let mixed = tape.mul(refined, v[5]);
            tape.sum(mixed)
        }));
    }

    // importance weighting: sigmoid head scaling the tokens
    {
        let leaves = vec![
            randn(b, d, r),
            randn(d, h, r),
            randn(1, h, r),
            randn(h, 1, r),
            randn(1, 1, r),
            randn(b, d, r),
        ];
        out.push(check("importance_weighting", &leaves, |tape, v| {
            let head = ImportanceVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let imp = importance_graph(tape, v[0], &head);
            let weighted = tape.mul_col(v[0], imp);
            let mixed = tape.mul(weighted, v[5]);
            tape.sum(mixed)
        }));
    }

    // mutual-information estimator, both denominator forms
    for (name, form) in [
        ("mi_estimator_cross_pair", MiForm::CrossPair),
        ("mi_estimator_paired_diagonal", MiForm::PairedDiagonal),
    ] {
        let leaves = vec![randn(b, d, r), randn(b, d, r), randn(d, d, r), randn(d, d, r)];
        out.push(check(name, &leaves, move |tape, v| {
            let critic = CriticVars {
                w_p: v[2],
                w_g: v[3],
                temperature: 0.07,
            };
            mi_estimator_loss_graph(tape, v[0], v[1], &critic, form)
        }));
    }

    // diversity regularizer
    {
        let leaves = vec![randn(b, d, r)];
        out.push(check("diversity_regularizer", &leaves, |tape, v| {
            diversity_regularizer_graph(tape, v[0])
        }));
    }

    // Gram-matrix sample alignment
    {
        let leaves = vec![randn(b, d, r), randn(b, d, r)];
        out.push(check("sample_alignment", &leaves, |tape, v| {
            sample_alignment_loss_graph(tape, v[0], v[1])
        }));
    }

    // cycle-consistency loss through both translators
    {
        let mut leaves = vec![randn(b, d, r), randn(b, d, r)];
        for _ in 0..2 {
            leaves.push(randn(d, h, r));
            leaves.push(randn(1, h, r));
            leaves.push(randn(h, d, r));
            leaves.push(randn(1, d, r));
        }
        out.push(check("cycle_consistency", &leaves, |tape, v| {
            let t = translator_pair(v, 2);
            cycle_loss_graph(tape, v[0], v[1], &t)
        }));
    }

    // discriminator objective and the non-saturating generator objective
    {
        let mut leaves = vec![randn(b, d, r), randn(b, d, r)];
        for _ in 0..2 {
            leaves.push(randn(d, h, r));
            leaves.push(randn(1, h, r));
            leaves.push(randn(h, d, r));
            leaves.push(randn(1, d, r));
        }
        // first-layer width 2d: each discriminator sample is a flattened
        // stack of two consecutive token rows, covering the joint-input path
        for _ in 0..2 {
            leaves.push(randn(2 * d, h, r));
            leaves.push(randn(1, h, r));
            leaves.push(randn(h, 1, r));
            leaves.push(randn(1, 1, r));
        }
        out.push(check("adversarial_discriminator", &leaves, |tape, v| {
            let t = translator_pair(v, 2);
            let d = discriminator_pair(v, 10);
            let (adv_g, adv_p) = adversarial_losses_graph(tape, v[0], v[1], &t, &d);
            tape.add(adv_g, adv_p)
        }));
        let leaves2: Vec<Arr> = leaves.clone();
        out.push(check("adversarial_generator", &leaves2, |tape, v| {
            let t = translator_pair(v, 2);
            let d = discriminator_pair(v, 10);
            generator_adversarial_graph(tape, v[0], v[1], &t, &d)
        }));
    }

    // classification cross-entropy
    {
        let leaves = vec![randn(1, 4, r)];
        out.push(check("classification_loss", &leaves, |tape, v| {
            classification_loss_graph(tape, v[0], 2)
        }));
    }

    // discrete-time survival likelihood, event and censored cases
    {
        let leaves = vec![randn(1, 4, r)];
        out.push(check("survival_loss_event", &leaves, |tape, v| {
            survival_loss_graph(tape, v[0], 2, true)
        }));
        let leaves = vec![randn(1, 4, r)];
        out.push(check("survival_loss_censored", &leaves, |tape, v| {
            survival_loss_graph(tape, v[0], 2, false)
        }));
    }

    out
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.max_rel_err <= TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_within_tolerance() {
        let results = run_all(11);
        assert_eq!(results.len(), 12);
        for r in &results {
            assert!(
                r.max_rel_err <= TOLERANCE,
                "{} exceeded tolerance: {}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn results_are_deterministic() {
        let a = run_all(5);
        let b = run_all(5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
