//! Semantic genomics imputation: bidirectional residual translators trained
//! with cycle-consistency and adversarial losses, plus the progressive
//! real-to-generated interpolation schedule.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Two-layer residual affine stack D -> D. All-zero parameters act as the
/// identity map.
#[derive(Debug, Clone)]
pub struct Translator {
    pub w1: Arr, // (D, D)
    pub b1: Arr, // (1, D)
    pub w2: Arr, // (D, D)
    pub b2: Arr, // (1, D)
}

impl Translator {
    pub fn identity(d: usize) -> Self {
        Self {
            w1: Array2::zeros((d, d)),
            b1: Array2::zeros((1, d)),
            w2: Array2::zeros((d, d)),
            b2: Array2::zeros((1, d)),
        }
    }

    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b1: Array2::zeros((1, d)),
            w2: Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b2: Array2::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranslatorPair {
    pub p_to_g: Translator,
    pub g_to_p: Translator,
}

impl TranslatorPair {
    pub fn identity(d: usize) -> Self {
        Self {
            p_to_g: Translator::identity(d),
            g_to_p: Translator::identity(d),
        }
    }

    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            p_to_g: Translator::random(d, scale, rng),
            g_to_p: Translator::random(d, scale, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PToG,
    GToP,
}

/// Sigmoid discriminator D -> (0,1); outputs are clamped before logs.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub w1: Arr, // (D, H)
    pub b1: Arr, // (1, H)
    pub w2: Arr, // (H, 1)
    pub b2: Arr, // (1, 1)
}

impl Discriminator {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: Array2::zeros((d, h)),
            b1: Array2::zeros((1, h)),
            w2: Array2::zeros((h, 1)),
            b2: Array2::zeros((1, 1)),
        }
    }

    pub fn random(d: usize, h: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Array2::from_shape_fn((d, h), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b1: Array2::zeros((1, h)),
            w2: Array2::from_shape_fn((h, 1), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b2: Array2::zeros((1, 1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorPair {
    pub d_g: Discriminator,
    pub d_p: Discriminator,
}

#[derive(Debug, Clone, Copy)]
pub struct SgiConfig {
    pub lambda_cycle: f64,
    pub schedule_total_steps: usize,
}

impl Default for SgiConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            schedule_total_steps: 1000,
        }
    }
}

// ---------------------------------------------------------------------------
// tape-graph builders
// ---------------------------------------------------------------------------

pub struct TranslatorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TranslatorVars {
    pub fn leaf(tape: &mut Tape, t: &Translator) -> Self {
        Self {
            w1: tape.leaf(t.w1.clone()),
            b1: tape.leaf(t.b1.clone()),
            w2: tape.leaf(t.w2.clone()),
            b2: tape.leaf(t.b2.clone()),
        }
    }
}

pub struct TranslatorPairVars {
    pub p_to_g: TranslatorVars,
    pub g_to_p: TranslatorVars,
}

impl TranslatorPairVars {
    pub fn leaf(tape: &mut Tape, t: &TranslatorPair) -> Self {
        Self {
            p_to_g: TranslatorVars::leaf(tape, &t.p_to_g),
            g_to_p: TranslatorVars::leaf(tape, &t.g_to_p),
        }
    }
}

pub fn translate_graph(tape: &mut Tape, x: Var, t: &TranslatorVars) -> Var {
    let h = tape.matmul(x, t.w1);
    let h = tape.add_row(h, t.b1);
    let h = tape.tanh(h);
    let h = tape.matmul(h, t.w2);
    let delta = tape.add_row(h, t.b2);
    tape.add(x, delta)
}

/// Forward and backward cycle terms, each a mean absolute error over batch,
/// rows, and features.
pub fn cycle_terms_graph(
    tape: &mut Tape,
    p_tokens: Var,
    g_tokens: Var,
    t: &TranslatorPairVars,
) -> (Var, Var) {
    let fake_g = translate_graph(tape, p_tokens, &t.p_to_g);
    let recon_p = translate_graph(tape, fake_g, &t.g_to_p);
    let diff_p = tape.sub(recon_p, p_tokens);
    let abs_p = tape.abs(diff_p);
    let forward = tape.mean(abs_p);

    let fake_p = translate_graph(tape, g_tokens, &t.g_to_p);
    let recon_g = translate_graph(tape, fake_p, &t.p_to_g);
    let diff_g = tape.sub(recon_g, g_tokens);
    let abs_g = tape.abs(diff_g);
    let backward = tape.mean(abs_g);
    (forward, backward)
}

pub fn cycle_loss_graph(tape: &mut Tape, p_tokens: Var, g_tokens: Var, t: &TranslatorPairVars) -> Var {
    let (f, b) = cycle_terms_graph(tape, p_tokens, g_tokens, t);
    tape.add(f, b)
}

pub struct DiscriminatorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DiscriminatorVars {
    pub fn leaf(tape: &mut Tape, d: &Discriminator) -> Self {
        Self {
            w1: tape.leaf(d.w1.clone()),
            b1: tape.leaf(d.b1.clone()),
            w2: tape.leaf(d.w2.clone()),
            b2: tape.leaf(d.b2.clone()),
        }
    }
}

pub struct DiscriminatorPairVars {
    pub d_g: DiscriminatorVars,
    pub d_p: DiscriminatorVars,
}

impl DiscriminatorPairVars {
    pub fn leaf(tape: &mut Tape, d: &DiscriminatorPair) -> Self {
        Self {
            d_g: DiscriminatorVars::leaf(tape, &d.d_g),
            d_p: DiscriminatorVars::leaf(tape, &d.d_p),
        }
    }
}

/// Clamped real/fake probabilities, one per sample. When the first layer is
/// wider than a single row, consecutive rows are flattened into one joint
/// sample first; a discriminator built for whole token stacks therefore sees
/// each stack as a single input and can use cross-row structure.
pub fn discriminate_graph(tape: &mut Tape, x: Var, d: &DiscriminatorVars) -> Var {
    let in_dim = tape.value(d.w1).nrows();
    let width = tape.value(x).ncols();
    let x = if in_dim > width && in_dim % width == 0 {
        let per_sample = in_dim / width;
        let n_rows = tape.value(x).nrows();
        assert!(
            n_rows % per_sample == 0,
            "discriminator input rows {n_rows} not a multiple of stack height {per_sample}"
        );
        let samples: Vec<Var> = (0..n_rows / per_sample)
            .map(|s| {
                let mut flat = tape.row(x, s * per_sample);
                for r in 1..per_sample {
                    let next = tape.row(x, s * per_sample + r);
                    flat = tape.concat_cols(flat, next);
                }
                flat
            })
            .collect();
        tape.concat_rows(&samples)
    } else {
        x
    };
    let h = tape.matmul(x, d.w1);
    let h = tape.add_row(h, d.b1);
    let h = tape.tanh(h);
    let logits = tape.matmul(h, d.w2);
    let logits = tape.add_row(logits, d.b2);
    let probs = tape.sigmoid(logits);
    tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Printed minimax form: E[log D(real)] + E[log(1 - D(fake))], per direction.
pub fn adversarial_losses_graph(
    tape: &mut Tape,
    p_tokens: Var,
    g_tokens: Var,
    t: &TranslatorPairVars,
    d: &DiscriminatorPairVars,
) -> (Var, Var) {
    let adv = |tape: &mut Tape, real: Var, fake: Var, disc: &DiscriminatorVars| {
        let pr = discriminate_graph(tape, real, disc);
        let ln_pr = tape.ln(pr);
        let real_term = tape.mean(ln_pr);
        let pf = discriminate_graph(tape, fake, disc);
        let neg = tape.scale(pf, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        let ln_pf = tape.ln(one_minus);
        let fake_term = tape.mean(ln_pf);
        tape.add(real_term, fake_term)
    };
    let fake_g = translate_graph(tape, p_tokens, &t.p_to_g);
    let fake_p = translate_graph(tape, g_tokens, &t.g_to_p);
    let l_adv_g = adv(tape, g_tokens, fake_g, &d.d_g);
    let l_adv_p = adv(tape, p_tokens, fake_p, &d.d_p);
    (l_adv_g, l_adv_p)
}

/// Non-saturating generator objective: -E[log D_G(fake_g)] - E[log D_P(fake_p)].
pub fn generator_adversarial_graph(
    tape: &mut Tape,
    p_tokens: Var,
    g_tokens: Var,
    t: &TranslatorPairVars,
    d: &DiscriminatorPairVars,
) -> Var {
    let fake_g = translate_graph(tape, p_tokens, &t.p_to_g);
    let fake_p = translate_graph(tape, g_tokens, &t.g_to_p);
    let pg = discriminate_graph(tape, fake_g, &d.d_g);
    let lg = tape.ln(pg);
    let mg = tape.mean(lg);
    let pp = discriminate_graph(tape, fake_p, &d.d_p);
    let lp = tape.ln(pp);
    let mp = tape.mean(lp);
    let s = tape.add(mg, mp);
    tape.scale(s, -1.0)
}

/// L_adv^G + L_adv^P + lambda (L_cycle^G + L_cycle^P).
pub fn sgi_objective_graph(
    tape: &mut Tape,
    p_tokens: Var,
    g_tokens: Var,
    t: &TranslatorPairVars,
    d: &DiscriminatorPairVars,
    cfg: &SgiConfig,
) -> Var {
    let (adv_g, adv_p) = adversarial_losses_graph(tape, p_tokens, g_tokens, t, d);
    let cycle = cycle_loss_graph(tape, p_tokens, g_tokens, t);
    let adv = tape.add(adv_g, adv_p);
    let scaled = tape.scale(cycle, cfg.lambda_cycle);
    tape.add(adv, scaled)
}

// ---------------------------------------------------------------------------
// eager operations
// ---------------------------------------------------------------------------

pub fn translate(x: &Arr, direction: Direction, t: &TranslatorPair) -> Arr {
    let translator = match direction {
        Direction::PToG => &t.p_to_g,
        Direction::GToP => &t.g_to_p,
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let tv = TranslatorVars::leaf(&mut tape, translator);
    let out = translate_graph(&mut tape, xv, &tv);
    tape.value(out).clone()
}

pub fn cycle_loss(p_tokens: &Arr, g_tokens: &Arr, t: &TranslatorPair) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(p_tokens.clone());
    let g = tape.leaf(g_tokens.clone());
    let tv = TranslatorPairVars::leaf(&mut tape, t);
    let loss = cycle_loss_graph(&mut tape, p, g, &tv);
    tape.scalar(loss)
}

pub fn adversarial_losses(
    p_tokens: &Arr,
    g_tokens: &Arr,
    t: &TranslatorPair,
    d: &DiscriminatorPair,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let p = tape.leaf(p_tokens.clone());
    let g = tape.leaf(g_tokens.clone());
    let tv = TranslatorPairVars::leaf(&mut tape, t);
    let dv = DiscriminatorPairVars::leaf(&mut tape, d);
    let (ag, ap) = adversarial_losses_graph(&mut tape, p, g, &tv, &dv);
    (tape.scalar(ag), tape.scalar(ap))
}

pub fn sgi_objective(
    p_tokens: &Arr,
    g_tokens: &Arr,
    t: &TranslatorPair,
    d: &DiscriminatorPair,
    cfg: &SgiConfig,
) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(p_tokens.clone());
    let g = tape.leaf(g_tokens.clone());
    let tv = TranslatorPairVars::leaf(&mut tape, t);
    let dv = DiscriminatorPairVars::leaf(&mut tape, d);
    let loss = sgi_objective_graph(&mut tape, p, g, &tv, &dv, cfg);
    tape.scalar(loss)
}

/// Convex combination m*real + (1-m)*generated.
pub fn interpolate_genomics(real_g: Option<&Arr>, generated_g: &Arr, m: f64) -> Result<Arr> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("interpolation weight {m} outside [0,1]")));
    }
    match real_g {
        Some(real) => Ok(real * m + generated_g * (1.0 - m)),
        None => {
            if m != 0.0 {
                return Err(Error::Precondition(
                    "real genomics absent but interpolation weight m > 0".into(),
                ));
            }
            Ok(generated_g.clone())
        }
    }
}

/// Linear decay m = max(0, 1 - step/total); monotone nonincreasing.
pub fn interpolation_schedule(step: usize, cfg: &SgiConfig) -> f64 {
    (1.0 - step as f64 / cfg.schedule_total_steps as f64).max(0.0)
}

/// Generates genomic tokens from histology tokens; with partial missingness
/// only the fully masked groups' tokens are replaced.
pub fn impute_missing(
    p_tokens: &Arr,
    real_g: Option<&Arr>,
    missing_groups: &[usize],
    t: &TranslatorPair,
) -> Arr {
    match real_g {
        None => translate(p_tokens, Direction::PToG, t),
        Some(real) => {
            if missing_groups.is_empty() {
                return real.clone();
            }
            let generated = translate(p_tokens, Direction::PToG, t);
            let mut out = real.clone();
            for &g in missing_groups {
                out.row_mut(g).assign(&generated.row(g));
            }
            out
        }
    }
}
