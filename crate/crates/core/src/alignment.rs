//! Multiview alignment: contrastive mutual-information estimation with a
//! diversity regularizer (distribution-wise), Gram-matrix consistency
//! (sample-wise), and learnable [CLS] aggregation over prototypes.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::prototyping::{
    self_attention_residual_graph, AttentionParams, AttentionVars, PrototypeSet,
};

/// Contrastive critic: scaled dot product of two learned projections.
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub w_p: Arr, // (D, D)
    pub w_g: Arr, // (D, D)
    pub temperature: f64,
}

impl CriticParams {
    /// Identity-plus-noise init keeps the raw paired similarity the thing the
    /// estimator pulls on early in training.
    pub fn near_identity(d: usize, noise: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = || {
            Array2::eye(d)
                + Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal) * noise)
        };
        Self {
            w_p: mat(),
            w_g: mat(),
            temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentConfig {
    pub lambda_reg: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { lambda_reg: 0.1 }
    }
}

/// Denominator form of the MI estimator. The printed equation sums diagonal
/// terms only; the cross-pair form uses all in-batch negatives and is the
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiForm {
    CrossPair,
    PairedDiagonal,
}

#[derive(Debug, Clone)]
pub struct ClsAggregator {
    pub cls_token: Arr, // (1, D)
    pub attn: AttentionParams,
}

impl ClsAggregator {
    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cls_token: Array2::from_shape_fn((1, d), |_| {
                rng.sample::<f64, _>(StandardNormal) * scale
            }),
            attn: AttentionParams::random(d, scale, rng),
        }
    }
}

pub struct CriticVars {
    pub w_p: Var,
    pub w_g: Var,
    pub temperature: f64,
}

impl CriticVars {
    pub fn leaf(tape: &mut Tape, c: &CriticParams) -> Self {
        Self {
            w_p: tape.leaf(c.w_p.clone()),
            w_g: tape.leaf(c.w_g.clone()),
            temperature: c.temperature,
        }
    }
}

// ---------------------------------------------------------------------------
// tape-graph builders
// ---------------------------------------------------------------------------

/// Importance-weighted mean of prototype tokens: (N,D) -> (1,D).
pub fn pool_graph(tape: &mut Tape, tokens: Var, importance: Option<Var>) -> Var {
    match importance {
        Some(w) => {
            let weighted = tape.mul_col(tokens, w);
            let num = tape.sum_rows(weighted);
            let denom = tape.sum(w);
            tape.div_scalar(num, denom)
        }
        None => {
            let n = tape.value(tokens).nrows() as f64;
            let s = tape.sum_rows(tokens);
            tape.scale(s, 1.0 / n)
        }
    }
}

/// Pairwise critic scores s_ij = <W_p p_i, W_g g_j> / temperature, (B,B).
pub fn mi_scores_graph(tape: &mut Tape, p_batch: Var, g_batch: Var, critic: &CriticVars) -> Var {
    let pc = tape.matmul(p_batch, critic.w_p);
    let gc = tape.matmul(g_batch, critic.w_g);
    let gct = tape.transpose(gc);
    let s = tape.matmul(pc, gct);
    tape.scale(s, 1.0 / critic.temperature)
}

pub fn mi_estimator_loss_graph(
    tape: &mut Tape,
    p_batch: Var,
    g_batch: Var,
    critic: &CriticVars,
    form: MiForm,
) -> Var {
    let b = tape.value(p_batch).nrows();
    let scores = mi_scores_graph(tape, p_batch, g_batch, critic);
    let eye = tape.leaf(Array2::eye(b));
    match form {
        MiForm::CrossPair => {
            let ls = tape.log_softmax_rows(scores);
            let diag = tape.mul(ls, eye);
            let s = tape.sum(diag);
            tape.scale(s, -1.0)
        }
        MiForm::PairedDiagonal => {
            // every summand is a ratio of diagonal terms
            let masked = tape.mul(scores, eye);
            let diag = tape.sum_cols(masked); // (B,1)
            let lse = tape.logsumexp(diag);
            let sum_diag = tape.sum(diag);
            let b_lse = tape.scale(lse, b as f64);
            tape.sub(b_lse, sum_diag)
        }
    }
}

/// (1/B^2) sum_ij exp(-||g_i - g_j||): in (0, 1], equals 1 iff all rows equal.
pub fn diversity_regularizer_graph(tape: &mut Tape, g_batch: Var) -> Var {
    tape.pairwise_exp_neg_dist(g_batch)
}

pub fn distribution_loss_graph(
    tape: &mut Tape,
    p_batch: Var,
    g_batch: Var,
    critic: &CriticVars,
    cfg: &AlignmentConfig,
    form: MiForm,
) -> Var {
    let mie = mi_estimator_loss_graph(tape, p_batch, g_batch, critic, form);
    let reg = diversity_regularizer_graph(tape, g_batch);
    let scaled = tape.scale(reg, cfg.lambda_reg);
    tape.add(mie, scaled)
}

pub fn sample_alignment_loss_graph(tape: &mut Tape, p_batch: Var, g_batch: Var) -> Var {
    let b = tape.value(p_batch).nrows() as f64;
    let pn = tape.row_l2_normalize(p_batch);
    let gn = tape.row_l2_normalize(g_batch);
    let pt = tape.transpose(pn);
    let gt = tape.transpose(gn);
    let m_p = tape.matmul(pn, pt);
    let m_g = tape.matmul(gn, gt);
    let diff = tape.sub(m_p, m_g);
    let sq = tape.mul(diff, diff);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / (b * b))
}

pub fn alignment_loss_graph(
    tape: &mut Tape,
    p_batch: Var,
    g_batch: Var,
    critic: &CriticVars,
    cfg: &AlignmentConfig,
    form: MiForm,
) -> Var {
    let sample = sample_alignment_loss_graph(tape, p_batch, g_batch);
    let distri = distribution_loss_graph(tape, p_batch, g_batch, critic, cfg, form);
    tape.add(sample, distri)
}

pub struct ClsVars {
    pub cls_token: Var,
    pub attn: AttentionVars,
}

impl ClsVars {
    pub fn leaf(tape: &mut Tape, agg: &ClsAggregator) -> Self {
        Self {
            cls_token: tape.leaf(agg.cls_token.clone()),
            attn: AttentionVars::leaf(tape, &agg.attn),
        }
    }
}

/// Prepend the [CLS] token, run one residual self-attention layer, and split
/// the result into (global representation, contextualized prototypes).
pub fn aggregate_with_cls_graph(tape: &mut Tape, tokens: Var, cls: &ClsVars) -> (Var, Var) {
    let n = tape.value(tokens).nrows();
    let all = tape.concat_rows(&[cls.cls_token, tokens]);
    let out = self_attention_residual_graph(tape, all, &cls.attn);
    let global = tape.slice_rows(out, 0, 1);
    let ctx = tape.slice_rows(out, 1, n + 1);
    (global, ctx)
}

// ---------------------------------------------------------------------------
// eager operations
// ---------------------------------------------------------------------------

pub fn pool_prototypes(protos: &PrototypeSet) -> Arr {
    let mut tape = Tape::new();
    let t = tape.leaf(protos.tokens.clone());
    let w = protos.importance.as_ref().map(|w| {
        let col = Arr::from_shape_fn((w.len(), 1), |(i, _)| w[i]);
        tape.leaf(col)
    });
    let pooled = pool_graph(&mut tape, t, w);
    tape.value(pooled).clone()
}

fn check_batch(p_batch: &Arr, g_batch: &Arr) -> Result<()> {
    if p_batch.nrows() == 0 || g_batch.nrows() == 0 {
        return Err(Error::Precondition("empty alignment batch".into()));
    }
    if p_batch.nrows() != g_batch.nrows() {
        return Err(Error::Precondition("unpaired alignment batch sizes".into()));
    }
    Ok(())
}

pub fn mi_estimator_loss(
    p_batch: &Arr,
    g_batch: &Arr,
    critic: &CriticParams,
    form: MiForm,
) -> Result<f64> {
    check_batch(p_batch, g_batch)?;
    let mut tape = Tape::new();
    let p = tape.leaf(p_batch.clone());
    let g = tape.leaf(g_batch.clone());
    let cv = CriticVars::leaf(&mut tape, critic);
    let loss = mi_estimator_loss_graph(&mut tape, p, g, &cv, form);
    Ok(tape.scalar(loss))
}

pub fn diversity_regularizer(g_batch: &Arr) -> f64 {
    let mut tape = Tape::new();
    let g = tape.leaf(g_batch.clone());
    let r = diversity_regularizer_graph(&mut tape, g);
    tape.scalar(r)
}

pub fn distribution_loss(
    p_batch: &Arr,
    g_batch: &Arr,
    critic: &CriticParams,
    cfg: &AlignmentConfig,
    form: MiForm,
) -> Result<f64> {
    Ok(mi_estimator_loss(p_batch, g_batch, critic, form)?
        + cfg.lambda_reg * diversity_regularizer(g_batch))
}

pub fn sample_alignment_loss(p_batch: &Arr, g_batch: &Arr) -> Result<f64> {
    check_batch(p_batch, g_batch)?;
    for batch in [p_batch, g_batch] {
        for row in batch.rows() {
            if row.iter().map(|x| x * x).sum::<f64>().sqrt() == 0.0 {
                return Err(Error::Normalization(
                    "zero-norm row in sample alignment batch".into(),
                ));
            }
        }
    }
    let mut tape = Tape::new();
    let p = tape.leaf(p_batch.clone());
    let g = tape.leaf(g_batch.clone());
    let loss = sample_alignment_loss_graph(&mut tape, p, g);
    Ok(tape.scalar(loss))
}

pub fn alignment_loss(
    p_batch: &Arr,
    g_batch: &Arr,
    critic: &CriticParams,
    cfg: &AlignmentConfig,
    form: MiForm,
) -> Result<f64> {
    Ok(sample_alignment_loss(p_batch, g_batch)?
        + distribution_loss(p_batch, g_batch, critic, cfg, form)?)
}

pub fn aggregate_with_cls(protos: &PrototypeSet, agg: &ClsAggregator) -> (Arr, PrototypeSet) {
    let mut tape = Tape::new();
    let t = tape.leaf(protos.tokens.clone());
    let cls = ClsVars::leaf(&mut tape, agg);
    let (global, ctx) = aggregate_with_cls_graph(&mut tape, t, &cls);
    (
        tape.value(global).clone(),
        PrototypeSet {
            tokens: tape.value(ctx).clone(),
            names: protos.names.clone(),
            importance: protos.importance.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Arr {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pool_single_and_equal_tokens() {
        let single = PrototypeSet {
            tokens: array![[1.0, -2.0, 3.0]],
            names: vec!["a".into()],
            importance: None,
        };
        assert_eq!(pool_prototypes(&single), array![[1.0, -2.0, 3.0]]);
        let two = PrototypeSet {
            tokens: array![[1.0, -2.0, 3.0], [1.0, -2.0, 3.0]],
            names: vec!["a".into(), "b".into()],
            importance: Some(vec![0.3, 0.9]),
        };
        let p = pool_prototypes(&two);
        for (x, y) in p.iter().zip([1.0, -2.0, 3.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_uniform_importance_is_column_mean() {
        let mut r = rng(2);
        let tokens = randn(6, 4, &mut r);
        let set = PrototypeSet {
            tokens: tokens.clone(),
            names: (0..6).map(|i| i.to_string()).collect(),
            importance: Some(vec![0.5; 6]),
        };
        let p = pool_prototypes(&set);
        for j in 0..4 {
            let mean = tokens.column(j).sum() / 6.0;
            assert!((p[[0, j]] - mean).abs() < 1e-12);
        }
    }

    fn unit_critic(d: usize) -> CriticParams {
        CriticParams {
            w_p: Array2::eye(d),
            w_g: Array2::eye(d),
            temperature: 1.0,
        }
    }

    #[test]
    fn mie_single_pair_is_zero() {
        let p = array![[1.0, 0.0]];
        let g = array![[0.0, 1.0]];
        let l = mi_estimator_loss(&p, &g, &unit_critic(2), MiForm::CrossPair).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn mie_uniform_scores_closed_form() {
        // all-zero projections of identical rows give equal scores
        let p = Array2::from_elem((4, 3), 1.0);
        let g = Array2::from_elem((4, 3), 0.5);
        let l = mi_estimator_loss(&p, &g, &unit_critic(3), MiForm::CrossPair).unwrap();
        assert!((l - 4.0 * 4.0f64.ln()).abs() < 1e-9, "{l}");
        // the printed diagonal-only form degenerates the same way here
        let l2 = mi_estimator_loss(&p, &g, &unit_critic(3), MiForm::PairedDiagonal).unwrap();
        assert!((l2 - 4.0 * 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mie_matches_scalar_logsumexp_oracle() {
        let mut r = rng(7);
        let d = 4;
        let p = randn(3, d, &mut r);
        let g = randn(3, d, &mut r);
        let critic = CriticParams::near_identity(d, 0.2, &mut r);
        let l = mi_estimator_loss(&p, &g, &critic, MiForm::CrossPair).unwrap();
        // scalar recomputation
        let pc = p.dot(&critic.w_p);
        let gc = g.dot(&critic.w_g);
        let mut expect = 0.0;
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    pc.row(i)
                        .iter()
                        .zip(gc.row(j).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / critic.temperature
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            expect -= scores[i] - lse;
        }
        assert!((l - expect).abs() < 1e-9, "{l} vs {expect}");
        assert!(l >= 0.0);
    }

    #[test]
    fn regularizer_closed_forms() {
        let same = Array2::from_elem((3, 4), 0.7);
        assert!((diversity_regularizer(&same) - 1.0).abs() < 1e-12);

        // B=2 at distance ln 2: (2 + 2*0.5)/4 = 0.75
        let d = 2.0f64.ln();
        let two = array![[0.0, 0.0], [d, 0.0]];
        assert!((diversity_regularizer(&two) - 0.75).abs() < 1e-12);

        // distance -> infinity leaves only the diagonal: 2/4
        let far = array![[0.0, 0.0], [1e9, 0.0]];
        assert!((diversity_regularizer(&far) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distribution_loss_composes() {
        let mut r = rng(9);
        let p = randn(4, 3, &mut r);
        let g = randn(4, 3, &mut r);
        let critic = CriticParams::near_identity(3, 0.1, &mut r);
        let cfg = AlignmentConfig { lambda_reg: 0.1 };
        let total = distribution_loss(&p, &g, &critic, &cfg, MiForm::CrossPair).unwrap();
        let parts = mi_estimator_loss(&p, &g, &critic, MiForm::CrossPair).unwrap()
            + 0.1 * diversity_regularizer(&g);
        assert!((total - parts).abs() < 1e-12);

        let zero_cfg = AlignmentConfig { lambda_reg: 0.0 };
        let mie_only = distribution_loss(&p, &g, &critic, &zero_cfg, MiForm::CrossPair).unwrap();
        assert!((mie_only - mi_estimator_loss(&p, &g, &critic, MiForm::CrossPair).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sample_loss_closed_forms() {
        let p = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(sample_alignment_loss(&p, &p).unwrap().abs() < 1e-12);

        // p1=p2 unit, g1 ⟂ g2 unit: loss = 2/4
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let l = sample_alignment_loss(&p, &g).unwrap();
        assert!((l - 0.5).abs() < 1e-12);

        let zero = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(
            sample_alignment_loss(&zero, &g),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn sample_loss_matches_scalar_double_loop() {
        let mut r = rng(11);
        let p = randn(4, 5, &mut r);
        let g = randn(4, 5, &mut r);
        let l = sample_alignment_loss(&p, &g).unwrap();
        let norm_rows = |m: &Arr| -> Vec<Vec<f64>> {
            m.rows()
                .into_iter()
                .map(|row| {
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    row.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let pn = norm_rows(&p);
        let gn = norm_rows(&g);
        let mut expect = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mp: f64 = pn[i].iter().zip(&pn[j]).map(|(a, b)| a * b).sum();
                let mg: f64 = gn[i].iter().zip(&gn[j]).map(|(a, b)| a * b).sum();
                expect += (mp - mg) * (mp - mg);
            }
        }
        expect /= 16.0;
        assert!((l - expect).abs() < 1e-10);
    }

    #[test]
    fn sample_loss_gram_invariances() {
        let mut r = rng(13);
        let p = randn(4, 4, &mut r);
        let g = randn(4, 4, &mut r);
        let base = sample_alignment_loss(&p, &g).unwrap();

        // common rotation of one batch (Householder reflection)
        let v = {
            let raw = randn(4, 1, &mut r);
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw / n
        };
        let q = Array2::eye(4) - 2.0 * v.dot(&v.t());
        let rotated = p.dot(&q);
        let l = sample_alignment_loss(&rotated, &g).unwrap();
        assert!((l - base).abs() < 1e-10);

        // positive per-row rescaling before normalization
        let mut scaled = p.clone();
        for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x * (1.0 + i as f64));
        }
        let l2 = sample_alignment_loss(&scaled, &g).unwrap();
        assert!((l2 - base).abs() < 1e-10);
    }

    #[test]
    fn alignment_loss_is_sum_of_parts() {
        let mut r = rng(15);
        let p = randn(3, 4, &mut r);
        let g = randn(3, 4, &mut r);
        let critic = CriticParams::near_identity(4, 0.1, &mut r);
        let cfg = AlignmentConfig::default();
        let total = alignment_loss(&p, &g, &critic, &cfg, MiForm::CrossPair).unwrap();
        let expect = sample_alignment_loss(&p, &g).unwrap()
            + distribution_loss(&p, &g, &critic, &cfg, MiForm::CrossPair).unwrap();
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_zero_loss() {
        let p = array![[1.0, 0.0]];
        let critic = unit_critic(2);
        let cfg = AlignmentConfig { lambda_reg: 0.0 };
        let l = alignment_loss(&p, &p, &critic, &cfg, MiForm::CrossPair).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_drives_mie_to_zero() {
        // orthogonal pairs with a huge temperature-scaled diagonal
        let p = Array2::eye(4) * 50.0;
        let g = Array2::eye(4);
        let l = mi_estimator_loss(&p, &g, &unit_critic(4), MiForm::CrossPair).unwrap();
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn critic_training_reduces_mie_below_uniform() {
        let mut r = rng(21);
        let d = 6;
        let b = 4;
        let p = randn(b, d, &mut r);
        let g = randn(b, d, &mut r);
        let mut critic = CriticParams::near_identity(d, 0.05, &mut r);
        critic.temperature = 1.0;
        let uniform = (b as f64) * (b as f64).ln();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone());
            let gv = tape.leaf(g.clone());
            let cv = CriticVars::leaf(&mut tape, &critic);
            let loss = mi_estimator_loss_graph(&mut tape, pv, gv, &cv, MiForm::CrossPair);
            last = tape.scalar(loss);
            let grads = tape.backward(loss);
            critic.w_p = &critic.w_p - &(grads.get(cv.w_p) * 0.05);
            critic.w_g = &critic.w_g - &(grads.get(cv.w_g) * 0.05);
        }
        assert!(last < uniform, "final {last} not below uniform {uniform}");
    }

    #[test]
    fn cls_aggregation_contracts() {
        let mut r = rng(25);
        let d = 4;
        let protos = PrototypeSet {
            tokens: randn(6, d, &mut r),
            names: (0..6).map(|i| i.to_string()).collect(),
            importance: None,
        };
        // zero-value projection: attention output is zero, residual passes input
        let zero_agg = ClsAggregator {
            cls_token: array![[1.0, 2.0, 3.0, 4.0]],
            attn: AttentionParams {
                w_q: Array2::eye(d),
                w_k: Array2::eye(d),
                w_v: Array2::zeros((d, d)),
                n_iterations: 1,
            },
        };
        let (global, ctx) = aggregate_with_cls(&protos, &zero_agg);
        assert_eq!(global, zero_agg.cls_token);
        assert_eq!(ctx.tokens, protos.tokens);
        assert_eq!(ctx.n(), 6);

        // small-instance scalar oracle for the global row
        let agg = ClsAggregator::random(d, 0.5, &mut r);
        let (global, ctx) = aggregate_with_cls(&protos, &agg);
        assert_eq!(ctx.n(), 6);
        let mut all = Array2::zeros((7, d));
        all.row_mut(0).assign(&agg.cls_token.row(0));
        for i in 0..6 {
            all.row_mut(i + 1).assign(&protos.tokens.row(i));
        }
        let q = all.dot(&agg.attn.w_q);
        let k = all.dot(&agg.attn.w_k);
        let v = all.dot(&agg.attn.w_v);
        let mut scores: Vec<f64> = (0..7)
            .map(|j| {
                q.row(0)
                    .iter()
                    .zip(k.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        scores.iter_mut().for_each(|s| *s = (*s - m).exp());
        let z: f64 = scores.iter().sum();
        for j in 0..d {
            let attn_out: f64 = (0..7).map(|t| scores[t] / z * v[[t, j]]).sum();
            let expect = all[[0, j]] + attn_out;
            assert!((global[[0, j]] - expect).abs() < 1e-10);
        }
    }
}
