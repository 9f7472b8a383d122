//! Task heads, task losses, and evaluation metrics for diagnosis (6-class),
//! grading (3-class), and discrete-time survival prediction.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};

pub const HAZARD_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Arr, // (D, C)
    pub b: Arr, // (1, C)
}

impl ClassifierHead {
    pub fn random(d: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Array2::from_shape_fn((d, c), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b: Array2::zeros((1, c)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.ncols()
    }
}

/// Discrete-time hazard head: sigmoid(logits) are per-bin hazards.
#[derive(Debug, Clone)]
pub struct SurvivalHead {
    pub w: Arr, // (D, n_bins)
    pub b: Arr, // (1, n_bins)
}

impl SurvivalHead {
    pub fn random(d: usize, n_bins: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Array2::from_shape_fn((d, n_bins), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b: Array2::zeros((1, n_bins)),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub c_index: Option<f64>,
    pub n_samples: usize,
    /// classes absent from the labels, excluded from macro averages
    pub excluded_classes: Vec<usize>,
    pub task: String,
    pub fold: Option<usize>,
    pub missing_mode: Option<String>,
    pub missing_rate: Option<f64>,
    pub strategy: Option<String>,
}

// ---------------------------------------------------------------------------
// losses (tape-graph + eager)
// ---------------------------------------------------------------------------

/// Negative log softmax probability of the true class; logits (1, C).
pub fn classification_loss_graph(tape: &mut Tape, logits: Var, label: usize) -> Var {
    let c = tape.value(logits).ncols();
    let ls = tape.log_softmax_rows(logits);
    let onehot = Arr::from_shape_fn((1, c), |(_, j)| f64::from(j == label));
    let mask = tape.leaf(onehot);
    let sel = tape.mul(ls, mask);
    let s = tape.sum(sel);
    tape.scale(s, -1.0)
}

pub fn classification_loss(logits: &Arr, label: usize) -> Result<f64> {
    if label >= logits.ncols() {
        return Err(Error::Precondition(format!(
            "label {label} out of range for {} classes",
            logits.ncols()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = classification_loss_graph(&mut tape, l, label);
    Ok(tape.scalar(loss))
}

/// Discrete-time hazard NLL with hazards h = sigmoid(logits):
/// event in bin t     -> -log h_t - sum_{j<t} log(1 - h_j)
/// censored in bin t  -> -sum_{j<=t} log(1 - h_j)
pub fn survival_loss_graph(tape: &mut Tape, hazard_logits: Var, time_bin: usize, event: bool) -> Var {
    let n_bins = tape.value(hazard_logits).ncols();
    let h = tape.sigmoid(hazard_logits);
    let h = tape.clamp(h, HAZARD_CLAMP, 1.0 - HAZARD_CLAMP);
    let neg_h = tape.scale(h, -1.0);
    let one_minus = tape.add_const(neg_h, 1.0);
    let ln_h = tape.ln(h);
    let ln_surv = tape.ln(one_minus);
    let event_mask = Arr::from_shape_fn((1, n_bins), |(_, j)| f64::from(event && j == time_bin));
    let surv_mask = Arr::from_shape_fn((1, n_bins), |(_, j)| {
        f64::from(j < time_bin || (!event && j == time_bin))
    });
    let em = tape.leaf(event_mask);
    let sm = tape.leaf(surv_mask);
    let e_term = tape.mul(ln_h, em);
    let s_term = tape.mul(ln_surv, sm);
    let total = tape.add(e_term, s_term);
    let s = tape.sum(total);
    tape.scale(s, -1.0)
}

pub fn survival_loss(hazard_logits: &Arr, time_bin: usize, event: bool) -> Result<f64> {
    if time_bin >= hazard_logits.ncols() {
        return Err(Error::Precondition(format!(
            "time bin {time_bin} out of range for {} bins",
            hazard_logits.ncols()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(hazard_logits.clone());
    let loss = survival_loss_graph(&mut tape, l, time_bin, event);
    Ok(tape.scalar(loss))
}

/// Risk summary for the concordance index: sum of per-bin hazards.
pub fn risk_from_hazard_logits(hazard_logits: &Arr) -> f64 {
    hazard_logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).sum()
}

/// Quartile-style bin cut points from observed times; assigns bin index.
pub fn survival_bin_cuts(times: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..n_bins)
        .map(|k| sorted[(k * sorted.len() / n_bins).min(sorted.len() - 1)])
        .collect()
}

pub fn assign_bin(time: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| time >= c).count()
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Harrell's C over comparable pairs: i has an event and strictly earlier
/// time than j; risk ties count one half.
pub fn concordance_index(risk_scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risk_scores.len() != times.len() || times.len() != events.len() || times.len() < 2 {
        return Err(Error::Precondition(
            "concordance needs equal-length vectors of at least 2".into(),
        ));
    }
    let mut comparable = 0usize;
    let mut score = 0.0;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if i == j || times[i] >= times[j] {
                continue;
            }
            comparable += 1;
            if risk_scores[i] > risk_scores[j] {
                score += 1.0;
            } else if risk_scores[i] == risk_scores[j] {
                score += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric(
            "no comparable pairs for concordance index".into(),
        ));
    }
    Ok(score / comparable as f64)
}

/// One-vs-rest AUC by the rank statistic, with 0.5 credit for score ties.
fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut wins = 0.0;
    for (i, &pi) in positives.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positives.iter().enumerate() {
            if pj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    Some(wins / (n_pos * n_neg) as f64)
}

pub fn argmax_row(scores: &Arr, i: usize) -> usize {
    let row = scores.row(i);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Macro-averaged one-vs-rest classification metrics. Classes absent from
/// the labels are excluded from every macro average and flagged.
pub fn classification_metrics(scores: &Arr, labels: &[usize]) -> Result<MetricsReport> {
    let n = labels.len();
    if scores.nrows() != n || n == 0 {
        return Err(Error::Precondition("scores/labels shape mismatch".into()));
    }
    let n_classes = scores.ncols();
    let predictions: Vec<usize> = (0..n).map(|i| argmax_row(scores, i)).collect();
    let accuracy =
        predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;

    let mut aucs = Vec::new();
    let mut sens = Vec::new();
    let mut specs = Vec::new();
    let mut f1s = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..n_classes {
        let present = labels.iter().any(|&l| l == c);
        if !present {
            excluded.push(c);
            continue;
        }
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let col: Vec<f64> = scores.column(c).to_vec();
        if let Some(auc) = binary_auc(&col, &positives) {
            aucs.push(auc);
        }
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut tn = 0.0;
        let mut fneg = 0.0;
        for i in 0..n {
            match (labels[i] == c, predictions[i] == c) {
                (true, true) => tp += 1.0,
                (true, false) => fneg += 1.0,
                (false, true) => fp += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        sens.push(tp / (tp + fneg));
        specs.push(if tn + fp > 0.0 { tn / (tn + fp) } else { 1.0 });
        f1s.push(if 2.0 * tp + fp + fneg > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fneg)
        } else {
            0.0
        });
    }
    let macro_mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(MetricsReport {
        auc: macro_mean(&aucs),
        accuracy: Some(accuracy),
        sensitivity: macro_mean(&sens),
        specificity: macro_mean(&specs),
        f1: macro_mean(&f1s),
        c_index: None,
        n_samples: n,
        excluded_classes: excluded,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Arr::zeros((1, 6));
        let l = classification_loss(&logits, 3).unwrap();
        assert!((l - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_loss_near_zero() {
        let mut logits = Arr::zeros((1, 6));
        logits[[0, 2]] = 20.0;
        let l = classification_loss(&logits, 2).unwrap();
        assert!(l < 1e-7);
        assert!(classification_loss(&logits, 6).is_err());
    }

    #[test]
    fn classification_loss_matches_logsumexp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let logits =
                Array2::from_shape_fn((1, 4), |_| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let label = rng.gen_range(0..4);
            let l = classification_loss(&logits, label).unwrap();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let expect = lse - logits[[0, label]];
            assert!((l - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn survival_single_bin_event() {
        let logits = Arr::zeros((1, 1)); // h = 0.5
        let l = survival_loss(&logits, 0, true).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn survival_certain_survival_censored() {
        let logits = Arr::from_elem((1, 1), -40.0); // h ~ 0, clamped
        let l = survival_loss(&logits, 0, false).unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn survival_matches_product_form_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits =
                Array2::from_shape_fn((1, 4), |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let bin = rng.gen_range(0..4);
            let event = rng.gen_bool(0.5);
            let l = survival_loss(&logits, bin, event).unwrap();
            let h: Vec<f64> = logits
                .iter()
                .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(HAZARD_CLAMP, 1.0 - HAZARD_CLAMP))
                .collect();
            let expect = if event {
                let mut prob = h[bin];
                for hj in h.iter().take(bin) {
                    prob *= 1.0 - hj;
                }
                -prob.ln()
            } else {
                let mut surv = 1.0;
                for hj in h.iter().take(bin + 1) {
                    surv *= 1.0 - hj;
                }
                -surv.ln()
            };
            assert!((l - expect).abs() < 1e-10, "{l} vs {expect}");
        }
    }

    #[test]
    fn survival_loss_monotone_in_true_bin_hazard() {
        // raising the true-event bin's hazard must lower the loss
        let logits = array![[0.2, -0.4, 0.1, 0.3]];
        let base = survival_loss(&logits, 2, true).unwrap();
        let mut up = logits.clone();
        up[[0, 2]] += 0.01;
        assert!(survival_loss(&up, 2, true).unwrap() < base);
    }

    #[test]
    fn concordance_perfect_and_inverted() {
        let times = [1.0, 2.0, 3.0];
        let events = [true, true, true];
        assert_eq!(
            concordance_index(&[3.0, 2.0, 1.0], &times, &events).unwrap(),
            1.0
        );
        assert_eq!(
            concordance_index(&[1.0, 2.0, 3.0], &times, &events).unwrap(),
            0.0
        );
    }

    #[test]
    fn concordance_undefined_without_events() {
        let err = concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    // exhaustive pair-enumeration oracle, independently written
    fn cindex_oracle(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
        let n = times.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j && events[i] && times[i] < times[j] {
                    den += 1.0;
                    num += if risks[i] > risks[j] {
                        1.0
                    } else if risks[i] == risks[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn concordance_matches_pair_oracle_with_censoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = 6;
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(1..20) as f64).collect();
            let events: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(-5..5) as f64).collect();
            match (concordance_index(&risks, &times, &events), cindex_oracle(&risks, &times, &events)) {
                (Ok(c), Some(o)) => assert!((c - o).abs() < 1e-12),
                (Err(Error::UndefinedMetric(_)), None) => {}
                (a, b) => panic!("mismatch: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn concordance_rank_invariant() {
        let times = [3.0, 1.0, 4.0, 2.0, 8.0, 5.0];
        let events = [true, true, false, true, false, true];
        let risks = [0.3, 2.0, -1.0, 0.7, 0.1, 1.1];
        let base = concordance_index(&risks, &times, &events).unwrap();
        let transformed: Vec<f64> = risks.iter().map(|r| (3.0 * r).exp()).collect();
        let t = concordance_index(&transformed, &times, &events).unwrap();
        assert!((base - t).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_all_ones() {
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let mut scores = Arr::zeros((6, 3));
        for (i, &l) in labels.iter().enumerate() {
            scores[[i, l]] = 5.0;
        }
        let m = classification_metrics(&scores, &labels).unwrap();
        for v in [m.auc, m.accuracy, m.sensitivity, m.specificity, m.f1] {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(m.excluded_classes.is_empty());
    }

    #[test]
    fn binary_separable_auc() {
        let scores = array![[0.1, 0.9], [0.9, 0.1]];
        let m = classification_metrics(&scores, &[1, 0]).unwrap();
        assert_eq!(m.auc, Some(1.0));
    }

    #[test]
    fn absent_class_flagged_and_excluded() {
        let scores = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let m = classification_metrics(&scores, &[0, 1]).unwrap();
        assert_eq!(m.excluded_classes, vec![2]);
    }

    // brute-force confusion-matrix / rank-statistic oracle
    fn metrics_oracle(scores: &Arr, labels: &[usize]) -> (f64, f64, f64, f64, f64) {
        let n = labels.len();
        let c_total = scores.ncols();
        let preds: Vec<usize> = (0..n)
            .map(|i| {
                let mut best = 0;
                for j in 0..c_total {
                    if scores[[i, j]] > scores[[i, best]] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let acc = preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let mut aucs = vec![];
        let mut sens = vec![];
        let mut specs = vec![];
        let mut f1s = vec![];
        for c in 0..c_total {
            if !labels.contains(&c) {
                continue;
            }
            let (mut tp, mut fp, mut tn, mut fne) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                match (labels[i] == c, preds[i] == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fne += 1.0,
                    (false, true) => fp += 1.0,
                    (false, false) => tn += 1.0,
                }
            }
            sens.push(tp / (tp + fne));
            specs.push(tn / (tn + fp));
            f1s.push(if 2.0 * tp + fp + fne > 0.0 {
                2.0 * tp / (2.0 * tp + fp + fne)
            } else {
                0.0
            });
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == c && labels[j] != c {
                        pairs += 1.0;
                        let (si, sj) = (scores[[i, c]], scores[[j, c]]);
                        wins += if si > sj {
                            1.0
                        } else if si == sj {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            if pairs > 0.0 {
                aucs.push(wins / pairs);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&aucs), acc, mean(&sens), mean(&specs), mean(&f1s))
    }

    #[test]
    fn metrics_match_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = 20;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let scores = Array2::from_shape_fn((n, 3), |_| {
                // quantized to exercise tie handling
                (rng.gen_range(0..10) as f64) / 10.0
            });
            let m = classification_metrics(&scores, &labels).unwrap();
            let (auc, acc, sen, spec, f1) = metrics_oracle(&scores, &labels);
            assert!((m.auc.unwrap() - auc).abs() < 1e-12);
            assert!((m.accuracy.unwrap() - acc).abs() < 1e-12);
            assert!((m.sensitivity.unwrap() - sen).abs() < 1e-12);
            assert!((m.specificity.unwrap() - spec).abs() < 1e-12);
            assert!((m.f1.unwrap() - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_invariant_under_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let labels: Vec<usize> = (0..10).map(|_| rng.gen_range(0..3)).collect();
        let scores = Array2::from_shape_fn((10, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let a = classification_metrics(&scores, &labels).unwrap();
        let b = classification_metrics(&(&scores * 4.0), &labels).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        // AUC invariant under per-column monotone transform
        let mono = scores.mapv(|x| x.exp());
        let c = classification_metrics(&mono, &labels).unwrap();
        assert!((a.auc.unwrap() - c.auc.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bin_cuts_and_assignment() {
        let times: Vec<f64> = (1..=8).map(|t| t as f64).collect();
        let cuts = survival_bin_cuts(&times, 4);
        assert_eq!(cuts.len(), 3);
        for t in &times {
            let b = assign_bin(*t, &cuts);
            assert!(b < 4);
        }
        assert_eq!(assign_bin(0.5, &cuts), 0);
        assert_eq!(assign_bin(100.0, &cuts), 3);
    }
}
