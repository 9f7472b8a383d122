//! Two-phase training, evaluation under missingness, the missing-rate sweep,
//! and interpretability exports.
//!
//! Phase 1 trains prototyping plus the task head on the task loss alone.
//! Phase 2 adds the adversarial/cycle translation objectives under a linearly
//! rising simulated missing rate, and the cross-modal alignment loss with
//! gradient accumulation; the alignment critic is frozen once its epoch-mean
//! loss stops improving.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_loss_graph, AlignmentConfig, MiForm};
use crate::autodiff::{softmax_rows_value, Arr, Tape, Var};
use crate::data::{apply_missingness, Cohort, MissingnessSpec, PatientRecord};
use crate::error::{Error, Result};
use crate::imputation::{
    adversarial_losses_graph, cycle_loss_graph, generator_adversarial_graph,
    interpolation_schedule, SgiConfig,
};
use crate::model::{
    accumulate_grads, fit_mean_genomic_tokens, patient_forward, GenomicSource, MaskedFill,
    ModelState, TapeParams,
};
use crate::prototyping::{init_histology_prototypes, EmbeddingProvider};
use crate::tasks::{
    assign_bin, classification_loss_graph, classification_metrics, concordance_index,
    risk_from_hazard_logits, survival_bin_cuts, survival_loss_graph, MetricsReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Diagnosis,
    Grading,
    Survival,
}

impl Task {
    pub fn n_outputs(&self, n_bins: usize) -> usize {
        match self {
            Task::Diagnosis => 6,
            Task::Grading => 3,
            Task::Survival => n_bins,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Diagnosis => "diagnosis",
            Task::Grading => "grading",
            Task::Survival => "survival",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(Task::Diagnosis),
            "grading" => Ok(Task::Grading),
            "survival" => Ok(Task::Survival),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStrategy {
    Sgi,
    MeanFill,
}

impl FillStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FillStrategy::Sgi => "sgi",
            FillStrategy::MeanFill => "mean_fill",
        }
    }
}

impl std::str::FromStr for FillStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgi" => Ok(FillStrategy::Sgi),
            "mean_fill" => Ok(FillStrategy::MeanFill),
            other => Err(Error::Config(format!("unknown fill strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub phase1_epochs: usize,
    pub lambda_reg: f64,
    pub lambda_cycle: f64,
    pub k_top: usize,
    pub accumulation: usize,
    pub schedule_total_steps: usize,
    pub hidden: usize,
    pub n_iterations: usize,
    pub n_bins: usize,
    pub mi_form: MiForm,
    /// learning-rate multiplier for the discriminators; the stack-level
    /// critics overpower the translators at the shared rate, and a saturated
    /// discriminator pins probabilities at the clamp where the generator
    /// gradient vanishes
    pub disc_lr_scale: f64,
    /// training-time missingness applied to the cohort before training
    pub missingness: Option<MissingnessSpec>,
    pub fill_strategy: FillStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Survival,
            seed: 0,
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 20,
            phase1_epochs: 10,
            lambda_reg: 0.1,
            lambda_cycle: 10.0,
            k_top: 3,
            accumulation: 4,
            schedule_total_steps: 1000,
            hidden: 16,
            n_iterations: 2,
            n_bins: 4,
            mi_form: MiForm::CrossPair,
            disc_lr_scale: 0.2,
            missingness: None,
            fill_strategy: FillStrategy::Sgi,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.phase1_epochs > self.epochs {
            return Err(Error::Config(format!(
                "phase1_epochs {} exceeds epochs {}",
                self.phase1_epochs, self.epochs
            )));
        }
        if self.disc_lr_scale <= 0.0 {
            return Err(Error::Config("disc_lr_scale must be positive".into()));
        }
        if self.batch_size == 0 || self.accumulation == 0 || self.n_bins == 0 {
            return Err(Error::Config(
                "batch_size, accumulation, and n_bins must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.k_top > 6 {
            return Err(Error::Config(format!("k_top {} exceeds 6", self.k_top)));
        }
        if let Some(spec) = &self.missingness {
            spec.validate()?;
        }
        Ok(())
    }

    /// FNV-1a over the display form, recorded in checkpoints.
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Per-epoch mean loss components; NA-valued pieces are absent in phase 1.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub task_loss: f64,
    pub ma_loss: Option<f64>,
    pub cycle_loss: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_p: Option<f64>,
    pub gen_adv: Option<f64>,
    pub sim_missing_rate: f64,
    pub interpolation_m: f64,
    pub paired_cosine: f64,
    pub ma_frozen: bool,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub logs: Vec<EpochLog>,
    /// paired cosine at initialization followed by one entry per epoch
    pub alignment_trace: Vec<f64>,
    pub freeze_epoch: Option<usize>,
    pub bin_cuts: Option<Vec<f64>>,
}

fn patient_label(rec: &PatientRecord, task: Task, cuts: Option<&[f64]>) -> (usize, bool) {
    match task {
        Task::Diagnosis => (rec.label_diagnosis, true),
        Task::Grading => (rec.label_grade, true),
        Task::Survival => (
            assign_bin(rec.survival_time, cuts.expect("bin cuts required")),
            rec.event_indicator,
        ),
    }
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: name.to_string(),
        })
    }
}

/// Mean cosine between the CLS-pooled modality representations over patients
/// with a real genomic profile.
pub fn paired_cosine(state: &ModelState, cohort: &Cohort) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in &cohort.patients {
        if rec.effective_genomic().is_none() {
            continue;
        }
        let mut tape = Tape::new();
        let tp = TapeParams::leaf(&mut tape, state);
        let f = patient_forward(
            &mut tape,
            &tp,
            state,
            rec,
            0,
            GenomicSource::Real { m: 1.0 },
            MaskedFill::Bias,
        )?;
        let p = tape.value(f.global_p).clone();
        let g = tape.value(f.global_g).clone();
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let np: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if np > 0.0 && ng > 0.0 {
            sum += dot / (np * ng);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "no paired patient for the cosine trace".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Genomic tokens produced from an all-masked profile: the learned per-group
/// biases passed through the genomic self-attention. Used as the mean-fill
/// fallback when no patient carries a real profile.
fn prior_genomic_tokens(state: &ModelState) -> Arr {
    let mut tape = Tape::new();
    let tp = TapeParams::leaf(&mut tape, state);
    let means = [None; crate::data::N_GROUPS];
    let pooled = crate::prototyping::genomic_pooled_graph(
        &mut tape,
        &means,
        tp.get("gen.w"),
        tp.get("gen.b"),
    );
    let attn = tp.attention("attn_g");
    let g = crate::prototyping::self_attention_residual_graph(&mut tape, pooled, &attn);
    tape.value(g).clone()
}

fn refresh_mean_tokens(state: &mut ModelState, cohort: &Cohort) {
    state.mean_g_tokens = Some(
        fit_mean_genomic_tokens(state, &cohort.patients)
            .unwrap_or_else(|_| prior_genomic_tokens(state)),
    );
}

pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cohort.validate()?;
    let cohort = match &cfg.missingness {
        Some(spec) => apply_missingness(cohort, spec)?,
        None => cohort.clone(),
    };
    let d = cohort.d_embed();
    let provider = EmbeddingProvider::DeterministicHash { dimension: d };
    let protos = init_histology_prototypes(&cohort.histology_category_names, &provider)?;
    let mut state = ModelState::new(
        d,
        cfg.task.n_outputs(cfg.n_bins),
        cfg.hidden,
        cfg.n_iterations,
        cfg.k_top,
        protos.tokens,
        cfg.seed,
    );
    let bin_cuts = match cfg.task {
        Task::Survival => {
            let times: Vec<f64> = cohort.patients.iter().map(|p| p.survival_time).collect();
            Some(survival_bin_cuts(&times, cfg.n_bins))
        }
        _ => None,
    };
    refresh_mean_tokens(&mut state, &cohort);

    let sgi_cfg = SgiConfig {
        lambda_cycle: cfg.lambda_cycle,
        schedule_total_steps: cfg.schedule_total_steps,
    };
    let align_cfg = AlignmentConfig {
        lambda_reg: cfg.lambda_reg,
    };
    let n = cohort.patients.len();
    let paired_idx: Vec<usize> = (0..n)
        .filter(|&i| cohort.patients[i].effective_genomic().is_some())
        .collect();

    let mut logs = Vec::new();
    let mut alignment_trace = vec![paired_cosine(&state, &cohort).unwrap_or(0.0)];
    let mut freeze_epoch = None;
    let mut best_ma: Option<f64> = None;
    let mut stall_count = 0usize;
    let mut phase2_step = 0usize;
    let phase2_len = cfg.epochs.saturating_sub(cfg.phase1_epochs);

    for epoch in 0..cfg.epochs {
        let phase: u8 = if epoch < cfg.phase1_epochs { 1 } else { 2 };
        state.phase = phase;
        // the alignment objective stays on for all of phase 2; freezing only
        // stops critic updates (apply_grads skips frozen parameters), the
        // encoders keep receiving alignment gradients
        let ma_active = phase == 2;

        // simulated patient-wise missingness ramp, phase 2 only
        let sim_rate = if phase == 2 && phase2_len > 1 {
            0.5 * (epoch - cfg.phase1_epochs) as f64 / (phase2_len - 1) as f64
        } else {
            0.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut sim_pool = paired_idx.clone();
        sim_pool.shuffle(&mut rng);
        let n_sim = (sim_rate * sim_pool.len() as f64).floor() as usize;
        let simulated: std::collections::BTreeSet<usize> =
            sim_pool.into_iter().take(n_sim).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let slide_pick: Vec<usize> = cohort
            .patients
            .iter()
            .map(|p| rng.gen_range(0..p.slides.len()))
            .collect();

        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        let mut record = |key: &'static str, v: f64| {
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        };
        let mut acc_main: BTreeMap<String, Arr> = BTreeMap::new();
        let mut acc_count = 0usize;
        let mut epoch_m = 1.0;

        for batch in order.chunks(cfg.batch_size) {
            let m = if phase == 2 {
                interpolation_schedule(phase2_step, &sgi_cfg)
            } else {
                1.0
            };
            epoch_m = m;
            let mut tape = Tape::new();
            let tp = TapeParams::leaf(&mut tape, &state);
            let mut task_terms: Vec<Var> = Vec::new();
            let mut gp_rows = Vec::new();
            let mut gg_rows = Vec::new();
            let mut p_stacks = Vec::new();
            let mut g_stacks = Vec::new();
            for &pi in batch {
                let rec = &cohort.patients[pi];
                let has_real = rec.effective_genomic().is_some();
                let source = if !has_real || simulated.contains(&pi) {
                    match (has_real, cfg.fill_strategy) {
                        (false, FillStrategy::MeanFill) => GenomicSource::MeanFill,
                        _ => GenomicSource::Generated,
                    }
                } else if phase == 2 {
                    GenomicSource::Real { m }
                } else {
                    GenomicSource::Real { m: 1.0 }
                };
                let f = patient_forward(
                    &mut tape,
                    &tp,
                    &state,
                    rec,
                    slide_pick[pi],
                    source,
                    MaskedFill::Bias,
                )?;
                let (label, event) = patient_label(rec, cfg.task, bin_cuts.as_deref());
                let loss = match cfg.task {
                    Task::Survival => survival_loss_graph(&mut tape, f.logits, label, event),
                    _ => classification_loss_graph(&mut tape, f.logits, label),
                };
                task_terms.push(loss);
                gp_rows.push(f.global_p);
                gg_rows.push(f.global_g);
                if let Some(gr) = f.g_real {
                    p_stacks.push(f.p_weighted);
                    g_stacks.push(gr);
                }
            }
            let task_sum = tape.concat_rows(&task_terms);
            let mut main = tape.mean(task_sum);
            record("task", check_finite("task loss", tape.scalar(main))?);

            let mut disc_loss = None;
            if phase == 2 {
                let translators = tp.translators();
                let discriminators = tp.discriminators();
                if !p_stacks.is_empty() {
                    let p_all = tape.concat_rows(&p_stacks);
                    let g_all = tape.concat_rows(&g_stacks);
                    let cycle = cycle_loss_graph(&mut tape, p_all, g_all, &translators);
                    let gen_adv =
                        generator_adversarial_graph(&mut tape, p_all, g_all, &translators, &discriminators);
                    let (adv_g, adv_p) =
                        adversarial_losses_graph(&mut tape, p_all, g_all, &translators, &discriminators);
                    record("cycle", check_finite("cycle loss", tape.scalar(cycle))?);
                    record("gen_adv", check_finite("generator adversarial loss", tape.scalar(gen_adv))?);
                    record("adv_g", check_finite("genomic adversarial loss", tape.scalar(adv_g))?);
                    record("adv_p", check_finite("histology adversarial loss", tape.scalar(adv_p))?);
                    let scaled_cycle = tape.scale(cycle, cfg.lambda_cycle);
                    main = tape.add(main, scaled_cycle);
                    main = tape.add(main, gen_adv);
                    let adv_sum = tape.add(adv_g, adv_p);
                    disc_loss = Some(tape.scale(adv_sum, -1.0));
                }
                if ma_active && gp_rows.len() >= 2 {
                    let p_batch = tape.concat_rows(&gp_rows);
                    let g_batch = tape.concat_rows(&gg_rows);
                    let critic = tp.critic();
                    let ma = alignment_loss_graph(
                        &mut tape, p_batch, g_batch, &critic, &align_cfg, cfg.mi_form,
                    );
                    record("ma", check_finite("alignment loss", tape.scalar(ma))?);
                    main = tape.add(main, ma);
                }
                phase2_step += 1;
            }

            let grads = tape.backward(main);
            accumulate_grads(&grads, &tp, &mut acc_main, |name| {
                !name.starts_with("dg.")
                    && !name.starts_with("dp.")
                    && !name.starts_with("tpg.")
                    && !name.starts_with("tgp.")
            });
            // the translator/discriminator game runs on its own per-batch
            // cadence: the adversarial pair needs many small opposing steps,
            // and holding the translators to the accumulated schedule leaves
            // the generated tokens stuck near their initialization
            let mut gan_grads: BTreeMap<String, Arr> = BTreeMap::new();
            accumulate_grads(&grads, &tp, &mut gan_grads, |name| {
                name.starts_with("tpg.") || name.starts_with("tgp.")
            });
            if !gan_grads.is_empty() {
                state.apply_grads(&gan_grads, cfg.learning_rate)?;
            }
            if let Some(dl) = disc_loss {
                let dgrads = tape.backward(dl);
                let mut disc_grads: BTreeMap<String, Arr> = BTreeMap::new();
                accumulate_grads(&dgrads, &tp, &mut disc_grads, |name| {
                    name.starts_with("dg.") || name.starts_with("dp.")
                });
                state.apply_grads(&disc_grads, cfg.learning_rate * cfg.disc_lr_scale)?;
            }
            acc_count += 1;
            let apply_every = if phase == 2 { cfg.accumulation } else { 1 };
            if acc_count >= apply_every {
                for g in acc_main.values_mut() {
                    *g /= acc_count as f64;
                }
                state.apply_grads(&acc_main, cfg.learning_rate)?;
                acc_main.clear();
                acc_count = 0;
            }
            state.step += 1;
        }
        if acc_count > 0 {
            for g in acc_main.values_mut() {
                *g /= acc_count as f64;
            }
            state.apply_grads(&acc_main, cfg.learning_rate)?;
        }

        refresh_mean_tokens(&mut state, &cohort);
        let cosine = paired_cosine(&state, &cohort).unwrap_or(0.0);
        alignment_trace.push(cosine);

        let mean_of = |key: &str| sums.get(key).map(|(s, c)| s / *c as f64);
        let epoch_ma = mean_of("ma");
        logs.push(EpochLog {
            epoch,
            phase,
            task_loss: mean_of("task").unwrap_or(f64::NAN),
            ma_loss: epoch_ma,
            cycle_loss: mean_of("cycle"),
            adv_g: mean_of("adv_g"),
            adv_p: mean_of("adv_p"),
            gen_adv: mean_of("gen_adv"),
            sim_missing_rate: sim_rate,
            interpolation_m: epoch_m,
            paired_cosine: cosine,
            ma_frozen: freeze_epoch.is_some(),
        });

        // freeze rule: epoch-mean alignment loss fails to improve on its best
        // value by at least 1% for three epochs in a row
        if let (Some(cur), None) = (epoch_ma, freeze_epoch) {
            if let Some(best) = best_ma {
                let improvement = (best - cur) / best.abs().max(1e-12);
                if improvement < 0.01 {
                    stall_count += 1;
                } else {
                    stall_count = 0;
                }
                if stall_count >= 3 {
                    state.freeze_group("critic.");
                    freeze_epoch = Some(epoch);
                }
                if cur < best {
                    best_ma = Some(cur);
                }
            } else {
                best_ma = Some(cur);
            }
        }
    }

    Ok(TrainOutcome {
        state,
        logs,
        alignment_trace,
        freeze_epoch,
        bin_cuts,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Per-patient prediction: the mean of per-slide output rows.
fn predict_patient(
    state: &ModelState,
    rec: &PatientRecord,
    strategy: FillStrategy,
) -> Result<Arr> {
    let source = if rec.effective_genomic().is_some() {
        GenomicSource::Real { m: 1.0 }
    } else {
        match strategy {
            FillStrategy::Sgi => GenomicSource::Generated,
            FillStrategy::MeanFill => GenomicSource::MeanFill,
        }
    };
    let masked = match strategy {
        FillStrategy::Sgi => MaskedFill::Generated,
        FillStrategy::MeanFill => MaskedFill::Mean,
    };
    let mut sum: Option<Arr> = None;
    for slide_idx in 0..rec.slides.len() {
        let mut tape = Tape::new();
        let tp = TapeParams::leaf(&mut tape, state);
        let f = patient_forward(&mut tape, &tp, state, rec, slide_idx, source, masked)?;
        let logits = tape.value(f.logits).clone();
        sum = Some(match sum {
            Some(s) => s + logits,
            None => logits,
        });
    }
    Ok(sum.expect("patient without slides") / rec.slides.len() as f64)
}

pub fn evaluate(
    state: &ModelState,
    cohort: &Cohort,
    task: Task,
    spec: Option<&MissingnessSpec>,
    strategy: FillStrategy,
) -> Result<MetricsReport> {
    let cohort = match spec {
        Some(s) => apply_missingness(cohort, s)?,
        None => cohort.clone(),
    };
    let n = cohort.patients.len();
    let mut report = match task {
        Task::Survival => {
            let mut risks = Vec::with_capacity(n);
            let mut times = Vec::with_capacity(n);
            let mut events = Vec::with_capacity(n);
            for rec in &cohort.patients {
                let logits = predict_patient(state, rec, strategy)?;
                risks.push(risk_from_hazard_logits(&logits));
                times.push(rec.survival_time);
                events.push(rec.event_indicator);
            }
            let mut rep = MetricsReport {
                n_samples: n,
                ..Default::default()
            };
            match concordance_index(&risks, &times, &events) {
                Ok(c) => rep.c_index = Some(c),
                Err(Error::UndefinedMetric(_)) => rep.c_index = None,
                Err(e) => return Err(e),
            }
            rep
        }
        _ => {
            let mut scores = Arr::zeros((n, task.n_outputs(0)));
            let mut labels = Vec::with_capacity(n);
            for (i, rec) in cohort.patients.iter().enumerate() {
                let logits = predict_patient(state, rec, strategy)?;
                scores.row_mut(i).assign(&softmax_rows_value(&logits).row(0));
                labels.push(match task {
                    Task::Diagnosis => rec.label_diagnosis,
                    _ => rec.label_grade,
                });
            }
            classification_metrics(&scores, &labels)?
        }
    };
    report.task = task.name().to_string();
    if let Some(s) = spec {
        report.missing_mode = Some(s.mode.to_string());
        report.missing_rate = Some(s.rate);
    }
    report.strategy = Some(strategy.name().to_string());
    Ok(report)
}

pub fn missingness_sweep(
    state: &ModelState,
    cohort: &Cohort,
    task: Task,
    rates: &[f64],
    modes: &[crate::data::MissingnessMode],
    strategies: &[FillStrategy],
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &rate in rates {
            for &strategy in strategies {
                let spec = MissingnessSpec { mode, rate, seed };
                rows.push(evaluate(state, cohort, task, Some(&spec), strategy)?);
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// tables and logs
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".into(),
    }
}

pub fn results_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "task\tmode\trate\tstrategy\tn\tauc\tacc\tsen\tspec\tf1\tcindex\texcluded_classes\n",
    );
    for r in reports {
        let excluded = if r.excluded_classes.is_empty() {
            "-".to_string()
        } else {
            r.excluded_classes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.task,
            r.missing_mode.as_deref().unwrap_or("-"),
            fmt_opt(r.missing_rate),
            r.strategy.as_deref().unwrap_or("-"),
            r.n_samples,
            fmt_opt(r.auc),
            fmt_opt(r.accuracy),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            fmt_opt(r.f1),
            fmt_opt(r.c_index),
            excluded,
        );
    }
    out
}

pub fn train_log_table(logs: &[EpochLog]) -> String {
    let mut out = String::from(
        "epoch\tphase\ttask\tma\tcycle\tadv_g\tadv_p\tgen_adv\tsim_rate\tm\tcosine\tfrozen\n",
    );
    for l in logs {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            l.epoch,
            l.phase,
            l.task_loss,
            fmt_opt(l.ma_loss),
            fmt_opt(l.cycle_loss),
            fmt_opt(l.adv_g),
            fmt_opt(l.adv_p),
            fmt_opt(l.gen_adv),
            l.sim_missing_rate,
            l.interpolation_m,
            l.paired_cosine,
            l.ma_frozen,
        );
    }
    out
}

// ---------------------------------------------------------------------------
// interpretability export
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ExplainIndex {
    importance_table: String,
    affinity_tables: Vec<String>,
    attention_tables: Vec<String>,
    alignment_trace: Option<String>,
    prototype_names: Vec<String>,
    group_names: Vec<String>,
}

/// Writes per-patient prototype importances (min-max normalized per patient),
/// per-patient cross-modal affinity matrices, per-slide patch attention, and
/// the alignment trace when available.
pub fn explain(
    state: &ModelState,
    cohort: &Cohort,
    trace: Option<&[f64]>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut importance = String::from("patient_id");
    for name in &cohort.histology_category_names {
        let _ = write!(importance, "\thist:{name}");
    }
    for name in &cohort.gene_group_names {
        let _ = write!(importance, "\tgeno:{name}");
    }
    importance.push('\n');

    let mut affinity_tables = Vec::new();
    let mut attention_tables = Vec::new();
    for rec in &cohort.patients {
        let mut imp_sum = vec![0.0f64; 12];
        let mut aff_sum = Arr::zeros((6, 6));
        for slide_idx in 0..rec.slides.len() {
            let mut tape = Tape::new();
            let tp = TapeParams::leaf(&mut tape, state);
            let source = if rec.effective_genomic().is_some() {
                GenomicSource::Real { m: 1.0 }
            } else {
                GenomicSource::Generated
            };
            let f = patient_forward(&mut tape, &tp, state, rec, slide_idx, source, MaskedFill::Generated)?;
            for (i, v) in tape.value(f.imp_p).iter().enumerate() {
                imp_sum[i] += v;
            }
            for (i, v) in tape.value(f.imp_g).iter().enumerate() {
                imp_sum[6 + i] += v;
            }
            let aff = crate::fusion::affinity_matrix(
                tape.value(f.p_weighted),
                tape.value(f.g_weighted),
            )?;
            aff_sum = aff_sum + &aff.values;

            // per-slide patch attention, one row per histology prototype
            let attn = tape.value(f.attention);
            let slide = &rec.slides[slide_idx];
            let mut table = String::from("patch\tx\ty");
            for name in &cohort.histology_category_names {
                let _ = write!(table, "\t{name}");
            }
            table.push('\n');
            for p in 0..attn.ncols() {
                let (x, y) = slide
                    .patch_coords
                    .as_ref()
                    .map(|c| (c[p].0.to_string(), c[p].1.to_string()))
                    .unwrap_or_else(|| ("NA".into(), "NA".into()));
                let _ = write!(table, "{p}\t{x}\t{y}");
                for k in 0..6 {
                    let _ = write!(table, "\t{:.6}", attn[[k, p]]);
                }
                table.push('\n');
            }
            let fname = format!("attention_{}.tsv", slide.slide_id);
            std::fs::write(out_dir.join(&fname), table)?;
            attention_tables.push(fname);
        }
        let n_slides = rec.slides.len() as f64;
        for v in &mut imp_sum {
            *v /= n_slides;
        }
        // min-max normalization per patient across all 12 prototypes
        let lo = imp_sum.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = imp_sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = write!(importance, "{}", rec.patient_id);
        for v in &imp_sum {
            let _ = write!(importance, "\t{:.6}", (v - lo) / span);
        }
        importance.push('\n');

        let mut aff_table = String::new();
        for i in 0..6 {
            for j in 0..6 {
                if j > 0 {
                    aff_table.push('\t');
                }
                let _ = write!(aff_table, "{:.6}", aff_sum[[i, j]] / n_slides);
            }
            aff_table.push('\n');
        }
        let fname = format!("affinity_{}.tsv", rec.patient_id);
        std::fs::write(out_dir.join(&fname), aff_table)?;
        affinity_tables.push(fname);
    }
    std::fs::write(out_dir.join("importance.tsv"), importance)?;

    let trace_file = match trace {
        Some(t) => {
            let mut table = String::from("epoch\tpaired_cosine\n");
            for (i, v) in t.iter().enumerate() {
                // entry 0 is the pre-training value
                let _ = writeln!(table, "{}\t{:.6}", i as i64 - 1, v);
            }
            std::fs::write(out_dir.join("alignment_trace.tsv"), table)?;
            Some("alignment_trace.tsv".to_string())
        }
        None => None,
    };

    let index = ExplainIndex {
        importance_table: "importance.tsv".into(),
        affinity_tables,
        attention_tables,
        alignment_trace: trace_file,
        prototype_names: cohort.histology_category_names.clone(),
        group_names: cohort.gene_group_names.clone(),
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Schema(format!("index encode error: {e}")))?;
    std::fs::write(out_dir.join("index.json"), text)?;
    Ok(())
}
