//! Model parameter registry, optimizer state, checkpointing, and the full
//! per-patient forward graph that chains prototyping, imputation, alignment
//! pooling, fusion, and a task head on one tape.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{ClsVars, CriticVars};
use crate::autodiff::{Arr, Gradients, Tape, Var};
use crate::data::{PatientRecord, N_GROUPS};
use crate::error::{Error, Result};
use crate::imputation::{
    translate_graph, DiscriminatorPairVars, DiscriminatorVars, TranslatorPairVars, TranslatorVars,
};
use crate::prototyping::{
    genomic_pooled_graph, importance_graph, refine_graph,
    self_attention_residual_graph, AttentionVars, ImportanceVars,
};
use crate::{data, fusion};

pub const TEMPERATURE: f64 = 0.07;

/// How the genomic token stack for one patient is sourced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenomicSource {
    /// Real profile, mixed with the generated tokens by weight m (m=1 pure real).
    Real { m: f64 },
    /// Translated from the histology prototypes (patient-wise missing, sgi).
    Generated,
    /// Training-cohort mean group tokens (patient-wise missing, mean_fill).
    MeanFill,
}

/// How fully masked groups of an otherwise present profile are repaired.
/// `Bias` leaves the learned group-bias fallback in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskedFill {
    Bias,
    Generated,
    Mean,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub d: usize,
    pub n_outputs: usize,
    pub hidden: usize,
    pub n_iterations: usize,
    pub k_top: usize,
    pub params: BTreeMap<String, Arr>,
    /// prompt-derived histology prototype initialization, not trained
    pub proto_init: Arr,
    /// cohort-mean genomic tokens for the mean_fill strategy, set in training
    pub mean_g_tokens: Option<Arr>,
    pub step: u64,
    pub phase: u8,
    pub frozen: BTreeSet<String>,
    adam_m: BTreeMap<String, Arr>,
    adam_v: BTreeMap<String, Arr>,
    adam_t: u64,
}

fn randn(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Arr {
    Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn eye_noise(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Arr {
    Array2::eye(d) + randn(d, d, scale, rng)
}

impl ModelState {
    pub fn new(
        d: usize,
        n_outputs: usize,
        hidden: usize,
        n_iterations: usize,
        k_top: usize,
        proto_init: Arr,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut p = BTreeMap::new();
        for name in ["attn_p", "attn_g", "cls_p.attn", "cls_g.attn"] {
            p.insert(format!("{name}.w_q"), eye_noise(d, 0.05, r));
            p.insert(format!("{name}.w_k"), eye_noise(d, 0.05, r));
            p.insert(format!("{name}.w_v"), eye_noise(d, 0.05, r));
        }
        p.insert("gen.w".into(), randn(N_GROUPS, d, 1.0, r));
        p.insert("gen.b".into(), randn(N_GROUPS, d, 0.3, r));
        for name in ["imp_p", "imp_g"] {
            p.insert(format!("{name}.w1"), randn(d, hidden, 0.1, r));
            p.insert(format!("{name}.b1"), Arr::zeros((1, hidden)));
            p.insert(format!("{name}.w2"), randn(hidden, 1, 0.1, r));
            p.insert(format!("{name}.b2"), Arr::zeros((1, 1)));
        }
        p.insert("critic.w_p".into(), eye_noise(d, 0.01, r));
        p.insert("critic.w_g".into(), eye_noise(d, 0.01, r));
        p.insert("cls_p.token".into(), randn(1, d, 0.3, r));
        p.insert("cls_g.token".into(), randn(1, d, 0.3, r));
        for name in ["tpg", "tgp"] {
            p.insert(format!("{name}.w1"), randn(d, hidden, 0.1, r));
            p.insert(format!("{name}.b1"), Arr::zeros((1, hidden)));
            p.insert(format!("{name}.w2"), randn(hidden, d, 0.01, r));
            p.insert(format!("{name}.b2"), Arr::zeros((1, d)));
        }
        // the discriminators score a whole weighted token stack at once, so
        // cross-group structure (not just per-token marginals) separates real
        // stacks from translated ones
        for name in ["dg", "dp"] {
            p.insert(format!("{name}.w1"), randn(N_GROUPS * d, hidden, 0.1, r));
            p.insert(format!("{name}.b1"), Arr::zeros((1, hidden)));
            p.insert(format!("{name}.w2"), randn(hidden, 1, 0.1, r));
            p.insert(format!("{name}.b2"), Arr::zeros((1, 1)));
        }
        // mixer starts as the average of the paired tokens plus noise
        let mut fus_w = Arr::zeros((2 * d, d));
        for i in 0..d {
            fus_w[[i, i]] = 0.5;
            fus_w[[d + i, i]] = 0.5;
        }
        p.insert("fus.w".into(), fus_w + randn(2 * d, d, 0.02, r));
        p.insert("fus.b".into(), Arr::zeros((1, d)));
        p.insert("head.w".into(), randn(d, n_outputs, 0.1, r));
        p.insert("head.b".into(), Arr::zeros((1, n_outputs)));

        Self {
            d,
            n_outputs,
            hidden,
            n_iterations,
            k_top,
            params: p,
            proto_init,
            mean_g_tokens: None,
            step: 0,
            phase: 1,
            frozen: BTreeSet::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn freeze_group(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    /// FNV-1a over every parameter byte, for phase-discipline assertions.
    pub fn param_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, arr) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
            }
            for v in arr.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// One Adam step over accumulated gradients; frozen parameters skipped.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Arr>, lr: f64) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_t += 1;
        let t = self.adam_t as i32;
        for (name, g) in grads {
            if self.frozen.contains(name) {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("gradient of {name}"),
                });
            }
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))?;
            let m = self
                .adam_m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.dim()));
            let v = self
                .adam_v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.dim()));
            *m = &*m * B1 + g * (1.0 - B1);
            *v = &*v * B2 + &(g * g) * (1.0 - B2);
            let mh = &*m / (1.0 - B1.powi(t));
            let vh = &*v / (1.0 - B2.powi(t));
            *p = &*p - &(mh / (vh.mapv(f64::sqrt) + EPS) * lr);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// tape wiring
// ---------------------------------------------------------------------------

/// Every parameter leafed into one tape, addressable by name.
pub struct TapeParams {
    pub vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn leaf(tape: &mut Tape, state: &ModelState) -> Self {
        let vars = state
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn attention(&self, prefix: &str) -> AttentionVars {
        AttentionVars {
            w_q: self.get(&format!("{prefix}.w_q")),
            w_k: self.get(&format!("{prefix}.w_k")),
            w_v: self.get(&format!("{prefix}.w_v")),
        }
    }

    pub fn importance(&self, prefix: &str) -> ImportanceVars {
        ImportanceVars {
            w1: self.get(&format!("{prefix}.w1")),
            b1: self.get(&format!("{prefix}.b1")),
            w2: self.get(&format!("{prefix}.w2")),
            b2: self.get(&format!("{prefix}.b2")),
        }
    }

    pub fn critic(&self) -> CriticVars {
        CriticVars {
            w_p: self.get("critic.w_p"),
            w_g: self.get("critic.w_g"),
            temperature: TEMPERATURE,
        }
    }

    pub fn cls(&self, prefix: &str) -> ClsVars {
        ClsVars {
            cls_token: self.get(&format!("{prefix}.token")),
            attn: self.attention(&format!("{prefix}.attn")),
        }
    }

    fn translator(&self, prefix: &str) -> TranslatorVars {
        TranslatorVars {
            w1: self.get(&format!("{prefix}.w1")),
            b1: self.get(&format!("{prefix}.b1")),
            w2: self.get(&format!("{prefix}.w2")),
            b2: self.get(&format!("{prefix}.b2")),
        }
    }

    pub fn translators(&self) -> TranslatorPairVars {
        TranslatorPairVars {
            p_to_g: self.translator("tpg"),
            g_to_p: self.translator("tgp"),
        }
    }

    fn discriminator(&self, prefix: &str) -> DiscriminatorVars {
        DiscriminatorVars {
            w1: self.get(&format!("{prefix}.w1")),
            b1: self.get(&format!("{prefix}.b1")),
            w2: self.get(&format!("{prefix}.w2")),
            b2: self.get(&format!("{prefix}.b2")),
        }
    }

    pub fn discriminators(&self) -> DiscriminatorPairVars {
        DiscriminatorPairVars {
            d_g: self.discriminator("dg"),
            d_p: self.discriminator("dp"),
        }
    }
}

/// Accumulate one backward pass into a named gradient map, restricted by a
/// parameter-name predicate.
pub fn accumulate_grads(
    grads: &Gradients,
    tp: &TapeParams,
    acc: &mut BTreeMap<String, Arr>,
    keep: impl Fn(&str) -> bool,
) {
    for (name, var) in &tp.vars {
        if !keep(name) {
            continue;
        }
        let g = grads.get(*var);
        match acc.get_mut(name) {
            Some(a) => *a = &*a + g,
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

/// One patient's forward pass outputs, all on the shared tape.
pub struct PatientForward {
    pub logits: Var,
    /// CLS-aggregated global representations, (1, D) each
    pub global_p: Var,
    pub global_g: Var,
    /// importance-weighted prototype stacks, (6, D) each
    pub p_weighted: Var,
    pub g_weighted: Var,
    /// refined histology prototypes before weighting, (6, D)
    pub p_refined: Var,
    /// real genomic token stack when the profile is present
    pub g_real: Option<Var>,
    /// last-iteration patch attention, (6, n_patches)
    pub attention: Var,
    /// importance columns, (6, 1) each
    pub imp_p: Var,
    pub imp_g: Var,
    /// greedy top-K pairing used by fusion
    pub selection: fusion::FusionSelection,
}

/// Builds the full forward graph for one slide of one patient.
pub fn patient_forward(
    tape: &mut Tape,
    tp: &TapeParams,
    state: &ModelState,
    record: &PatientRecord,
    slide_idx: usize,
    source: GenomicSource,
    masked_fill: MaskedFill,
) -> Result<PatientForward> {
    let slide = record
        .slides
        .get(slide_idx)
        .ok_or_else(|| Error::Precondition(format!("slide index {slide_idx} out of range")))?;

    // histology branch: prompt-initialized prototypes refined over the bag
    let p0 = tape.leaf(state.proto_init.clone());
    let patches = tape.leaf(slide.patch_embeddings.clone());
    let attn_params = tp.attention("attn_p");
    let (p_refined, attention) = refine_graph(tape, p0, patches, &attn_params, state.n_iterations);
    let imp_p_head = tp.importance("imp_p");
    let imp_p = importance_graph(tape, p_refined, &imp_p_head);
    let p_weighted = tape.mul_col(p_refined, imp_p);

    // genomic branch
    let profile = record.effective_genomic();
    let translators = tp.translators();
    let g_real = match profile {
        Some(prof) => {
            let means = prof.group_means();
            let pooled = genomic_pooled_graph(tape, &means, tp.get("gen.w"), tp.get("gen.b"));
            let attn_g = tp.attention("attn_g");
            let mut real = self_attention_residual_graph(tape, pooled, &attn_g);
            let missing: Vec<usize> = (0..N_GROUPS).filter(|&g| means[g].is_none()).collect();
            if !missing.is_empty() && masked_fill != MaskedFill::Bias {
                let fill = match masked_fill {
                    MaskedFill::Generated => translate_graph(tape, p_weighted, &translators.p_to_g),
                    MaskedFill::Mean => {
                        let mean = state.mean_g_tokens.as_ref().ok_or_else(|| {
                            Error::Precondition(
                                "mean fill requested before cohort means were fitted".into(),
                            )
                        })?;
                        tape.leaf(mean.clone())
                    }
                    MaskedFill::Bias => unreachable!(),
                };
                let keep = Arr::from_shape_fn((N_GROUPS, 1), |(g, _)| {
                    f64::from(!missing.contains(&g))
                });
                let miss = keep.mapv(|v| 1.0 - v);
                let keep = tape.leaf(keep);
                let miss = tape.leaf(miss);
                let kept = tape.mul_col(real, keep);
                let filled = tape.mul_col(fill, miss);
                real = tape.add(kept, filled);
            }
            Some(real)
        }
        None => None,
    };
    let g_tokens = match (source, g_real) {
        (GenomicSource::Real { m }, Some(real)) => {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("interpolation weight {m} outside [0,1]")));
            }
            if m >= 1.0 {
                real
            } else {
                let generated = translate_graph(tape, p_weighted, &translators.p_to_g);
                let rm = tape.scale(real, m);
                let gm = tape.scale(generated, 1.0 - m);
                tape.add(rm, gm)
            }
        }
        (GenomicSource::Real { .. }, None) => {
            return Err(Error::Precondition(format!(
                "patient {} flagged genomic-missing but a real source was requested",
                record.patient_id
            )));
        }
        (GenomicSource::Generated, _) => translate_graph(tape, p_weighted, &translators.p_to_g),
        (GenomicSource::MeanFill, _) => {
            let mean = state.mean_g_tokens.as_ref().ok_or_else(|| {
                Error::Precondition("mean_fill requested before cohort means were fitted".into())
            })?;
            tape.leaf(mean.clone())
        }
    };
    let imp_g_head = tp.importance("imp_g");
    let imp_g = importance_graph(tape, g_tokens, &imp_g_head);
    let g_weighted = tape.mul_col(g_tokens, imp_g);

    // global representations for alignment and the head
    let (global_p, _) = crate::alignment::aggregate_with_cls_graph(tape, p_weighted, &tp.cls("cls_p"));
    let (global_g, _) = crate::alignment::aggregate_with_cls_graph(tape, g_weighted, &tp.cls("cls_g"));

    // bipartite top-K fusion on the weighted stacks
    let aff = fusion::affinity_matrix(tape.value(p_weighted), tape.value(g_weighted))?;
    let selection = fusion::select_top_k(&aff, state.k_top)?;
    let fused = fusion::fuse_graph(
        tape,
        p_weighted,
        g_weighted,
        &selection,
        tp.get("fus.w"),
        tp.get("fus.b"),
    );

    // pooled representation: mean over fused tokens and the two globals
    let stack = tape.concat_rows(&[fused, global_p, global_g]);
    let n_rows = tape.value(stack).nrows() as f64;
    let summed = tape.sum_rows(stack);
    let rep = tape.scale(summed, 1.0 / n_rows);
    let logits_w = tape.matmul(rep, tp.get("head.w"));
    let logits = tape.add_row(logits_w, tp.get("head.b"));

    Ok(PatientForward {
        logits,
        global_p,
        global_g,
        p_weighted,
        g_weighted,
        p_refined,
        g_real,
        attention,
        imp_p,
        imp_g,
        selection,
    })
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    d: usize,
    n_outputs: usize,
    hidden: usize,
    n_iterations: usize,
    k_top: usize,
    step: u64,
    phase: u8,
    frozen: Vec<String>,
    parameters: Vec<(String, usize, usize)>,
    has_mean_g: bool,
    config_hash: u64,
}

fn blob_name(param: &str) -> String {
    format!("{}.bin", param.replace('.', "_"))
}

pub fn save_checkpoint(state: &ModelState, dir: &Path, config_hash: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: 1,
        d: state.d,
        n_outputs: state.n_outputs,
        hidden: state.hidden,
        n_iterations: state.n_iterations,
        k_top: state.k_top,
        step: state.step,
        phase: state.phase,
        frozen: state.frozen.iter().cloned().collect(),
        parameters: state
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.nrows(), v.ncols()))
            .collect(),
        has_mean_g: state.mean_g_tokens.is_some(),
        config_hash,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Schema(format!("manifest encode error: {e}")))?;
    std::fs::write(dir.join("checkpoint.json"), text)?;
    for (name, arr) in &state.params {
        data::write_embedding_file(&dir.join(blob_name(name)), arr)?;
    }
    data::write_embedding_file(&dir.join("proto_init.bin"), &state.proto_init)?;
    if let Some(mean) = &state.mean_g_tokens {
        data::write_embedding_file(&dir.join("mean_g_tokens.bin"), mean)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, u64)> {
    let text = std::fs::read_to_string(dir.join("checkpoint.json")).map_err(|e| Error::Load {
        path: dir.join("checkpoint.json"),
        detail: e.to_string(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("manifest parse error: {e}")))?;
    let mut params = BTreeMap::new();
    for (name, r, c) in &manifest.parameters {
        let arr = data::read_embedding_file(&dir.join(blob_name(name)))?;
        if arr.dim() != (*r, *c) {
            return Err(Error::Schema(format!(
                "parameter {name} has shape {:?}, manifest says ({r}, {c})",
                arr.dim()
            )));
        }
        params.insert(name.clone(), arr);
    }
    let proto_init = data::read_embedding_file(&dir.join("proto_init.bin"))?;
    let mean_g_tokens = if manifest.has_mean_g {
        Some(data::read_embedding_file(&dir.join("mean_g_tokens.bin"))?)
    } else {
        None
    };
    let state = ModelState {
        d: manifest.d,
        n_outputs: manifest.n_outputs,
        hidden: manifest.hidden,
        n_iterations: manifest.n_iterations,
        k_top: manifest.k_top,
        params,
        proto_init,
        mean_g_tokens,
        step: manifest.step,
        phase: manifest.phase,
        frozen: manifest.frozen.into_iter().collect(),
        adam_m: BTreeMap::new(),
        adam_v: BTreeMap::new(),
        adam_t: 0,
    };
    Ok((state, manifest.config_hash))
}

/// Fits the cohort-mean genomic token stack over patients with real profiles.
pub fn fit_mean_genomic_tokens(state: &ModelState, patients: &[PatientRecord]) -> Result<Arr> {
    let mut sum = Arr::zeros((N_GROUPS, state.d));
    let mut count = 0usize;
    for rec in patients {
        let Some(prof) = rec.effective_genomic() else {
            continue;
        };
        let mut tape = Tape::new();
        let tp = TapeParams::leaf(&mut tape, state);
        let pooled = genomic_pooled_graph(
            &mut tape,
            &prof.group_means(),
            tp.get("gen.w"),
            tp.get("gen.b"),
        );
        let attn_g = tp.attention("attn_g");
        let g = self_attention_residual_graph(&mut tape, pooled, &attn_g);
        sum = sum + tape.value(g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Precondition(
            "no patient with a real genomic profile to fit mean tokens".into(),
        ));
    }
    Ok(sum / count as f64)
}
