//! Biological prototyping: prompt-initialized histology prototypes refined by
//! cross-attention over patch bags, genomic prototypes pooled from functional
//! groups and refined by self-attention, and dynamic importance weighting.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Tape, Var};
use crate::data::{GenomicProfile, SlideBag, N_GROUPS};
use crate::error::{Error, Result};

/// An ordered set of named prototype tokens with optional importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// (N, D)
    pub tokens: Arr,
    pub names: Vec<String>,
    pub importance: Option<Vec<f64>>,
}

impl PrototypeSet {
    pub fn n(&self) -> usize {
        self.tokens.nrows()
    }
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Arr,
    pub w_k: Arr,
    pub w_v: Arr,
    pub n_iterations: usize,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
            w_v: Array2::eye(d),
            n_iterations: 1,
        }
    }

    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = || Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        Self {
            w_q: mat(),
            w_k: mat(),
            w_v: mat(),
            n_iterations: 2,
        }
    }
}

/// Affine stack D -> H -> 1 whose sigmoid output is the prototype weight.
#[derive(Debug, Clone)]
pub struct ImportanceHead {
    pub w1: Arr, // (D, H)
    pub b1: Arr, // (1, H)
    pub w2: Arr, // (H, 1)
    pub b2: Arr, // (1, 1)
}

impl ImportanceHead {
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

/// Prompt-to-vector provider. The hash variant derives a seeded unit vector
/// from the prompt text so initialization is deterministic without any
/// external encoder; the file-backed variant serves precomputed rows.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    DeterministicHash { dimension: usize },
    FileBacked { names: Vec<String>, rows: Arr },
}

impl EmbeddingProvider {
    pub fn dimension(&self) -> usize {
        match self {
            EmbeddingProvider::DeterministicHash { dimension } => *dimension,
            EmbeddingProvider::FileBacked { rows, .. } => rows.ncols(),
        }
    }

    pub fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::DeterministicHash { dimension } => {
                let mut h: u64 = 0xcbf29ce484222325;
                for b in prompt.as_bytes() {
                    h ^= *b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let mut v: Vec<f64> = (0..*dimension)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                Ok(v)
            }
            EmbeddingProvider::FileBacked { names, rows } => {
                let idx = names.iter().position(|n| n == prompt).ok_or_else(|| {
                    Error::Precondition(format!("no precomputed embedding for prompt {prompt:?}"))
                })?;
                Ok(rows.row(idx).to_vec())
            }
        }
    }

    /// Reads a delimited-text prompt-embedding file: one row of D reals per
    /// prompt, row order matching `names`.
    pub fn from_file(path: &std::path::Path, names: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(|c| c == '\t' || c == ',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        if rows.len() != names.len() {
            return Err(Error::Schema(format!(
                "{}: expected {} rows, found {}",
                path.display(),
                names.len(),
                rows.len()
            )));
        }
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let rows = Array2::from_shape_vec((names.len(), d), flat)
            .map_err(|e| Error::Schema(format!("{}: ragged rows ({e})", path.display())))?;
        Ok(EmbeddingProvider::FileBacked {
            names: names.to_vec(),
            rows,
        })
    }
}

pub fn init_histology_prototypes(
    category_names: &[String],
    provider: &EmbeddingProvider,
) -> Result<PrototypeSet> {
    if category_names.len() != N_GROUPS {
        return Err(Error::Precondition(format!(
            "expected {N_GROUPS} category names, got {}",
            category_names.len()
        )));
    }
    let d = provider.dimension();
    let mut tokens = Array2::zeros((N_GROUPS, d));
    for (i, name) in category_names.iter().enumerate() {
        let v = provider.embed(name)?;
        for (j, x) in v.iter().enumerate() {
            tokens[[i, j]] = *x;
        }
    }
    Ok(PrototypeSet {
        tokens,
        names: category_names.to_vec(),
        importance: None,
    })
}

// ---------------------------------------------------------------------------
// tape-graph builders (shared by training, eval, and gradcheck)
// ---------------------------------------------------------------------------

pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttentionVars {
    pub fn leaf(tape: &mut Tape, p: &AttentionParams) -> Self {
        Self {
            w_q: tape.leaf(p.w_q.clone()),
            w_k: tape.leaf(p.w_k.clone()),
            w_v: tape.leaf(p.w_v.clone()),
        }
    }
}

/// Scaled dot-product attention; returns (output tokens, attention matrix).
pub fn attention_graph(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    params: &AttentionVars,
) -> (Var, Var) {
    let d = tape.value(queries).ncols() as f64;
    let q = tape.matmul(queries, params.w_q);
    let k = tape.matmul(keys_values, params.w_k);
    let v = tape.matmul(keys_values, params.w_v);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scaled);
    let out = tape.matmul(attn, v);
    (out, attn)
}

/// Eq-style iterative cross-attention refinement of prototype tokens over a
/// patch bag; projection matrices are shared across iterations. Returns the
/// refined tokens and the final iteration's attention matrix.
pub fn refine_graph(
    tape: &mut Tape,
    protos: Var,
    patches: Var,
    params: &AttentionVars,
    n_iterations: usize,
) -> (Var, Var) {
    let mut current = protos;
    let mut last_attn = protos; // replaced on first iteration
    for _ in 0..n_iterations.max(1) {
        let (out, attn) = attention_graph(tape, current, patches, params);
        current = out;
        last_attn = attn;
    }
    (current, last_attn)
}

/// Self-attention layer with residual connection.
pub fn self_attention_residual_graph(tape: &mut Tape, tokens: Var, params: &AttentionVars) -> Var {
    let (out, _) = attention_graph(tape, tokens, tokens, params);
    tape.add(tokens, out)
}

pub struct ImportanceVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ImportanceVars {
    pub fn leaf(tape: &mut Tape, h: &ImportanceHead) -> Self {
        Self {
            w1: tape.leaf(h.w1.clone()),
            b1: tape.leaf(h.b1.clone()),
            w2: tape.leaf(h.w2.clone()),
            b2: tape.leaf(h.b2.clone()),
        }
    }
}

/// sigmoid(f_theta(z_i)) per token, as an (N,1) column.
pub fn importance_graph(tape: &mut Tape, tokens: Var, head: &ImportanceVars) -> Var {
    let h = tape.matmul(tokens, head.w1);
    let h = tape.add_row(h, head.b1);
    let h = tape.tanh(h);
    let logits = tape.matmul(h, head.w2);
    let logits = tape.add_row(logits, head.b2);
    tape.sigmoid(logits)
}

/// Pooled pre-attention genomic tokens: masked group mean times a per-group
/// affine map. Fully masked groups fall back to the learned group bias.
pub fn genomic_pooled_graph(
    tape: &mut Tape,
    group_means: &[Option<f64>; N_GROUPS],
    w_gene: Var, // (6, D) per-group direction
    b_gene: Var, // (6, D) per-group bias
) -> Var {
    let means = Arr::from_shape_fn((N_GROUPS, 1), |(g, _)| group_means[g].unwrap_or(0.0));
    let means = tape.leaf(means);
    let scaled = tape.mul_col(w_gene, means);
    tape.add(scaled, b_gene)
}

// ---------------------------------------------------------------------------
// eager operations on prototype sets
// ---------------------------------------------------------------------------

pub fn refine_histology_prototypes(
    protos: &PrototypeSet,
    patches: &SlideBag,
    params: &AttentionParams,
) -> Result<(PrototypeSet, Arr)> {
    if patches.patch_embeddings.nrows() == 0 {
        return Err(Error::Precondition("empty patch bag".into()));
    }
    if patches.patch_embeddings.ncols() != protos.dim() || params.w_q.nrows() != protos.dim() {
        return Err(Error::Precondition("embedding dimension mismatch".into()));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(protos.tokens.clone());
    let x = tape.leaf(patches.patch_embeddings.clone());
    let vars = AttentionVars::leaf(&mut tape, params);
    let (out, attn) = refine_graph(&mut tape, p, x, &vars, params.n_iterations);
    Ok((
        PrototypeSet {
            tokens: tape.value(out).clone(),
            names: protos.names.clone(),
            importance: None,
        },
        tape.value(attn).clone(),
    ))
}

/// Per-group affine embedders mapping a pooled scalar to a D-token.
#[derive(Debug, Clone)]
pub struct GroupEmbedders {
    pub w: Arr, // (6, D)
    pub b: Arr, // (6, D)
}

impl GroupEmbedders {
    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Array2::from_shape_fn((N_GROUPS, d), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b: Array2::from_shape_fn((N_GROUPS, d), |_| rng.sample::<f64, _>(StandardNormal) * scale),
        }
    }
}

pub fn build_genomic_prototypes(
    profile: &GenomicProfile,
    embedders: &GroupEmbedders,
    self_attn: &AttentionParams,
    group_names: &[String],
) -> Result<(PrototypeSet, Vec<usize>)> {
    let means = profile.group_means();
    let missing_groups: Vec<usize> = (0..N_GROUPS).filter(|&g| means[g].is_none()).collect();
    let mut tape = Tape::new();
    let w = tape.leaf(embedders.w.clone());
    let b = tape.leaf(embedders.b.clone());
    let pooled = genomic_pooled_graph(&mut tape, &means, w, b);
    let vars = AttentionVars::leaf(&mut tape, self_attn);
    let refined = self_attention_residual_graph(&mut tape, pooled, &vars);
    Ok((
        PrototypeSet {
            tokens: tape.value(refined).clone(),
            names: group_names.to_vec(),
            importance: None,
        },
        missing_groups,
    ))
}

pub fn importance_weights(protos: &PrototypeSet, head: &ImportanceHead) -> Vec<f64> {
    let mut tape = Tape::new();
    let t = tape.leaf(protos.tokens.clone());
    let vars = ImportanceVars::leaf(&mut tape, head);
    let w = importance_graph(&mut tape, t, &vars);
    tape.value(w).column(0).to_vec()
}

pub fn apply_importance(protos: &PrototypeSet, w: &[f64]) -> Result<PrototypeSet> {
    if w.len() != protos.n() {
        return Err(Error::Precondition(format!(
            "importance length {} does not match {} prototypes",
            w.len(),
            protos.n()
        )));
    }
    let mut tokens = protos.tokens.clone();
    for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x * w[i]);
    }
    Ok(PrototypeSet {
        tokens,
        names: protos.names.clone(),
        importance: Some(w.to_vec()),
    })
}
