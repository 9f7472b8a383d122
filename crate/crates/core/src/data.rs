//! Cohort data model: ingestion, synthetic generation, fold splitting, and
//! missingness simulation. Cohorts are immutable after construction; every
//! operation here returns a new value.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_GROUPS: usize = 6;

pub const HISTOLOGY_CATEGORIES: [&str; 6] = [
    "Neoplastic",
    "Necrotic",
    "Inflammatory",
    "Stromal",
    "Infiltrative",
    "Other Cell Types",
];

pub const GENOMIC_GROUPS: [&str; 6] = [
    "Tumor Suppressor Genes",
    "Oncogenes",
    "Protein Kinases",
    "Cell Differentiation Markers",
    "Transcription Factors",
    "Cytokines and Growth Factors",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    /// (n_patches, d_embed)
    pub patch_embeddings: Array2<f64>,
    pub patch_coords: Option<Vec<(u32, u32)>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenomicProfile {
    pub gene_values: BTreeMap<String, f64>,
    pub group_map: BTreeMap<String, usize>,
    /// false = feature-wise missing
    pub feature_mask: BTreeMap<String, bool>,
}

impl GenomicProfile {
    /// Masked mean of gene values per functional group; None when every gene
    /// of the group is masked (or the group is empty).
    pub fn group_means(&self) -> [Option<f64>; N_GROUPS] {
        let mut sums = [0.0; N_GROUPS];
        let mut counts = [0usize; N_GROUPS];
        for (gene, &v) in &self.gene_values {
            let g = self.group_map[gene];
            if *self.feature_mask.get(gene).unwrap_or(&true) {
                sums[g] += v;
                counts[g] += 1;
            }
        }
        let mut out = [None; N_GROUPS];
        for g in 0..N_GROUPS {
            if counts[g] > 0 {
                out[g] = Some(sums[g] / counts[g] as f64);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub slides: Vec<SlideBag>,
    pub genomic: Option<GenomicProfile>,
    pub label_diagnosis: usize,
    pub label_grade: usize,
    pub survival_time: f64,
    pub event_indicator: bool,
    pub genomic_missing: bool,
}

impl PatientRecord {
    /// Genomic profile usable downstream: None when flagged missing.
    pub fn effective_genomic(&self) -> Option<&GenomicProfile> {
        if self.genomic_missing {
            None
        } else {
            self.genomic.as_ref()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub gene_group_names: Vec<String>,
    pub histology_category_names: Vec<String>,
    pub provenance: String,
}

impl Cohort {
    pub fn d_embed(&self) -> usize {
        self.patients[0].slides[0].patch_embeddings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gene_group_names.len() != N_GROUPS || self.histology_category_names.len() != N_GROUPS
        {
            return Err(Error::Schema(
                "cohort must carry exactly 6 gene group names and 6 histology category names"
                    .into(),
            ));
        }
        if self.patients.is_empty() {
            return Err(Error::Schema("cohort has no patients".into()));
        }
        let d = self.d_embed();
        for p in &self.patients {
            if p.slides.is_empty() {
                return Err(Error::Schema(format!(
                    "patient {} has no slides",
                    p.patient_id
                )));
            }
            for s in &p.slides {
                if s.patch_embeddings.nrows() == 0 {
                    return Err(Error::Schema(format!("slide {} has no patches", s.slide_id)));
                }
                if s.patch_embeddings.ncols() != d {
                    return Err(Error::Schema(format!(
                        "slide {} has embedding dimension {} but cohort uses {}",
                        s.slide_id,
                        s.patch_embeddings.ncols(),
                        d
                    )));
                }
                if let Some(coords) = &s.patch_coords {
                    if coords.len() != s.patch_embeddings.nrows() {
                        return Err(Error::Schema(format!(
                            "slide {} coords length mismatch",
                            s.slide_id
                        )));
                    }
                }
            }
            if p.label_diagnosis >= 6 || p.label_grade >= 3 {
                return Err(Error::Schema(format!(
                    "patient {} has out-of-range labels",
                    p.patient_id
                )));
            }
            if !(p.survival_time > 0.0) {
                return Err(Error::Schema(format!(
                    "patient {} has non-positive survival time",
                    p.patient_id
                )));
            }
            if let Some(g) = &p.genomic {
                for gene in g.gene_values.keys() {
                    if !g.group_map.contains_key(gene) {
                        return Err(Error::Schema(format!(
                            "gene {gene} has no functional group assignment"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessMode {
    PatientWise,
    FeatureWise,
}

impl std::fmt::Display for MissingnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MissingnessMode::PatientWise => write!(f, "patient_wise"),
            MissingnessMode::FeatureWise => write!(f, "feature_wise"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mode: MissingnessMode,
    pub rate: f64,
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "missingness rate {} outside [0,1]",
                self.rate
            )));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Flags patients or masks gene features according to `spec`. Gene values are
/// never altered; feature-wise masking only flips `feature_mask`.
pub fn apply_missingness(cohort: &Cohort, spec: &MissingnessSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut out = cohort.clone();
    match spec.mode {
        MissingnessMode::PatientWise => {
            let n = out.patients.len();
            let n_missing = (spec.rate * n as f64).floor() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(n_missing) {
                out.patients[i].genomic_missing = true;
            }
        }
        MissingnessMode::FeatureWise => {
            for p in &mut out.patients {
                let Some(g) = &mut p.genomic else { continue };
                let mut genes: Vec<String> = g.gene_values.keys().cloned().collect();
                let n_mask = (spec.rate * genes.len() as f64).floor() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&p.patient_id));
                genes.shuffle(&mut rng);
                for gene in &genes {
                    g.feature_mask.insert(gene.clone(), true);
                }
                for gene in genes.iter().take(n_mask) {
                    g.feature_mask.insert(gene.clone(), false);
                }
            }
        }
    }
    Ok(out)
}

/// Patient-level k-fold split; returns (train_ids, val_ids) per fold.
pub fn split_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let n = cohort.patients.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "fold count {k} invalid for {n} patients"
        )));
    }
    let mut ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let val = folds[f].clone();
        let train: Vec<String> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        out.push((train, val));
    }
    Ok(out)
}

/// Latent-factor synthetic cohort: patch embeddings and gene values are two
/// noisy views of the same per-patient latent, labels and survival are
/// functions of that latent. Deterministic in its arguments.
pub fn generate_synthetic(
    n_patients: usize,
    d_embed: usize,
    n_genes: usize,
    seed: u64,
) -> Result<Cohort> {
    if n_patients < 2 {
        return Err(Error::Config("need at least 2 patients".into()));
    }
    if n_genes < N_GROUPS {
        return Err(Error::Config(format!(
            "need at least {N_GROUPS} genes to populate all functional groups"
        )));
    }
    const LATENT: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // shared structure: category signatures, latent projections, gene loadings
    let randn_mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
    };
    let signatures = randn_mat(N_GROUPS, d_embed, &mut rng) * 1.2;
    let latent_proj = randn_mat(d_embed, LATENT, &mut rng) / (LATENT as f64).sqrt();
    // per-category expression directions: morphology of category c reflects
    // the molecular program of functional group c along a fixed direction
    let mut group_dirs = randn_mat(N_GROUPS, d_embed, &mut rng);
    for mut row in group_dirs.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }

    // group sizes: remainder spread over the first groups
    let base = n_genes / N_GROUPS;
    let rem = n_genes % N_GROUPS;
    let mut gene_ids = Vec::with_capacity(n_genes);
    let mut group_of = Vec::with_capacity(n_genes);
    for g in 0..N_GROUPS {
        let size = base + usize::from(g < rem);
        for j in 0..size {
            gene_ids.push(format!("gene_{g}_{j:03}"));
            group_of.push(g);
        }
    }
    // per-gene latent loadings: each group leans on one latent axis plus noise,
    // with survival-relevant axes (1, 2) emphasized so genomics carries signal
    let mut loadings: Vec<[f64; LATENT]> = Vec::with_capacity(n_genes);
    for (j, &g) in group_of.iter().enumerate() {
        let _ = j;
        let mut v = [0.0; LATENT];
        for coord in v.iter_mut() {
            *coord = rng.sample::<f64, _>(StandardNormal) * 0.3;
        }
        v[(g % LATENT + 1).min(LATENT - 1)] += 0.8;
        v[1] += 0.5;
        v[2] += 0.3;
        loadings.push(v);
    }

    // standard-normal sextile and tercile cut points
    let diag_cuts = [-0.9674, -0.4307, 0.0, 0.4307, 0.9674];
    let grade_cuts = [-0.4307, 0.4307];

    let mut patients = Vec::with_capacity(n_patients);
    for pi in 0..n_patients {
        let z: [f64; LATENT] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let label_diagnosis = diag_cuts.iter().filter(|&&c| z[0] > c).count();
        let label_grade = grade_cuts.iter().filter(|&&c| z[1] > c).count();
        let hazard = 0.1 * (1.5 * z[1] + 0.75 * z[2]).exp();
        let u: f64 = rng.gen_range(1e-12..1.0);
        let t_event = -u.ln() / hazard;
        let uc: f64 = rng.gen_range(1e-12..1.0);
        let t_censor = -uc.ln() * 25.0;
        let event_indicator = t_event <= t_censor;
        let survival_time = t_event.min(t_censor).max(1e-6);

        // per-patient histology category mixture
        let mix_logits: [f64; N_GROUPS] =
            std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let mix_max = mix_logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut mix: Vec<f64> = mix_logits.iter().map(|l| (l - mix_max).exp()).collect();
        let msum: f64 = mix.iter().sum();
        mix.iter_mut().for_each(|m| *m /= msum);

        let n_slides = 1 + rng.gen_range(0..3usize);
        let mut slides = Vec::with_capacity(n_slides);
        for si in 0..n_slides {
            let n_patches = rng.gen_range(12..=24usize);
            let grid_w = (n_patches as f64).sqrt().ceil() as u32;
            let mut emb = Array2::zeros((n_patches, d_embed));
            let mut coords = Vec::with_capacity(n_patches);
            for pt in 0..n_patches {
                let r: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut cat = N_GROUPS - 1;
                for (c, &m) in mix.iter().enumerate() {
                    acc += m;
                    if r < acc {
                        cat = c;
                        break;
                    }
                }
                // the program signal mirrors the group-mean structure of the
                // matching genomic functional group; expression-style
                // activities are skewed, which also pins down the orientation
                // of each token line for the adversarial translators
                let raw = 0.8 * z[(cat % LATENT + 1).min(LATENT - 1)]
                    + 0.5 * z[1]
                    + 0.3 * z[2];
                let program = raw + 0.25 * raw * raw;
                for d in 0..d_embed {
                    // survival-driving axes 1 and 2 reach patches only
                    // through the per-category program term
                    const AXIS_WEIGHT: [f64; LATENT] = [1.0, 0.0, 0.0, 1.0];
                    let lat: f64 = (0..LATENT)
                        .map(|l| latent_proj[[d, l]] * z[l] * AXIS_WEIGHT[l])
                        .sum();
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                    emb[[pt, d]] = signatures[[cat, d]] * 0.3
                        + lat
                        + group_dirs[[cat, d]] * program * 0.8
                        + noise * 0.25;
                }
                coords.push((pt as u32 / grid_w, pt as u32 % grid_w));
            }
            slides.push(SlideBag {
                slide_id: format!("P{pi:04}_S{si}"),
                patch_embeddings: emb,
                patch_coords: Some(coords),
            });
        }

        let mut gene_values = BTreeMap::new();
        let mut group_map = BTreeMap::new();
        let mut feature_mask = BTreeMap::new();
        for (j, id) in gene_ids.iter().enumerate() {
            let signal: f64 = (0..LATENT).map(|l| loadings[j][l] * z[l]).sum();
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            gene_values.insert(id.clone(), signal + 0.25 * signal * signal + noise * 0.2);
            group_map.insert(id.clone(), group_of[j]);
            feature_mask.insert(id.clone(), true);
        }

        patients.push(PatientRecord {
            patient_id: format!("P{pi:04}"),
            slides,
            genomic: Some(GenomicProfile {
                gene_values,
                group_map,
                feature_mask,
            }),
            label_diagnosis,
            label_grade,
            survival_time,
            event_indicator,
            genomic_missing: false,
        });
    }

    let cohort = Cohort {
        patients,
        gene_group_names: GENOMIC_GROUPS.iter().map(|s| s.to_string()).collect(),
        histology_category_names: HISTOLOGY_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        provenance: format!("synthetic(n={n_patients},d={d_embed},genes={n_genes},seed={seed})"),
    };
    cohort.validate()?;
    Ok(cohort)
}

// ---------------------------------------------------------------------------
// on-disk formats
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSlide {
    slide_id: String,
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPatient {
    patient_id: String,
    slides: Vec<ManifestSlide>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    genomic_table: String,
    gene_group_table: String,
    labels_table: String,
    histology_category_names: Vec<String>,
    gene_group_names: Vec<String>,
    patients: Vec<ManifestPatient>,
}

const EMBED_MAGIC: &[u8; 4] = b"PFE1";

pub fn write_embedding_file(path: &Path, emb: &Array2<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(EMBED_MAGIC)?;
    f.write_u64::<LittleEndian>(emb.nrows() as u64)?;
    f.write_u64::<LittleEndian>(emb.ncols() as u64)?;
    for v in emb.iter() {
        f.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<Array2<f64>> {
    if path.extension().map(|e| e == "tsv").unwrap_or(false) {
        return read_embedding_text(path);
    }
    let mut f = std::fs::File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(Error::Schema(format!(
            "{} is not an embedding file (bad magic)",
            path.display()
        )));
    }
    let rows = f.read_u64::<LittleEndian>()? as usize;
    let cols = f.read_u64::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f.read_f32::<LittleEndian>()? as f64);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Delimited-text fallback: one row of reals per patch.
fn read_embedding_text(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut rows = Vec::new();
    let mut width = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = split_delim(line)
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Schema(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| Error::Schema(format!("{}: empty file", path.display())))?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / w, w), flat)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn split_delim(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c| c == '\t' || c == ',').map(str::trim)
}

pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: 1,
        genomic_table: "genomics.tsv".into(),
        gene_group_table: "gene_groups.tsv".into(),
        labels_table: "labels.tsv".into(),
        histology_category_names: cohort.histology_category_names.clone(),
        gene_group_names: cohort.gene_group_names.clone(),
        patients: Vec::new(),
    };

    let mut labels = String::from("patient_id\tdiagnosis\tgrade\tsurvival_time\tevent\n");
    let mut gene_order: Vec<String> = Vec::new();
    let mut group_rows = String::from("gene_id\tgroup_id\n");
    let mut genomic_rows = String::new();

    for p in &cohort.patients {
        let mut slides = Vec::new();
        for s in &p.slides {
            let fname = format!("{}.bin", s.slide_id);
            write_embedding_file(&dir.join(&fname), &s.patch_embeddings)?;
            if let Some(coords) = &s.patch_coords {
                let body: String = coords
                    .iter()
                    .map(|(r, c)| format!("{r}\t{c}\n"))
                    .collect();
                std::fs::write(dir.join(format!("{}.coords.tsv", s.slide_id)), body)?;
            }
            slides.push(ManifestSlide {
                slide_id: s.slide_id.clone(),
                path: fname,
            });
        }
        manifest.patients.push(ManifestPatient {
            patient_id: p.patient_id.clone(),
            slides,
        });
        labels.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.patient_id,
            p.label_diagnosis,
            p.label_grade,
            p.survival_time,
            u8::from(p.event_indicator)
        ));
        if let Some(g) = &p.genomic {
            if gene_order.is_empty() {
                gene_order = g.gene_values.keys().cloned().collect();
                for gene in &gene_order {
                    group_rows.push_str(&format!("{gene}\t{}\n", g.group_map[gene]));
                }
            }
            if !p.genomic_missing {
                genomic_rows.push_str(&p.patient_id);
                for gene in &gene_order {
                    genomic_rows.push_str(&format!("\t{}", g.gene_values[gene]));
                }
                genomic_rows.push('\n');
            }
        }
    }
    let header = std::iter::once("patient_id".to_string())
        .chain(gene_order.iter().cloned())
        .collect::<Vec<_>>()
        .join("\t");
    std::fs::write(dir.join("genomics.tsv"), format!("{header}\n{genomic_rows}"))?;
    std::fs::write(dir.join("gene_groups.tsv"), group_rows)?;
    std::fs::write(dir.join("labels.tsv"), labels)?;
    let mf = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    std::fs::write(dir.join("manifest.json"), mf)?;
    Ok(())
}

pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::Load {
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("manifest parse error: {e}")))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    if manifest.gene_group_names.len() != N_GROUPS
        || manifest.histology_category_names.len() != N_GROUPS
    {
        return Err(Error::Schema(
            "manifest must list exactly 6 gene groups and 6 histology categories".into(),
        ));
    }

    // gene -> group
    let group_text = read_table(&dir.join(&manifest.gene_group_table))?;
    let mut group_map = BTreeMap::new();
    for line in group_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let toks: Vec<&str> = split_delim(line).collect();
        if toks.len() != 2 {
            return Err(Error::Schema(format!("bad gene-group row: {line}")));
        }
        let gid: usize = toks[1]
            .parse()
            .map_err(|_| Error::Schema(format!("bad group id in row: {line}")))?;
        if gid >= N_GROUPS {
            return Err(Error::Schema(format!("group id {gid} out of range 0..6")));
        }
        group_map.insert(toks[0].to_string(), gid);
    }

    // wide genomic table: header gene ids, one row per patient
    let gen_text = read_table(&dir.join(&manifest.genomic_table))?;
    let mut gen_lines = gen_text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = gen_lines
        .next()
        .map(|l| split_delim(l).skip(1).map(str::to_string).collect())
        .unwrap_or_default();
    for gene in &header {
        if !group_map.contains_key(gene) {
            return Err(Error::Schema(format!(
                "gene {gene} has no functional group assignment"
            )));
        }
    }
    let mut genomics: BTreeMap<String, GenomicProfile> = BTreeMap::new();
    for line in gen_lines {
        let toks: Vec<&str> = split_delim(line).collect();
        if toks.len() != header.len() + 1 {
            return Err(Error::Schema(format!(
                "genomic row for {} has {} values, expected {}",
                toks.first().unwrap_or(&"?"),
                toks.len().saturating_sub(1),
                header.len()
            )));
        }
        let mut profile = GenomicProfile::default();
        for (gene, tok) in header.iter().zip(toks.iter().skip(1)) {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Schema(format!("bad gene value {tok} for {gene}")))?;
            profile.gene_values.insert(gene.clone(), v);
            profile.group_map.insert(gene.clone(), group_map[gene]);
            profile.feature_mask.insert(gene.clone(), true);
        }
        genomics.insert(toks[0].to_string(), profile);
    }

    // labels
    let lab_text = read_table(&dir.join(&manifest.labels_table))?;
    struct Labels {
        diagnosis: usize,
        grade: usize,
        time: f64,
        event: bool,
    }
    let mut labels: BTreeMap<String, Labels> = BTreeMap::new();
    for line in lab_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let toks: Vec<&str> = split_delim(line).collect();
        if toks.len() != 5 {
            return Err(Error::Schema(format!("bad labels row: {line}")));
        }
        labels.insert(
            toks[0].to_string(),
            Labels {
                diagnosis: toks[1]
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad diagnosis in row: {line}")))?,
                grade: toks[2]
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad grade in row: {line}")))?,
                time: toks[3]
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad time in row: {line}")))?,
                event: toks[4] == "1" || toks[4].eq_ignore_ascii_case("true"),
            },
        );
    }

    let mut patients = Vec::new();
    for mp in &manifest.patients {
        let lab = labels.get(&mp.patient_id).ok_or_else(|| {
            Error::Schema(format!("patient {} missing from labels table", mp.patient_id))
        })?;
        let mut slides = Vec::new();
        for ms in &mp.slides {
            let path = dir.join(&ms.path);
            let emb = read_embedding_file(&path)?;
            let coords_path = dir.join(format!("{}.coords.tsv", ms.slide_id));
            let patch_coords = if coords_path.exists() {
                let ct = std::fs::read_to_string(&coords_path)?;
                let coords: Vec<(u32, u32)> = ct
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        let t: Vec<&str> = split_delim(l).collect();
                        Ok((
                            t[0].parse().map_err(|_| Error::Schema("bad coord".into()))?,
                            t[1].parse().map_err(|_| Error::Schema("bad coord".into()))?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                Some(coords)
            } else {
                None
            };
            slides.push(SlideBag {
                slide_id: ms.slide_id.clone(),
                patch_embeddings: emb,
                patch_coords,
            });
        }
        let genomic = genomics.get(&mp.patient_id).cloned();
        let genomic_missing = genomic.is_none();
        patients.push(PatientRecord {
            patient_id: mp.patient_id.clone(),
            slides,
            genomic,
            label_diagnosis: lab.diagnosis,
            label_grade: lab.grade,
            survival_time: lab.time,
            event_indicator: lab.event,
            genomic_missing,
        });
    }

    let cohort = Cohort {
        patients,
        gene_group_names: manifest.gene_group_names,
        histology_category_names: manifest.histology_category_names,
        provenance: manifest_path.display().to_string(),
    };
    cohort.validate()?;
    Ok(cohort)
}

fn read_table(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.clone(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let a = generate_synthetic(20, 16, 24, 7).unwrap();
        let b = generate_synthetic(20, 16, 24, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patients.len(), 20);
        let g = a.patients[0].genomic.as_ref().unwrap();
        let mut counts = [0usize; 6];
        for &grp in g.group_map.values() {
            counts[grp] += 1;
        }
        assert_eq!(counts, [4, 4, 4, 4, 4, 4]);
    }

    #[test]
    fn synthetic_group_sizes_120() {
        let c = generate_synthetic(2, 8, 120, 7).unwrap();
        let g = c.patients[0].genomic.as_ref().unwrap();
        let mut counts = [0usize; 6];
        for &grp in g.group_map.values() {
            counts[grp] += 1;
        }
        assert_eq!(counts, [20; 6]);
    }

    #[test]
    fn too_few_genes_rejected() {
        assert!(matches!(
            generate_synthetic(10, 8, 5, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missingness_rates() {
        let c = generate_synthetic(100, 8, 12, 3).unwrap();
        for (rate, expect) in [(0.0, 0usize), (0.5, 50), (1.0, 100)] {
            let spec = MissingnessSpec {
                mode: MissingnessMode::PatientWise,
                rate,
                seed: 11,
            };
            let out = apply_missingness(&c, &spec).unwrap();
            let n = out.patients.iter().filter(|p| p.genomic_missing).count();
            assert_eq!(n, expect);
            // idempotent re-application
            let again = apply_missingness(&out, &spec).unwrap();
            if rate == 0.0 || rate == 1.0 {
                assert_eq!(out, again);
            }
        }
        let zero = apply_missingness(
            &c,
            &MissingnessSpec {
                mode: MissingnessMode::PatientWise,
                rate: 0.0,
                seed: 11,
            },
        )
        .unwrap();
        assert_eq!(zero, c);
    }

    #[test]
    fn feature_masking_preserves_values() {
        let c = generate_synthetic(10, 8, 24, 3).unwrap();
        let spec = MissingnessSpec {
            mode: MissingnessMode::FeatureWise,
            rate: 0.5,
            seed: 5,
        };
        let out = apply_missingness(&c, &spec).unwrap();
        for (a, b) in c.patients.iter().zip(out.patients.iter()) {
            let (ga, gb) = (a.genomic.as_ref().unwrap(), b.genomic.as_ref().unwrap());
            assert_eq!(ga.gene_values, gb.gene_values);
            let masked = gb.feature_mask.values().filter(|v| !**v).count();
            assert_eq!(masked, 12);
        }
    }

    #[test]
    fn folds_partition_patients() {
        let c = generate_synthetic(100, 8, 12, 3).unwrap();
        let folds = split_folds(&c, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<String> = Vec::new();
        for (train, val) in &folds {
            assert_eq!(val.len(), 20);
            assert_eq!(train.len(), 80);
            for id in val {
                assert!(!train.contains(id));
            }
            all.extend(val.iter().cloned());
        }
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(folds, split_folds(&c, 5, 9).unwrap());
    }

    #[test]
    fn paired_views_share_latent_structure() {
        // cross-patient similarity structure must agree between modalities:
        // correlation of pairwise cosine similarities (histology mean embedding
        // vs genomic vector) exceeds the permuted-pairing baseline
        let c = generate_synthetic(60, 16, 24, 7).unwrap();
        let mean_embs: Vec<Vec<f64>> = c
            .patients
            .iter()
            .map(|p| {
                let e = &p.slides[0].patch_embeddings;
                (0..e.ncols())
                    .map(|d| e.column(d).sum() / e.nrows() as f64)
                    .collect()
            })
            .collect();
        let gene_vecs: Vec<Vec<f64>> = c
            .patients
            .iter()
            .map(|p| p.genomic.as_ref().unwrap().gene_values.values().cloned().collect())
            .collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let n = c.patients.len();
        let statistic = |perm: &[usize]| {
            let mut hs = Vec::new();
            let mut gs = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    hs.push(cos(&mean_embs[i], &mean_embs[j]));
                    gs.push(cos(&gene_vecs[perm[i]], &gene_vecs[perm[j]]));
                }
            }
            pearson(&hs, &gs)
        };
        let identity: Vec<usize> = (0..n).collect();
        let mut shifted = identity.clone();
        shifted.rotate_left(17);
        let paired = statistic(&identity);
        let baseline = statistic(&shifted);
        assert!(
            paired > baseline + 0.1,
            "paired correlation {paired} not above baseline {baseline}"
        );
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn cohort_roundtrip_via_manifest() {
        let c = generate_synthetic(4, 8, 12, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cohort(&c, dir.path()).unwrap();
        let loaded = load_cohort(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.patients.len(), 4);
        for (a, b) in c.patients.iter().zip(loaded.patients.iter()) {
            assert_eq!(a.patient_id, b.patient_id);
            assert_eq!(a.slides.len(), b.slides.len());
            assert_eq!(a.label_diagnosis, b.label_diagnosis);
            // embeddings round through f32
            let da = &a.slides[0].patch_embeddings;
            let db = &b.slides[0].patch_embeddings;
            for (x, y) in da.iter().zip(db.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
            assert_eq!(a.slides[0].patch_coords, b.slides[0].patch_coords);
        }
    }

    #[test]
    fn absent_genomic_row_maps_to_flag() {
        let mut c = generate_synthetic(3, 8, 12, 13).unwrap();
        c.patients[1].genomic_missing = true; // drop patient 1 from the table
        let dir = tempfile::tempdir().unwrap();
        save_cohort(&c, dir.path()).unwrap();
        let loaded = load_cohort(&dir.path().join("manifest.json")).unwrap();
        assert!(!loaded.patients[0].genomic_missing);
        assert!(loaded.patients[1].genomic_missing);
        assert!(loaded.patients[1].genomic.is_none());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = generate_synthetic(2, 8, 12, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cohort(&c, dir.path()).unwrap();
        // overwrite one slide with a different dimension
        let bad = Array2::<f64>::zeros((3, 4));
        let slide_id = &c.patients[1].slides[0].slide_id;
        write_embedding_file(&dir.path().join(format!("{slide_id}.bin")), &bad).unwrap();
        std::fs::remove_file(dir.path().join(format!("{slide_id}.coords.tsv"))).unwrap();
        let err = load_cohort(&dir.path().join("manifest.json")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
    }
}
