//! Bipartite fusion: cosine affinity between prototype sets, greedy Top-K
//! pair selection without prototype reuse, affine pair mixing, and residual
//! concatenation of unmatched prototypes.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// (N_P, N_G), entries in [-1, 1]
    pub values: Arr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionSelection {
    pub pairs: Vec<(usize, usize)>,
    pub residual_p: Vec<usize>,
    pub residual_g: Vec<usize>,
}

/// Affine mixer over a concatenated prototype pair, 2D -> D.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w: Arr, // (2D, D)
    pub b: Arr, // (1, D)
}

impl FusionParams {
    pub fn random(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Array2::from_shape_fn((2 * d, d), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b: Array2::zeros((1, d)),
        }
    }
}

pub fn affinity_matrix(p_tokens: &Arr, g_tokens: &Arr) -> Result<AffinityMatrix> {
    for (name, m) in [("histology", p_tokens), ("genomic", g_tokens)] {
        for (i, row) in m.rows().into_iter().enumerate() {
            if row.iter().map(|x| x * x).sum::<f64>().sqrt() == 0.0 {
                return Err(Error::Normalization(format!(
                    "zero-norm {name} prototype row {i}"
                )));
            }
        }
    }
    let mut tape = Tape::new();
    let p = tape.leaf(p_tokens.clone());
    let g = tape.leaf(g_tokens.clone());
    let pn = tape.row_l2_normalize(p);
    let gn = tape.row_l2_normalize(g);
    let gt = tape.transpose(gn);
    let a = tape.matmul(pn, gt);
    Ok(AffinityMatrix {
        values: tape.value(a).clone(),
    })
}

/// Greedy matching: repeatedly take the largest remaining entry whose row and
/// column are both unused; ties break toward the smaller (n, m) index pair.
pub fn select_top_k(a: &AffinityMatrix, k: usize) -> Result<FusionSelection> {
    let (n_p, n_g) = a.values.dim();
    if k > n_p.min(n_g) {
        return Err(Error::Config(format!(
            "K={k} exceeds min(N_P={n_p}, N_G={n_g})"
        )));
    }
    let mut used_p = vec![false; n_p];
    let mut used_g = vec![false; n_g];
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for n in 0..n_p {
            if used_p[n] {
                continue;
            }
            for m in 0..n_g {
                if used_g[m] {
                    continue;
                }
                let v = a.values[[n, m]];
                // strict > keeps the lexicographically smallest maximizer
                if best.map(|(_, _, bv)| v > bv).unwrap_or(true) {
                    best = Some((n, m, v));
                }
            }
        }
        let (n, m, _) = best.expect("k <= min dims guarantees a free pair");
        used_p[n] = true;
        used_g[m] = true;
        pairs.push((n, m));
    }
    Ok(FusionSelection {
        pairs,
        residual_p: (0..n_p).filter(|&i| !used_p[i]).collect(),
        residual_g: (0..n_g).filter(|&i| !used_g[i]).collect(),
    })
}

/// Fused pairs in selection order, then histology residuals ascending, then
/// genomic residuals ascending: (N_P + N_G - K, D).
pub fn fuse_graph(
    tape: &mut Tape,
    p_tokens: Var,
    g_tokens: Var,
    sel: &FusionSelection,
    mixer_w: Var,
    mixer_b: Var,
) -> Var {
    let mut parts = Vec::new();
    for &(n, m) in &sel.pairs {
        let p_row = tape.row(p_tokens, n);
        let g_row = tape.row(g_tokens, m);
        let cat = tape.concat_cols(p_row, g_row);
        let mixed = tape.matmul(cat, mixer_w);
        let mixed = tape.add_row(mixed, mixer_b);
        parts.push(mixed);
    }
    for &j in &sel.residual_p {
        parts.push(tape.row(p_tokens, j));
    }
    for &j in &sel.residual_g {
        parts.push(tape.row(g_tokens, j));
    }
    tape.concat_rows(&parts)
}

pub fn fuse(p_tokens: &Arr, g_tokens: &Arr, sel: &FusionSelection, params: &FusionParams) -> Arr {
    let mut tape = Tape::new();
    let p = tape.leaf(p_tokens.clone());
    let g = tape.leaf(g_tokens.clone());
    let w = tape.leaf(params.w.clone());
    let b = tape.leaf(params.b.clone());
    let out = fuse_graph(&mut tape, p, g, sel, w, b);
    tape.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn affinity_closed_forms() {
        let p = array![[1.0, 0.0], [1.0, 1.0]];
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let a = affinity_matrix(&p, &g).unwrap();
        assert!((a.values[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(a.values[[0, 1]].abs() < 1e-12);
        assert!((a.values[[1, 1]] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        for &v in a.values.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zero_row_rejected() {
        let p = array![[0.0, 0.0]];
        let g = array![[1.0, 0.0]];
        assert!(matches!(
            affinity_matrix(&p, &g),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn greedy_selection_simple_cases() {
        let a = AffinityMatrix {
            values: array![[0.9, 0.1], [0.2, 0.8]],
        };
        let s1 = select_top_k(&a, 1).unwrap();
        assert_eq!(s1.pairs, vec![(0, 0)]);
        assert_eq!(s1.residual_p, vec![1]);
        assert_eq!(s1.residual_g, vec![1]);

        let s2 = select_top_k(&a, 2).unwrap();
        assert_eq!(s2.pairs, vec![(0, 0), (1, 1)]);
        assert!(s2.residual_p.is_empty() && s2.residual_g.is_empty());

        assert!(select_top_k(&a, 3).is_err());
    }

    // independent brute-force greedy, re-derived from the rule statement
    pub fn greedy_oracle(a: &Arr, k: usize) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        let mut rows: Vec<usize> = (0..a.nrows()).collect();
        let mut cols: Vec<usize> = (0..a.ncols()).collect();
        for _ in 0..k {
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for &n in &rows {
                for &m in &cols {
                    candidates.push((n, m));
                }
            }
            // max value, ties by lexicographic (n, m)
            candidates.sort_by(|x, y| {
                a[[y.0, y.1]]
                    .partial_cmp(&a[[x.0, x.1]])
                    .unwrap()
                    .then(x.cmp(y))
            });
            let (n, m) = candidates[0];
            rows.retain(|&r| r != n);
            cols.retain(|&c| c != m);
            pairs.push((n, m));
        }
        pairs
    }

    #[test]
    fn greedy_matches_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..200 {
            let mut a = Array2::from_shape_fn((6, 6), |_| {
                // quantized values force frequent ties
                (rng.gen_range(-10i32..=10) as f64) / 10.0
            });
            if trial % 3 == 0 {
                a[[0, 0]] = a[[5, 5]]; // explicit duplicate
            }
            let am = AffinityMatrix { values: a.clone() };
            for k in 0..=6 {
                let sel = select_top_k(&am, k).unwrap();
                assert_eq!(sel.pairs, greedy_oracle(&a, k), "k={k} a={a:?}");
            }
        }
    }

    #[test]
    fn selection_invariant_under_common_positive_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let base = select_top_k(&affinity_matrix(&p, &g).unwrap(), 3).unwrap();
        let scaled = select_top_k(&affinity_matrix(&(&p * 7.5), &(&g * 0.3)).unwrap(), 3).unwrap();
        assert_eq!(base, scaled);
    }

    #[test]
    fn selection_equivariant_under_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let perm = [4usize, 2, 0, 5, 3, 1];
        let p_perm = Array2::from_shape_fn((6, 4), |(i, j)| p[[perm[i], j]]);
        let sel = select_top_k(&affinity_matrix(&p, &g).unwrap(), 3).unwrap();
        let sel_perm = select_top_k(&affinity_matrix(&p_perm, &g).unwrap(), 3).unwrap();
        // same multiset of underlying (histology vector, genomic index) pairs
        let mut base: Vec<(Vec<u64>, usize)> = sel
            .pairs
            .iter()
            .map(|&(n, m)| (p.row(n).iter().map(|x| x.to_bits()).collect(), m))
            .collect();
        let mut permuted: Vec<(Vec<u64>, usize)> = sel_perm
            .pairs
            .iter()
            .map(|&(n, m)| (p_perm.row(n).iter().map(|x| x.to_bits()).collect(), m))
            .collect();
        base.sort();
        permuted.sort();
        assert_eq!(base, permuted);
    }

    #[test]
    fn fuse_counts_and_k_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 4;
        let p = Array2::from_shape_fn((6, d), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((6, d), |_| rng.sample::<f64, _>(StandardNormal));
        let params = FusionParams::random(d, 0.5, &mut rng);
        let a = affinity_matrix(&p, &g).unwrap();
        for k in 0..=6 {
            let sel = select_top_k(&a, k).unwrap();
            let out = fuse(&p, &g, &sel, &params);
            assert_eq!(out.nrows(), 12 - k);
        }
        // K=0 is pure concatenation, no mixer applied
        let sel0 = select_top_k(&a, 0).unwrap();
        let out0 = fuse(&p, &g, &sel0, &params);
        for i in 0..6 {
            for j in 0..d {
                assert_eq!(out0[[i, j]], p[[i, j]]);
                assert_eq!(out0[[6 + i, j]], g[[i, j]]);
            }
        }
    }

    #[test]
    fn mixer_matches_scalar_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d = 3;
        let p = Array2::from_shape_fn((2, d), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((2, d), |_| rng.sample::<f64, _>(StandardNormal));
        let params = FusionParams::random(d, 0.6, &mut rng);
        let sel = FusionSelection {
            pairs: vec![(1, 0)],
            residual_p: vec![0],
            residual_g: vec![1],
        };
        let out = fuse(&p, &g, &sel, &params);
        assert_eq!(out.nrows(), 3);
        let cat: Vec<f64> = p.row(1).iter().chain(g.row(0).iter()).cloned().collect();
        for j in 0..d {
            let expect: f64 =
                params.b[[0, j]] + (0..2 * d).map(|k| cat[k] * params.w[[k, j]]).sum::<f64>();
            assert!((out[[0, j]] - expect).abs() < 1e-12);
        }
        for j in 0..d {
            assert_eq!(out[[1, j]], p[[0, j]]);
            assert_eq!(out[[2, j]], g[[1, j]]);
        }
    }

    #[test]
    fn greedy_prefix_local_optimality() {
        // at each step the chosen pair has affinity >= every remaining valid pair
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((6, 6), |_| rng.sample::<f64, _>(StandardNormal));
            let sel = select_top_k(&AffinityMatrix { values: a.clone() }, 6).unwrap();
            let mut used_p = vec![false; 6];
            let mut used_g = vec![false; 6];
            for &(n, m) in &sel.pairs {
                for fp in 0..6 {
                    for fg in 0..6 {
                        if !used_p[fp] && !used_g[fg] {
                            assert!(a[[n, m]] >= a[[fp, fg]]);
                        }
                    }
                }
                used_p[n] = true;
                used_g[m] = true;
            }
        }
    }
}
