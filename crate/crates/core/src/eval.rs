//! Metrics and benchmarks: top-k accuracy with base/novel breakdown,
//! cosine-distance silhouette and k-means for feature-space separability,
//! and a vast-vocabulary scoring throughput benchmark.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    ensemble, predict_topk, score_aligned, score_conventional, ClassifierParams, EnsembleMode,
};
use crate::error::{Error, Result};
use crate::io::Split;
use crate::tensor::{EmbeddingMatrix, LogitBlock};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_split: std::collections::BTreeMap<String, SplitAccuracy>,
    pub silhouette: Option<f64>,
    pub mode: EnsembleMode,
    pub config_digest: String,
}

/// Fraction of objects whose label lands in their top-k predictions.
pub fn topk_accuracy(s: &LogitBlock, labels: &[u32], k: usize) -> Result<f64> {
    if labels.len() != s.n_objects {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} objects",
            labels.len(),
            s.n_objects
        )));
    }
    let top = predict_topk(s, k)?;
    let hits = top
        .iter()
        .zip(labels)
        .filter(|(t, &lab)| t.iter().any(|&(c, _)| c == lab))
        .count();
    Ok(hits as f64 / s.n_objects as f64)
}

/// Accuracy per base/novel split plus overall, for a labeled evaluation.
pub fn split_accuracy(
    s: &LogitBlock,
    labels: &[u32],
    splits: &[Split],
    k: usize,
) -> Result<std::collections::BTreeMap<String, SplitAccuracy>> {
    let top = predict_topk(s, k)?;
    let top1 = predict_topk(s, 1)?;
    let mut acc: std::collections::BTreeMap<String, (usize, usize, usize)> = Default::default();
    for (i, &lab) in labels.iter().enumerate() {
        let split = match splits.get(lab as usize) {
            Some(Split::Base) => "base",
            Some(Split::Novel) => "novel",
            None => {
                return Err(Error::LabelOutOfRange {
                    label: lab,
                    categories: splits.len(),
                })
            }
        };
        let e = acc.entry(split.to_string()).or_default();
        e.0 += 1;
        if top1[i][0].0 == lab {
            e.1 += 1;
        }
        if top[i].iter().any(|&(c, _)| c == lab) {
            e.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(name, (n, h1, hk))| {
            (
                name,
                SplitAccuracy {
                    top1: h1 as f64 / n as f64,
                    top5: hk as f64 / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-300);
    1.0 - dot / denom
}

/// Mean silhouette under cosine distance. Singleton points contribute 0.
pub fn silhouette_score(points: &EmbeddingMatrix, assignments: &[u32]) -> Result<f64> {
    if assignments.len() != points.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} points",
            assignments.len(),
            points.rows()
        )));
    }
    let clusters: std::collections::BTreeSet<u32> = assignments.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let n = points.rows();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        let own_size = assignments.iter().filter(|&&c| c == own).count();
        if own_size == 1 {
            continue; // singleton contributes 0
        }
        let mut intra = 0.0;
        let mut inter: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = cosine_distance(points.row(i), points.row(j));
            if assignments[j] == own {
                intra += d;
            } else {
                let e = inter.entry(assignments[j]).or_default();
                e.0 += d;
                e.1 += 1;
            }
        }
        let a = intra / (own_size - 1) as f64;
        let b = inter
            .values()
            .map(|&(sum, cnt)| sum / cnt as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b).max(1e-300);
    }
    Ok(total / n as f64)
}

/// Lloyd's algorithm with k-means++ seeding under cosine distance; centroids
/// are means renormalized to the unit sphere. Empty clusters are reseeded
/// from the point farthest from its centroid.
pub fn kmeans(
    points: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Vec<u32>> {
    let n = points.rows();
    let d = points.dims();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, max: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.gen_range(0..n)).to_vec());
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| cosine_distance(points.row(i), &centroids[0]).powi(2))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points.row(pick).to_vec());
        for i in 0..n {
            let d2 = cosine_distance(points.row(i), centroids.last().unwrap()).powi(2);
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    let mut assignments = vec![0u32; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let dd = cosine_distance(points.row(i), cent);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assignments[i] != best as u32 {
                assignments[i] = best as u32;
                changed = true;
            }
        }
        // mean-then-renormalize update
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed from the point farthest from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = cosine_distance(points.row(a), &centroids[assignments[a] as usize]);
                        let db = cosine_distance(points.row(b), &centroids[assignments[b] as usize]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points.row(far).to_vec();
                continue;
            }
            let norm = sums[c].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            centroids[c] = sums[c].iter().map(|&a| (a / norm) as f32).collect();
        }
        if !changed {
            break;
        }
    }
    Ok(assignments)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub n_objects: usize,
    pub n_categories: usize,
    pub feature_dim: usize,
    pub wall_seconds: f64,
    pub objects_per_second: f64,
    /// CRC-32 of the ensemble logits' raw bits; identical across runs with
    /// the same seed, so kernel changes can be diffed for correctness.
    pub logits_checksum: u32,
    pub threads: usize,
}

/// Time supervised-ensemble scoring (conventional + both aligned heads) on
/// seeded random data at the given scale.
pub fn bench_scoring(
    n_categories: usize,
    dim: usize,
    n_objects: usize,
    seed: u64,
) -> Result<ThroughputReport> {
    if n_categories == 0 || dim == 0 || n_objects == 0 {
        return Err(Error::InvalidConfig(
            "bench sizes must all be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |rows: usize, cols: usize| {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingMatrix::from_vec(rows, cols, data).expect("finite random data")
    };
    let params = ClassifierParams {
        w: gen(n_categories, dim),
        p_t: gen(dim, dim),
        p_v: gen(dim, dim),
        tau: crate::classifier::DEFAULT_TAU,
        conventional_normalized: true,
    };
    let textual = gen(n_categories, dim);
    let visual = gen(n_categories, dim);
    let x = gen(n_objects, dim);

    let start = Instant::now();
    let s_con = score_conventional(&params, &x)?;
    let s_text = score_aligned(&textual, &params.p_t, &x, params.tau)?;
    let s_vis = score_aligned(&visual, &params.p_v, &x, params.tau)?;
    let s = ensemble(EnsembleMode::Supervised, Some(&s_con), &s_text, &s_vis)?;
    let wall = start.elapsed().as_secs_f64();

    let mut hasher = crc32fast::Hasher::new();
    for v in &s.values {
        hasher.update(&v.to_le_bytes());
    }
    Ok(ThroughputReport {
        n_objects,
        n_categories,
        feature_dim: dim,
        wall_seconds: wall,
        objects_per_second: n_objects as f64 / wall,
        logits_checksum: hasher.finalize(),
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, dims: usize, v: &[f32]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(rows, dims, v.to_vec()).unwrap()
    }

    fn onehot_block(labels: &[u32], c: usize, offset: u32) -> LogitBlock {
        let mut vals = vec![0.0f32; labels.len() * c];
        for (i, &lab) in labels.iter().enumerate() {
            vals[i * c + ((lab + offset) % c as u32) as usize] = 1.0;
        }
        LogitBlock::new(labels.len(), c, vals).unwrap()
    }

    #[test]
    fn topk_on_onehot_logits() {
        let labels = vec![0u32, 3, 1, 2];
        let s = onehot_block(&labels, 4, 0);
        assert_eq!(topk_accuracy(&s, &labels, 1).unwrap(), 1.0);
        let s = onehot_block(&labels, 4, 1);
        assert_eq!(topk_accuracy(&s, &labels, 1).unwrap(), 0.0);
    }

    #[test]
    fn topk_matches_recount_and_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let c = 10;
        let vals: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let s = LogitBlock::new(n, c, vals.clone()).unwrap();
        let mut prev = 0.0;
        for k in 1..=c {
            let acc = topk_accuracy(&s, &labels, k).unwrap();
            // brute-force recount
            let mut hits = 0;
            for i in 0..n {
                let lab = labels[i] as usize;
                let lv = vals[i * c + lab];
                let above = (0..c)
                    .filter(|&j| {
                        vals[i * c + j] > lv || (vals[i * c + j] == lv && j < lab)
                    })
                    .count();
                if above < k {
                    hits += 1;
                }
            }
            assert_eq!(acc, hits as f64 / n as f64, "k = {k}");
            assert!(acc >= prev);
            prev = acc;
        }
    }

    #[test]
    fn silhouette_antipodal_clusters() {
        // two tight clusters on opposite sides of the circle
        let mut data = Vec::new();
        let mut assignments = Vec::new();
        for i in 0..5 {
            let t = 0.05 * i as f32;
            data.extend_from_slice(&[t.cos(), t.sin()]);
            assignments.push(0);
            data.extend_from_slice(&[-(t.cos()), -(t.sin())]);
            assignments.push(1);
        }
        let score = silhouette_score(&mat(10, 2, &data), &assignments).unwrap();
        assert!(score > 0.9, "score {score}");
    }

    #[test]
    fn silhouette_identical_points_zero() {
        let data = [1.0f32, 0.0].repeat(6);
        let assignments = vec![0, 0, 0, 1, 1, 1];
        let score = silhouette_score(&mat(6, 2, &data), &assignments).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn silhouette_singletons_zero() {
        let data = [1.0f32, 0.0, 0.0, 1.0, -1.0, 0.0];
        let score = silhouette_score(&mat(3, 2, &data), &[0, 1, 2]).unwrap();
        assert_eq!(score, 0.0);

        assert!(matches!(
            silhouette_score(&mat(3, 2, &data), &[0, 0, 0]),
            Err(Error::SingleCluster)
        ));
    }

    #[test]
    fn silhouette_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Vec::new();
        let mut assignments = Vec::new();
        for c in 0..3 {
            let base = c as f32 * 2.0;
            for _ in 0..6 {
                data.push(base.cos() + rng.gen_range(-0.1..0.1));
                data.push(base.sin() + rng.gen_range(-0.1..0.1));
                assignments.push(c as u32);
            }
        }
        let m = mat(18, 2, &data);
        let s1 = silhouette_score(&m, &assignments).unwrap();
        // rotate by 1.1 radians
        let (cs, sn) = (1.1f32.cos(), 1.1f32.sin());
        let rotated: Vec<f32> = (0..18)
            .flat_map(|i| {
                let r = m.row(i);
                [cs * r[0] - sn * r[1], sn * r[0] + cs * r[1]]
            })
            .collect();
        let s2 = silhouette_score(&mat(18, 2, &rotated), &assignments).unwrap();
        assert!((s1 - s2).abs() < 1e-5);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for c in 0..2 {
            let center: [f32; 2] = if c == 0 { [1.0, 0.0] } else { [-1.0, 0.1] };
            for _ in 0..20 {
                data.push(center[0] + rng.gen_range(-0.05..0.05));
                data.push(center[1] + rng.gen_range(-0.05..0.05));
                truth.push(c as u32);
            }
        }
        let m = mat(40, 2, &data);
        let got = kmeans(&m, 2, 11, 100).unwrap();
        // same partition up to relabeling
        let flip = got[0] != truth[0];
        for (g, t) in got.iter().zip(&truth) {
            let g = if flip { 1 - *g } else { *g };
            assert_eq!(g, *t);
        }
    }

    #[test]
    fn kmeans_k_equals_rows_and_determinism() {
        let data = [1.0f32, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let m = mat(4, 2, &data);
        let a = kmeans(&m, 4, 2, 50).unwrap();
        let uniq: std::collections::BTreeSet<u32> = a.iter().copied().collect();
        assert_eq!(uniq.len(), 4);

        let b = kmeans(&m, 4, 2, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bench_scoring_deterministic_checksum() {
        let a = bench_scoring(64, 32, 16, 5).unwrap();
        let b = bench_scoring(64, 32, 16, 5).unwrap();
        assert_eq!(a.logits_checksum, b.logits_checksum);
        assert!(bench_scoring(1, 1, 0, 0).is_err());
    }
}
