//! Synthetic embedding worlds.
//!
//! Each category gets a ground-truth unit direction in a shared latent space;
//! every emitted embedding is that direction pushed through a fixed isometry
//! into its modality's space plus isotropic Gaussian noise, renormalized to
//! the unit sphere. Noise levels are per modality, so coarse class names vs.
//! detailed descriptions reduce to two noise settings on the same map.
//!
//! Modality maps are shared whenever the dims agree (visual with textual,
//! object features with visual), so a noiseless world scores cosine 1.0
//! against its prototypes without a learned projection and the identity
//! projection is the optimum a trainer should converge toward.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    self, CategoryRecord, ReferenceEntry, ReferenceSet, Split,
};
use crate::tensor::EmbeddingMatrix;
use crate::trainer::LabeledBatch;

pub const SEPARATION_COSINE_CAP: f64 = 0.95;
const MAX_PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefCount {
    Fixed(usize),
    Uniform { lo: usize, hi: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_categories: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub classname_noise: f64,
    pub description_noise: f64,
    pub visual_noise: f64,
    pub object_noise: f64,
    pub refs_per_category: RefCount,
    pub novel_fraction: f64,
    pub objects_per_category: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_categories: 50,
            feature_dim: 64,
            text_dim: 64,
            visual_dim: 64,
            classname_noise: 0.8,
            description_noise: 0.3,
            visual_noise: 0.4,
            object_noise: 0.5,
            refs_per_category: RefCount::Fixed(5),
            novel_fraction: 0.0,
            objects_per_category: 20,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.feature_dim >= 2 && self.text_dim >= 2 && self.visual_dim >= 2;
        if !dims_ok {
            return Err(Error::InvalidConfig("all dims must be >= 2".into()));
        }
        if self.n_categories == 0 || self.objects_per_category == 0 {
            return Err(Error::InvalidConfig(
                "n_categories and objects_per_category must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.novel_fraction) {
            return Err(Error::InvalidConfig("novel_fraction must be in [0,1)".into()));
        }
        let noises = [
            ("classname_noise", self.classname_noise),
            ("description_noise", self.description_noise),
            ("visual_noise", self.visual_noise),
            ("object_noise", self.object_noise),
        ];
        for (name, v) in noises {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        match self.refs_per_category {
            RefCount::Fixed(n) if (1..=io::MAX_REFS_PER_CATEGORY).contains(&n) => {}
            RefCount::Uniform { lo, hi }
                if lo >= 1 && hi >= lo && hi <= io::MAX_REFS_PER_CATEGORY => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "refs_per_category must stay within [1, {}]",
                    io::MAX_REFS_PER_CATEGORY
                )))
            }
        }
        Ok(())
    }
}

/// A generated world: ground truth plus every artifact the pipeline ingests.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub manifest: Vec<CategoryRecord>,
    pub descriptions: EmbeddingMatrix,
    pub classnames: EmbeddingMatrix,
    pub ref_sets: BTreeMap<u32, ReferenceSet>,
    pub ref_embeddings: EmbeddingMatrix,
    pub train: LabeledBatch,
    pub heldout: LabeledBatch,
    ground_dim: usize,
    ground: Vec<f64>,
    text_map: Vec<f64>,
    visual_map: Vec<f64>,
    object_map: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Column-orthonormal map (out_dim x in_dim) built by Gram-Schmidt on
/// Gaussian columns; an isometry from the ground space, so pairwise cosines
/// survive the modality change exactly.
fn isometry(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Vec<f64> {
    assert!(out_dim >= in_dim);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(in_dim);
    while cols.len() < in_dim {
        let mut v: Vec<f64> = (0..out_dim).map(|_| gaussian(rng)).collect();
        for u in &cols {
            let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            for k in 0..out_dim {
                v[k] -= proj * u[k];
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    // row-major out_dim x in_dim
    let mut m = vec![0.0; out_dim * in_dim];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..out_dim {
            m[i * in_dim + j] = col[i];
        }
    }
    m
}

fn map_apply(m: &[f64], out_dim: usize, in_dim: usize, v: &[f64]) -> Vec<f64> {
    (0..out_dim)
        .map(|i| {
            m[i * in_dim..(i + 1) * in_dim]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Map a ground direction into a modality space, add isotropic Gaussian noise
/// with expected norm `noise`, renormalize to the unit sphere.
fn emit(
    rng: &mut ChaCha8Rng,
    map: &[f64],
    out_dim: usize,
    in_dim: usize,
    g: &[f64],
    noise: f64,
) -> Vec<f32> {
    let mut v = map_apply(map, out_dim, in_dim, g);
    if noise > 0.0 {
        let scale = noise / (out_dim as f64).sqrt();
        for a in v.iter_mut() {
            *a += scale * gaussian(rng);
        }
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|a| (a / n) as f32).collect()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.n_categories;
    let ground_dim = cfg.feature_dim.min(cfg.text_dim).min(cfg.visual_dim);

    // ground-truth directions under the pairwise cosine cap
    let mut ground: Vec<f64> = Vec::with_capacity(c * ground_dim);
    for placed in 0..c {
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = unit_gaussian_vec(&mut rng, ground_dim);
            let separated = (0..placed).all(|j| {
                let cos: f64 = ground[j * ground_dim..(j + 1) * ground_dim]
                    .iter()
                    .zip(&cand)
                    .map(|(a, b)| a * b)
                    .sum();
                cos < SEPARATION_COSINE_CAP
            });
            if separated {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(v) => ground.extend(v),
            None => {
                return Err(Error::UnsatisfiableSeparation {
                    categories: c,
                    dim: ground_dim,
                    cap: SEPARATION_COSINE_CAP as f32,
                })
            }
        }
    }

    let text_map = isometry(&mut rng, cfg.text_dim, ground_dim);
    let visual_map = if cfg.visual_dim == cfg.text_dim {
        text_map.clone()
    } else {
        isometry(&mut rng, cfg.visual_dim, ground_dim)
    };
    let object_map = if cfg.feature_dim == cfg.visual_dim {
        visual_map.clone()
    } else {
        isometry(&mut rng, cfg.feature_dim, ground_dim)
    };

    let n_novel = (c as f64 * cfg.novel_fraction).round() as usize;
    let manifest: Vec<CategoryRecord> = (0..c)
        .map(|i| CategoryRecord {
            id: i as u32,
            name: format!("synth_{i:05}"),
            split: if i >= c - n_novel {
                Split::Novel
            } else {
                Split::Base
            },
            has_description: true,
        })
        .collect();

    let g_row = |i: usize| &ground[i * ground_dim..(i + 1) * ground_dim];

    let mut descriptions = Vec::with_capacity(c * cfg.text_dim);
    let mut classnames = Vec::with_capacity(c * cfg.text_dim);
    for i in 0..c {
        descriptions.extend(emit(
            &mut rng,
            &text_map,
            cfg.text_dim,
            ground_dim,
            g_row(i),
            cfg.description_noise,
        ));
        classnames.extend(emit(
            &mut rng,
            &text_map,
            cfg.text_dim,
            ground_dim,
            g_row(i),
            cfg.classname_noise,
        ));
    }

    // references: exemplar first at half noise, rest descending by resolution
    let mut ref_embeddings = Vec::new();
    let mut ref_sets = BTreeMap::new();
    let mut next_row = 0usize;
    for i in 0..c {
        let n_refs = match cfg.refs_per_category {
            RefCount::Fixed(n) => n,
            RefCount::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        };
        let mut resolutions: Vec<u32> = (0..n_refs).map(|_| rng.gen_range(64..=1024)).collect();
        resolutions.sort_unstable_by(|a, b| b.cmp(a));
        let mut entries = Vec::with_capacity(n_refs);
        for (j, &resolution) in resolutions.iter().enumerate() {
            let noise = if j == 0 {
                cfg.visual_noise * 0.5
            } else {
                cfg.visual_noise
            };
            ref_embeddings.extend(emit(
                &mut rng,
                &visual_map,
                cfg.visual_dim,
                ground_dim,
                g_row(i),
                noise,
            ));
            entries.push(ReferenceEntry {
                row: next_row,
                resolution,
                exemplar: j == 0,
            });
            next_row += 1;
        }
        let (set, warnings) = ReferenceSet::canonicalize(i as u32, entries)?;
        debug_assert_eq!(warnings, 0);
        ref_sets.insert(i as u32, set);
    }

    let emit_objects = |rng: &mut ChaCha8Rng, include_novel: bool| {
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..c {
            if !include_novel && manifest[i].split == Split::Novel {
                continue;
            }
            for _ in 0..cfg.objects_per_category {
                xs.extend(emit(
                    rng,
                    &object_map,
                    cfg.feature_dim,
                    ground_dim,
                    g_row(i),
                    cfg.object_noise,
                ));
                labels.push(i as u32);
            }
        }
        (xs, labels)
    };
    let (train_x, train_y) = emit_objects(&mut rng, false);
    let (held_x, held_y) = emit_objects(&mut rng, true);

    Ok(SynthWorld {
        config: cfg.clone(),
        manifest,
        descriptions: EmbeddingMatrix::from_vec(c, cfg.text_dim, descriptions)?,
        classnames: EmbeddingMatrix::from_vec(c, cfg.text_dim, classnames)?,
        ref_sets,
        ref_embeddings: EmbeddingMatrix::from_vec(next_row, cfg.visual_dim, ref_embeddings)?,
        train: LabeledBatch::new(
            EmbeddingMatrix::from_vec(train_y.len(), cfg.feature_dim, train_x)?,
            train_y,
        )?,
        heldout: LabeledBatch::new(
            EmbeddingMatrix::from_vec(held_y.len(), cfg.feature_dim, held_x)?,
            held_y,
        )?,
        ground_dim,
        ground,
        text_map,
        visual_map,
        object_map,
    })
}

impl SynthWorld {
    /// The noiseless image of category `c`'s ground direction in visual
    /// space: the anchor that fused visual prototypes should approach.
    pub fn visual_anchor(&self, c: usize) -> Vec<f64> {
        map_apply(
            &self.visual_map,
            self.config.visual_dim,
            self.ground_dim,
            &self.ground[c * self.ground_dim..(c + 1) * self.ground_dim],
        )
    }

    /// Ditto for the object-feature space.
    pub fn object_anchor(&self, c: usize) -> Vec<f64> {
        map_apply(
            &self.object_map,
            self.config.feature_dim,
            self.ground_dim,
            &self.ground[c * self.ground_dim..(c + 1) * self.ground_dim],
        )
    }

    /// Draw `per_category` text-modality samples per category at the given
    /// noise level; labels are category ids. Used for cluster-separability
    /// comparisons between noise settings.
    pub fn noisy_category_samples(
        &self,
        noise: f64,
        per_category: usize,
        seed: u64,
    ) -> Result<LabeledBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.config.n_categories;
        let mut xs = Vec::with_capacity(c * per_category * self.config.text_dim);
        let mut labels = Vec::with_capacity(c * per_category);
        for i in 0..c {
            for _ in 0..per_category {
                xs.extend(emit(
                    &mut rng,
                    &self.text_map,
                    self.config.text_dim,
                    self.ground_dim,
                    &self.ground[i * self.ground_dim..(i + 1) * self.ground_dim],
                    noise,
                ));
                labels.push(i as u32);
            }
        }
        LabeledBatch::new(
            EmbeddingMatrix::from_vec(labels.len(), self.config.text_dim, xs)?,
            labels,
        )
    }
}

/// File names emitted by [`world_to_inputs`].
pub mod files {
    pub const MANIFEST: &str = "manifest.jsonl";
    pub const DESCRIPTIONS: &str = "descriptions.pemb";
    pub const CLASSNAMES: &str = "classnames.pemb";
    pub const REF_INDEX: &str = "refs.jsonl";
    pub const REF_EMBEDDINGS: &str = "refs.pemb";
    pub const TRAIN: &str = "train.pemb";
    pub const TRAIN_LABELS: &str = "train_labels.json";
    pub const HELDOUT: &str = "heldout.pemb";
    pub const HELDOUT_LABELS: &str = "heldout_labels.json";
}

/// Write every artifact in the formats the ingestion side accepts.
pub fn world_to_inputs(world: &SynthWorld, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    io::write_manifest(&world.manifest, &dir.join(files::MANIFEST))?;
    io::write_embeddings(&world.descriptions, &dir.join(files::DESCRIPTIONS))?;
    io::write_embeddings(&world.classnames, &dir.join(files::CLASSNAMES))?;
    io::write_reference_index(&world.ref_sets, &dir.join(files::REF_INDEX))?;
    io::write_embeddings(&world.ref_embeddings, &dir.join(files::REF_EMBEDDINGS))?;
    write_batch(&world.train, dir, files::TRAIN, files::TRAIN_LABELS)?;
    write_batch(&world.heldout, dir, files::HELDOUT, files::HELDOUT_LABELS)?;
    Ok(())
}

fn write_batch(batch: &LabeledBatch, dir: &Path, emb: &str, labels: &str) -> Result<()> {
    io::write_embeddings(&batch.x, &dir.join(emb))?;
    let text = serde_json::to_string(&batch.labels).expect("labels serialize");
    std::fs::write(dir.join(labels), text).map_err(|e| Error::Io {
        path: dir.join(labels).display().to_string(),
        source: e,
    })
}

/// Read a labeled batch back (embeddings + JSON label array).
pub fn read_batch(emb_path: &Path, labels_path: &Path) -> Result<LabeledBatch> {
    let x = io::read_embeddings(emb_path)?;
    let text = std::fs::read_to_string(labels_path).map_err(|e| Error::Io {
        path: labels_path.display().to_string(),
        source: e,
    })?;
    let labels: Vec<u32> = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: labels_path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    LabeledBatch::new(x, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{score_aligned, predict_topk};

    #[test]
    fn noiseless_world_visual_head_is_perfect() {
        let cfg = WorldConfig {
            n_categories: 8,
            classname_noise: 0.0,
            description_noise: 0.0,
            visual_noise: 0.0,
            object_noise: 0.0,
            refs_per_category: RefCount::Fixed(1),
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        // visual prototype of c should have cosine 1 with every object of c
        let protos = crate::prototype::build_bank(
            &w.descriptions,
            &w.ref_sets,
            &w.ref_embeddings,
            &w.manifest,
            &crate::prototype::SigmaTable::default(),
        )
        .unwrap();
        let s = score_aligned(
            &protos.visual,
            &EmbeddingMatrix::identity(cfg.feature_dim),
            &w.heldout.x,
            1.0,
        )
        .unwrap();
        let top = predict_topk(&s, 1).unwrap();
        for (i, t) in top.iter().enumerate() {
            assert_eq!(t[0].0, w.heldout.labels[i]);
            assert!((t[0].1 - 1.0).abs() < 1e-5, "cosine {}", t[0].1);
        }
    }

    #[test]
    fn unsatisfiable_separation_in_low_dim() {
        let cfg = WorldConfig {
            n_categories: 400,
            feature_dim: 2,
            text_dim: 2,
            visual_dim: 2,
            ..Default::default()
        };
        assert!(matches!(
            generate_world(&cfg),
            Err(Error::UnsatisfiableSeparation { .. })
        ));
    }

    #[test]
    fn same_seed_bit_identical_worlds() {
        let cfg = WorldConfig {
            n_categories: 10,
            refs_per_category: RefCount::Uniform { lo: 1, hi: 7 },
            novel_fraction: 0.3,
            seed: 1234,
            ..Default::default()
        };
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.descriptions, b.descriptions);
        assert_eq!(a.classnames, b.classnames);
        assert_eq!(a.ref_embeddings, b.ref_embeddings);
        assert_eq!(a.ref_sets, b.ref_sets);
        assert_eq!(a.train, b.train);
        assert_eq!(a.heldout, b.heldout);
    }

    #[test]
    fn novel_fraction_splits_manifest() {
        let cfg = WorldConfig {
            n_categories: 10,
            novel_fraction: 0.5,
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        let novel = w
            .manifest
            .iter()
            .filter(|r| r.split == Split::Novel)
            .count();
        assert_eq!(novel, 5);
        // novel categories contribute zero train objects
        for &lab in &w.train.labels {
            assert_eq!(w.manifest[lab as usize].split, Split::Base);
        }
    }

    #[test]
    fn round_trip_through_files_builds_bank_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig {
            n_categories: 6,
            refs_per_category: RefCount::Uniform { lo: 2, hi: 5 },
            seed: 9,
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        world_to_inputs(&w, dir.path()).unwrap();

        let manifest = io::read_manifest(&dir.path().join(files::MANIFEST)).unwrap();
        let desc = io::read_embeddings(&dir.path().join(files::DESCRIPTIONS)).unwrap();
        let refs_emb = io::read_embeddings(&dir.path().join(files::REF_EMBEDDINGS)).unwrap();
        let (sets, warnings) =
            io::read_reference_index(&dir.path().join(files::REF_INDEX), &refs_emb).unwrap();
        assert_eq!(warnings, 0);
        assert_eq!(manifest, w.manifest);
        let bank = crate::prototype::build_bank(
            &desc,
            &sets,
            &refs_emb,
            &manifest,
            &crate::prototype::SigmaTable::default(),
        )
        .unwrap();
        assert_eq!(bank.categories.len(), 6);
    }

    #[test]
    fn reference_sets_satisfy_invariants_across_seeds() {
        for seed in 0..100 {
            let cfg = WorldConfig {
                n_categories: 4,
                refs_per_category: RefCount::Uniform { lo: 1, hi: 10 },
                objects_per_category: 1,
                seed,
                ..Default::default()
            };
            let w = generate_world(&cfg).unwrap();
            for set in w.ref_sets.values() {
                assert!(!set.entries.is_empty() && set.entries.len() <= 100);
                assert_eq!(set.entries.iter().filter(|e| e.exemplar).count(), 1);
                assert!(set.entries[0].exemplar);
                let tail = &set.entries[1..];
                assert!(tail.windows(2).all(|p| p[0].resolution >= p[1].resolution));
            }
        }
    }
}
