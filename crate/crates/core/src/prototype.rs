//! Prototype bank construction.
//!
//! Textual prototypes are the description embeddings verbatim. Visual
//! prototypes fuse a category's reference embeddings: the exemplar (or the
//! highest-resolution entry when no exemplar exists) takes weight sigma(n),
//! the remaining n-1 entries split 1 - sigma(n) equally.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{CategoryRecord, PrototypeBank, ReferenceSet};
use crate::tensor::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBucket {
    pub n_min: usize,
    pub n_max: usize,
    pub sigma: f32,
}

/// Mapping from reference count n to the exemplar fusion weight sigma.
/// Buckets must cover [1,100] with no gaps or overlaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaTable {
    buckets: Vec<SigmaBucket>,
}

impl Default for SigmaTable {
    fn default() -> Self {
        Self {
            buckets: vec![
                SigmaBucket { n_min: 1, n_max: 1, sigma: 1.0 },
                SigmaBucket { n_min: 2, n_max: 2, sigma: 0.6 },
                SigmaBucket { n_min: 3, n_max: 3, sigma: 0.5 },
                SigmaBucket { n_min: 4, n_max: 4, sigma: 0.4 },
                SigmaBucket { n_min: 5, n_max: 7, sigma: 0.3 },
                SigmaBucket { n_min: 8, n_max: 10, sigma: 0.2 },
                SigmaBucket { n_min: 11, n_max: 20, sigma: 0.15 },
                SigmaBucket { n_min: 21, n_max: 50, sigma: 0.12 },
                SigmaBucket { n_min: 51, n_max: 100, sigma: 0.10 },
            ],
        }
    }
}

impl SigmaTable {
    /// Build from explicit buckets, enforcing exact coverage of [1,100].
    pub fn new(mut buckets: Vec<SigmaBucket>) -> Result<Self> {
        buckets.sort_by_key(|b| b.n_min);
        let mut next = 1;
        for b in &buckets {
            if b.n_min != next || b.n_max < b.n_min {
                return Err(Error::BadSigmaTable);
            }
            if !(b.sigma > 0.0 && b.sigma <= 1.0) {
                return Err(Error::BadSigmaTable);
            }
            next = b.n_max + 1;
        }
        if next != 101 {
            return Err(Error::BadSigmaTable);
        }
        Ok(Self { buckets })
    }

    /// Load an override table from a JSON array of buckets.
    pub fn from_json(text: &str) -> Result<Self> {
        let buckets: Vec<SigmaBucket> =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::new(buckets)
    }

    pub fn buckets(&self) -> &[SigmaBucket] {
        &self.buckets
    }

    /// SHA-256 digest of the canonical serialized buckets; stored in banks so
    /// evaluations are attributable to the table that built them.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_string(&self.buckets).expect("buckets serialize");
        let hash = Sha256::digest(canon.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Exemplar fusion weight for n references.
pub fn sigma_of(n: usize, table: &SigmaTable) -> Result<f32> {
    if !(1..=100).contains(&n) {
        return Err(Error::OutOfRange(n));
    }
    Ok(table
        .buckets
        .iter()
        .find(|b| (b.n_min..=b.n_max).contains(&n))
        .expect("table covers [1,100]")
        .sigma)
}

/// Fuse one category's reference embeddings into its visual prototype:
/// `sigma(n) * v1 + sum_{i>=2} (1 - sigma(n)) / (n - 1) * v_i`, where v1 is
/// entry 0 in canonical order. n = 1 returns v1 unchanged.
pub fn fuse_visual(
    refs: &ReferenceSet,
    embeddings: &EmbeddingMatrix,
    table: &SigmaTable,
) -> Result<Vec<f32>> {
    let n = refs.entries.len();
    if n == 0 {
        return Err(Error::EmptyReferenceSet(refs.category_id));
    }
    for e in &refs.entries {
        if e.row >= embeddings.rows() {
            return Err(Error::RowIndexOutOfRange {
                row: e.row,
                rows: embeddings.rows(),
            });
        }
    }
    let v1 = embeddings.row(refs.entries[0].row);
    if n == 1 {
        return Ok(v1.to_vec());
    }
    let sigma = sigma_of(n, table)?;
    let rest_w = (1.0 - sigma) / (n as f32 - 1.0);
    let mut out: Vec<f32> = v1.iter().map(|&v| sigma * v).collect();
    for e in &refs.entries[1..] {
        for (o, &v) in out.iter_mut().zip(embeddings.row(e.row)) {
            *o += rest_w * v;
        }
    }
    Ok(out)
}

/// Assemble the frozen bank: `textual = descriptions` verbatim, one fused
/// visual row per category. Deterministic given inputs.
pub fn build_bank(
    descriptions: &EmbeddingMatrix,
    refs: &BTreeMap<u32, ReferenceSet>,
    ref_embeddings: &EmbeddingMatrix,
    manifest: &[CategoryRecord],
    table: &SigmaTable,
) -> Result<PrototypeBank> {
    if descriptions.rows() != manifest.len() {
        return Err(Error::RowCountMismatch(format!(
            "{} description rows vs {} manifest categories",
            descriptions.rows(),
            manifest.len()
        )));
    }
    let l_v = ref_embeddings.dims();
    let mut visual = Vec::with_capacity(manifest.len() * l_v);
    for rec in manifest {
        let set = refs.get(&rec.id).ok_or(Error::MissingReferences(rec.id))?;
        visual.extend(fuse_visual(set, ref_embeddings, table)?);
    }
    Ok(PrototypeBank {
        textual: descriptions.clone(),
        visual: EmbeddingMatrix::from_vec(manifest.len(), l_v, visual)?,
        categories: manifest.to_vec(),
        sigma_table_hash: table.digest(),
    })
}
