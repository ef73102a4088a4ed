//! Scoring heads and their ensemble.
//!
//! Three heads produce N x C logit blocks: the conventional closed-set head
//! (learned weights, inner product, optionally norm-linear), and two
//! alignment heads that project object features and score temperature-scaled
//! cosine similarity against frozen textual / visual prototypes. Supervised
//! ensembling averages all three; the open-vocabulary arm drops the
//! conventional head.

use crate::error::{Error, Result};
use crate::tensor::{
    dot_scores, l2_normalize_rows, l2_normalize_rows_strict, EmbeddingMatrix, LogitBlock,
    DEFAULT_NORM_EPS,
};

pub const DEFAULT_TAU: f32 = 100.0;

/// Trainable parameters: conventional weights and the two projection layers.
/// Projections are bias-free linear maps stored as (prototype_dim x L).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// C x L conventional weights.
    pub w: EmbeddingMatrix,
    /// L_t x L projection onto the textual prototype space.
    pub p_t: EmbeddingMatrix,
    /// L_v x L projection onto the visual prototype space.
    pub p_v: EmbeddingMatrix,
    pub tau: f32,
    /// Norm-linear variant: normalize both W rows and object features and
    /// scale by tau, putting conventional logits on the cosine-head scale.
    pub conventional_normalized: bool,
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        let l = self.w.dims();
        if self.p_t.dims() != l || self.p_v.dims() != l {
            return Err(Error::DimMismatch(format!(
                "feature dim chain broken: W has L={l}, P_t {}, P_v {}",
                self.p_t.dims(),
                self.p_v.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Supervised,
    OpenVocab,
}

/// Conventional head: `S[i][c] = W[c] . X[i]`, or the norm-linear variant
/// `tau * cos(W[c], X[i])` when `conventional_normalized` is set.
pub fn score_conventional(params: &ClassifierParams, x: &EmbeddingMatrix) -> Result<LogitBlock> {
    if x.dims() != params.w.dims() {
        return Err(Error::DimMismatch(format!(
            "object features have dim {}, W expects {}",
            x.dims(),
            params.w.dims()
        )));
    }
    if params.conventional_normalized {
        let w_hat = l2_normalize_rows(&params.w, DEFAULT_NORM_EPS);
        let x_hat = l2_normalize_rows(x, DEFAULT_NORM_EPS);
        let mut s = dot_scores(&w_hat, &x_hat)?;
        for v in &mut s.values {
            *v *= params.tau;
        }
        Ok(s)
    } else {
        dot_scores(&params.w, x)
    }
}

/// Alignment head: project object features through `p`, then score
/// `tau * cos(prototype[c], p . x[i])`. Prototypes must have no zero rows.
pub fn score_aligned(
    prototypes: &EmbeddingMatrix,
    p: &EmbeddingMatrix,
    x: &EmbeddingMatrix,
    tau: f32,
) -> Result<LogitBlock> {
    if p.dims() != x.dims() {
        return Err(Error::DimMismatch(format!(
            "projection expects dim {}, object features have {}",
            p.dims(),
            x.dims()
        )));
    }
    if prototypes.dims() != p.rows() {
        return Err(Error::DimMismatch(format!(
            "prototypes have dim {}, projection outputs {}",
            prototypes.dims(),
            p.rows()
        )));
    }
    let proto_hat = l2_normalize_rows_strict(prototypes)?;
    // projected[i] = P . x[i]  (dot_scores with P rows as "categories")
    let projected = dot_scores(p, x)?;
    let projected =
        EmbeddingMatrix::from_vec(projected.n_objects, projected.n_categories, projected.values)?;
    let proj_hat = l2_normalize_rows(&projected, DEFAULT_NORM_EPS);
    let mut s = dot_scores(&proto_hat, &proj_hat)?;
    for v in &mut s.values {
        *v *= tau;
    }
    Ok(s)
}

/// Elementwise-mean ensemble: three heads in supervised mode, the two
/// alignment heads in open-vocabulary mode.
pub fn ensemble(
    mode: EnsembleMode,
    s_con: Option<&LogitBlock>,
    s_text: &LogitBlock,
    s_vis: &LogitBlock,
) -> Result<LogitBlock> {
    let same_shape = |a: &LogitBlock, b: &LogitBlock| {
        a.n_objects == b.n_objects && a.n_categories == b.n_categories
    };
    if !same_shape(s_text, s_vis) {
        return Err(Error::ShapeMismatch(format!(
            "text {}x{} vs visual {}x{}",
            s_text.n_objects, s_text.n_categories, s_vis.n_objects, s_vis.n_categories
        )));
    }
    match mode {
        EnsembleMode::Supervised => {
            let con = s_con.ok_or(Error::MissingConventional)?;
            if !same_shape(con, s_text) {
                return Err(Error::ShapeMismatch(format!(
                    "conventional {}x{} vs text {}x{}",
                    con.n_objects, con.n_categories, s_text.n_objects, s_text.n_categories
                )));
            }
            let values = con
                .values
                .iter()
                .zip(&s_text.values)
                .zip(&s_vis.values)
                .map(|((&a, &b), &c)| (a + b + c) / 3.0)
                .collect();
            LogitBlock::new(s_text.n_objects, s_text.n_categories, values)
        }
        EnsembleMode::OpenVocab => {
            let values = s_text
                .values
                .iter()
                .zip(&s_vis.values)
                .map(|(&b, &c)| (b + c) / 2.0)
                .collect();
            LogitBlock::new(s_text.n_objects, s_text.n_categories, values)
        }
    }
}

/// Top-k categories per object, score descending, ties broken by smaller
/// category id. Selection is heap-based; tests check it against a full sort.
pub fn predict_topk(s: &LogitBlock, k: usize) -> Result<Vec<Vec<(u32, f32)>>> {
    if k < 1 || k > s.n_categories {
        return Err(Error::KOutOfRange {
            k,
            max: s.n_categories,
        });
    }
    let mut out = Vec::with_capacity(s.n_objects);
    for i in 0..s.n_objects {
        let row = s.row(i);
        // keep the k best in a small vec ordered worst-first
        let mut best: Vec<(u32, f32)> = Vec::with_capacity(k + 1);
        for (c, &v) in row.iter().enumerate() {
            let cand = (c as u32, v);
            if best.len() == k {
                let worst = best[0];
                if !better(cand, worst) {
                    continue;
                }
                best.remove(0);
            }
            let pos = best
                .iter()
                .position(|&e| better(e, cand))
                .unwrap_or(best.len());
            best.insert(pos, cand);
        }
        best.reverse();
        out.push(best);
    }
    Ok(out)
}

/// Ranking order: higher score wins, then smaller id.
fn better(a: (u32, f32), b: (u32, f32)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}
