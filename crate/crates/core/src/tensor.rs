//! Dense row-major matrix kernel: normalization, inner-product scoring, PCA.
//!
//! Storage is 32-bit throughout (matching the embedding file format). The
//! scoring kernel keeps a fixed per-element summation order — lane-partitioned
//! by column index with a fixed reduction tree — so repeated calls on
//! identical inputs are bit-identical regardless of how the driver blocks the
//! output, and `dot_scores(a, b)[i][j] == dot_scores(b, a)[j][i]` exactly.

use crate::error::{Error, Result};

/// Dense row-major matrix of f32 embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Build from a flat row-major buffer. Rejects length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dims {
            return Err(Error::DimMismatch(format!(
                "buffer of {} values cannot hold {rows}x{dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self { rows, dims, data })
    }

    /// Build from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let dims = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::DimMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), dims, rows.concat())
    }

    pub fn zeros(rows: usize, dims: usize) -> Self {
        Self {
            rows,
            dims,
            data: vec![0.0; rows * dims],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Select a subset of rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::RowIndexOutOfRange {
                    row: i,
                    rows: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            dims: self.dims,
            data,
        })
    }

    /// Row Euclidean norm, accumulated in f64.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// N objects scored against C categories; row-major, object-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    pub n_objects: usize,
    pub n_categories: usize,
    pub values: Vec<f32>,
}

impl LogitBlock {
    pub fn new(n_objects: usize, n_categories: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_objects * n_categories {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot hold {n_objects}x{n_categories}",
                values.len()
            )));
        }
        Ok(Self {
            n_objects,
            n_categories,
            values,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_categories..(i + 1) * self.n_categories]
    }

    pub fn get(&self, i: usize, c: usize) -> f32 {
        self.values[i * self.n_categories + c]
    }
}

/// L2-normalize every row: `row / max(‖row‖, eps)`.
///
/// The eps guard absorbs near-zero rows (object features); prototypes go
/// through [`l2_normalize_rows_strict`] instead, where a zero row is a data
/// bug rather than noise.
pub fn l2_normalize_rows(m: &EmbeddingMatrix, eps: f64) -> EmbeddingMatrix {
    debug_assert!(eps > 0.0);
    let mut out = m.clone();
    for i in 0..m.rows {
        let norm = m.row_norm(i).max(eps);
        for v in &mut out.data[i * m.dims..(i + 1) * m.dims] {
            *v = (*v as f64 / norm) as f32;
        }
    }
    out
}

pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// Strict variant: a row with exactly zero norm is an error.
pub fn l2_normalize_rows_strict(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    for i in 0..m.rows {
        if m.row_norm(i) == 0.0 {
            return Err(Error::ExactZeroRow(i));
        }
    }
    Ok(l2_normalize_rows(m, DEFAULT_NORM_EPS))
}

const LANES: usize = 16;

/// One dot product with the canonical lane order: 16 f32 lanes partitioned by
/// column index, fixed pairwise reduction, scalar tail. The AVX-512 path
/// computes the same lane sums with fused multiply-add.
fn dot_lanes_scalar(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let o = c * LANES;
        for l in 0..LANES {
            acc[l] = a[o + l].mul_add(b[o + l], acc[l]);
        }
    }
    let mut s = reduce_lanes(&acc);
    for k in chunks * LANES..a.len() {
        s = a[k].mul_add(b[k], s);
    }
    s
}

fn reduce_lanes(acc: &[f32; LANES]) -> f32 {
    // matches _mm512_reduce_add_ps: halve, halve, halve, halve
    let mut v = *acc;
    let mut n = LANES;
    while n > 1 {
        n /= 2;
        for i in 0..n {
            v[i] += v[i + n];
        }
    }
    v[0]
}

/// Inner-product scoring: `out[i][c] = b.row(i) · a.row(c)`.
///
/// `a` holds C category rows, `b` holds N object rows; both share `dims`.
/// Deterministic for fixed inputs; see module docs for the order contract.
pub fn dot_scores(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<LogitBlock> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch(format!(
            "category dims {} vs object dims {}",
            a.dims, b.dims
        )));
    }
    let (c, n, d) = (a.rows, b.rows, a.dims);
    let mut out = vec![0.0f32; n * c];

    #[cfg(target_arch = "x86_64")]
    if d >= LANES && is_x86_feature_detected!("avx512f") {
        unsafe { dot_scores_avx512(a, b, &mut out) };
        return LogitBlock::new(n, c, out);
    }

    for i in 0..n {
        let bi = b.row(i);
        for j in 0..c {
            out[i * c + j] = dot_lanes_scalar(bi, a.row(j));
        }
    }
    LogitBlock::new(n, c, out)
}

/// Blocked AVX-512 driver. Tiles 4 category rows x 4 object rows; tile edges
/// fall back to stride-0 replication so every output element sees the exact
/// same per-lane summation order as inside a full tile.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn dot_scores_avx512(a: &EmbeddingMatrix, b: &EmbeddingMatrix, out: &mut [f32]) {
    let (c, n, d) = (a.rows, b.rows, a.dims);
    const OBJ_BLOCK: usize = 128;
    let mut res = [0.0f32; 16];
    for i0 in (0..n).step_by(OBJ_BLOCK) {
        let ib = (n - i0).min(OBJ_BLOCK);
        let mut j = 0;
        while j + 4 <= c {
            let apan = &a.data[j * d..];
            let mut i = 0;
            while i + 4 <= ib {
                kernel_4x4(apan, d, &b.data[(i0 + i) * d..], d, d, &mut res);
                for r in 0..4 {
                    for cx in 0..4 {
                        out[(i0 + i + cx) * c + j + r] = res[r * 4 + cx];
                    }
                }
                i += 4;
            }
            while i < ib {
                kernel_4x4(apan, d, &b.data[(i0 + i) * d..], 0, d, &mut res);
                for r in 0..4 {
                    out[(i0 + i) * c + j + r] = res[r * 4];
                }
                i += 1;
            }
            j += 4;
        }
        while j < c {
            let arow = &a.data[j * d..];
            for i in 0..ib {
                kernel_4x4(arow, 0, &b.data[(i0 + i) * d..], 0, d, &mut res);
                out[(i0 + i) * c + j] = res[0];
            }
            j += 1;
        }
    }
}

/// 4x4 dot microkernel: 16 independent f32 accumulator vectors, one per
/// output element, reduced with `_mm512_reduce_add_ps` plus a scalar tail.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_4x4(
    a: &[f32],
    astride: usize,
    b: &[f32],
    bstride: usize,
    d: usize,
    out: &mut [f32; 16],
) {
    use std::arch::x86_64::*;
    let mut acc = [_mm512_setzero_ps(); 16];
    let mut k = 0;
    while k + 16 <= d {
        let vb = [
            _mm512_loadu_ps(b.as_ptr().add(k)),
            _mm512_loadu_ps(b.as_ptr().add(bstride + k)),
            _mm512_loadu_ps(b.as_ptr().add(2 * bstride + k)),
            _mm512_loadu_ps(b.as_ptr().add(3 * bstride + k)),
        ];
        for r in 0..4 {
            let va = _mm512_loadu_ps(a.as_ptr().add(r * astride + k));
            for cx in 0..4 {
                acc[r * 4 + cx] = _mm512_fmadd_ps(va, vb[cx], acc[r * 4 + cx]);
            }
        }
        k += 16;
    }
    for r in 0..4 {
        for cx in 0..4 {
            let mut s = _mm512_reduce_add_ps(acc[r * 4 + cx]);
            let mut kk = k;
            while kk < d {
                s = a[r * astride + kk].mul_add(b[cx * bstride + kk], s);
                kk += 1;
            }
            out[r * 4 + cx] = s;
        }
    }
}

/// Project rows onto the top-2 principal components of the mean-centered
/// input. Covariance and eigenvectors are computed in f64 (power iteration
/// with deflation); component signs are fixed so the first nonzero loading
/// is positive.
pub fn pca_project_2d(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.rows < 3 || m.dims < 2 {
        return Err(Error::DimMismatch(format!(
            "pca needs rows >= 3 and dims >= 2, got {}x{}",
            m.rows, m.dims
        )));
    }
    let (n, d) = (m.rows, m.dims);
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (k, &v) in m.row(i).iter().enumerate() {
            mean[k] += v as f64;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    // centered data in f64
    let mut x = vec![0.0f64; n * d];
    for i in 0..n {
        for k in 0..d {
            x[i * d + k] = m.row(i)[k] as f64 - mean[k];
        }
    }
    // covariance, upper triangle mirrored
    let denom = (n - 1) as f64;
    let mut cov = vec![0.0f64; d * d];
    for p in 0..d {
        for q in p..d {
            let mut s = 0.0;
            for i in 0..n {
                s += x[i * d + p] * x[i * d + q];
            }
            s /= denom;
            cov[p * d + q] = s;
            cov[q * d + p] = s;
        }
    }

    let (v1, lam1) = power_iterate(&cov, d, None)?;
    if lam1 < 1e-9 {
        return Err(Error::DegenerateCovariance);
    }
    let (v2, lam2) = power_iterate(&cov, d, Some((&v1, lam1)))?;
    let v2 = if lam2 < 1e-12 {
        orthogonal_unit(&v1, d)
    } else {
        v2
    };

    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let p1: f64 = xi.iter().zip(&v1).map(|(a, b)| a * b).sum();
        let p2: f64 = xi.iter().zip(&v2).map(|(a, b)| a * b).sum();
        out.push(p1 as f32);
        out.push(p2 as f32);
    }
    EmbeddingMatrix::from_vec(n, 2, out)
}

/// Power iteration on `cov`, optionally deflating a known (vector, value)
/// pair. Returns a unit eigenvector with the sign convention applied.
fn power_iterate(cov: &[f64], d: usize, deflate: Option<(&[f64], f64)>) -> Result<(Vec<f64>, f64)> {
    // deterministic pseudo-random init (splitmix-style), avoids alignment
    // with any particular axis
    let mut v: Vec<f64> = (0..d)
        .map(|i| {
            let mut z = (i as u64).wrapping_add(0x9e3779b97f4a7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            ((z ^ (z >> 31)) as f64 / u64::MAX as f64) - 0.5
        })
        .collect();
    normalize_in_place(&mut v);

    for _ in 0..2000 {
        let mut w = vec![0.0f64; d];
        for p in 0..d {
            let mut s = 0.0;
            for q in 0..d {
                s += cov[p * d + q] * v[q];
            }
            w[p] = s;
        }
        if let Some((u, _)) = deflate {
            // project onto the complement of the leading eigenvector; this is
            // power iteration of (I - uuT) C (I - uuT)
            let proj: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
            for p in 0..d {
                w[p] -= proj * u[p];
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Ok((v, 0.0));
        }
        for p in 0..d {
            w[p] /= norm;
        }
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs().min((a + b).abs()))
            .fold(0.0f64, f64::max);
        v = w;
        if delta < 1e-13 {
            break;
        }
    }
    apply_sign_convention(&mut v);
    // Rayleigh quotient for the eigenvalue under the final sign
    let mut num = 0.0f64;
    for p in 0..d {
        let mut s = 0.0;
        for q in 0..d {
            s += cov[p * d + q] * v[q];
        }
        num += s * v[p];
    }
    Ok((v, num))
}

fn apply_sign_convention(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|a| a.abs() > 1e-12) {
        if *first < 0.0 {
            for a in v.iter_mut() {
                *a = -*a;
            }
        }
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        for a in v.iter_mut() {
            *a /= n;
        }
    }
}

/// Deterministic unit vector orthogonal to `u` (for a rank-1 covariance).
fn orthogonal_unit(u: &[f64], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut e = vec![0.0f64; d];
        e[axis] = 1.0;
        let proj: f64 = u.iter().zip(&e).map(|(a, b)| a * b).sum();
        for p in 0..d {
            e[p] -= proj * u[p];
        }
        let norm = e.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for p in 0..d {
                e[p] /= norm;
            }
            apply_sign_convention(&mut e);
            return e;
        }
    }
    unreachable!("u cannot span every axis of a d>=2 space");
}
