//! Supervised training of the conventional weights and the two projection
//! layers. Prototypes stay frozen throughout.
//!
//! All training math runs in f64 (the desk-scale batches are small) against
//! f32 parameter storage; analytic gradients carry the normalization Jacobian
//! `(I - n n^T) / ||Px||` on the projected-feature path and are checked
//! against central finite differences in the test suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, EnsembleMode};
use crate::error::{Error, Result};
use crate::io::PrototypeBank;
use crate::tensor::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: EmbeddingMatrix,
    pub labels: Vec<u32>,
}

impl LabeledBatch {
    pub fn new(x: EmbeddingMatrix, labels: Vec<u32>) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                x.rows(),
                labels.len()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    BceSigmoid,
    Focal { gamma: f64, alpha: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::BceSigmoid
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub loss: LossKind,
    pub seed: u64,
    pub mode: EnsembleMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerKind::default(),
            loss: LossKind::default(),
            seed: 0,
            mode: EnsembleMode::Supervised,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub top1_on_heldout: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ClassifierParams,
    pub trace: Vec<EpochStat>,
}

/// Frozen, row-normalized prototype matrices in f64 for the training loop.
#[derive(Debug, Clone)]
pub struct FrozenProtos {
    pub c: usize,
    pub l_t: usize,
    pub l_v: usize,
    pub t_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl FrozenProtos {
    pub fn from_bank(bank: &PrototypeBank) -> Result<Self> {
        let normalize = |m: &EmbeddingMatrix| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(m.rows() * m.dims());
            for i in 0..m.rows() {
                let norm = m.row_norm(i);
                if norm == 0.0 {
                    return Err(Error::ExactZeroRow(i));
                }
                out.extend(m.row(i).iter().map(|&v| v as f64 / norm));
            }
            Ok(out)
        };
        Ok(Self {
            c: bank.categories.len(),
            l_t: bank.textual.dims(),
            l_v: bank.visual.dims(),
            t_hat: normalize(&bank.textual)?,
            v_hat: normalize(&bank.visual)?,
        })
    }
}

/// Trainable state in f64. Converts losslessly from f32 params and rounds
/// back on export.
#[derive(Debug, Clone)]
pub struct Model {
    pub c: usize,
    pub l: usize,
    pub l_t: usize,
    pub l_v: usize,
    pub w: Vec<f64>,
    pub p_t: Vec<f64>,
    pub p_v: Vec<f64>,
    pub tau: f64,
    pub conventional_normalized: bool,
    pub mode: EnsembleMode,
}

const NORM_GUARD: f64 = 1e-12;

/// Per-head forward pass products kept for the backward pass.
pub struct Forward {
    pub s_con: Option<Vec<f64>>,
    pub s_text: Vec<f64>,
    pub s_vis: Vec<f64>,
    pub s_ens: Vec<f64>,
    // projected features and their norms, per head
    text_proj: Vec<f64>,
    text_norm: Vec<f64>,
    vis_proj: Vec<f64>,
    vis_norm: Vec<f64>,
    w_norms: Vec<f64>,
    x_hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<f64>,
    pub p_t: Vec<f64>,
    pub p_v: Vec<f64>,
}

impl Model {
    pub fn from_params(params: &ClassifierParams, mode: EnsembleMode) -> Result<Self> {
        params.validate()?;
        let to64 = |m: &EmbeddingMatrix| m.data().iter().map(|&v| v as f64).collect();
        Ok(Self {
            c: params.w.rows(),
            l: params.w.dims(),
            l_t: params.p_t.rows(),
            l_v: params.p_v.rows(),
            w: to64(&params.w),
            p_t: to64(&params.p_t),
            p_v: to64(&params.p_v),
            tau: params.tau as f64,
            conventional_normalized: params.conventional_normalized,
            mode,
        })
    }

    pub fn to_params(&self) -> ClassifierParams {
        let to32 = |v: &[f64], rows: usize, dims: usize| {
            EmbeddingMatrix::from_vec(rows, dims, v.iter().map(|&x| x as f32).collect())
                .expect("finite params")
        };
        ClassifierParams {
            w: to32(&self.w, self.c, self.l),
            p_t: to32(&self.p_t, self.l_t, self.l),
            p_v: to32(&self.p_v, self.l_v, self.l),
            tau: self.tau as f32,
            conventional_normalized: self.conventional_normalized,
        }
    }

    pub fn forward(&self, protos: &FrozenProtos, batch: &LabeledBatch) -> Result<Forward> {
        if batch.x.dims() != self.l {
            return Err(Error::DimMismatch(format!(
                "batch features have dim {}, model expects {}",
                batch.x.dims(),
                self.l
            )));
        }
        if protos.c != self.c {
            return Err(Error::ShapeMismatch(format!(
                "bank has {} categories, model has {}",
                protos.c, self.c
            )));
        }
        let n = batch.len();
        let x: Vec<f64> = batch.x.data().iter().map(|&v| v as f64).collect();

        // conventional head
        let (s_con, w_norms, x_hat) = if self.mode == EnsembleMode::Supervised {
            let mut w_norms = vec![0.0; self.c];
            let mut s = vec![0.0; n * self.c];
            let mut x_hat = vec![0.0; n * self.l];
            if self.conventional_normalized {
                for c in 0..self.c {
                    w_norms[c] = norm(&self.w[c * self.l..(c + 1) * self.l]).max(NORM_GUARD);
                }
                for i in 0..n {
                    let xi = &x[i * self.l..(i + 1) * self.l];
                    let xn = norm(xi).max(NORM_GUARD);
                    for k in 0..self.l {
                        x_hat[i * self.l + k] = xi[k] / xn;
                    }
                }
                for i in 0..n {
                    let xi = &x_hat[i * self.l..(i + 1) * self.l];
                    for c in 0..self.c {
                        let wc = &self.w[c * self.l..(c + 1) * self.l];
                        s[i * self.c + c] = self.tau * dot(wc, xi) / w_norms[c];
                    }
                }
            } else {
                for i in 0..n {
                    let xi = &x[i * self.l..(i + 1) * self.l];
                    for c in 0..self.c {
                        s[i * self.c + c] = dot(&self.w[c * self.l..(c + 1) * self.l], xi);
                    }
                }
            }
            (Some(s), w_norms, x_hat)
        } else {
            (None, Vec::new(), Vec::new())
        };

        let (s_text, text_proj, text_norm) =
            aligned_forward(&self.p_t, self.l_t, self.l, &protos.t_hat, protos.c, &x, n, self.tau);
        let (s_vis, vis_proj, vis_norm) =
            aligned_forward(&self.p_v, self.l_v, self.l, &protos.v_hat, protos.c, &x, n, self.tau);

        let mut s_ens = vec![0.0; n * self.c];
        match (&s_con, self.mode) {
            (Some(con), EnsembleMode::Supervised) => {
                for i in 0..s_ens.len() {
                    s_ens[i] = (con[i] + s_text[i] + s_vis[i]) / 3.0;
                }
            }
            (None, EnsembleMode::OpenVocab) => {
                for i in 0..s_ens.len() {
                    s_ens[i] = (s_text[i] + s_vis[i]) / 2.0;
                }
            }
            _ => unreachable!("mode and conventional head always agree"),
        }

        Ok(Forward {
            s_con,
            s_text,
            s_vis,
            s_ens,
            text_proj,
            text_norm,
            vis_proj,
            vis_norm,
            w_norms,
            x_hat,
        })
    }

    /// End-to-end loss of the ensemble on one batch.
    pub fn loss(&self, protos: &FrozenProtos, batch: &LabeledBatch, loss: &LossKind) -> Result<f64> {
        let fwd = self.forward(protos, batch)?;
        let (l, _) = loss_and_grad_logits(&fwd.s_ens, batch.len(), self.c, &batch.labels, loss)?;
        Ok(l)
    }

    /// Loss plus analytic parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        protos: &FrozenProtos,
        batch: &LabeledBatch,
        loss: &LossKind,
    ) -> Result<(f64, Grads)> {
        let fwd = self.forward(protos, batch)?;
        let n = batch.len();
        let (loss_val, d_ens) = loss_and_grad_logits(&fwd.s_ens, n, self.c, &batch.labels, loss)?;
        let arm = match self.mode {
            EnsembleMode::Supervised => 1.0 / 3.0,
            EnsembleMode::OpenVocab => 1.0 / 2.0,
        };
        let d_head: Vec<f64> = d_ens.iter().map(|&v| v * arm).collect();
        Ok((loss_val, self.backward_params(protos, batch, &fwd, &d_head)?))
    }

    /// Chain rule from per-head logit gradients back to W, P_t, P_v. The
    /// same N x C gradient block feeds every head present (the ensemble is
    /// an elementwise mean, so the per-head factor is applied by the caller).
    fn backward_params(
        &self,
        protos: &FrozenProtos,
        batch: &LabeledBatch,
        fwd: &Forward,
        d_head: &[f64],
    ) -> Result<Grads> {
        let n = batch.len();
        if d_head.len() != n * self.c {
            return Err(Error::ShapeMismatch(format!(
                "gradient block has {} values, expected {}",
                d_head.len(),
                n * self.c
            )));
        }
        let x: Vec<f64> = batch.x.data().iter().map(|&v| v as f64).collect();

        let mut g_w = vec![0.0; self.w.len()];
        if fwd.s_con.is_some() {
            if self.conventional_normalized {
                // s = tau * w_hat . x_hat; dW = (I - w_hat w_hat^T)/||w|| . dw_hat
                for c in 0..self.c {
                    let wc = &self.w[c * self.l..(c + 1) * self.l];
                    let wn = fwd.w_norms[c];
                    let mut d_what = vec![0.0; self.l];
                    for i in 0..n {
                        let g = self.tau * d_head[i * self.c + c];
                        let xi = &fwd.x_hat[i * self.l..(i + 1) * self.l];
                        for k in 0..self.l {
                            d_what[k] += g * xi[k];
                        }
                    }
                    let w_hat: Vec<f64> = wc.iter().map(|&v| v / wn).collect();
                    let proj = dot(&w_hat, &d_what);
                    for k in 0..self.l {
                        g_w[c * self.l + k] = (d_what[k] - proj * w_hat[k]) / wn;
                    }
                }
            } else {
                for i in 0..n {
                    let xi = &x[i * self.l..(i + 1) * self.l];
                    for c in 0..self.c {
                        let g = d_head[i * self.c + c];
                        for k in 0..self.l {
                            g_w[c * self.l + k] += g * xi[k];
                        }
                    }
                }
            }
        }

        let g_pt = aligned_backward(
            self.l_t,
            self.l,
            &protos.t_hat,
            self.c,
            &x,
            n,
            self.tau,
            &fwd.text_proj,
            &fwd.text_norm,
            d_head,
        );
        let g_pv = aligned_backward(
            self.l_v,
            self.l,
            &protos.v_hat,
            self.c,
            &x,
            n,
            self.tau,
            &fwd.vis_proj,
            &fwd.vis_norm,
            d_head,
        );

        Ok(Grads {
            w: g_w,
            p_t: g_pt,
            p_v: g_pv,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Aligned head forward: logits plus the projected features and norms the
/// backward pass needs.
#[allow(clippy::too_many_arguments)]
fn aligned_forward(
    p: &[f64],
    l_p: usize,
    l: usize,
    proto_hat: &[f64],
    c: usize,
    x: &[f64],
    n: usize,
    tau: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut proj = vec![0.0; n * l_p];
    let mut norms = vec![0.0; n];
    let mut s = vec![0.0; n * c];
    for i in 0..n {
        let xi = &x[i * l..(i + 1) * l];
        for a in 0..l_p {
            proj[i * l_p + a] = dot(&p[a * l..(a + 1) * l], xi);
        }
        let ni = &proj[i * l_p..(i + 1) * l_p];
        let nn = norm(ni).max(NORM_GUARD);
        norms[i] = nn;
        for cc in 0..c {
            s[i * c + cc] = tau * dot(&proto_hat[cc * l_p..(cc + 1) * l_p], ni) / nn;
        }
    }
    (s, proj, norms)
}

/// Aligned head backward: gradient w.r.t. the projection matrix. Applies the
/// normalization Jacobian `(I - n_hat n_hat^T)/||n||` to the prototype-side
/// gradient, then the outer product with the raw object feature.
#[allow(clippy::too_many_arguments)]
fn aligned_backward(
    l_p: usize,
    l: usize,
    proto_hat: &[f64],
    c: usize,
    x: &[f64],
    n: usize,
    tau: f64,
    proj: &[f64],
    norms: &[f64],
    d_head: &[f64],
) -> Vec<f64> {
    let mut g_p = vec![0.0; l_p * l];
    for i in 0..n {
        let ni = &proj[i * l_p..(i + 1) * l_p];
        let nn = norms[i];
        let n_hat: Vec<f64> = ni.iter().map(|&v| v / nn).collect();
        let mut d_nhat = vec![0.0; l_p];
        for cc in 0..c {
            let g = tau * d_head[i * c + cc];
            if g == 0.0 {
                continue;
            }
            let pc = &proto_hat[cc * l_p..(cc + 1) * l_p];
            for a in 0..l_p {
                d_nhat[a] += g * pc[a];
            }
        }
        let along = dot(&n_hat, &d_nhat);
        let xi = &x[i * l..(i + 1) * l];
        for a in 0..l_p {
            let dn = (d_nhat[a] - along * n_hat[a]) / nn;
            if dn == 0.0 {
                continue;
            }
            for b in 0..l {
                g_p[a * l + b] += dn * xi[b];
            }
        }
    }
    g_p
}

/// Loss (mean over the N x C block) and its analytic gradient w.r.t. the
/// logits. BCE is the numerically-stable logits form; focal applies the
/// standard (1 - p_t)^gamma, alpha_t modulation to the same per-element BCE.
pub fn loss_and_grad_logits(
    s: &[f64],
    n: usize,
    c: usize,
    labels: &[u32],
    loss: &LossKind,
) -> Result<(f64, Vec<f64>)> {
    if s.len() != n * c || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} logits / {} labels vs {n}x{c}",
            s.len(),
            labels.len()
        )));
    }
    for &lab in labels {
        if lab as usize >= c {
            return Err(Error::LabelOutOfRange {
                label: lab,
                categories: c,
            });
        }
    }
    let m = (n * c) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        for cc in 0..c {
            let v = s[i * c + cc];
            let y = if labels[i] as usize == cc { 1.0 } else { 0.0 };
            let t = if y > 0.5 { v } else { -v };
            // log sigmoid(t) = -softplus(-t), stable both ways
            let log_pt = -softplus(-t);
            let p_t = sigmoid(t);
            match loss {
                LossKind::BceSigmoid => {
                    total += -log_pt;
                    grad[i * c + cc] = (sigmoid(v) - y) / m;
                }
                LossKind::Focal { gamma, alpha } => {
                    let a_t = if y > 0.5 { *alpha } else { 1.0 - *alpha };
                    let one_minus = 1.0 - p_t;
                    total += -a_t * one_minus.powf(*gamma) * log_pt;
                    // d/dt of focal, then dt/ds = +/- 1
                    let d_dt = a_t
                        * (gamma * one_minus.powf(*gamma) * p_t * log_pt
                            - one_minus.powf(gamma + 1.0));
                    let sign = if y > 0.5 { 1.0 } else { -1.0 };
                    grad[i * c + cc] = sign * d_dt / m;
                }
            }
        }
    }
    Ok((total / m, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Xavier-uniform initialized parameters, deterministic per seed.
pub fn init_params(
    seed: u64,
    c: usize,
    l: usize,
    l_t: usize,
    l_v: usize,
    tau: f32,
    conventional_normalized: bool,
) -> ClassifierParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.gen_range(-a..a) as f32)
            .collect();
        EmbeddingMatrix::from_vec(rows, cols, data).expect("finite init")
    };
    ClassifierParams {
        w: sample(c, l, l, c),
        p_t: sample(l_t, l, l, l_t),
        p_v: sample(l_v, l, l, l_v),
        tau,
        conventional_normalized,
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct OptState {
    t: u64,
    w: AdamState,
    p_t: AdamState,
    p_v: AdamState,
}

fn adam_new(len: usize) -> AdamState {
    AdamState {
        m: vec![0.0; len],
        v: vec![0.0; len],
    }
}

fn apply_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    kind: &OptimizerKind,
    lr: f64,
    t: u64,
) {
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for k in 0..param.len() {
                state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * grad[k];
                state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * grad[k] * grad[k];
                let m_hat = state.m[k] / bc1;
                let v_hat = state.v[k] / bc2;
                param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Mini-batch training loop. Deterministic per seed (init is the caller's;
/// shuffle order comes from `cfg.seed`). Open-vocabulary mode never reads or
/// updates W; the bank is frozen throughout.
pub fn fit(
    params: &ClassifierParams,
    bank: &PrototypeBank,
    train: &LabeledBatch,
    heldout: Option<&LabeledBatch>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let protos = FrozenProtos::from_bank(bank)?;
    for &lab in &train.labels {
        if lab as usize >= protos.c {
            return Err(Error::LabelOutOfRange {
                label: lab,
                categories: protos.c,
            });
        }
    }
    let mut model = Model::from_params(params, cfg.mode)?;
    let mut opt = OptState {
        t: 0,
        w: adam_new(model.w.len()),
        p_t: adam_new(model.p_t.len()),
        p_v: adam_new(model.p_v.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.x.gather_rows(chunk)?;
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = LabeledBatch::new(x, labels)?;
            let (loss, grads) = model.loss_and_grads(&protos, &batch, &cfg.loss)?;
            opt.t += 1;
            if cfg.mode == EnsembleMode::Supervised {
                apply_update(
                    &mut model.w,
                    &grads.w,
                    &mut opt.w,
                    &cfg.optimizer,
                    cfg.learning_rate,
                    opt.t,
                );
            }
            apply_update(
                &mut model.p_t,
                &grads.p_t,
                &mut opt.p_t,
                &cfg.optimizer,
                cfg.learning_rate,
                opt.t,
            );
            apply_update(
                &mut model.p_v,
                &grads.p_v,
                &mut opt.p_v,
                &cfg.optimizer,
                cfg.learning_rate,
                opt.t,
            );
            epoch_loss += loss;
            batches += 1;
        }
        let top1 = match heldout {
            Some(h) => Some(heldout_top1(&model, &protos, h)?),
            None => None,
        };
        trace.push(EpochStat {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            top1_on_heldout: top1,
        });
    }

    Ok(TrainResult {
        params: model.to_params(),
        trace,
    })
}

/// Top-1 accuracy of the model's own ensemble on a held-out batch.
pub fn heldout_top1(model: &Model, protos: &FrozenProtos, batch: &LabeledBatch) -> Result<f64> {
    let fwd = model.forward(protos, batch)?;
    let n = batch.len();
    let mut hits = 0usize;
    for i in 0..n {
        let row = &fwd.s_ens[i * model.c..(i + 1) * model.c];
        let mut best = 0usize;
        for c in 1..model.c {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == batch.labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{CategoryRecord, Split};

    fn mat(rows: usize, dims: usize, v: &[f32]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(rows, dims, v.to_vec()).unwrap()
    }

    fn tiny_bank(c: usize, l_t: usize, l_v: usize, seed: u64) -> PrototypeBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |rows: usize, dims: usize| {
            let data: Vec<f32> = (0..rows * dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
            EmbeddingMatrix::from_vec(rows, dims, data).unwrap()
        };
        PrototypeBank {
            textual: gen(c, l_t),
            visual: gen(c, l_v),
            categories: (0..c as u32)
                .map(|id| CategoryRecord {
                    id,
                    name: format!("cat{id}"),
                    split: Split::Base,
                    has_description: true,
                })
                .collect(),
            sigma_table_hash: String::new(),
        }
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let (loss, _) =
            loss_and_grad_logits(&[0.0, 0.0], 1, 2, &[0], &LossKind::BceSigmoid).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates_on_perfect_logits() {
        let (loss, _) = loss_and_grad_logits(
            &[30.0, -30.0, -30.0, 30.0],
            2,
            2,
            &[0, 1],
            &LossKind::BceSigmoid,
        )
        .unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(matches!(
            loss_and_grad_logits(&[0.0, 0.0], 1, 2, &[2], &LossKind::BceSigmoid),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    fn fd_check_logits(loss: LossKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let c = 4;
        let s: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = vec![1u32, 3, 0];
        let (_, grad) = loss_and_grad_logits(&s, n, c, &labels, &loss).unwrap();
        let h = 1e-3;
        for k in 0..n * c {
            let mut sp = s.clone();
            sp[k] += h;
            let (lp, _) = loss_and_grad_logits(&sp, n, c, &labels, &loss).unwrap();
            sp[k] -= 2.0 * h;
            let (lm, _) = loss_and_grad_logits(&sp, n, c, &labels, &loss).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(
                (fd - grad[k]).abs() / denom < 1e-4,
                "element {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences_bce() {
        fd_check_logits(LossKind::BceSigmoid);
    }

    #[test]
    fn logit_gradients_match_finite_differences_focal() {
        fd_check_logits(LossKind::Focal {
            gamma: 2.0,
            alpha: 0.25,
        });
    }

    #[test]
    fn zero_upstream_gradient_means_zero_param_gradient() {
        let bank = tiny_bank(3, 4, 4, 1);
        let protos = FrozenProtos::from_bank(&bank).unwrap();
        let params = init_params(2, 3, 5, 4, 4, 100.0, true);
        let model = Model::from_params(&params, EnsembleMode::Supervised).unwrap();
        let batch = LabeledBatch::new(
            mat(2, 5, &[0.3, -0.1, 0.8, 0.2, -0.5, 1.0, 0.4, -0.2, 0.6, 0.1]),
            vec![0, 2],
        )
        .unwrap();
        let fwd = model.forward(&protos, &batch).unwrap();
        let d = vec![0.0; 2 * 3];
        let g = model.backward_params(&protos, &batch, &fwd, &d).unwrap();
        assert!(g.w.iter().all(|&v| v == 0.0));
        assert!(g.p_t.iter().all(|&v| v == 0.0));
        assert!(g.p_v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conventional_gradient_outer_product_structure() {
        // single object, unnormalized head: dW = dS^T . X elementwise
        let params = ClassifierParams {
            w: mat(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]),
            p_t: EmbeddingMatrix::identity(3),
            p_v: EmbeddingMatrix::identity(3),
            tau: 1.0,
            conventional_normalized: false,
        };
        let bank = tiny_bank(2, 3, 3, 3);
        let protos = FrozenProtos::from_bank(&bank).unwrap();
        let model = Model::from_params(&params, EnsembleMode::Supervised).unwrap();
        let batch = LabeledBatch::new(mat(1, 3, &[2.0, -1.0, 0.5]), vec![0]).unwrap();
        let fwd = model.forward(&protos, &batch).unwrap();
        let d = vec![0.7, -0.3];
        let g = model.backward_params(&protos, &batch, &fwd, &d).unwrap();
        let x = [2.0, -1.0, 0.5];
        for c in 0..2 {
            for k in 0..3 {
                let expect = d[c] * x[k];
                assert!((g.w[c * 3 + k] - expect).abs() < 1e-12);
            }
        }
    }

    /// Full end-to-end finite-difference check across modes and losses.
    fn fd_check_params(mode: EnsembleMode, loss: LossKind, seed: u64) {
        let c = 4;
        let l = 6;
        let l_t = 5;
        let l_v = 7;
        let n = 3;
        let bank = tiny_bank(c, l_t, l_v, seed);
        let protos = FrozenProtos::from_bank(&bank).unwrap();
        let params = init_params(seed.wrapping_add(1), c, l, l_t, l_v, 10.0, true);
        let model = Model::from_params(&params, mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let x: Vec<f32> = (0..n * l).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let batch = LabeledBatch::new(mat(n, l, &x), labels).unwrap();

        let (_, grads) = model.loss_and_grads(&protos, &batch, &loss).unwrap();
        let h = 1e-4;
        let check = |which: &str, analytic: &[f64], mutate: &dyn Fn(&mut Model, usize, f64)| {
            for k in 0..analytic.len() {
                let mut mp = model.clone();
                mutate(&mut mp, k, h);
                let lp = mp.loss(&protos, &batch, &loss).unwrap();
                let mut mm = model.clone();
                mutate(&mut mm, k, -h);
                let lm = mm.loss(&protos, &batch, &loss).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(
                    (fd - analytic[k]).abs() / denom < 1e-4,
                    "{which}[{k}] seed {seed}: analytic {} vs fd {fd}",
                    analytic[k]
                );
            }
        };
        if mode == EnsembleMode::Supervised {
            check("W", &grads.w, &|m, k, d| m.w[k] += d);
        } else {
            assert!(grads.w.iter().all(|&v| v == 0.0));
        }
        check("P_t", &grads.p_t, &|m, k, d| m.p_t[k] += d);
        check("P_v", &grads.p_v, &|m, k, d| m.p_v[k] += d);
    }

    #[test]
    fn param_gradients_match_fd_supervised_bce() {
        fd_check_params(EnsembleMode::Supervised, LossKind::BceSigmoid, 17);
    }

    #[test]
    fn param_gradients_match_fd_open_vocab_focal() {
        fd_check_params(
            EnsembleMode::OpenVocab,
            LossKind::Focal {
                gamma: 2.0,
                alpha: 0.25,
            },
            23,
        );
    }

    #[test]
    fn fit_zero_lr_leaves_params_bit_identical() {
        let bank = tiny_bank(3, 4, 4, 5);
        let params = init_params(6, 3, 5, 4, 4, 100.0, true);
        let batch = LabeledBatch::new(
            mat(4, 5, &(0..20).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>()),
            vec![0, 1, 2, 0],
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        let out = fit(&params, &bank, &batch, None, &cfg).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn fit_single_sgd_step_is_init_minus_lr_grad() {
        let bank = tiny_bank(3, 4, 4, 7);
        let protos = FrozenProtos::from_bank(&bank).unwrap();
        let params = init_params(8, 3, 5, 4, 4, 10.0, true);
        let x: Vec<f32> = (0..10).map(|i| (i as f32 * 0.7).cos()).collect();
        let batch = LabeledBatch::new(mat(2, 5, &x), vec![0, 2]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 2, // one batch, shuffle order irrelevant
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        let out = fit(&params, &bank, &batch, None, &cfg).unwrap();

        let model = Model::from_params(&params, EnsembleMode::Supervised).unwrap();
        let (_, grads) = model
            .loss_and_grads(&protos, &batch, &LossKind::BceSigmoid)
            .unwrap();
        let expect_w: Vec<f32> = model
            .w
            .iter()
            .zip(&grads.w)
            .map(|(p, g)| (p - 0.05 * g) as f32)
            .collect();
        assert_eq!(out.params.w.data(), &expect_w[..]);
    }

    #[test]
    fn fit_seed_determinism() {
        let bank = tiny_bank(3, 4, 4, 9);
        let params = init_params(10, 3, 5, 4, 4, 100.0, true);
        let x: Vec<f32> = (0..30).map(|i| (i as f32 * 1.1).sin()).collect();
        let batch = LabeledBatch::new(mat(6, 5, &x), vec![0, 1, 2, 0, 1, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 77,
            ..Default::default()
        };
        let a = fit(&params, &bank, &batch, None, &cfg).unwrap();
        let b = fit(&params, &bank, &batch, None, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn open_vocab_fit_never_touches_w() {
        let bank = tiny_bank(3, 4, 4, 12);
        let params = init_params(13, 3, 5, 4, 4, 100.0, true);
        let x: Vec<f32> = (0..30).map(|i| (i as f32 * 0.9).cos()).collect();
        let batch = LabeledBatch::new(mat(6, 5, &x), vec![0, 1, 2, 0, 1, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            mode: EnsembleMode::OpenVocab,
            ..Default::default()
        };
        let out = fit(&params, &bank, &batch, None, &cfg).unwrap();
        assert_eq!(out.params.w, params.w);
        assert_ne!(out.params.p_t, params.p_t);
    }

    #[test]
    fn separable_toy_world_reaches_perfect_accuracy() {
        // two categories on orthogonal axes, distinct noiseless features
        let bank = PrototypeBank {
            textual: mat(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            visual: mat(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            categories: (0..2)
                .map(|id| CategoryRecord {
                    id,
                    name: format!("c{id}"),
                    split: Split::Base,
                    has_description: true,
                })
                .collect(),
            sigma_table_hash: String::new(),
        };
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let jitter = i as f32 * 0.02;
            xs.extend_from_slice(&[1.0, jitter]);
            labels.push(0);
            xs.extend_from_slice(&[jitter, 1.0]);
            labels.push(1);
        }
        let batch = LabeledBatch::new(mat(20, 2, &xs), labels).unwrap();
        let params = init_params(21, 2, 2, 2, 2, 30.0, true);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            epochs: 50,
            batch_size: 8,
            seed: 4,
            ..Default::default()
        };
        let out = fit(&params, &bank, &batch, Some(&batch), &cfg).unwrap();
        let last = out.trace.last().unwrap();
        assert_eq!(last.top1_on_heldout, Some(1.0), "trace: {:?}", out.trace);
        // prototypes untouched
        assert_eq!(bank.textual.data(), mat(2, 2, &[1.0, 0.0, 0.0, 1.0]).data());
    }
}
