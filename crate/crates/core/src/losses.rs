//! Adversarial, pose-consistency and enhancement objectives with their
//! gradients. Scalars and pose vectors are handled in `f64`; image losses
//! accept tensors of either precision and accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::POSE_DIM;
use crate::tensor::{Real, Tensor};

pub type PoseVec = [f64; POSE_DIM];

/// Keeps square roots differentiable at zero.
pub const SQRT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Projection term of the score.
    pub k1: f64,
    /// Pose-consistency terms of the discriminator objective.
    pub k2: f64,
    /// Edge term of the enhancement loss.
    pub k3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            k1: 1.0,
            k2: 1.0,
            k3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.k1, self.k2, self.k3].iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    v.sum::<f64>() / n as f64
}

/// `mean(min(0, −1 + s_r)) + mean(min(0, −1 − s_f))`; maximized by the
/// discriminator.
pub fn hinge_projection_objective(score_real: &[f64], score_fake: &[f64]) -> f64 {
    mean(score_real.iter().map(|s| (s - 1.0).min(0.0))) + mean(score_fake.iter().map(|s| (-1.0 - s).min(0.0)))
}

/// Gradient of the minimized quantity `−L_pro` with respect to each score.
pub fn neg_hinge_grad(score_real: &[f64], score_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = score_real.len().max(1) as f64;
    let nf = score_fake.len().max(1) as f64;
    (
        score_real.iter().map(|s| if *s < 1.0 { -1.0 / nr } else { 0.0 }).collect(),
        score_fake.iter().map(|s| if *s > -1.0 { 1.0 / nf } else { 0.0 }).collect(),
    )
}

pub fn l2(v: &PoseVec) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &PoseVec, b: &PoseVec) -> PoseVec {
    std::array::from_fn(|i| a[i] - b[i])
}

/// `mean_i max(‖a_i − b_i‖ − margin, 0)` with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NormHinge {
    pub value: f64,
    pub grad_a: Vec<PoseVec>,
    pub grad_b: Vec<PoseVec>,
}

pub fn norm_hinge(a: &[PoseVec], b: &[PoseVec], margin: f64) -> NormHinge {
    assert_eq!(a.len(), b.len(), "pose batch sizes differ");
    let n = a.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad_a = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let d = sub(x, y);
        let len = l2(&d);
        let excess = len - margin;
        if excess > 0.0 {
            value += excess;
        }
        // Subgradient 0 at the kink and at a zero difference.
        grad_a.push(if excess > 0.0 && len > 0.0 {
            d.map(|v| v / (len * n))
        } else {
            [0.0; POSE_DIM]
        });
    }
    let grad_b = grad_a.iter().map(|g| g.map(|v| -v)).collect();
    NormHinge {
        value: value / n,
        grad_a,
        grad_b,
    }
}

/// Mean distance between estimated and conditioning poses on real images.
pub fn pose_loss_real(pose_est: &[PoseVec], y: &[PoseVec]) -> f64 {
    norm_hinge(pose_est, y, 0.0).value
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    /// Mean absolute gap between real and fake adversarial logits.
    pub diff: f64,
    pub gamma: f64,
}

/// `DIFF = mean|d_r − d_f|`, `γ = DIFF · mean‖pose_est_real‖`.
pub fn compute_gamma(d_real: &[f64], d_fake: &[f64], pose_est_real: &[PoseVec]) -> Margin {
    assert_eq!(d_real.len(), d_fake.len(), "logit batch sizes differ");
    let diff = mean(d_real.iter().zip(d_fake).map(|(r, f)| (r - f).abs()));
    let scale = mean(pose_est_real.iter().map(l2));
    Margin {
        diff,
        gamma: diff * scale,
    }
}

/// Pose estimates on generated images may differ from those on real
/// images by up to `gamma`.
pub fn pose_loss_fake(pose_est_fake: &[PoseVec], pose_est_real: &[PoseVec], gamma: f64) -> Result<f64> {
    Ok(pose_loss_fake_grad(pose_est_fake, pose_est_real, gamma)?.value)
}

pub fn pose_loss_fake_grad(pose_est_fake: &[PoseVec], pose_est_real: &[PoseVec], gamma: f64) -> Result<NormHinge> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidMargin(gamma));
    }
    Ok(norm_hinge(pose_est_fake, pose_est_real, gamma))
}

/// Components of the discriminator objective for one batch. Pose terms
/// and the margin are absent when the pose regressor is ablated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DLossBreakdown {
    pub l_pro: f64,
    pub l_pe_real: Option<f64>,
    pub l_pe_fake: Option<f64>,
    /// Minimized quantity `−l_pro + k2·(l_pe_real + l_pe_fake)`.
    pub total: f64,
    pub diff: f64,
    pub gamma: Option<f64>,
    /// Mean projection contribution to the scores, real and fake.
    pub proj_term: f64,
}

pub fn discriminator_total(
    l_pro: f64,
    pose_terms: Option<(f64, f64)>,
    margin: Margin,
    proj_term: f64,
    weights: &LossWeights,
) -> DLossBreakdown {
    let pe = pose_terms.map_or(0.0, |(r, f)| r + f);
    DLossBreakdown {
        l_pro,
        l_pe_real: pose_terms.map(|p| p.0),
        l_pe_fake: pose_terms.map(|p| p.1),
        total: -l_pro + weights.k2 * pe,
        diff: margin.diff,
        gamma: pose_terms.map(|_| margin.gamma),
        proj_term,
    }
}

/// `−mean(score_fake) + mean‖pose_est_fake − y‖`; the pose term is
/// skipped when no estimates are given.
pub fn generator_total(score_fake: &[f64], pose_est_fake: Option<&[PoseVec]>, y: &[PoseVec]) -> f64 {
    let adv = -mean(score_fake.iter().copied());
    adv + pose_est_fake.map_or(0.0, |est| pose_loss_real(est, y))
}

/// Roberts cross edge magnitude of `[N, C, H, W]` (or `[C, H, W]`)
/// images, shape `[…, C, H−1, W−1]`.
pub fn roberts_edge<T: Real>(image: &Tensor<T>) -> Result<Tensor<f64>> {
    let (lead, h, w) = planes(image)?;
    let (ho, wo) = (h - 1, w - 1);
    let src = image.data();
    let mut out = Vec::with_capacity(lead * ho * wo);
    for p in 0..lead {
        let s = &src[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let (gx, gy) = roberts_at(s, w, i, j);
                out.push((gx * gx + gy * gy + SQRT_EPS).sqrt());
            }
        }
    }
    let mut shape = image.shape().to_vec();
    let k = shape.len();
    shape[k - 2] = ho;
    shape[k - 1] = wo;
    Ok(Tensor::from_vec(&shape, out))
}

fn planes<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("expected [C, H, W] or [N, C, H, W], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("Roberts operator needs H, W >= 2, got {h}×{w}")));
    }
    Ok((image.numel() / (h * w), h, w))
}

#[inline]
fn roberts_at<T: Real>(s: &[T], w: usize, i: usize, j: usize) -> (f64, f64) {
    let p = |r: usize, c: usize| s[r * w + c].f64();
    (p(i, j) - p(i + 1, j + 1), p(i, j + 1) - p(i + 1, j))
}

/// Pixel term plus `k3` times the edge term of the enhancement loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnetLoss {
    pub pixel: f64,
    pub edge: f64,
    pub total: f64,
}

/// `mean_px ‖I_e − I_r‖ + k3 · mean_px ‖roberts(I_e) − roberts(I_r)‖`,
/// norms over channels, for `[N, C, H, W]` batches.
pub fn enet_loss<T: Real>(out: &Tensor<T>, target: &Tensor<T>, k3: f64) -> Result<EnetLoss> {
    Ok(enet_loss_grad(out, target, k3)?.0)
}

/// [`enet_loss`] and its gradient with respect to `out`.
pub fn enet_loss_grad<T: Real>(out: &Tensor<T>, target: &Tensor<T>, k3: f64) -> Result<(EnetLoss, Tensor<T>)> {
    if out.shape() != target.shape() || out.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "enhancement loss needs equal [N, C, H, W] shapes, got {:?} and {:?}",
            out.shape(),
            target.shape()
        )));
    }
    let (n, c, h, w) = out.dims4();
    let plane = h * w;
    let (o, t) = (out.data(), target.data());
    let mut grad = vec![0.0f64; out.numel()];

    let mut pixel = 0.0;
    let inv_px = 1.0 / (n * plane) as f64;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let sq: f64 = (0..c)
                .map(|ch| {
                    let k = base + ch * plane + p;
                    (o[k].f64() - t[k].f64()).powi(2)
                })
                .sum();
            let len = (sq + SQRT_EPS).sqrt();
            pixel += len;
            for ch in 0..c {
                let k = base + ch * plane + p;
                grad[k] += (o[k].f64() - t[k].f64()) / len * inv_px;
            }
        }
    }
    pixel *= inv_px;

    let mut edge = 0.0;
    if h >= 2 && w >= 2 {
        let (ho, wo) = (h - 1, w - 1);
        let inv_e = 1.0 / (n * ho * wo) as f64;
        let mut mag_o = vec![0.0; c];
        let mut gxo = vec![0.0; c];
        let mut gyo = vec![0.0; c];
        let mut delta = vec![0.0; c];
        for b in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut sq = 0.0;
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let (gx, gy) = roberts_at(&o[off..off + plane], w, i, j);
                        let (tx, ty) = roberts_at(&t[off..off + plane], w, i, j);
                        mag_o[ch] = (gx * gx + gy * gy + SQRT_EPS).sqrt();
                        gxo[ch] = gx;
                        gyo[ch] = gy;
                        delta[ch] = mag_o[ch] - (tx * tx + ty * ty + SQRT_EPS).sqrt();
                        sq += delta[ch] * delta[ch];
                    }
                    let len = (sq + SQRT_EPS).sqrt();
                    edge += len;
                    for ch in 0..c {
                        let dmag = k3 * inv_e * delta[ch] / len;
                        let dgx = dmag * gxo[ch] / mag_o[ch];
                        let dgy = dmag * gyo[ch] / mag_o[ch];
                        let off = (b * c + ch) * plane;
                        grad[off + i * w + j] += dgx;
                        grad[off + (i + 1) * w + j + 1] -= dgx;
                        grad[off + i * w + j + 1] += dgy;
                        grad[off + (i + 1) * w + j] -= dgy;
                    }
                }
            }
        }
        edge *= inv_e;
    }
    let loss = EnetLoss {
        pixel,
        edge,
        total: pixel + k3 * edge,
    };
    Ok((loss, Tensor::from_f64(out.shape(), &grad)))
}
