//! Forward and backward passes of the three update kinds over a batch:
//! the discriminator objective, the generator objective and the
//! enhancement loss. Gradients accumulate into the bundle's parameters.

use crate::error::Result;
use crate::losses::{
    compute_gamma, discriminator_total, enet_loss_grad, generator_total, hinge_projection_objective, neg_hinge_grad,
    norm_hinge, pose_loss_fake_grad, DLossBreakdown, EnetLoss, LossWeights, PoseVec,
};
use crate::networks::{projection, projection_grad, GenCache, MlpCache, ModelBundle, TrunkCache};
use crate::nn::Module;
use crate::pose::POSE_DIM;
use crate::tensor::{Real, Tensor};

pub fn to_pose_vecs<T: Real>(t: &Tensor<T>) -> Vec<PoseVec> {
    let (n, d) = t.dims2();
    assert_eq!(d, POSE_DIM);
    (0..n).map(|i| std::array::from_fn(|k| t.item(i)[k].f64())).collect()
}

pub fn from_pose_vecs<T: Real>(v: &[PoseVec]) -> Tensor<T> {
    let flat: Vec<f64> = v.iter().flatten().copied().collect();
    Tensor::from_f64(&[v.len(), POSE_DIM], &flat)
}

fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|i| t.item(i).iter().map(|v| v.f64()).collect()).collect()
}

fn from_rows<T: Real>(r: &[Vec<f64>]) -> Tensor<T> {
    let flat: Vec<f64> = r.iter().flatten().copied().collect();
    Tensor::from_f64(&[r.len(), r[0].len()], &flat)
}

/// One image batch through the trunk and the heads.
struct Side<T> {
    f: Tensor<T>,
    trunk: TrunkCache<T>,
    logits: Vec<f64>,
    proj: Vec<f64>,
    scores: Vec<f64>,
    est: Option<(Vec<PoseVec>, MlpCache<T>)>,
}

fn side<T: Real>(b: &ModelBundle<T>, x: &Tensor<T>, embed: Option<&[Vec<f64>]>, k1: f64) -> Side<T> {
    let (f, trunk) = b.d.forward_cached(x);
    let logits: Vec<f64> = b.m_d.forward(&f).data().iter().map(|v| v.f64()).collect();
    let fr = rows(&f);
    let proj: Vec<f64> = match embed {
        Some(e) => fr
            .iter()
            .zip(e)
            .map(|(fi, ei)| projection(0.0, fi, ei, k1, b.config.cosine_projection))
            .collect(),
        None => vec![0.0; logits.len()],
    };
    let scores = logits.iter().zip(&proj).map(|(d, p)| d + p).collect();
    let est = b.m_l.as_ref().map(|m| {
        let (e, c) = m.forward_cached(&f);
        (to_pose_vecs(&e), c)
    });
    Side {
        f,
        trunk,
        logits,
        proj,
        scores,
        est,
    }
}

/// Backpropagates score and pose-estimate gradients of one side into the
/// discriminator parameters and returns `∂L/∂image`. `de_acc` collects the
/// gradient with respect to the pose embedding.
fn side_backward<T: Real>(
    b: &mut ModelBundle<T>,
    s: &Side<T>,
    dscore: &[f64],
    dest: Option<&[PoseVec]>,
    embed: Option<&[Vec<f64>]>,
    de_acc: &mut [Vec<f64>],
    k1: f64,
) -> Tensor<T> {
    let n = dscore.len();
    let dlogit = Tensor::from_f64(&[n, 1], dscore);
    let mut df = b.m_d.backward(&s.f, &dlogit);
    if let Some(e) = embed {
        let fr = rows(&s.f);
        let mut dproj = Vec::with_capacity(n);
        for i in 0..n {
            let (gf, ge) = projection_grad(&fr[i], &e[i], k1, b.config.cosine_projection);
            dproj.push(gf.iter().map(|v| v * dscore[i]).collect::<Vec<_>>());
            for (acc, g) in de_acc[i].iter_mut().zip(ge) {
                *acc += g * dscore[i];
            }
        }
        df.add_assign(&from_rows(&dproj));
    }
    if let (Some(m), Some((_, cache)), Some(g)) = (&mut b.m_l, &s.est, dest) {
        df.add_assign(&m.backward(cache, &from_pose_vecs(g)));
    }
    b.d.backward(&s.trunk, &df)
}

/// Weights of the three discriminator terms in the accumulated gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DTermWeights {
    pub neg_l_pro: f64,
    pub pe_real: f64,
    pub pe_fake: f64,
}

impl DTermWeights {
    pub fn total(w: &LossWeights) -> Self {
        DTermWeights {
            neg_l_pro: 1.0,
            pe_real: w.k2,
            pe_fake: w.k2,
        }
    }
}

/// Discriminator objective on `(real, y)` and `(fake, y)`; accumulates the
/// gradient of `Σ coeff·term` into the trunk and heads. `gamma` overrides
/// the margin computed from the batch (it is never differentiated).
pub fn discriminator_pass<T: Real>(
    b: &mut ModelBundle<T>,
    y: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    w: &LossWeights,
    coeff: DTermWeights,
    gamma: Option<f64>,
) -> Result<DLossBreakdown> {
    let n = y.dim(0);
    let embed_pass = b.m_p.as_ref().map(|m| m.forward_cached(y));
    let embed = embed_pass.as_ref().map(|(e, _)| rows(e));
    let sr = side(b, real, embed.as_deref(), w.k1);
    let sf = side(b, fake, embed.as_deref(), w.k1);

    let l_pro = hinge_projection_objective(&sr.scores, &sf.scores);
    let margin = compute_gamma(
        &sr.logits,
        &sf.logits,
        sr.est.as_ref().map_or(&[][..], |e| &e.0[..]),
    );
    let ys = to_pose_vecs(y);
    let pose = match (&sr.est, &sf.est) {
        (Some((er, _)), Some((ef, _))) => {
            let pr = norm_hinge(er, &ys, 0.0);
            let pf = pose_loss_fake_grad(ef, er, gamma.unwrap_or(margin.gamma))?;
            Some((pr, pf))
        }
        _ => None,
    };
    let proj_term = (sr.proj.iter().sum::<f64>() + sf.proj.iter().sum::<f64>()) / (2 * n) as f64;
    let breakdown = discriminator_total(
        l_pro,
        pose.as_ref().map(|(r, f)| (r.value, f.value)),
        margin,
        proj_term,
        w,
    );

    let (gr, gf) = neg_hinge_grad(&sr.scores, &sf.scores);
    let scale = |v: Vec<f64>| v.into_iter().map(|g| g * coeff.neg_l_pro).collect::<Vec<_>>();
    let (gr, gf) = (scale(gr), scale(gf));
    let (dest_r, dest_f) = match &pose {
        Some((pr, pf)) => {
            let r: Vec<PoseVec> = (0..n)
                .map(|i| std::array::from_fn(|k| coeff.pe_real * pr.grad_a[i][k] + coeff.pe_fake * pf.grad_b[i][k]))
                .collect();
            let f: Vec<PoseVec> = pf.grad_a.iter().map(|g| g.map(|v| v * coeff.pe_fake)).collect();
            (Some(r), Some(f))
        }
        None => (None, None),
    };
    let mut de = vec![vec![0.0; b.config.latent_dim]; n];
    side_backward(b, &sr, &gr, dest_r.as_deref(), embed.as_deref(), &mut de, w.k1);
    side_backward(b, &sf, &gf, dest_f.as_deref(), embed.as_deref(), &mut de, w.k1);
    if let (Some(m), Some((_, cache))) = (&mut b.m_p, &embed_pass) {
        m.backward(cache, &from_rows(&de));
    }
    Ok(breakdown)
}

/// Generator objective for already generated images; accumulates the
/// gradient into the generator. Discriminator-side gradients are also
/// touched and must be discarded by the caller.
pub fn generator_pass_cached<T: Real>(
    b: &mut ModelBundle<T>,
    y: &Tensor<T>,
    cache: &GenCache<T>,
    fake: &Tensor<T>,
    w: &LossWeights,
) -> Result<f64> {
    let n = y.dim(0);
    let embed_pass = b.m_p.as_ref().map(|m| m.forward_cached(y));
    let embed = embed_pass.as_ref().map(|(e, _)| rows(e));
    let sf = side(b, fake, embed.as_deref(), w.k1);
    let ys = to_pose_vecs(y);
    let est = sf.est.as_ref().map(|e| &e.0[..]);
    let l_g = generator_total(&sf.scores, est, &ys);

    let dscore = vec![-1.0 / n as f64; n];
    let dest = est.map(|e| norm_hinge(e, &ys, 0.0).grad_a);
    let mut de = vec![vec![0.0; b.config.latent_dim]; n];
    let dx = side_backward(b, &sf, &dscore, dest.as_deref(), embed.as_deref(), &mut de, w.k1);
    b.g.backward(cache, &dx);
    Ok(l_g)
}

pub fn generator_pass<T: Real>(b: &mut ModelBundle<T>, y: &Tensor<T>, w: &LossWeights) -> Result<f64> {
    let (fake, cache) = b.g.forward_cached(y);
    generator_pass_cached(b, y, &cache, &fake, w)
}

/// Enhancement loss between `ENET(G(y))` and the RGB of `real`;
/// accumulates the gradient into the enhancer only.
pub fn enet_pass<T: Real>(b: &mut ModelBundle<T>, y: &Tensor<T>, real: &Tensor<T>, w: &LossWeights) -> Result<EnetLoss> {
    let generated = b.g.forward(y);
    enet_pass_generated(b, &generated, real, w)
}

/// [`enet_pass`] for precomputed generator output.
pub fn enet_pass_generated<T: Real>(
    b: &mut ModelBundle<T>,
    generated: &Tensor<T>,
    real: &Tensor<T>,
    w: &LossWeights,
) -> Result<EnetLoss> {
    let enet = b
        .enet
        .as_mut()
        .ok_or_else(|| crate::Error::State("bundle has no enhancement network".into()))?;
    let (out, cache) = enet.forward_cached(generated);
    let (loss, dout) = enet_loss_grad(&out, &real.leading_channels(3), w.k3)?;
    enet.backward(&cache, &dout);
    Ok(loss)
}

/// Stable hash of every parameter of `modules`.
pub fn param_hash<T: Real>(modules: &[&dyn Module<T>]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for m in modules {
        m.visit("", &mut |name, p| {
            buf.clear();
            buf.extend_from_slice(name.as_bytes());
            for v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        });
    }
    h.finalize().into()
}
