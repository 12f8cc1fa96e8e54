//! Central finite-difference verification of the analytic gradients of
//! each training objective.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::LossWeights;
use crate::networks::ModelBundle;
use crate::objective::{discriminator_pass, enet_pass, generator_pass, DTermWeights};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `−L_pro`
    NegLPro,
    PoseReal,
    PoseFake,
    Generator,
    Enhancer,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::NegLPro,
        Objective::PoseReal,
        Objective::PoseFake,
        Objective::Generator,
        Objective::Enhancer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::NegLPro => "-L_pro",
            Objective::PoseReal => "L_PE-Ir",
            Objective::PoseFake => "L_PE-Ig",
            Objective::Generator => "L_G",
            Objective::Enhancer => "L_ENET",
        }
    }

    /// Components whose parameters the objective trains.
    pub fn components(&self) -> &'static [&'static str] {
        match self {
            Objective::NegLPro | Objective::PoseReal | Objective::PoseFake => &["d_trunk", "m_d", "m_p", "m_l"],
            Objective::Generator => &["g"],
            Objective::Enhancer => &["enet"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    /// `component.parameter`
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, atol)` over the
    /// sampled coordinates.
    pub rel_error: f64,
}

struct Setup<'a, T> {
    y: &'a Tensor<T>,
    real: &'a Tensor<T>,
    w: &'a LossWeights,
    gamma: Option<f64>,
}

/// Value of `obj` and, as a side effect, its gradient accumulated in `b`.
fn evaluate<T: Real>(b: &mut ModelBundle<T>, s: &Setup<T>, obj: Objective) -> Result<f64> {
    let d = |b: &mut ModelBundle<T>, c: DTermWeights| {
        let fake = b.g.forward(s.y);
        discriminator_pass(b, s.y, s.real, &fake, s.w, c, s.gamma)
    };
    let off = DTermWeights {
        neg_l_pro: 0.0,
        pe_real: 0.0,
        pe_fake: 0.0,
    };
    Ok(match obj {
        Objective::NegLPro => -d(b, DTermWeights { neg_l_pro: 1.0, ..off })?.l_pro,
        Objective::PoseReal => d(b, DTermWeights { pe_real: 1.0, ..off })?.l_pe_real.unwrap_or(0.0),
        Objective::PoseFake => d(b, DTermWeights { pe_fake: 1.0, ..off })?.l_pe_fake.unwrap_or(0.0),
        Objective::Generator => generator_pass(b, s.y, s.w)?,
        Objective::Enhancer => enet_pass(b, s.y, s.real, s.w)?.total,
    })
}

fn collect<T: Real>(b: &ModelBundle<T>, components: &[&str], grads: bool) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    b.components(&mut |c, m| {
        if components.contains(&c) {
            m.visit(c, &mut |name, p| {
                let t = if grads { &p.grad } else { &p.value };
                out.push((name.to_string(), t.to_f64_vec()));
            });
        }
    });
    out
}

fn set_param(b: &mut ModelBundle<f64>, target: &str, idx: usize, v: f64) {
    b.components_mut(&mut |c, m| {
        m.visit_mut(c, &mut |name, p| {
            if name == target {
                p.value.data_mut()[idx] = v;
            }
        })
    });
}

/// Compares analytic gradients computed at precision `T` with central
/// differences of the `f64` objective at the same (rounded) parameters.
/// At most `samples` coordinates are checked per parameter tensor; `atol`
/// floors the normalizer so that identically zero gradients compare
/// against precision noise rather than against each other.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<T: Real>(
    reference: &ModelBundle<f64>,
    y: &Tensor<f64>,
    real: &Tensor<f64>,
    w: &LossWeights,
    obj: Objective,
    samples: usize,
    step: f64,
    atol: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let mut analytic_model: ModelBundle<T> = reference.cast();
    let mut fd_model: ModelBundle<f64> = analytic_model.cast();

    // The margin is a detached schedule: fix it at the unperturbed value.
    let gamma = {
        let mut probe = fd_model.clone();
        let fake = probe.g.forward(y);
        discriminator_pass(&mut probe, y, real, &fake, w, DTermWeights::total(w), None)?.gamma
    };

    let (yt, realt) = (y.cast::<T>(), real.cast::<T>());
    analytic_model.zero_grad();
    evaluate(
        &mut analytic_model,
        &Setup {
            y: &yt,
            real: &realt,
            w,
            gamma,
        },
        obj,
    )?;
    let grads = collect(&analytic_model, obj.components(), true);
    let values = collect(&fd_model, obj.components(), false);

    let setup = Setup { y, real, w, gamma };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ((name, g), (_, v)) in grads.iter().zip(&values) {
        let idx: Vec<usize> = if g.len() <= samples {
            (0..g.len()).collect()
        } else {
            sample(&mut rng, g.len(), samples).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in idx {
            set_param(&mut fd_model, name, i, v[i] + step);
            let plus = evaluate(&mut fd_model, &setup, obj)?;
            set_param(&mut fd_model, name, i, v[i] - step);
            let minus = evaluate(&mut fd_model, &setup, obj)?;
            set_param(&mut fd_model, name, i, v[i]);
            let numeric = (plus - minus) / (2.0 * step);
            diff += (g[i] - numeric).powi(2);
            na += g[i] * g[i];
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt()).max(atol);
        out.push(GroupCheck {
            name: name.clone(),
            analytic_norm: na.sqrt(),
            numeric_norm: nn.sqrt(),
            rel_error: if scale > 0.0 { diff.sqrt() / scale } else { 0.0 },
        });
    }
    Ok(out)
}
