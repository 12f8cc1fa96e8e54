//! Generator, discriminator trunk, the three heads and the enhancement
//! network, each with a cached forward pass and a matching backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, leaky_relu, leaky_relu_backward, pixel_norm, pixel_norm_backward, saturate, saturate_backward, sum_pool,
    sum_pool_backward, tanh, tanh_backward, upsample2, upsample2_backward, AttentionCache, ChannelAttention, Conv2d,
    Linear, Module, Param,
};
use crate::pose::{SceneBounds, POSE_DIM};
use crate::tensor::{Real, Tensor};

/// Spatial size of the generator's first feature map.
pub const BASE_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Output side length in pixels; a power of two.
    pub resolution: usize,
    /// 4 for RGBD, 3 without depth.
    pub in_channels: usize,
    /// Generator channels from the 4×4 map to the last hidden stage,
    /// `log2(resolution) - 1` entries. Empty selects the default schedule.
    pub g_channels: Vec<usize>,
    /// Discriminator block widths, `log2(resolution) - 2` entries, the last
    /// equal to `latent_dim`. Empty selects the default schedule.
    pub d_channels: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden width of the pose embedding and pose regression heads.
    pub head_hidden: usize,
    pub use_attention: bool,
    /// Pose embedding head and the projection term of the score.
    pub use_projection: bool,
    /// Pose regression head and the pose-consistency losses.
    pub use_pose_regressor: bool,
    pub use_enet: bool,
    /// Normalize the projection inner product to a cosine.
    pub cosine_projection: bool,
    pub enet_blocks: usize,
    pub enet_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            resolution: 256,
            in_channels: 4,
            g_channels: Vec::new(),
            d_channels: Vec::new(),
            latent_dim: 1024,
            head_hidden: 256,
            use_attention: true,
            use_projection: true,
            use_pose_regressor: true,
            use_enet: true,
            cosine_projection: false,
            enet_blocks: 8,
            enet_channels: 32,
        }
    }
}

impl NetworkConfig {
    pub fn log2_resolution(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    /// Number of ×2 upsampling stages in the generator, which equals the
    /// number of stride-2 blocks in the discriminator trunk.
    pub fn num_stages(&self) -> usize {
        self.log2_resolution().saturating_sub(2)
    }

    pub fn g_schedule(&self) -> Vec<usize> {
        if !self.g_channels.is_empty() {
            return self.g_channels.clone();
        }
        (0..=self.num_stages()).map(|i| (1024usize >> i).max(64)).collect()
    }

    pub fn d_schedule(&self) -> Vec<usize> {
        if !self.d_channels.is_empty() {
            return self.d_channels.clone();
        }
        let n = self.num_stages();
        (0..n)
            .map(|i| if i + 1 == n { self.latent_dim } else { (64usize << i).min(1024) })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return bad(format!("resolution {} must be a power of two >= 8", self.resolution));
        }
        if self.latent_dim < 8 {
            return bad(format!("latent_dim {} must be >= 8", self.latent_dim));
        }
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return bad(format!("in_channels {} must be 3 or 4", self.in_channels));
        }
        let g = self.g_schedule();
        if g.len() != self.num_stages() + 1 || g.contains(&0) {
            return bad(format!(
                "g_channels needs {} positive entries for resolution {}, got {g:?}",
                self.num_stages() + 1,
                self.resolution
            ));
        }
        let d = self.d_schedule();
        if d.len() != self.num_stages() || d.contains(&0) || d.last() != Some(&self.latent_dim) {
            return bad(format!(
                "d_channels needs {} positive entries ending in latent_dim {}, got {d:?}",
                self.num_stages(),
                self.latent_dim
            ));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be positive".into());
        }
        if self.use_enet && self.enet_channels == 0 {
            return bad("enet_channels must be positive".into());
        }
        Ok(())
    }
}

/// Structural toggles of the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_depth: bool,
    pub no_hd_match: bool,
    pub no_ld_match: bool,
    pub no_attention: bool,
    pub fewer_channels: bool,
    pub no_enet: bool,
}

/// Width of every generator stage in the reduced-channel ablation.
pub const FEWER_CHANNELS: usize = 64;

impl Ablation {
    pub const MINIMALIST: Ablation = Ablation {
        no_depth: true,
        no_hd_match: true,
        no_ld_match: true,
        no_attention: true,
        fewer_channels: true,
        no_enet: true,
    };

    pub fn apply(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut c = base.clone();
        if self.no_depth {
            c.in_channels = 3;
        }
        if self.no_hd_match {
            c.use_projection = false;
        }
        if self.no_ld_match {
            c.use_pose_regressor = false;
        }
        if self.no_attention {
            c.use_attention = false;
        }
        if self.fewer_channels {
            c.g_channels = vec![FEWER_CHANNELS; base.num_stages() + 1];
        }
        if self.no_enet {
            c.use_enet = false;
        }
        c
    }
}

fn check_shape<T: Real>(what: &str, x: &Tensor<T>, want: &[usize]) -> Result<()> {
    let s = x.shape();
    let ok = s.len() == want.len() + 1 && &s[1..] == want;
    if !ok {
        return Err(Error::Config(format!("{what}: expected [N, {want:?}], got {s:?}")));
    }
    if !x.is_finite() {
        return Err(Error::Input(format!("{what}: non-finite values")));
    }
    Ok(())
}

pub struct GenCache<T> {
    input: Tensor<T>,
    /// Per stage: the tensor fed to the stage conv (0 is unused).
    conv_in: Vec<Tensor<T>>,
    norm: Vec<(Tensor<T>, Vec<T>)>,
    act: Vec<Tensor<T>>,
    out: Tensor<T>,
}

/// Pose code → image decoder. Deterministic: it takes no noise input.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub fc: Linear<T>,
    pub convs: Vec<Conv2d<T>>,
    pub out: Conv2d<T>,
    c0: usize,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = cfg.g_schedule();
        let fc = Linear::new(rng, POSE_DIM, ch[0] * BASE_SIZE * BASE_SIZE, 1.0);
        let convs = ch.windows(2).map(|w| Conv2d::new(rng, w[0], w[1], 3, 1, 1, 1.0)).collect();
        let out = Conv2d::new(rng, *ch.last().expect("schedule"), cfg.in_channels, 3, 1, 1, 0.5);
        Generator { fc, convs, out, c0: ch[0] }
    }

    pub fn forward_cached(&self, pose_enc: &Tensor<T>) -> (Tensor<T>, GenCache<T>) {
        let n = pose_enc.dim(0);
        let h0 = self.fc.forward(pose_enc).reshape(&[n, self.c0, BASE_SIZE, BASE_SIZE]);
        let mut conv_in = vec![Tensor::zeros(&[0])];
        let mut norm = vec![pixel_norm(&h0)];
        let mut act = vec![leaky_relu(&norm[0].0)];
        for conv in &self.convs {
            let up = upsample2(act.last().expect("stage"));
            let z = conv.forward(&up);
            conv_in.push(up);
            let pn = pixel_norm(&z);
            act.push(leaky_relu(&pn.0));
            norm.push(pn);
        }
        let out = tanh(&self.out.forward(act.last().expect("stage")));
        let cache = GenCache {
            input: pose_enc.clone(),
            conv_in,
            norm,
            act,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn forward(&self, pose_enc: &Tensor<T>) -> Tensor<T> {
        self.forward_cached(pose_enc).0
    }

    /// Checked entry point for `[N, 7]` encoded poses.
    pub fn generate(&self, pose_enc: &Tensor<T>) -> Result<Tensor<T>> {
        check_shape("generator input", pose_enc, &[POSE_DIM])?;
        Ok(self.forward(pose_enc))
    }

    /// Accumulates parameter gradients for `dy = ∂L/∂output`.
    pub fn backward(&mut self, cache: &GenCache<T>, dy: &Tensor<T>) {
        let d = tanh_backward(&cache.out, dy);
        let last = cache.act.len() - 1;
        let mut d = self.out.backward(&cache.act[last], &d);
        for s in (0..=last).rev() {
            d = leaky_relu_backward(&cache.act[s], &d);
            d = pixel_norm_backward(&cache.norm[s].0, &cache.norm[s].1, &d);
            if s > 0 {
                d = self.convs[s - 1].backward(&cache.conv_in[s], &d);
                d = upsample2_backward(&d);
            }
        }
        let n = cache.input.dim(0);
        let d = d.reshape(&[n, self.c0 * BASE_SIZE * BASE_SIZE]);
        self.fc.backward(&cache.input, &d);
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc.visit(&join(prefix, "fc"), f);
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc.visit_mut(&join(prefix, "fc"), f);
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DBlock<T> {
    pub conv: Conv2d<T>,
    pub attn: Option<ChannelAttention<T>>,
}

pub struct TrunkCache<T> {
    block_in: Vec<Tensor<T>>,
    act: Vec<Tensor<T>>,
    attn: Vec<Option<AttentionCache<T>>>,
    last_hw: (usize, usize),
}

/// Stride-2 conv blocks, each followed by channel attention, then global
/// sum pooling into the latent feature.
#[derive(Debug, Clone)]
pub struct DiscriminatorTrunk<T> {
    pub blocks: Vec<DBlock<T>>,
    resolution: usize,
    in_channels: usize,
}

impl<T: Real> DiscriminatorTrunk<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = cfg.in_channels;
        let blocks = cfg
            .d_schedule()
            .into_iter()
            .map(|cout| {
                let conv = Conv2d::new(rng, cin, cout, 3, 2, 1, 1.0);
                cin = cout;
                let attn = cfg.use_attention.then(|| ChannelAttention::new(rng, cout));
                DBlock { conv, attn }
            })
            .collect();
        DiscriminatorTrunk {
            blocks,
            resolution: cfg.resolution,
            in_channels: cfg.in_channels,
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, TrunkCache<T>) {
        let mut block_in = Vec::with_capacity(self.blocks.len());
        let mut act = Vec::with_capacity(self.blocks.len());
        let mut attn = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let a = leaky_relu(&b.conv.forward(&h));
            block_in.push(std::mem::replace(&mut h, Tensor::zeros(&[0])));
            match &b.attn {
                Some(at) => {
                    let (y, c) = at.forward(&a);
                    h = y;
                    attn.push(Some(c));
                }
                None => {
                    h = a.clone();
                    attn.push(None);
                }
            }
            act.push(a);
        }
        let (_, _, hh, ww) = h.dims4();
        let f = sum_pool(&h);
        (
            f,
            TrunkCache {
                block_in,
                act,
                attn,
                last_hw: (hh, ww),
            },
        )
    }

    /// Checked entry point: `[N, in_channels, R, R]` → `[N, latent_dim]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_shape(
            "discriminator input",
            x,
            &[self.in_channels, self.resolution, self.resolution],
        )?;
        Ok(self.forward_cached(x).0)
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, cache: &TrunkCache<T>, df: &Tensor<T>) -> Tensor<T> {
        let (hh, ww) = cache.last_hw;
        let mut d = sum_pool_backward(df, hh, ww);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if let (Some(at), Some(c)) = (&mut b.attn, &cache.attn[i]) {
                d = at.backward(&cache.act[i], c, &d);
            }
            d = leaky_relu_backward(&cache.act[i], &d);
            d = b.conv.backward(&cache.block_in[i], &d);
        }
        d
    }
}

impl<T: Real> Module<T> for DiscriminatorTrunk<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv.visit(&join(&p, "conv"), f);
            if let Some(a) = &b.attn {
                a.visit(&join(&p, "attn"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv.visit_mut(&join(&p, "conv"), f);
            if let Some(a) = &mut b.attn {
                a.visit_mut(&join(&p, "attn"), f);
            }
        }
    }
}

/// Two affine layers with a leaky ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

pub struct MlpCache<T> {
    x: Tensor<T>,
    h: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(rng: &mut ChaCha8Rng, inp: usize, hidden: usize, out: usize) -> Self {
        Mlp {
            l1: Linear::new(rng, inp, hidden, 1.0),
            l2: Linear::new(rng, hidden, out, 0.5),
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, MlpCache<T>) {
        let h = leaky_relu(&self.l1.forward(x));
        (self.l2.forward(&h), MlpCache { x: x.clone(), h })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_cached(x).0
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh = self.l2.backward(&cache.h, dy);
        let dh = leaky_relu_backward(&cache.h, &dh);
        self.l1.backward(&cache.x, &dh)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.l1.visit_mut(&join(prefix, "l1"), f);
        self.l2.visit_mut(&join(prefix, "l2"), f);
    }
}

/// Guards the cosine normalization against zero vectors.
const COSINE_EPS: f64 = 1e-8;

/// `d + k1·⟨f, e⟩`, or `d + k1·cos(f, e)` when `cosine`.
pub fn projection(d: f64, f: &[f64], e: &[f64], k1: f64, cosine: bool) -> f64 {
    let dot: f64 = f.iter().zip(e).map(|(a, b)| a * b).sum();
    if !cosine {
        return d + k1 * dot;
    }
    let (nf, ne) = (norm(f), norm(e));
    d + k1 * dot / (nf * ne + COSINE_EPS)
}

/// Gradients of [`projection`] with respect to `f` and `e` (the derivative
/// with respect to `d` is 1).
pub fn projection_grad(f: &[f64], e: &[f64], k1: f64, cosine: bool) -> (Vec<f64>, Vec<f64>) {
    if !cosine {
        return (e.iter().map(|v| k1 * v).collect(), f.iter().map(|v| k1 * v).collect());
    }
    let dot: f64 = f.iter().zip(e).map(|(a, b)| a * b).sum();
    let (nf, ne) = (norm(f), norm(e));
    let den = nf * ne + COSINE_EPS;
    let c = dot / (den * den);
    let df = f
        .iter()
        .zip(e)
        .map(|(fi, ei)| k1 * (ei / den - c * if nf > 0.0 { ne * fi / nf } else { 0.0 }))
        .collect();
    let de = f
        .iter()
        .zip(e)
        .map(|(fi, ei)| k1 * (fi / den - c * if ne > 0.0 { nf * ei / ne } else { 0.0 }))
        .collect();
    (df, de)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    pub c1: Conv2d<T>,
    pub c2: Conv2d<T>,
}

pub struct EnetCache<T> {
    input: Tensor<T>,
    head_act: Tensor<T>,
    block_in: Vec<Tensor<T>>,
    block_mid: Vec<Tensor<T>>,
    tail_in: Tensor<T>,
    pre: Tensor<T>,
}

/// Full-resolution residual CNN refining the generator's RGB.
#[derive(Debug, Clone)]
pub struct Enet<T> {
    pub head: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub tail: Conv2d<T>,
}

impl<T: Real> Enet<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.enet_channels;
        Enet {
            head: Conv2d::new(rng, cfg.in_channels, c, 3, 1, 1, 1.0),
            blocks: (0..cfg.enet_blocks)
                .map(|_| ResBlock {
                    c1: Conv2d::new(rng, c, c, 3, 1, 1, 1.0),
                    c2: Conv2d::new(rng, c, c, 3, 1, 1, 0.5),
                })
                .collect(),
            tail: Conv2d::new(rng, c, 3, 3, 1, 1, 1.0).zero_init(),
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, EnetCache<T>) {
        let head_act = leaky_relu(&self.head.forward(x));
        let mut h = head_act.clone();
        let mut block_in = Vec::new();
        let mut block_mid = Vec::new();
        for b in &self.blocks {
            let mid = leaky_relu(&b.c1.forward(&h));
            let mut next = b.c2.forward(&mid);
            next.add_assign(&h);
            block_in.push(std::mem::replace(&mut h, next));
            block_mid.push(mid);
        }
        let mut pre = self.tail.forward(&h);
        pre.add_assign(&x.leading_channels(3));
        let out = saturate(&pre);
        let cache = EnetCache {
            input: x.clone(),
            head_act,
            block_in,
            block_mid,
            tail_in: h,
            pre,
        };
        (out, cache)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_cached(x).0
    }

    /// Accumulates parameter gradients. No gradient is returned to the
    /// input: the generator is frozen while this network trains.
    pub fn backward(&mut self, cache: &EnetCache<T>, dy: &Tensor<T>) {
        let d = saturate_backward(&cache.pre, dy);
        let mut d = self.tail.backward(&cache.tail_in, &d);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            let dm = b.c2.backward(&cache.block_mid[i], &d);
            let dm = leaky_relu_backward(&cache.block_mid[i], &dm);
            let dx = b.c1.backward(&cache.block_in[i], &dm);
            d.add_assign(&dx);
        }
        let d = leaky_relu_backward(&cache.head_act, &d);
        self.head.backward(&cache.input, &d);
    }
}

impl<T: Real> Module<T> for Enet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.head.visit(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.c1.visit(&join(prefix, &format!("block{i}.c1")), f);
            b.c2.visit(&join(prefix, &format!("block{i}.c2")), f);
        }
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.c1.visit_mut(&join(prefix, &format!("block{i}.c1")), f);
            b.c2.visit_mut(&join(prefix, &format!("block{i}.c2")), f);
        }
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}

/// Scene metadata needed to encode poses and decode depth at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub bounds: SceneBounds,
    pub depth_max_m: f64,
}

/// Names of the parameter groups, in checkpoint order.
pub const COMPONENTS: [&str; 6] = ["g", "d_trunk", "m_d", "m_p", "m_l", "enet"];

#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub config: NetworkConfig,
    pub scene: SceneMeta,
    pub g: Generator<T>,
    pub d: DiscriminatorTrunk<T>,
    pub m_d: Linear<T>,
    pub m_p: Option<Mlp<T>>,
    pub m_l: Option<Mlp<T>>,
    pub enet: Option<Enet<T>>,
    /// 1 while adversarial training is pending, 2 once it has completed.
    pub phase: u8,
    pub step: u64,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(config: NetworkConfig, scene: SceneMeta, seed: u64) -> Result<Self> {
        config.validate()?;
        scene.bounds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(&config, &mut rng);
        let d = DiscriminatorTrunk::new(&config, &mut rng);
        let m_d = Linear::new(&mut rng, config.latent_dim, 1, 0.5);
        let m_p = config
            .use_projection
            .then(|| Mlp::new(&mut rng, POSE_DIM, config.head_hidden, config.latent_dim));
        let m_l = config
            .use_pose_regressor
            .then(|| Mlp::new(&mut rng, config.latent_dim, config.head_hidden, POSE_DIM));
        let enet = config.use_enet.then(|| Enet::new(&config, &mut rng));
        Ok(ModelBundle {
            config,
            scene,
            g,
            d,
            m_d,
            m_p,
            m_l,
            enet,
            phase: 1,
            step: 0,
        })
    }

    /// Calls `f` for every present component, in checkpoint order.
    pub fn components(&self, f: &mut dyn FnMut(&str, &dyn Module<T>)) {
        f("g", &self.g);
        f("d_trunk", &self.d);
        f("m_d", &self.m_d);
        if let Some(m) = &self.m_p {
            f("m_p", m);
        }
        if let Some(m) = &self.m_l {
            f("m_l", m);
        }
        if let Some(m) = &self.enet {
            f("enet", m);
        }
    }

    pub fn components_mut(&mut self, f: &mut dyn FnMut(&str, &mut dyn Module<T>)) {
        f("g", &mut self.g);
        f("d_trunk", &mut self.d);
        f("m_d", &mut self.m_d);
        if let Some(m) = &mut self.m_p {
            f("m_p", m);
        }
        if let Some(m) = &mut self.m_l {
            f("m_l", m);
        }
        if let Some(m) = &mut self.enet {
            f("enet", m);
        }
    }

    /// Discriminator side: trunk and heads.
    pub fn d_modules(&mut self) -> Vec<&mut dyn Module<T>> {
        let mut v: Vec<&mut dyn Module<T>> = vec![&mut self.d, &mut self.m_d];
        if let Some(m) = &mut self.m_p {
            v.push(m);
        }
        if let Some(m) = &mut self.m_l {
            v.push(m);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.components(&mut |_, m| n += m.param_count());
        n
    }

    pub fn component_param_count(&self, name: &str) -> usize {
        let mut n = 0;
        self.components(&mut |c, m| {
            if c == name {
                n = m.param_count()
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.components_mut(&mut |_, m| m.zero_grad());
    }

    /// Copies every parameter from a bundle of identical structure,
    /// converting precision.
    pub fn copy_params_from<U: Real>(&mut self, other: &ModelBundle<U>) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("bundle structures differ".into()));
        }
        let mut values = Vec::new();
        other.components(&mut |_, m| m.visit("", &mut |_, p| values.push(p.value.cast::<T>())));
        let mut it = values.into_iter();
        self.components_mut(&mut |_, m| {
            m.visit_mut("", &mut |_, p| p.value = it.next().expect("same structure"));
        });
        self.phase = other.phase;
        self.step = other.step;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        let mut out = ModelBundle::<U>::new(self.config.clone(), self.scene, 0).expect("config already valid");
        out.copy_params_from(self).expect("same config");
        out
    }

    /// Enhanced RGB (or the generator's RGB when the enhancer is absent or
    /// `enhanced` is false) and the generator's full output.
    pub fn synthesize(&self, pose_enc: &Tensor<T>, enhanced: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let raw = self.g.generate(pose_enc)?;
        let rgb = match (&self.enet, enhanced) {
            (Some(e), true) => e.forward(&raw),
            _ => raw.leading_channels(3),
        };
        Ok((rgb, raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            resolution: 8,
            g_channels: vec![8, 6],
            d_channels: vec![16],
            latent_dim: 16,
            head_hidden: 8,
            enet_blocks: 1,
            enet_channels: 4,
            ..NetworkConfig::default()
        }
    }

    fn scene() -> SceneMeta {
        SceneMeta {
            bounds: SceneBounds::new([0.0; 3], [1.0; 3]).unwrap(),
            depth_max_m: 4.0,
        }
    }

    fn poses(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
        Tensor::from_vec(&[n, 7], (0..n * 7).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn default_schedules() {
        let c = NetworkConfig::default();
        assert_eq!(c.g_schedule(), vec![1024, 512, 256, 128, 64, 64, 64]);
        assert_eq!(c.d_schedule(), vec![64, 128, 256, 512, 1024, 1024]);
        let c = NetworkConfig {
            resolution: 64,
            ..NetworkConfig::default()
        };
        assert_eq!(c.d_schedule().len(), 4);
        assert_eq!(c.d_schedule().last(), Some(&1024));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            NetworkConfig {
                resolution: 48,
                ..NetworkConfig::default()
            },
            NetworkConfig {
                latent_dim: 4,
                d_channels: vec![64, 64, 64, 64, 64, 4],
                ..NetworkConfig::default()
            },
            NetworkConfig {
                in_channels: 2,
                ..NetworkConfig::default()
            },
            NetworkConfig {
                g_channels: vec![64, 64],
                ..NetworkConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn generator_shape_bounds_and_determinism() {
        let cfg = NetworkConfig {
            resolution: 32,
            g_channels: vec![16, 8, 8, 8],
            d_channels: vec![8, 8, 16],
            latent_dim: 16,
            ..NetworkConfig::default()
        };
        let b = ModelBundle::<f32>::new(cfg.clone(), scene(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = poses(&mut rng, 1);
        let two = Tensor::stack(&[y.clone().reshape(&[7]), y.clone().reshape(&[7])]);
        let out = b.g.generate(&two).unwrap();
        assert_eq!(out.shape(), &[2, 4, 32, 32]);
        assert_eq!(out.item(0), out.item(1));
        let again = ModelBundle::<f32>::new(cfg, scene(), 3).unwrap();
        assert_eq!(again.g.forward(&two).data(), out.data());
        assert!(b.g.generate(&Tensor::full(&[1, 7], f32::NAN)).is_err());
    }

    #[test]
    fn trunk_depth_and_latent() {
        let cfg = NetworkConfig {
            resolution: 64,
            g_channels: vec![8; 5],
            d_channels: vec![8, 8, 8, 32],
            latent_dim: 32,
            ..NetworkConfig::default()
        };
        let b = ModelBundle::<f32>::new(cfg, scene(), 0).unwrap();
        assert_eq!(b.d.blocks.len(), 4);
        let x = Tensor::full(&[2, 4, 64, 64], 0.3);
        let f = b.d.features(&x).unwrap();
        assert_eq!(f.shape(), &[2, 32]);
        assert_eq!(f.item(0), f.item(1));
        assert!(matches!(b.d.features(&Tensor::zeros(&[1, 4, 32, 32])), Err(Error::Config(_))));
    }

    #[test]
    fn heads_shapes() {
        let b = ModelBundle::<f32>::new(tiny_config(), scene(), 0).unwrap();
        let zero = Tensor::zeros(&[1, 16]);
        assert_eq!(b.m_d.forward(&zero).data(), &[0.0]);
        let e = b.m_p.as_ref().unwrap().forward(&Tensor::zeros(&[1, 7]));
        assert_eq!(e.shape(), &[1, 16]);
        let p = b.m_l.as_ref().unwrap().forward(&zero);
        assert_eq!(p.shape(), &[1, 7]);
    }

    #[test]
    fn projection_examples() {
        let f = [1.0, 0.0, 0.0];
        let e = [2.0, 0.0, 0.0];
        assert!((projection(0.5, &f, &e, 1.0, false) - 2.5).abs() < 1e-12);
        assert_eq!(projection(0.7, &[0.0; 3], &e, 1.0, false), 0.7);
        assert_eq!(projection(0.7, &[3.0, 1.0, 2.0], &e, 0.0, false), 0.7);
        assert!((projection(0.0, &f, &e, 1.0, true) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn cosine_projection_gradient() {
        let f = [0.3, -1.2, 0.5];
        let e = [1.1, 0.4, -0.7];
        let (df, de) = projection_grad(&f, &e, 0.8, true);
        let h = 1e-6;
        for i in 0..3 {
            let mut fp = f;
            fp[i] += h;
            let mut fm = f;
            fm[i] -= h;
            let num = (projection(0.0, &fp, &e, 0.8, true) - projection(0.0, &fm, &e, 0.8, true)) / (2.0 * h);
            assert!((num - df[i]).abs() < 1e-7);
            let mut ep = e;
            ep[i] += h;
            let mut em = e;
            em[i] -= h;
            let num = (projection(0.0, &f, &ep, 0.8, true) - projection(0.0, &f, &em, 0.8, true)) / (2.0 * h);
            assert!((num - de[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn enet_starts_as_identity_on_rgb() {
        let b = ModelBundle::<f32>::new(tiny_config(), scene(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[2, 4, 8, 8], (0..512).map(|_| rng.random_range(-0.99..0.99)).collect());
        let out = b.enet.as_ref().unwrap().forward(&x);
        assert_eq!(out.shape(), &[2, 3, 8, 8]);
        assert_eq!(out.data(), x.leading_channels(3).data());
    }

    #[test]
    fn ablations_change_structure() {
        let base = tiny_config();
        let full = ModelBundle::<f32>::new(base.clone(), scene(), 0).unwrap();
        let count = |a: Ablation| ModelBundle::<f32>::new(a.apply(&base), scene(), 0).unwrap();

        let nd = count(Ablation {
            no_depth: true,
            ..Ablation::default()
        });
        assert_eq!(nd.config.in_channels, 3);
        assert!(nd.param_count() < full.param_count());

        let na = count(Ablation {
            no_attention: true,
            ..Ablation::default()
        });
        assert!(na.component_param_count("d_trunk") < full.component_param_count("d_trunk"));
        assert!(na.d.blocks.iter().all(|b| b.attn.is_none()));

        let fc = count(Ablation {
            fewer_channels: true,
            ..Ablation::default()
        });
        assert_eq!(fc.config.g_schedule(), vec![64, 64]);

        let hd = count(Ablation {
            no_hd_match: true,
            ..Ablation::default()
        });
        assert!(hd.m_p.is_none() && hd.m_l.is_some());

        let ld = count(Ablation {
            no_ld_match: true,
            ..Ablation::default()
        });
        assert!(ld.m_l.is_none() && ld.m_p.is_some());

        let ne = count(Ablation {
            no_enet: true,
            ..Ablation::default()
        });
        assert!(ne.enet.is_none());
        assert_eq!(ne.component_param_count("enet"), 0);
    }

    #[test]
    fn cast_round_trip_preserves_forward() {
        let b = ModelBundle::<f32>::new(tiny_config(), scene(), 9).unwrap();
        let back: ModelBundle<f32> = b.cast::<f64>().cast();
        let y = poses(&mut ChaCha8Rng::seed_from_u64(4), 2);
        assert_eq!(b.g.forward(&y).data(), back.g.forward(&y).data());
    }
}
