//! Tree-structured multi-scale conditional GAN.
//!
//! One generator trunk produces a 4x4 seed that is upsampled to the base
//! scale; each branch doubles the resolution and owns a `tanh` image head.
//! Every scale has its own discriminator with an unconditional head and a
//! conditional head that also sees the sentence embedding.

mod train;

pub use train::{
    evaluate_batch, init_gan, load_gan, montage, sample_images, save_gan, train_gan, train_step, CaptionTable,
    GanBatch, GanOptim, GanRun, GanTrainConfig, StepMetrics, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER,
    SAMPLES_DIR,
};

use capgan_tensor::{Float, Tensor, TensorError};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, Module, NamedParams, NormStats};

pub const MODEL_KIND: &str = "gan";
pub const SEED_SIZE: usize = 4;
pub const TRUNK_CHANNELS: usize = 32;
pub const D_CHANNEL_CAP: usize = 64;
pub const LEAK: f64 = 0.2;
pub const PROB_FLOOR: f64 = 1e-7;
pub const STDDEV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Generator input is `[z ‖ c]`.
    SeparateZ,
    /// Generator input is `c` alone; the embedding doubles as the noise.
    EmbeddingOnly,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "separate_z" => Ok(NoiseMode::SeparateZ),
            "embedding_only" => Ok(NoiseMode::EmbeddingOnly),
            other => Err(Error::Config(format!("unknown noise_mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanConfig {
    pub branches: usize,
    pub base: usize,
    pub z_dim: usize,
    /// Width of `c`; zero for an unconditional GAN.
    pub embed_dim: usize,
    pub noise_mode: NoiseMode,
}

impl GanConfig {
    pub fn conditional(&self) -> bool {
        self.embed_dim > 0
    }

    pub fn resolution(&self, scale: usize) -> usize {
        self.base << scale
    }

    pub fn top_resolution(&self) -> usize {
        self.resolution(self.branches - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::Config("the generator needs at least one branch".into()));
        }
        if self.base < 8 || !self.base.is_power_of_two() {
            return Err(Error::Config(format!("base resolution must be a power of two >= 8, got {}", self.base)));
        }
        if self.noise_mode == NoiseMode::EmbeddingOnly && !self.conditional() {
            return Err(Error::Config("embedding_only noise needs a conditional GAN".into()));
        }
        if self.noise_mode == NoiseMode::SeparateZ && self.z_dim == 0 {
            return Err(Error::Config("z_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.noise_mode {
            NoiseMode::SeparateZ => self.z_dim + self.embed_dim,
            NoiseMode::EmbeddingOnly => self.embed_dim,
        }
    }

    pub fn branch_channels(&self, scale: usize) -> usize {
        (TRUNK_CHANNELS >> scale).max(4)
    }
}

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Tensor(TensorError::Shape { op, detail })
}

pub struct Generator<T: Float> {
    pub cfg: GanConfig,
    pub input: Linear<T>,
    pub input_norm: BatchNorm<T>,
    pub trunk: Vec<Conv2d<T>>,
    pub trunk_norms: Vec<BatchNorm<T>>,
    pub branches: Vec<Conv2d<T>>,
    pub branch_norms: Vec<BatchNorm<T>>,
    pub heads: Vec<Conv2d<T>>,
}

impl<T: Float> Generator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: GanConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c0 = TRUNK_CHANNELS;
        let ups = (cfg.base / SEED_SIZE).trailing_zeros() as usize;
        let trunk = (0..ups).map(|_| Conv2d::new(c0, c0, 3, 1, 1, rng)).collect();
        let branches = (1..cfg.branches)
            .map(|i| Conv2d::new(cfg.branch_channels(i - 1), cfg.branch_channels(i), 3, 1, 1, rng))
            .collect();
        let heads = (0..cfg.branches).map(|i| Conv2d::new(cfg.branch_channels(i), 3, 3, 1, 1, rng)).collect();
        Ok(Generator {
            cfg,
            input: Linear::new(cfg.input_dim(), c0 * SEED_SIZE * SEED_SIZE, rng),
            input_norm: BatchNorm::new(c0),
            trunk,
            trunk_norms: (0..ups).map(|_| BatchNorm::new(c0)).collect(),
            branches,
            branch_norms: (1..cfg.branches).map(|i| BatchNorm::new(cfg.branch_channels(i))).collect(),
            heads,
        })
    }

    /// Images `s_0 .. s_{m-1}` for `z[N, Z]` and `c[N, E]`, normalised with
    /// the running statistics.
    pub fn generate(&self, z: &Tensor<T>, c: Option<&Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        self.generate_with(z, c, NormStats::Running)
    }

    pub fn generate_with(&self, z: &Tensor<T>, c: Option<&Tensor<T>>, stats: NormStats) -> Result<Vec<Tensor<T>>> {
        let cfg = &self.cfg;
        let mut parts = Vec::new();
        if cfg.noise_mode == NoiseMode::SeparateZ {
            if z.ndim() != 2 || z.shape()[1] != cfg.z_dim {
                return Err(dim_err("generate", format!("z must be [N, {}], got {:?}", cfg.z_dim, z.shape())));
            }
            parts.push(z.clone());
        }
        match (cfg.conditional(), c) {
            (true, Some(c)) => {
                if c.ndim() != 2 || c.shape()[1] != cfg.embed_dim {
                    return Err(dim_err("generate", format!("c must be [N, {}], got {:?}", cfg.embed_dim, c.shape())));
                }
                if cfg.noise_mode == NoiseMode::SeparateZ && c.shape()[0] != z.shape()[0] {
                    return Err(dim_err("generate", "z and c disagree on batch size (axis 0)".into()));
                }
                parts.push(c.clone());
            }
            (true, None) => return Err(Error::Contract("conditional generator needs an embedding".into())),
            (false, Some(_)) => return Err(Error::Contract("unconditional generator got an embedding".into())),
            (false, None) => {}
        }
        let n = parts[0].shape()[0];
        let input = if parts.len() == 1 { parts.pop().expect("one part") } else { Tensor::concat(&parts, 1)? };
        let seed = self.input.forward(&input)?.reshape(&[n, TRUNK_CHANNELS, SEED_SIZE, SEED_SIZE])?;
        let mut h = self.input_norm.forward(&seed, stats)?.relu();
        for (conv, norm) in self.trunk.iter().zip(&self.trunk_norms) {
            h = norm.forward(&conv.forward(&h.upsample2x()?)?, stats)?.relu();
        }
        let mut out = Vec::with_capacity(cfg.branches);
        for i in 0..cfg.branches {
            if i > 0 {
                let up = self.branches[i - 1].forward(&h.upsample2x()?)?;
                h = self.branch_norms[i - 1].forward(&up, stats)?.relu();
            }
            out.push(self.heads[i].forward(&h)?.tanh());
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.input.collect("g.input", &mut out);
        self.input_norm.collect("g.input_norm", &mut out);
        for (i, (c, b)) in self.trunk.iter().zip(&self.trunk_norms).enumerate() {
            c.collect(&format!("g.trunk{i}"), &mut out);
            b.collect(&format!("g.trunk{i}_norm"), &mut out);
        }
        for (i, (c, b)) in self.branches.iter().zip(&self.branch_norms).enumerate() {
            c.collect(&format!("g.branch{}", i + 1), &mut out);
            b.collect(&format!("g.branch{}_norm", i + 1), &mut out);
        }
        for (i, c) in self.heads.iter().enumerate() {
            c.collect(&format!("g.head{i}"), &mut out);
        }
        out
    }

    fn named_buffers(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.input_norm.collect_buffers("g.input_norm", &mut out);
        for (i, b) in self.trunk_norms.iter().enumerate() {
            b.collect_buffers(&format!("g.trunk{i}_norm"), &mut out);
        }
        for (i, b) in self.branch_norms.iter().enumerate() {
            b.collect_buffers(&format!("g.branch{}_norm", i + 1), &mut out);
        }
        out
    }
}

/// Clamped probabilities from one discriminator.
pub struct Scores<T: Float> {
    /// `D(x)`, shape `[N]`.
    pub uncond: Tensor<T>,
    /// `D(x, c)`, shape `[N]`.
    pub cond: Option<Tensor<T>>,
}

pub struct Discriminator<T: Float> {
    pub resolution: usize,
    pub embed_dim: usize,
    pub convs: Vec<Conv2d<T>>,
    pub uncond_head: Conv2d<T>,
    pub joint: Option<Conv2d<T>>,
    pub cond_head: Option<Conv2d<T>>,
    pub scale: usize,
}

impl<T: Float> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(scale: usize, resolution: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let (mut cin, mut cout, mut size) = (3, 8, resolution);
        while size > SEED_SIZE {
            convs.push(Conv2d::new(cin, cout, 4, 2, 1, rng));
            cin = cout;
            cout = (cout * 2).min(D_CHANNEL_CAP);
            size /= 2;
        }
        let conditional = embed_dim > 0;
        Discriminator {
            resolution,
            embed_dim,
            convs,
            uncond_head: Conv2d::new(cin + 1, 1, SEED_SIZE, 1, 0, rng),
            joint: conditional.then(|| Conv2d::new(cin + 1 + embed_dim, cin, 1, 1, 0, rng)),
            cond_head: conditional.then(|| Conv2d::new(cin, 1, SEED_SIZE, 1, 0, rng)),
            scale,
        }
    }

    fn prob(logits: Tensor<T>, n: usize) -> Result<Tensor<T>> {
        Ok(logits.reshape(&[n])?.sigmoid().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    /// `D(x)` and, when `c` is given, `D(x, c)`.
    pub fn scores(&self, x: &Tensor<T>, c: Option<&Tensor<T>>) -> Result<Scores<T>> {
        let r = self.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(dim_err("discriminator", format!("expected [N, 3, {r}, {r}], got {s:?}")));
        }
        let n = s[0];
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.leaky_relu(LEAK);
        }
        // a collapsed generator shows up as a near-zero spread across the batch
        let h = Tensor::concat(&[h.clone(), h.minibatch_stddev(STDDEV_EPS)?], 1)?;
        let uncond = Self::prob(self.uncond_head.forward(&h)?, n)?;
        let cond = match (c, &self.joint, &self.cond_head) {
            (Some(c), Some(joint), Some(head)) => {
                if c.shape() != [n, self.embed_dim] {
                    return Err(dim_err(
                        "discriminator",
                        format!("c must be [{n}, {}], got {:?}", self.embed_dim, c.shape()),
                    ));
                }
                let tiled = c.broadcast_spatial(SEED_SIZE, SEED_SIZE)?;
                let j = joint.forward(&Tensor::concat(&[h, tiled], 1)?)?.leaky_relu(LEAK);
                Some(Self::prob(head.forward(&j)?, n)?)
            }
            (None, _, _) => None,
            _ => return Err(Error::Contract("unconditional discriminator got an embedding".into())),
        };
        Ok(Scores { uncond, cond })
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn named_params(&self) -> NamedParams<T> {
        let p = format!("d{}", self.scale);
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{p}.conv{i}"), &mut out);
        }
        self.uncond_head.collect(&format!("{p}.uncond_head"), &mut out);
        if let (Some(j), Some(h)) = (&self.joint, &self.cond_head) {
            j.collect(&format!("{p}.joint"), &mut out);
            h.collect(&format!("{p}.cond_head"), &mut out);
        }
        out
    }
}

pub struct Gan<T: Float> {
    pub cfg: GanConfig,
    pub generator: Generator<T>,
    pub discriminators: Vec<Discriminator<T>>,
}

impl<T: Float> Gan<T> {
    pub fn new<R: Rng + ?Sized>(cfg: GanConfig, rng: &mut R) -> Result<Self> {
        let generator = Generator::new(cfg, rng)?;
        let discriminators =
            (0..cfg.branches).map(|i| Discriminator::new(i, cfg.resolution(i), cfg.embed_dim, rng)).collect();
        Ok(Gan { cfg, generator, discriminators })
    }
}

impl<T: Float> Module<T> for Gan<T> {
    fn named_params(&self) -> NamedParams<T> {
        let mut out = self.generator.named_params();
        for d in &self.discriminators {
            out.extend(d.named_params());
        }
        out
    }

    fn named_buffers(&self) -> NamedParams<T> {
        self.generator.named_buffers()
    }
}

/// Named loss terms with their values, for diagnostics.
pub struct Loss<T: Float> {
    pub total: Tensor<T>,
    pub terms: Vec<(&'static str, f64)>,
}

impl<T: Float> Loss<T> {
    fn from_terms(terms: Vec<(&'static str, Tensor<T>)>) -> Result<Self> {
        let mut total = terms[0].1.clone();
        for (_, t) in &terms[1..] {
            total = total.add(t)?;
        }
        let terms = terms.into_iter().map(|(n, t)| (n, t.item().as_f64())).collect();
        Ok(Loss { total, terms })
    }

    pub fn value(&self) -> f64 {
        self.total.item().as_f64()
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// A NaN caught inside the discriminator is reported against the loss term
/// whose scores were being computed.
fn name_non_finite(e: Error, scale: usize, term: &'static str) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFinite { scale, term },
        other => other,
    }
}

fn neg_mean_ln<T: Float>(p: &Tensor<T>) -> Tensor<T> {
    p.ln().mean().neg()
}

/// Discriminator loss at one scale:
/// `-E[ln D(x)] - E[ln(1 - D(s))] - E[ln D(x,c)] - E[ln(1 - D(s,c))]`,
/// the last two terms only when `c` is given. `fakes` should be detached.
pub fn d_loss<T: Float>(
    d: &Discriminator<T>,
    reals: &Tensor<T>,
    fakes: &Tensor<T>,
    c: Option<&Tensor<T>>,
) -> Result<Loss<T>> {
    if reals.shape().first() != fakes.shape().first() {
        return Err(Error::Contract(format!(
            "real batch {:?} and fake batch {:?} differ in size",
            reals.shape(),
            fakes.shape()
        )));
    }
    let real = d.scores(reals, c).map_err(|e| name_non_finite(e, d.scale, "real"))?;
    let fake = d.scores(fakes, c).map_err(|e| name_non_finite(e, d.scale, "fake"))?;
    let mut terms = vec![("real", neg_mean_ln(&real.uncond)), ("fake", neg_mean_ln(&fake.uncond.one_minus()))];
    if let (Some(rc), Some(fc)) = (real.cond, fake.cond) {
        terms.push(("real_cond", neg_mean_ln(&rc)));
        terms.push(("fake_cond", neg_mean_ln(&fc.one_minus())));
    }
    Loss::from_terms(terms)
}

/// Generator loss summed over scales: `sum_i -E[ln D_i(s_i)] - E[ln D_i(s_i, c)]`.
pub fn g_loss<T: Float>(ds: &[Discriminator<T>], fakes: &[Tensor<T>], c: Option<&Tensor<T>>) -> Result<Loss<T>> {
    if ds.len() != fakes.len() || ds.is_empty() {
        return Err(Error::Contract(format!("{} discriminators for {} scales", ds.len(), fakes.len())));
    }
    let mut terms = Vec::new();
    for (d, s) in ds.iter().zip(fakes) {
        let sc = d.scores(s, c).map_err(|e| name_non_finite(e, d.scale, "fake"))?;
        terms.push(("fake", neg_mean_ln(&sc.uncond)));
        if let Some(cond) = sc.cond {
            terms.push(("fake_cond", neg_mean_ln(&cond)));
        }
    }
    Loss::from_terms(terms)
}

/// Real image pyramid: level `m-1` is the stored image, each lower level
/// the 2x2 average of the one above.
pub fn real_pyramid<T: Float>(top: &Tensor<T>, branches: usize) -> Result<Vec<Tensor<T>>> {
    let mut levels = vec![top.clone()];
    for _ in 1..branches {
        let next = levels.last().expect("non-empty").avg_pool2x()?;
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}
