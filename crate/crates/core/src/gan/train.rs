use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use capgan_tensor::{no_grad, AdamConfig, AdamState, Float, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{d_loss, g_loss, real_pyramid, Gan, GanConfig, Loss, NoiseMode, MODEL_KIND};
use crate::error::{io_err, Error, Result};
use crate::nn::{Module, NamedParams, NormStats};
use crate::persist::checkpoint::Checkpoint;
use crate::scene::{derive_seed, write_png_rect};

pub const METRICS_HEADER: &str = "step,scale,loss_d,loss_g,d_real_mean,d_fake_mean";
pub const CHECKPOINT_FILE: &str = "gan.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SAMPLES_DIR: &str = "samples";

const INIT_STREAM: u64 = 0x6761_6e2d_696e_6974;
const GRID_STREAM: u64 = 0x6761_6e2d_6772_6964;
const EPOCH_STREAM: u64 = 0x6761_6e2d_6570_6f63;

/// One minibatch: real pyramids, embeddings and noise.
pub struct GanBatch<T: Float> {
    /// `reals[i]` is `[N, 3, base·2^i, base·2^i]`.
    pub reals: Vec<Tensor<T>>,
    pub c: Option<Tensor<T>>,
    pub z: Tensor<T>,
}

impl<T: Float> GanBatch<T> {
    pub fn new(top: Tensor<T>, c: Option<Tensor<T>>, z: Tensor<T>, branches: usize) -> Result<Self> {
        Ok(GanBatch { reals: real_pyramid(&top, branches)?, c, z })
    }
}

pub struct GanOptim<T: Float> {
    pub generator: AdamState<T>,
    pub discriminators: Vec<AdamState<T>>,
}

impl<T: Float> GanOptim<T> {
    pub fn new(gan: &Gan<T>, lr: f64, beta1: f64) -> Result<Self> {
        let cfg = AdamConfig::new(lr, beta1);
        Ok(GanOptim {
            generator: AdamState::new(&gan.generator.params(), cfg)?,
            discriminators: gan
                .discriminators
                .iter()
                .map(|d| AdamState::new(&d.params(), cfg))
                .collect::<std::result::Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub loss_d: Vec<f64>,
    /// Generator loss contributed by each scale; these sum to `loss_g`.
    pub loss_g_scale: Vec<f64>,
    pub loss_g: f64,
    /// Batch means of the unconditional scores.
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

impl StepMetrics {
    pub fn all_finite(&self) -> bool {
        [&self.loss_d, &self.loss_g_scale, &self.d_real, &self.d_fake].iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.loss_g.is_finite()
    }
}

fn check<T: Float>(loss: &Loss<T>, scale: impl Fn(usize) -> usize) -> Result<()> {
    match loss.terms.iter().position(|(_, v)| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite { scale: scale(i), term: loss.terms[i].0 }),
        None => Ok(()),
    }
}

/// Losses and mean scores for the current parameters, without gradients.
pub fn evaluate_batch<T: Float>(gan: &Gan<T>, batch: &GanBatch<T>) -> Result<StepMetrics> {
    no_grad(|| {
        let c = batch.c.as_ref();
        let fakes = gan.generator.generate_with(&batch.z, c, NormStats::Batch)?;
        let mut m = StepMetrics { loss_d: vec![], loss_g_scale: vec![], loss_g: 0.0, d_real: vec![], d_fake: vec![] };
        for (i, d) in gan.discriminators.iter().enumerate() {
            m.loss_d.push(d_loss(d, &batch.reals[i], &fakes[i], c)?.value());
            let g = g_loss(std::slice::from_ref(d), std::slice::from_ref(&fakes[i]), c)?.value();
            m.loss_g_scale.push(g);
            m.loss_g += g;
            m.d_real.push(d.scores(&batch.reals[i], None)?.uncond.mean().item().as_f64());
            m.d_fake.push(d.scores(&fakes[i], None)?.uncond.mean().item().as_f64());
        }
        Ok(m)
    })
}

/// One discriminator update per scale on detached fakes, then one joint
/// generator update with every discriminator frozen.
pub fn train_step<T: Float>(gan: &Gan<T>, opt: &mut GanOptim<T>, batch: &GanBatch<T>) -> Result<StepMetrics> {
    let c = batch.c.as_ref();
    let fakes = gan.generator.generate_with(&batch.z, c, NormStats::Train)?;
    for (i, d) in gan.discriminators.iter().enumerate() {
        let loss = d_loss(d, &batch.reals[i], &fakes[i].detach(), c)?;
        check(&loss, |_| i)?;
        let params = d.params();
        d.zero_grad();
        loss.total.backward()?;
        opt.discriminators[i].step(&params)?;
    }

    for d in &gan.discriminators {
        d.set_trainable(false);
    }
    let result = (|| -> Result<()> {
        let loss = g_loss(&gan.discriminators, &fakes, c)?;
        let per_scale = if c.is_some() { 2 } else { 1 };
        check(&loss, |t| t / per_scale)?;
        gan.generator.zero_grad();
        loss.total.backward()?;
        opt.generator.step(&gan.generator.params())?;
        Ok(())
    })();
    for d in &gan.discriminators {
        d.set_trainable(true);
    }
    result?;
    evaluate_batch(gan, batch)
}

#[derive(Debug, Clone)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
    /// Side of the square sample montage written after every epoch.
    pub grid: usize,
}

/// Training images with, for conditional runs, the embeddings of every
/// caption of each image.
pub struct CaptionTable {
    pub ids: Vec<usize>,
    /// Planar `[3, R, R]` images at the top resolution.
    pub images: Vec<Vec<f32>>,
    /// `embeddings[i][j]` is caption `j` of image `i`.
    pub embeddings: Option<Vec<Vec<Vec<f32>>>>,
}

impl CaptionTable {
    pub fn new(ids: Vec<usize>, images: Vec<Vec<f32>>, embeddings: Option<Vec<Vec<Vec<f32>>>>) -> Result<Self> {
        if ids.len() != images.len() || embeddings.as_ref().is_some_and(|e| e.len() != ids.len()) {
            return Err(Error::Contract("ids, images and captions must align".into()));
        }
        if ids.is_empty() {
            return Err(Error::Config("GAN training set is empty".into()));
        }
        if let Some(e) = &embeddings {
            let missing: Vec<usize> =
                ids.iter().zip(e).filter(|(_, caps)| caps.is_empty()).map(|(&id, _)| id).collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "conditional training needs a caption for every image; {} have none: {missing:?}",
                    missing.len()
                )));
            }
        }
        Ok(CaptionTable { ids, images, embeddings })
    }

    fn batch(&self, idx: &[usize], picks: &[usize], z: Vec<f32>, cfg: &GanConfig) -> Result<GanBatch<f32>> {
        let r = cfg.top_resolution();
        let mut pixels = Vec::with_capacity(idx.len() * 3 * r * r);
        for &i in idx {
            if self.images[i].len() != 3 * r * r {
                return Err(Error::Config(format!(
                    "image {} has {} values, the GAN expects {r}x{r} RGB",
                    self.ids[i],
                    self.images[i].len()
                )));
            }
            pixels.extend_from_slice(&self.images[i]);
        }
        let top = Tensor::from_vec(&[idx.len(), 3, r, r], pixels)?;
        let c = match &self.embeddings {
            Some(e) => {
                let rows: Vec<f32> = idx.iter().zip(picks).flat_map(|(&i, &j)| e[i][j].iter().copied()).collect();
                Some(Tensor::from_vec(&[idx.len(), cfg.embed_dim], rows)?)
            }
            None => None,
        };
        GanBatch::new(top, c, Tensor::from_vec(&[idx.len(), cfg.z_dim], z)?, cfg.branches)
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Fresh model initialised from the run seed.
pub fn init_gan(cfg: GanConfig, seed: u64) -> Result<Gan<f32>> {
    Gan::new(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)))
}

/// Lays `[n, 3, r, r]` planar images out as a `rows x cols` planar montage.
pub fn montage(images: &[f32], r: usize, cols: usize) -> (Vec<f32>, usize, usize) {
    let n = images.len() / (3 * r * r);
    let rows = n.div_ceil(cols);
    let (h, w) = (rows * r, cols * r);
    let mut out = vec![-1.0; 3 * h * w];
    for k in 0..n {
        let (oy, ox) = ((k / cols) * r, (k % cols) * r);
        for ch in 0..3 {
            for y in 0..r {
                let src = ((k * 3 + ch) * r + y) * r;
                let dst = ch * h * w + (oy + y) * w + ox;
                out[dst..dst + r].copy_from_slice(&images[src..src + r]);
            }
        }
    }
    (out, h, w)
}

/// Draws `n` images per scale for the given noise and embeddings.
pub fn sample_images(gan: &Gan<f32>, z: &[f32], c: Option<&[f32]>, n: usize) -> Result<Vec<Vec<f32>>> {
    let cfg = gan.cfg;
    let mut out = vec![Vec::new(); cfg.branches];
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let zt = Tensor::from_vec(&[len, cfg.z_dim], z[start * cfg.z_dim..(start + len) * cfg.z_dim].to_vec())?;
        let ct = c
            .map(|c| {
                Tensor::from_vec(
                    &[len, cfg.embed_dim],
                    c[start * cfg.embed_dim..(start + len) * cfg.embed_dim].to_vec(),
                )
            })
            .transpose()?;
        let imgs = no_grad(|| gan.generator.generate(&zt, ct.as_ref()))?;
        for (o, t) in out.iter_mut().zip(imgs) {
            o.extend_from_slice(&t.data());
        }
    }
    Ok(out)
}

fn write_grids(gan: &Gan<f32>, data: &CaptionTable, tc: &GanTrainConfig, dir: &Path, epoch: usize) -> Result<()> {
    let cfg = gan.cfg;
    let n = tc.grid * tc.grid;
    if n == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, GRID_STREAM));
    let z = normal_vec(&mut rng, n * cfg.z_dim);
    let c: Option<Vec<f32>> =
        data.embeddings.as_ref().map(|e| (0..n).flat_map(|k| e[k % e.len()][0].iter().copied()).collect());
    for (i, imgs) in sample_images(gan, &z, c.as_deref(), n)?.iter().enumerate() {
        let (pix, h, w) = montage(imgs, cfg.resolution(i), tc.grid);
        write_png_rect(&dir.join(format!("epoch_{epoch:04}_scale{i}.png")), &pix, h, w)?;
    }
    Ok(())
}

fn gan_meta(cfg: &GanConfig) -> [(&'static str, usize); 5] {
    [
        ("branches", cfg.branches),
        ("base", cfg.base),
        ("z_dim", cfg.z_dim),
        ("embed_dim", cfg.embed_dim),
        ("noise_mode", (cfg.noise_mode == NoiseMode::EmbeddingOnly) as usize),
    ]
}

/// Parameters followed by the generator's normalisation statistics.
fn gan_state(gan: &Gan<f32>) -> NamedParams<f32> {
    let mut out = gan.named_params();
    out.extend(gan.named_buffers());
    out
}

fn names(module: &impl Module<f32>) -> Vec<String> {
    module.named_params().into_iter().map(|(n, _)| n).collect()
}

/// Parameters, shape metadata and, when given, optimizer state.
pub fn save_gan(gan: &Gan<f32>, opt: Option<&GanOptim<f32>>, epochs_done: usize, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_kind(MODEL_KIND);
    for (k, v) in gan_meta(&gan.cfg) {
        ck.set_meta(k, v);
    }
    ck.set_meta("epochs_done", epochs_done);
    ck.push_params(&gan_state(gan));
    if let Some(opt) = opt {
        ck.push_adam("g", &names(&gan.generator), &opt.generator);
        for (i, (d, s)) in gan.discriminators.iter().zip(&opt.discriminators).enumerate() {
            ck.push_adam(&format!("d{i}"), &names(d), s);
        }
    }
    ck.save(path)?;
    Ok(())
}

fn gan_from_checkpoint(ck: &Checkpoint) -> Result<Gan<f32>> {
    ck.expect_kind(MODEL_KIND)?;
    let noise_mode = if ck.meta("noise_mode")? == 1 { NoiseMode::EmbeddingOnly } else { NoiseMode::SeparateZ };
    let cfg = GanConfig {
        branches: ck.meta("branches")?,
        base: ck.meta("base")?,
        z_dim: ck.meta("z_dim")?,
        embed_dim: ck.meta("embed_dim")?,
        noise_mode,
    };
    let gan = init_gan(cfg, 0)?;
    ck.load_params(&gan_state(&gan))?;
    Ok(gan)
}

/// Loads a GAN checkpoint; returns the model and the number of completed epochs.
pub fn load_gan(path: &Path) -> Result<(Gan<f32>, usize)> {
    let ck = Checkpoint::load(path)?;
    let gan = gan_from_checkpoint(&ck)?;
    Ok((gan, ck.meta("epochs_done")?))
}

pub struct GanRun {
    pub gan: Gan<f32>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<StepMetrics>,
}

fn append_rows(w: &mut impl Write, step: usize, m: &StepMetrics) -> std::io::Result<()> {
    for i in 0..m.loss_d.len() {
        writeln!(w, "{step},{i},{},{},{},{}", m.loss_d[i], m.loss_g_scale[i], m.d_real[i], m.d_fake[i])?;
    }
    Ok(())
}

/// Trains for `tc.epochs` epochs, writing `metrics.csv`, `gan.ckpt` and
/// per-epoch sample grids under `out`. When `resume` is set and a checkpoint
/// exists in `out`, training continues after its last completed epoch.
pub fn train_gan(
    cfg: GanConfig,
    data: &CaptionTable,
    tc: &GanTrainConfig,
    out: &Path,
    resume: bool,
    log: &mut dyn FnMut(usize, &StepMetrics),
) -> Result<GanRun> {
    cfg.validate()?;
    if cfg.conditional() != data.embeddings.is_some() {
        return Err(Error::Config(format!(
            "a {} GAN cannot train on {} data",
            if cfg.conditional() { "conditional" } else { "unconditional" },
            if data.embeddings.is_some() { "captioned" } else { "uncaptioned" },
        )));
    }
    let samples = out.join(SAMPLES_DIR);
    std::fs::create_dir_all(&samples).map_err(io_err(&samples))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let bs = tc.batch_size.max(1);
    let steps_per_epoch = data.ids.len().div_ceil(bs);
    let (gan, mut opt, start) = if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        let gan = gan_from_checkpoint(&ck)?;
        if gan.cfg != cfg {
            return Err(Error::Config("checkpoint in the output directory has a different GAN shape".into()));
        }
        let mut opt = GanOptim::new(&gan, tc.lr, tc.beta1)?;
        ck.load_adam("g", &names(&gan.generator), &mut opt.generator)?;
        for (i, (d, s)) in gan.discriminators.iter().zip(opt.discriminators.iter_mut()).enumerate() {
            ck.load_adam(&format!("d{i}"), &names(d), s)?;
        }
        (gan, opt, ck.meta("epochs_done")?)
    } else {
        let gan = init_gan(cfg, tc.seed)?;
        let opt = GanOptim::new(&gan, tc.lr, tc.beta1)?;
        (gan, opt, 0)
    };

    let file = if start > 0 {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path).and_then(|mut f| writeln!(f, "{METRICS_HEADER}").map(|_| f))
    }
    .map_err(io_err(&metrics_path))?;
    let mut csv = BufWriter::new(file);

    let mut last = None;
    let mut order: Vec<usize> = (0..data.ids.len()).collect();
    for epoch in start..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(tc.seed, EPOCH_STREAM), epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let picks: Vec<usize> = match &data.embeddings {
            Some(e) => (0..data.ids.len()).map(|i| rng.random_range(0..e[i].len())).collect(),
            None => vec![0; data.ids.len()],
        };
        for (b, idx) in order.chunks(bs).enumerate() {
            let z = normal_vec(&mut rng, idx.len() * cfg.z_dim);
            let p: Vec<usize> = idx.iter().map(|&i| picks[i]).collect();
            let batch = data.batch(idx, &p, z, &cfg)?;
            let m = train_step(&gan, &mut opt, &batch)?;
            let step = epoch * steps_per_epoch + b;
            append_rows(&mut csv, step, &m).map_err(io_err(&metrics_path))?;
            log(step, &m);
            last = Some(m);
        }
        csv.flush().map_err(io_err(&metrics_path))?;
        write_grids(&gan, data, tc, &samples, epoch)?;
        save_gan(&gan, Some(&opt), epoch + 1, &ckpt_path)?;
    }
    if start >= tc.epochs && !ckpt_path.exists() {
        save_gan(&gan, Some(&opt), start, &ckpt_path)?;
    }
    Ok(GanRun { gan, checkpoint: ckpt_path, metrics: metrics_path, last })
}
