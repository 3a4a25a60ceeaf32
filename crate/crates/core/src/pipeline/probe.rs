//! Attribute probe: a small convolutional classifier trained on rendered
//! scenes and used to read attributes back out of generated images.

use std::path::Path;

use capgan_tensor::{no_grad, AdamConfig, AdamState, Float, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::parse::{ATTRIBUTES, CLASSES};
use crate::captioner::stack_images;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Module, NamedParams};
use crate::persist::checkpoint::Checkpoint;
use crate::scene::{derive_seed, render_pixels, sample_scene, SceneSpec};

pub const MODEL_KIND: &str = "probe";
pub const REQUIRED_ACCURACY: f64 = 0.99;
/// Attributes the quality gate is applied to.
pub const GATED: [usize; 2] = [0, 2];
const TOTAL_CLASSES: usize = 17;
const SCENE_STREAM: u64 = 0x7072_6f62_6573_636e;
const TRAIN_STREAM: u64 = 0x7072_6f62_6574_726e;
/// Pixel noise added to training images so the probe tolerates imperfect
/// generator output.
const AUGMENT_STD: f32 = 0.1;

pub struct Probe<T: Float> {
    pub resolution: usize,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub head: Linear<T>,
}

impl<T: Float> Probe<T> {
    pub fn new<R: Rng + ?Sized>(resolution: usize, rng: &mut R) -> Result<Self> {
        if resolution < 16 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!("probe resolution must be a power of two >= 16, got {resolution}")));
        }
        Ok(Probe {
            resolution,
            conv1: Conv2d::new(3, 8, 4, 2, 1, rng),
            conv2: Conv2d::new(8, 16, 4, 2, 1, rng),
            head: Linear::new(16 * 4 * 4, TOTAL_CLASSES, rng),
        })
    }

    /// Concatenated per-attribute logits, `[N, 17]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut h = self.conv2.forward(&self.conv1.forward(images)?.relu())?.relu();
        while h.shape()[2] > 4 {
            h = h.avg_pool2x()?;
        }
        Ok(self.head.forward(&h.reshape(&[n, 16 * 4 * 4])?)?)
    }

    /// Sum over attributes of the mean cross-entropy.
    pub fn loss(&self, images: &Tensor<T>, labels: &[[usize; 5]]) -> Result<Tensor<T>> {
        let logits = self.logits(images)?;
        let mut offset = 0;
        let mut total: Option<Tensor<T>> = None;
        for (a, &k) in CLASSES.iter().enumerate() {
            let targets: Vec<usize> = labels.iter().map(|l| l[a]).collect();
            let l = logits.narrow(1, offset, k)?.softmax_cross_entropy(&targets)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
            offset += k;
        }
        Ok(total.expect("five attributes"))
    }

    /// Predicted class per attribute for each image.
    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<[usize; 5]>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let logits = no_grad(|| self.logits(&stack_images(chunk, self.resolution)?))?;
            for row in logits.to_f64_vec().chunks(TOTAL_CLASSES) {
                let mut pred = [0; 5];
                let mut offset = 0;
                for (a, &k) in CLASSES.iter().enumerate() {
                    pred[a] = crate::captioner::argmax(&row[offset..offset + k]);
                    offset += k;
                }
                out.push(pred);
            }
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for Probe<T> {
    fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.conv1.collect("probe.conv1", &mut out);
        self.conv2.collect("probe.conv2", &mut out);
        self.head.collect("probe.head", &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: [f64; 5],
    pub n: usize,
}

impl ProbeReport {
    /// Fails unless every gated attribute reaches [`REQUIRED_ACCURACY`].
    pub fn gate(&self) -> Result<()> {
        for a in GATED {
            if self.accuracy[a] < REQUIRED_ACCURACY {
                return Err(Error::ProbeQuality {
                    attribute: ATTRIBUTES[a],
                    accuracy: self.accuracy[a],
                    required: REQUIRED_ACCURACY,
                });
            }
        }
        Ok(())
    }
}

pub fn probe_accuracy(probe: &Probe<f32>, images: &[Vec<f32>], labels: &[[usize; 5]]) -> Result<ProbeReport> {
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let preds = probe.predict(&refs)?;
    let mut hits = [0usize; 5];
    for (p, l) in preds.iter().zip(labels) {
        for a in 0..5 {
            hits[a] += (p[a] == l[a]) as usize;
        }
    }
    let n = labels.len().max(1) as f64;
    Ok(ProbeReport { accuracy: hits.map(|h| h as f64 / n), n: labels.len() })
}

#[derive(Debug, Clone)]
pub struct ProbeTrainConfig {
    pub resolution: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// `n` freshly sampled scenes rendered at `resolution`, with their labels.
pub fn probe_scenes(n: usize, resolution: usize, seed: u64) -> Result<(Vec<SceneSpec>, Vec<Vec<f32>>)> {
    let mut state = seed;
    let mut specs = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let (spec, next) = sample_scene(state);
        state = next;
        images.push(render_pixels(&spec, resolution)?);
        specs.push(spec);
    }
    Ok((specs, images))
}

/// Trains a probe on rendered scenes and checks it on held-out ones.
/// Fails with a probe-quality error when the gate is not met.
pub fn train_probe(pc: &ProbeTrainConfig) -> Result<(Probe<f32>, ProbeReport)> {
    let scene_seed = derive_seed(pc.seed, SCENE_STREAM);
    let (specs, images) = probe_scenes(pc.train_n + pc.test_n, pc.resolution, scene_seed)?;
    let labels: Vec<[usize; 5]> = specs.iter().map(SceneSpec::labels).collect();
    let (train_x, test_x) = images.split_at(pc.train_n);
    let (train_y, test_y) = labels.split_at(pc.train_n);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pc.seed, TRAIN_STREAM));
    let probe = Probe::new(pc.resolution, &mut rng)?;
    let params = probe.params();
    let mut adam = AdamState::new(&params, AdamConfig::new(pc.lr, 0.9))?;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for _ in 0..pc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(pc.batch_size.max(1)) {
            let mut pixels = Vec::with_capacity(chunk.len() * train_x[0].len());
            for &i in chunk {
                pixels.extend(train_x[i].iter().map(|&v| v + AUGMENT_STD * rng.sample::<f32, _>(StandardNormal)));
            }
            let r = pc.resolution;
            let x = Tensor::from_vec(&[chunk.len(), 3, r, r], pixels)?;
            let y: Vec<[usize; 5]> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = probe.loss(&x, &y)?;
            probe.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
        }
    }
    let report = probe_accuracy(&probe, test_x, test_y)?;
    report.gate()?;
    Ok((probe, report))
}

pub fn save_probe(probe: &Probe<f32>, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_kind(MODEL_KIND);
    ck.set_meta("resolution", probe.resolution);
    ck.push_params(&probe.named_params());
    Ok(ck.save(path)?)
}

pub fn load_probe(path: &Path) -> Result<Probe<f32>> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(MODEL_KIND)?;
    let probe = Probe::new(ck.meta("resolution")?, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_params(&probe.named_params())?;
    Ok(probe)
}
