//! Image captioner: a strided conv encoder and an LSTM decoder that sees the
//! image only once, as its first input. Trained by teacher forcing, then by
//! self-critical policy gradient with CIDEr-D as the reward.

mod train;

pub use train::{
    evaluate_cider, load_captioner, restore, save_captioner, snapshot, train_captioner, CapExample, CaptionerHistory,
    CaptionerTrainConfig, EpochLog, Phase, TrainedCaptioner, CHECKPOINT_FILE, VOCAB_FILE,
};

use capgan_tensor::{log_softmax, no_grad, Float, Tensor, TensorError};
use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{cider_d, CorpusIdf};
use crate::nn::{Conv2d, Embedding, Linear, LstmCell, Module, NamedParams};
use crate::text::{SentenceEncoder, BOS, EOS, PAD};

pub const MODEL_KIND: &str = "captioner";
pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub resolution: usize,
    pub max_len: usize,
}

impl CaptionerConfig {
    pub const META_KEYS: [&'static str; 7] =
        ["vocab_size", "word_dim", "feature_dim", "embed_dim", "hidden", "resolution", "max_len"];

    pub fn values(&self) -> [usize; 7] {
        [self.vocab_size, self.word_dim, self.feature_dim, self.embed_dim, self.hidden, self.resolution, self.max_len]
    }

    pub fn from_values(v: [usize; 7]) -> Self {
        CaptionerConfig {
            vocab_size: v[0],
            word_dim: v[1],
            feature_dim: v[2],
            embed_dim: v[3],
            hidden: v[4],
            resolution: v[5],
            max_len: v[6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "captioner resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        if self.feature_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "the sentence encoder is aligned to image features, so embed_dim ({}) must equal feature_dim ({})",
                self.embed_dim, self.feature_dim
            )));
        }
        if self.vocab_size <= EOS || self.max_len == 0 {
            return Err(Error::Config("vocabulary must hold the reserved tokens and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// One decoded caption.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Caption tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Model log-probability of each token, at temperature 1.
    pub logprobs: Vec<f64>,
    /// Log-probability of the closing EOS when one was emitted.
    pub end_logprob: Option<f64>,
    pub terminated: bool,
}

impl DecodeResult {
    /// Sum of the log-probabilities of every action taken, EOS included.
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum::<f64>() + self.end_logprob.unwrap_or(0.0)
    }
}

pub struct LstmState<T: Float> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

pub struct Captioner<T: Float> {
    pub cfg: CaptionerConfig,
    pub convs: Vec<Conv2d<T>>,
    pub feature: Linear<T>,
    pub image_input: Linear<T>,
    pub words: Embedding<T>,
    pub lstm: LstmCell<T>,
    pub output: Linear<T>,
    pub sentence: SentenceEncoder<T>,
}

impl<T: Float> Module<T> for Captioner<T> {
    fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("encoder.conv{i}"), &mut out);
        }
        self.feature.collect("encoder.feature", &mut out);
        self.image_input.collect("decoder.image_input", &mut out);
        self.words.collect("words", &mut out);
        self.lstm.collect("decoder.lstm", &mut out);
        self.output.collect("decoder.output", &mut out);
        self.sentence.collect("sentence", &mut out);
        out
    }
}

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Tensor(TensorError::Shape { op, detail })
}

impl<T: Float> Captioner<T> {
    pub fn new<R: Rng + ?Sized>(cfg: CaptionerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in &ENCODER_CHANNELS {
            convs.push(Conv2d::new(cin, cout, 4, 2, 1, rng));
            cin = cout;
        }
        Ok(Captioner {
            cfg,
            convs,
            feature: Linear::new(cin, cfg.feature_dim, rng),
            image_input: Linear::new(cfg.feature_dim, cfg.word_dim, rng),
            words: Embedding::new(cfg.vocab_size, cfg.word_dim, rng),
            lstm: LstmCell::new(cfg.word_dim, cfg.hidden, rng),
            output: Linear::new(cfg.hidden, cfg.vocab_size, rng),
            sentence: SentenceEncoder::new(cfg.word_dim, cfg.embed_dim, rng),
        })
    }

    /// `[N, 3, R, R]` images to `[N, F]` features.
    pub fn encode_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        let r = self.cfg.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(dim_err(
                "encode_image",
                format!("expected [N, 3, {r}, {r}] (axes 1-3 channel, height, width), got {s:?}"),
            ));
        }
        let mut x = images.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu();
        }
        Ok(self.feature.forward(&x.mean_spatial()?)?)
    }

    /// One `[3, R, R]` image to a `[F]` feature.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(dim_err("encode_image", format!("expected [3, R, R], got {s:?}")));
        }
        let batch = image.reshape(&[1, s[0], s[1], s[2]])?;
        Ok(self.encode_images(&batch)?.reshape(&[self.cfg.feature_dim])?)
    }

    /// Decoder state after consuming the image features.
    pub fn start(&self, features: &Tensor<T>) -> Result<LstmState<T>> {
        let n = features.shape()[0];
        let (h, c) = self.lstm.zero_state(n);
        let x = self.image_input.forward(features)?;
        let (h, c) = self.lstm.forward(&x, &h, &c)?;
        Ok(LstmState { h, c })
    }

    /// Feeds one token per row; returns `[N, V]` logits for the next token.
    pub fn step(&self, ids: &[usize], state: &LstmState<T>) -> Result<(Tensor<T>, LstmState<T>)> {
        let x = self.words.forward(ids)?;
        let (h, c) = self.lstm.forward(&x, &state.h, &state.c)?;
        let logits = self.output.forward(&h)?;
        Ok((logits, LstmState { h, c }))
    }

    fn decode_with<F>(&self, features: &Tensor<T>, max_len: usize, mut pick: F) -> Result<Vec<DecodeResult>>
    where
        F: FnMut(usize, &[f64]) -> usize,
    {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let features = features.detach();
        no_grad(|| {
            let n = features.shape()[0];
            let v = self.cfg.vocab_size;
            let mut out: Vec<DecodeResult> = (0..n)
                .map(|_| DecodeResult {
                    tokens: Vec::new(),
                    logprobs: Vec::new(),
                    end_logprob: None,
                    terminated: false,
                })
                .collect();
            let mut done = vec![false; n];
            let mut state = self.start(&features)?;
            let mut prev = vec![BOS; n];
            for t in 0..=max_len {
                let (logits, next) = self.step(&prev, &state)?;
                state = next;
                let data = logits.to_f64_vec();
                for b in 0..n {
                    if done[b] {
                        prev[b] = PAD;
                        continue;
                    }
                    let row = &data[b * v..(b + 1) * v];
                    let tok = pick(b, row);
                    let lp = log_softmax(row)[tok];
                    if tok == EOS {
                        out[b].end_logprob = Some(lp);
                        out[b].terminated = true;
                        done[b] = true;
                    } else if t == max_len {
                        done[b] = true;
                    } else {
                        out[b].tokens.push(tok);
                        out[b].logprobs.push(lp);
                    }
                    prev[b] = if done[b] { PAD } else { tok };
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            Ok(out)
        })
    }

    /// Argmax decoding, ties to the lowest id.
    pub fn decode_greedy(&self, features: &Tensor<T>, max_len: usize) -> Result<Vec<DecodeResult>> {
        self.decode_with(features, max_len, |_, row| argmax(row))
    }

    /// Samples from `softmax(logits / temperature)`; recorded log-probs are
    /// at temperature 1.
    pub fn decode_sample<R: Rng + ?Sized>(
        &self,
        features: &Tensor<T>,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<DecodeResult>> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        self.decode_with(features, max_len, |_, row| sample_row(row, temperature, rng))
    }

    /// `sum_b weights[b] * -sum_t log p(seq_b[t] | prefix)` under teacher
    /// forcing. The EOS step is scored for sequences with `closes[b]` set.
    pub fn sequence_nll(
        &self,
        features: &Tensor<T>,
        seqs: &[Vec<usize>],
        closes: &[bool],
        weights: &[T],
    ) -> Result<Tensor<T>> {
        let n = seqs.len();
        if features.shape()[0] != n || closes.len() != n || weights.len() != n {
            return Err(Error::Contract(format!(
                "{} features, {n} sequences, {} close flags and {} weights must agree",
                features.shape()[0],
                closes.len(),
                weights.len()
            )));
        }
        let steps = seqs.iter().zip(closes).map(|(s, &c)| s.len() + c as usize).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::Contract("nothing to score: every sequence is empty and unterminated".into()));
        }
        let mut state = self.start(features)?;
        let mut prev = vec![BOS; n];
        let mut logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * n);
        let mut w = Vec::with_capacity(steps * n);
        for t in 0..steps {
            let (l, next) = self.step(&prev, &state)?;
            state = next;
            logits.push(l);
            for b in 0..n {
                let (tok, live) = match seqs[b].get(t) {
                    Some(&tok) => (tok, true),
                    None => (EOS, t == seqs[b].len() && closes[b]),
                };
                targets.push(if live { tok } else { PAD });
                w.push(if live { weights[b] } else { T::zero() });
                prev[b] = if live { tok } else { PAD };
            }
        }
        let all = Tensor::concat(&logits, 0)?;
        Ok(all.weighted_nll(&targets, &w)?)
    }

    /// Mean teacher-forced negative log-likelihood per predicted token,
    /// EOS included.
    pub fn xe_loss_from_features(&self, features: &Tensor<T>, refs: &[Vec<usize>]) -> Result<Tensor<T>> {
        if let Some(i) = refs.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("reference {i} is empty")));
        }
        let tokens: usize = refs.iter().map(|r| r.len() + 1).sum();
        let w = vec![T::one() / T::from_f64(tokens as f64); refs.len()];
        self.sequence_nll(features, refs, &vec![true; refs.len()], &w)
    }

    pub fn xe_loss(&self, images: &Tensor<T>, refs: &[Vec<usize>]) -> Result<Tensor<T>> {
        let f = self.encode_images(images)?;
        self.xe_loss_from_features(&f, refs)
    }

    /// Pulls sentence embeddings of the references towards `tanh` of the
    /// (detached) features of their images.
    pub fn alignment_loss(&self, features: &Tensor<T>, refs: &[Vec<usize>]) -> Result<Tensor<T>> {
        let target = features.detach().tanh();
        let c = self.sentence.encode_batch(&self.words, refs)?;
        Ok(c.sub(&target)?.square().mean())
    }

    /// Self-critical loss given already decoded samples and rewards: the
    /// baseline only enters through the constant weights `(r_s - r_g) / B`.
    pub fn scst_loss_from(
        &self,
        features: &Tensor<T>,
        samples: &[DecodeResult],
        reward_sampled: &[f64],
        reward_greedy: &[f64],
    ) -> Result<Tensor<T>> {
        let b = samples.len() as f64;
        let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
        let closes: Vec<bool> = samples.iter().map(|s| s.terminated).collect();
        let w: Vec<T> = reward_sampled.iter().zip(reward_greedy).map(|(s, g)| T::from_f64((s - g) / b)).collect();
        self.sequence_nll(features, &seqs, &closes, &w)
    }

    /// One self-critical evaluation: one sample and one greedy decode per
    /// image, CIDEr-D rewards against each image's references.
    pub fn scst_loss<R: Rng + ?Sized>(
        &self,
        features: &Tensor<T>,
        refs: &[Vec<Vec<usize>>],
        idf: &CorpusIdf<usize>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ScstOutput<T>> {
        if let Some(i) = refs.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("image {i} has no references")));
        }
        let max_len = self.cfg.max_len;
        let greedy = self.decode_greedy(features, max_len)?;
        let sampled = self.decode_sample(features, max_len, temperature, rng)?;
        let r_g: Vec<f64> = greedy.iter().zip(refs).map(|(d, r)| cider_d(&d.tokens, r, idf)).collect();
        let r_s: Vec<f64> = sampled.iter().zip(refs).map(|(d, r)| cider_d(&d.tokens, r, idf)).collect();
        let loss = self.scst_loss_from(features, &sampled, &r_s, &r_g)?;
        Ok(ScstOutput { loss, reward_sampled: r_s, reward_greedy: r_g, sampled, greedy })
    }

    /// Frozen sentence embeddings, one row per sequence.
    pub fn embed_sentences(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<T>>> {
        let e = self.cfg.embed_dim;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let c = no_grad(|| self.sentence.encode_batch(&self.words, chunk))?;
            out.extend(c.data().chunks(e).map(<[T]>::to_vec));
        }
        Ok(out)
    }
}

pub struct ScstOutput<T: Float> {
    pub loss: Tensor<T>,
    pub reward_sampled: Vec<f64>,
    pub reward_greedy: Vec<f64>,
    pub sampled: Vec<DecodeResult>,
    pub greedy: Vec<DecodeResult>,
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(row / temperature)`.
pub fn sample_row<R: Rng + ?Sized>(row: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

/// Stacks planar `[3, R, R]` images into one `[N, 3, R, R]` tensor.
pub fn stack_images<T: Float>(images: &[&[f32]], resolution: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * 3 * resolution * resolution);
    for img in images {
        data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec(&[images.len(), 3, resolution, resolution], data)?)
}
