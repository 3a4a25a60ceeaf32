#![allow(dead_code)]

use std::collections::BTreeMap;

use capgan::captioner::{Captioner, CaptionerConfig};
use capgan::gan::Discriminator;
use capgan::metrics::{cider_d, CorpusIdf};
use capgan::nn::Module;
use capgan::persist::config::RunConfig;
use capgan_tensor::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *out.entry(tokens[i..i + n].to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Written straight from the CIDEr-D definition, sharing no code with the
/// library: tf-idf vectors with idf `ln N - ln max(1, df)`, clipped dot
/// product over the two norms, Gaussian length penalty with sigma 6, mean
/// over n = 1..4 and over references, times 10.
pub fn cider_oracle(candidate: &str, refs: &[&str], corpus: &[Vec<&str>]) -> f64 {
    let n_docs = corpus.len() as f64;
    let df = |g: &Vec<String>| -> f64 {
        corpus.iter().filter(|doc| doc.iter().any(|r| grams(&words(r), g.len()).contains_key(g))).count() as f64
    };
    let vector = |toks: &[String], n: usize| -> BTreeMap<Vec<String>, f64> {
        grams(toks, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf * (n_docs.ln() - df(&g).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x.powi(2)).sum::<f64>().sqrt();
    let cand = words(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let mut sum_refs = 0.0;
    for r in refs {
        let rt = words(r);
        let delta = cand.len() as f64 - rt.len() as f64;
        let mut sum_n = 0.0;
        for n in 1..=4 {
            let vc = vector(&cand, n);
            let vr = vector(&rt, n);
            let mut val = 0.0;
            for (g, c) in &vc {
                let rv = vr.get(g).copied().unwrap_or(0.0);
                val += c.min(rv) * rv;
            }
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc != 0.0 && nr != 0.0 {
                val /= nc * nr;
            }
            sum_n += val * (-delta.powi(2) / 72.0).exp();
        }
        sum_refs += sum_n / 4.0;
    }
    10.0 * sum_refs / refs.len() as f64
}

pub fn cider_corpus() -> Vec<Vec<&'static str>> {
    vec![
        vec![
            "a bedroom with blue walls and a large red bed",
            "blue walls surround a large red bed",
            "a large red bed in a room with blue walls",
        ],
        vec![
            "a small white bed under a window on the left",
            "a bedroom with green walls and a small white bed",
            "green walls and a window on the left",
            "a small white bed",
        ],
        vec!["a bedroom with a bed", "a bedroom with a bed", "a room with a bed and a dark rug"],
        vec![
            "yellow walls and a bare floor",
            "a large black bed on a bare floor",
            "a bedroom with yellow walls and no window",
        ],
        vec!["a dark rug lies before a large green bed", "a large green bed on a dark rug with red walls"],
    ]
}

/// `(candidate, image index)` pairs covering exact matches, partial overlap,
/// clipping of repeated words, length penalties, unseen words and empty input.
pub fn cider_cases() -> Vec<(&'static str, usize)> {
    vec![
        ("a bedroom with blue walls and a large red bed", 0),
        ("blue walls and a red bed", 0),
        ("red red red red bed", 0),
        ("a bedroom with a bed", 0),
        ("", 0),
        ("a small white bed", 1),
        ("a window on the left", 1),
        ("a bedroom with green walls and a small white bed under a window on the left side", 1),
        ("purple elephants dance", 1),
        ("a bedroom with a bed", 2),
        ("a bed", 2),
        ("a room with a dark rug", 2),
        ("a a a a a a a a a a a a a a a a a a a a", 2),
        ("yellow walls", 3),
        ("a large black bed on a bare floor with yellow walls and no window", 3),
        ("a bedroom with blue walls and a large red bed", 3),
        ("walls", 3),
        ("a large green bed on a dark rug", 4),
        ("red walls and a dark rug", 4),
        ("rug dark a", 4),
    ]
}

/// Makes every head of `d` output probability `p` whatever its input.
pub fn pin(d: &Discriminator<f64>, p: f64) {
    let logit = (p / (1.0 - p)).ln();
    for head in [Some(&d.uncond_head), d.cond_head.as_ref()].into_iter().flatten() {
        head.weight.set_data(vec![0.0; head.weight.numel()]).unwrap();
        head.bias.set_data(vec![logit; head.bias.numel()]).unwrap();
    }
}

pub fn tiny_captioner_config(vocab_size: usize) -> CaptionerConfig {
    CaptionerConfig { vocab_size, word_dim: 6, feature_dim: 5, embed_dim: 5, hidden: 7, resolution: 8, max_len: 5 }
}

pub fn tiny_captioner(vocab_size: usize, seed: u64) -> Captioner<f64> {
    Captioner::new(tiny_captioner_config(vocab_size), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A full pipeline configuration small enough to run in seconds.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    let text = format!(
        "seed = {seed}
n = 90
full_n = 120
resolution = 32
base_resolution = 8
branches = 3
captioner_train_n = 60
captioner_val_n = 20
captioner_test_n = 20
xe_epochs = 1
scst_epochs = 1
lstm_hidden = 32
word_dim = 16
feature_dim = 16
embed_dim = 16
gan_epochs = 1
probe_train_n = 500
probe_test_n = 100
fidelity_n = 100
grid = 4
"
    );
    RunConfig::parse(&text).unwrap()
}

fn random_images(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(&[n, 3, r, r], (0..n * 3 * r * r).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_refs(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
    (0..n)
        .map(|_| (0..3).map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(4..vocab)).collect()).collect())
        .collect()
}

/// Forces the sampled captions to be the greedy ones for a random model and
/// image. Returns the loss value and the largest absolute parameter gradient.
pub fn scst_self_critical_case(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(6..14);
    let model = tiny_captioner(vocab, seed);
    let images = random_images(1, 8, &mut rng);
    let refs = random_refs(1, vocab, &mut rng);
    let idf = CorpusIdf::build(&refs);
    model.zero_grad();
    let features = model.encode_images(&images).unwrap();
    let greedy = model.decode_greedy(&features, model.cfg.max_len).unwrap();
    let r: Vec<f64> = greedy.iter().zip(&refs).map(|(g, r)| cider_d(&g.tokens, r, &idf)).collect();
    let loss = model.scst_loss_from(&features, &greedy, &r, &r).unwrap();
    loss.backward().unwrap();
    let max_grad = model.params().iter().filter_map(|p| p.grad()).flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    (loss.item(), max_grad)
}

/// One plain gradient step on the self-critical loss of a single sample with
/// rewards drawn so that `r_s - r_g` has the requested sign. Returns the
/// change in the sample's total log-probability.
pub fn scst_direction_case(seed: u64, sampled_better: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(6..14);
    let model = tiny_captioner(vocab, seed);
    let images = random_images(1, 8, &mut rng);
    let features = model.encode_images(&images).unwrap();
    let sample = model.decode_sample(&features, model.cfg.max_len, 1.0, &mut rng).unwrap();
    let (lo, hi) = (rng.random_range(0.0..5.0), rng.random_range(5.5..10.0));
    let (r_s, r_g) = if sampled_better { (hi, lo) } else { (lo, hi) };
    let logprob = |m: &Captioner<f64>| -> f64 {
        let f = m.encode_images(&images).unwrap();
        let s = &sample[0];
        -no_grad(|| m.sequence_nll(&f, std::slice::from_ref(&s.tokens), &[s.terminated], &[1.0])).unwrap().item()
    };
    let before = logprob(&model);
    model.zero_grad();
    model.scst_loss_from(&features, &sample, &[r_s], &[r_g]).unwrap().backward().unwrap();
    for p in model.params() {
        if let Some(g) = p.grad() {
            let stepped: Vec<f64> = p.to_vec().iter().zip(&g).map(|(v, g)| v - 1e-3 * g).collect();
            p.set_data(stepped).unwrap();
        }
    }
    logprob(&model) - before
}
