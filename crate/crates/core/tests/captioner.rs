mod common;

use capgan::captioner::*;
use capgan::nn::Module;
use capgan::text::{Vocabulary, BOS, EOS, PAD};
use capgan_tensor::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use capgan_tensor::{log_softmax, AdamConfig, AdamState, Tensor};
use common::{scst_direction_case, scst_self_critical_case, tiny_captioner, tiny_captioner_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn features(n: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, dim], (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// Zeroes every parameter, then gives the output layer the bias `logits`,
/// so each step predicts `softmax(logits)` whatever the input.
fn constant_decoder(m: &Captioner<f64>, logits: &[f64]) {
    for p in m.params() {
        p.set_data(vec![0.0; p.numel()]).unwrap();
    }
    m.output.bias.set_data(logits.to_vec()).unwrap();
}

#[test]
fn identical_images_give_identical_features() {
    let m = tiny_captioner(8, 1);
    let x = images(1, 2).to_vec();
    let pair = Tensor::from_vec(&[2, 3, 8, 8], [x.clone(), x].concat()).unwrap();
    let f = m.encode_images(&pair).unwrap().to_vec();
    assert_eq!(f[..5], f[5..]);
    let zero = m.encode_images(&Tensor::zeros(&[1, 3, 8, 8])).unwrap();
    assert!(zero.is_finite());
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let m = tiny_captioner(8, 1);
    assert!(m.encode_images(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let m = tiny_captioner(8, 3);
    let x = images(2, 4);
    x.set_requires_grad(true);
    let proj = features(2, 5, 5);
    let mut inputs = vec![x.clone()];
    inputs.extend(m.convs.iter().flat_map(|c| [c.weight.clone(), c.bias.clone()]));
    inputs.extend([m.feature.weight.clone(), m.feature.bias.clone()]);
    let report = check_gradients(
        &inputs,
        || Ok(m.encode_images(&x).expect("shape").mul(&proj)?.sum()),
        DEFAULT_STEP,
        Some(40),
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn xe_gradients_match_finite_differences_on_two_step_captions() {
    let m = tiny_captioner(9, 7);
    let x = images(2, 8);
    let refs = vec![vec![5], vec![7]];
    let report = check_gradients(
        &m.params(),
        || Ok(m.xe_loss(&x, &refs).expect("valid refs")),
        DEFAULT_STEP,
        Some(40),
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn rigged_decoder_emits_only_eos() {
    let m = tiny_captioner(8, 1);
    let mut logits = vec![0.0; 8];
    logits[EOS] = 50.0;
    constant_decoder(&m, &logits);
    let out = m.decode_greedy(&features(3, 5, 1), 5).unwrap();
    for d in out {
        assert!(d.tokens.is_empty());
        assert!(d.terminated);
    }
}

#[test]
fn greedy_ties_go_to_the_lowest_id_and_respect_max_len() {
    let m = tiny_captioner(8, 1);
    let mut logits = vec![0.0; 8];
    logits[5] = 2.0;
    logits[6] = 2.0;
    constant_decoder(&m, &logits);
    let out = m.decode_greedy(&features(1, 5, 1), 4).unwrap();
    assert_eq!(out[0].tokens, vec![5; 4]);
    assert!(!out[0].terminated);
}

#[test]
fn greedy_is_deterministic_and_bounded() {
    let m = tiny_captioner(12, 2);
    let f = features(20, 5, 3);
    let a = m.decode_greedy(&f, 5).unwrap();
    assert_eq!(a, m.decode_greedy(&f, 5).unwrap());
    assert!(a.iter().all(|d| d.tokens.len() <= 5));
}

#[test]
fn near_zero_temperature_sampling_is_greedy() {
    let f = features(50, 5, 11);
    for seed in 0..3 {
        let m = tiny_captioner(12, seed);
        let greedy = m.decode_greedy(&f, 5).unwrap();
        let sampled = m.decode_sample(&f, 5, 1e-6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let g: Vec<_> = greedy.iter().map(|d| &d.tokens).collect();
        let s: Vec<_> = sampled.iter().map(|d| &d.tokens).collect();
        assert_eq!(g, s);
    }
}

#[test]
fn sampled_logprobs_match_offline_recomputation() {
    let m = tiny_captioner(10, 4);
    let f = features(6, 5, 12);
    let sampled = m.decode_sample(&f, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let again = m.decode_sample(&f, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(sampled, again);

    // Replay the same batch with the sampled tokens fed back in.
    let mut state = m.start(&f).unwrap();
    let mut prev = vec![BOS; 6];
    for t in 0..=5 {
        let (logits, next) = m.step(&prev, &state).unwrap();
        state = next;
        let data = logits.to_f64_vec();
        for (b, d) in sampled.iter().enumerate() {
            let lp = log_softmax(&data[b * 10..(b + 1) * 10]);
            prev[b] = match d.tokens.get(t) {
                Some(&tok) => {
                    assert_eq!(d.logprobs[t], lp[tok]);
                    tok
                }
                None => {
                    if t == d.tokens.len() {
                        if let Some(e) = d.end_logprob {
                            assert_eq!(e, lp[EOS]);
                        }
                    }
                    PAD
                }
            };
        }
    }
}

#[test]
fn rejects_bad_temperature_and_empty_references() {
    let m = tiny_captioner(8, 1);
    let f = features(1, 5, 1);
    assert!(m.decode_sample(&f, 5, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    assert!(m.xe_loss_from_features(&f, &[vec![]]).is_err());
}

#[test]
fn uniform_decoder_xe_is_log_vocab() {
    let m = Captioner::<f64>::new(tiny_captioner_config(50), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    constant_decoder(&m, &[0.0; 50]);
    let loss = m.xe_loss(&images(3, 1), &[vec![5, 6, 7], vec![9], vec![4, 4]]).unwrap().item();
    assert!((loss - 50f64.ln()).abs() < 1e-9, "{loss}");
}

#[test]
fn hand_set_two_word_xe() {
    // reserved ids plus two words
    let m = tiny_captioner(6, 1);
    let logits = [-1.0, -1.0, 0.5, -1.0, 1.0, 0.2];
    constant_decoder(&m, &logits);
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let lp = |i: usize| logits[i] - z.ln();
    let want = -(lp(4) + lp(5) + lp(EOS)) / 3.0;
    let got = m.xe_loss(&images(1, 2), &[vec![4, 5]]).unwrap().item();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn xe_decreases_on_a_toy_set() {
    let m = tiny_captioner(10, 5);
    let x = images(10, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let refs: Vec<Vec<usize>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(4..10)).collect()).collect();
    // the sentence encoder takes no part in the caption loss
    let params: Vec<_> =
        m.named_params().into_iter().filter(|(n, _)| !n.starts_with("sentence")).map(|(_, p)| p).collect();
    let mut adam = AdamState::new(&params, AdamConfig::new(1e-2, 0.9)).unwrap();
    let first = m.xe_loss(&x, &refs).unwrap().item();
    let mut last = first;
    for _ in 0..200 {
        m.zero_grad();
        let l = m.xe_loss(&x, &refs).unwrap();
        l.backward().unwrap();
        adam.step(&params).unwrap();
        last = l.item();
    }
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn self_critical_loss_vanishes_when_sample_is_greedy() {
    for seed in 0..20 {
        let (loss, grad) = scst_self_critical_case(seed);
        assert_eq!(loss, 0.0);
        assert_eq!(grad, 0.0);
    }
}

#[test]
fn self_critical_step_follows_the_reward_sign() {
    for seed in 0..10 {
        assert!(scst_direction_case(seed, true) > 0.0, "seed {seed}");
        assert!(scst_direction_case(seed, false) < 0.0, "seed {seed}");
    }
}

#[test]
fn self_critical_loss_is_reward_weighted_logprob() {
    let m = tiny_captioner(10, 8);
    let f = features(4, 5, 9);
    let samples = m.decode_sample(&f, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (r_s, r_g) = ([1.0, 0.0, 2.5, 0.3], [0.5, 0.0, 3.0, 0.3]);
    let got = m.scst_loss_from(&f, &samples, &r_s, &r_g).unwrap().item();
    let want: f64 = samples.iter().enumerate().map(|(b, s)| -(r_s[b] - r_g[b]) * s.total_logprob() / 4.0).sum();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn full_self_critical_loss_uses_the_models_own_greedy_baseline() {
    let m = tiny_captioner(10, 9);
    let f = features(3, 5, 10);
    let refs = vec![vec![vec![4, 5]], vec![vec![6]], vec![vec![7, 8, 9]]];
    let idf = capgan::metrics::CorpusIdf::build(&refs);
    let out = m.scst_loss(&f, &refs, &idf, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(out.greedy, m.decode_greedy(&f, 5).unwrap());
    let direct = m.scst_loss_from(&f, &out.sampled, &out.reward_sampled, &out.reward_greedy).unwrap();
    assert_eq!(out.loss.item(), direct.item());
}

#[test]
fn checkpoint_reload_gives_identical_greedy_captions() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build(&["a b c d e f"], 10).unwrap();
    let cfg = CaptionerConfig { resolution: 8, ..tiny_captioner_config(vocab.len()) };
    let m = Captioner::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let path = save_captioner(&m, &vocab, dir.path()).unwrap();
    let (back, v2) = load_captioner(&path).unwrap();
    assert_eq!(v2, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x =
        Tensor::<f32>::from_vec(&[20, 3, 8, 8], (0..20 * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = m.decode_greedy(&m.encode_images(&x).unwrap(), 5).unwrap();
    let b = back.decode_greedy(&back.encode_images(&x).unwrap(), 5).unwrap();
    assert_eq!(a, b);
}
