mod common;

use capgan::gan::*;
use capgan::nn::Module;
use capgan::Error;
use capgan_tensor::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use capgan_tensor::{no_grad, Tensor};
use common::pin;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cfg(branches: usize, embed_dim: usize) -> GanConfig {
    GanConfig { branches, base: 8, z_dim: 6, embed_dim, noise_mode: NoiseMode::SeparateZ }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn grads_are_zero(params: &[Tensor<f64>]) -> bool {
    params.iter().all(|p| p.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
}

fn grads_are_nonzero(params: &[Tensor<f64>]) -> bool {
    params.iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
}

#[test]
fn generator_is_bounded_and_deterministic_over_random_draws() {
    let gan = Gan::<f32>::new(GanConfig { base: 16, ..cfg(3, 4) }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Vec<f32> = (0..100 * 6).map(|_| 3.0 * rng.sample::<f32, _>(StandardNormal)).collect();
    let c: Vec<f32> = (0..100 * 4).map(|_| 3.0 * rng.sample::<f32, _>(StandardNormal)).collect();
    let a = sample_images(&gan, &z, Some(&c), 100).unwrap();
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), [100 * 3 * 256, 100 * 3 * 1024, 100 * 3 * 4096]);
    assert!(a.iter().flatten().all(|v| v.abs() <= 1.0));
    assert_eq!(a, sample_images(&gan, &z, Some(&c), 100).unwrap());
}

#[test]
fn half_probability_losses() {
    let gan = Gan::<f64>::new(cfg(3, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    gan.discriminators.iter().for_each(|d| pin(d, 0.5));
    let c = uniform(&[3, 4], 1);
    let ld = d_loss(&gan.discriminators[0], &uniform(&[3, 3, 8, 8], 2), &uniform(&[3, 3, 8, 8], 3), Some(&c)).unwrap();
    assert!((ld.value() - 4.0 * 2f64.ln()).abs() < 1e-9);
    assert_eq!(ld.terms.iter().map(|t| t.0).collect::<Vec<_>>(), ["real", "fake", "real_cond", "fake_cond"]);
    let fakes = gan.generator.generate(&uniform(&[3, 6], 4), Some(&c)).unwrap();
    let lg = g_loss(&gan.discriminators, &fakes, Some(&c)).unwrap().value();
    assert!((lg - 6.0 * 2f64.ln()).abs() < 1e-9, "{lg}");
}

#[test]
fn single_scale_generator_loss_is_two_terms() {
    let gan = Gan::<f64>::new(cfg(1, 4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let c = uniform(&[2, 4], 1);
    let fakes = gan.generator.generate(&uniform(&[2, 6], 2), Some(&c)).unwrap();
    let loss = g_loss(&gan.discriminators, &fakes, Some(&c)).unwrap();
    let s = gan.discriminators[0].scores(&fakes[0], Some(&c)).unwrap();
    let mean_log = |t: &Tensor<f64>| t.to_vec().iter().map(|p| p.ln()).sum::<f64>() / 2.0;
    let want = -mean_log(&s.uncond) - mean_log(s.cond.as_ref().unwrap());
    assert!((loss.value() - want).abs() < 1e-12);
    assert_eq!(loss.terms.len(), 2);
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    let gan = Gan::<f64>::new(cfg(1, 3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let d = &gan.discriminators[0];
    let (x, s, c) = (uniform(&[2, 3, 8, 8], 6), uniform(&[2, 3, 8, 8], 7), uniform(&[2, 3], 8));
    for t in [&x, &s, &c] {
        t.set_requires_grad(true);
    }
    let mut inputs = d.params();
    inputs.extend([x.clone(), s.clone(), c.clone()]);
    let report = check_gradients(
        &inputs,
        || Ok(d_loss(d, &x, &s, Some(&c)).expect("shapes").total),
        DEFAULT_STEP,
        Some(30),
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let gan = Gan::<f64>::new(cfg(2, 3), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let (z, c) = (uniform(&[2, 6], 11), uniform(&[2, 3], 12));
    let report = check_gradients(
        &gan.generator.params(),
        || {
            let fakes = gan.generator.generate(&z, Some(&c)).expect("shapes");
            Ok(g_loss(&gan.discriminators, &fakes, Some(&c)).expect("shapes").total)
        },
        DEFAULT_STEP,
        Some(20),
        &mut ChaCha8Rng::seed_from_u64(13),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn alternation_keeps_the_other_networks_gradients_zero() {
    let gan = Gan::<f64>::new(cfg(2, 3), &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let (z, c) = (uniform(&[2, 6], 15), uniform(&[2, 3], 16));
    let fakes = gan.generator.generate(&z, Some(&c)).unwrap();
    let reals = real_pyramid(&uniform(&[2, 3, 16, 16], 17), 2).unwrap();

    gan.zero_grad();
    d_loss(&gan.discriminators[1], &reals[1], &fakes[1].detach(), Some(&c)).unwrap().total.backward().unwrap();
    assert!(grads_are_zero(&gan.generator.params()));
    assert!(grads_are_nonzero(&gan.discriminators[1].params()));

    gan.zero_grad();
    gan.discriminators.iter().for_each(|d| d.set_trainable(false));
    let fakes = gan.generator.generate(&z, Some(&c)).unwrap();
    g_loss(&gan.discriminators, &fakes, Some(&c)).unwrap().total.backward().unwrap();
    gan.discriminators.iter().for_each(|d| d.set_trainable(true));
    assert!(grads_are_nonzero(&gan.generator.params()));
    assert!(gan.discriminators.iter().all(|d| grads_are_zero(&d.params())));
}

#[test]
fn clamped_scores_keep_losses_finite() {
    let gan = Gan::<f64>::new(cfg(1, 0), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    pin(&gan.discriminators[0], 0.5);
    gan.discriminators[0].uncond_head.bias.set_data(vec![1e4]).unwrap();
    let l = d_loss(&gan.discriminators[0], &uniform(&[2, 3, 8, 8], 1), &uniform(&[2, 3, 8, 8], 2), None).unwrap();
    assert!(l.value().is_finite());
    assert!((l.value() + (1e-7f64).ln()).abs() < 1e-6, "{}", l.value());
}

fn batch(cfg: &GanConfig, n: usize, seed: u64) -> GanBatch<f32> {
    let r = cfg.top_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| {
        let k = shape.iter().product();
        Tensor::from_vec(shape, (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let c = cfg.conditional().then(|| t(&[n, cfg.embed_dim]));
    GanBatch::new(t(&[n, 3, r, r]), c, t(&[n, cfg.z_dim]), cfg.branches).unwrap()
}

#[test]
fn one_step_on_a_fresh_model_is_finite() {
    for embed in [0, 4] {
        let c = cfg(3, embed);
        let gan = init_gan(c, 1).unwrap();
        let mut opt = GanOptim::new(&gan, 2e-4, 0.5).unwrap();
        let m = train_step(&gan, &mut opt, &batch(&c, 4, 2)).unwrap();
        assert!(m.all_finite());
        assert_eq!(m.loss_d.len(), 3);
        assert!((m.loss_g_scale.iter().sum::<f64>() - m.loss_g).abs() < 1e-9);
    }
}

#[test]
fn nan_generator_head_names_scale_and_term() {
    let c = cfg(3, 4);
    let gan = init_gan(c, 1).unwrap();
    let head = &gan.generator.heads[1];
    head.weight.set_data(vec![f32::NAN; head.weight.numel()]).unwrap();
    let mut opt = GanOptim::new(&gan, 2e-4, 0.5).unwrap();
    match train_step(&gan, &mut opt, &batch(&c, 4, 2)) {
        Err(Error::NonFinite { scale, term }) => assert_eq!((scale, term), (1, "fake")),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|m| m.loss_g)),
    }
}

fn table(n: usize, r: usize, conditional: bool) -> CaptionTable {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = (0..n).map(|_| (0..3 * r * r).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let emb = conditional
        .then(|| (0..n).map(|i| (0..2).map(|j| vec![i as f32 * 0.1, j as f32, -1.0, 0.5]).collect()).collect());
    CaptionTable::new((0..n).collect(), images, emb).unwrap()
}

fn train_config(epochs: usize) -> GanTrainConfig {
    GanTrainConfig { epochs, batch_size: 6, lr: 2e-4, beta1: 0.5, seed: 7, grid: 2 }
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let gc = cfg(2, 4);
    let data = table(14, 16, true);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    train_gan(gc, &data, &train_config(3), full.path(), false, &mut |_, _| {}).unwrap();
    train_gan(gc, &data, &train_config(1), split.path(), false, &mut |_, _| {}).unwrap();
    let resumed = train_gan(gc, &data, &train_config(3), split.path(), true, &mut |_, _| {}).unwrap();
    let read = |d: &std::path::Path| std::fs::read_to_string(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(full.path()), read(split.path()));
    assert_eq!(read(full.path()).lines().next(), Some(METRICS_HEADER));
    assert_eq!(std::fs::read(full.path().join(CHECKPOINT_FILE)).unwrap(), std::fs::read(&resumed.checkpoint).unwrap());
    for e in 0..3 {
        assert!(split.path().join(SAMPLES_DIR).join(format!("epoch_{e:04}_scale1.png")).exists());
    }
    let (back, epochs) = load_gan(&resumed.checkpoint).unwrap();
    assert_eq!(epochs, 3);
    assert_eq!(back.cfg, gc);
}

#[test]
fn missing_captions_are_listed() {
    let emb = vec![vec![vec![0.0; 4]], vec![], vec![vec![0.0; 4]], vec![]];
    let err = CaptionTable::new(vec![10, 11, 12, 13], vec![vec![0.0; 3 * 64]; 4], Some(emb)).err().unwrap();
    match err {
        Error::Config(msg) => assert!(msg.contains("[11, 13]"), "{msg}"),
        other => panic!("{other}"),
    }
}

#[test]
fn conditioning_mismatch_is_a_config_error() {
    let data = table(4, 8, false);
    let dir = tempfile::tempdir().unwrap();
    let err = train_gan(cfg(1, 4), &data, &train_config(1), dir.path(), false, &mut |_, _| {}).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

/// Two flat-colour classes, the class one-hot as `c`. The "probe" reads the
/// sign of the mean red minus blue difference.
#[test]
fn toy_conditional_gan_follows_its_label() {
    let gc = GanConfig { branches: 1, base: 8, z_dim: 8, embed_dim: 2, noise_mode: NoiseMode::SeparateZ };
    let gan = init_gan(gc, 3).unwrap();
    let mut opt = GanOptim::new(&gan, 1e-3, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plane = 64;
    let image = |label: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let rgb = if label == 0 { [0.8, -0.6, -0.8] } else { [-0.8, -0.6, 0.8] };
        (0..3 * plane).map(|i| rgb[i / plane] + 0.05 * rng.sample::<f32, _>(StandardNormal)).collect()
    };
    let n = 16;
    for _ in 0..2000 {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let pixels: Vec<f32> = labels.iter().flat_map(|&l| image(l, &mut rng)).collect();
        let c: Vec<f32> = labels.iter().flat_map(|&l| [(l == 0) as u8 as f32, (l == 1) as u8 as f32]).collect();
        let z: Vec<f32> = (0..n * 8).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let b = GanBatch::new(
            Tensor::from_vec(&[n, 3, 8, 8], pixels).unwrap(),
            Some(Tensor::from_vec(&[n, 2], c).unwrap()),
            Tensor::from_vec(&[n, 8], z).unwrap(),
            1,
        )
        .unwrap();
        train_step(&gan, &mut opt, &b).unwrap();
    }
    let m = 200;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
    let c: Vec<f32> = labels.iter().flat_map(|&l| [(l == 0) as u8 as f32, (l == 1) as u8 as f32]).collect();
    let z: Vec<f32> = (0..m * 8).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let imgs = no_grad(|| sample_images(&gan, &z, Some(&c), m)).unwrap().pop().unwrap();
    let hits = imgs
        .chunks(3 * plane)
        .zip(&labels)
        .filter(|(img, &l)| {
            let diff: f32 = img[..plane].iter().zip(&img[2 * plane..]).map(|(r, b)| r - b).sum();
            (diff < 0.0) as usize == l
        })
        .count();
    let fidelity = hits as f64 / m as f64;
    assert!(fidelity > 0.9, "toy fidelity {fidelity}");
}
