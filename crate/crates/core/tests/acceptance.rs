//! One line per acceptance criterion. The two experiment-scale criteria are
//! `#[ignore]`d; run them with `cargo test --release --test acceptance --
//! --ignored --nocapture`. Set `CAPGAN_RUNS` to a directory to keep their
//! results; runs already present there are reused.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use capgan::gan::{d_loss, g_loss, load_gan, save_gan, Gan, GanConfig, NoiseMode, METRICS_FILE};
use capgan::metrics::{cider_d, CorpusIdf};
use capgan::persist::checkpoint::Checkpoint;
use capgan::persist::config::RunConfig;
use capgan::pipeline::fidelity::FIDELITY_FILE;
use capgan::pipeline::{
    captioner_stage, dataset_config, run_experiment, Experiment, CAPTIONER_SUMMARY_FILE, CONFIG_FILE, DIVERSITY_FILE,
};
use capgan::text::Vocabulary;
use capgan_tensor::gradcheck::suite;
use capgan_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUITE_TRIALS: usize = 20;
const SUITE_TOLERANCE: f64 = 1e-4;
const SUITE_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TOLERANCE: f64 = 1e-6;
const CIDER_TOLERANCE: f64 = 1e-9;
const SCST_SEEDS: u64 = 100;
const DIRECTION_SEEDS: u64 = 20;
const SEEDS: [u64; 3] = [1, 2, 3];
const CHANCE: f64 = 0.2;
const ORACLE_MARGIN: f64 = 0.15;
const DEGENERATE_BAND: f64 = 0.08;

fn report(n: usize, outcome: Result<String, String>) -> bool {
    match &outcome {
        Ok(detail) => println!("criterion {n}: PASS ({detail})"),
        Err(detail) => println!("criterion {n}: FAIL ({detail})"),
    }
    outcome.is_ok()
}

fn check(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let results = suite::run_suite(SUITE_TRIALS, &mut rng).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (worst_op, worst) = results.iter().fold(("", 0.0f64), |a, &(op, e)| if e > a.1 { (op, e) } else { a });
    check(
        worst <= SUITE_TOLERANCE && elapsed < SUITE_BUDGET && results.len() == suite::operations().len(),
        format!(
            "{} ops x {SUITE_TRIALS} trials, worst {worst:.2e} on {worst_op}, {:.1}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_identities() -> Result<String, String> {
    let m = 3;
    let cfg = GanConfig { branches: m, base: 8, z_dim: 6, embed_dim: 4, noise_mode: NoiseMode::SeparateZ };
    let gan = Gan::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let c = rand_t(&[4, 4]);
    let z = rand_t(&[4, 6]);
    let reals: Vec<Tensor<f64>> = (0..m).map(|i| rand_t(&[4, 3, 8 << i, 8 << i])).collect();
    let fakes = gan.generator.generate(&z, Some(&c)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for p in [0.25, 0.5, 0.9] {
        gan.discriminators.iter().for_each(|d| common::pin(d, p));
        for (i, d) in gan.discriminators.iter().enumerate() {
            let ld = d_loss(d, &reals[i], &fakes[i].detach(), Some(&c)).map_err(|e| e.to_string())?.value();
            worst = worst.max((ld + 2.0 * (p.ln() + (1.0 - p).ln())).abs());
        }
        let lg = g_loss(&gan.discriminators, &fakes, Some(&c)).map_err(|e| e.to_string())?;
        worst = worst.max((lg.value() + 2.0 * m as f64 * p.ln()).abs());
        for (_, term) in &lg.terms {
            worst = worst.max((term + p.ln()).abs());
        }
    }
    check(worst <= IDENTITY_TOLERANCE, format!("m = {m}, p in {{0.25, 0.5, 0.9}}, worst deviation {worst:.1e}"))
}

fn cider_equivalence() -> Result<String, String> {
    let corpus = common::cider_corpus();
    let texts: Vec<String> = corpus.iter().flatten().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::build(&texts, 1000).map_err(|e| e.to_string())?;
    let ids = |s: &str| -> Vec<usize> { vocab.encode(s, 64) };
    let refs: Vec<Vec<Vec<usize>>> = corpus.iter().map(|img| img.iter().map(|s| ids(s)).collect()).collect();
    let idf = CorpusIdf::build(&refs);
    let cases = common::cider_cases();
    let mut worst = 0.0f64;
    for &(cand, img) in &cases {
        let got = cider_d(&ids(cand), &refs[img], &idf);
        let want = common::cider_oracle(cand, &corpus[img], &corpus);
        worst = worst.max((got - want).abs());
    }
    check(worst <= CIDER_TOLERANCE, format!("{} cases, worst deviation {worst:.1e}", cases.len()))
}

fn scst_property() -> Result<String, String> {
    let mut nonzero = 0;
    for seed in 0..SCST_SEEDS {
        let (loss, grad) = common::scst_self_critical_case(seed);
        nonzero += (loss != 0.0 || grad != 0.0) as usize;
    }
    let mut wrong_sign = 0;
    for seed in 0..DIRECTION_SEEDS {
        wrong_sign += (common::scst_direction_case(seed, true) <= 0.0) as usize;
        wrong_sign += (common::scst_direction_case(seed, false) >= 0.0) as usize;
    }
    check(
        nonzero == 0 && wrong_sign == 0,
        format!(
            "{nonzero}/{SCST_SEEDS} self-critical cases with nonzero loss or gradient, \
             {wrong_sign}/{} directional steps with the wrong sign",
            2 * DIRECTION_SEEDS
        ),
    )
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::tiny_run_config(21);
    let a = dir.path().join("a");
    run_experiment(Experiment::UncondSubset, &cfg, &a, &mut |_| {}).map_err(|e| e.to_string())?;
    let stored = RunConfig::load(&a.join(CONFIG_FILE)).map_err(|e| e.to_string())?;
    let b = dir.path().join("b");
    run_experiment(Experiment::UncondSubset, &stored, &b, &mut |_| {}).map_err(|e| e.to_string())?;
    let same_csv = std::fs::read(a.join(METRICS_FILE)).ok() == std::fs::read(b.join(METRICS_FILE)).ok();

    let ckpt = a.join("gan.ckpt");
    let (gan, epochs) = load_gan(&ckpt).map_err(|e| e.to_string())?;
    let resaved = dir.path().join("resaved.ckpt");
    save_gan(&gan, None, epochs, &resaved).map_err(|e| e.to_string())?;
    let strip = |p: &Path| {
        // optimizer state is not part of the model; compare model entries only
        let mut ck = Checkpoint::load(p).unwrap();
        ck.entries.retain(|e| !e.name.starts_with("opt.") && !e.name.starts_with("meta.opt."));
        ck.to_bytes()
    };
    let same_ckpt = strip(&ckpt) == strip(&resaved);
    let raw = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    let same_raw = Checkpoint::from_bytes(&raw).map_err(|e| e.to_string())?.to_bytes() == raw;
    check(
        same_csv && same_ckpt && same_raw,
        format!("metrics CSV identical: {same_csv}, model round trip identical: {same_ckpt}, file bytes identical: {same_raw}"),
    )
}

fn split_ratio() -> Result<String, String> {
    let cfg = RunConfig::default();
    let bad: Vec<usize> =
        (1..=40_000).map(|k| 3 * k).filter(|&n| dataset_config(&cfg, n, 1.0, 1).n_train() != 2 * n / 3).collect();
    let recs = capgan::scene::generate_records(&dataset_config(&cfg, 3000, 1.0, 1)).map_err(|e| e.to_string())?;
    let train = recs.iter().filter(|r| r.split == capgan::scene::Split::Train).count();
    check(
        bad.is_empty() && train == 2000,
        format!("n = 3..120000 step 3: {} mismatches; n = 3000 gives {train}/{}", bad.len(), recs.len() - train),
    )
}

#[test]
fn acceptance_criteria() {
    let mut all = true;
    all &= report(1, gradient_suite());
    all &= report(2, loss_identities());
    all &= report(3, cider_equivalence());
    all &= report(4, scst_property());
    println!("criterion 5: SKIPPED (heavy; run with --ignored)");
    println!("criterion 6: SKIPPED (heavy; run with --ignored)");
    all &= report(7, determinism());
    all &= report(8, split_ratio());
    assert!(all, "some acceptance criteria failed");
}

fn runs_dir() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("CAPGAN_RUNS") {
        Some(d) => {
            std::fs::create_dir_all(&d).unwrap();
            (PathBuf::from(d), None)
        }
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Trains the captioner of `seed` unless its summary already exists.
fn captioner(runs: &Path, seed: u64) -> (PathBuf, Duration) {
    let out = runs.join(format!("cap{seed}"));
    let start = Instant::now();
    if !out.join(CAPTIONER_SUMMARY_FILE).exists() {
        let cfg = RunConfig::parse(&format!("seed = {seed}")).unwrap();
        captioner_stage(&cfg, &out, &mut |_| {}).unwrap();
    }
    (out, start.elapsed())
}

#[test]
#[ignore]
fn acceptance_captioner_efficacy() {
    let (runs, _keep) = runs_dir();
    let mut gains = Vec::new();
    let mut beats_untrained = true;
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let (dir, took) = captioner(&runs, seed);
        slowest = slowest.max(took);
        let s = json(&dir.join(CAPTIONER_SUMMARY_FILE));
        let f = |k: &str| s[k].as_f64().unwrap();
        beats_untrained &= f("best_xe_val_cider") > f("untrained_val_cider");
        gains.push(f("test_cider_final") - f("test_cider_xe"));
    }
    let gain = median(gains.clone());
    let ok = report(
        5,
        check(
            beats_untrained && gain >= 0.0 && slowest <= Duration::from_secs(20 * 60),
            format!(
                "after cross-entropy beats untrained: {beats_untrained}; self-critical gains {gains:.3?}, median {gain:.3}; \
                 slowest fresh run {:.0}s",
                slowest.as_secs_f64()
            ),
        ),
    );
    assert!(ok);
}

#[test]
#[ignore]
fn acceptance_conditional_fidelity_contrast() {
    let (runs, _keep) = runs_dir();
    let exps = [Experiment::CondOracle, Experiment::CondDegenerate, Experiment::CondMachine];
    let mut fid = vec![Vec::new(); 3];
    let mut bleu = vec![Vec::new(); 3];
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let (cap, _) = captioner(&runs, seed);
        for (i, exp) in exps.iter().enumerate() {
            let out = runs.join(format!("{}_s{seed}", exp.name()));
            if !out.join(FIDELITY_FILE).exists() {
                let mut cfg = RunConfig::parse(&format!("seed = {seed}")).unwrap();
                cfg.set("captioner_checkpoint", cap.join("captioner.ckpt").to_str().unwrap()).unwrap();
                let start = Instant::now();
                run_experiment(*exp, &cfg, &out, &mut |_| {}).unwrap();
                slowest = slowest.max(start.elapsed());
            }
            let f = json(&out.join(FIDELITY_FILE));
            let wall = f["attributes"].as_array().unwrap().iter().find(|a| a["name"] == "wall_color").unwrap();
            fid[i].push(wall["accuracy"].as_f64().unwrap_or(f64::NAN));
            bleu[i].push(json(&out.join(DIVERSITY_FILE))["self_bleu"].as_f64().unwrap());
        }
    }
    let [oracle, degenerate, machine] = [0, 1, 2].map(|i| median(fid[i].clone()));
    let a = oracle >= CHANCE + ORACLE_MARGIN;
    let b = (degenerate - CHANCE).abs() <= DEGENERATE_BAND;
    let (mb, ob) = (median(bleu[2].clone()), median(bleu[0].clone()));
    let c = machine <= oracle && mb > ob;
    let ok = report(
        6,
        check(
            a && b && c && slowest <= Duration::from_secs(90 * 60),
            format!(
                "(a) oracle {oracle:.3} {fo:.3?}: {a}; (b) degenerate {degenerate:.3} {fd:.3?}: {b}; \
                 (c) machine {machine:.3} {fm:.3?}, self-BLEU machine {mb:.3} vs oracle {ob:.3}: {c}; \
                 slowest fresh run {:.0}s",
                slowest.as_secs_f64(),
                fo = fid[0],
                fd = fid[1],
                fm = fid[2],
            ),
        ),
    );
    assert!(ok);
}
