use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use capgan::captioner::load_captioner;
use capgan::gan::{load_gan, montage, sample_images, train_gan};
use capgan::persist::config::RunConfig;
use capgan::pipeline::captions::{
    caption_dataset, corpus_diversity, read_captions, write_captions, CaptionMode, CAPTIONS_FILE,
};
use capgan::pipeline::fidelity::{evaluate_fidelity, FIDELITY_FILE};
use capgan::pipeline::probe::load_probe;
use capgan::pipeline::{
    captioner_stage, dataset_config, embed_captions, fidelity_captions, gan_config, gan_table, gan_train_config,
    probe_stage, run_experiment, write_run_manifest, Experiment, Seeds, DIVERSITY_FILE,
};
use capgan::scene::{build_dataset, load_manifest, write_png, write_png_rect, Split};

#[derive(Parser)]
#[command(name = "capgan", version, about = "Synthetic scenes, captioner and caption-conditioned GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a captioned scene dataset
    SynthData(Common),
    /// Train the image captioner on its own scene set
    TrainCaptioner(Common),
    /// Caption every image of `data_dir` with the trained captioner
    Caption(Common),
    /// Train the multi-scale GAN on `data_dir`
    TrainGan {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Sample images from a trained GAN
    Generate {
        #[command(flatten)]
        common: Common,
        /// Conditioning caption (conditional GANs only)
        #[arg(long)]
        caption: Option<String>,
        /// Number of images
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Train the attribute probe
    TrainProbe(Common),
    /// Conditional fidelity of a trained GAN
    Evaluate(Common),
    /// Run one experiment end to end
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Experiment name; overrides the config file
        #[arg(long)]
        experiment: Option<String>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.path("data_dir").ok_or_else(|| anyhow!("set data_dir to a dataset built by synth-data"))
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn synth_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seeds = Seeds::new(cfg.require_seed()?);
    let dc = dataset_config(&cfg, cfg.usize("n"), cfg.f64("diversity"), seeds.data);
    let m = build_dataset(&dc, &c.out)?;
    write_run_manifest(&cfg, &seeds, &c.out)?;
    progress(&format!("wrote {} scenes to {}", m.records.len(), c.out.display()));
    Ok(())
}

fn train_captioner_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let stage = captioner_stage(&cfg, &c.out, &mut |e| {
        progress(&format!(
            "{} epoch {}: loss {:.4} val CIDEr-D {:.4}",
            e.phase.name(),
            e.epoch,
            e.train_loss,
            e.val_cider
        ))
    })?;
    let s = &stage.summary;
    progress(&format!(
        "test CIDEr-D {:.4} (after cross-entropy {:.4}); checkpoint {}",
        s.test_cider_final,
        s.test_cider_xe,
        stage.checkpoint.display()
    ));
    Ok(())
}

fn captioner_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.path("captioner_checkpoint").ok_or_else(|| anyhow!("set captioner_checkpoint (see train-captioner)"))
}

fn caption_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seeds = Seeds::new(cfg.require_seed()?);
    let (model, vocab) = load_captioner(&captioner_path(&cfg)?)?;
    let manifest = load_manifest(&data_dir(&cfg)?)?;
    let records: Vec<_> = manifest.records.iter().collect();
    let mode = CaptionMode::parse(cfg.str("caption_mode"))?;
    let file = caption_dataset(&model, &vocab, &manifest, &records, cfg.usize("caption_k"), mode, seeds.captions)?;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    write_captions(&c.out.join(CAPTIONS_FILE), &file)?;
    let caps: Vec<Vec<String>> = file.iter().map(|r| r.captions.clone()).collect();
    let d = corpus_diversity(&caps)?;
    std::fs::write(c.out.join(DIVERSITY_FILE), serde_json::to_string_pretty(&d)? + "\n")?;
    progress(&format!("captioned {} images; self-BLEU {:.4} distinct-1 {:.4}", file.len(), d.self_bleu, d.distinct[0]));
    Ok(())
}

fn train_gan_cmd(c: &Common, resume: bool) -> Result<()> {
    let cfg = load_config(c)?;
    let seeds = Seeds::new(cfg.require_seed()?);
    let manifest = load_manifest(&data_dir(&cfg)?)?;
    let train_ids: Vec<usize> = manifest.split(Split::Train).map(|r| r.id).collect();
    let source = cfg.str("captions_source").to_string();
    let captions: Option<Vec<Vec<String>>> = match source.as_str() {
        "none" => None,
        "manifest" => Some(manifest.split(Split::Train).map(|r| r.captions.clone()).collect()),
        path => Some(capgan::pipeline::captions::captions_for(&read_captions(Path::new(path))?, &train_ids)?),
    };
    let captioner = match &captions {
        Some(_) => Some(load_captioner(&captioner_path(&cfg)?)?),
        None => None,
    };
    let embed_dim = captioner.as_ref().map_or(0, |(m, _)| m.cfg.embed_dim);
    let gcfg = gan_config(&cfg, embed_dim)?;
    let table = gan_table(
        &manifest,
        match (&captions, &captioner) {
            (Some(cs), Some((m, v))) => Some((cs.as_slice(), m, v)),
            _ => None,
        },
    )?;
    write_run_manifest(&cfg, &seeds, &c.out)?;
    let tc = gan_train_config(&cfg, seeds.gan);
    let per_epoch = table.ids.len().div_ceil(tc.batch_size.max(1));
    let run = train_gan(gcfg, &table, &tc, &c.out, resume, &mut |step, m| {
        if (step + 1) % per_epoch == 0 {
            progress(&format!("epoch {}: loss_d {:?} loss_g {:.4}", (step + 1) / per_epoch, m.loss_d, m.loss_g));
        }
    })?;
    progress(&format!("checkpoint {}", run.checkpoint.display()));
    Ok(())
}

fn generate_cmd(c: &Common, caption: Option<&str>, n: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let seed = cfg.seed().unwrap_or(0);
    let path = cfg.path("gan_checkpoint").ok_or_else(|| anyhow!("set gan_checkpoint (see train-gan)"))?;
    let (gan, _) = load_gan(&path)?;
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let embedding = match (gan.cfg.conditional(), caption) {
        (true, Some(text)) => {
            let (model, vocab) = load_captioner(&captioner_path(&cfg)?)?;
            let e = embed_captions(&model, &vocab, &[text.to_string()])?.remove(0);
            Some(e.ok_or_else(|| anyhow!("caption {text:?} has no words"))?)
        }
        (true, None) => bail!("this GAN is conditional; pass --caption"),
        (false, Some(_)) => bail!("this GAN is unconditional; --caption does not apply"),
        (false, None) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f32> = (0..n * gan.cfg.z_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let c_all: Option<Vec<f32>> = embedding.map(|e| e.iter().copied().cycle().take(n * e.len()).collect());
    let top = sample_images(&gan, &z, c_all.as_deref(), n)?.pop().expect("at least one scale");
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let r = gan.cfg.top_resolution();
    for (i, img) in top.chunks(3 * r * r).enumerate() {
        write_png(&c.out.join(format!("sample_{i:03}.png")), img, r)?;
    }
    let side = (n as f64).sqrt().ceil() as usize;
    let (pix, h, w) = montage(&top, r, side);
    write_png_rect(&c.out.join("grid.png"), &pix, h, w)?;
    progress(&format!("wrote {n} images to {}", c.out.display()));
    Ok(())
}

fn train_probe_cmd(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    cfg.set("probe_checkpoint", "")?;
    let seeds = Seeds::new(cfg.require_seed()?);
    write_run_manifest(&cfg, &seeds, &c.out)?;
    let (_, report) = probe_stage(&cfg, &seeds, &c.out)?;
    let report = report.expect("freshly trained");
    std::fs::write(c.out.join("probe_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    progress(&format!("probe held-out accuracy {:?}", report.accuracy));
    Ok(())
}

fn evaluate_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let seeds = Seeds::new(cfg.require_seed()?);
    let path = cfg.path("gan_checkpoint").ok_or_else(|| anyhow!("set gan_checkpoint (see train-gan)"))?;
    let (gan, _) = load_gan(&path)?;
    let manifest = load_manifest(&data_dir(&cfg)?)?;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let probe = match cfg.path("probe_checkpoint") {
        Some(p) => load_probe(&p)?,
        None => probe_stage(&cfg, &seeds, &c.out)?.0,
    };
    let caps = fidelity_captions(&manifest, seeds.fidelity);
    let emb = if gan.cfg.conditional() {
        let (model, vocab) = load_captioner(&captioner_path(&cfg)?)?;
        let e: Option<Vec<Vec<f32>>> = embed_captions(&model, &vocab, &caps)?.into_iter().collect();
        Some(e.ok_or_else(|| anyhow!("a fidelity caption encoded to nothing"))?)
    } else {
        None
    };
    let report = evaluate_fidelity(&gan, &probe, &caps, emb.as_deref(), cfg.usize("fidelity_n"), seeds.fidelity)?;
    report.write(&c.out.join(FIDELITY_FILE))?;
    progress(&format!("wall_color fidelity {:?}", report.accuracy("wall_color")));
    Ok(())
}

fn run_experiment_cmd(c: &Common, experiment: Option<&str>) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(e) = experiment {
        cfg.set("experiment", e)?;
    }
    let exp = Experiment::parse(cfg.str("experiment"))?;
    let res = run_experiment(exp, &cfg, &c.out, &mut |m| progress(m))?;
    progress(&format!("{}: results in {}", exp.name(), res.dir.display()));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(c) => synth_data(c),
        Command::TrainCaptioner(c) => train_captioner_cmd(c),
        Command::Caption(c) => caption_cmd(c),
        Command::TrainGan { common, resume } => train_gan_cmd(common, *resume),
        Command::Generate { common, caption, n } => generate_cmd(common, caption.as_deref(), *n),
        Command::TrainProbe(c) => train_probe_cmd(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::RunExperiment { common, experiment } => run_experiment_cmd(common, experiment.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
