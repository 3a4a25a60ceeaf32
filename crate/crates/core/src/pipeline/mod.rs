//! End-to-end stages: captioner training, machine captioning, GAN training,
//! probe training and fidelity evaluation, plus the five experiment recipes.

pub mod captions;
pub mod fidelity;
pub mod parse;
pub mod probe;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::captioner::{
    evaluate_cider, load_captioner, save_captioner, train_captioner, CapExample, Captioner, CaptionerConfig,
    CaptionerHistory, CaptionerTrainConfig, EpochLog,
};
use crate::error::{io_err, Error, Result};
use crate::gan::{train_gan, CaptionTable, GanConfig, GanTrainConfig, NoiseMode, StepMetrics};
use crate::persist::config::RunConfig;
use crate::scene::{
    build_dataset, caption_scene, dequantize, derive_seed, generate_records, quantize, render_pixels, DatasetConfig,
    DatasetManifest, Split,
};
use crate::text::Vocabulary;
use captions::{
    caption_dataset, captions_for, corpus_diversity, write_captions, CaptionMode, CaptionRecord, CorpusDiversity,
};
use fidelity::{evaluate_fidelity, FidelityReport, FIDELITY_FILE};
use probe::{load_probe, save_probe, train_probe, Probe, ProbeReport, ProbeTrainConfig};

pub const PROBE_FILE: &str = "probe.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CONFIG_JSON: &str = "config.json";
pub const SEEDS_FILE: &str = "seeds.json";
pub const DIVERSITY_FILE: &str = "caption_diversity.json";
pub const CAPTIONER_HISTORY_FILE: &str = "captioner_history.csv";
pub const CAPTIONER_SUMMARY_FILE: &str = "captioner_summary.json";

/// Sub-stream tags of the master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const CAPTIONER_DATA: u64 = 2;
    pub const CAPTIONER_INIT: u64 = 3;
    pub const CAPTIONER_TRAIN: u64 = 4;
    pub const CAPTIONS: u64 = 5;
    pub const GAN: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const FIDELITY: u64 = 8;
}

/// Seeds of every stage, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub captioner_data: u64,
    pub captioner_init: u64,
    pub captioner_train: u64,
    pub captions: u64,
    pub gan: u64,
    pub probe: u64,
    pub fidelity: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        let d = |t| derive_seed(master, t);
        Seeds {
            master,
            data: d(streams::DATA),
            captioner_data: d(streams::CAPTIONER_DATA),
            captioner_init: d(streams::CAPTIONER_INIT),
            captioner_train: d(streams::CAPTIONER_TRAIN),
            captions: d(streams::CAPTIONS),
            gan: d(streams::GAN),
            probe: d(streams::PROBE),
            fidelity: d(streams::FIDELITY),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `config.cfg`, `config.json` and `seeds.json` into `dir`.
pub fn write_run_manifest(cfg: &RunConfig, seeds: &Seeds, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let map: serde_json::Map<String, serde_json::Value> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    write_json(&dir.join(CONFIG_JSON), &map)?;
    write_json(&dir.join(SEEDS_FILE), seeds)
}

pub fn dataset_config(cfg: &RunConfig, n: usize, diversity: f64, seed: u64) -> DatasetConfig {
    DatasetConfig {
        n,
        seed,
        diversity,
        k: cfg.usize("captions_per_image"),
        resolution: cfg.usize("resolution"),
        train_fraction: cfg.f64("train_fraction"),
    }
}

/// Rendered image exactly as it reads back from an 8-bit PNG.
fn png_exact(pixels: Vec<f32>) -> Vec<f32> {
    pixels.into_iter().map(|v| dequantize(quantize(v))).collect()
}

/// Train, validation and test examples for the captioner, kept apart from
/// every GAN dataset by their own seed stream.
pub struct CaptionerData {
    pub vocab: Vocabulary,
    pub train: Vec<CapExample>,
    pub val: Vec<CapExample>,
    pub test: Vec<CapExample>,
}

pub fn captioner_data(cfg: &RunConfig, seeds: &Seeds) -> Result<CaptionerData> {
    let (nt, nv, ns) = (cfg.usize("captioner_train_n"), cfg.usize("captioner_val_n"), cfg.usize("captioner_test_n"));
    let total = nt + nv + ns;
    if nt == 0 || nv == 0 || ns == 0 {
        return Err(Error::Config("captioner train, validation and test sets must be non-empty".into()));
    }
    let mut dc = dataset_config(cfg, total, cfg.f64("diversity"), seeds.captioner_data);
    dc.train_fraction = nt as f64 / total as f64;
    let records = generate_records(&dc)?;
    let train_caps: Vec<&str> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.captions.iter().map(String::as_str))
        .collect();
    let vocab = Vocabulary::build(&train_caps, cfg.usize("max_vocab"))?;
    let max_len = cfg.usize("max_caption_len");
    let mut examples = Vec::with_capacity(total);
    for r in &records {
        examples.push(CapExample {
            image: png_exact(render_pixels(&r.spec, dc.resolution)?),
            refs: r.captions.iter().map(|c| vocab.encode(c, max_len)).collect(),
        });
    }
    let test = examples.split_off(nt + nv);
    let val = examples.split_off(nt);
    Ok(CaptionerData { vocab, train: examples, val, test })
}

pub fn captioner_config(cfg: &RunConfig, vocab_size: usize) -> CaptionerConfig {
    CaptionerConfig {
        vocab_size,
        word_dim: cfg.usize("word_dim"),
        feature_dim: cfg.usize("feature_dim"),
        embed_dim: cfg.usize("embed_dim"),
        hidden: cfg.usize("lstm_hidden"),
        resolution: cfg.usize("resolution"),
        max_len: cfg.usize("max_caption_len"),
    }
}

pub fn captioner_train_config(cfg: &RunConfig) -> CaptionerTrainConfig {
    CaptionerTrainConfig {
        xe_epochs: cfg.usize("xe_epochs"),
        scst_epochs: cfg.usize("scst_epochs"),
        xe_lr: cfg.f64("xe_lr"),
        beta1: cfg.f64("xe_beta1"),
        scst_lr: cfg.f64("scst_lr"),
        temperature: cfg.f64("scst_temperature"),
        batch_size: cfg.usize("batch_size"),
        align_weight: cfg.f64("encoder_loss_weight"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionerSummary {
    pub seed: u64,
    pub untrained_val_cider: f64,
    pub best_xe_val_cider: f64,
    pub best_scst_val_cider: Option<f64>,
    pub test_cider_xe: f64,
    pub test_cider_final: f64,
}

pub struct CaptionerStage {
    pub model: Captioner<f32>,
    pub vocab: Vocabulary,
    pub history: CaptionerHistory,
    pub summary: CaptionerSummary,
    pub checkpoint: PathBuf,
}

/// Trains the captioner and writes `captioner.ckpt`, `vocab.jsonl`, the
/// per-epoch history and a summary with held-out CIDEr-D into `out`.
pub fn captioner_stage(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(&EpochLog)) -> Result<CaptionerStage> {
    let seeds = Seeds::new(cfg.require_seed()?);
    write_run_manifest(cfg, &seeds, out)?;
    let data = captioner_data(cfg, &seeds)?;
    let mc = captioner_config(cfg, data.vocab.len());
    mc.validate()?;
    let model = Captioner::new(mc, &mut ChaCha8Rng::seed_from_u64(seeds.captioner_init))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.captioner_train);
    let trained = train_captioner(model, &data.train, &data.val, &captioner_train_config(cfg), &mut rng, log)?;

    let test_cider_final = evaluate_cider(&trained.model, &data.test, &trained.idf)?;
    let final_snap = crate::captioner::snapshot(&trained.model);
    crate::captioner::restore(&trained.model, &trained.best_xe);
    let test_cider_xe = evaluate_cider(&trained.model, &data.test, &trained.idf)?;
    crate::captioner::restore(&trained.model, &final_snap);

    let h = &trained.history;
    let summary = CaptionerSummary {
        seed: seeds.master,
        untrained_val_cider: h.untrained_val,
        best_xe_val_cider: h.best_xe_val,
        best_scst_val_cider: h.best_scst_val,
        test_cider_xe,
        test_cider_final,
    };
    let checkpoint = save_captioner(&trained.model, &data.vocab, out)?;
    write_history(&out.join(CAPTIONER_HISTORY_FILE), h)?;
    write_json(&out.join(CAPTIONER_SUMMARY_FILE), &summary)?;
    Ok(CaptionerStage { model: trained.model, vocab: data.vocab, history: trained.history, summary, checkpoint })
}

fn write_history(path: &Path, h: &CaptionerHistory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut rows = vec!["phase,epoch,train_loss,val_cider,reward_sampled,reward_greedy".to_string()];
    rows.push(format!("untrained,0,,{},,", h.untrained_val));
    for e in &h.epochs {
        let (rs, rg) = e.rewards.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        rows.push(format!("{},{},{},{},{rs},{rg}", e.phase.name(), e.epoch, e.train_loss, e.val_cider));
    }
    for r in rows {
        writeln!(w, "{r}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Sentence embeddings for `captions`; `None` for captions with no tokens.
pub fn embed_captions(
    model: &Captioner<f32>,
    vocab: &Vocabulary,
    captions: &[String],
) -> Result<Vec<Option<Vec<f32>>>> {
    let max_len = model.cfg.max_len;
    let seqs: Vec<Vec<usize>> = captions.iter().map(|c| vocab.encode(c, max_len)).collect();
    let nonempty: Vec<Vec<usize>> = seqs.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut embedded = model.embed_sentences(&nonempty)?.into_iter();
    Ok(seqs.iter().map(|s| if s.is_empty() { None } else { embedded.next() }).collect())
}

fn require_captioner(cfg: &RunConfig, what: &str) -> Result<(Captioner<f32>, Vocabulary)> {
    let path = cfg.path("captioner_checkpoint").ok_or_else(|| {
        Error::Dependency(format!("{what} needs a trained captioner; set captioner_checkpoint (see train-captioner)"))
    })?;
    if !path.exists() {
        return Err(Error::Dependency(format!("{what} needs the captioner checkpoint {}", path.display())));
    }
    load_captioner(&path)
}

pub fn gan_config(cfg: &RunConfig, embed_dim: usize) -> Result<GanConfig> {
    let g = GanConfig {
        branches: cfg.usize("branches"),
        base: cfg.usize("base_resolution"),
        z_dim: cfg.usize("z_dim"),
        embed_dim,
        noise_mode: NoiseMode::parse(cfg.str("noise_mode"))?,
    };
    g.validate()?;
    if g.top_resolution() != cfg.usize("resolution") {
        return Err(Error::Config(format!(
            "the GAN's top scale is {}px but images are {}px",
            g.top_resolution(),
            cfg.usize("resolution")
        )));
    }
    Ok(g)
}

pub fn gan_train_config(cfg: &RunConfig, seed: u64) -> GanTrainConfig {
    GanTrainConfig {
        epochs: cfg.usize("gan_epochs"),
        batch_size: cfg.usize("batch_size"),
        lr: cfg.f64("gan_lr"),
        beta1: cfg.f64("gan_beta1"),
        seed,
        grid: cfg.usize("grid"),
    }
}

/// Per-image captions together with the model and vocabulary that embed them.
pub type CaptionSource<'a> = (&'a [Vec<String>], &'a Captioner<f32>, &'a Vocabulary);

/// Loads the train split of `manifest` and, when given, embeds its captions.
pub fn gan_table(manifest: &DatasetManifest, captions: Option<CaptionSource<'_>>) -> Result<CaptionTable> {
    let train: Vec<_> = manifest.split(Split::Train).collect();
    let ids: Vec<usize> = train.iter().map(|r| r.id).collect();
    let mut images = Vec::with_capacity(train.len());
    let mut failed = Vec::new();
    let mut first = None;
    for r in &train {
        match manifest.load_image(r) {
            Ok((_, px)) => images.push(px),
            Err(e) => {
                failed.push(r.id);
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Records { count: failed.len(), ids: failed, first: first.unwrap_or_default() });
    }
    let embeddings = match captions {
        Some((caps, model, vocab)) => {
            let flat: Vec<String> = caps.iter().flatten().cloned().collect();
            let mut embedded = embed_captions(model, vocab, &flat)?.into_iter();
            Some(caps.iter().map(|c| (0..c.len()).filter_map(|_| embedded.next().flatten()).collect()).collect())
        }
        None => None,
    };
    CaptionTable::new(ids, images, embeddings)
}

/// Loads the configured probe or trains a new one into `out/probe.ckpt`.
pub fn probe_stage(cfg: &RunConfig, seeds: &Seeds, out: &Path) -> Result<(Probe<f32>, Option<ProbeReport>)> {
    if let Some(path) = cfg.path("probe_checkpoint") {
        return Ok((load_probe(&path)?, None));
    }
    let pc = ProbeTrainConfig {
        resolution: cfg.usize("resolution"),
        train_n: cfg.usize("probe_train_n"),
        test_n: cfg.usize("probe_test_n"),
        epochs: cfg.usize("probe_epochs"),
        lr: cfg.f64("probe_lr"),
        batch_size: cfg.usize("batch_size"),
        seed: seeds.probe,
    };
    let (probe, report) = train_probe(&pc)?;
    save_probe(&probe, &out.join(PROBE_FILE))?;
    Ok((probe, Some(report)))
}

/// Detailed captions of the test scenes, used to condition fidelity samples.
pub fn fidelity_captions(manifest: &DatasetManifest, seed: u64) -> Vec<String> {
    manifest
        .split(Split::Test)
        .map(|r| caption_scene(&r.spec, 1.0, derive_seed(seed, r.id as u64), 1).remove(0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    UncondFull,
    UncondSubset,
    CondMachine,
    CondOracle,
    CondDegenerate,
}

impl Experiment {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "exp1_uncond_full" => Experiment::UncondFull,
            "exp2_uncond_subset" => Experiment::UncondSubset,
            "exp3_cond_machine" => Experiment::CondMachine,
            "exp4_cond_oracle" => Experiment::CondOracle,
            "exp5_cond_degenerate" => Experiment::CondDegenerate,
            other => return Err(Error::Config(format!("unknown experiment {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::UncondFull => "exp1_uncond_full",
            Experiment::UncondSubset => "exp2_uncond_subset",
            Experiment::CondMachine => "exp3_cond_machine",
            Experiment::CondOracle => "exp4_cond_oracle",
            Experiment::CondDegenerate => "exp5_cond_degenerate",
        }
    }

    pub fn conditional(self) -> bool {
        matches!(self, Experiment::CondMachine | Experiment::CondOracle | Experiment::CondDegenerate)
    }
}

pub struct ExperimentResult {
    pub dir: PathBuf,
    pub fidelity: FidelityReport,
    pub diversity: Option<CorpusDiversity>,
    pub probe: Option<ProbeReport>,
    pub last_step: Option<StepMetrics>,
}

/// Dataset build, optional captioning, GAN training and evaluation, with
/// every artifact written under `out`.
pub fn run_experiment(
    exp: Experiment,
    cfg: &RunConfig,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentResult> {
    let seeds = Seeds::new(cfg.require_seed()?);
    let captioner = if exp.conditional() { Some(require_captioner(cfg, exp.name())?) } else { None };
    write_run_manifest(cfg, &seeds, out)?;

    let (n, diversity) = match exp {
        Experiment::UncondFull => (cfg.usize("full_n"), cfg.f64("diversity")),
        Experiment::CondOracle => (cfg.usize("n"), 1.0),
        Experiment::CondDegenerate => (cfg.usize("n"), 0.0),
        _ => (cfg.usize("n"), cfg.f64("diversity")),
    };
    log(&format!("{}: building {n} scenes", exp.name()));
    let manifest = build_dataset(&dataset_config(cfg, n, diversity, seeds.data), &out.join("data"))?;
    let train_ids: Vec<usize> = manifest.split(Split::Train).map(|r| r.id).collect();

    let captions: Option<Vec<Vec<String>>> = match (exp, &captioner) {
        (Experiment::CondMachine, Some((model, vocab))) => {
            log(&format!("{}: captioning {} images", exp.name(), train_ids.len()));
            let records: Vec<_> = manifest.split(Split::Train).collect();
            let mode = CaptionMode::parse(cfg.str("caption_mode"))?;
            let file =
                caption_dataset(model, vocab, &manifest, &records, cfg.usize("caption_k"), mode, seeds.captions)?;
            write_captions(&out.join(captions::CAPTIONS_FILE), &file)?;
            Some(captions_for(&file, &train_ids)?)
        }
        (Experiment::CondOracle | Experiment::CondDegenerate, Some(_)) => {
            let file: Vec<CaptionRecord> = manifest
                .split(Split::Train)
                .map(|r| CaptionRecord { image_id: r.id, captions: r.captions.clone(), greedy: false })
                .collect();
            write_captions(&out.join(captions::CAPTIONS_FILE), &file)?;
            Some(file.into_iter().map(|r| r.captions).collect())
        }
        _ => None,
    };
    let diversity_report = match &captions {
        Some(c) => {
            let d = corpus_diversity(c)?;
            write_json(&out.join(DIVERSITY_FILE), &d)?;
            Some(d)
        }
        None => None,
    };

    let embed_dim = captioner.as_ref().map_or(0, |(m, _)| m.cfg.embed_dim);
    let gcfg = gan_config(cfg, embed_dim)?;
    let table = gan_table(
        &manifest,
        match (&captions, &captioner) {
            (Some(c), Some((m, v))) => Some((c.as_slice(), m, v)),
            _ => None,
        },
    )?;
    let tc = gan_train_config(cfg, seeds.gan);
    let steps_per_epoch = table.ids.len().div_ceil(tc.batch_size.max(1));
    let name = exp.name();
    let run = train_gan(gcfg, &table, &tc, out, false, &mut |step, m| {
        if (step + 1) % steps_per_epoch == 0 {
            log(&format!(
                "{name}: epoch {} loss_d {:?} loss_g {:.4} d_real {:?} d_fake {:?}",
                (step + 1) / steps_per_epoch,
                m.loss_d.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                m.loss_g,
                m.d_real.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
                m.d_fake.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
            ));
        }
    })?;

    let (probe, probe_report) = probe_stage(cfg, &seeds, out)?;
    let fid_caps = fidelity_captions(&manifest, seeds.fidelity);
    let fid_emb: Option<Vec<Vec<f32>>> = match &captioner {
        Some((m, v)) => Some(
            embed_captions(m, v, &fid_caps)?
                .into_iter()
                .map(|e| e.ok_or_else(|| Error::Contract("template caption encoded to nothing".into())))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let fidelity =
        evaluate_fidelity(&run.gan, &probe, &fid_caps, fid_emb.as_deref(), cfg.usize("fidelity_n"), seeds.fidelity)?;
    fidelity.write(&out.join(FIDELITY_FILE))?;
    log(&format!("{name}: wall_color fidelity {:?}", fidelity.accuracy("wall_color")));
    Ok(ExperimentResult {
        dir: out.to_path_buf(),
        fidelity,
        diversity: diversity_report,
        probe: probe_report,
        last_step: run.last,
    })
}
