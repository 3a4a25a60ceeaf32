use std::path::{Path, PathBuf};

use capgan_tensor::{no_grad, AdamConfig, AdamState, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::{stack_images, Captioner, CaptionerConfig, MODEL_KIND};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, CorpusIdf};
use crate::nn::Module;
use crate::persist::checkpoint::Checkpoint;
use crate::text::Vocabulary;

pub const CHECKPOINT_FILE: &str = "captioner.ckpt";
pub const VOCAB_FILE: &str = "vocab.jsonl";

/// One image and its tokenised reference captions.
#[derive(Debug, Clone)]
pub struct CapExample {
    pub image: Vec<f32>,
    pub refs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Xe,
    Scst,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Xe => "xe",
            Phase::Scst => "scst",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cider: f64,
    /// Mean sampled and greedy rewards (self-critical phase only).
    pub rewards: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionerHistory {
    pub untrained_val: f64,
    pub epochs: Vec<EpochLog>,
    pub best_xe_val: f64,
    pub best_scst_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CaptionerTrainConfig {
    pub xe_epochs: usize,
    pub scst_epochs: usize,
    pub xe_lr: f64,
    pub beta1: f64,
    pub scst_lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub align_weight: f64,
}

pub struct TrainedCaptioner {
    /// Holds the best-validation parameters over both phases.
    pub model: Captioner<f32>,
    pub idf: CorpusIdf<usize>,
    pub history: CaptionerHistory,
    /// Best-validation parameters of each phase.
    pub best_xe: Vec<Vec<f32>>,
    pub best_scst: Option<Vec<Vec<f32>>>,
}

pub fn snapshot(model: &Captioner<f32>) -> Vec<Vec<f32>> {
    model.params().iter().map(|p| p.to_vec()).collect()
}

pub fn restore(model: &Captioner<f32>, snap: &[Vec<f32>]) {
    for (p, d) in model.params().iter().zip(snap) {
        p.set_data(d.clone()).expect("snapshot of the same model");
    }
}

/// Mean CIDEr-D of greedy captions.
pub fn evaluate_cider(model: &Captioner<f32>, examples: &[CapExample], idf: &CorpusIdf<usize>) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in examples.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|e| e.image.as_slice()).collect();
        let decoded = no_grad(|| -> Result<_> {
            let f = model.encode_images(&stack_images(&imgs, model.cfg.resolution)?)?;
            model.decode_greedy(&f, model.cfg.max_len)
        })?;
        total += decoded.iter().zip(chunk).map(|(d, e)| cider_d(&d.tokens, &e.refs, idf)).sum::<f64>();
    }
    Ok(total / examples.len() as f64)
}

fn features_for_refs(features: &Tensor<f32>, batch: &[&CapExample]) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let mut rows = Vec::new();
    let mut seqs = Vec::new();
    for (i, e) in batch.iter().enumerate() {
        for r in &e.refs {
            rows.push(i);
            seqs.push(r.clone());
        }
    }
    Ok((features.gather_rows(&rows)?, seqs))
}

/// Cross-entropy epochs followed by self-critical epochs. `log` sees every
/// epoch as it finishes.
pub fn train_captioner<R: Rng>(
    model: Captioner<f32>,
    train: &[CapExample],
    val: &[CapExample],
    tc: &CaptionerTrainConfig,
    rng: &mut R,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedCaptioner> {
    if train.is_empty() {
        return Err(Error::Config("captioner training set is empty".into()));
    }
    if let Some(i) = train.iter().position(|e| e.refs.is_empty() || e.refs.iter().any(Vec::is_empty)) {
        return Err(Error::Config(format!("training example {i} has a missing or empty caption")));
    }
    let bs = tc.batch_size.max(1);
    let corpus: Vec<Vec<Vec<usize>>> = train.iter().map(|e| e.refs.clone()).collect();
    let idf = CorpusIdf::build(&corpus);
    let params = model.params();
    let res = model.cfg.resolution;

    let mut history = CaptionerHistory { untrained_val: evaluate_cider(&model, val, &idf)?, ..Default::default() };
    let mut best_xe = (f64::NEG_INFINITY, snapshot(&model));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut adam = AdamState::new(&params, AdamConfig::new(tc.xe_lr, tc.beta1))?;
    for epoch in 0..tc.xe_epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&CapExample> = chunk.iter().map(|&i| &train[i]).collect();
            let imgs: Vec<&[f32]> = batch.iter().map(|e| e.image.as_slice()).collect();
            let f = model.encode_images(&stack_images(&imgs, res)?)?;
            let (rep, seqs) = features_for_refs(&f, &batch)?;
            let xe = model.xe_loss_from_features(&rep, &seqs)?;
            let loss = xe.add(&model.alignment_loss(&rep, &seqs)?.scale(tc.align_weight))?;
            model.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
            loss_sum += xe.item() as f64;
            batches += 1;
        }
        let val_cider = evaluate_cider(&model, val, &idf)?;
        if val_cider > best_xe.0 {
            best_xe = (val_cider, snapshot(&model));
        }
        let entry =
            EpochLog { phase: Phase::Xe, epoch, train_loss: loss_sum / batches as f64, val_cider, rewards: None };
        log(&entry);
        history.epochs.push(entry);
    }
    if tc.xe_epochs == 0 {
        best_xe.0 = history.untrained_val;
    }
    history.best_xe_val = best_xe.0;
    restore(&model, &best_xe.1);

    let mut best_scst: Option<(f64, Vec<Vec<f32>>)> = None;
    if tc.scst_epochs > 0 {
        let mut adam = AdamState::new(&params, AdamConfig::new(tc.scst_lr, tc.beta1))?;
        for epoch in 0..tc.scst_epochs {
            order.shuffle(rng);
            let (mut loss_sum, mut rs_sum, mut rg_sum, mut batches) = (0.0, 0.0, 0.0, 0);
            for chunk in order.chunks(bs) {
                let batch: Vec<&CapExample> = chunk.iter().map(|&i| &train[i]).collect();
                let imgs: Vec<&[f32]> = batch.iter().map(|e| e.image.as_slice()).collect();
                let refs: Vec<Vec<Vec<usize>>> = batch.iter().map(|e| e.refs.clone()).collect();
                let f = model.encode_images(&stack_images(&imgs, res)?)?;
                let out = model.scst_loss(&f, &refs, &idf, tc.temperature, rng)?;
                let (rep, seqs) = features_for_refs(&f, &batch)?;
                let loss = out.loss.add(&model.alignment_loss(&rep, &seqs)?.scale(tc.align_weight))?;
                model.zero_grad();
                loss.backward()?;
                adam.step(&params)?;
                loss_sum += out.loss.item() as f64;
                rs_sum += out.reward_sampled.iter().sum::<f64>() / chunk.len() as f64;
                rg_sum += out.reward_greedy.iter().sum::<f64>() / chunk.len() as f64;
                batches += 1;
            }
            let val_cider = evaluate_cider(&model, val, &idf)?;
            if best_scst.as_ref().is_none_or(|(b, _)| val_cider > *b) {
                best_scst = Some((val_cider, snapshot(&model)));
            }
            let nb = batches as f64;
            let entry = EpochLog {
                phase: Phase::Scst,
                epoch,
                train_loss: loss_sum / nb,
                val_cider,
                rewards: Some((rs_sum / nb, rg_sum / nb)),
            };
            log(&entry);
            history.epochs.push(entry);
        }
    }
    history.best_scst_val = best_scst.as_ref().map(|(v, _)| *v);
    let final_snap = match &best_scst {
        Some((v, s)) if *v >= best_xe.0 => s,
        _ => &best_xe.1,
    };
    restore(&model, final_snap);
    Ok(TrainedCaptioner { model, idf, history, best_xe: best_xe.1, best_scst: best_scst.map(|(_, s)| s) })
}

pub fn save_captioner(model: &Captioner<f32>, vocab: &Vocabulary, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let mut ck = Checkpoint::new();
    ck.set_kind(MODEL_KIND);
    for (k, v) in CaptionerConfig::META_KEYS.iter().zip(model.cfg.values()) {
        ck.set_meta(k, v);
    }
    ck.push_params(&model.named_params());
    let path = dir.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(path)
}

/// Loads a captioner checkpoint and the vocabulary stored next to it.
pub fn load_captioner(path: &Path) -> Result<(Captioner<f32>, Vocabulary)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(MODEL_KIND)?;
    let mut values = [0usize; 7];
    for (v, k) in values.iter_mut().zip(CaptionerConfig::META_KEYS) {
        *v = ck.meta(k)?;
    }
    let cfg = CaptionerConfig::from_values(values);
    let vocab_path = path.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Format {
            what: "captioner",
            detail: format!("vocabulary has {} tokens but the model expects {}", vocab.len(), cfg.vocab_size),
        });
    }
    // Weights are overwritten, so the initialisation rng does not matter.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = Captioner::new(cfg, &mut rng)?;
    ck.load_params(&model.named_params())?;
    Ok((model, vocab))
}
