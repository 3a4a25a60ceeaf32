//! Machine captioning of a dataset and the caption JSONL format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use capgan_tensor::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{stack_images, Captioner};
use crate::error::{io_err, Error, Result};
use crate::metrics::{distinct_n, self_bleu};
use crate::scene::{derive_seed, DatasetManifest, Record};
use crate::text::{tokenize, Vocabulary};

pub const CAPTIONS_FILE: &str = "captions.jsonl";
const SAMPLE_STREAM: u64 = 0x6361_7073_616d_706c;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionMode {
    /// One greedy caption followed by `k - 1` samples.
    Greedy,
    /// `k` samples.
    Sample,
}

impl CaptionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(CaptionMode::Greedy),
            "sample" => Ok(CaptionMode::Sample),
            other => Err(Error::Config(format!("unknown caption mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: usize,
    pub captions: Vec<String>,
    /// Whether the first caption is the greedy decode.
    pub greedy: bool,
}

/// Captions every record with the trained model. Images that cannot be read
/// are collected and reported together.
pub fn caption_dataset(
    model: &Captioner<f32>,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    records: &[&Record],
    k: usize,
    mode: CaptionMode,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if k == 0 {
        return Err(Error::Config("caption_k must be at least 1".into()));
    }
    let res = model.cfg.resolution;
    let mut loaded = Vec::with_capacity(records.len());
    let mut failed = Vec::new();
    let mut first_err = None;
    for r in records {
        match manifest.load_image(r) {
            Ok((got, px)) if got == res => loaded.push(px),
            Ok((got, _)) => {
                failed.push(r.id);
                first_err.get_or_insert_with(|| format!("image {} is {got}x{got}, the captioner expects {res}", r.id));
            }
            Err(e) => {
                failed.push(r.id);
                first_err.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Records { count: failed.len(), ids: failed, first: first_err.unwrap_or_default() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM));
    let max_len = model.cfg.max_len;
    let mut out = Vec::with_capacity(records.len());
    for (chunk_recs, chunk_imgs) in records.chunks(64).zip(loaded.chunks(64)) {
        let imgs: Vec<&[f32]> = chunk_imgs.iter().map(Vec::as_slice).collect();
        let features = no_grad(|| model.encode_images(&stack_images(&imgs, res)?))?;
        let mut per_image: Vec<Vec<String>> = vec![Vec::with_capacity(k); chunk_recs.len()];
        let samples = match mode {
            CaptionMode::Greedy => {
                for (caps, d) in per_image.iter_mut().zip(model.decode_greedy(&features, max_len)?) {
                    caps.push(vocab.decode(&d.tokens));
                }
                k - 1
            }
            CaptionMode::Sample => k,
        };
        for _ in 0..samples {
            for (caps, d) in per_image.iter_mut().zip(model.decode_sample(&features, max_len, 1.0, &mut rng)?) {
                caps.push(vocab.decode(&d.tokens));
            }
        }
        for (r, captions) in chunk_recs.iter().zip(per_image) {
            out.push(CaptionRecord { image_id: r.id, captions, greedy: mode == CaptionMode::Greedy });
        }
    }
    Ok(out)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("caption record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "caption file",
            detail: format!("{}:{}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

/// Captions for `ids` in order. Every id must appear exactly once in the file.
pub fn captions_for(file: &[CaptionRecord], ids: &[usize]) -> Result<Vec<Vec<String>>> {
    let mut by_id: HashMap<usize, &CaptionRecord> = HashMap::new();
    for r in file {
        if by_id.insert(r.image_id, r).is_some() {
            return Err(Error::Format { what: "caption file", detail: format!("image {} appears twice", r.image_id) });
        }
    }
    let missing: Vec<usize> = ids.iter().copied().filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} image(s) have no captions: {missing:?}", missing.len())));
    }
    Ok(ids.iter().map(|id| by_id[id].captions.clone()).collect())
}

/// Diversity of a caption corpus. Self-BLEU is taken among the captions of
/// each image and averaged over images, so it measures how much the `k`
/// captions of one image differ from each other.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusDiversity {
    pub distinct: [f64; 4],
    pub self_bleu: f64,
    pub n_images: usize,
    pub n_captions: usize,
}

pub fn corpus_diversity(captions: &[Vec<String>]) -> Result<CorpusDiversity> {
    let tokenized: Vec<Vec<Vec<String>>> =
        captions.iter().map(|caps| caps.iter().map(|c| tokenize(c)).collect()).collect();
    let flat: Vec<Vec<String>> = tokenized.iter().flatten().cloned().collect();
    if flat.len() < 2 {
        return Err(Error::Contract("diversity needs at least two captions".into()));
    }
    let groups: Vec<&Vec<Vec<String>>> = tokenized.iter().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return Err(Error::Contract("self-BLEU needs an image with at least two captions".into()));
    }
    let self_bleu = groups.iter().map(|g| self_bleu(g)).sum::<f64>() / groups.len() as f64;
    Ok(CorpusDiversity {
        distinct: [1, 2, 3, 4].map(|n| distinct_n(&flat, n)),
        self_bleu,
        n_images: captions.len(),
        n_captions: flat.len(),
    })
}
