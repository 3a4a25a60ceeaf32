//! Conditional fidelity: does the probe find, in generated images, the
//! attributes their conditioning captions mention?

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::parse::{parse_attributes, ATTRIBUTES, CLASSES};
use super::probe::Probe;
use crate::error::{io_err, Error, Result};
use crate::gan::{sample_images, Gan};

pub const FIDELITY_FILE: &str = "fidelity.json";
pub const MIN_SAMPLES: usize = 100;
/// Reports where more than this fraction of captions mention nothing are
/// flagged.
pub const MAX_EXCLUDED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeFidelity {
    pub name: &'static str,
    /// `None` when no sampled caption mentions the attribute.
    pub accuracy: Option<f64>,
    pub chance: f64,
    pub n_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub seed: u64,
    pub n_samples: usize,
    pub n_excluded: usize,
    pub unreliable: bool,
    pub attributes: Vec<AttributeFidelity>,
}

impl FidelityReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.attributes.iter().find(|a| a.name == name).and_then(|a| a.accuracy)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Scores predictions against the attributes each caption mentions.
pub fn score(captions: &[&str], predictions: &[[usize; 5]], seed: u64) -> FidelityReport {
    let mut hits = [0usize; 5];
    let mut scored = [0usize; 5];
    let mut excluded = 0;
    for (cap, pred) in captions.iter().zip(predictions) {
        let m = parse_attributes(cap);
        if m.is_empty() {
            excluded += 1;
            continue;
        }
        for (a, label) in m.labels().iter().enumerate() {
            if let Some(l) = label {
                scored[a] += 1;
                hits[a] += (pred[a] == *l) as usize;
            }
        }
    }
    let n = captions.len();
    FidelityReport {
        seed,
        n_samples: n,
        n_excluded: excluded,
        unreliable: excluded as f64 > MAX_EXCLUDED * n as f64,
        attributes: (0..5)
            .map(|a| AttributeFidelity {
                name: ATTRIBUTES[a],
                accuracy: (scored[a] > 0).then(|| hits[a] as f64 / scored[a] as f64),
                chance: 1.0 / CLASSES[a] as f64,
                n_scored: scored[a],
            })
            .collect(),
    }
}

/// Draws `n` (caption, noise) pairs, generates top-scale images and scores
/// them with the probe. `embeddings[i]` conditions on `captions[i]`; an
/// unconditional GAN ignores them.
pub fn evaluate_fidelity(
    gan: &Gan<f32>,
    probe: &Probe<f32>,
    captions: &[String],
    embeddings: Option<&[Vec<f32>]>,
    n: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(format!("fidelity needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if captions.is_empty() {
        return Err(Error::Config("fidelity needs at least one caption".into()));
    }
    let cfg = gan.cfg;
    if probe.resolution != cfg.top_resolution() {
        return Err(Error::Config(format!(
            "probe reads {}px images but the GAN's top scale is {}px",
            probe.resolution,
            cfg.top_resolution()
        )));
    }
    if cfg.conditional() && embeddings.is_none_or(|e| e.len() != captions.len()) {
        return Err(Error::Contract("a conditional GAN needs one embedding per caption".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..captions.len())).collect();
    let z: Vec<f32> = (0..n * cfg.z_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let c: Option<Vec<f32>> = match (cfg.conditional(), embeddings) {
        (true, Some(e)) => Some(picks.iter().flat_map(|&i| e[i].iter().copied()).collect()),
        _ => None,
    };
    let top = sample_images(gan, &z, c.as_deref(), n)?.pop().expect("at least one scale");
    let r = cfg.top_resolution();
    let images: Vec<&[f32]> = top.chunks(3 * r * r).collect();
    let preds = probe.predict(&images)?;
    let chosen: Vec<&str> = picks.iter().map(|&i| captions[i].as_str()).collect();
    Ok(score(&chosen, &preds, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chance_levels_are_exact() {
        let r = score(&["red walls"], &[[0; 5]], 1);
        let chance: Vec<f64> = r.attributes.iter().map(|a| a.chance).collect();
        assert_eq!(chance, vec![0.2, 0.2, 0.5, 1.0 / 3.0, 0.5]);
        assert_eq!(r.accuracy("wall_color"), Some(1.0));
        assert_eq!(r.accuracy("bed_color"), None);
    }

    #[test]
    fn unparseable_captions_are_excluded_and_flagged() {
        let caps = ["a bedroom with a bed", "a bedroom with a bed", "blue walls"];
        let r = score(&caps, &[[0; 5]; 3], 1);
        assert_eq!(r.n_excluded, 2);
        assert!(r.unreliable);
        assert_eq!(r.accuracy("wall_color"), Some(0.0));
    }
}
