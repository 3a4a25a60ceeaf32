//! Caption metrics: CIDEr-D, BLEU and corpus diversity statistics.
//!
//! All functions are generic over the token type so they work on strings and
//! on vocabulary ids alike.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const MAX_N: usize = 4;

pub fn ngrams<T: Clone + Ord>(tokens: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

/// Document frequencies of 1..4-grams over a reference corpus, where a
/// document is the set of references of one image.
#[derive(Debug, Clone)]
pub struct CorpusIdf<T: Ord> {
    doc_freq: BTreeMap<Vec<T>, usize>,
    corpus_size: usize,
}

impl<T: Clone + Ord> CorpusIdf<T> {
    pub fn build(corpus: &[Vec<Vec<T>>]) -> Self {
        let mut doc_freq = BTreeMap::new();
        for refs in corpus {
            let mut seen = BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngrams(r, n).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        CorpusIdf { doc_freq, corpus_size: corpus.len() }
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn doc_freq(&self, gram: &[T]) -> usize {
        self.doc_freq.get(gram).copied().unwrap_or(0)
    }

    /// `ln(N / max(1, df))`; unseen n-grams get the largest weight `ln N`.
    pub fn idf(&self, gram: &[T]) -> f64 {
        (self.corpus_size.max(1) as f64).ln() - (self.doc_freq(gram).max(1) as f64).ln()
    }
}

struct TfIdf<T> {
    vecs: Vec<BTreeMap<Vec<T>, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn tfidf<T: Clone + Ord>(tokens: &[T], idf: &CorpusIdf<T>) -> TfIdf<T> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<Vec<T>, f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf as f64 * idf.idf(&g);
                (g, w)
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf { vecs, norms, length: tokens.len() }
}

/// CIDEr-D: clipped tf-idf cosine per n-gram order, Gaussian length
/// penalty, averaged over orders and references, scaled by 10.
pub fn cider_d<T: Clone + Ord>(candidate: &[T], refs: &[Vec<T>], idf: &CorpusIdf<T>) -> f64 {
    if candidate.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(candidate, idf);
    let mut total = 0.0;
    for r in refs {
        let rv = tfidf(r, idf);
        let delta = hyp.length as f64 - rv.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_n = 0.0;
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&r) = rv.vecs[n].get(g) {
                    dot += h.min(r) * r;
                }
            }
            if hyp.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                dot /= hyp.norms[n] * rv.norms[n];
            }
            per_n += dot * penalty;
        }
        total += per_n / MAX_N as f64;
    }
    10.0 * total / refs.len() as f64
}

fn closest_ref_len(cand_len: usize, ref_lens: impl Iterator<Item = usize>) -> usize {
    ref_lens.min_by_key(|&r| ((r as isize - cand_len as isize).unsigned_abs(), r)).unwrap_or(0)
}

fn bleu_from_parts(clipped: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let mut log_sum = 0.0;
    for (&c, &t) in clipped.iter().zip(totals) {
        if c == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (c as f64 / t as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_sum / clipped.len() as f64).exp()
}

/// BLEU of one candidate against its references: clipped n-gram precisions
/// up to `max_n`, geometric mean, brevity penalty against the closest
/// reference length. No smoothing.
pub fn bleu<T: Clone + Ord>(candidate: &[T], refs: &[Vec<T>], max_n: usize) -> f64 {
    assert!((1..=MAX_N).contains(&max_n), "max_n must lie in 1..=4, got {max_n}");
    if candidate.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut clipped = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngrams(candidate, n);
        let mut max_ref: BTreeMap<Vec<T>, usize> = BTreeMap::new();
        for r in refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        clipped.push(cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum());
        totals.push(cand.values().sum());
    }
    let r = closest_ref_len(candidate.len(), refs.iter().map(Vec::len));
    bleu_from_parts(&clipped, &totals, candidate.len(), r)
}

/// `|unique n-grams| / max(1, |n-grams|)` over the pooled corpus.
pub fn distinct_n<T: Clone + Ord>(captions: &[Vec<T>], n: usize) -> f64 {
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for c in captions {
        for (g, k) in ngrams(c, n) {
            total += k;
            unique.insert(g);
        }
    }
    unique.len() as f64 / total.max(1) as f64
}

/// Largest and second-largest count of one n-gram across captions.
#[derive(Clone, Copy)]
struct Top2 {
    best: usize,
    owner: usize,
    second: usize,
}

/// Mean over captions of BLEU-4 against all other captions.
///
/// For each n-gram only the two largest per-caption counts are kept, which
/// is enough to know the maximum over "all captions but one".
pub fn self_bleu<T: Clone + Ord>(captions: &[Vec<T>]) -> f64 {
    let m = captions.len();
    if m < 2 {
        return 0.0;
    }
    let mut tops: Vec<BTreeMap<Vec<T>, Top2>> = vec![BTreeMap::new(); MAX_N];
    let per_caption: Vec<Vec<BTreeMap<Vec<T>, usize>>> =
        captions.iter().map(|c| (1..=MAX_N).map(|n| ngrams(c, n)).collect()).collect();
    for (i, grams) in per_caption.iter().enumerate() {
        for (n, g) in grams.iter().enumerate() {
            for (gram, &c) in g {
                let t = tops[n].entry(gram.clone()).or_insert(Top2 { best: 0, owner: usize::MAX, second: 0 });
                if c > t.best {
                    t.second = t.best;
                    t.best = c;
                    t.owner = i;
                } else if c > t.second {
                    t.second = c;
                }
            }
        }
    }
    let max_len = captions.iter().map(Vec::len).max().unwrap_or(0);
    let mut len_hist = vec![0usize; max_len + 1];
    for c in captions {
        len_hist[c.len()] += 1;
    }

    let mut total = 0.0;
    for (i, cap) in captions.iter().enumerate() {
        if cap.is_empty() {
            continue;
        }
        let mut clipped = [0usize; MAX_N];
        let mut totals = [0usize; MAX_N];
        for n in 0..MAX_N {
            for (gram, &c) in &per_caption[i][n] {
                let t = tops[n][gram];
                let others = if t.owner == i { t.second } else { t.best };
                clipped[n] += c.min(others);
                totals[n] += c;
            }
        }
        len_hist[cap.len()] -= 1;
        let r = closest_ref_len(cap.len(), (0..=max_len).filter(|&l| len_hist[l] > 0));
        len_hist[cap.len()] += 1;
        total += bleu_from_parts(&clipped, &totals, cap.len(), r);
    }
    total / m as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// distinct-1 through distinct-4.
    pub distinct: [f64; 4],
    pub self_bleu: f64,
    pub n_captions: usize,
}

pub fn diversity<T: Clone + Ord>(captions: &[Vec<T>]) -> Result<DiversityReport> {
    if captions.len() < 2 {
        return Err(Error::Contract(format!("diversity needs at least 2 captions, got {}", captions.len())));
    }
    Ok(DiversityReport {
        distinct: [1, 2, 3, 4].map(|n| distinct_n(captions, n)),
        self_bleu: self_bleu(captions),
        n_captions: captions.len(),
    })
}

impl DiversityReport {
    pub fn rows(&self, run_id: &str, split: &str) -> Vec<MetricRow> {
        let mut rows: Vec<MetricRow> = self
            .distinct
            .iter()
            .enumerate()
            .map(|(i, &v)| MetricRow::new(run_id, split, &format!("distinct_{}", i + 1), v))
            .collect();
        rows.push(MetricRow::new(run_id, split, "self_bleu", self.self_bleu));
        rows.push(MetricRow::new(run_id, split, "n_captions", self.n_captions as f64));
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: &str, split: &str, metric: &str, value: f64) -> Self {
        MetricRow { run_id: run_id.into(), split: split.into(), metric: metric.into(), value }
    }
}

pub const METRIC_HEADER: &str = "run_id,split,metric,value";

/// Appends rows to a CSV file, writing the header when the file is new.
pub fn append_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRIC_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.run_id, r.split, r.metric, r.value));
    }
    f.write_all(text.as_bytes()).map_err(io_err(path))
}
