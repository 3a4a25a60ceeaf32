//! Tokenisation, vocabularies and the GRU sentence encoder that produces the
//! conditioning vector `c`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use capgan_tensor::{Float, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::nn::{Embedding, GruCell, NamedParams};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCTUATION: [char; 6] = ['.', ',', ';', ':', '!', '?'];

/// Lowercases, splits on whitespace and splits off punctuation marks.
pub fn tokenize(caption: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in caption.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    id: usize,
    token: String,
}

impl Vocabulary {
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { id_to_token, token_to_id }
    }

    /// Keeps the `max_size - 4` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S], max_size: usize) -> Result<Self> {
        if max_size < 5 {
            return Err(Error::Config(format!("vocabulary max_size must be at least 5, got {max_size}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(t, _)| !RESERVED.contains(&t.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Token ids of `caption`, truncated to `max_len`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Vec<usize> {
        tokenize(caption).iter().take(max_len).map(|t| self.id(t)).collect()
    }

    /// Joins the tokens of `ids`, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> =
            ids.iter().take_while(|&&i| i != EOS).filter(|&&i| i != PAD && i != BOS).map(|&i| self.token(i)).collect();
        detokenize(&words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for (id, token) in self.id_to_token.iter().enumerate() {
            let line = serde_json::to_string(&VocabLine { id, token: token.clone() }).expect("serializes");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let bad = |detail: String| Error::Format { what: "vocabulary", detail };
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VocabLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if v.id != tokens.len() {
                return Err(bad(format!("ids must be dense and ordered; expected {}, got {}", tokens.len(), v.id)));
            }
            tokens.push(v.token);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(bad(format!("reserved id {i} must be {r}")));
            }
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.token_to_id.len() != vocab.len() {
            return Err(bad("duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

/// Single-layer GRU over `BOS + tokens + EOS`; the final hidden state is the
/// sentence embedding. Word vectors come from a table shared with the
/// caption decoder.
pub struct SentenceEncoder<T: Float> {
    pub gru: GruCell<T>,
}

impl<T: Float> SentenceEncoder<T> {
    pub fn new<R: Rng + ?Sized>(word_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        SentenceEncoder { gru: GruCell::new(word_dim, embed_dim, rng) }
    }

    pub fn dim(&self) -> usize {
        self.gru.hidden
    }

    /// `[N, E]` embeddings of token sequences of possibly different lengths.
    pub fn encode_batch(&self, words: &Embedding<T>, seqs: &[Vec<usize>]) -> Result<Tensor<T>> {
        if seqs.is_empty() {
            return Err(Error::Contract("no sequences to encode".into()));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("sequence {i} is empty; cannot encode an empty caption")));
        }
        let n = seqs.len();
        let framed: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.iter().copied()).chain(std::iter::once(EOS)).collect())
            .collect();
        let steps = framed.iter().map(Vec::len).max().unwrap_or(0);
        let hd = self.dim();
        let mut h = Tensor::zeros(&[n, hd]);
        for t in 0..steps {
            let ids: Vec<usize> = framed.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = words.forward(&ids)?;
            let next = self.gru.forward(&x, &h)?;
            let live: Vec<bool> = framed.iter().map(|s| t < s.len()).collect();
            h = if live.iter().all(|&l| l) {
                next
            } else {
                // Finished sequences keep their state: h + m (h' - h).
                let mask: Vec<T> =
                    live.iter().flat_map(|&l| std::iter::repeat_n(if l { T::one() } else { T::zero() }, hd)).collect();
                let mask = Tensor::from_vec(&[n, hd], mask)?;
                h.add(&mask.mul(&next.sub(&h)?)?)?
            };
        }
        Ok(h)
    }

    pub fn encode(&self, words: &Embedding<T>, tokens: &[usize]) -> Result<Vec<T>> {
        Ok(self.encode_batch(words, &[tokens.to_vec()])?.to_vec())
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.gru.collect(&format!("{prefix}.gru"), out);
    }
}

/// Mean pairwise Euclidean distance.
pub fn embedding_spread(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Contract(format!("embedding_spread needs at least 2 embeddings, got {}", embeddings.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
