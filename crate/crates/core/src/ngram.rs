//! Character trigram language model with interpolated Witten-Bell
//! smoothing.
//!
//! The vocabulary is the recognition alphabet plus one reserved
//! sentence-boundary marker used both as start padding and as the
//! predicted end token. Probabilities interpolate maximum-likelihood
//! trigram, bigram, and unigram estimates; each context weight is
//! `count / (count + distinct_following_types)`, which vanishes for
//! unseen contexts so the model backs off cleanly, and the unigram is
//! interpolated with the uniform distribution so every in-vocabulary
//! token keeps strictly positive probability.
//!
//! Model file: `NGM1` magic, little-endian tables with sorted keys, so
//! serialization is byte-deterministic.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate vocabulary token {0:?}")]
    DuplicateToken(String),
    #[error("out-of-vocabulary token {0:?}")]
    UnknownToken(String),
    #[error("text is empty")]
    EmptyText,
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token id; the boundary marker is the id one past the vocabulary.
type Tok = u32;

/// Smoothed character trigram model. Count tables are kept; smoothing
/// weights are deterministic functions of them, so a reloaded model
/// reproduces probabilities bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigramModel {
    vocab: Vec<String>,
    index: HashMap<String, Tok>,
    /// Unigram counts indexed by token id; slot `vocab.len()` is the
    /// boundary marker.
    uni: Vec<u64>,
    total: u64,
    big: HashMap<(Tok, Tok), u64>,
    tri: HashMap<(Tok, Tok, Tok), u64>,
    /// Per-context totals and distinct-successor counts.
    big_ctx: HashMap<Tok, (u64, u32)>,
    tri_ctx: HashMap<(Tok, Tok), (u64, u32)>,
}

impl TrigramModel {
    /// Accumulates counts over boundary-padded token sequences. Every
    /// sequence contributes one end-marker event; start markers only
    /// ever appear as context.
    pub fn train(vocab: &[String], corpus: &[Vec<String>]) -> Result<Self, NgramError> {
        if vocab.is_empty() {
            return Err(NgramError::EmptyVocabulary);
        }
        if corpus.is_empty() {
            return Err(NgramError::EmptyCorpus);
        }
        let mut index = HashMap::new();
        for (i, token) in vocab.iter().enumerate() {
            if index.insert(token.clone(), i as Tok).is_some() {
                return Err(NgramError::DuplicateToken(token.clone()));
            }
        }
        let boundary = vocab.len() as Tok;
        let mut model = Self {
            vocab: vocab.to_vec(),
            index,
            uni: vec![0; vocab.len() + 1],
            total: 0,
            big: HashMap::new(),
            tri: HashMap::new(),
            big_ctx: HashMap::new(),
            tri_ctx: HashMap::new(),
        };
        for seq in corpus {
            let mut ids = Vec::with_capacity(seq.len() + 3);
            ids.push(boundary);
            ids.push(boundary);
            for token in seq {
                let id = model
                    .index
                    .get(token)
                    .copied()
                    .ok_or_else(|| NgramError::UnknownToken(token.clone()))?;
                ids.push(id);
            }
            ids.push(boundary);
            for i in 2..ids.len() {
                model.record(ids[i - 2], ids[i - 1], ids[i]);
            }
        }
        Ok(model)
    }

    fn record(&mut self, u: Tok, v: Tok, w: Tok) {
        if *self.tri.entry((u, v, w)).or_insert(0) == 0 {
            self.tri_ctx.entry((u, v)).or_insert((0, 0)).1 += 1;
        }
        *self.tri.get_mut(&(u, v, w)).expect("just inserted") += 1;
        self.tri_ctx.entry((u, v)).or_insert((0, 0)).0 += 1;

        if *self.big.entry((v, w)).or_insert(0) == 0 {
            self.big_ctx.entry(v).or_insert((0, 0)).1 += 1;
        }
        *self.big.get_mut(&(v, w)).expect("just inserted") += 1;
        self.big_ctx.entry(v).or_insert((0, 0)).0 += 1;

        self.uni[w as usize] += 1;
        self.total += 1;
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Id of the sentence-boundary marker.
    pub fn boundary_id(&self) -> usize {
        self.vocab.len()
    }

    /// Full class count including the boundary marker.
    fn classes(&self) -> usize {
        self.vocab.len() + 1
    }

    fn token_id(&self, token: &str) -> Result<Tok, NgramError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| NgramError::UnknownToken(token.to_string()))
    }

    fn p_unigram(&self, w: Tok) -> f64 {
        let types = self.uni.iter().filter(|&&c| c > 0).count() as f64;
        let n = self.total as f64;
        let lambda = n / (n + types);
        lambda * self.uni[w as usize] as f64 / n + (1.0 - lambda) / self.classes() as f64
    }

    fn p_bigram(&self, v: Tok, w: Tok) -> f64 {
        let base = self.p_unigram(w);
        match self.big_ctx.get(&v) {
            None => base,
            Some(&(count, types)) => {
                let lambda = count as f64 / (count as f64 + types as f64);
                let ml = self.big.get(&(v, w)).copied().unwrap_or(0) as f64 / count as f64;
                lambda * ml + (1.0 - lambda) * base
            }
        }
    }

    fn p_trigram(&self, u: Tok, v: Tok, w: Tok) -> f64 {
        let base = self.p_bigram(v, w);
        match self.tri_ctx.get(&(u, v)) {
            None => base,
            Some(&(count, types)) => {
                let lambda = count as f64 / (count as f64 + types as f64);
                let ml = self.big_or_tri(u, v, w) / count as f64;
                lambda * ml + (1.0 - lambda) * base
            }
        }
    }

    fn big_or_tri(&self, u: Tok, v: Tok, w: Tok) -> f64 {
        self.tri.get(&(u, v, w)).copied().unwrap_or(0) as f64
    }

    /// Interpolated probability by token id; contexts shorter than two
    /// tokens are padded with the boundary marker on the left.
    pub fn prob_ids(&self, context: &[usize], word: usize) -> f64 {
        let boundary = self.boundary_id();
        let (u, v) = match context.len() {
            0 => (boundary, boundary),
            1 => (boundary, context[0]),
            n => (context[n - 2], context[n - 1]),
        };
        self.p_trigram(u as Tok, v as Tok, word as Tok)
    }

    /// Natural-log interpolated probability of `word` given up to two
    /// previous tokens (older first). Strictly negative finite.
    pub fn logprob(&self, word: &str, context: &[&str]) -> Result<f64, NgramError> {
        let w = self.token_id(word)? as usize;
        let tail = if context.len() > 2 { &context[context.len() - 2..] } else { context };
        let ids: Vec<usize> = tail
            .iter()
            .map(|t| self.token_id(t).map(|i| i as usize))
            .collect::<Result<_, _>>()?;
        Ok(self.prob_ids(&ids, w).ln())
    }

    /// `exp` of the mean negative log-likelihood per token, counting
    /// the end-marker event.
    pub fn perplexity(&self, tokens: &[String]) -> Result<f64, NgramError> {
        if tokens.is_empty() {
            return Err(NgramError::EmptyText);
        }
        let boundary = self.boundary_id();
        let mut ids = vec![boundary, boundary];
        for token in tokens {
            ids.push(self.token_id(token)? as usize);
        }
        ids.push(boundary);
        let mut nll = 0.0;
        for i in 2..ids.len() {
            nll -= self
                .p_trigram(ids[i - 2] as Tok, ids[i - 1] as Tok, ids[i] as Tok)
                .ln();
        }
        Ok((nll / (ids.len() - 2) as f64).exp())
    }

    /// Perplexity of a uniform model over the same class space.
    pub fn uniform_perplexity(&self) -> f64 {
        self.classes() as f64
    }

    /// Writes the versioned `NGM1` binary. Tables are emitted with
    /// sorted keys so equal models produce identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), NgramError> {
        let mut out = Vec::new();
        out.extend_from_slice(b"NGM1");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for token in &self.vocab {
            let bytes = token.as_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        for &count in &self.uni {
            out.extend_from_slice(&count.to_le_bytes());
        }
        let mut big: Vec<_> = self.big.iter().collect();
        big.sort_by_key(|(k, _)| **k);
        out.extend_from_slice(&(big.len() as u32).to_le_bytes());
        for (&(v, w), &count) in big {
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        let mut tri: Vec<_> = self.tri.iter().collect();
        tri.sort_by_key(|(k, _)| **k);
        out.extend_from_slice(&(tri.len() as u32).to_le_bytes());
        for (&(u, v, w), &count) in tri {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NgramError> {
        let bytes = fs::read(path)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], NgramError> {
            if *cursor + n > bytes.len() {
                return Err(NgramError::BadModel("truncated file".into()));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        let read_u32 = |cursor: &mut usize| -> Result<u32, NgramError> {
            let s = take(cursor, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let read_u64 = |cursor: &mut usize| -> Result<u64, NgramError> {
            let s = take(cursor, 8)?;
            Ok(u64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]))
        };
        if take(&mut cursor, 4)? != b"NGM1" {
            return Err(NgramError::BadModel("missing NGM1 magic".into()));
        }
        let version = read_u32(&mut cursor)?;
        if version != 1 {
            return Err(NgramError::BadModel(format!("unsupported version {version}")));
        }
        let vocab_len = read_u32(&mut cursor)? as usize;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = read_u32(&mut cursor)? as usize;
            let raw = take(&mut cursor, len)?;
            let token = std::str::from_utf8(raw)
                .map_err(|_| NgramError::BadModel("vocab token is not UTF-8".into()))?;
            vocab.push(token.to_string());
        }
        let mut uni = Vec::with_capacity(vocab_len + 1);
        for _ in 0..vocab_len + 1 {
            uni.push(read_u64(&mut cursor)?);
        }
        let mut big = HashMap::new();
        let mut big_ctx: HashMap<Tok, (u64, u32)> = HashMap::new();
        let n_big = read_u32(&mut cursor)? as usize;
        for _ in 0..n_big {
            let v = read_u32(&mut cursor)?;
            let w = read_u32(&mut cursor)?;
            let count = read_u64(&mut cursor)?;
            big.insert((v, w), count);
            let slot = big_ctx.entry(v).or_insert((0, 0));
            slot.0 += count;
            slot.1 += 1;
        }
        let mut tri = HashMap::new();
        let mut tri_ctx: HashMap<(Tok, Tok), (u64, u32)> = HashMap::new();
        let n_tri = read_u32(&mut cursor)? as usize;
        for _ in 0..n_tri {
            let u = read_u32(&mut cursor)?;
            let v = read_u32(&mut cursor)?;
            let w = read_u32(&mut cursor)?;
            let count = read_u64(&mut cursor)?;
            tri.insert((u, v, w), count);
            let slot = tri_ctx.entry((u, v)).or_insert((0, 0));
            slot.0 += count;
            slot.1 += 1;
        }
        if cursor != bytes.len() {
            return Err(NgramError::BadModel("trailing bytes".into()));
        }
        let mut index = HashMap::new();
        for (i, token) in vocab.iter().enumerate() {
            if index.insert(token.clone(), i as Tok).is_some() {
                return Err(NgramError::DuplicateToken(token.clone()));
            }
        }
        let total = uni.iter().sum();
        Ok(Self { vocab, index, uni, total, big, tri, big_ctx, tri_ctx })
    }
}

/// Splits a corpus line into single-character tokens, ignoring
/// whitespace.
pub fn char_tokens(line: &str) -> Vec<String> {
    line.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_string())
        .collect()
}

/// Reads a plain-text corpus, one token sequence per non-empty line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>, NgramError> {
    let text = fs::read_to_string(path)?;
    let corpus: Vec<Vec<String>> = text
        .lines()
        .map(char_tokens)
        .filter(|l| !l.is_empty())
        .collect();
    if corpus.is_empty() {
        return Err(NgramError::EmptyCorpus);
    }
    Ok(corpus)
}
