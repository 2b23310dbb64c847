//! Vocabulary, tokenization, padded batches and the synthetic corpus.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased whitespace tokens.
pub fn split_tokens(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids followed by `words` in order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Tokens by descending frequency (ties lexicographic), at most
    /// `max_size` entries including the reserved ids.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Argument("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < NUM_RESERVED {
            return Err(Error::Argument(format!(
                "vocabulary size {max_size} is smaller than the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in split_tokens(line.as_ref()) {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Vocabulary::from_words(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Word tokens, excluding the reserved ids.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn tokenize(&self, line: &str) -> Vec<usize> {
        split_tokens(line).map(|t| self.id(&t)).collect()
    }

    /// Joins tokens with single spaces, stopping at the first EOS and
    /// skipping PAD/BOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_corpus<S: AsRef<str>>(&self, lines: &[S]) -> Vec<Vec<usize>> {
        lines.iter().map(|l| self.tokenize(l.as_ref())).collect()
    }

    /// Short content hash binding checkpoints to the vocabulary they were
    /// trained with.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One word per line; line `n` after the header holds id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "# reserved ids 0={} 1={} 2={} 3={}; word on line n below has id n+{}\n",
            RESERVED[0], RESERVED[1], RESERVED[2], RESERVED[3], NUM_RESERVED
        );
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(str::to_string);
        Vocabulary::from_words(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text)
    }
}

/// Non-blank lines of a UTF-8 corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Padded `[m × T_max]` id matrix; each row is `tokens ++ [EOS]` then PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl SequenceBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len() + 1).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(1);
        let mut ids = vec![PAD; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            let row = &mut ids[b * max_len..(b + 1) * max_len];
            let s = s.as_ref();
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS;
        }
        Ok(SequenceBatch { ids, lengths, max_len })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn id(&self, b: usize, t: usize) -> usize {
        self.ids[b * self.max_len + t]
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..(b + 1) * self.max_len]
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Column `t`: the ids every sequence holds at step `t`.
    pub fn step(&self, t: usize) -> Vec<usize> {
        (0..self.batch_size()).map(|b| self.id(b, t)).collect()
    }

    /// Decoder input at step `t`: BOS, then the previous ground-truth token.
    pub fn decoder_input(&self, t: usize) -> Vec<usize> {
        if t == 0 {
            vec![BOS; self.batch_size()]
        } else {
            self.step(t - 1)
        }
    }

    /// 1.0 where `t` is inside the sequence, 0.0 at padding.
    pub fn mask(&self, t: usize) -> Vec<f64> {
        self.lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Seed for the shuffle of a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits `corpus` into batches of at most `m` sequences, optionally in an
/// order shuffled by `shuffle_seed`.
pub fn batch_iter<'a>(
    corpus: &'a [Vec<usize>],
    m: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = SequenceBatch> + 'a> {
    if m == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(m).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| corpus[i].as_slice()).collect();
        SequenceBatch::from_sequences(&seqs).expect("chunks are non-empty")
    }))
}

/// Two-state sticky hidden Markov source over `vocab_size` word types.
///
/// State 0 prefers the first half of the vocabulary and state 1 the second.
#[derive(Clone, Debug)]
pub struct SynthSource {
    vocab_size: usize,
    max_len: usize,
    stay: f64,
    in_half: f64,
    /// Per-state emission weights within the preferred half.
    weights: [Vec<f64>; 2],
}

impl SynthSource {
    pub fn new(vocab_size: usize, max_len: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || max_len < 3 {
            return Err(Error::Argument(format!(
                "synthetic corpus needs vocab_size >= 2 and max_len >= 3, got {vocab_size}, {max_len}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = vocab_size / 2;
        let sizes = [half, vocab_size - half];
        let weights = sizes.map(|n| {
            // Zipf-like weights over a random permutation of the half.
            let mut ranks: Vec<usize> = (0..n).collect();
            ranks.shuffle(&mut rng);
            let w: Vec<f64> = ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        });
        Ok(SynthSource {
            vocab_size,
            max_len,
            stay: 0.9,
            in_half: 0.9,
            weights,
        })
    }

    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    fn half_range(&self, state: usize) -> std::ops::Range<usize> {
        let half = self.vocab_size / 2;
        if state == 0 {
            0..half
        } else {
            half..self.vocab_size
        }
    }

    fn emit(&self, state: usize, rng: &mut impl Rng) -> usize {
        let own = if rng.gen::<f64>() < self.in_half { state } else { 1 - state };
        let range = self.half_range(own);
        let mut u: f64 = rng.gen();
        for (i, w) in self.weights[own].iter().enumerate() {
            if u < *w {
                return range.start + i;
            }
            u -= w;
        }
        range.end - 1
    }

    /// Word indices and the hidden state that emitted each.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let len = rng.gen_range(3..=self.max_len);
        let mut state = rng.gen_range(0..2);
        let mut words = Vec::with_capacity(len);
        let mut states = Vec::with_capacity(len);
        for _ in 0..len {
            words.push(self.emit(state, rng));
            states.push(state);
            if rng.gen::<f64>() >= self.stay {
                state = 1 - state;
            }
        }
        (words, states)
    }

    pub fn sentence(&self, rng: &mut impl Rng) -> String {
        let (words, _) = self.sample(rng);
        words.into_iter().map(Self::word).collect::<Vec<_>>().join(" ")
    }
}

/// Seeded train and test corpora drawn from [`SynthSource`].
pub fn synth_corpus(
    n_train: usize,
    n_test: usize,
    vocab_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Argument("corpus sizes must be at least 1".into()));
    }
    let source = SynthSource::new(vocab_size, max_len, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let train = (0..n_train).map(|_| source.sentence(&mut rng)).collect();
    let test = (0..n_test).map(|_| source.sentence(&mut rng)).collect();
    Ok((train, test))
}

/// Perplexity on `test` of an add-one smoothed unigram model fitted on
/// `train`, counting the EOS after every sentence.
pub fn unigram_perplexity(train: &[Vec<usize>], test: &[Vec<usize>], vocab_size: usize) -> Result<f64> {
    let mut counts = vec![1.0; vocab_size];
    for s in train {
        for &t in s.iter().chain(std::iter::once(&EOS)) {
            counts[t] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in test {
        for &t in s.iter().chain(std::iter::once(&EOS)) {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("empty test corpus".into()));
    }
    Ok((nll / n as f64).exp())
}
