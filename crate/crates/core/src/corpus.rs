//! Token streams, bigram counts and synthetic Markov corpora.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::task::Token;

/// Fixed-length token sequences over ids `0..vocab_size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    sequences: Vec<Vec<Token>>,
    vocab_size: usize,
}

impl TokenStream {
    pub fn new(sequences: Vec<Vec<Token>>, vocab_size: usize) -> Result<Self> {
        for seq in &sequences {
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Domain {
                    value: t as i64,
                    set: format!("token ids 0..{vocab_size}"),
                });
            }
        }
        Ok(Self {
            sequences,
            vocab_size,
        })
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// ASCII integers separated by whitespace.
    TextInt,
    /// Little-endian u32 ids, no header.
    BinaryU32,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-int" => Ok(CorpusFormat::TextInt),
            "binary-u32" => Ok(CorpusFormat::BinaryU32),
            _ => Err(Error::Config(format!(
                "unknown corpus format `{s}` (expected text-int or binary-u32)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub tokens_read: usize,
    pub sequences: usize,
    /// Trailing tokens that did not fill a whole sequence.
    pub dropped: usize,
}

pub fn parse_tokens(bytes: &[u8], format: CorpusFormat) -> Result<Vec<Token>> {
    match format {
        CorpusFormat::BinaryU32 => {
            if !bytes.len().is_multiple_of(4) {
                return Err(Error::Parse {
                    offset: bytes.len() - bytes.len() % 4,
                    msg: "binary-u32 input length is not a multiple of 4".into(),
                });
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        }
        CorpusFormat::TextInt => {
            let mut out = Vec::new();
            let mut i = 0;
            while i < bytes.len() {
                if bytes[i].is_ascii_whitespace() {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                let word = &bytes[start..i];
                let tok = std::str::from_utf8(word)
                    .ok()
                    .and_then(|w| w.parse::<u32>().ok())
                    .ok_or_else(|| Error::Parse {
                        offset: start,
                        msg: format!("malformed token `{}`", String::from_utf8_lossy(word)),
                    })?;
                out.push(tok);
            }
            Ok(out)
        }
    }
}

/// Splits a flat id list into sequences of length `seq_len`.
///
/// The vocabulary size is `max id + 1` unless `vocab_size` is given.
pub fn chunk_tokens(
    tokens: &[Token],
    seq_len: usize,
    vocab_size: Option<usize>,
) -> Result<(TokenStream, IngestReport)> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let full = tokens.len() / seq_len;
    let sequences: Vec<Vec<Token>> = tokens[..full * seq_len]
        .chunks_exact(seq_len)
        .map(<[Token]>::to_vec)
        .collect();
    let v = vocab_size.unwrap_or_else(|| tokens.iter().max().map_or(0, |&m| m as usize + 1));
    let report = IngestReport {
        tokens_read: tokens.len(),
        sequences: full,
        dropped: tokens.len() - full * seq_len,
    };
    Ok((TokenStream::new(sequences, v)?, report))
}

pub fn ingest(
    path: &Path,
    format: CorpusFormat,
    seq_len: usize,
) -> Result<(TokenStream, IngestReport)> {
    let bytes = fs::read(path)?;
    let tokens = parse_tokens(&bytes, format)?;
    chunk_tokens(&tokens, seq_len, None)
}

/// Sparse adjacent-pair counts within sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BigramCounts {
    vocab_size: usize,
    forward: BTreeMap<(Token, Token), u64>,
    backward: BTreeMap<(Token, Token), u64>,
    /// Non-final occurrences.
    outgoing: Vec<u64>,
    /// Non-initial occurrences.
    incoming: Vec<u64>,
}

impl BigramCounts {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            forward: BTreeMap::new(),
            backward: BTreeMap::new(),
            outgoing: vec![0; vocab_size],
            incoming: vec![0; vocab_size],
        }
    }

    pub fn add_sequence(&mut self, seq: &[Token]) {
        for w in seq.windows(2) {
            self.add_pair(w[0], w[1], 1);
        }
    }

    fn add_pair(&mut self, s: Token, t: Token, c: u64) {
        *self.forward.entry((s, t)).or_insert(0) += c;
        *self.backward.entry((t, s)).or_insert(0) += c;
        self.outgoing[s as usize] += c;
        self.incoming[t as usize] += c;
    }

    /// Adds another shard's counts; associative and commutative.
    pub fn merge(&mut self, other: &BigramCounts) {
        if other.vocab_size > self.vocab_size {
            self.vocab_size = other.vocab_size;
            self.outgoing.resize(other.vocab_size, 0);
            self.incoming.resize(other.vocab_size, 0);
        }
        for (&(s, t), &c) in &other.forward {
            self.add_pair(s, t, c);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, s: Token, t: Token) -> u64 {
        self.forward.get(&(s, t)).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn outgoing(&self, s: Token) -> u64 {
        self.outgoing.get(s as usize).copied().unwrap_or(0)
    }

    pub fn incoming(&self, s: Token) -> u64 {
        self.incoming.get(s as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.outgoing.iter().sum()
    }

    pub fn successors(&self, s: Token) -> impl Iterator<Item = (Token, u64)> + '_ {
        self.forward
            .range((s, 0)..=(s, Token::MAX))
            .map(|(&(_, t), &c)| (t, c))
    }

    pub fn predecessors(&self, t: Token) -> impl Iterator<Item = (Token, u64)> + '_ {
        self.backward
            .range((t, 0)..=(t, Token::MAX))
            .map(|(&(_, s), &c)| (s, c))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Token, Token, u64)> + '_ {
        self.forward.iter().map(|(&(s, t), &c)| (s, t, c))
    }

    /// Dense `V × V` count matrix, row = current token.
    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.vocab_size, self.vocab_size);
        for (s, t, c) in self.pairs() {
            m[(s as usize, t as usize)] = c as f64;
        }
        m
    }

    /// CSV `s,s_next,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "s,s_next,count")?;
        for (s, t, c) in self.pairs() {
            writeln!(w, "{s},{t},{c}")?;
        }
        Ok(())
    }
}

pub fn count_bigrams(stream: &TokenStream) -> BigramCounts {
    let mut c = BigramCounts::new(stream.vocab_size());
    for seq in stream.sequences() {
        c.add_sequence(seq);
    }
    c
}

/// Counts `shards` contiguous blocks of sequences on separate threads and
/// merges the results.
pub fn count_bigrams_sharded(stream: &TokenStream, shards: usize) -> BigramCounts {
    let seqs = stream.sequences();
    let per = seqs.len().div_ceil(shards.max(1)).max(1);
    let parts: Vec<BigramCounts> = std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(per)
            .map(|block| {
                scope.spawn(move || {
                    let mut c = BigramCounts::new(stream.vocab_size());
                    block.iter().for_each(|s| c.add_sequence(s));
                    c
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting thread panicked"))
            .collect()
    });
    let mut total = BigramCounts::new(stream.vocab_size());
    for p in &parts {
        total.merge(p);
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub transition: Matrix,
    pub initial: Vec<f64>,
    pub seq_len: usize,
    pub seq_count: usize,
    pub seed: u64,
}

impl MarkovSpec {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    /// Rows drawn from a symmetric Dirichlet(`concentration`), uniform initial
    /// distribution. Small concentrations give peaked, distinguishable rows.
    pub fn random(states: usize, concentration: f64, seq_len: usize, seq_count: usize, seed: u64) -> Result<Self> {
        if states == 0 {
            return Err(Error::Empty("Markov state set"));
        }
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::Config(format!("Dirichlet concentration {concentration}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut t = Matrix::zeros(states, states);
        for i in 0..states {
            let row = loop {
                let row: Vec<f64> = (0..states).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    break row.into_iter().map(|x| x / s).collect::<Vec<_>>();
                }
            };
            t.row_mut(i).copy_from_slice(&row);
        }
        Ok(Self {
            transition: t,
            initial: vec![1.0 / states as f64; states],
            seq_len,
            seq_count,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial.len();
        if n == 0 {
            return Err(Error::Empty("Markov initial distribution"));
        }
        if self.transition.shape() != (n, n) {
            return Err(Error::Shape {
                op: "markov spec",
                left: self.transition.shape(),
                right: (n, n),
            });
        }
        if self.seq_len == 0 {
            return Err(Error::Config("Markov sequence length must be positive".into()));
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|&p| p >= 0.0 && p.is_finite())
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if !stochastic(&self.initial) {
            return Err(Error::Config("initial distribution does not sum to 1".into()));
        }
        for i in 0..n {
            if !stochastic(self.transition.row(i)) {
                return Err(Error::Config(format!("transition row {i} does not sum to 1")));
            }
        }
        Ok(())
    }
}

pub fn generate_markov(spec: &MarkovSpec) -> Result<TokenStream> {
    spec.validate()?;
    let n = spec.states();
    let weighted = |w: &[f64]| {
        WeightedIndex::new(w).map_err(|e| Error::Config(format!("Markov weights: {e}")))
    };
    let init = weighted(&spec.initial)?;
    let rows = (0..n)
        .map(|i| weighted(spec.transition.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sequences = (0..spec.seq_count)
        .map(|_| {
            let mut s = init.sample(&mut rng);
            let mut seq = Vec::with_capacity(spec.seq_len);
            seq.push(s as Token);
            for _ in 1..spec.seq_len {
                s = rows[s].sample(&mut rng);
                seq.push(s as Token);
            }
            seq
        })
        .collect();
    TokenStream::new(sequences, n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopFrequent {
    pub tokens: Vec<Token>,
    /// Set when fewer than the requested number of distinct tokens exist.
    pub truncated: bool,
}

/// Most frequent tokens by total occurrence, ties broken by smaller id.
pub fn top_frequent(stream: &TokenStream, count: usize) -> Result<TopFrequent> {
    if count == 0 {
        return Err(Error::Config("top_frequent needs a count of at least 1".into()));
    }
    let mut freq = vec![0u64; stream.vocab_size()];
    for &t in stream.sequences().iter().flatten() {
        freq[t as usize] += 1;
    }
    let mut present: Vec<(Token, u64)> = freq
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0)
        .map(|(t, &c)| (t as Token, c))
        .collect();
    present.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = count > present.len();
    Ok(TopFrequent {
        tokens: present.into_iter().take(count).map(|(t, _)| t).collect(),
        truncated,
    })
}
