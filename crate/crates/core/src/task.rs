//! The three composite addition tasks and their datasets.
//!
//! A sample is a sequence `[z, a1, a2]` of raw token values together with
//! its label. Anchors `a1`, `a2` are drawn from the anchor set, the key `z`
//! from a key domain that depends on the task (and, for the same-domain
//! variant, on the anchor pair).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw token value (positive integer).
pub type Token = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `z + a1 + a2` with `z` drawn from a fixed key set.
    Add,
    /// `z + a1 + a2` with `z` chosen so every label lands in the label set.
    AddSameDomain,
    /// `min Z + ((z + a1 + a2) mod |Z|)`.
    ModAdd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Add, TaskKind::AddSameDomain, TaskKind::ModAdd];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::AddSameDomain => "add-same",
            TaskKind::ModAdd => "mod",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(TaskKind::Add),
            "add-same" | "add_same" | "same" => Ok(TaskKind::AddSameDomain),
            "mod" | "mod-add" => Ok(TaskKind::ModAdd),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected add, add-same or mod)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Anchor set A, sorted.
    pub anchors: Vec<Token>,
    /// Key set Z, sorted. Also the label set of the modular task.
    pub keys: Vec<Token>,
    /// Label set Y, sorted. Only used by the same-domain task.
    pub labels: Vec<Token>,
    pub sample_count: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// A = {11..20}, Z = Y = {101..140}, N = 50000.
    pub fn defaults(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            anchors: (11..=20).collect(),
            keys: (101..=140).collect(),
            labels: (101..=140).collect(),
            sample_count: 50_000,
            seed,
        }
    }

    pub fn with_sample_count(mut self, n: usize) -> Self {
        self.sample_count = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check_set = |name: &str, set: &[Token]| -> Result<()> {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} set is empty")));
            }
            if set.contains(&0) {
                return Err(Error::Config(format!("{name} set contains 0")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} set must be sorted and distinct")));
            }
            Ok(())
        };
        check_set("anchor", &self.anchors)?;
        check_set("key", &self.keys)?;
        if self.kind == TaskKind::AddSameDomain {
            check_set("label", &self.labels)?;
            // Smallest key is min(Y) - 2·max(A); it must stay above every anchor.
            let max_a = *self.anchors.last().unwrap();
            if self.labels[0] <= 3 * max_a {
                return Err(Error::Config(format!(
                    "min label must exceed 3·max(A) = {} so keys and anchors stay disjoint",
                    3 * max_a
                )));
            }
        } else if self.anchors.iter().any(|a| self.keys.binary_search(a).is_ok()) {
            return Err(Error::Config("anchor and key sets must be disjoint".into()));
        }
        Ok(())
    }

    fn check_anchor(&self, a: Token) -> Result<()> {
        if self.anchors.binary_search(&a).is_err() {
            return Err(Error::Domain {
                value: a as i64,
                set: "anchor set A".into(),
            });
        }
        Ok(())
    }
}

/// The key domain for an anchor pair.
pub fn key_domain(kind: TaskKind, a1: Token, a2: Token, spec: &TaskSpec) -> Result<Vec<Token>> {
    spec.check_anchor(a1)?;
    spec.check_anchor(a2)?;
    Ok(match kind {
        TaskKind::Add | TaskKind::ModAdd => spec.keys.clone(),
        TaskKind::AddSameDomain => spec
            .labels
            .iter()
            .filter(|&&y| y > a1 + a2)
            .map(|&y| y - a1 - a2)
            .collect(),
    })
}

/// Applies the task function to `[z, a1, a2]`.
pub fn eval_task(kind: TaskKind, z: Token, a1: Token, a2: Token, spec: &TaskSpec) -> Result<Token> {
    let domain = key_domain(kind, a1, a2, spec)?;
    if domain.binary_search(&z).is_err() {
        let set = match kind {
            TaskKind::AddSameDomain => format!("key domain Y - {a1} - {a2}"),
            _ => "key set Z".to_string(),
        };
        return Err(Error::Domain {
            value: z as i64,
            set,
        });
    }
    let sum = z + a1 + a2;
    Ok(match kind {
        TaskKind::Add | TaskKind::AddSameDomain => sum,
        TaskKind::ModAdd => spec.keys[0] + sum % spec.keys.len() as Token,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// `[z, a1, a2]`
    pub seq: [Token; 3],
    pub label: Token,
}

/// Bijection between raw tokens and compact ids `0..len` in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<Token>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = Token>>(tokens: I) -> Self {
        let mut raw: Vec<Token> = tokens.into_iter().collect();
        raw.sort_unstable();
        raw.dedup();
        Self { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn to_id(&self, token: Token) -> Result<usize> {
        self.raw
            .binary_search(&token)
            .map_err(|_| Error::UnknownToken(token))
    }

    pub fn to_raw(&self, id: usize) -> Token {
        self.raw[id]
    }

    pub fn raw_tokens(&self) -> &[Token] {
        &self.raw
    }

    pub fn ids_of(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens.iter().map(|&t| self.to_id(t)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<Token, usize> = self.raw.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<Token, usize> = serde_json::from_str(s)?;
        let vocab = Self::from_tokens(map.keys().copied());
        for (t, id) in &map {
            if vocab.to_id(*t)? != *id {
                return Err(Error::Config(format!(
                    "vocabulary id {id} for token {t} is not in sorted order"
                )));
            }
        }
        Ok(vocab)
    }
}

/// A sample with tokens mapped to vocabulary ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub seq: [usize; 3],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn encoded(&self) -> Vec<EncodedSample> {
        self.samples
            .iter()
            .map(|s| EncodedSample {
                seq: s.seq.map(|t| self.vocab.to_id(t).expect("sample token in vocab")),
                label: self.vocab.to_id(s.label).expect("label in vocab"),
            })
            .collect()
    }

    /// Raw-token ids of the anchor set, in anchor order.
    pub fn anchor_ids(&self) -> Vec<usize> {
        self.spec
            .anchors
            .iter()
            .filter_map(|&a| self.vocab.to_id(a).ok())
            .collect()
    }

    /// Distinct labels that occur in the samples, sorted by raw value.
    pub fn label_tokens(&self) -> Vec<Token> {
        let mut l: Vec<Token> = self.samples.iter().map(|s| s.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Writes the `z,a1,a2,label` CSV with its comment header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        writeln!(w, "# task={} seed={} N={}", s.kind, s.seed, self.samples.len())?;
        writeln!(
            w,
            "# anchors={} keys={} labels={}",
            join(&s.anchors),
            join(&s.keys),
            join(&s.labels)
        )?;
        for sm in &self.samples {
            writeln!(w, "{},{},{},{}", sm.seq[0], sm.seq[1], sm.seq[2], sm.label)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut spec: Option<TaskSpec> = None;
        let mut samples = Vec::new();
        let mut offset = 0usize;
        for line in r.lines() {
            let line = line?;
            let here = offset;
            offset += line.len() + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(comment) = t.strip_prefix('#') {
                let kv = parse_header(comment);
                if let Some(kind) = kv.get("task") {
                    let kind: TaskKind = kind.parse()?;
                    let seed = kv
                        .get("seed")
                        .map(|s| s.parse::<u64>())
                        .transpose()
                        .map_err(|e| parse_err(here, e))?
                        .unwrap_or(0);
                    spec = Some(TaskSpec::defaults(kind, seed));
                }
                if let Some(sp) = spec.as_mut() {
                    for (key, field) in [("anchors", 0), ("keys", 1), ("labels", 2)] {
                        if let Some(v) = kv.get(key) {
                            let set = split_set(v).map_err(|e| parse_err(here, e))?;
                            match field {
                                0 => sp.anchors = set,
                                1 => sp.keys = set,
                                _ => sp.labels = set,
                            }
                        }
                    }
                }
                continue;
            }
            let fields: Vec<&str> = t.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    offset: here,
                    msg: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let mut v = [0 as Token; 4];
            for (k, f) in fields.iter().enumerate() {
                v[k] = f.trim().parse().map_err(|e| parse_err(here, e))?;
            }
            samples.push(Sample {
                seq: [v[0], v[1], v[2]],
                label: v[3],
            });
        }
        let mut spec = spec.ok_or_else(|| Error::Parse {
            offset: 0,
            msg: "missing `# task=` header".into(),
        })?;
        spec.sample_count = samples.len();
        let vocab = vocab_of(&samples);
        Ok(Dataset {
            spec,
            samples,
            vocab,
        })
    }
}

fn parse_err<E: fmt::Display>(offset: usize, e: E) -> Error {
    Error::Parse {
        offset,
        msg: e.to_string(),
    }
}

fn parse_header(comment: &str) -> BTreeMap<String, String> {
    comment
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn join(set: &[Token]) -> String {
    set.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
}

fn split_set(s: &str) -> std::result::Result<Vec<Token>, std::num::ParseIntError> {
    s.split(';').filter(|x| !x.is_empty()).map(str::parse).collect()
}

/// Sorted union of every token in the samples' sequences and labels.
pub fn vocab_of(samples: &[Sample]) -> Vocabulary {
    Vocabulary::from_tokens(samples.iter().flat_map(|s| s.seq.into_iter().chain([s.label])))
}

/// Every token the generative process can emit, as a vocabulary.
pub fn support_vocab(spec: &TaskSpec) -> Result<Vocabulary> {
    spec.validate()?;
    let mut tokens = Vec::new();
    for &a1 in &spec.anchors {
        for &a2 in &spec.anchors {
            for z in key_domain(spec.kind, a1, a2, spec)? {
                tokens.extend([z, a1, a2, eval_task(spec.kind, z, a1, a2, spec)?]);
            }
        }
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Draws `N` i.i.d. samples: ordered anchor pair uniform over A×A, key uniform
/// over the pair's key domain.
///
/// The generator is ChaCha8 seeded with `seed_from_u64(spec.seed)`; indices
/// are drawn as `u32` so output does not depend on pointer width.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let na = spec.anchors.len() as u32;
    let mut samples = Vec::with_capacity(spec.sample_count);
    for _ in 0..spec.sample_count {
        let a1 = spec.anchors[rng.random_range(0..na) as usize];
        let a2 = spec.anchors[rng.random_range(0..na) as usize];
        let domain = key_domain(spec.kind, a1, a2, spec)?;
        if domain.is_empty() {
            return Err(Error::Config(format!("empty key domain for ({a1}, {a2})")));
        }
        let z = domain[rng.random_range(0..domain.len() as u32) as usize];
        let label = eval_task(spec.kind, z, a1, a2, spec)?;
        samples.push(Sample {
            seq: [z, a1, a2],
            label,
        });
    }
    let vocab = vocab_of(&samples);
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        vocab,
    })
}
