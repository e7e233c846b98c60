//! Probability signatures of a task dataset or a token corpus.
//!
//! For a token `x` and label `ν`:
//!
//! * `phi_y[x](ν)      = P(y = ν | x ∈ X)`
//! * `phi_X[x](x')     = P(x' ∈ X | x ∈ X)`
//! * `phi_X_given_y[x](ν, x') = P(x' ∈ X | x ∈ X, y = ν)`
//! * `varphi_X[ν](x)   = P(x ∈ X | y = ν)`
//!
//! `x ∈ X` is set membership: a sequence with a repeated anchor contains it
//! once. Each signature is available empirically (counted from a dataset)
//! and analytically (closed form over the task's generative process).
//!
//! The corpus signatures `phi_next`, `varphi_pre` and their sum `tilde_phi`
//! are position-pooled bigram conditionals.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::BigramCounts;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::task::{support_vocab, Dataset, TaskKind, TaskSpec, Token, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignatureKind {
    #[serde(rename = "phi_y")]
    PhiY,
    #[serde(rename = "phi_X")]
    PhiX,
    #[serde(rename = "phi_X_given_y")]
    PhiXGivenY,
    #[serde(rename = "varphi_X")]
    VarphiX,
}

impl SignatureKind {
    pub const ALL: [SignatureKind; 4] = [
        SignatureKind::PhiY,
        SignatureKind::PhiX,
        SignatureKind::PhiXGivenY,
        SignatureKind::VarphiX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignatureKind::PhiY => "phi_y",
            SignatureKind::PhiX => "phi_X",
            SignatureKind::PhiXGivenY => "phi_X_given_y",
            SignatureKind::VarphiX => "varphi_X",
        }
    }
}

impl fmt::Display for SignatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SignatureKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown signature `{s}`")))
    }
}

/// A probability vector over a vocabulary, labelled by raw token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureVector {
    pub tokens: Vec<Token>,
    pub values: Vec<f64>,
}

impl SignatureVector {
    pub fn zeros(tokens: &[Token]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            values: vec![0.0; tokens.len()],
        }
    }

    /// Value at a raw token, 0 when the token is not covered.
    pub fn get(&self, token: Token) -> f64 {
        self.tokens
            .binary_search(&token)
            .map_or(0.0, |i| self.values[i])
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// L1 distance over the union of both token sets.
    pub fn l1_distance(&self, other: &SignatureVector) -> f64 {
        union(&self.tokens, &other.tokens)
            .into_iter()
            .map(|t| (self.get(t) - other.get(t)).abs())
            .sum()
    }

    pub fn linf_distance(&self, other: &SignatureVector) -> f64 {
        union(&self.tokens, &other.tokens)
            .into_iter()
            .map(|t| (self.get(t) - other.get(t)).abs())
            .fold(0.0, f64::max)
    }

    /// Re-expresses the vector over `tokens`, filling missing entries with 0.
    pub fn aligned_to(&self, tokens: &[Token]) -> Vec<f64> {
        tokens.iter().map(|&t| self.get(t)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "token,value")?;
        for (t, v) in self.tokens.iter().zip(&self.values) {
            writeln!(w, "{t},{v:.12e}")?;
        }
        Ok(())
    }
}

/// Matrix signature: row `ν` (label), column `x'` (co-occurring token).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureMatrix {
    pub tokens: Vec<Token>,
    pub values: Matrix,
}

impl SignatureMatrix {
    pub fn row(&self, label: Token) -> Option<SignatureVector> {
        let i = self.tokens.binary_search(&label).ok()?;
        Some(SignatureVector {
            tokens: self.tokens.clone(),
            values: self.values.row(i).to_vec(),
        })
    }

    pub fn get(&self, label: Token, token: Token) -> f64 {
        match (
            self.tokens.binary_search(&label),
            self.tokens.binary_search(&token),
        ) {
            (Ok(i), Ok(j)) => self.values[(i, j)],
            _ => 0.0,
        }
    }

    /// Sum over rows of `weights(ν) · L1(row ν)`, aligned on the union of
    /// token sets.
    pub fn weighted_row_l1(&self, other: &SignatureMatrix, weights: &SignatureVector) -> f64 {
        let toks = union(&self.tokens, &other.tokens);
        toks.iter()
            .map(|&nu| {
                let w = weights.get(nu);
                if w == 0.0 {
                    return 0.0;
                }
                w * toks
                    .iter()
                    .map(|&x| (self.get(nu, x) - other.get(nu, x)).abs())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Flattens row-major; used for cosine comparisons between anchors.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.data().to_vec()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.values.write_labeled_csv(w, &self.tokens, &self.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Signature {
    Vector(SignatureVector),
    Matrix(SignatureMatrix),
}

impl Signature {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match self {
            Signature::Vector(v) => v.write_csv(w),
            Signature::Matrix(m) => m.write_csv(w),
        }
    }

    /// `{"tokens": [...], "values": [...]}`; matrices serialise their values
    /// as an array of rows.
    pub fn to_json(&self) -> Result<String> {
        let v = match self {
            Signature::Vector(v) => serde_json::json!({"tokens": v.tokens, "values": v.values}),
            Signature::Matrix(m) => {
                let rows: Vec<&[f64]> = (0..m.values.rows()).map(|i| m.values.row(i)).collect();
                serde_json::json!({"tokens": m.tokens, "values": rows})
            }
        };
        Ok(serde_json::to_string(&v)?)
    }

    pub fn into_vector(self) -> Option<SignatureVector> {
        match self {
            Signature::Vector(v) => Some(v),
            Signature::Matrix(_) => None,
        }
    }

    pub fn into_matrix(self) -> Option<SignatureMatrix> {
        match self {
            Signature::Matrix(m) => Some(m),
            Signature::Vector(_) => None,
        }
    }
}

fn union(a: &[Token], b: &[Token]) -> Vec<Token> {
    let mut u: Vec<Token> = a.iter().chain(b).copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// Membership and co-occurrence counts of a dataset, from which every
/// empirical signature and rate is read off.
#[derive(Clone, Debug)]
pub struct SignatureCounts {
    tokens: Vec<Token>,
    n: usize,
    n_in: Vec<u64>,
    n_out: Vec<u64>,
    /// `[x * V + ν]`: samples containing x with label ν.
    in_label: Vec<u64>,
    /// `[x * V + x']`: samples containing both.
    co: Vec<u64>,
    /// `[(x * V + ν) * V + x']`
    cond: Vec<u32>,
}

impl SignatureCounts {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let v = ds.vocab.len();
        let mut c = Self {
            tokens: ds.vocab.raw_tokens().to_vec(),
            n: ds.samples.len(),
            n_in: vec![0; v],
            n_out: vec![0; v],
            in_label: vec![0; v * v],
            co: vec![0; v * v],
            cond: vec![0; v * v * v],
        };
        for s in ds.encoded() {
            let mut members = s.seq.to_vec();
            members.sort_unstable();
            members.dedup();
            c.n_out[s.label] += 1;
            for &x in &members {
                c.n_in[x] += 1;
                c.in_label[x * v + s.label] += 1;
                for &x2 in &members {
                    c.co[x * v + x2] += 1;
                    c.cond[(x * v + s.label) * v + x2] += 1;
                }
            }
        }
        c
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    fn id(&self, token: Token) -> Result<usize> {
        self.tokens
            .binary_search(&token)
            .map_err(|_| Error::UnknownToken(token))
    }

    fn id_in(&self, token: Token) -> Result<usize> {
        let x = self.id(token)?;
        if self.n_in[x] == 0 {
            return Err(Error::NoSupport(token));
        }
        Ok(x)
    }

    pub fn phi_y(&self, token: Token) -> Result<SignatureVector> {
        let x = self.id_in(token)?;
        let v = self.tokens.len();
        let d = self.n_in[x] as f64;
        Ok(SignatureVector {
            tokens: self.tokens.clone(),
            values: (0..v).map(|nu| self.in_label[x * v + nu] as f64 / d).collect(),
        })
    }

    pub fn phi_x(&self, token: Token) -> Result<SignatureVector> {
        let x = self.id_in(token)?;
        let v = self.tokens.len();
        let d = self.n_in[x] as f64;
        Ok(SignatureVector {
            tokens: self.tokens.clone(),
            values: (0..v).map(|x2| self.co[x * v + x2] as f64 / d).collect(),
        })
    }

    pub fn phi_x_given_y(&self, token: Token) -> Result<SignatureMatrix> {
        let x = self.id_in(token)?;
        let v = self.tokens.len();
        let mut m = Matrix::zeros(v, v);
        for nu in 0..v {
            let d = self.in_label[x * v + nu];
            if d == 0 {
                continue;
            }
            let base = (x * v + nu) * v;
            for (x2, out) in m.row_mut(nu).iter_mut().enumerate() {
                *out = self.cond[base + x2] as f64 / d as f64;
            }
        }
        Ok(SignatureMatrix {
            tokens: self.tokens.clone(),
            values: m,
        })
    }

    pub fn varphi_x(&self, label: Token) -> Result<SignatureVector> {
        let nu = self.id(label)?;
        if self.n_out[nu] == 0 {
            return Err(Error::NoSupport(label));
        }
        let v = self.tokens.len();
        let d = self.n_out[nu] as f64;
        Ok(SignatureVector {
            tokens: self.tokens.clone(),
            values: (0..v).map(|x| self.in_label[x * v + nu] as f64 / d).collect(),
        })
    }

    /// `N_x^in / N`
    pub fn rate_in(&self, token: Token) -> Result<f64> {
        Ok(self.n_in[self.id(token)?] as f64 / self.n as f64)
    }

    /// `N_ν^out / N`
    pub fn rate_out(&self, label: Token) -> Result<f64> {
        Ok(self.n_out[self.id(label)?] as f64 / self.n as f64)
    }

    /// `N_{x,ν} / N` for every ν, as a vector over the vocabulary.
    pub fn rates_in_label(&self, token: Token) -> Result<SignatureVector> {
        let x = self.id(token)?;
        let v = self.tokens.len();
        Ok(SignatureVector {
            tokens: self.tokens.clone(),
            values: (0..v)
                .map(|nu| self.in_label[x * v + nu] as f64 / self.n as f64)
                .collect(),
        })
    }

    /// `N_x^in / N` for every token.
    pub fn rates_in(&self) -> SignatureVector {
        SignatureVector {
            tokens: self.tokens.clone(),
            values: self.n_in.iter().map(|&c| c as f64 / self.n as f64).collect(),
        }
    }

    pub fn signature(&self, which: SignatureKind, index: Token) -> Result<Signature> {
        Ok(match which {
            SignatureKind::PhiY => Signature::Vector(self.phi_y(index)?),
            SignatureKind::PhiX => Signature::Vector(self.phi_x(index)?),
            SignatureKind::PhiXGivenY => Signature::Matrix(self.phi_x_given_y(index)?),
            SignatureKind::VarphiX => Signature::Vector(self.varphi_x(index)?),
        })
    }
}

pub fn empirical_phi_y(ds: &Dataset, x: Token) -> Result<SignatureVector> {
    SignatureCounts::from_dataset(ds).phi_y(x)
}

pub fn empirical_phi_x(ds: &Dataset, x: Token) -> Result<SignatureVector> {
    SignatureCounts::from_dataset(ds).phi_x(x)
}

pub fn empirical_phi_x_given_y(ds: &Dataset, x: Token) -> Result<SignatureMatrix> {
    SignatureCounts::from_dataset(ds).phi_x_given_y(x)
}

pub fn empirical_varphi_x(ds: &Dataset, label: Token) -> Result<SignatureVector> {
    SignatureCounts::from_dataset(ds).varphi_x(label)
}

/// Discrete probability mass function over integers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pmf(BTreeMap<i64, f64>);

impl Pmf {
    pub fn uniform<I: IntoIterator<Item = i64>>(support: I) -> Self {
        let vals: Vec<i64> = support.into_iter().collect();
        let p = 1.0 / vals.len() as f64;
        let mut m = BTreeMap::new();
        for v in vals {
            *m.entry(v).or_insert(0.0) += p;
        }
        Pmf(m)
    }

    pub fn get(&self, k: i64) -> f64 {
        self.0.get(&k).copied().unwrap_or(0.0)
    }

    /// Distribution of the sum of independent draws.
    pub fn convolve(&self, other: &Pmf) -> Pmf {
        let mut m = BTreeMap::new();
        for (a, pa) in &self.0 {
            for (b, pb) in &other.0 {
                *m.entry(a + b).or_insert(0.0) += pa * pb;
            }
        }
        Pmf(m)
    }

    /// Distribution of `-X`.
    pub fn negate(&self) -> Pmf {
        Pmf(self.0.iter().map(|(k, p)| (-k, *p)).collect())
    }

    /// Distribution of `X mod m` (Euclidean remainder).
    pub fn modulo(&self, m: i64) -> Pmf {
        let mut out = BTreeMap::new();
        for (k, p) in &self.0 {
            *out.entry(k.rem_euclid(m)).or_insert(0.0) += p;
        }
        Pmf(out)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.0.iter().map(|(k, p)| (*k, *p))
    }
}

/// Sum distributions of the task's uniform variables.
///
/// `A` is uniform over anchors, `Z` over keys, `Y` over labels; every draw is
/// independent.
#[derive(Clone, Debug)]
pub struct ConvolutionTable {
    pub a_plus_z: Pmf,
    pub a_plus_a: Pmf,
    /// `(A + A) mod |Z|`
    pub a_plus_a_mod: Pmf,
    /// `(A + Z) mod |Z|`
    pub a_plus_z_mod: Pmf,
    pub z_mod: Pmf,
    pub a_plus_a_plus_z: Pmf,
    pub a_plus_a_plus_z_mod: Pmf,
    /// `Y - A`
    pub y_minus_a: Pmf,
    /// `Y - (A + A)`
    pub y_minus_aa: Pmf,
}

impl ConvolutionTable {
    pub fn new(spec: &TaskSpec) -> Self {
        let a = Pmf::uniform(spec.anchors.iter().map(|&x| x as i64));
        let z = Pmf::uniform(spec.keys.iter().map(|&x| x as i64));
        let y = Pmf::uniform(spec.labels.iter().map(|&x| x as i64));
        let m = spec.keys.len() as i64;
        let a_plus_a = a.convolve(&a);
        let a_plus_z = a.convolve(&z);
        let a_plus_a_plus_z = a_plus_a.convolve(&z);
        Self {
            a_plus_a_mod: a_plus_a.modulo(m),
            a_plus_z_mod: a_plus_z.modulo(m),
            z_mod: z.modulo(m),
            a_plus_a_plus_z_mod: a_plus_a_plus_z.modulo(m),
            y_minus_a: y.convolve(&a.negate()),
            y_minus_aa: y.convolve(&a_plus_a.negate()),
            a_plus_a,
            a_plus_z,
            a_plus_a_plus_z,
        }
    }
}

/// Closed-form signatures of a task's generative process.
///
/// With `n = |A|`, an anchor appears in a sample with probability
/// `(2n - 1) / n²`; given that, the other anchor of the ordered pair is `α`
/// itself with weight `1 / (2n - 1)` and any other anchor with weight
/// `2 / (2n - 1)`. Every formula below is that weighting applied to a
/// convolution-table lookup.
#[derive(Clone, Debug)]
pub struct AnalyticSignatures {
    spec: TaskSpec,
    table: ConvolutionTable,
    vocab: Vocabulary,
    keys: Vec<Token>,
}

impl AnalyticSignatures {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let vocab = support_vocab(spec)?;
        let keys = match spec.kind {
            TaskKind::Add | TaskKind::ModAdd => spec.keys.clone(),
            TaskKind::AddSameDomain => {
                let t = ConvolutionTable::new(spec);
                t.y_minus_aa
                    .iter()
                    .filter(|&(_, p)| p > 0.0)
                    .map(|(k, _)| k as Token)
                    .collect()
            }
        };
        Ok(Self {
            spec: spec.clone(),
            table: ConvolutionTable::new(spec),
            vocab,
            keys,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn table(&self) -> &ConvolutionTable {
        &self.table
    }

    fn n(&self) -> f64 {
        self.spec.anchors.len() as f64
    }

    fn mz(&self) -> i64 {
        self.spec.keys.len() as i64
    }

    fn min_z(&self) -> i64 {
        self.spec.keys[0] as i64
    }

    fn is_anchor(&self, t: Token) -> bool {
        self.spec.anchors.binary_search(&t).is_ok()
    }

    fn is_key(&self, t: Token) -> bool {
        self.keys.binary_search(&t).is_ok()
    }

    fn is_label(&self, t: Token) -> bool {
        self.p_label(t) > 0.0
    }

    /// Residue `(ν - min Z - s) mod |Z|` used by the modular task.
    fn residue(&self, nu: i64, s: i64) -> i64 {
        (nu - self.min_z() - s).rem_euclid(self.mz())
    }

    /// `P(y = ν | a1 + a2 = s)` for the tasks with an independent key.
    fn label_kernel(&self, s: i64, nu: i64) -> f64 {
        match self.spec.kind {
            TaskKind::Add => {
                let z = nu - s;
                if z > 0 && self.spec.keys.binary_search(&(z as Token)).is_ok() {
                    1.0 / self.mz() as f64
                } else {
                    0.0
                }
            }
            TaskKind::ModAdd => self.table.z_mod.get(self.residue(nu, s)),
            TaskKind::AddSameDomain => unreachable!("label is drawn directly"),
        }
    }

    /// `E_A[ P(y = ν | a1 + a2 = α + A) ]`
    fn mean_label_kernel(&self, alpha: i64, nu: i64) -> f64 {
        match self.spec.kind {
            TaskKind::Add => self.table.a_plus_z.get(nu - alpha),
            TaskKind::ModAdd => self.table.a_plus_z_mod.get(self.residue(nu, alpha)),
            TaskKind::AddSameDomain => unreachable!(),
        }
    }

    fn label_of(&self, z: i64, s: i64) -> i64 {
        match self.spec.kind {
            TaskKind::ModAdd => self.min_z() + (z + s).rem_euclid(self.mz()),
            _ => z + s,
        }
    }

    /// Multiplicity of `o` as the partner of `alpha` among ordered pairs.
    fn pair_weight(&self, alpha: Token, o: Token) -> f64 {
        if o == alpha {
            1.0
        } else {
            2.0
        }
    }

    fn y_uniform(&self, k: i64) -> f64 {
        if k > 0 && self.spec.labels.binary_search(&(k as Token)).is_ok() {
            1.0 / self.spec.labels.len() as f64
        } else {
            0.0
        }
    }

    /// `P(x ∈ X)`
    pub fn p_in(&self, x: Token) -> f64 {
        let n = self.n();
        if self.is_anchor(x) {
            (2.0 * n - 1.0) / (n * n)
        } else if self.is_key(x) {
            match self.spec.kind {
                TaskKind::AddSameDomain => self.table.y_minus_aa.get(x as i64),
                _ => 1.0 / self.mz() as f64,
            }
        } else {
            0.0
        }
    }

    /// `P(y = ν)`
    pub fn p_label(&self, nu: Token) -> f64 {
        let nu = nu as i64;
        match self.spec.kind {
            TaskKind::Add => self.table.a_plus_a_plus_z.get(nu),
            TaskKind::ModAdd => {
                if nu < self.min_z() || nu >= self.min_z() + self.mz() {
                    0.0
                } else {
                    self.table.a_plus_a_plus_z_mod.get(nu - self.min_z())
                }
            }
            TaskKind::AddSameDomain => self.y_uniform(nu),
        }
    }

    /// `P(x ∈ X, y = ν)`
    pub fn p_in_label(&self, x: Token, nu: Token) -> f64 {
        if self.p_label(nu) == 0.0 {
            return 0.0;
        }
        let n = self.n();
        let (xi, nui) = (x as i64, nu as i64);
        if self.is_anchor(x) {
            match self.spec.kind {
                TaskKind::AddSameDomain => self.p_in(x) * self.y_uniform(nui),
                _ => {
                    (2.0 * n * self.mean_label_kernel(xi, nui) - self.label_kernel(2 * xi, nui))
                        / (n * n)
                }
            }
        } else if self.is_key(x) {
            match self.spec.kind {
                TaskKind::Add => self.table.a_plus_a.get(nui - xi) / self.mz() as f64,
                TaskKind::ModAdd => {
                    self.table.a_plus_a_mod.get(self.residue(nui, xi)) / self.mz() as f64
                }
                TaskKind::AddSameDomain => self.y_uniform(nui) * self.table.a_plus_a.get(nui - xi),
            }
        } else {
            0.0
        }
    }

    /// `P(x ∈ X, x' ∈ X)` for distinct tokens.
    fn p_co(&self, x: Token, x2: Token) -> f64 {
        let n = self.n();
        match (self.is_anchor(x), self.is_anchor(x2)) {
            (true, true) => 2.0 / (n * n),
            (false, false) => 0.0,
            (a_first, _) => {
                let (alpha, z) = if a_first { (x, x2) } else { (x2, x) };
                if !self.is_key(z) {
                    return 0.0;
                }
                match self.spec.kind {
                    TaskKind::AddSameDomain => {
                        let (a, zi) = (alpha as i64, z as i64);
                        (2.0 * n * self.table.y_minus_a.get(zi + a) - self.y_uniform(zi + 2 * a))
                            / (n * n)
                    }
                    _ => self.p_in(alpha) / self.mz() as f64,
                }
            }
        }
    }

    /// `P(x' ∈ X, α ∈ X, y = ν)` for an anchor α and a distinct token x'.
    fn p_co_label(&self, alpha: Token, x2: Token, nu: Token) -> f64 {
        if self.p_label(nu) == 0.0 {
            return 0.0;
        }
        let n = self.n();
        let (a, nui) = (alpha as i64, nu as i64);
        if self.is_anchor(x2) {
            let pair = 2.0 / (n * n);
            match self.spec.kind {
                TaskKind::AddSameDomain => pair * self.y_uniform(nui),
                _ => pair * self.label_kernel(a + x2 as i64, nui),
            }
        } else if self.is_key(x2) {
            let z = x2 as i64;
            let per_key = match self.spec.kind {
                TaskKind::AddSameDomain => self.y_uniform(nui),
                _ => 1.0 / self.mz() as f64,
            };
            let weight: f64 = self
                .spec
                .anchors
                .iter()
                .filter(|&&o| self.label_of(z, a + o as i64) == nui)
                .map(|&o| self.pair_weight(alpha, o))
                .sum();
            weight * per_key / (n * n)
        } else {
            0.0
        }
    }

    pub fn phi_y(&self, x: Token) -> Result<SignatureVector> {
        let p = self.p_in(x);
        if p == 0.0 {
            return Err(Error::NoSupport(x));
        }
        let tokens = self.vocab.raw_tokens();
        Ok(SignatureVector {
            tokens: tokens.to_vec(),
            values: tokens.iter().map(|&nu| self.p_in_label(x, nu) / p).collect(),
        })
    }

    pub fn phi_x(&self, x: Token) -> Result<SignatureVector> {
        let p = self.p_in(x);
        if p == 0.0 {
            return Err(Error::NoSupport(x));
        }
        let tokens = self.vocab.raw_tokens();
        Ok(SignatureVector {
            tokens: tokens.to_vec(),
            values: tokens
                .iter()
                .map(|&x2| if x2 == x { 1.0 } else { self.p_co(x, x2) / p })
                .collect(),
        })
    }

    /// Only anchors are supported as the conditioning token.
    pub fn phi_x_given_y(&self, alpha: Token) -> Result<SignatureMatrix> {
        if !self.is_anchor(alpha) {
            return Err(Error::Unsupported(format!(
                "analytic phi_X_given_y is defined for anchors; {alpha} is not one"
            )));
        }
        let tokens = self.vocab.raw_tokens();
        let v = tokens.len();
        let mut m = Matrix::zeros(v, v);
        for (i, &nu) in tokens.iter().enumerate() {
            let d = self.p_in_label(alpha, nu);
            if d <= 0.0 {
                continue;
            }
            for (j, &x2) in tokens.iter().enumerate() {
                m[(i, j)] = if x2 == alpha {
                    1.0
                } else {
                    self.p_co_label(alpha, x2, nu) / d
                };
            }
        }
        Ok(SignatureMatrix {
            tokens: tokens.to_vec(),
            values: m,
        })
    }

    pub fn varphi_x(&self, nu: Token) -> Result<SignatureVector> {
        if !self.is_label(nu) {
            return Err(Error::NoSupport(nu));
        }
        let p = self.p_label(nu);
        let tokens = self.vocab.raw_tokens();
        Ok(SignatureVector {
            tokens: tokens.to_vec(),
            values: tokens.iter().map(|&x| self.p_in_label(x, nu) / p).collect(),
        })
    }

    /// `P(x ∈ X, y = ν)` for every ν: the `r_{x,ν}` rates.
    pub fn rates_in_label(&self, x: Token) -> SignatureVector {
        let tokens = self.vocab.raw_tokens();
        SignatureVector {
            tokens: tokens.to_vec(),
            values: tokens.iter().map(|&nu| self.p_in_label(x, nu)).collect(),
        }
    }

    /// `P(x ∈ X)` for every token.
    pub fn rates_in(&self) -> SignatureVector {
        let tokens = self.vocab.raw_tokens();
        SignatureVector {
            tokens: tokens.to_vec(),
            values: tokens.iter().map(|&x| self.p_in(x)).collect(),
        }
    }

    /// Labels with nonzero probability, sorted.
    pub fn labels(&self) -> Vec<Token> {
        self.vocab
            .raw_tokens()
            .iter()
            .copied()
            .filter(|&t| self.is_label(t))
            .collect()
    }

    pub fn signature(&self, which: SignatureKind, index: Token) -> Result<Signature> {
        Ok(match which {
            SignatureKind::PhiY => Signature::Vector(self.phi_y(index)?),
            SignatureKind::PhiX => Signature::Vector(self.phi_x(index)?),
            SignatureKind::PhiXGivenY => Signature::Matrix(self.phi_x_given_y(index)?),
            SignatureKind::VarphiX => Signature::Vector(self.varphi_x(index)?),
        })
    }
}

/// Signatures and rates of a task, either counted or exact.
pub trait TaskSignatures {
    fn phi_y(&self, x: Token) -> Result<SignatureVector>;
    fn phi_x(&self, x: Token) -> Result<SignatureVector>;
    fn phi_x_given_y(&self, x: Token) -> Result<SignatureMatrix>;
    fn varphi_x(&self, label: Token) -> Result<SignatureVector>;
    /// `r_x^in`, the fraction of sequences containing `x`.
    fn rate_in(&self, x: Token) -> Result<f64>;
    /// `r_{x,ν}` for every ν.
    fn rates_in_label(&self, x: Token) -> Result<SignatureVector>;
    /// `r_ν^out`, the fraction of sequences labelled `ν`.
    fn rate_out(&self, label: Token) -> Result<f64>;
    /// `r_x^in` for every token.
    fn rates_in(&self) -> SignatureVector;
}

impl TaskSignatures for SignatureCounts {
    fn phi_y(&self, x: Token) -> Result<SignatureVector> {
        SignatureCounts::phi_y(self, x)
    }
    fn phi_x(&self, x: Token) -> Result<SignatureVector> {
        SignatureCounts::phi_x(self, x)
    }
    fn phi_x_given_y(&self, x: Token) -> Result<SignatureMatrix> {
        SignatureCounts::phi_x_given_y(self, x)
    }
    fn varphi_x(&self, label: Token) -> Result<SignatureVector> {
        SignatureCounts::varphi_x(self, label)
    }
    fn rate_in(&self, x: Token) -> Result<f64> {
        SignatureCounts::rate_in(self, x)
    }
    fn rates_in_label(&self, x: Token) -> Result<SignatureVector> {
        SignatureCounts::rates_in_label(self, x)
    }
    fn rate_out(&self, label: Token) -> Result<f64> {
        SignatureCounts::rate_out(self, label)
    }
    fn rates_in(&self) -> SignatureVector {
        SignatureCounts::rates_in(self)
    }
}

impl TaskSignatures for AnalyticSignatures {
    fn phi_y(&self, x: Token) -> Result<SignatureVector> {
        AnalyticSignatures::phi_y(self, x)
    }
    fn phi_x(&self, x: Token) -> Result<SignatureVector> {
        AnalyticSignatures::phi_x(self, x)
    }
    fn phi_x_given_y(&self, x: Token) -> Result<SignatureMatrix> {
        AnalyticSignatures::phi_x_given_y(self, x)
    }
    fn varphi_x(&self, label: Token) -> Result<SignatureVector> {
        AnalyticSignatures::varphi_x(self, label)
    }
    fn rate_in(&self, x: Token) -> Result<f64> {
        Ok(self.p_in(x))
    }
    fn rates_in_label(&self, x: Token) -> Result<SignatureVector> {
        Ok(AnalyticSignatures::rates_in_label(self, x))
    }
    fn rate_out(&self, label: Token) -> Result<f64> {
        Ok(self.p_label(label))
    }
    fn rates_in(&self) -> SignatureVector {
        AnalyticSignatures::rates_in(self)
    }
}

pub fn analytic_signature(spec: &TaskSpec, which: SignatureKind, index: Token) -> Result<Signature> {
    AnalyticSignatures::new(spec)?.signature(which, index)
}

fn corpus_tokens(counts: &BigramCounts) -> Vec<Token> {
    (0..counts.vocab_size() as Token).collect()
}

/// `phi_next[s](s') = count(s → s') / count(s in a non-final position)`
pub fn corpus_phi_next(counts: &BigramCounts, s: Token) -> Result<SignatureVector> {
    let total = counts.outgoing(s);
    if total == 0 {
        return Err(Error::NoSupport(s));
    }
    let mut v = SignatureVector::zeros(&corpus_tokens(counts));
    for (next, c) in counts.successors(s) {
        v.values[next as usize] = c as f64 / total as f64;
    }
    Ok(v)
}

/// `varphi_pre[s](s') = count(s' → s) / count(s in a non-initial position)`
pub fn corpus_varphi_pre(counts: &BigramCounts, s: Token) -> Result<SignatureVector> {
    let total = counts.incoming(s);
    if total == 0 {
        return Err(Error::NoSupport(s));
    }
    let mut v = SignatureVector::zeros(&corpus_tokens(counts));
    for (prev, c) in counts.predecessors(s) {
        v.values[prev as usize] = c as f64 / total as f64;
    }
    Ok(v)
}

/// `phi_next[s] + varphi_pre[s]`, the signature driving a tied embedding.
pub fn tilde_phi(counts: &BigramCounts, s: Token) -> Result<SignatureVector> {
    let mut v = corpus_phi_next(counts, s)?;
    let pre = corpus_varphi_pre(counts, s)?;
    v.values.iter_mut().zip(&pre.values).for_each(|(a, b)| *a += b);
    Ok(v)
}
