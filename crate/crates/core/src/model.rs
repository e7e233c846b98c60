//! Embedding models `F_lin` and `F_ffn` with hand-written gradients.
//!
//! Logits are `W_U σ(h)` with `h = Σ_{x ∈ X} W_E[:, x]` summed with
//! multiplicity, so a repeated token contributes twice.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    /// `σ(h) = h + h²/2`; a polynomial surrogate for gradient-theory checks.
    QuadraticTest,
}

impl Activation {
    pub fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Identity => h,
            Activation::Relu => h.max(0.0),
            Activation::QuadraticTest => h + 0.5 * h * h,
        }
    }

    /// Derivative; ReLU uses 0 at the kink.
    pub fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::QuadraticTest => 1.0 + h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::QuadraticTest => "quadratic-test",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" | "ffn" => Ok(Activation::Relu),
            "quadratic-test" => Ok(Activation::QuadraticTest),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

/// Initial weight variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScale {
    /// Every entry has variance `d^(-γ)`.
    Exponent(f64),
    /// Variance `1 / fan_in` per matrix: `1/V` for `W_E`, `1/d` for `W_U`.
    FanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `d × V`; column `x` is the embedding of token id `x`.
    pub w_e: Matrix,
    /// `V × d`; row `ν` is the unembedding of token id `ν`.
    pub w_u: Matrix,
    pub activation: Activation,
}

impl ModelParams {
    pub fn zeros(d: usize, vocab: usize, activation: Activation) -> Self {
        Self {
            w_e: Matrix::zeros(d, vocab),
            w_u: Matrix::zeros(vocab, d),
            activation,
        }
    }

    pub fn d(&self) -> usize {
        self.w_e.rows()
    }

    pub fn vocab(&self) -> usize {
        self.w_e.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_e.is_finite() && self.w_u.is_finite()
    }

    pub fn embedding(&self, x: usize) -> Vec<f64> {
        self.w_e.col(x)
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&x| x >= self.vocab()) {
            Some(&x) => Err(Error::UnknownToken(x as u32)),
            None => Ok(()),
        }
    }

    /// Hidden sum `h = Σ_x W_E[:, x]` with multiplicity.
    pub fn hidden(&self, seq: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(seq)?;
        let d = self.d();
        let v = self.vocab();
        let data = self.w_e.data();
        let mut h = vec![0.0; d];
        for &x in seq {
            for (i, hi) in h.iter_mut().enumerate() {
                *hi += data[i * v + x];
            }
        }
        Ok(h)
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = h.iter().map(|&z| self.activation.apply(z)).collect();
        (0..self.vocab()).map(|nu| dot(self.w_u.row(nu), &a)).collect()
    }
}

pub fn init_params(
    d: usize,
    vocab: usize,
    scale: InitScale,
    activation: Activation,
    seed: u64,
) -> Result<ModelParams> {
    if d == 0 || vocab == 0 {
        return Err(Error::Config("model width and vocabulary must be positive".into()));
    }
    let (var_e, var_u) = match scale {
        InitScale::Exponent(g) => {
            let v = (d as f64).powf(-g);
            (v, v)
        }
        InitScale::FanIn => (1.0 / vocab as f64, 1.0 / d as f64),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize, var: f64| -> Result<Matrix> {
        let normal = Normal::new(0.0, var.sqrt())
            .map_err(|e| Error::Config(format!("init variance {var}: {e}")))?;
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
    };
    let w_e = draw(d, vocab, var_e)?;
    let w_u = draw(vocab, d, var_u)?;
    Ok(ModelParams {
        w_e,
        w_u,
        activation,
    })
}

pub fn forward(params: &ModelParams, seq: &[usize]) -> Result<Vec<f64>> {
    let h = params.hidden(seq)?;
    Ok(params.logits_from_hidden(&h))
}

/// A sequence of token ids and its label id.
pub trait Example {
    fn tokens(&self) -> &[usize];
    fn label(&self) -> usize;
}

impl Example for crate::task::EncodedSample {
    fn tokens(&self) -> &[usize] {
        &self.seq
    }
    fn label(&self) -> usize {
        self.label
    }
}

impl Example for (Vec<usize>, usize) {
    fn tokens(&self) -> &[usize] {
        &self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_e: Matrix,
    pub w_u: Matrix,
}

impl Grads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            w_e: Matrix::zeros(p.d(), p.vocab()),
            w_u: Matrix::zeros(p.vocab(), p.d()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_e.is_finite() && self.w_u.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of argmax predictions equal to the label.
    pub accuracy: f64,
}

/// Per-sample forward quantities reused by the backward pass.
pub(crate) struct Pass {
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub loss: f64,
    pub correct: bool,
}

pub(crate) fn forward_pass(params: &ModelParams, seq: &[usize], label: usize) -> Pass {
    let data = params.w_e.data();
    let (d, v) = (params.d(), params.vocab());
    let mut h = vec![0.0; d];
    for &x in seq {
        for (i, hi) in h.iter_mut().enumerate() {
            *hi += data[i * v + x];
        }
    }
    let a: Vec<f64> = h.iter().map(|&z| params.activation.apply(z)).collect();
    let mut p: Vec<f64> = (0..v).map(|nu| dot(params.w_u.row(nu), &a)).collect();
    let (arg, max) = p
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &z)| if z > bm { (i, z) } else { (bi, bm) });
    let mut sum = 0.0;
    for z in p.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    p.iter_mut().for_each(|z| *z /= sum);
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    Pass {
        h,
        a,
        p,
        loss,
        correct: arg == label,
    }
}

/// Adds `weight · ∂ℓ/∂θ` for one sample into `grads`.
pub(crate) fn accumulate(
    params: &ModelParams,
    pass: &Pass,
    seq: &[usize],
    label: usize,
    weight: f64,
    grads: &mut Grads,
) {
    let (d, v) = (params.d(), params.vocab());
    let mut da = vec![0.0; d];
    let gu = grads.w_u.data_mut();
    for nu in 0..v {
        let g = weight * (pass.p[nu] - if nu == label { 1.0 } else { 0.0 });
        if g == 0.0 {
            continue;
        }
        let wrow = params.w_u.row(nu);
        let grow = &mut gu[nu * d..(nu + 1) * d];
        for i in 0..d {
            grow[i] += g * pass.a[i];
            da[i] += g * wrow[i];
        }
    }
    let ge = grads.w_e.data_mut();
    for i in 0..d {
        let dh = da[i] * params.activation.derivative(pass.h[i]);
        if dh == 0.0 {
            continue;
        }
        for &x in seq {
            ge[i * v + x] += dh;
        }
    }
}

/// Mean cross-entropy and its exact gradient over `batch`.
pub fn loss_and_grads<E: Example>(params: &ModelParams, batch: &[E]) -> Result<(BatchStats, Grads)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for e in batch {
        params.check_tokens(e.tokens())?;
        params.check_tokens(&[e.label()])?;
    }
    let mut grads = Grads::zeros_like(params);
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in batch {
        let pass = forward_pass(params, e.tokens(), e.label());
        loss += pass.loss;
        correct += pass.correct as usize;
        accumulate(params, &pass, e.tokens(), e.label(), w, &mut grads);
    }
    Ok((
        BatchStats {
            loss: loss * w,
            accuracy: correct as f64 * w,
        },
        grads,
    ))
}

/// Loss and accuracy without gradients.
pub fn evaluate<E: Example>(params: &ModelParams, samples: &[E]) -> Result<BatchStats> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in samples {
        params.check_tokens(e.tokens())?;
        let pass = forward_pass(params, e.tokens(), e.label());
        loss += pass.loss;
        correct += pass.correct as usize;
    }
    let n = samples.len() as f64;
    Ok(BatchStats {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::softmax;
    use rand::Rng;

    fn toy(activation: Activation, seed: u64) -> (ModelParams, Vec<(Vec<usize>, usize)>) {
        let p = init_params(8, 7, InitScale::Exponent(0.0), activation, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = (0..5)
            .map(|_| {
                let seq = (0..3).map(|_| rng.random_range(0..7)).collect();
                (seq, rng.random_range(0..7))
            })
            .collect();
        (p, batch)
    }

    fn loss_at(p: &ModelParams, batch: &[(Vec<usize>, usize)]) -> f64 {
        batch
            .iter()
            .map(|(s, y)| {
                let f = forward(p, s).unwrap();
                -softmax(&f).unwrap()[*y].ln()
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Central differences carry ~1e-11 absolute rounding noise at ε = 1e-5,
    /// so entries smaller than this are compared absolutely.
    const FD_FLOOR: f64 = 1e-4;

    fn slot(p: &mut ModelParams, which: usize) -> &mut [f64] {
        if which == 0 {
            p.w_e.data_mut()
        } else {
            p.w_u.data_mut()
        }
    }

    fn finite_difference_check(activation: Activation) {
        let (mut p, batch) = toy(activation, 3);
        let (_, g) = loss_and_grads(&p, &batch).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for which in 0..2 {
            let n = if which == 0 { p.w_e.data().len() } else { p.w_u.data().len() };
            for k in 0..n {
                let orig = slot(&mut p, which)[k];
                slot(&mut p, which)[k] = orig + eps;
                let up = loss_at(&p, &batch);
                slot(&mut p, which)[k] = orig - eps;
                let down = loss_at(&p, &batch);
                slot(&mut p, which)[k] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = if which == 0 { g.w_e.data()[k] } else { g.w_u.data()[k] };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-5, "{activation}: relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(Activation::Identity);
        finite_difference_check(Activation::QuadraticTest);
        // Standard-normal init keeps hidden sums away from the ReLU kink.
        finite_difference_check(Activation::Relu);
    }

    #[test]
    fn init_statistics() {
        let p = init_params(200, 200, InitScale::Exponent(0.8), Activation::Identity, 1).unwrap();
        let data = p.w_e.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let want = 200f64.powf(-0.8);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
        let q = init_params(200, 200, InitScale::Exponent(0.8), Activation::Identity, 1).unwrap();
        assert_eq!(p, q);
        let u = init_params(100, 100, InitScale::Exponent(0.0), Activation::Identity, 2).unwrap();
        let var = u.w_u.data().iter().map(|x| x * x).sum::<f64>() / 10_000.0;
        assert!((var - 1.0).abs() < 0.05);
        let f = init_params(50, 400, InitScale::FanIn, Activation::Identity, 2).unwrap();
        let ve = f.w_e.data().iter().map(|x| x * x).sum::<f64>() / 20_000.0;
        let vu = f.w_u.data().iter().map(|x| x * x).sum::<f64>() / 20_000.0;
        assert!((ve * 400.0 - 1.0).abs() < 0.05);
        assert!((vu * 50.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn forward_cases() {
        let mut p = init_params(4, 5, InitScale::Exponent(0.0), Activation::Identity, 0).unwrap();
        let w_u = p.w_u.clone();
        p.w_e = Matrix::zeros(4, 5);
        assert!(forward(&p, &[0, 1, 2]).unwrap().iter().all(|&z| z == 0.0));

        let q = init_params(4, 5, InitScale::Exponent(0.0), Activation::Identity, 0).unwrap();
        let f = forward(&q, &[3]).unwrap();
        assert_eq!(f, w_u.matvec(&q.w_e.col(3)).unwrap());

        // Repeated token counts twice.
        let f2 = forward(&q, &[3, 3]).unwrap();
        for (a, b) in f.iter().zip(&f2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }

        let mut r = q.clone();
        r.activation = Activation::Relu;
        r.w_e.data_mut().iter_mut().for_each(|x| *x = -x.abs() - 0.1);
        assert!(forward(&r, &[0, 1]).unwrap().iter().all(|&z| z == 0.0));
        assert!(matches!(forward(&q, &[9]), Err(Error::UnknownToken(9))));
    }

    #[test]
    fn uniform_loss() {
        let p = ModelParams::zeros(3, 108, Activation::Identity);
        let (stats, _) = loss_and_grads(&p, &[(vec![0, 1, 2], 5)]).unwrap();
        assert!((stats.loss - 108f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn absent_token_has_zero_gradient() {
        let (p, mut batch) = toy(Activation::Identity, 5);
        for (s, _) in batch.iter_mut() {
            s.iter_mut().for_each(|x| {
                if *x == 6 {
                    *x = 0
                }
            });
        }
        let (_, g) = loss_and_grads(&p, &batch).unwrap();
        assert!(g.w_e.col(6).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn relu_kink_subgradient_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::QuadraticTest.apply(2.0), 4.0);
        assert_eq!(Activation::QuadraticTest.derivative(2.0), 3.0);
    }

    #[test]
    fn empty_batch_errors() {
        let p = ModelParams::zeros(2, 3, Activation::Identity);
        let batch: Vec<(Vec<usize>, usize)> = vec![];
        assert!(loss_and_grads(&p, &batch).is_err());
    }
}
