//! Gradient-flow predictions from probability signatures.
//!
//! The exact decompositions regroup the full-dataset gradient by label or
//! by input token. The predictions keep only the signature-driven leading
//! terms and are compared to the measured negative gradient by direction.

use serde::{Deserialize, Serialize};

use crate::corpus::BigramCounts;
use crate::error::{Error, Result};
use crate::linalg::{cosine, norm, softmax};
use crate::model::{forward_pass, loss_and_grads, Activation, Grads, ModelParams};
use crate::signature::{corpus_phi_next, corpus_varphi_pre, SignatureVector, TaskSignatures};
use crate::task::{EncodedSample, Token, Vocabulary};
use crate::train::{bigram_loss_and_grads, tie_gradients};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    EmbColumn(Token),
    UnembRow(Token),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Prop1,
    Prop2,
    Cor1,
    Cor2,
    Cor3,
    Cor4,
}

/// Sign of the `(1/V) W_U W_E ϕ^X` term in the embedding prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignVariant {
    /// `ϕ^y − (1/V) W_U W_E ϕ^X`
    MainText,
    /// `ϕ^y + (1/V) W_U W_E ϕ^X`
    AppendixProof,
}

impl SignVariant {
    pub const BOTH: [SignVariant; 2] = [SignVariant::MainText, SignVariant::AppendixProof];

    fn factor(self) -> f64 {
        match self {
            SignVariant::MainText => -1.0,
            SignVariant::AppendixProof => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermNorm {
    pub name: String,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradPrediction {
    pub target: Target,
    pub basis: Basis,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sign_variant: Option<SignVariant>,
    pub predicted: Vec<f64>,
    /// Norms of the individual terms summed into `predicted`.
    pub terms: Vec<TermNorm>,
}

impl GradPrediction {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cosine: f64,
    /// `‖pred − measured‖ / ‖measured‖`
    pub rel_norm_error: f64,
    pub measured_norm: f64,
    pub predicted_norm: f64,
    pub term_norms: Vec<TermNorm>,
}

pub fn compare(prediction: &GradPrediction, measured: &[f64]) -> Result<AlignmentReport> {
    compare_vectors(&prediction.predicted, measured).map(|mut r| {
        r.term_norms = prediction.terms.clone();
        r
    })
}

pub fn compare_vectors(predicted: &[f64], measured: &[f64]) -> Result<AlignmentReport> {
    if predicted.len() != measured.len() {
        return Err(Error::Shape {
            op: "compare",
            left: (predicted.len(), 1),
            right: (measured.len(), 1),
        });
    }
    let mn = norm(measured);
    if mn == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    let diff: Vec<f64> = predicted.iter().zip(measured).map(|(p, m)| p - m).collect();
    let pn = norm(predicted);
    let cos = if pn == 0.0 { 0.0 } else { cosine(predicted, measured)? };
    Ok(AlignmentReport {
        cosine: cos,
        rel_norm_error: norm(&diff) / mn,
        measured_norm: mn,
        predicted_norm: pn,
        term_norms: Vec::new(),
    })
}

/// JSON record `{token, basis, sign_variant, cosine, rel_norm_error, term_norms}`.
pub fn report_json(token: Token, prediction: &GradPrediction, report: &AlignmentReport) -> serde_json::Value {
    serde_json::json!({
        "token": token,
        "target": prediction.target,
        "basis": prediction.basis,
        "sign_variant": prediction.sign_variant,
        "cosine": report.cosine,
        "rel_norm_error": report.rel_norm_error,
        "term_norms": report.term_norms,
    })
}

/// `−∇` of the mean loss over `samples`.
pub fn measured_negative_gradient(params: &ModelParams, samples: &[EncodedSample]) -> Result<Grads> {
    let (_, mut g) = loss_and_grads(params, samples)?;
    g.w_e.scale(-1.0);
    g.w_u.scale(-1.0);
    Ok(g)
}

/// Embedding-column gradient regrouped by label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbDecomposition {
    /// `(ν, (1/N) Σ_{i: x∈X_i, y_i=ν} m_i(x) W_U[ν,:] ⊙ σ'(h_i))`
    pub label_terms: Vec<(usize, Vec<f64>)>,
    /// `−(1/N) Σ_{i: x∈X_i} m_i(x) (W_Uᵀ p_i) ⊙ σ'(h_i)`
    pub softmax_term: Vec<f64>,
}

impl EmbDecomposition {
    pub fn total(&self) -> Vec<f64> {
        let mut t = self.softmax_term.clone();
        for (_, v) in &self.label_terms {
            t.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        t
    }
}

fn require(params: &ModelParams, allowed: &[Activation]) -> Result<()> {
    if allowed.contains(&params.activation) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "this decomposition is not defined for the {} activation",
            params.activation
        )))
    }
}

/// Exact regrouping of `−∂L/∂W_E[:, x]` over the full dataset; `m_i(x)` is
/// the multiplicity of `x` in sequence `i`.
pub fn exact_grad_decomposition_emb(params: &ModelParams, samples: &[EncodedSample], x: usize) -> Result<EmbDecomposition> {
    require(params, &[Activation::Identity, Activation::QuadraticTest])?;
    let d = params.d();
    let n = samples.len() as f64;
    let mut by_label: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut softmax_term = vec![0.0; d];
    for s in samples {
        let m = s.seq.iter().filter(|&&t| t == x).count();
        if m == 0 {
            continue;
        }
        let pass = forward_pass(params, &s.seq, s.label);
        let w = m as f64 / n;
        let deriv: Vec<f64> = pass.h.iter().map(|&h| params.activation.derivative(h)).collect();
        let term = by_label.entry(s.label).or_insert_with(|| vec![0.0; d]);
        let urow = params.w_u.row(s.label);
        for i in 0..d {
            term[i] += w * urow[i] * deriv[i];
        }
        let up = params.w_u.t_matvec(&pass.p)?;
        for i in 0..d {
            softmax_term[i] -= w * up[i] * deriv[i];
        }
    }
    Ok(EmbDecomposition {
        label_terms: by_label.into_iter().collect(),
        softmax_term,
    })
}

/// Unembedding-row gradient split into its label and softmax parts.
#[derive(Clone, Debug, PartialEq)]
pub struct UnembDecomposition {
    /// `(x, (1/N) Σ_{i: y_i=ν} m_i(x) W_E[:, x])`, identity activation only.
    pub token_terms: Vec<(usize, Vec<f64>)>,
    /// `(1/N) Σ_{i: y_i=ν} σ(h_i)`
    pub label_sum: Vec<f64>,
    /// `−(1/N) Σ_i p_i(ν) σ(h_i)`
    pub softmax_term: Vec<f64>,
}

impl UnembDecomposition {
    pub fn total(&self) -> Vec<f64> {
        self.label_sum.iter().zip(&self.softmax_term).map(|(a, b)| a + b).collect()
    }

    /// Sum of the per-token terms; equals `label_sum` for identity.
    pub fn token_total(&self, d: usize) -> Vec<f64> {
        let mut t = vec![0.0; d];
        for (_, v) in &self.token_terms {
            t.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        t
    }
}

pub fn exact_grad_decomposition_unemb(params: &ModelParams, samples: &[EncodedSample], nu: usize) -> Result<UnembDecomposition> {
    require(params, &[Activation::Identity, Activation::QuadraticTest])?;
    let d = params.d();
    let n = samples.len() as f64;
    let mut counts = vec![0usize; params.vocab()];
    let mut label_sum = vec![0.0; d];
    let mut softmax_term = vec![0.0; d];
    for s in samples {
        let pass = forward_pass(params, &s.seq, s.label);
        if s.label == nu {
            s.seq.iter().for_each(|&x| counts[x] += 1);
            label_sum.iter_mut().zip(&pass.a).for_each(|(l, a)| *l += a / n);
        }
        softmax_term.iter_mut().zip(&pass.a).for_each(|(t, a)| *t -= pass.p[nu] * a / n);
    }
    let token_terms = if params.activation == Activation::Identity {
        counts
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(x, &c)| {
                let col = params.w_e.col(x);
                (x, col.iter().map(|v| c as f64 * v / n).collect())
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(UnembDecomposition {
        token_terms,
        label_sum,
        softmax_term,
    })
}

fn aligned(sig: &SignatureVector, vocab: &Vocabulary) -> Vec<f64> {
    sig.aligned_to(vocab.raw_tokens())
}

fn add_scaled(acc: &mut [f64], s: f64, v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
}

/// Embedding prediction for `F_lin`:
/// `r_α^in W_Uᵀ (ϕ_α^y ∓ (1/V) W_U W_E ϕ_α^X)`.
///
/// The self entry of `ϕ_α^X` is dropped from the second term; its
/// contribution `W_E[:, α]` is of the same order as the neglected
/// remainder. With `centered`, the uniform-softmax baseline
/// `−r_α^in (1/V) W_Uᵀ 1` is added.
pub fn predict_emb_linear<S: TaskSignatures>(
    params: &ModelParams,
    vocab: &Vocabulary,
    sigs: &S,
    alpha: Token,
    sign: SignVariant,
    centered: bool,
) -> Result<GradPrediction> {
    require(params, &[Activation::Identity])?;
    let v = params.vocab() as f64;
    let r = sigs.rate_in(alpha)?;
    let phi_y = aligned(&sigs.phi_y(alpha)?, vocab);
    let mut phi_x = aligned(&sigs.phi_x(alpha)?, vocab);
    phi_x[vocab.to_id(alpha)?] = 0.0;

    let lead = params.w_u.t_matvec(&phi_y)?.iter().map(|x| r * x).collect::<Vec<_>>();
    let inner = params.w_u.matvec(&params.w_e.matvec(&phi_x)?)?;
    let second: Vec<f64> = params.w_u.t_matvec(&inner)?.iter().map(|x| r * x / v).collect();
    let mut pred = lead.clone();
    add_scaled(&mut pred, sign.factor(), &second);
    let mut terms = vec![
        TermNorm { name: "phi_y".into(), norm: norm(&lead) },
        TermNorm { name: "phi_X".into(), norm: norm(&second) },
    ];
    let baseline: Vec<f64> = params.w_u.t_matvec(&vec![1.0; params.vocab()])?.iter().map(|x| -r * x / v).collect();
    terms.push(TermNorm { name: "uniform_baseline".into(), norm: norm(&baseline) });
    if centered {
        add_scaled(&mut pred, 1.0, &baseline);
    }
    Ok(GradPrediction {
        target: Target::EmbColumn(alpha),
        basis: Basis::Cor1,
        sign_variant: Some(sign),
        predicted: pred,
        terms,
    })
}

/// Which optional pieces to add to the FFN embedding prediction.
#[derive(Clone, Copy, Debug, Default)]
pub struct FfnTerms<'a> {
    /// `(W_Uᵀ r_{α,·}) ⊙ (1 + W_E[:, α])`
    pub eta_phi_y: bool,
    /// Uniform-softmax baseline, estimated from these samples.
    pub softmax_baseline: Option<&'a [EncodedSample]>,
}

/// Leading term `Σ_ν r_{α,ν} diag(W_U[ν,:]) W_E (ϕ_α^{X|y}[ν,:])ᵀ` for the
/// quadratic surrogate, with the self column moved into `η_{ϕ^y}`.
pub fn predict_emb_ffn<S: TaskSignatures>(
    params: &ModelParams,
    vocab: &Vocabulary,
    sigs: &S,
    alpha: Token,
    extra: FfnTerms<'_>,
) -> Result<GradPrediction> {
    require(params, &[Activation::QuadraticTest])?;
    let d = params.d();
    let a_id = vocab.to_id(alpha)?;
    let cond = sigs.phi_x_given_y(alpha)?;
    let rates = aligned(&sigs.rates_in_label(alpha)?, vocab);
    let ids: Vec<Option<usize>> = cond.tokens.iter().map(|&t| vocab.to_id(t).ok()).collect();

    let mut lead = vec![0.0; d];
    for (row, &label) in cond.tokens.iter().enumerate() {
        let Ok(nu) = vocab.to_id(label) else { continue };
        let r = rates[nu];
        if r == 0.0 {
            continue;
        }
        let mut mix = vec![0.0; params.vocab()];
        for (col, id) in ids.iter().enumerate() {
            if let Some(x) = *id {
                if x != a_id {
                    mix[x] = cond.values[(row, col)];
                }
            }
        }
        let ew = params.w_e.matvec(&mix)?;
        let urow = params.w_u.row(nu);
        for i in 0..d {
            lead[i] += r * urow[i] * ew[i];
        }
    }
    let mut pred = lead.clone();
    let mut terms = vec![TermNorm { name: "T_phi_X_given_y".into(), norm: norm(&lead) }];
    if extra.eta_phi_y {
        let ur = params.w_u.t_matvec(&rates)?;
        let ea = params.w_e.col(a_id);
        let eta: Vec<f64> = ur.iter().zip(&ea).map(|(u, e)| u * (1.0 + e)).collect();
        terms.push(TermNorm { name: "eta_phi_y".into(), norm: norm(&eta) });
        add_scaled(&mut pred, 1.0, &eta);
    }
    if let Some(samples) = extra.softmax_baseline {
        let b = ffn_softmax_baseline(params, samples, a_id)?;
        terms.push(TermNorm { name: "uniform_baseline".into(), norm: norm(&b) });
        add_scaled(&mut pred, 1.0, &b);
    }
    Ok(GradPrediction {
        target: Target::EmbColumn(alpha),
        basis: Basis::Cor2,
        sign_variant: None,
        predicted: pred,
        terms,
    })
}

/// `−(1/V)(W_Uᵀ 1) ⊙ (1/N) Σ_{i∋α} m_i (1 + h_i)`: the softmax part of the
/// gradient with `p` replaced by the uniform distribution.
pub fn ffn_softmax_baseline(params: &ModelParams, samples: &[EncodedSample], alpha: usize) -> Result<Vec<f64>> {
    let d = params.d();
    let n = samples.len() as f64;
    let mut acc = vec![0.0; d];
    for s in samples {
        let m = s.seq.iter().filter(|&&t| t == alpha).count();
        if m == 0 {
            continue;
        }
        let h = params.hidden(&s.seq)?;
        for i in 0..d {
            acc[i] += m as f64 * (1.0 + h[i]) / n;
        }
    }
    let v = params.vocab() as f64;
    let u1 = params.w_u.t_matvec(&vec![1.0; params.vocab()])?;
    Ok(u1.iter().zip(&acc).map(|(u, a)| -u * a / v).collect())
}

/// Unembedding prediction `L r_ν^out (W_E φ_ν^X)ᵀ`. With `centered`, the
/// uniform-softmax part `−(1/V) W_E r^in` is added.
pub fn predict_unemb_linear<S: TaskSignatures>(
    params: &ModelParams,
    vocab: &Vocabulary,
    sigs: &S,
    nu: Token,
    seq_len: usize,
    centered: bool,
) -> Result<GradPrediction> {
    require(params, &[Activation::Identity])?;
    let r = sigs.rate_out(nu)?;
    let lead: Vec<f64> = if r == 0.0 {
        vec![0.0; params.d()]
    } else {
        let phi = aligned(&sigs.varphi_x(nu)?, vocab);
        params.w_e.matvec(&phi)?.iter().map(|x| seq_len as f64 * r * x).collect()
    };
    let mut pred = lead.clone();
    let rin = aligned(&sigs.rates_in(), vocab);
    let baseline: Vec<f64> = params.w_e.matvec(&rin)?.iter().map(|x| -x / params.vocab() as f64).collect();
    let terms = vec![
        TermNorm { name: "varphi_X".into(), norm: norm(&lead) },
        TermNorm { name: "uniform_baseline".into(), norm: norm(&baseline) },
    ];
    if centered {
        add_scaled(&mut pred, 1.0, &baseline);
    }
    Ok(GradPrediction {
        target: Target::UnembRow(nu),
        basis: Basis::Cor3,
        sign_variant: None,
        predicted: pred,
        terms,
    })
}

/// Which gradient of the bigram model to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmTarget {
    Embedding,
    Unembedding,
    Tied,
}

/// Corpus-signature predictions for the bigram model:
///
/// * embedding `r_s^in W_Uᵀ ϕ_s^next`
/// * unembedding `r_s^out W_E φ_s^pre`
/// * tied `r_s W_E φ̃_s` with `r_s = r_s^in`
///
/// With `centered`, the uniform-softmax parts `−r_s^in (1/V) W_Uᵀ 1` and
/// `−(1/V) W_E r^in` are added.
pub fn predict_lm(
    params: &ModelParams,
    counts: &BigramCounts,
    s: Token,
    target: LmTarget,
    centered: bool,
) -> Result<GradPrediction> {
    require(params, &[Activation::Identity])?;
    let v = params.vocab();
    let total = counts.total() as f64;
    if total == 0.0 {
        return Err(Error::Empty("bigram counts"));
    }
    let r_in = counts.outgoing(s) as f64 / total;
    let r_out = counts.incoming(s) as f64 / total;
    let rin_all: Vec<f64> = (0..v as Token).map(|t| counts.outgoing(t) as f64 / total).collect();
    let ones = vec![1.0; v];

    let emb = |centered: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let next = corpus_phi_next(counts, s)?;
        let lead: Vec<f64> = params.w_u.t_matvec(&next.values)?.iter().map(|x| r_in * x).collect();
        let base: Vec<f64> = if centered {
            params.w_u.t_matvec(&ones)?.iter().map(|x| -r_in * x / v as f64).collect()
        } else {
            vec![0.0; params.d()]
        };
        Ok((lead, base))
    };
    let unemb = |centered: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let pre = corpus_varphi_pre(counts, s)?;
        let lead: Vec<f64> = params.w_e.matvec(&pre.values)?.iter().map(|x| r_out * x).collect();
        let base: Vec<f64> = if centered {
            params.w_e.matvec(&rin_all)?.iter().map(|x| -x / v as f64).collect()
        } else {
            vec![0.0; params.d()]
        };
        Ok((lead, base))
    };

    let (parts, tgt) = match target {
        LmTarget::Embedding => (vec![("phi_next", emb(centered)?)], Target::EmbColumn(s)),
        LmTarget::Unembedding => (vec![("varphi_pre", unemb(centered)?)], Target::UnembRow(s)),
        LmTarget::Tied => {
            if params.w_u != params.w_e.transpose() {
                return Err(Error::Config("tied prediction needs W_U = W_Eᵀ".into()));
            }
            // r_s W_E φ̃_s = r_s W_E (ϕ^next + φ^pre) with r_s^out ≈ r_s^in.
            let (e, eb) = emb(centered)?;
            let pre = corpus_varphi_pre(counts, s)?;
            let u: Vec<f64> = params.w_e.matvec(&pre.values)?.iter().map(|x| r_in * x).collect();
            let ub = if centered { unemb(true)?.1 } else { vec![0.0; params.d()] };
            (vec![("phi_next", (e, eb)), ("varphi_pre", (u, ub))], Target::EmbColumn(s))
        }
    };
    let mut pred = vec![0.0; params.d()];
    let mut terms = Vec::new();
    let mut base_total = vec![0.0; params.d()];
    for (name, (lead, base)) in &parts {
        add_scaled(&mut pred, 1.0, lead);
        add_scaled(&mut base_total, 1.0, base);
        terms.push(TermNorm { name: (*name).into(), norm: norm(lead) });
    }
    if centered {
        terms.push(TermNorm { name: "uniform_baseline".into(), norm: norm(&base_total) });
        add_scaled(&mut pred, 1.0, &base_total);
    }
    Ok(GradPrediction {
        target: tgt,
        basis: Basis::Cor4,
        sign_variant: None,
        predicted: pred,
        terms,
    })
}

/// `−∇` of the mean next-token loss over all corpus bigrams; folded into
/// the shared parameter when `tied`.
pub fn measured_lm_negative_gradient(params: &ModelParams, pairs: &[(usize, usize)], tied: bool) -> Result<Grads> {
    let (_, mut g) = bigram_loss_and_grads(params, pairs)?;
    if tied {
        g = tie_gradients(&g);
    }
    g.w_e.scale(-1.0);
    g.w_u.scale(-1.0);
    Ok(g)
}

/// `max |softmax(f) − (1/V)1 − (f − f̄)/V|`, the error of the first-order
/// softmax expansion around uniform.
pub fn softmax_linearization_check(f: &[f64]) -> Result<f64> {
    let p = softmax(f)?;
    let v = f.len() as f64;
    let mean = f.iter().sum::<f64>() / v;
    Ok(p.iter()
        .zip(f)
        .map(|(pi, fi)| (pi - 1.0 / v - (fi - mean) / v).abs())
        .fold(0.0, f64::max))
}
