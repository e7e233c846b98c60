use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;

use embsig_core::checkpoint::{read_checkpoint, write_checkpoint};
use embsig_core::corpus::{count_bigrams, generate_markov, ingest, top_frequent};
use embsig_core::linalg::{cosine_matrix, cosine_matrix_of_rows};
use embsig_core::metrics::{
    monotone_count, pca_1d, per_token_alignment, percentile_alignment, r_cos, ring_diagnostic,
    structure_timeline, write_heatmap_svg, write_line_svg, write_structure_csv,
};
use embsig_core::oracle::{
    compare, compare_vectors, exact_grad_decomposition_emb, exact_grad_decomposition_unemb,
    measured_lm_negative_gradient, measured_negative_gradient, predict_emb_ffn, predict_emb_linear, predict_lm,
    predict_unemb_linear, report_json, FfnTerms, LmTarget, SignVariant,
};
use embsig_core::signature::{corpus_phi_next, corpus_varphi_pre, tilde_phi, TaskSignatures};
use embsig_core::task::{generate_dataset, EncodedSample};
use embsig_core::train::{bigram_pairs, train_bigram_lm_observed, train_observed, Snapshot};
use embsig_core::{
    Activation, AnalyticSignatures, BigramCounts, Dataset, Matrix, ModelParams, SignatureCounts, SignatureKind,
    Token, TokenStream,
};

use crate::config::{Config, CorpusSource};
use crate::error::CliError;
use crate::run::{Manifest, RunDir, MANIFEST};

const DATASET: &str = "data/dataset.csv";
const VOCAB: &str = "data/vocab.json";
const TOKENS: &str = "data/tokens.txt";
const CORPUS_INFO: &str = "data/corpus.json";

#[derive(Args, Debug, Default)]
pub struct GenTaskArgs {
    /// add, add-same or mod.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample count.
    #[arg(long)]
    pub n: Option<usize>,
    /// Anchor set, `a..b` or comma list.
    #[arg(long)]
    pub anchors: Option<String>,
    #[arg(long)]
    pub keys: Option<String>,
    #[arg(long)]
    pub labels: Option<String>,
}

pub fn gen_task(mut run: RunDir, mut cfg: Config, args: &GenTaskArgs, force: bool) -> Result<(), CliError> {
    cfg.set_opt("task.kind", args.task.as_ref())?;
    cfg.set_opt("seed", args.seed)?;
    cfg.set_opt("task.n", args.n)?;
    cfg.set_opt("task.anchors", args.anchors.as_ref())?;
    cfg.set_opt("task.keys", args.keys.as_ref())?;
    cfg.set_opt("task.labels", args.labels.as_ref())?;
    switch_source(&mut cfg, "task", "corpus", force)?;
    cfg.validate()?;
    run.claim_outputs()?;
    let ds = generate_dataset(&cfg.task_spec()?)?;
    run.emit(DATASET, |w| ds.write_csv(w))?;
    let vocab = ds.vocab.to_json()?;
    run.write(VOCAB, vocab.as_bytes())?;
    println!(
        "{}: {} samples, vocabulary of {} tokens",
        ds.spec.kind,
        ds.samples.len(),
        ds.vocab.len()
    );
    run.finish(&cfg)
}

/// A run has one data source; switching requires `--force`.
fn switch_source(cfg: &mut Config, keep: &str, drop: &str, force: bool) -> Result<(), CliError> {
    if cfg.has_section(drop) {
        if !force {
            return Err(CliError::Usage(format!(
                "run is configured with {drop}.* keys; pass --force to switch it to {keep}"
            )));
        }
        cfg.remove_section(drop);
    }
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct CorpusSigArgs {
    /// Pre-tokenized corpus file.
    #[arg(long, conflicts_with = "markov_states")]
    pub input: Option<PathBuf>,
    /// text-int or binary-u32.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Generate a synthetic Markov corpus with this many states.
    #[arg(long)]
    pub markov_states: Option<usize>,
    /// Dirichlet concentration of the synthetic transition rows.
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Number of synthetic sequences.
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tokens kept for the signature tables, most frequent first.
    #[arg(long)]
    pub top: Option<usize>,
}

pub fn corpus_sig(mut run: RunDir, mut cfg: Config, args: &CorpusSigArgs, force: bool) -> Result<(), CliError> {
    if let Some(p) = &args.input {
        let abs = std::fs::canonicalize(p).map_err(|e| CliError::data(p.display(), e))?;
        cfg.set("corpus.input", &abs.display().to_string())?;
        cfg.remove("corpus.markov_states");
    }
    if args.markov_states.is_some() {
        cfg.remove("corpus.input");
    }
    cfg.set_opt("corpus.format", args.format.as_ref())?;
    cfg.set_opt("corpus.seq_len", args.seq_len)?;
    cfg.set_opt("corpus.markov_states", args.markov_states)?;
    cfg.set_opt("corpus.concentration", args.concentration)?;
    cfg.set_opt("corpus.sequences", args.sequences)?;
    cfg.set_opt("seed", args.seed)?;
    cfg.set_opt("analysis.top", args.top)?;
    switch_source(&mut cfg, "corpus", "task", force)?;
    cfg.validate()?;
    run.claim_outputs()?;

    let (stream, info) = match cfg.corpus_source()? {
        CorpusSource::File { path, format, seq_len } => {
            let (stream, report) = ingest(&path, format, seq_len)?;
            if report.dropped > 0 {
                eprintln!("warning: {} trailing tokens dropped", report.dropped);
            }
            let info = json!({"source": "file", "vocab_size": stream.vocab_size(), "report": report});
            (stream, info)
        }
        CorpusSource::Markov(spec) => {
            let stream = generate_markov(&spec)?;
            let labels: Vec<usize> = (0..spec.states()).collect();
            run.emit("data/transition.csv", |w| spec.transition.write_labeled_csv(w, &labels, &labels))?;
            let info = json!({
                "source": "markov",
                "vocab_size": stream.vocab_size(),
                "report": {"tokens_read": stream.token_count(), "sequences": stream.sequences().len(), "dropped": 0},
            });
            (stream, info)
        }
    };
    let mut text = String::new();
    for seq in stream.sequences() {
        let line: Vec<String> = seq.iter().map(Token::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    run.write(TOKENS, text.as_bytes())?;
    run.write(CORPUS_INFO, (serde_json::to_string_pretty(&info)? + "\n").as_bytes())?;

    let counts = count_bigrams(&stream);
    run.emit("corpus/bigrams.csv", |w| counts.write_csv(w))?;
    let top = top_frequent(&stream, cfg.top()?)?;
    if top.truncated {
        eprintln!("warning: only {} distinct tokens in the corpus", top.tokens.len());
    }
    let tokens = tokens_with_successors(&counts, &top.tokens);
    for (name, f) in corpus_signatures() {
        let m = signature_rows(&counts, &tokens, f)?;
        run.emit(&format!("corpus/{name}.csv"), |w| m.write_labeled_csv(w, &tokens, &tokens_all(&counts)))?;
        let cos = cosine_matrix_of_rows(&m)?;
        run.emit(&format!("corpus/{name}_cos.svg"), |w| {
            write_heatmap_svg(&cos, &tokens, &format!("cos({name}) over top tokens"), w)
        })?;
    }
    println!(
        "corpus: {} tokens in {} sequences, {} bigrams",
        stream.token_count(),
        stream.sequences().len(),
        counts.total()
    );
    run.finish(&cfg)
}

type CorpusSig = fn(&BigramCounts, Token) -> embsig_core::Result<embsig_core::SignatureVector>;

fn corpus_signatures() -> [(&'static str, CorpusSig); 3] {
    [("phi_next", corpus_phi_next), ("varphi_pre", corpus_varphi_pre), ("tilde_phi", tilde_phi)]
}

fn tokens_all(counts: &BigramCounts) -> Vec<Token> {
    (0..counts.vocab_size() as Token).collect()
}

/// Tokens with both a successor and a predecessor, so every corpus
/// signature is defined.
fn tokens_with_successors(counts: &BigramCounts, tokens: &[Token]) -> Vec<Token> {
    let mut out: Vec<Token> = tokens
        .iter()
        .copied()
        .filter(|&t| counts.outgoing(t) > 0 && counts.incoming(t) > 0)
        .collect();
    out.sort_unstable();
    out
}

fn signature_rows(counts: &BigramCounts, tokens: &[Token], f: CorpusSig) -> Result<Matrix, CliError> {
    let rows = tokens
        .iter()
        .map(|&t| f(counts, t).map(|v| v.values))
        .collect::<embsig_core::Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

fn load_dataset(run: &RunDir) -> Result<Dataset, CliError> {
    let bytes = run.read(DATASET, "run gen-task first")?;
    Ok(Dataset::read_csv(&bytes[..])?)
}

fn load_stream(run: &RunDir) -> Result<TokenStream, CliError> {
    let info: serde_json::Value = serde_json::from_slice(&run.read(CORPUS_INFO, "run corpus-sig first")?)?;
    let vocab = info["vocab_size"]
        .as_u64()
        .ok_or_else(|| CliError::Data(format!("{CORPUS_INFO}: missing vocab_size")))? as usize;
    let text = run.read(TOKENS, "run corpus-sig first")?;
    let text = String::from_utf8(text).map_err(|e| CliError::data(TOKENS, e))?;
    let mut seqs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let seq = line
            .split_whitespace()
            .map(|t| t.parse::<Token>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{TOKENS} line {}: {e}", i + 1)))?;
        seqs.push(seq);
    }
    Ok(TokenStream::new(seqs, vocab)?)
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// lin or ffn.
    #[arg(long)]
    pub arch: Option<String>,
    /// relu or quadratic-test (ffn only).
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Variance exponent γ of N(0, d^−γ), or `fan-in`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also log a running loss every this many steps.
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Tie W_U to W_Eᵀ (corpus runs).
    #[arg(long)]
    pub tied: bool,
    /// Cosine learning-rate decay (corpus runs).
    #[arg(long)]
    pub cosine_schedule: bool,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch-{epoch:05}.ckpt")
}

pub fn train(mut run: RunDir, mut cfg: Config, args: &TrainArgs) -> Result<(), CliError> {
    cfg.set_opt("model.arch", args.arch.as_ref())?;
    cfg.set_opt("model.activation", args.activation.as_ref())?;
    cfg.set_opt("model.d", args.d)?;
    cfg.set_opt("model.init", args.init.as_ref())?;
    cfg.set_opt("model.lr", args.lr)?;
    cfg.set_opt("model.batch_size", args.batch_size)?;
    cfg.set_opt("model.epochs", args.epochs)?;
    cfg.set_opt("model.weight_decay", args.weight_decay)?;
    cfg.set_opt("seed", args.seed)?;
    cfg.set_opt("model.log_every", args.log_every)?;
    if args.tied {
        cfg.set("model.tied", "true")?;
    }
    if args.cosine_schedule {
        cfg.set("model.cosine_schedule", "true")?;
    }
    if !cfg.has_section("model") {
        cfg.set("model.arch", "lin")?;
    }
    cfg.validate()?;
    let tc = cfg.train_config()?;
    run.claim_outputs()?;

    let progress = |epoch: usize, loss: f64, acc: f64| {
        if epoch.is_multiple_of(50) || epoch == tc.epochs {
            eprintln!("epoch {epoch:5}  loss {loss:.4}  acc {acc:.4}");
        }
    };
    let outcome = if cfg.has_section("task") {
        if tc.tied || tc.cosine_schedule {
            return Err(CliError::Usage("--tied and --cosine-schedule apply to corpus runs only".into()));
        }
        let ds = load_dataset(&run)?;
        train_observed(&ds, &tc, |e| progress(e.epoch, e.record.loss, e.record.accuracy))?
    } else if cfg.has_section("corpus") {
        let stream = load_stream(&run)?;
        train_bigram_lm_observed(&stream, &tc, |e| progress(e.epoch, e.record.loss, e.record.accuracy))?
    } else {
        return Err(CliError::Usage("no data source: run gen-task or corpus-sig first".into()));
    };

    for snap in &outcome.snapshots {
        run.emit(&checkpoint_name(snap.epoch), |w| {
            write_checkpoint(w, &snap.params, tc.seed, snap.step, snap.epoch)
        })?;
    }
    run.emit("timeline.jsonl", |w| outcome.timeline.write_jsonl(w))?;
    let summary = json!({
        "epochs": tc.epochs,
        "steps": outcome.timeline.records.last().map_or(0, |r| r.step),
        "final_loss": outcome.final_stats.loss,
        "final_accuracy": outcome.final_stats.accuracy,
        "snapshot_epochs": outcome.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(),
    });
    run.write("train_summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    println!(
        "final loss {:.6}, train accuracy {:.4}",
        outcome.final_stats.loss, outcome.final_stats.accuracy
    );
    run.finish(&cfg)
}

/// Checkpoints recorded in a manifest, by epoch.
fn checkpoint_index(manifest: &Manifest) -> BTreeMap<usize, String> {
    manifest
        .files
        .keys()
        .filter_map(|k| {
            let e = k.strip_prefix("checkpoints/epoch-")?.strip_suffix(".ckpt")?;
            Some((e.parse().ok()?, k.clone()))
        })
        .collect()
}

/// Where model checkpoints come from: this run, or `--from` another run.
struct ModelSource {
    dir: PathBuf,
    manifest: Manifest,
}

impl ModelSource {
    fn new(run: &RunDir, from: Option<&Path>) -> Result<Self, CliError> {
        match from {
            None => Ok(Self {
                dir: run.root().to_path_buf(),
                manifest: run.manifest.clone(),
            }),
            Some(dir) => {
                let manifest = Manifest::load(dir)?
                    .ok_or_else(|| CliError::Data(format!("{} has no {MANIFEST}", dir.display())))?;
                Ok(Self {
                    dir: dir.to_path_buf(),
                    manifest,
                })
            }
        }
    }

    fn epochs(&self) -> Vec<usize> {
        checkpoint_index(&self.manifest).into_keys().collect()
    }

    fn load(&self, epoch: Option<usize>) -> Result<Snapshot, CliError> {
        let index = checkpoint_index(&self.manifest);
        let (epoch, rel) = match epoch {
            Some(e) => index.get_key_value(&e).ok_or_else(|| {
                CliError::Data(format!(
                    "no checkpoint for epoch {e} in {} (have {:?})",
                    self.dir.display(),
                    index.keys().collect::<Vec<_>>()
                ))
            })?,
            None => index
                .iter()
                .next_back()
                .ok_or_else(|| CliError::Data(format!("no checkpoints in {}; run train first", self.dir.display())))?,
        };
        let p = self.dir.join(rel);
        let f = std::fs::File::open(&p).map_err(|e| CliError::data(p.display(), e))?;
        let (h, params) = read_checkpoint(f).map_err(|e| CliError::data(p.display(), e))?;
        Ok(Snapshot {
            epoch: *epoch,
            step: h.step,
            params,
        })
    }

    /// Vocabulary mismatches name both manifests.
    fn check_vocab(&self, params: &ModelParams, vocab: usize, run: &RunDir) -> Result<(), CliError> {
        if params.vocab() != vocab {
            return Err(CliError::Data(format!(
                "model vocabulary {} (from {}) does not match data vocabulary {} (from {})",
                params.vocab(),
                self.dir.join(MANIFEST).display(),
                vocab,
                run.path(MANIFEST).display()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SigSource {
    Analytic,
    Empirical,
    Both,
}

#[derive(Args, Debug)]
pub struct SignaturesArgs {
    /// phi_y, phi_X, phi_X_given_y or varphi_X; all when omitted.
    #[arg(long)]
    pub kind: Vec<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub source: SigSource,
}

pub fn signatures(mut run: RunDir, cfg: Config, args: &SignaturesArgs) -> Result<(), CliError> {
    cfg.validate()?;
    if !cfg.has_section("task") {
        return Err(CliError::Usage("signatures needs a task run; use corpus-sig for corpora".into()));
    }
    let kinds: Vec<SignatureKind> = if args.kind.is_empty() {
        vec![SignatureKind::PhiY, SignatureKind::PhiX, SignatureKind::PhiXGivenY, SignatureKind::VarphiX]
    } else {
        args.kind.iter().map(|k| k.parse()).collect::<embsig_core::Result<_>>()?
    };
    run.claim_outputs()?;
    let spec = cfg.task_spec()?;
    let analytic = AnalyticSignatures::new(&spec)?;
    let empirical = match args.source {
        SigSource::Analytic => None,
        _ => Some(SignatureCounts::from_dataset(&load_dataset(&run)?)),
    };
    let mut sources: Vec<(&str, &dyn TaskSignatures)> = Vec::new();
    if args.source != SigSource::Empirical {
        sources.push(("analytic", &analytic));
    }
    if let Some(e) = &empirical {
        sources.push(("empirical", e));
    }
    let vocab = analytic.vocab().raw_tokens().to_vec();
    let anchors = spec.anchors.clone();
    let labels = analytic.labels();
    for (name, sigs) in &sources {
        for &kind in &kinds {
            let base = format!("signatures/{name}/{}", kind.name());
            match kind {
                SignatureKind::PhiXGivenY => {
                    let mut flat = Vec::new();
                    for &a in &anchors {
                        let m = sigs.phi_x_given_y(a)?;
                        run.emit(&format!("{base}/{a}.csv"), |w| m.write_csv(w))?;
                        flat.push(dense_matrix(&m, &vocab));
                    }
                    let cos = cosine_matrix(&Matrix::from_columns(&flat)?)?;
                    run.emit(&format!("{base}_anchor_cos.svg"), |w| {
                        write_heatmap_svg(&cos, &anchors, &format!("cos({}) across anchors, {name}", kind.name()), w)
                    })?;
                }
                _ => {
                    let index: &[Token] = if kind == SignatureKind::VarphiX { &labels } else { &vocab };
                    let mut kept = Vec::new();
                    let mut rows = Vec::new();
                    for &t in index {
                        let v = match kind {
                            SignatureKind::PhiY => sigs.phi_y(t),
                            SignatureKind::PhiX => sigs.phi_x(t),
                            _ => sigs.varphi_x(t),
                        };
                        match v {
                            Ok(v) => {
                                kept.push(t);
                                rows.push(v.aligned_to(&vocab));
                            }
                            Err(embsig_core::Error::NoSupport(_)) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    let index = kept;
                    let m = Matrix::from_rows(&rows)?;
                    run.emit(&format!("{base}.csv"), |w| m.write_labeled_csv(w, &index, &vocab))?;
                    let (cos_index, cos) = if kind == SignatureKind::VarphiX {
                        (index.clone(), cosine_matrix_of_rows(&m)?)
                    } else {
                        let pos: Vec<usize> = anchors.iter().filter_map(|a| index.binary_search(a).ok()).collect();
                        let present: Vec<Token> = pos.iter().map(|&i| index[i]).collect();
                        (present, cosine_matrix_of_rows(&m.select_rows(&pos))?)
                    };
                    let what = if kind == SignatureKind::VarphiX { "labels" } else { "anchors" };
                    run.emit(&format!("{base}_cos.svg"), |w| {
                        write_heatmap_svg(&cos, &cos_index, &format!("cos({}) across {what}, {name}", kind.name()), w)
                    })?;
                }
            }
        }
    }
    if let Some(emp) = &empirical {
        let mut out = String::from("kind,index,l1,linf\n");
        for &kind in &kinds {
            let index: Vec<Token> = match kind {
                SignatureKind::PhiXGivenY => anchors.clone(),
                SignatureKind::VarphiX => labels.clone(),
                _ => vocab.clone(),
            };
            for t in index {
                let (l1, linf) = match kind {
                    SignatureKind::PhiXGivenY => {
                        let (a, e) = (analytic.phi_x_given_y(t)?, emp.phi_x_given_y(t)?);
                        let w = analytic.rates_in_label(t);
                        let linf = a.tokens.iter().chain(&e.tokens).fold(0.0f64, |m, &nu| {
                            a.tokens.iter().chain(&e.tokens).fold(m, |m, &x| m.max((a.get(nu, x) - e.get(nu, x)).abs()))
                        });
                        (a.weighted_row_l1(&e, &w) / w.sum().max(f64::MIN_POSITIVE), linf)
                    }
                    _ => {
                        let get = |s: &dyn TaskSignatures| match kind {
                            SignatureKind::PhiY => s.phi_y(t),
                            SignatureKind::PhiX => s.phi_x(t),
                            _ => s.varphi_x(t),
                        };
                        match (get(&analytic), get(emp)) {
                            (Ok(a), Ok(e)) => (a.l1_distance(&e), a.linf_distance(&e)),
                            _ => continue,
                        }
                    }
                };
                out.push_str(&format!("{},{t},{l1:.6e},{linf:.6e}\n", kind.name()));
            }
        }
        run.write("signatures/agreement.csv", out.as_bytes())?;
    }
    println!("signatures written for {} source(s)", sources.len());
    run.finish(&cfg)
}

/// A signature matrix laid out on the full vocabulary, flattened.
fn dense_matrix(m: &embsig_core::SignatureMatrix, vocab: &[Token]) -> Vec<f64> {
    let mut out = Vec::with_capacity(vocab.len() * vocab.len());
    for &nu in vocab {
        for &x in vocab {
            out.push(m.get(nu, x));
        }
    }
    out
}

#[derive(Args, Debug, Default)]
pub struct MetricsArgs {
    /// Anchor-embedding R_order and mean cosine over every snapshot.
    #[arg(long)]
    pub r_order: bool,
    /// Cosine heatmaps at the selected snapshots.
    #[arg(long)]
    pub heatmaps: bool,
    /// Unembedding structure against the analytic label signatures.
    #[arg(long)]
    pub unemb: bool,
    /// 1-D PCA of the final anchor embeddings.
    #[arg(long)]
    pub pca: bool,
    /// Read checkpoints from another run directory.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

pub fn metrics(mut run: RunDir, cfg: Config, args: &MetricsArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let all = !(args.r_order || args.heatmaps || args.unemb || args.pca);
    let src = ModelSource::new(&run, args.from.as_deref())?;
    run.claim_outputs()?;
    let epochs = src.epochs();
    let selected: Vec<usize> = match cfg.snapshot_filter()? {
        Some(list) => list,
        None => {
            let last = *epochs.last().ok_or_else(|| CliError::Data("no checkpoints; run train first".into()))?;
            epochs.iter().copied().filter(|&e| e == 0 || e == 120 || e == last).collect()
        }
    };

    if cfg.has_section("task") {
        let spec = cfg.task_spec()?;
        let analytic = AnalyticSignatures::new(&spec)?;
        // Models index tokens by the dataset's vocabulary, which can be a
        // strict subset of the analytic support at small N.
        let ds = load_dataset(&run)?;
        let vocab = &ds.vocab;
        let anchor_ids = vocab.ids_of(&spec.anchors)?;
        let anchor_vals: Vec<f64> = spec.anchors.iter().map(|&a| a as f64).collect();
        let labels = ds.label_tokens();
        let label_ids = vocab.ids_of(&labels)?;

        if all || args.r_order {
            let snaps = epochs.iter().map(|&e| src.load(Some(e))).collect::<Result<Vec<_>, _>>()?;
            if let Some(s) = snaps.first() {
                src.check_vocab(&s.params, vocab.len(), &run)?;
            }
            let points = structure_timeline(&snaps, &anchor_ids, &anchor_vals)?;
            run.emit("metrics/structure.csv", |w| write_structure_csv(&points, w))?;
            let x: Vec<f64> = points.iter().map(|p| p.epoch as f64).collect();
            let r: Vec<f64> = points.iter().map(|p| p.r_order.unwrap_or(f64::NAN)).collect();
            let m: Vec<f64> = points.iter().map(|p| p.mean_cos).collect();
            run.emit("metrics/r_order.svg", |w| {
                write_line_svg(&x, &[("R_order", r), ("mean cos", m)], "anchor embedding structure", w)
            })?;
            if let Some(p) = points.last() {
                println!(
                    "epoch {}: R_order {}, mean anchor cosine {:.4}",
                    p.epoch,
                    p.r_order.map_or("degenerate".into(), |r| format!("{r:.4}")),
                    p.mean_cos
                );
            }
        }
        if all || args.heatmaps {
            for &e in &selected {
                let s = src.load(Some(e))?;
                src.check_vocab(&s.params, vocab.len(), &run)?;
                let cos = cosine_matrix(&s.params.w_e.select_cols(&anchor_ids))?;
                run.emit(&format!("metrics/anchor_cos_e{e:05}.svg"), |w| {
                    write_heatmap_svg(&cos, &spec.anchors, &format!("cos(W_E anchors), epoch {e}"), w)
                })?;
                let cos = cosine_matrix_of_rows(&s.params.w_u.select_rows(&label_ids))?;
                run.emit(&format!("metrics/label_cos_e{e:05}.svg"), |w| {
                    write_heatmap_svg(&cos, &labels, &format!("cos(W_U labels), epoch {e}"), w)
                })?;
            }
        }
        let last = src.load(None)?;
        src.check_vocab(&last.params, vocab.len(), &run)?;
        if all || args.unemb {
            let wu = last.params.w_u.select_rows(&label_ids);
            let rows = labels
                .iter()
                .map(|&l| analytic.varphi_x(l).map(|v| v.aligned_to(analytic.vocab().raw_tokens())))
                .collect::<embsig_core::Result<Vec<_>>>()?;
            let r = r_cos(&cosine_matrix_of_rows(&wu)?, &cosine_matrix_of_rows(&Matrix::from_rows(&rows)?)?)?;
            let mut out = json!({"epoch": last.epoch, "r_cos_unemb_varphi": r});
            if spec.kind == embsig_core::TaskKind::ModAdd {
                out["ring"] = serde_json::to_value(ring_diagnostic(&wu)?)?;
            }
            run.write("metrics/unemb.json", (serde_json::to_string_pretty(&out)? + "\n").as_bytes())?;
            println!("unembedding/varphi_X cosine correlation {r:.4}");
        }
        if all || args.pca {
            let proj = pca_1d(&last.params.w_e.select_cols(&anchor_ids))?;
            let mut csv = String::from("anchor,projection\n");
            for (a, p) in spec.anchors.iter().zip(&proj) {
                csv.push_str(&format!("{a},{p:.12e}\n"));
            }
            run.write("metrics/pca.csv", csv.as_bytes())?;
            let n = monotone_count(&proj);
            let out = json!({"epoch": last.epoch, "monotone": n, "anchors": proj.len()});
            run.write("metrics/pca.json", (serde_json::to_string_pretty(&out)? + "\n").as_bytes())?;
            println!("PCA projection monotone for {n} of {} anchors", proj.len());
        }
    } else if cfg.has_section("corpus") {
        let stream = load_stream(&run)?;
        let top = top_frequent(&stream, cfg.top()?)?;
        let ids: Vec<usize> = top.tokens.iter().map(|&t| t as usize).collect();
        let mut labels = top.tokens.clone();
        labels.sort_unstable();
        let mut sorted_ids = ids.clone();
        sorted_ids.sort_unstable();
        for &e in &selected {
            let s = src.load(Some(e))?;
            src.check_vocab(&s.params, stream.vocab_size(), &run)?;
            let cos = cosine_matrix(&s.params.w_e.select_cols(&sorted_ids))?;
            run.emit(&format!("metrics/embedding_cos_e{e:05}.svg"), |w| {
                write_heatmap_svg(&cos, &labels, &format!("cos(W_E) over top tokens, epoch {e}"), w)
            })?;
        }
    } else {
        return Err(CliError::Usage("no data source: run gen-task or corpus-sig first".into()));
    }
    run.finish(&cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleBasis {
    Prop1,
    Prop2,
    Cor1,
    Cor2,
    Cor3,
    Cor4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SignChoice {
    Main,
    Appendix,
    Both,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub basis: OracleBasis,
    /// Sign of the second term in the linear embedding prediction.
    #[arg(long, value_enum, default_value = "main")]
    pub sign: SignChoice,
    /// Add the data-independent uniform-softmax baseline.
    #[arg(long)]
    pub centered: bool,
    /// Snapshot epoch to evaluate at.
    #[arg(long, default_value_t = 0)]
    pub epoch: usize,
    #[arg(long)]
    pub from: Option<PathBuf>,
}

pub fn oracle(mut run: RunDir, cfg: Config, args: &OracleArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let src = ModelSource::new(&run, args.from.as_deref())?;
    let snap = src.load(Some(args.epoch))?;
    let params = &snap.params;
    let suffix = if args.centered { "-centered" } else { "" };
    let mut outputs: Vec<(String, Vec<serde_json::Value>)> = Vec::new();

    if args.basis == OracleBasis::Cor4 {
        if !cfg.has_section("corpus") {
            return Err(CliError::Usage("cor4 needs a corpus run".into()));
        }
        let stream = load_stream(&run)?;
        src.check_vocab(params, stream.vocab_size(), &run)?;
        let counts = count_bigrams(&stream);
        let pairs = bigram_pairs(&stream);
        let tied = cfg.train_config()?.tied;
        let g = measured_lm_negative_gradient(params, &pairs, tied)?;
        let tokens = tokens_with_successors(&counts, &top_frequent(&stream, cfg.top()?)?.tokens);
        let targets: &[LmTarget] = if tied { &[LmTarget::Tied] } else { &[LmTarget::Embedding, LmTarget::Unembedding] };
        for &target in targets {
            let mut reports = Vec::new();
            for &s in &tokens {
                let pred = predict_lm(params, &counts, s, target, args.centered)?;
                let measured = match target {
                    LmTarget::Unembedding => g.w_u.row(s as usize).to_vec(),
                    _ => g.w_e.col(s as usize),
                };
                reports.push(report_json(s, &pred, &compare(&pred, &measured)?));
            }
            let name = match target {
                LmTarget::Embedding => "embedding",
                LmTarget::Unembedding => "unembedding",
                LmTarget::Tied => "tied",
            };
            outputs.push((format!("oracle/cor4-{name}{suffix}-e{:05}.json", args.epoch), reports));
        }
    } else {
        if !cfg.has_section("task") {
            return Err(CliError::Usage(format!("{:?} needs a task run", args.basis).to_lowercase()));
        }
        let ds = load_dataset(&run)?;
        src.check_vocab(params, ds.vocab.len(), &run)?;
        let samples: Vec<EncodedSample> = ds.encoded();
        let counts = SignatureCounts::from_dataset(&ds);
        let g = measured_negative_gradient(params, &samples)?;
        let anchors = ds.spec.anchors.clone();
        let labels = ds.label_tokens();
        let need = |acts: &[Activation]| -> Result<(), CliError> {
            if acts.contains(&params.activation) {
                Ok(())
            } else {
                Err(CliError::Usage(format!(
                    "{:?} does not apply to a {} model",
                    args.basis, params.activation
                )))
            }
        };
        match args.basis {
            OracleBasis::Prop1 => {
                need(&[Activation::Identity])?;
                let mut reports = Vec::new();
                for &t in ds.vocab.raw_tokens() {
                    let id = ds.vocab.to_id(t)?;
                    let total = exact_grad_decomposition_emb(params, &samples, id)?.total();
                    let m = g.w_e.col(id);
                    if let Ok(r) = compare_vectors(&total, &m) {
                        reports.push(json!({"token": t, "cosine": r.cosine, "rel_norm_error": r.rel_norm_error}));
                    }
                }
                outputs.push((format!("oracle/prop1-e{:05}.json", args.epoch), reports));
            }
            OracleBasis::Prop2 => {
                need(&[Activation::Identity])?;
                let mut reports = Vec::new();
                for &t in ds.vocab.raw_tokens() {
                    let id = ds.vocab.to_id(t)?;
                    let total = exact_grad_decomposition_unemb(params, &samples, id)?.total();
                    if let Ok(r) = compare_vectors(&total, g.w_u.row(id)) {
                        reports.push(json!({"token": t, "cosine": r.cosine, "rel_norm_error": r.rel_norm_error}));
                    }
                }
                outputs.push((format!("oracle/prop2-e{:05}.json", args.epoch), reports));
            }
            OracleBasis::Cor1 => {
                need(&[Activation::Identity])?;
                let signs: &[SignVariant] = match args.sign {
                    SignChoice::Main => &[SignVariant::MainText],
                    SignChoice::Appendix => &[SignVariant::AppendixProof],
                    SignChoice::Both => &SignVariant::BOTH,
                };
                for &sign in signs {
                    let mut reports = Vec::new();
                    for &a in &anchors {
                        let pred = predict_emb_linear(params, &ds.vocab, &counts, a, sign, args.centered)?;
                        let m = g.w_e.col(ds.vocab.to_id(a)?);
                        reports.push(report_json(a, &pred, &compare(&pred, &m)?));
                    }
                    let tag = match sign {
                        SignVariant::MainText => "main",
                        SignVariant::AppendixProof => "appendix",
                    };
                    outputs.push((format!("oracle/cor1-{tag}{suffix}-e{:05}.json", args.epoch), reports));
                }
            }
            OracleBasis::Cor2 => {
                need(&[Activation::QuadraticTest])?;
                let extra = FfnTerms {
                    eta_phi_y: true,
                    softmax_baseline: args.centered.then_some(&samples[..]),
                };
                let mut reports = Vec::new();
                for &a in &anchors {
                    let pred = predict_emb_ffn(params, &ds.vocab, &counts, a, extra)?;
                    let m = g.w_e.col(ds.vocab.to_id(a)?);
                    reports.push(report_json(a, &pred, &compare(&pred, &m)?));
                }
                outputs.push((format!("oracle/cor2{suffix}-e{:05}.json", args.epoch), reports));
            }
            OracleBasis::Cor3 => {
                need(&[Activation::Identity])?;
                let mut reports = Vec::new();
                for &l in &labels {
                    let pred = predict_unemb_linear(params, &ds.vocab, &counts, l, 3, args.centered)?;
                    let m = g.w_u.row(ds.vocab.to_id(l)?);
                    reports.push(report_json(l, &pred, &compare(&pred, m)?));
                }
                outputs.push((format!("oracle/cor3{suffix}-e{:05}.json", args.epoch), reports));
            }
            OracleBasis::Cor4 => unreachable!("handled above"),
        }
    }

    run.claim_outputs_matching(&outputs.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>())?;
    for (path, reports) in outputs {
        let cos: Vec<f64> = reports.iter().filter_map(|r| r["cosine"].as_f64()).collect();
        let mean = cos.iter().sum::<f64>() / cos.len().max(1) as f64;
        let min = cos.iter().copied().fold(f64::INFINITY, f64::min);
        let doc = json!({
            "basis": args.basis.to_possible_value().map(|v| v.get_name().to_string()),
            "epoch": args.epoch,
            "centered": args.centered,
            "mean_cosine": mean,
            "min_cosine": if cos.is_empty() { f64::NAN } else { min },
            "reports": reports,
        });
        run.write(&path, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
        println!("{path}: {} targets, mean cosine {mean:.4}, min {min:.4}", cos.len());
    }
    run.finish(&cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlignSignature {
    Next,
    Pre,
    Tilde,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Snapshot epoch; the last one when omitted.
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long, value_enum, default_value = "next")]
    pub signature: AlignSignature,
    #[arg(long)]
    pub from: Option<PathBuf>,
}

pub fn align(mut run: RunDir, cfg: Config, args: &AlignArgs) -> Result<(), CliError> {
    cfg.validate()?;
    if !cfg.has_section("corpus") {
        return Err(CliError::Usage("align needs a corpus run".into()));
    }
    let src = ModelSource::new(&run, args.from.as_deref())?;
    let snap = src.load(args.epoch)?;
    let stream = load_stream(&run)?;
    src.check_vocab(&snap.params, stream.vocab_size(), &run)?;
    run.claim_outputs()?;
    let counts = count_bigrams(&stream);
    let tokens = tokens_with_successors(&counts, &top_frequent(&stream, cfg.top()?)?.tokens);
    let (name, f) = corpus_signatures()[args.signature as usize];
    let sig = cosine_matrix_of_rows(&signature_rows(&counts, &tokens, f)?)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let emb = cosine_matrix(&snap.params.w_e.select_cols(&ids))?;
    let r = r_cos(&emb, &sig)?;
    let curve = percentile_alignment(&emb, &sig)?;
    run.emit("align/curve.csv", |w| curve.write_csv(w))?;
    let x: Vec<f64> = (1..=10).map(f64::from).collect();
    run.emit("align/curve.svg", |w| {
        write_line_svg(&x, &[("mean signature percentile", curve.means())], &format!("percentile alignment, {name}"), w)
    })?;
    let mut per_token = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if let Ok(a) = per_token_alignment(&emb, &sig, i) {
            per_token.push(json!({"token": t, "r_d": a.r_d, "mean": a.mean}));
        }
    }
    let doc = json!({
        "epoch": snap.epoch,
        "signature": name,
        "tokens": tokens.len(),
        "r_cos": r,
        "decile_means": curve.means(),
        "per_token": per_token,
    });
    run.write("align/summary.json", (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    run.emit("align/embedding_cos.svg", |w| {
        write_heatmap_svg(&emb, &tokens, &format!("cos(W_E), epoch {}", snap.epoch), w)
    })?;
    println!("R_cos(W_E, {name}) = {r:.4} over {} tokens at epoch {}", tokens.len(), snap.epoch);
    run.finish(&cfg)
}
