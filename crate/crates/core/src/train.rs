//! Mini-batch training loops for the addition tasks and the bigram LM.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{accumulate, evaluate, forward_pass, init_params, Activation, BatchStats, Grads, InitScale, ModelParams};
use crate::optim::{adamw_step_with_lr, AdamW, OptState};
use crate::task::{Dataset, EncodedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub init: InitScale,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Extra timeline records every this many steps; 0 logs epoch ends only.
    pub log_every: usize,
    /// Cosine learning-rate decay to 0 over the run. Bigram LM only.
    pub cosine_schedule: bool,
    /// `W_U = W_Eᵀ` as one shared parameter. Bigram LM only.
    pub tied: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 200,
            init: InitScale::Exponent(0.8),
            activation: Activation::Identity,
            lr: 1e-5,
            batch_size: 100,
            epochs: 1000,
            weight_decay: 0.01,
            seed: 0,
            log_every: 0,
            cosine_schedule: false,
            tied: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.batch_size == 0 {
            return Err(Error::Config("width and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if let InitScale::Exponent(g) = self.init {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config("init exponent must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Epochs at which parameters are snapshotted: 0, 1, 2, 5, 120, every
/// tenth, and the last.
pub fn is_snapshot_epoch(epoch: usize, last: usize) -> bool {
    epoch.is_multiple_of(10) || matches!(epoch, 1 | 2 | 5 | 120) || epoch == last
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Index into the run's snapshot list.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snapshot: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTimeline {
    pub records: Vec<TimelineRecord>,
}

impl MetricsTimeline {
    fn push(&mut self, r: TimelineRecord) {
        match self.records.last_mut() {
            Some(last) if last.step == r.step => {
                last.snapshot = last.snapshot.or(r.snapshot);
            }
            _ => self.records.push(r),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub step: u64,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub timeline: MetricsTimeline,
    pub snapshots: Vec<Snapshot>,
    /// Full-dataset loss and accuracy of the final parameters.
    pub final_stats: BatchStats,
}

/// State visible to an observer at the end of each epoch (epoch 0 is the
/// initialisation).
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub step: u64,
    pub params: &'a ModelParams,
    pub record: &'a TimelineRecord,
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, cfg, |_| {})
}

/// Trains on `dataset` with AdamW and per-epoch seeded shuffling.
pub fn train_observed<F: FnMut(&EpochEnd)>(dataset: &Dataset, cfg: &TrainConfig, mut observer: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples: Vec<EncodedSample> = dataset.encoded();
    if samples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut params = init_params(cfg.d, dataset.vocab.len(), cfg.init, cfg.activation, cfg.seed)?;
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = OptState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut timeline = MetricsTimeline::default();
    let mut snapshots = Vec::new();
    let init = evaluate(&params, &samples)?;
    snapshots.push(Snapshot {
        epoch: 0,
        step: 0,
        params: params.clone(),
    });
    timeline.push(TimelineRecord {
        step: 0,
        epoch: 0,
        loss: init.loss,
        accuracy: init.accuracy,
        snapshot: Some(0),
    });
    observer(&EpochEnd {
        epoch: 0,
        step: 0,
        params: &params,
        record: timeline.records.last().expect("just pushed"),
    });

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grads = Grads::zeros_like(&params);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_loss, mut epoch_correct) = (0.0, 0usize);
        let (mut window_loss, mut window_correct, mut window_n) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            grads.w_e.data_mut().fill(0.0);
            grads.w_u.data_mut().fill(0.0);
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                let pass = forward_pass(&params, &s.seq, s.label);
                batch_loss += pass.loss;
                epoch_correct += pass.correct as usize;
                window_correct += pass.correct as usize;
                accumulate(&params, &pass, &s.seq, s.label, w, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite { step, epoch });
            }
            epoch_loss += batch_loss;
            window_loss += batch_loss;
            window_n += batch.len();
            adamw_step_with_lr(&mut params, &grads, &mut state, &opt, cfg.lr);
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every as u64) {
                timeline.push(TimelineRecord {
                    step,
                    epoch,
                    loss: window_loss / window_n as f64,
                    accuracy: window_correct as f64 / window_n as f64,
                    snapshot: None,
                });
                (window_loss, window_correct, window_n) = (0.0, 0, 0);
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite { step, epoch });
        }
        let snapshot = is_snapshot_epoch(epoch, cfg.epochs).then(|| {
            snapshots.push(Snapshot {
                epoch,
                step,
                params: params.clone(),
            });
            snapshots.len() - 1
        });
        let n = samples.len() as f64;
        timeline.push(TimelineRecord {
            step,
            epoch,
            loss: epoch_loss / n,
            accuracy: epoch_correct as f64 / n,
            snapshot,
        });
        observer(&EpochEnd {
            epoch,
            step,
            params: &params,
            record: timeline.records.last().expect("just pushed"),
        });
    }
    let final_stats = evaluate(&params, &samples)?;
    Ok(TrainOutcome {
        params,
        timeline,
        snapshots,
        final_stats,
    })
}

/// Adjacent pairs `(s, t)` of every sequence, in order.
pub fn bigram_pairs(stream: &TokenStream) -> Vec<(usize, usize)> {
    stream
        .sequences()
        .iter()
        .flat_map(|s| s.windows(2).map(|w| (w[0] as usize, w[1] as usize)))
        .collect()
}

/// Gradient of the mean next-token loss over `pairs` for the bigram model
/// `logits = W_U W_E[:, s]`. Pairs sharing a context token share one
/// forward pass.
pub fn bigram_loss_and_grads(params: &ModelParams, pairs: &[(usize, usize)]) -> Result<(BatchStats, Grads)> {
    if pairs.is_empty() {
        return Err(Error::Empty("bigram batch"));
    }
    let v = params.vocab();
    if let Some(&(s, t)) = pairs.iter().find(|&&(s, t)| s >= v || t >= v) {
        return Err(Error::UnknownToken(s.max(t) as u32));
    }
    let mut by_context: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(s, t) in pairs {
        *by_context.entry(s).or_default().entry(t).or_insert(0) += 1;
    }
    let mut grads = Grads::zeros_like(params);
    let w = 1.0 / pairs.len() as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (s, next) in &by_context {
        let total: usize = next.values().sum();
        // Forward once with an arbitrary label, then reweight by counts.
        let pass = forward_pass(params, &[*s], *next.keys().next().expect("nonempty"));
        let arg = argmax(&pass.p);
        for (&t, &c) in next {
            loss -= c as f64 * pass.p[t].max(f64::MIN_POSITIVE).ln();
            if arg == t {
                correct += c;
            }
        }
        // Σ_t c_t (p - e_t) = total·p - c.
        let mut g: Vec<f64> = pass.p.iter().map(|&p| total as f64 * p * w).collect();
        for (&t, &c) in next {
            g[t] -= c as f64 * w;
        }
        let d = params.d();
        let gu = grads.w_u.data_mut();
        let mut da = vec![0.0; d];
        for (nu, &gn) in g.iter().enumerate() {
            let wrow = params.w_u.row(nu);
            for i in 0..d {
                gu[nu * d + i] += gn * pass.a[i];
                da[i] += gn * wrow[i];
            }
        }
        for (i, &x) in da.iter().enumerate() {
            grads.w_e[(i, *s)] += x;
        }
    }
    Ok((
        BatchStats {
            loss: loss * w,
            accuracy: correct as f64 * w,
        },
        grads,
    ))
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &z)| if z > bm { (i, z) } else { (bi, bm) })
        .0
}

/// Folds a tied model's two gradient blocks into the shared `W_E` gradient.
pub fn tie_gradients(grads: &Grads) -> Grads {
    let mut shared = grads.w_e.clone();
    let ut = grads.w_u.transpose();
    shared.data_mut().iter_mut().zip(ut.data()).for_each(|(a, b)| *a += b);
    Grads {
        w_u: shared.transpose(),
        w_e: shared,
    }
}

/// Next-token training of `F_lin` with a single-token context.
///
/// Initialisation uses `cfg.init`; in tied mode `W_U` starts as and stays
/// equal to `W_Eᵀ`.
pub fn train_bigram_lm(stream: &TokenStream, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_bigram_lm_observed(stream, cfg, |_| {})
}

pub fn train_bigram_lm_observed<F: FnMut(&EpochEnd)>(
    stream: &TokenStream,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.activation != Activation::Identity {
        return Err(Error::Unsupported("the bigram LM uses the identity activation".into()));
    }
    let pairs = bigram_pairs(stream);
    if pairs.is_empty() {
        return Err(Error::Empty("corpus bigrams"));
    }
    let mut params = init_params(cfg.d, stream.vocab_size(), cfg.init, cfg.activation, cfg.seed)?;
    if cfg.tied {
        params.w_u = params.w_e.transpose();
    }
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = OptState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = (steps_per_epoch * cfg.epochs as u64).max(1);

    let mut timeline = MetricsTimeline::default();
    let mut snapshots = vec![Snapshot {
        epoch: 0,
        step: 0,
        params: params.clone(),
    }];
    let (init, _) = bigram_loss_and_grads(&params, &pairs)?;
    timeline.push(TimelineRecord {
        step: 0,
        epoch: 0,
        loss: init.loss,
        accuracy: init.accuracy,
        snapshot: Some(0),
    });
    observer(&EpochEnd {
        epoch: 0,
        step: 0,
        params: &params,
        record: timeline.records.last().expect("just pushed"),
    });

    let mut order = pairs.clone();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let lr = if cfg.cosine_schedule {
                cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.lr
            };
            step += 1;
            let (stats, mut grads) = bigram_loss_and_grads(&params, batch)?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFinite { step, epoch });
            }
            loss_sum += stats.loss * batch.len() as f64;
            correct_sum += stats.accuracy * batch.len() as f64;
            if cfg.tied {
                grads = tie_gradients(&grads);
                opt_step_shared(&mut params, &grads, &mut state, &opt, lr);
            } else {
                adamw_step_with_lr(&mut params, &grads, &mut state, &opt, lr);
            }
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every as u64) {
                timeline.push(TimelineRecord {
                    step,
                    epoch,
                    loss: stats.loss,
                    accuracy: stats.accuracy,
                    snapshot: None,
                });
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite { step, epoch });
        }
        let snapshot = is_snapshot_epoch(epoch, cfg.epochs).then(|| {
            snapshots.push(Snapshot {
                epoch,
                step,
                params: params.clone(),
            });
            snapshots.len() - 1
        });
        let n = pairs.len() as f64;
        timeline.push(TimelineRecord {
            step,
            epoch,
            loss: loss_sum / n,
            accuracy: correct_sum / n,
            snapshot,
        });
        observer(&EpochEnd {
            epoch,
            step,
            params: &params,
            record: timeline.records.last().expect("just pushed"),
        });
    }
    let (final_stats, _) = bigram_loss_and_grads(&params, &pairs)?;
    Ok(TrainOutcome {
        params,
        timeline,
        snapshots,
        final_stats,
    })
}

/// AdamW on the shared tied parameter; `W_U` is then copied from `W_Eᵀ`.
fn opt_step_shared(params: &mut ModelParams, grads: &Grads, state: &mut OptState, opt: &AdamW, lr: f64) {
    state.step += 1;
    opt.update(lr, params.w_e.data_mut(), grads.w_e.data(), &mut state.m_e, &mut state.v_e, state.step);
    params.w_u = params.w_e.transpose();
}

/// `softmax(W_U W_E[:, s])`, the model's next-token distribution after `s`.
pub fn bigram_prediction(params: &ModelParams, s: usize) -> Result<Vec<f64>> {
    let logits = crate::model::forward(params, &[s])?;
    crate::linalg::softmax(&logits)
}

/// `⟨W_U[ν,:], W_E[:, s]⟩` for every ν; the bigram logit vector.
pub fn bigram_logits(params: &ModelParams, s: usize) -> Vec<f64> {
    let e = params.w_e.col(s);
    (0..params.vocab()).map(|nu| dot(params.w_u.row(nu), &e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_dataset, TaskKind, TaskSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            d: 16,
            lr: 1e-3,
            epochs: 3,
            batch_size: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = generate_dataset(&TaskSpec::defaults(TaskKind::Add, 1).with_sample_count(500)).unwrap();
        let a = train(&ds, &small_cfg()).unwrap();
        let b = train(&ds, &small_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.timeline, b.timeline);
    }

    #[test]
    fn snapshot_cadence() {
        let want: Vec<usize> = (0..=130).filter(|&e| is_snapshot_epoch(e, 130)).collect();
        assert_eq!(&want[..6], &[0, 1, 2, 5, 10, 20]);
        assert!(want.contains(&120) && want.contains(&130) && !want.contains(&121));
        assert!(is_snapshot_epoch(7, 7));
    }

    #[test]
    fn zero_epochs_keeps_initial_snapshot_only() {
        let ds = generate_dataset(&TaskSpec::defaults(TaskKind::Add, 1).with_sample_count(100)).unwrap();
        let out = train(&ds, &TrainConfig { epochs: 0, ..small_cfg() }).unwrap();
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.timeline.records.len(), 1);
        assert_eq!(out.params, out.snapshots[0].params);
    }

    #[test]
    fn timeline_steps_increase_and_roundtrip() {
        let ds = generate_dataset(&TaskSpec::defaults(TaskKind::Add, 1).with_sample_count(500)).unwrap();
        let out = train(&ds, &TrainConfig { log_every: 4, ..small_cfg() }).unwrap();
        let steps: Vec<u64> = out.timeline.records.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
        let mut buf = Vec::new();
        out.timeline.write_jsonl(&mut buf).unwrap();
        let back = MetricsTimeline::read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, out.timeline);
    }

    #[test]
    fn divergence_names_the_step() {
        let ds = generate_dataset(&TaskSpec::defaults(TaskKind::Add, 1).with_sample_count(200)).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            weight_decay: 0.0,
            init: InitScale::Exponent(0.0),
            ..small_cfg()
        };
        match train(&ds, &cfg) {
            Err(Error::NonFinite { step, epoch }) => assert!(step >= 1 && epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.final_stats)),
        }
    }

    #[test]
    fn bigram_grads_match_per_pair_grads() {
        let p = init_params(6, 4, InitScale::Exponent(0.0), Activation::Identity, 3).unwrap();
        let pairs = vec![(0, 1), (0, 1), (0, 2), (3, 0), (1, 1)];
        let (s1, g1) = bigram_loss_and_grads(&p, &pairs).unwrap();
        let ex: Vec<(Vec<usize>, usize)> = pairs.iter().map(|&(s, t)| (vec![s], t)).collect();
        let (s2, g2) = crate::model::loss_and_grads(&p, &ex).unwrap();
        assert!((s1.loss - s2.loss).abs() < 1e-12);
        for (a, b) in g1.w_e.data().iter().zip(g2.w_e.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g1.w_u.data().iter().zip(g2.w_u.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alternation_corpus_is_learned() {
        let seq: Vec<u32> = (0..64).map(|i| (i % 2) as u32).collect();
        let stream = TokenStream::new(vec![seq; 8], 2).unwrap();
        let cfg = TrainConfig {
            d: 8,
            lr: 0.05,
            epochs: 30,
            batch_size: 32,
            init: InitScale::FanIn,
            ..TrainConfig::default()
        };
        let out = train_bigram_lm(&stream, &cfg).unwrap();
        assert_eq!(out.final_stats.accuracy, 1.0);
        assert!(bigram_prediction(&out.params, 0).unwrap()[1] > 0.99);
    }

    #[test]
    fn tied_mode_stays_tied() {
        let seq: Vec<u32> = (0..200).map(|i| ((i * 7 + i / 3) % 5) as u32).collect();
        let stream = TokenStream::new(vec![seq], 5).unwrap();
        let cfg = TrainConfig {
            d: 6,
            lr: 0.01,
            epochs: 3,
            batch_size: 16,
            tied: true,
            cosine_schedule: true,
            init: InitScale::FanIn,
            ..TrainConfig::default()
        };
        let out = train_bigram_lm_observed(&stream, &cfg, |e| {
            assert_eq!(e.params.w_u, e.params.w_e.transpose());
        })
        .unwrap();
        assert_eq!(out.params.w_u, out.params.w_e.transpose());
    }
}
