//! Flat `section.key=value` configuration.
//!
//! Layering order, later wins: the run's persisted `config.txt`, a `--config`
//! file, `--set` overrides, then explicit command flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use embsig_core::{Activation, InitScale, MarkovSpec, TaskKind, TaskSpec, Token, TrainConfig};

use crate::error::CliError;

const KNOWN: &[&str] = &[
    "seed",
    "task.kind",
    "task.n",
    "task.anchors",
    "task.keys",
    "task.labels",
    "corpus.input",
    "corpus.format",
    "corpus.seq_len",
    "corpus.markov_states",
    "corpus.concentration",
    "corpus.sequences",
    "model.arch",
    "model.activation",
    "model.d",
    "model.init",
    "model.lr",
    "model.batch_size",
    "model.epochs",
    "model.weight_decay",
    "model.log_every",
    "model.tied",
    "model.cosine_schedule",
    "analysis.snapshots",
    "analysis.top",
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn set_pairs(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{p}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn remove_section(&mut self, section: &str) {
        let prefix = format!("{section}.");
        self.entries.retain(|k, _| !k.starts_with(&prefix));
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.entries.keys().any(|k| k.starts_with(&prefix))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("{key}={v}: {e}"))))
            .transpose()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.parsed("seed")?.unwrap_or(0))
    }

    /// Deterministic text form; also the input of the config hash.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Exactly one of the task and corpus sections may be present.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.has_section("task") && self.has_section("corpus") {
            return Err(CliError::Usage(
                "config has both task.* and corpus.* keys; a run uses exactly one data source".into(),
            ));
        }
        if self.has_section("task") {
            self.task_spec()?;
        }
        if self.has_section("corpus") {
            self.corpus_source()?;
        }
        if self.has_section("model") {
            self.train_config()?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let kind: TaskKind = self
            .parsed("task.kind")?
            .ok_or_else(|| CliError::Usage("task.kind is required".into()))?;
        let mut spec = TaskSpec::defaults(kind, self.seed()?);
        if let Some(n) = self.parsed("task.n")? {
            spec.sample_count = n;
        }
        if let Some(v) = self.get("task.anchors") {
            spec.anchors = parse_token_set("task.anchors", v)?;
        }
        if let Some(v) = self.get("task.keys") {
            spec.keys = parse_token_set("task.keys", v)?;
        }
        if let Some(v) = self.get("task.labels") {
            spec.labels = parse_token_set("task.labels", v)?;
        }
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn corpus_source(&self) -> Result<CorpusSource, CliError> {
        let seq_len: usize = self.parsed("corpus.seq_len")?.unwrap_or(1000);
        if seq_len < 2 {
            return Err(CliError::Usage("corpus.seq_len must be at least 2".into()));
        }
        match (self.get("corpus.input"), self.get("corpus.markov_states")) {
            (Some(_), Some(_)) => Err(CliError::Usage(
                "corpus.input and corpus.markov_states are mutually exclusive".into(),
            )),
            (Some(path), None) => Ok(CorpusSource::File {
                path: path.into(),
                format: self
                    .parsed("corpus.format")?
                    .unwrap_or(embsig_core::CorpusFormat::TextInt),
                seq_len,
            }),
            (None, Some(_)) => {
                let states: usize = self.parsed("corpus.markov_states")?.expect("present");
                let concentration: f64 = self.parsed("corpus.concentration")?.unwrap_or(1.0);
                let sequences: usize = self.parsed("corpus.sequences")?.unwrap_or(1000);
                let spec = MarkovSpec::random(states, concentration, seq_len, sequences, self.seed()?)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(CorpusSource::Markov(spec))
            }
            (None, None) => Err(CliError::Usage(
                "corpus needs corpus.input or corpus.markov_states".into(),
            )),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig {
            seed: self.seed()?,
            ..TrainConfig::default()
        };
        let arch = self.get("model.arch").unwrap_or("lin");
        cfg.activation = match (arch, self.parsed::<Activation>("model.activation")?) {
            ("lin", None | Some(Activation::Identity)) => Activation::Identity,
            ("lin", Some(a)) => {
                return Err(CliError::Usage(format!("model.arch=lin has no activation, got `{a}`")));
            }
            ("ffn", None) => Activation::Relu,
            ("ffn", Some(Activation::Identity)) => {
                return Err(CliError::Usage("model.arch=ffn needs a nonlinear activation".into()));
            }
            ("ffn", Some(a)) => a,
            (other, _) => return Err(CliError::Usage(format!("unknown model.arch `{other}` (lin or ffn)"))),
        };
        if let Some(d) = self.parsed("model.d")? {
            cfg.d = d;
        }
        if let Some(init) = self.get("model.init") {
            cfg.init = parse_init(init)?;
        }
        if let Some(v) = self.parsed("model.lr")? {
            cfg.lr = v;
        }
        if let Some(v) = self.parsed("model.batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.parsed("model.epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.parsed("model.weight_decay")? {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.parsed("model.log_every")? {
            cfg.log_every = v;
        }
        if let Some(v) = self.parsed("model.tied")? {
            cfg.tied = v;
        }
        if let Some(v) = self.parsed("model.cosine_schedule")? {
            cfg.cosine_schedule = v;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Snapshot epochs named by `analysis.snapshots`, or `None` for all.
    pub fn snapshot_filter(&self) -> Result<Option<Vec<usize>>, CliError> {
        self.get("analysis.snapshots")
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|e| CliError::Usage(format!("analysis.snapshots `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn top(&self) -> Result<usize, CliError> {
        Ok(self.parsed("analysis.top")?.unwrap_or(100))
    }
}

#[derive(Clone, Debug)]
pub enum CorpusSource {
    File {
        path: std::path::PathBuf,
        format: embsig_core::CorpusFormat,
        seq_len: usize,
    },
    Markov(MarkovSpec),
}

/// `a..b` (inclusive) or a comma-separated list.
pub fn parse_token_set(key: &str, v: &str) -> Result<Vec<Token>, CliError> {
    let bad = |e: std::num::ParseIntError| CliError::Usage(format!("{key}={v}: {e}"));
    let mut out: Vec<Token> = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (Token, Token) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        (a..=b).collect()
    } else {
        v.split(',').map(|s| s.trim().parse().map_err(bad)).collect::<Result<_, _>>()?
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// A variance exponent γ, or `fan-in`.
pub fn parse_init(v: &str) -> Result<InitScale, CliError> {
    if v == "fan-in" {
        return Ok(InitScale::FanIn);
    }
    v.parse()
        .map(InitScale::Exponent)
        .map_err(|e| CliError::Usage(format!("model.init={v}: expected an exponent or fan-in ({e})")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_roundtrip() {
        let c = Config::parse("# comment\nmodel.lr = 1e-4\nseed=3\n\ntask.kind=mod\n").unwrap();
        assert_eq!(c.render(), "model.lr=1e-4\nseed=3\ntask.kind=mod\n");
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_usage_errors() {
        assert!(matches!(Config::parse("model.lrr=1"), Err(CliError::Usage(_))));
        assert!(matches!(Config::parse("seed"), Err(CliError::Usage(_))));
    }

    #[test]
    fn task_and_corpus_are_exclusive() {
        let c = Config::parse("task.kind=add\ncorpus.markov_states=10").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_sets() {
        assert_eq!(parse_token_set("k", "3..5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_token_set("k", "5, 3,3").unwrap(), vec![3, 5]);
        assert!(parse_token_set("k", "x").is_err());
    }

    #[test]
    fn architecture_dispatch() {
        let mut c = Config::parse("model.arch=ffn").unwrap();
        assert_eq!(c.train_config().unwrap().activation, Activation::Relu);
        c.set("model.activation", "quadratic-test").unwrap();
        assert_eq!(c.train_config().unwrap().activation, Activation::QuadraticTest);
        c.set("model.arch", "lin").unwrap();
        assert!(c.train_config().is_err());
        let c = Config::parse("model.init=fan-in").unwrap();
        assert_eq!(c.train_config().unwrap().init, InitScale::FanIn);
    }
}
