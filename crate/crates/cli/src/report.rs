//! Static report: copies every figure into `report/figures/` and writes a
//! plain-text index with the run's tables. Deterministic for a given set of
//! artifacts; wall-clock timings are left out on purpose.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::CliError;
use crate::run::{sha256_hex, RunDir, CONFIG};

const INDEX: &str = "report/index.txt";

pub fn report(mut run: RunDir, cfg: Config) -> Result<(), CliError> {
    if run.manifest.files.is_empty() {
        return Err(CliError::Data(format!(
            "{} has no manifest; nothing to report",
            run.root().display()
        )));
    }
    run.claim_outputs()?;
    let files: Vec<(String, String)> = run
        .manifest
        .files
        .iter()
        .map(|(k, e)| (k.clone(), e.sha256.clone()))
        .collect();

    let mut warnings = Vec::new();
    let mut present = Vec::new();
    for (rel, sha) in &files {
        match std::fs::read(run.path(rel)) {
            Ok(bytes) if sha256_hex(&bytes) == *sha => present.push((rel.clone(), bytes)),
            Ok(_) => warnings.push(format!("checksum mismatch: {rel}")),
            Err(_) => warnings.push(format!("missing: {rel}")),
        }
    }
    let get = |name: &str| present.iter().find(|(r, _)| r == name).map(|(_, b)| b.as_slice());
    let json = |name: &str| get(name).and_then(|b| serde_json::from_slice::<serde_json::Value>(b).ok());

    let mut out = String::new();
    let _ = writeln!(out, "embsig run report");
    let _ = writeln!(out, "tool version: {}", run.manifest.tool_version);
    let _ = writeln!(out, "config hash: {}", run.manifest.config_hash);
    let _ = writeln!(out, "\n## Configuration\n");
    out.push_str(&String::from_utf8_lossy(get(CONFIG).unwrap_or_default()));

    if let Some(s) = json("train_summary.json") {
        let _ = writeln!(out, "\n## Training\n");
        let _ = writeln!(out, "epochs: {}", s["epochs"]);
        let _ = writeln!(out, "steps: {}", s["steps"]);
        let _ = writeln!(out, "final loss: {}", s["final_loss"]);
        let _ = writeln!(out, "final train accuracy: {}", s["final_accuracy"]);
    }

    if let Some(csv) = get("metrics/structure.csv") {
        let _ = writeln!(out, "\n## Anchor structure\n");
        out.push_str(&String::from_utf8_lossy(csv));
    }
    for name in ["metrics/unemb.json", "metrics/pca.json"] {
        if let Some(v) = json(name) {
            let _ = writeln!(out, "\n{name}: {v}");
        }
    }

    let oracles: Vec<&(String, Vec<u8>)> = present.iter().filter(|(r, _)| r.starts_with("oracle/")).collect();
    if !oracles.is_empty() {
        let _ = writeln!(out, "\n## Gradient oracles\n");
        let _ = writeln!(out, "{:<44} {:>8} {:>12} {:>12}", "file", "targets", "mean cos", "min cos");
        for (rel, bytes) in oracles {
            let v: serde_json::Value = serde_json::from_slice(bytes)?;
            let n = v["reports"].as_array().map_or(0, Vec::len);
            let _ = writeln!(
                out,
                "{:<44} {:>8} {:>12.6} {:>12.6}",
                rel,
                n,
                v["mean_cosine"].as_f64().unwrap_or(f64::NAN),
                v["min_cosine"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }

    if let Some(v) = json("align/summary.json") {
        let _ = writeln!(out, "\n## Percentile alignment\n");
        let _ = writeln!(out, "signature: {}", v["signature"]);
        let _ = writeln!(out, "R_cos: {}", v["r_cos"]);
        let _ = writeln!(out, "decile means: {}", v["decile_means"]);
    }

    let mut figures = Vec::new();
    for (rel, bytes) in &present {
        if rel.ends_with(".svg") {
            let flat = format!("report/figures/{}", rel.replace('/', "__"));
            run.write(&flat, bytes)?;
            figures.push((rel.clone(), flat));
        }
    }
    let _ = writeln!(out, "\n## Figures\n");
    for (src, copy) in &figures {
        let _ = writeln!(out, "- {} (from {src})", copy.trim_start_matches("report/"));
    }

    let _ = writeln!(out, "\n## Artifacts\n");
    for (rel, sha) in &files {
        let _ = writeln!(out, "{sha}  {rel}");
    }
    if !warnings.is_empty() {
        let _ = writeln!(out, "\n## Warnings\n");
        for w in &warnings {
            let _ = writeln!(out, "- {w}");
        }
        eprintln!("report is partial: {} artifact problem(s)", warnings.len());
    }
    run.write(INDEX, out.as_bytes())?;
    println!("{}", run.path(INDEX).display());
    run.finish(&cfg)
}
