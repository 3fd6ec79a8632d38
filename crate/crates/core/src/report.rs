//! Run manifests and the files a finished run leaves behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::fluctuation::{expert_token_report, Quantiles};
use crate::train::{MetricRecord, TrainConfig, TrainReport};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FLUCTUATION_FILE: &str = "fluctuation.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const EXPERTS_FILE: &str = "experts.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_TABLE_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Tokens listed per expert in `experts.json`.
pub const TOP_TOKENS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub source: String,
    pub content_hash: String,
    pub rotation: usize,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the config, corpus and package version.
    pub id: String,
    pub package_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub corpus: CorpusInfo,
    /// SHA-256 of the executable that wrote the reports.
    pub binary_sha256: Option<String>,
    /// Report files, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, corpus: &CorpusSplit) -> Self {
        let version = env!("CARGO_PKG_VERSION");
        let config_json = serde_json::to_string(cfg).expect("config serialises");
        let mut h = Sha256::new();
        for part in [config_json.as_str(), &corpus.content_hash, version] {
            h.update(part.as_bytes());
            h.update(b"\n");
        }
        RunManifest {
            id: hex::encode(h.finalize())[..16].to_owned(),
            package_version: version.to_owned(),
            seed: cfg.seed,
            config: cfg.clone(),
            corpus: CorpusInfo {
                source: corpus.source.clone(),
                content_hash: corpus.content_hash.clone(),
                rotation: corpus.rotation,
                train_tokens: corpus.train.len(),
                valid_tokens: corpus.valid.len(),
                test_tokens: corpus.test.len(),
            },
            binary_sha256: None,
            outputs: Vec::new(),
        }
    }
}

/// Headline numbers of one run, read back by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_id: String,
    pub router: String,
    pub seed: u64,
    pub total_steps: usize,
    pub freeze_step: Option<usize>,
    pub final_valid_ppl: f64,
    pub test_ppl: f64,
    pub final_balance_ratio: Option<f64>,
    pub final_router_agreement: Option<f64>,
    /// Tokens whose routing still changed after 20% of training.
    pub fluctuating_after_20pct: Option<f64>,
    pub never_fluctuated: Option<f64>,
    pub last_fluctuation_quantiles: Option<Quantiles>,
    pub router_checksum: Option<String>,
}

impl RunSummary {
    pub fn new(r: &TrainReport) -> Self {
        let cfg = r.config();
        let last: Option<&MetricRecord> = r.metrics.last();
        RunSummary {
            manifest_id: r.manifest.id.clone(),
            router: cfg.router.name().to_owned(),
            seed: cfg.seed,
            total_steps: cfg.total_steps,
            freeze_step: r.router_checksum.as_ref().map(|_| cfg.freeze_step()),
            final_valid_ppl: r.final_valid_ppl,
            test_ppl: r.test_ppl,
            final_balance_ratio: last.and_then(|m| m.balance_ratio),
            final_router_agreement: last.and_then(|m| m.router_agreement),
            fluctuating_after_20pct: r.fluctuation.as_ref().map(|f| f.fluctuating_after(0.2)),
            never_fluctuated: r.fluctuation.as_ref().map(|f| f.never_fluctuated),
            last_fluctuation_quantiles: r.fluctuation.as_ref().map(|f| f.quantiles.clone()),
            router_checksum: r.router_checksum.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCount {
    pub id: usize,
    /// Printable form of the byte.
    pub text: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub expert: usize,
    pub load: usize,
    pub top_tokens: Vec<TokenCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertsReport {
    pub manifest_id: String,
    pub step: usize,
    pub experts: Vec<ExpertEntry>,
}

/// Printable form of a byte id.
pub fn byte_text(id: usize) -> String {
    match u8::try_from(id) {
        Ok(b) if b.is_ascii_graphic() || b == b' ' => (b as char).to_string(),
        Ok(b) => format!("\\x{b:02x}"),
        Err(_) => format!("<{id}>"),
    }
}

/// Top tokens per expert from the final snapshot of a run.
pub fn experts_report(r: &TrainReport, k: usize) -> Result<Option<ExpertsReport>> {
    let Some((step, assignment)) = r.history.last() else {
        return Ok(None);
    };
    let n = r.config().num_experts;
    let tokens = r.history.token_ids();
    let top = expert_token_report(assignment, tokens, n, k)?;
    let experts = top
        .into_iter()
        .enumerate()
        .map(|(e, list)| ExpertEntry {
            expert: e,
            load: assignment.iter().filter(|&&a| a == e).count(),
            top_tokens: list
                .into_iter()
                .map(|(id, count)| TokenCount {
                    id,
                    text: byte_text(id),
                    count,
                })
                .collect(),
        })
        .collect();
    Ok(Some(ExpertsReport {
        manifest_id: r.manifest.id.clone(),
        step,
        experts,
    }))
}

fn write(path: PathBuf, contents: String) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn metrics_jsonl(metrics: &[MetricRecord]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metric serialises") + "\n")
        .collect()
}

/// Writes every report file of `r` into `dir` and returns their paths. The
/// manifest records `binary`'s hash when given.
pub fn emit_reports(r: &TrainReport, dir: &Path, binary: Option<&Path>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &r.manifest.id;
    let summary = RunSummary::new(r);
    let mut out = vec![write(dir.join(METRICS_FILE), metrics_jsonl(&r.metrics))?];
    if let Some(f) = &r.fluctuation {
        let log = format!("# manifest_id={id}\n{}", r.history.to_csv());
        out.push(write(dir.join(FLUCTUATION_FILE), log)?);
        out.push(write(dir.join(CURVE_FILE), f.curve_csv(Some(id)))?);
    }
    if let Some(e) = experts_report(r, TOP_TOKENS)? {
        out.push(write(dir.join(EXPERTS_FILE), pretty(&e))?);
    }
    out.push(write(dir.join(SUMMARY_FILE), pretty(&summary))?);
    let table = format!("# manifest_id={id}\n{}", compare_table(&[summary]));
    out.push(write(dir.join(SUMMARY_TABLE_FILE), table)?);

    let mut manifest = r.manifest.clone();
    if let Some(b) = binary {
        let bytes = fs::read(b).map_err(|e| Error::io(b, e))?;
        manifest.binary_sha256 = Some(hex::encode(Sha256::digest(&bytes)));
    }
    manifest.outputs = out
        .iter()
        .filter_map(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .chain([MANIFEST_FILE.to_owned()])
        .collect();
    out.push(write(dir.join(MANIFEST_FILE), pretty(&manifest))?);
    Ok(out)
}

fn pretty<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("report serialises") + "\n"
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_owned(), |v| format!("{v:.digits$}"))
}

/// Fixed-width comparison table, one row per run.
pub fn compare_table(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>6} {:>10} {:>10} {:>8} {:>8} {:>10}",
        "router", "seed", "steps", "valid_ppl", "test_ppl", "balance", "agree", "fluct>20%"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>6} {:>10.3} {:>10.3} {:>8} {:>8} {:>10}",
            r.router,
            r.seed,
            r.total_steps,
            r.final_valid_ppl,
            r.test_ppl,
            opt(r.final_balance_ratio, 3),
            opt(r.final_router_agreement, 3),
            opt(r.fluctuating_after_20pct, 4),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_text;
    use crate::train::RouterKind;

    fn corpus(seed: u64) -> CorpusSplit {
        CorpusSplit::from_bytes(synthetic_text(3000, seed).as_bytes(), "mem", [0.8, 0.1, 0.1], 0).unwrap()
    }

    #[test]
    fn manifest_id_tracks_config_and_corpus() {
        let cfg = TrainConfig::default();
        let a = RunManifest::new(&cfg, &corpus(1));
        assert_eq!(a.id.len(), 16);
        assert_eq!(a, RunManifest::new(&cfg, &corpus(1)));
        assert_ne!(a.id, RunManifest::new(&cfg, &corpus(2)).id);
        let other = TrainConfig {
            seed: 9,
            ..cfg.clone()
        };
        assert_ne!(a.id, RunManifest::new(&other, &corpus(1)).id);
    }

    #[test]
    fn byte_text_escapes_control_bytes() {
        assert_eq!(byte_text(97), "a");
        assert_eq!(byte_text(32), " ");
        assert_eq!(byte_text(10), "\\x0a");
        assert_eq!(byte_text(300), "<300>");
    }

    #[test]
    fn compare_table_has_a_row_per_run() {
        let s = RunSummary {
            manifest_id: "x".into(),
            router: RouterKind::Hash.name().into(),
            seed: 3,
            total_steps: 100,
            freeze_step: None,
            final_valid_ppl: 4.5,
            test_ppl: 4.75,
            final_balance_ratio: Some(1.25),
            final_router_agreement: None,
            fluctuating_after_20pct: Some(0.0),
            never_fluctuated: Some(1.0),
            last_fluctuation_quantiles: None,
            router_checksum: None,
        };
        let t = compare_table(&[s.clone(), s]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("hash"));
        assert!(t.contains("4.500") && t.contains("1.250"));
    }
}
