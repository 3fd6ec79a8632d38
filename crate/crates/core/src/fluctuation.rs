//! Token → expert assignment history over training snapshots and the
//! statistics derived from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Append-only log of assignments over one fixed token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentHistory {
    token_ids: Vec<usize>,
    steps: Vec<usize>,
    assignments: Vec<Vec<usize>>,
}

impl AssignmentHistory {
    pub fn new(token_ids: Vec<usize>) -> Self {
        AssignmentHistory {
            token_ids,
            steps: Vec::new(),
            assignments: Vec::new(),
        }
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn snapshot(&self, i: usize) -> (usize, &[usize]) {
        (self.steps[i], &self.assignments[i])
    }

    pub fn last(&self) -> Option<(usize, &[usize])> {
        self.steps.last().map(|&s| (s, self.assignments[self.steps.len() - 1].as_slice()))
    }

    pub fn record_snapshot(&mut self, step: usize, assignment: Vec<usize>) -> Result<()> {
        if let Some(&last) = self.steps.last() {
            ensure!(step > last, Contract, "snapshot step {step} does not follow step {last}");
        }
        ensure!(
            assignment.len() == self.token_ids.len(),
            Contract,
            "snapshot covers {} tokens, stream has {}",
            assignment.len(),
            self.token_ids.len()
        );
        self.steps.push(step);
        self.assignments.push(assignment);
        Ok(())
    }

    /// Largest snapshot step whose assignment differs from the final one.
    pub fn last_fluctuation_step(&self, token_index: usize) -> Result<Option<usize>> {
        ensure!(!self.is_empty(), Contract, "history is empty");
        ensure!(
            token_index < self.token_ids.len(),
            Index,
            "token index {token_index} out of range for {} tokens",
            self.token_ids.len()
        );
        let last = self.assignments.len() - 1;
        let fin = self.assignments[last][token_index];
        Ok((0..last)
            .rev()
            .find(|&i| self.assignments[i][token_index] != fin)
            .map(|i| self.steps[i]))
    }

    pub fn last_fluctuation_steps(&self) -> Result<Vec<Option<usize>>> {
        (0..self.token_ids.len()).map(|t| self.last_fluctuation_step(t)).collect()
    }

    /// Fluctuation log, one row per snapshot and token:
    /// `step,token_index,token_id,expert`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,token_index,token_id,expert\n");
        for (step, a) in self.steps.iter().zip(&self.assignments) {
            for (i, (&tok, &e)) in self.token_ids.iter().zip(a).enumerate() {
                let _ = writeln!(out, "{step},{i},{tok},{e}");
            }
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv); lines starting with `#` are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<usize, BTreeMap<usize, (usize, usize)>> = BTreeMap::new();
        let mut saw_header = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                ensure!(
                    line == "step,token_index,token_id,expert",
                    Contract,
                    "fluctuation log header is {line:?}"
                );
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 4, Contract, "line {}: expected 4 fields, got {}", n + 1, f.len());
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Contract(format!("line {}: {s:?}: {e}", n + 1)))
            };
            let (step, idx, tok, e) = (parse(f[0])?, parse(f[1])?, parse(f[2])?, parse(f[3])?);
            ensure!(
                rows.entry(step).or_default().insert(idx, (tok, e)).is_none(),
                Contract,
                "line {}: duplicate entry for step {step} token {idx}",
                n + 1
            );
        }
        ensure!(!rows.is_empty(), Contract, "fluctuation log has no rows");
        let first = rows.values().next().expect("nonempty");
        let token_ids: Vec<usize> = first.values().map(|&(t, _)| t).collect();
        ensure!(
            first.keys().copied().eq(0..token_ids.len()),
            Contract,
            "token indices must run from 0 without gaps"
        );
        let mut h = AssignmentHistory::new(token_ids);
        for (step, row) in rows {
            ensure!(
                row.len() == h.token_ids.len() && row.iter().all(|(&i, &(t, _))| h.token_ids.get(i) == Some(&t)),
                Contract,
                "snapshot at step {step} covers a different token stream"
            );
            h.record_snapshot(step, row.values().map(|&(_, e)| e).collect())?;
        }
        Ok(h)
    }
}

/// Whether tokens are counted by position or grouped by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountUnit {
    #[default]
    Occurrence,
    /// One entry per distinct id, taking the latest fluctuation of any of
    /// its occurrences.
    Type,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub total_steps: usize,
    pub unit: CountUnit,
    pub last_fluctuation: Vec<Option<usize>>,
    /// `(fraction_of_steps, cumulative_token_fraction)` at every snapshot.
    pub curve: Vec<(f64, f64)>,
    pub never_fluctuated: f64,
    /// Quantiles of the last fluctuation step as a fraction of training;
    /// tokens that never fluctuated count as 0.
    pub quantiles: Quantiles,
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn cumulative_curve(history: &AssignmentHistory, total_steps: usize, unit: CountUnit) -> Result<FluctuationReport> {
    ensure!(!history.is_empty(), Contract, "history is empty");
    ensure!(total_steps > 0, Contract, "total_steps must be positive");
    let per_token = history.last_fluctuation_steps()?;
    let last_fluctuation = match unit {
        CountUnit::Occurrence => per_token,
        CountUnit::Type => {
            let mut by_id: BTreeMap<usize, Option<usize>> = BTreeMap::new();
            for (&id, lfs) in history.token_ids.iter().zip(per_token) {
                let e = by_id.entry(id).or_insert(None);
                *e = (*e).max(lfs);
            }
            by_id.into_values().collect()
        }
    };
    let n = last_fluctuation.len().max(1) as f64;
    let as_step = |l: &Option<usize>| l.unwrap_or(0);
    let curve = history
        .steps
        .iter()
        .map(|&s| {
            let covered = last_fluctuation.iter().filter(|l| as_step(l) <= s).count();
            (s as f64 / total_steps as f64, covered as f64 / n)
        })
        .collect();
    let mut fr: Vec<f64> = last_fluctuation
        .iter()
        .map(|l| as_step(l) as f64 / total_steps as f64)
        .collect();
    fr.sort_by(f64::total_cmp);
    let quantiles = Quantiles {
        p50: quantile(&fr, 0.5),
        p90: quantile(&fr, 0.9),
        p99: quantile(&fr, 0.99),
        max: fr.last().copied().unwrap_or(0.0),
    };
    let never = last_fluctuation.iter().filter(|l| l.is_none()).count() as f64 / n;
    Ok(FluctuationReport {
        total_steps,
        unit,
        last_fluctuation,
        curve,
        never_fluctuated: never,
        quantiles,
    })
}

impl FluctuationReport {
    /// Fraction of tokens whose last fluctuation comes after `fraction` of
    /// training.
    pub fn fluctuating_after(&self, fraction: f64) -> f64 {
        let cut = fraction * self.total_steps as f64;
        let n = self.last_fluctuation.len().max(1) as f64;
        self.last_fluctuation
            .iter()
            .filter(|l| l.is_some_and(|s| s as f64 > cut))
            .count() as f64
            / n
    }

    /// Curve data: `fraction_of_steps,cumulative_token_fraction`.
    pub fn curve_csv(&self, manifest_id: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(id) = manifest_id {
            let _ = writeln!(out, "# manifest_id={id}");
        }
        out.push_str("fraction_of_steps,cumulative_token_fraction\n");
        for (x, y) in &self.curve {
            let _ = writeln!(out, "{x},{y}");
        }
        out
    }
}

/// Top-`k` token ids per expert with counts; ties go to the lower id.
pub fn expert_token_report(
    assignment: &[usize],
    tokens: &[usize],
    num_experts: usize,
    k: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    ensure!(k >= 1, Contract, "top-k needs k ≥ 1");
    ensure!(
        assignment.len() == tokens.len(),
        Contract,
        "{} assignments for {} tokens",
        assignment.len(),
        tokens.len()
    );
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); num_experts];
    for (&e, &t) in assignment.iter().zip(tokens) {
        ensure!(e < num_experts, Index, "expert {e} out of range for {num_experts} experts");
        *counts[e].entry(t).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| {
            let mut v: Vec<(usize, usize)> = c.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            v.truncate(k);
            v
        })
        .collect())
}

/// Writes the fluctuation log CSV.
pub fn write_log(history: &AssignmentHistory, path: &Path) -> Result<()> {
    fs::write(path, history.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<AssignmentHistory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AssignmentHistory::from_csv(&text)
}
