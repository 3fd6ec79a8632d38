use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RouterKind, TrainConfig};
use super::optim::{adam_step_with, clip_gradients, lr_schedule, AdamConfig, OptimizerState};
use crate::corpus::CorpusSplit;
use crate::error::{ensure, Error, Result};
use crate::eval::evaluate_ppl;
use crate::fluctuation::{cumulative_curve, AssignmentHistory, FluctuationReport};
use crate::model::{Batch, Model};
use crate::moe::balance_stats;
use crate::report::RunManifest;
use crate::tensor::{ParamStore, Tape};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: u8,
    /// Mean task loss over the steps since the previous record.
    pub train_loss: Option<f64>,
    pub valid_ppl: f64,
    /// Max over mean expert load on the snapshot tokens.
    pub balance_ratio: Option<f64>,
    pub router_agreement: Option<f64>,
    /// Distillation loss of the router against greedy routing on the
    /// validation tokens.
    pub distill_loss: Option<f64>,
    /// Checksum of the frozen router parameters, once frozen.
    pub router_checksum: Option<String>,
    pub lr: f64,
    pub manifest_id: String,
}

/// Everything a run accumulates besides parameters and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RunState {
    pub step: usize,
    pub history: AssignmentHistory,
    pub metrics: Vec<MetricRecord>,
    /// Total objective of every completed step.
    pub losses: Vec<f32>,
    pub window_sum_bits: u64,
    pub window_count: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub manifest: RunManifest,
    pub metrics: Vec<MetricRecord>,
    pub history: AssignmentHistory,
    /// `None` for runs without an MoE layer.
    pub fluctuation: Option<FluctuationReport>,
    pub losses: Vec<f32>,
    pub router_checksum: Option<String>,
    pub final_valid_ppl: f64,
    pub test_ppl: f64,
}

impl TrainReport {
    pub fn config(&self) -> &TrainConfig {
        &self.manifest.config
    }
}

/// Step-wise driver of a training run.
pub struct Trainer {
    pub(crate) cfg: TrainConfig,
    pub(crate) model: Model,
    pub(crate) store: ParamStore<f32>,
    pub(crate) optim: OptimizerState<f32>,
    pub(crate) state: RunState,
    pub(crate) manifest: RunManifest,
    train: Vec<usize>,
    eval_stream: Vec<usize>,
    test_stream: Vec<usize>,
    export_dir: Option<PathBuf>,
}

fn prefix(stream: &[usize], limit: usize) -> Vec<usize> {
    if limit == 0 {
        stream.to_vec()
    } else {
        stream[..stream.len().min(limit)].to_vec()
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: &CorpusSplit) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store)?;
        let optim = OptimizerState::new(&store);
        let history = AssignmentHistory::new(prefix(&corpus.valid, cfg.snapshot_tokens));
        let state = RunState {
            step: 0,
            history,
            metrics: Vec::new(),
            losses: Vec::new(),
            window_sum_bits: 0f64.to_bits(),
            window_count: 0,
            finished: false,
        };
        Self::assemble(cfg, model, store, optim, state, corpus)
    }

    pub(crate) fn assemble(
        cfg: TrainConfig,
        model: Model,
        store: ParamStore<f32>,
        optim: OptimizerState<f32>,
        state: RunState,
        corpus: &CorpusSplit,
    ) -> Result<Self> {
        ensure!(
            corpus.train.len() > cfg.seq_len,
            Contract,
            "train split has {} tokens, one sequence needs {}",
            corpus.train.len(),
            cfg.seq_len + 1
        );
        ensure!(
            corpus.valid.len() >= 2 && corpus.test.len() >= 2,
            Contract,
            "validation and test splits need at least 2 tokens each (got {} and {})",
            corpus.valid.len(),
            corpus.test.len()
        );
        let eval_limit = if cfg.eval_tokens == 0 { 0 } else { cfg.eval_tokens + 1 };
        Ok(Trainer {
            manifest: RunManifest::new(&cfg, corpus),
            train: corpus.train.clone(),
            eval_stream: prefix(&corpus.valid, eval_limit),
            test_stream: prefix(&corpus.test, eval_limit),
            cfg,
            model,
            store,
            optim,
            state,
            export_dir: None,
        })
    }

    /// Export the frozen router to `<dir>/router.{json,bin}` when it freezes.
    pub fn with_export_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.export_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Number of completed training steps.
    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn losses(&self) -> &[f32] {
        &self.state.losses
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.state.metrics
    }

    pub fn history(&self) -> &AssignmentHistory {
        &self.state.history
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: self.cfg.adam_eps,
        }
    }

    /// Sequences for step `s`, drawn from a stream keyed by the seed and step
    /// so a resumed run sees the same batches.
    fn batch(&self, s: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + s as u64);
        let max_start = self.train.len() - self.cfg.seq_len - 1;
        let offsets: Vec<usize> = (0..self.cfg.batch_tokens / self.cfg.seq_len)
            .map(|_| rng.random_range(0..=max_start))
            .collect();
        Batch::from_offsets(&self.train, &offsets, self.cfg.seq_len)
    }

    fn verify_router(&self) -> Result<()> {
        match &self.model.router {
            Some(r) if r.is_frozen() => r.verify(&self.store),
            _ => Ok(()),
        }
    }

    fn freeze(&mut self) -> Result<()> {
        self.model.freeze_router(&mut self.store);
        if let (Some(dir), Some(r)) = (&self.export_dir, &self.model.router) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            r.export(&self.store, &dir.join("router"), &self.manifest.id)?;
        }
        Ok(())
    }

    fn snapshot(&mut self) -> Result<()> {
        let s = self.state.step;
        if let Some(a) = self.model.route_eval(&self.store, self.state.history.token_ids(), self.cfg.seq_len)? {
            self.state.history.record_snapshot(s, a)?;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        self.verify_router()?;
        let s = self.state.step;
        let valid_ppl = evaluate_ppl(&self.model, &self.store, &self.eval_stream, self.cfg.seq_len)?;
        let tokens = self.state.history.token_ids();
        let balance_ratio = match self.model.route_eval(&self.store, tokens, self.cfg.seq_len)? {
            Some(a) if !a.is_empty() => Some(balance_stats(&a, self.model.num_experts())?.max_mean_ratio),
            _ => None,
        };
        let fit = self.model.router_fit(&self.store, &self.eval_stream, self.cfg.seq_len)?;
        let window_sum = f64::from_bits(self.state.window_sum_bits);
        let train_loss = (self.state.window_count > 0).then(|| window_sum / self.state.window_count as f64);
        self.state.window_sum_bits = 0f64.to_bits();
        self.state.window_count = 0;
        self.state.metrics.push(MetricRecord {
            step: s,
            stage: self.model.stage(),
            train_loss,
            valid_ppl,
            balance_ratio,
            router_agreement: fit.map(|f| f.agreement),
            distill_loss: fit.map(|f| f.distill_loss),
            router_checksum: self.model.router.as_ref().and_then(|r| r.frozen_checksum().map(str::to_owned)),
            lr: lr_schedule(s + 1, self.cfg.lr_max, self.cfg.warmup_steps, self.cfg.total_steps),
            manifest_id: self.manifest.id.clone(),
        });
        Ok(())
    }

    /// Runs one training step, preceded by the freeze, evaluation and
    /// snapshot scheduled at the current step.
    pub fn step_once(&mut self) -> Result<()> {
        let s = self.state.step;
        ensure!(s < self.cfg.total_steps, Contract, "run already completed {s} steps");
        if s == self.cfg.freeze_step() && self.cfg.router == RouterKind::StableMoe && !self.model.is_frozen() {
            self.freeze()?;
        }
        if s.is_multiple_of(self.cfg.eval_interval) {
            self.evaluate()?;
        }
        if s.is_multiple_of(self.cfg.snapshot_interval) {
            self.snapshot()?;
        }
        self.verify_router()?;

        let batch = self.batch(s)?;
        let mut tape = Tape::new();
        let out = self.model.forward_train(&mut tape, &self.store, &batch, None)?;
        let loss = tape.scalar(out.loss);
        let task = tape.scalar(out.task);
        ensure!(loss.is_finite(), Contract, "loss became {loss} at step {s}");
        self.store.zero_grads();
        tape.backward(out.loss, &mut self.store)?;
        clip_gradients(&mut self.store, self.cfg.grad_clip_norm)?;
        let lr = lr_schedule(s + 1, self.cfg.lr_max, self.cfg.warmup_steps, self.cfg.total_steps);
        let adam = self.adam();
        let router = self.model.router_params();
        let scale = self.cfg.router_lr_scale;
        let lr_of = |id| if router.contains(&id) { lr * scale } else { lr };
        adam_step_with(&mut self.store, &mut self.optim, lr_of, adam)?;

        self.state.losses.push(loss);
        self.state.window_sum_bits = (f64::from_bits(self.state.window_sum_bits) + task as f64).to_bits();
        self.state.window_count += 1;
        self.state.step += 1;
        Ok(())
    }

    /// Steps until `step` completed steps (capped at the total).
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.state.step < step.min(self.cfg.total_steps) {
            self.step_once()?;
        }
        Ok(())
    }

    /// Completes the remaining steps, then records the final evaluation and
    /// snapshot.
    pub fn finish(&mut self) -> Result<TrainReport> {
        self.run_until(self.cfg.total_steps)?;
        if !self.state.finished {
            self.evaluate()?;
            self.snapshot()?;
            self.state.finished = true;
        }
        self.verify_router()?;
        let test_ppl = evaluate_ppl(&self.model, &self.store, &self.test_stream, self.cfg.seq_len)?;
        let history = &self.state.history;
        let fluctuation = if history.is_empty() {
            None
        } else {
            Some(cumulative_curve(history, self.cfg.total_steps, self.cfg.fluctuation_unit)?)
        };
        Ok(TrainReport {
            manifest: self.manifest.clone(),
            metrics: self.state.metrics.clone(),
            history: history.clone(),
            fluctuation,
            losses: self.state.losses.clone(),
            router_checksum: self.model.router.as_ref().and_then(|r| r.frozen_checksum().map(str::to_owned)),
            final_valid_ppl: self.state.metrics.last().map_or(f64::NAN, |m| m.valid_ppl),
            test_ppl,
        })
    }

    /// Trains `cfg` on `corpus` end to end, exporting the frozen router into
    /// `out_dir` when given.
    pub fn run(cfg: TrainConfig, corpus: &CorpusSplit, out_dir: Option<&Path>) -> Result<TrainReport> {
        let mut t = Trainer::new(cfg, corpus)?;
        if let Some(d) = out_dir {
            t = t.with_export_dir(d);
        }
        t.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_text, CorpusSplit};

    pub(crate) fn tiny(kind: RouterKind, steps: usize) -> TrainConfig {
        TrainConfig {
            router: kind,
            total_steps: steps,
            warmup_steps: 2,
            batch_tokens: 64,
            seq_len: 16,
            hidden_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            ffn_inner_dim: 32,
            max_seq_len: 16,
            num_experts: 4,
            expert_inner_dim: 32,
            router_feature_dim: 8,
            snapshot_interval: 5,
            snapshot_tokens: 256,
            eval_interval: 10,
            eval_tokens: 256,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> CorpusSplit {
        CorpusSplit::from_bytes(synthetic_text(20_000, 3).as_bytes(), "synthetic", [0.8, 0.1, 0.1], 1).unwrap()
    }

    #[test]
    fn schedule_of_evals_and_snapshots() {
        let r = Trainer::run(tiny(RouterKind::StableMoe, 20), &corpus(), None).unwrap();
        let steps: Vec<usize> = r.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 10, 20]);
        assert_eq!(r.history.steps(), &[0, 5, 10, 15, 20]);
        assert_eq!(r.losses.len(), 20);
        assert_eq!(r.metrics[0].stage, 1);
        assert_eq!(r.metrics[1].stage, 2);
        assert!(r.metrics[0].train_loss.is_none() && r.metrics[1].train_loss.is_some());
        assert!(r.router_checksum.is_some());
        assert_eq!(r.metrics[2].router_checksum, r.router_checksum);
        assert!(r.metrics[0].router_checksum.is_none());
    }

    #[test]
    fn stage2_freezes_routing_after_freeze_step() {
        let r = Trainer::run(tiny(RouterKind::StableMoe, 20), &corpus(), None).unwrap();
        let f = r.fluctuation.unwrap();
        assert!(f.last_fluctuation.iter().all(|l| l.is_none_or(|s| s <= 2)));
    }

    #[test]
    fn distillation_loss_falls_during_stage_one() {
        let cfg = TrainConfig {
            stage1_fraction: 0.5,
            eval_interval: 5,
            ..tiny(RouterKind::StableMoe, 400)
        };
        let r = Trainer::run(cfg, &corpus(), None).unwrap();
        let stage1: Vec<f64> = r
            .metrics
            .iter()
            .filter(|m| m.stage == 1)
            .map(|m| m.distill_loss.unwrap())
            .collect();
        assert!(stage1.len() >= 20);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let (first, last) = (mean(&stage1[..10]), mean(&stage1[stage1.len() - 10..]));
        assert!(last < first, "distillation loss went from {first} to {last}");
    }

    #[test]
    fn memorising_a_two_byte_pattern_drives_ppl_to_one() {
        let text = "ab".repeat(4000);
        let corpus = CorpusSplit::from_bytes(text.as_bytes(), "ab", [0.8, 0.1, 0.1], 0).unwrap();
        let r = Trainer::run(tiny(RouterKind::Dense, 300), &corpus, None).unwrap();
        assert!(r.final_valid_ppl < 1.05, "ppl {}", r.final_valid_ppl);
        assert!(r.test_ppl < 1.05, "ppl {}", r.test_ppl);
    }

    #[test]
    fn dense_run_has_no_history() {
        let r = Trainer::run(tiny(RouterKind::Dense, 10), &corpus(), None).unwrap();
        assert!(r.history.is_empty() && r.fluctuation.is_none());
        assert!(r.metrics.iter().all(|m| m.balance_ratio.is_none()));
    }

    #[test]
    fn training_reduces_loss() {
        let mut cfg = tiny(RouterKind::Switch, 60);
        cfg.lr_max = 1e-2;
        let r = Trainer::run(cfg, &corpus(), None).unwrap();
        let head: f32 = r.losses[..5].iter().sum();
        let tail: f32 = r.losses[55..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn tampering_with_frozen_router_fails() {
        let mut t = Trainer::new(tiny(RouterKind::StableMoe, 20), &corpus()).unwrap();
        t.run_until(5).unwrap();
        let id = t.model().router_params()[0];
        t.store_mut().get_mut(id).data_mut()[0] += 1.0;
        let e = t.step_once().unwrap_err();
        assert_eq!(e.category(), "integrity");
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        let c = CorpusSplit::from_bytes(b"abcdefgh", "mem", [0.5, 0.25, 0.25], 0).unwrap();
        let e = Trainer::new(tiny(RouterKind::Hash, 5), &c).err().unwrap();
        assert_eq!(e.category(), "contract");
    }
}
