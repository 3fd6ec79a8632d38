//! Backbone plus the MoE layer and whichever router the run uses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::error::{ensure, Result};
use crate::moe::{
    balance_loss, greedy_assign, sigmoid_route, stage1_loss, stage2_loss, MoeLayer, RoutingDecision, RouterSource,
    BALANCE_LABEL, TASK_LABEL,
};
use crate::routers::{
    auction_assign, build_hash_table, default_capacity, scaled_epsilon, distillation_loss, routing_agreement,
    switch_route, DistilledRouter, HashTable,
};
use crate::tensor::{Element, ParamId, ParamStore, Reduction, Tape, Var};
use crate::train::{RouterKind, TrainConfig};

/// Consecutive sequences of `seq_len` tokens with their next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Windows of `seq_len + 1` tokens starting at each offset.
    pub fn from_offsets(stream: &[usize], offsets: &[usize], seq_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(offsets.len() * seq_len);
        let mut targets = Vec::with_capacity(offsets.len() * seq_len);
        for &o in offsets {
            ensure!(
                o + seq_len < stream.len(),
                Contract,
                "window at {o} of length {} exceeds stream of {}",
                seq_len + 1,
                stream.len()
            );
            inputs.extend_from_slice(&stream[o..o + seq_len]);
            targets.extend_from_slice(&stream[o + 1..o + seq_len + 1]);
        }
        Ok(Batch {
            inputs,
            targets,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub loss: Var,
    pub task: Var,
    pub balance: Option<Var>,
    pub distill: Option<Var>,
    pub decision: Option<RoutingDecision>,
}

/// Distilled router against the greedy teacher on a token stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterFit {
    /// Fraction of tokens routed alike.
    pub agreement: f64,
    /// Mean cross-entropy of the student scores against the teacher labels.
    pub distill_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: RouterKind,
    pub backbone: Backbone,
    pub moe: Option<MoeLayer>,
    pub router: Option<DistilledRouter>,
    pub hash: Option<HashTable>,
    pub alpha: f64,
    pub distill_reduction: Reduction,
    pub balance_reduction: Reduction,
    pub auction_epsilon_scale: f64,
}

impl Model {
    /// Registers every parameter in `store`. Initial values depend only on
    /// `cfg.seed` and the shapes, so runs sharing a seed share their backbone
    /// and experts regardless of router kind.
    pub fn new<T: Element>(cfg: &TrainConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(cfg.backbone(), store, &mut rng)?;
        let moe = if cfg.router.has_moe() {
            Some(MoeLayer::new(
                store,
                cfg.hidden_dim,
                cfg.num_experts,
                cfg.sublayers_per_expert,
                cfg.expert_inner_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let router = if cfg.router.distills() {
            Some(DistilledRouter::new(
                store,
                cfg.vocab_size,
                cfg.num_experts,
                cfg.router_feature_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let hash = if cfg.router == RouterKind::Hash {
            Some(build_hash_table(cfg.vocab_size, cfg.num_experts, cfg.hash_seed())?)
        } else {
            None
        };
        Ok(Model {
            kind: cfg.router,
            backbone,
            moe,
            router,
            hash,
            alpha: cfg.balance_alpha,
            distill_reduction: cfg.distill_reduction,
            balance_reduction: cfg.balance_reduction,
            auction_epsilon_scale: cfg.auction_epsilon_scale,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.router.as_ref().is_some_and(DistilledRouter::is_frozen)
    }

    /// 2 once a StableMoE router is frozen, otherwise 1.
    pub fn stage(&self) -> u8 {
        if self.is_frozen() {
            2
        } else {
            1
        }
    }

    /// Freezes the distilled router; `None` when the run has none.
    pub fn freeze_router<T: Element>(&mut self, store: &mut ParamStore<T>) -> Option<String> {
        self.router.as_mut().map(|r| r.freeze(store))
    }

    pub fn num_experts(&self) -> usize {
        self.moe.as_ref().map_or(0, MoeLayer::num_experts)
    }

    fn lower<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &Batch) -> Result<Var> {
        ensure!(
            batch.targets.len() == batch.inputs.len(),
            Contract,
            "batch has {} inputs and {} targets",
            batch.inputs.len(),
            batch.targets.len()
        );
        let h = self.backbone.embed(tape, store, &batch.inputs, batch.seq_len)?;
        let k = self.backbone.config.moe_insert_after_block;
        self.backbone.blocks(tape, store, 0..k, h, batch.seq_len)
    }

    fn task_loss<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, batch: &Batch) -> Result<Var> {
        let k = self.backbone.config.moe_insert_after_block;
        let l = self.backbone.config.num_blocks;
        let h = self.backbone.blocks(tape, store, k..l, h, batch.seq_len)?;
        self.backbone.lm_loss(tape, store, h, &batch.targets)
    }

    fn hash_decision(&self, tokens: &[usize]) -> Result<RoutingDecision> {
        let table = self.hash.as_ref().expect("hash model has a table");
        Ok(RoutingDecision {
            scores: None,
            assignment: table.assign(tokens)?,
            gate: None,
            source: RouterSource::Hash,
            num_experts: table.num_experts(),
        })
    }

    /// Routing used at evaluation: the frozen router after freezing, the hash
    /// table for hash runs, greedy selection otherwise.
    fn eval_decision<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        moe: &MoeLayer,
        h: Var,
        tokens: &[usize],
    ) -> Result<RoutingDecision> {
        match self.kind {
            RouterKind::Hash => self.hash_decision(tokens),
            RouterKind::StableMoe if self.is_frozen() => {
                let r = self.router.as_ref().expect("stablemoe has a router");
                let scores = moe.scores(tape, store, h)?;
                sigmoid_route(tape, scores, r.assign(store, tokens)?, RouterSource::DistilledFrozen)
            }
            RouterKind::Switch => {
                let scores = moe.scores(tape, store, h)?;
                switch_route(tape, scores)
            }
            _ => {
                let scores = moe.scores(tape, store, h)?;
                let a = greedy_assign(tape.value(scores), moe.num_experts())?;
                let src = if self.kind == RouterKind::Base {
                    RouterSource::Auction
                } else {
                    RouterSource::Stage1Greedy
                };
                sigmoid_route(tape, scores, a, src)
            }
        }
    }

    /// Balance loss, divided by the token count under `Reduction::Mean`.
    fn balance<T: Element>(&self, tape: &mut Tape<T>, d: &RoutingDecision) -> Result<Var> {
        let b = balance_loss(tape, d, self.alpha)?;
        match self.balance_reduction {
            Reduction::Sum => Ok(b),
            Reduction::Mean => tape.scale(b, 1.0 / d.assignment.len() as f64),
        }
    }

    /// Training forward pass and loss. `pinned` overrides the learned
    /// assignment of greedy, switch and auction routing.
    pub fn forward_train<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        pinned: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        let h = self.lower(tape, store, batch)?;
        let Some(moe) = &self.moe else {
            let task = self.task_loss(tape, store, h, batch)?;
            return Ok(ModelOutput {
                loss: stage2_loss(tape, task),
                task,
                balance: None,
                distill: None,
                decision: None,
            });
        };
        let n = moe.num_experts();
        let pick = |tape: &Tape<T>, scores: Var| -> Result<Vec<usize>> {
            match pinned {
                Some(p) => Ok(p.to_vec()),
                None => greedy_assign(tape.value(scores), n),
            }
        };
        let mut balance = None;
        let mut distill = None;
        let decision = match self.kind {
            RouterKind::StableMoe if self.is_frozen() => {
                let r = self.router.as_ref().expect("stablemoe has a router");
                let (out, d) = moe.stage2_forward(tape, store, h, r, &batch.inputs)?;
                let task = self.task_loss(tape, store, out, batch)?;
                return Ok(ModelOutput {
                    loss: stage2_loss(tape, task),
                    task,
                    balance: None,
                    distill: None,
                    decision: Some(d),
                });
            }
            RouterKind::StableMoe | RouterKind::Stage1Only => {
                let scores = moe.scores(tape, store, h)?;
                let a = pick(tape, scores)?;
                let d = sigmoid_route(tape, scores, a, RouterSource::Stage1Greedy)?;
                balance = Some(self.balance(tape, &d)?);
                let r = self.router.as_ref().expect("distilling model has a router");
                let f = r.features(tape, store, &batch.inputs)?;
                let s_hat = r.scores(tape, store, f)?;
                distill = Some(distillation_loss(tape, s_hat, &d.assignment, self.distill_reduction)?);
                d
            }
            RouterKind::Switch => {
                let scores = moe.scores(tape, store, h)?;
                let d = match pinned {
                    Some(p) => {
                        let probs = tape.softmax_rows(scores)?;
                        let gate = tape.pick(probs, p)?;
                        RoutingDecision {
                            scores: Some(scores),
                            assignment: p.to_vec(),
                            gate: Some(gate),
                            source: RouterSource::Switch,
                            num_experts: n,
                        }
                    }
                    None => switch_route(tape, scores)?,
                };
                balance = Some(self.balance(tape, &d)?);
                d
            }
            RouterKind::Base => {
                let scores = moe.scores(tape, store, h)?;
                let a = match pinned {
                    Some(p) => p.to_vec(),
                    None => {
                        let s: Vec<f64> = tape.value(scores).iter().map(|x| x.f64()).collect();
                        let eps = scaled_epsilon(&s, self.auction_epsilon_scale);
                        auction_assign(&s, n, default_capacity(batch.len(), n), eps)?
                    }
                };
                sigmoid_route(tape, scores, a, RouterSource::Auction)?
            }
            RouterKind::Hash => self.hash_decision(&batch.inputs)?,
            RouterKind::Dense => unreachable!("dense models have no moe layer"),
        };
        let out = moe.forward(tape, store, h, &decision)?;
        let task = self.task_loss(tape, store, out, batch)?;
        let loss = match (balance, distill) {
            (Some(b), Some(d)) => stage1_loss(tape, task, b, d)?,
            (Some(b), None) => {
                tape.mark(task, TASK_LABEL);
                tape.mark(b, BALANCE_LABEL);
                tape.add_scalars(&[task, b])?
            }
            _ => stage2_loss(tape, task),
        };
        Ok(ModelOutput {
            loss,
            task,
            balance,
            distill,
            decision: Some(decision),
        })
    }

    /// Task loss under evaluation routing.
    pub fn forward_eval<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &Batch) -> Result<ModelOutput> {
        let mut h = self.lower(tape, store, batch)?;
        let mut decision = None;
        if let Some(moe) = &self.moe {
            let d = self.eval_decision(tape, store, moe, h, &batch.inputs)?;
            h = moe.forward(tape, store, h, &d)?;
            decision = Some(d);
        }
        let task = self.task_loss(tape, store, h, batch)?;
        Ok(ModelOutput {
            loss: task,
            task,
            balance: None,
            distill: None,
            decision,
        })
    }

    /// Scores of the MoE layer for `tokens`, laid out as sequences of
    /// `seq_len` (a shorter final sequence is allowed).
    fn for_each_chunk<T: Element>(
        &self,
        tokens: &[usize],
        seq_len: usize,
        mut f: impl FnMut(&mut Tape<T>, Var, &[usize]) -> Result<()>,
        store: &ParamStore<T>,
    ) -> Result<()> {
        const CHUNK_SEQS: usize = 16;
        let full = tokens.len() / seq_len * seq_len;
        let mut start = 0;
        while start < tokens.len() {
            let (end, len) = if start < full {
                ((start + CHUNK_SEQS * seq_len).min(full), seq_len)
            } else {
                (tokens.len(), tokens.len() - full)
            };
            let chunk = &tokens[start..end];
            let mut tape = Tape::inference();
            let h = self.backbone.embed(&mut tape, store, chunk, len)?;
            let k = self.backbone.config.moe_insert_after_block;
            let h = self.backbone.blocks(&mut tape, store, 0..k, h, len)?;
            f(&mut tape, h, chunk)?;
            start = end;
        }
        Ok(())
    }

    /// Evaluation-time assignment of every token; `None` without an MoE layer.
    pub fn route_eval<T: Element>(&self, store: &ParamStore<T>, tokens: &[usize], seq_len: usize) -> Result<Option<Vec<usize>>> {
        let Some(moe) = &self.moe else { return Ok(None) };
        match self.kind {
            RouterKind::Hash => return Ok(Some(self.hash_decision(tokens)?.assignment)),
            RouterKind::StableMoe if self.is_frozen() => {
                return Ok(Some(self.router.as_ref().expect("router").assign(store, tokens)?))
            }
            _ => {}
        }
        let mut out = Vec::with_capacity(tokens.len());
        self.for_each_chunk(
            tokens,
            seq_len,
            |tape, h, _| {
                let s = moe.scores(tape, store, h)?;
                out.extend(greedy_assign(tape.value(s), moe.num_experts())?);
                Ok(())
            },
            store,
        )?;
        Ok(Some(out))
    }

    /// How well the distilled router matches greedy routing on the current
    /// centroids; `None` for runs without a distilled router.
    pub fn router_fit<T: Element>(&self, store: &ParamStore<T>, tokens: &[usize], seq_len: usize) -> Result<Option<RouterFit>> {
        let (Some(moe), Some(r)) = (&self.moe, &self.router) else {
            return Ok(None);
        };
        let mut teacher = Vec::with_capacity(tokens.len());
        self.for_each_chunk(
            tokens,
            seq_len,
            |tape, h, _| {
                let s = moe.scores(tape, store, h)?;
                teacher.extend(greedy_assign(tape.value(s), moe.num_experts())?);
                Ok(())
            },
            store,
        )?;
        let student = r.assign(store, tokens)?;
        let mut tape = Tape::inference();
        let f = r.features(&mut tape, store, tokens)?;
        let s = r.scores(&mut tape, store, f)?;
        let ce = distillation_loss(&mut tape, s, &teacher, Reduction::Mean)?;
        Ok(Some(RouterFit {
            agreement: routing_agreement(&student, &teacher)?,
            distill_loss: tape.scalar(ce).f64(),
        }))
    }

    /// Parameters the frozen-router checksum covers.
    pub fn router_params(&self) -> Vec<ParamId> {
        self.router.as_ref().map(|r| r.param_ids().to_vec()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: RouterKind) -> TrainConfig {
        TrainConfig {
            router: kind,
            total_steps: 10,
            warmup_steps: 2,
            batch_tokens: 8,
            seq_len: 4,
            hidden_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ffn_inner_dim: 8,
            max_seq_len: 4,
            num_experts: 3,
            expert_inner_dim: 6,
            router_feature_dim: 5,
            vocab_size: 16,
            ..TrainConfig::default()
        }
    }

    fn batch() -> Batch {
        Batch::from_offsets(&[1, 5, 2, 9, 3, 7, 7, 0, 4, 11], &[0, 4], 4).unwrap()
    }

    #[test]
    fn batch_windows() {
        let b = batch();
        assert_eq!(b.inputs, vec![1, 5, 2, 9, 3, 7, 7, 0]);
        assert_eq!(b.targets, vec![5, 2, 9, 3, 7, 7, 0, 4]);
        assert!(Batch::from_offsets(&[1, 2, 3], &[0], 3).is_err());
    }

    #[test]
    fn shared_seed_shares_backbone_init() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let ma = Model::new(&tiny(RouterKind::StableMoe), &mut a).unwrap();
        let mb = Model::new(&tiny(RouterKind::Dense), &mut b).unwrap();
        for id in mb.backbone.param_ids() {
            assert_eq!(a.get(id).data(), b.get(id).data(), "{}", b.name(id));
        }
        assert!(ma.moe.is_some() && mb.moe.is_none());
    }

    #[test]
    fn loss_terms_per_kind() {
        for (kind, labels) in [
            (RouterKind::StableMoe, 3),
            (RouterKind::Stage1Only, 3),
            (RouterKind::Switch, 2),
            (RouterKind::Base, 1),
            (RouterKind::Hash, 1),
            (RouterKind::Dense, 1),
        ] {
            let mut store = ParamStore::<f32>::new();
            let m = Model::new(&tiny(kind), &mut store).unwrap();
            let mut tape = Tape::new();
            let out = m.forward_train(&mut tape, &store, &batch(), None).unwrap();
            assert_eq!(tape.labels().len(), labels, "{kind}");
            assert!(tape.scalar(out.loss).is_finite());
        }
    }

    #[test]
    fn stage_two_has_only_task_term_and_leaves_router_untouched() {
        let mut store = ParamStore::<f32>::new();
        let mut m = Model::new(&tiny(RouterKind::StableMoe), &mut store).unwrap();
        m.freeze_router(&mut store);
        assert_eq!(m.stage(), 2);
        let mut tape = Tape::new();
        let out = m.forward_train(&mut tape, &store, &batch(), None).unwrap();
        assert_eq!(tape.labels(), vec![TASK_LABEL]);
        let ce = tape.ops().filter(|op| matches!(op, crate::tensor::Op::CrossEntropy { .. })).count();
        assert_eq!(ce, 1);
        assert!(!tape.ops().any(|op| matches!(op, crate::tensor::Op::WeightedSum { .. })));
        assert_eq!(out.decision.as_ref().unwrap().source, RouterSource::DistilledFrozen);
        tape.backward(out.loss, &mut store).unwrap();
        for id in m.router_params() {
            assert!(store.get(id).grad().is_none());
        }
    }

    #[test]
    fn eval_is_pure() {
        for kind in RouterKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let m = Model::new(&tiny(kind), &mut store).unwrap();
            let run = || {
                let mut tape = Tape::inference();
                let o = m.forward_eval(&mut tape, &store, &batch()).unwrap();
                tape.scalar(o.task)
            };
            assert_eq!(run().to_bits(), run().to_bits());
        }
    }

    #[test]
    fn route_eval_matches_forward_eval_decision() {
        for kind in [RouterKind::StableMoe, RouterKind::Switch, RouterKind::Hash] {
            let mut store = ParamStore::<f32>::new();
            let m = Model::new(&tiny(kind), &mut store).unwrap();
            let b = batch();
            let mut tape = Tape::inference();
            let o = m.forward_eval(&mut tape, &store, &b).unwrap();
            let routed = m.route_eval(&store, &b.inputs, 4).unwrap().unwrap();
            assert_eq!(o.decision.unwrap().assignment, routed);
        }
        let mut store = ParamStore::<f32>::new();
        let m = Model::new(&tiny(RouterKind::Dense), &mut store).unwrap();
        assert!(m.route_eval(&store, &[1, 2], 4).unwrap().is_none());
    }

    #[test]
    fn router_fit_reports_agreement_and_loss() {
        let mut store = ParamStore::<f32>::new();
        let m = Model::new(&tiny(RouterKind::StableMoe), &mut store).unwrap();
        let fit = m.router_fit(&store, &[1, 2, 3, 4, 5, 6], 4).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&fit.agreement));
        assert!(fit.distill_loss > 0.0);
        let mut store = ParamStore::<f32>::new();
        let m = Model::new(&tiny(RouterKind::Switch), &mut store).unwrap();
        assert!(m.router_fit(&store, &[1, 2], 4).unwrap().is_none());
    }
}
