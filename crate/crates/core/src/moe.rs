//! Top-1 MoE sublayer: affinity scores, greedy selection, gated experts,
//! the balance loss, and the stage-1/stage-2 loss compositions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{layer_norm, layer_norm_params, FfnParams, INIT_STD};
use crate::error::{ensure, Result};
use crate::routers::DistilledRouter;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Tape labels attached to each loss term.
pub const TASK_LABEL: &str = "loss:task";
pub const BALANCE_LABEL: &str = "loss:balance";
pub const DISTILL_LABEL: &str = "loss:distill";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterSource {
    Stage1Greedy,
    DistilledFrozen,
    Switch,
    Auction,
    Hash,
}

impl RouterSource {
    /// Sources whose scores are still being learned and may carry a balance loss.
    pub fn is_trainable(self) -> bool {
        matches!(self, RouterSource::Stage1Greedy | RouterSource::Switch)
    }

    pub fn name(self) -> &'static str {
        match self {
            RouterSource::Stage1Greedy => "stage1-greedy",
            RouterSource::DistilledFrozen => "distilled-frozen",
            RouterSource::Switch => "switch",
            RouterSource::Auction => "auction",
            RouterSource::Hash => "hash",
        }
    }
}

/// Centroids `E`, one row per expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertCentroids {
    pub id: ParamId,
    pub num_experts: usize,
    pub dim: usize,
}

/// `N` experts, each a stack of pre-norm FFN sublayers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub experts: Vec<Vec<FfnParams>>,
}

impl ExpertBank {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        num_experts: usize,
        sublayers: usize,
        dim: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        let experts = (0..num_experts)
            .map(|e| {
                (0..sublayers)
                    .map(|s| FfnParams::new(store, &format!("{prefix}.expert{e}.sub{s}"), dim, inner, rng))
                    .collect()
            })
            .collect();
        ExpertBank { experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Residual delta of expert `e`: the sum of its sublayer outputs, so that
    /// `x + delta` equals the stacked residual computation.
    pub fn expert_delta<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e: usize,
        x: Var,
    ) -> Result<Var> {
        let mut y = x;
        let mut delta: Option<Var> = None;
        for sub in &self.experts[e] {
            let f = sub.forward(tape, store, y)?;
            y = tape.add(y, f)?;
            delta = Some(match delta {
                Some(d) => tape.add(d, f)?,
                None => f,
            });
        }
        Ok(delta.unwrap_or(x))
    }

    pub fn param_ids(&self, e: usize) -> Vec<ParamId> {
        self.experts[e].iter().flat_map(FfnParams::ids).collect()
    }
}

/// One routing decision over a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// `T×N` affinity scores on the tape; absent for hash routing.
    pub scores: Option<Var>,
    pub assignment: Vec<usize>,
    /// Per-token gate values on the tape; absent means a hard gate of 1.
    pub gate: Option<Var>,
    pub source: RouterSource,
    pub num_experts: usize,
}

impl RoutingDecision {
    pub fn gate_values<T: Element>(&self, tape: &Tape<T>) -> Vec<f64> {
        match self.gate {
            Some(g) => tape.value(g).iter().map(|x| x.f64()).collect(),
            None => vec![1.0; self.assignment.len()],
        }
    }

    pub fn loads(&self) -> Vec<usize> {
        loads(&self.assignment, self.num_experts)
    }
}

/// Expert loads and the max/mean ratio for one assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub loads: Vec<usize>,
    pub mean_load: f64,
    pub max_mean_ratio: f64,
}

pub(crate) fn loads(assignment: &[usize], num_experts: usize) -> Vec<usize> {
    let mut l = vec![0; num_experts];
    for &a in assignment {
        l[a] += 1;
    }
    l
}

pub fn balance_stats(assignment: &[usize], num_experts: usize) -> Result<BalanceStats> {
    ensure!(num_experts > 0, Contract, "balance stats need at least one expert");
    ensure!(!assignment.is_empty(), Contract, "balance stats need at least one token");
    if let Some(&bad) = assignment.iter().find(|&&a| a >= num_experts) {
        return Err(crate::Error::Index(format!("expert {bad} out of range for {num_experts} experts")));
    }
    let loads = loads(assignment, num_experts);
    let mean_load = assignment.len() as f64 / num_experts as f64;
    let max = *loads.iter().max().unwrap_or(&0) as f64;
    Ok(BalanceStats {
        loads,
        mean_load,
        max_mean_ratio: max / mean_load,
    })
}

/// `s = h·Eᵀ`.
pub fn assignment_scores<T: Element>(tape: &mut Tape<T>, h: Var, centroids: Var) -> Result<Var> {
    tape.matmul_nt(h, centroids)
}

/// Row-wise argmax with ties going to the lowest expert index.
pub fn greedy_assign<T: Element>(scores: &[T], num_experts: usize) -> Result<Vec<usize>> {
    ensure!(num_experts > 0, Contract, "greedy routing needs at least one expert");
    ensure!(
        scores.len().is_multiple_of(num_experts),
        Dimension,
        "{} scores do not form rows of {num_experts}",
        scores.len()
    );
    Ok(scores
        .chunks(num_experts)
        .map(|row| {
            let mut best = 0;
            for (i, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// `σ(s_{t,a_t})` for every token.
pub fn sigmoid_gate<T: Element>(tape: &mut Tape<T>, scores: Var, assignment: &[usize]) -> Result<Var> {
    let picked = tape.pick(scores, assignment)?;
    tape.sigmoid(picked)
}

/// Sigmoid-gated decision for a given assignment.
pub fn sigmoid_route<T: Element>(
    tape: &mut Tape<T>,
    scores: Var,
    assignment: Vec<usize>,
    source: RouterSource,
) -> Result<RoutingDecision> {
    let num_experts = score_cols(tape, scores)?;
    let gate = sigmoid_gate(tape, scores, &assignment)?;
    Ok(RoutingDecision {
        scores: Some(scores),
        assignment,
        gate: Some(gate),
        source,
        num_experts,
    })
}

/// Stage-1 routing: greedy argmax plus sigmoid gate.
pub fn stage1_route<T: Element>(tape: &mut Tape<T>, scores: Var) -> Result<RoutingDecision> {
    let n = score_cols(tape, scores)?;
    let assignment = greedy_assign(tape.value(scores), n)?;
    sigmoid_route(tape, scores, assignment, RouterSource::Stage1Greedy)
}

pub(crate) fn score_cols<T: Element>(tape: &Tape<T>, scores: Var) -> Result<usize> {
    let shape = tape.shape(scores);
    ensure!(shape.len() == 2, Dimension, "scores must be a T×N matrix, got {:?}", shape);
    Ok(shape[1])
}

/// `gate_t · Expert_{a_t}(h_t) + h_t` for every token.
pub fn moe_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: Var,
    decision: &RoutingDecision,
    experts: &ExpertBank,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    ensure!(shape.len() == 2, Dimension, "moe input must be T×d, got {:?}", shape);
    let t = shape[0];
    ensure!(
        decision.assignment.len() == t,
        Contract,
        "decision covers {} tokens, input has {t}",
        decision.assignment.len()
    );
    let n = experts.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (tok, &e) in decision.assignment.iter().enumerate() {
        ensure!(e < n, Index, "expert {e} out of range for {n} experts");
        groups[e].push(tok);
    }
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for (e, group) in groups.into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let x = tape.gather_rows(h, &group)?;
        let mut y = experts.expert_delta(tape, store, e, x)?;
        if let Some(gate) = decision.gate {
            let g = tape.gather_rows(gate, &group)?;
            y = tape.scale_rows(y, g)?;
        }
        parts.push(y);
        rows.push(group);
    }
    if parts.is_empty() {
        return Ok(h);
    }
    let delta = tape.stitch(&parts, &rows, t)?;
    tape.add(h, delta)
}

/// `α Σ_i ((|A_i| − n̄)/n̄) Σ_{t∈A_i} gate_t`, with the load coefficients held
/// constant.
pub fn balance_loss<T: Element>(tape: &mut Tape<T>, decision: &RoutingDecision, alpha: f64) -> Result<Var> {
    let n = decision.num_experts;
    ensure!(n > 0, Contract, "balance loss needs at least one expert");
    ensure!(
        decision.source.is_trainable(),
        Contract,
        "balance loss is undefined for {} routing",
        decision.source.name()
    );
    let gate = decision
        .gate
        .ok_or_else(|| crate::Error::Contract("balance loss needs a soft gate".into()))?;
    let t = decision.assignment.len();
    ensure!(t > 0, Contract, "balance loss needs at least one token");
    let loads = decision.loads();
    let mean = t as f64 / n as f64;
    let coef: Vec<f64> = loads.iter().map(|&l| alpha * (l as f64 - mean) / mean).collect();
    let weights = decision.assignment.iter().map(|&a| coef[a]).collect();
    tape.weighted_sum(gate, weights)
}

/// `task + bal + dis`, each term labelled on the tape.
pub fn stage1_loss<T: Element>(tape: &mut Tape<T>, task: Var, bal: Var, dis: Var) -> Result<Var> {
    tape.mark(task, TASK_LABEL);
    tape.mark(bal, BALANCE_LABEL);
    tape.mark(dis, DISTILL_LABEL);
    tape.add_scalars(&[task, bal, dis])
}

/// Stage 2 trains on the task loss alone.
pub fn stage2_loss<T: Element>(tape: &mut Tape<T>, task: Var) -> Var {
    tape.mark(task, TASK_LABEL);
    task
}

/// Pre-norm MoE sublayer: its own layer norm, centroids and experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub centroids: ExpertCentroids,
    pub experts: ExpertBank,
}

impl MoeLayer {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        num_experts: usize,
        sublayers: usize,
        inner: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(num_experts > 0, Config, "num_experts must be positive");
        ensure!(sublayers > 0, Config, "sublayers_per_expert must be positive");
        let (ln_gain, ln_bias) = layer_norm_params(store, "moe.ln", dim);
        let id = store.add("moe.centroids", Tensor::randn(vec![num_experts, dim], INIT_STD, rng));
        let experts = ExpertBank::new(store, "moe", num_experts, sublayers, dim, inner, rng);
        Ok(MoeLayer {
            ln_gain,
            ln_bias,
            centroids: ExpertCentroids {
                id,
                num_experts,
                dim,
            },
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.centroids.num_experts
    }

    /// Affinity scores `LN(h)·Eᵀ`.
    pub fn scores<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let x = layer_norm(tape, store, h, self.ln_gain, self.ln_bias)?;
        let e = tape.param(store, self.centroids.id);
        assignment_scores(tape, x, e)
    }

    /// Experts see the normalised input; the residual carries the raw one.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        decision: &RoutingDecision,
    ) -> Result<Var> {
        moe_forward(tape, store, h, decision, &self.experts)
    }

    /// Frozen-router routing with the gate still read from the trainable
    /// centroids.
    pub fn stage2_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        frozen: &DistilledRouter,
        tokens: &[usize],
    ) -> Result<(Var, RoutingDecision)> {
        ensure!(frozen.is_frozen(), Contract, "stage 2 requires a frozen router");
        let assignment = frozen.assign(store, tokens)?;
        let scores = self.scores(tape, store, h)?;
        let decision = sigmoid_route(tape, scores, assignment, RouterSource::DistilledFrozen)?;
        let out = self.forward(tape, store, h, &decision)?;
        Ok((out, decision))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln_gain, self.ln_bias, self.centroids.id];
        for e in 0..self.experts.len() {
            ids.extend(self.experts.param_ids(e));
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn decision_with_gate(tape: &mut Tape<f64>, gates: &[f64], assignment: &[usize], n: usize) -> RoutingDecision {
        let g = tape.constant(vec![gates.len()], gates.to_vec()).unwrap();
        RoutingDecision {
            scores: None,
            assignment: assignment.to_vec(),
            gate: Some(g),
            source: RouterSource::Stage1Greedy,
            num_experts: n,
        }
    }

    #[test]
    fn identity_centroids_reproduce_rows() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let h = tape.constant(vec![2, 3], vec![0., 1., 0., 0., 0., 0.]).unwrap();
        let s = assignment_scores(&mut tape, h, e).unwrap();
        assert_eq!(tape.value(s), &[0., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn scores_match_hand_matmul() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let e = tape.constant(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 0.0, 4.0]).unwrap();
        let s = assignment_scores(&mut tape, h, e).unwrap();
        // rows: h·e_i
        let expect = [0.5 - 2.0, -1.5 - 0.5, -4.0, 2.0 + 0.5, -6.0 + 0.125, 1.0];
        for (a, b) in tape.value(s).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = tape.constant(vec![3, 3], vec![0.0; 9]).unwrap();
        assert!(assignment_scores(&mut tape, h, bad).unwrap_err().to_string().starts_with("dimension"));
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_assign(&[0.2f32, 0.9], 2).unwrap(), vec![1]);
        assert_eq!(greedy_assign(&[0.5f32, 0.5], 2).unwrap(), vec![0]);
        assert!(greedy_assign::<f32>(&[0.5], 0).is_err());
    }

    #[test]
    fn greedy_matches_row_scan() {
        let mut r = rng(1);
        let s: Vec<f64> = (0..16 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = greedy_assign(&s, 8).unwrap();
        for t in 0..16 {
            let row = &s[t * 8..t * 8 + 8];
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let first = row.iter().position(|&x| x == max).unwrap();
            assert_eq!(got[t], first);
        }
    }

    #[test]
    fn balance_worked_instance() {
        let mut tape = Tape::<f64>::new();
        let d = decision_with_gate(&mut tape, &[0.5; 4], &[0, 0, 0, 1], 2);
        let l = balance_loss(&mut tape, &d, 0.3).unwrap();
        assert!((tape.scalar(l) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn balance_is_zero_when_balanced_or_single_expert() {
        let mut tape = Tape::<f64>::new();
        let d = decision_with_gate(&mut tape, &[0.9, 0.1, 0.7, 0.3], &[0, 1, 1, 0], 2);
        let l = balance_loss(&mut tape, &d, 0.3).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let d = decision_with_gate(&mut tape, &[0.9, 0.1, 0.7], &[0, 0, 0], 1);
        let l = balance_loss(&mut tape, &d, 0.3).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn balance_rejects_untrainable_sources() {
        let mut tape = Tape::<f64>::new();
        let mut d = decision_with_gate(&mut tape, &[0.5; 2], &[0, 1], 2);
        for src in [RouterSource::DistilledFrozen, RouterSource::Auction, RouterSource::Hash] {
            d.source = src;
            assert!(balance_loss(&mut tape, &d, 0.3).unwrap_err().to_string().starts_with("contract"));
        }
        d.source = RouterSource::Switch;
        d.num_experts = 0;
        assert!(balance_loss(&mut tape, &d, 0.3).is_err());
    }

    #[test]
    fn balance_stats_examples() {
        assert_eq!(balance_stats(&[0, 1, 2, 3], 4).unwrap().max_mean_ratio, 1.0);
        assert_eq!(balance_stats(&[2, 2, 2, 2], 4).unwrap().max_mean_ratio, 4.0);
        let s = balance_stats(&[0, 0, 0, 1], 2).unwrap();
        assert_eq!(s.mean_load, 2.0);
        assert_eq!(s.max_mean_ratio, 1.5);
        assert_eq!(s.loads, vec![3, 1]);
    }

    #[test]
    fn stage_losses_compose() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![], vec![1.0]).unwrap();
        let b = tape.constant(vec![], vec![2.0]).unwrap();
        let c = tape.constant(vec![], vec![3.0]).unwrap();
        let z = tape.constant(vec![], vec![0.0]).unwrap();
        let l = stage1_loss(&mut tape, a, b, c).unwrap();
        assert_eq!(tape.scalar(l), 6.0);
        let l = stage1_loss(&mut tape, c, z, z).unwrap();
        assert_eq!(tape.scalar(l), 3.0);
        let t = tape.constant(vec![], vec![5.545]).unwrap();
        let l = stage2_loss(&mut tape, t);
        assert_eq!(tape.scalar(l), 5.545);
    }

    #[test]
    fn stage1_loss_gradient_is_sum_of_term_gradients() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap());
        let grad = |terms: &[usize]| {
            let mut s = store.clone();
            let mut tape = Tape::new();
            let xv = tape.param(&s, x);
            let sq = tape.mul(xv, xv).unwrap();
            let sig = tape.sigmoid(xv).unwrap();
            let t = [tape.sum(sq).unwrap(), tape.sum(sig).unwrap(), tape.sum(xv).unwrap()];
            let zero = tape.constant(vec![], vec![0.0]).unwrap();
            let pick = |i: usize| if terms.contains(&i) { t[i] } else { zero };
            let l = stage1_loss(&mut tape, pick(0), pick(1), pick(2)).unwrap();
            tape.backward(l, &mut s).unwrap();
            s.get(x).grad().unwrap().to_vec()
        };
        let all = grad(&[0, 1, 2]);
        let parts: Vec<Vec<f64>> = (0..3).map(|i| grad(&[i])).collect();
        for j in 0..3 {
            let sum: f64 = parts.iter().map(|p| p[j]).sum();
            assert!((all[j] - sum).abs() < 1e-12);
        }
    }

    fn layer(seed: u64, n: usize) -> (MoeLayer, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let l = MoeLayer::new(&mut store, 4, n, 2, 6, &mut rng(seed)).unwrap();
        (l, store)
    }

    fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
        let mut r = rng(seed);
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(shape, 0.5, &mut r).with_requires_grad(true);
        }
    }

    #[test]
    fn zero_expert_output_is_identity() {
        let (l, store) = layer(2, 3);
        let mut tape = Tape::new();
        let h = tape.input(&Tensor::randn(vec![5, 4], 1.0, &mut rng(3)));
        let s = l.scores(&mut tape, &store, h).unwrap();
        let d = stage1_route(&mut tape, s).unwrap();
        let out = l.forward(&mut tape, &store, h, &d).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_score_gives_half_gate() {
        let (l, mut store) = layer(4, 2);
        let all = l.param_ids();
        randomize(&mut store, &all[3..], 5);
        let mut tape = Tape::new();
        let h = tape.input(&Tensor::randn(vec![3, 4], 1.0, &mut rng(6)));
        let s = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let d = sigmoid_route(&mut tape, s, vec![1, 0, 1], RouterSource::Stage1Greedy).unwrap();
        let out = l.forward(&mut tape, &store, h, &d).unwrap();
        let out = tape.value(out).to_vec();
        let hv = tape.value(h).to_vec();
        for (t, &e) in [1usize, 0, 1].iter().enumerate() {
            let x = tape.gather_rows(h, &[t]).unwrap();
            let delta = l.experts.expert_delta(&mut tape, &store, e, x).unwrap();
            for j in 0..4 {
                let expect = 0.5 * tape.value(delta)[j] + hv[t * 4 + j];
                assert!((out[t * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_expert_index_is_rejected() {
        let (l, store) = layer(7, 2);
        let mut tape = Tape::new();
        let h = tape.input(&Tensor::zeros(vec![1, 4]));
        let d = RoutingDecision {
            scores: None,
            assignment: vec![2],
            gate: None,
            source: RouterSource::Hash,
            num_experts: 2,
        };
        assert!(l.forward(&mut tape, &store, h, &d).unwrap_err().to_string().starts_with("index"));
    }

    #[test]
    fn gradient_is_sparse_over_experts() {
        let (l, mut store) = layer(8, 3);
        let ids = l.param_ids();
        randomize(&mut store, &ids[3..], 9);
        let mut tape = Tape::new();
        let h = tape.input(&Tensor::randn(vec![4, 4], 1.0, &mut rng(10)));
        let s = l.scores(&mut tape, &store, h).unwrap();
        let d = sigmoid_route(&mut tape, s, vec![0, 2, 0, 2], RouterSource::Stage1Greedy).unwrap();
        let out = l.forward(&mut tape, &store, h, &d).unwrap();
        let root = tape.sum(out).unwrap();
        tape.backward(root, &mut store).unwrap();
        let nonzero = |id: ParamId| store.get(id).grad().is_some_and(|g| g.iter().any(|&x| x != 0.0));
        assert!(l.experts.param_ids(1).iter().all(|&id| !nonzero(id)));
        assert!(l.experts.param_ids(0).iter().any(|&id| nonzero(id)));
        let eg = store.get(l.centroids.id).grad().unwrap();
        assert!(eg[..4].iter().any(|&x| x != 0.0));
        assert!(eg[4..8].iter().all(|&x| x == 0.0));
        assert!(eg[8..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gate_path_gradients_match_finite_differences() {
        let (l, mut store) = layer(11, 3);
        let ids = l.param_ids();
        randomize(&mut store, &ids, 12);
        let h0 = Tensor::randn(vec![5, 4], 1.0, &mut rng(13));
        let assignment = vec![2, 0, 1, 2, 0];
        let err = grad_check_params(
            |tape, s| {
                let h = tape.input(&h0);
                let sc = l.scores(tape, s, h)?;
                let d = sigmoid_route(tape, sc, assignment.clone(), RouterSource::Stage1Greedy)?;
                let out = l.forward(tape, s, h, &d)?;
                let w = tape.constant(vec![5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect())?;
                let p = tape.mul(out, w)?;
                tape.sum(p)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
