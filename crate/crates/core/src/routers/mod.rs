//! Routing strategies: greedy (in [`crate::moe`]), softmax-gated switch,
//! auction, fixed hashing, and the distilled router that StableMoE freezes.

mod auction;
mod distilled;
mod hash;

pub use auction::{auction_assign, default_capacity, default_epsilon, scaled_epsilon, AuctionOutcome, AuctionState};
pub use distilled::{distillation_loss, BlobEntry, DistilledRouter, RouterManifest, ROUTER_EXPORT_VERSION};
pub use hash::{build_hash_table, HashTable};

use crate::error::Result;
use crate::moe::{greedy_assign, score_cols, RoutingDecision, RouterSource};
use crate::tensor::{Element, Tape, Var};

/// Greedy selection gated by the softmax probability of the chosen expert.
pub fn switch_route<T: Element>(tape: &mut Tape<T>, scores: Var) -> Result<RoutingDecision> {
    let n = score_cols(tape, scores)?;
    let assignment = greedy_assign(tape.value(scores), n)?;
    let probs = tape.softmax_rows(scores)?;
    let gate = tape.pick(probs, &assignment)?;
    Ok(RoutingDecision {
        scores: Some(scores),
        assignment,
        gate: Some(gate),
        source: RouterSource::Switch,
        num_experts: n,
    })
}

/// Fraction of positions where two assignments agree.
pub fn routing_agreement(student: &[usize], teacher: &[usize]) -> Result<f64> {
    crate::error::ensure!(
        student.len() == teacher.len(),
        Contract,
        "agreement over {} vs {} tokens",
        student.len(),
        teacher.len()
    );
    crate::error::ensure!(!student.is_empty(), Contract, "agreement needs at least one token");
    let same = student.iter().zip(teacher).filter(|(a, b)| a == b).count();
    Ok(same as f64 / student.len() as f64)
}
