use crate::error::{ensure, Result};
use crate::model::{Batch, Model};
use crate::tensor::{Element, ParamStore, Tape};

/// Full windows scored per forward pass.
const WINDOWS_PER_PASS: usize = 16;

/// Mean next-token cross-entropy over `stream`, scored in non-overlapping
/// windows of `seq_len` predictions with evaluation routing.
pub fn evaluate_loss<T: Element>(model: &Model, store: &ParamStore<T>, stream: &[usize], seq_len: usize) -> Result<f64> {
    ensure!(stream.len() >= 2, Contract, "evaluation needs at least 2 tokens, got {}", stream.len());
    ensure!(seq_len >= 1, Contract, "seq_len must be positive");
    let predictions = stream.len() - 1;
    let full = predictions / seq_len;
    let mut total = 0.0f64;
    let mut w = 0;
    while w < full {
        let k = WINDOWS_PER_PASS.min(full - w);
        let offsets: Vec<usize> = (w..w + k).map(|i| i * seq_len).collect();
        total += batch_loss(model, store, &Batch::from_offsets(stream, &offsets, seq_len)?)?;
        w += k;
    }
    let rest = predictions - full * seq_len;
    if rest > 0 {
        total += batch_loss(model, store, &Batch::from_offsets(stream, &[full * seq_len], rest)?)?;
    }
    Ok(total / predictions as f64)
}

/// Summed cross-entropy of one batch.
fn batch_loss<T: Element>(model: &Model, store: &ParamStore<T>, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::inference();
    let out = model.forward_eval(&mut tape, store, batch)?;
    Ok(tape.scalar(out.task).f64() * batch.len() as f64)
}

/// `exp` of [`evaluate_loss`].
pub fn evaluate_ppl<T: Element>(model: &Model, store: &ParamStore<T>, stream: &[usize], seq_len: usize) -> Result<f64> {
    Ok(evaluate_loss(model, store, stream, seq_len)?.exp())
}
