use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Element, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter, in registration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T: Element = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam over every trainable parameter that holds a gradient.
/// Parameters without a gradient keep their value and moments.
pub fn adam_step<T: Element>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    adam_step_with(store, state, |_| lr, cfg)
}

/// [`adam_step`] with a learning rate chosen per parameter.
pub fn adam_step_with<T: Element>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr_of: impl Fn(ParamId) -> f64,
    cfg: AdamConfig,
) -> Result<()> {
    ensure!(
        state.m.len() == store.len(),
        Dimension,
        "optimizer tracks {} parameters, store has {}",
        state.m.len(),
        store.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if !p.requires_grad() {
            continue;
        }
        let Some(g) = p.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let lr = lr_of(id);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        ensure!(m.len() == g.len(), Dimension, "moment shape mismatch for parameter {}", id.index());
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.f64();
            let mn = cfg.beta1 * mi.f64() + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * vi.f64() + (1.0 - cfg.beta2) * gi * gi;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *x = T::of(x.f64() - update);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_max`, then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, lr_max: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return lr_max * (step as f64 / warmup_steps as f64);
    }
    lr_max * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    /// Global norm before clipping.
    pub norm: f64,
    pub scale: f64,
}

/// Global L2 norm over all trainable gradients, accumulated in double precision.
pub fn global_grad_norm<T: Element>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm
/// exceeds `max_norm`.
pub fn clip_gradients<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> Result<ClipOutcome> {
    ensure!(max_norm > 0.0, Contract, "max_norm must be positive, got {max_norm}");
    let norm = global_grad_norm(store);
    if norm <= max_norm {
        return Ok(ClipOutcome { norm, scale: 1.0 });
    }
    let scale = max_norm / norm;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).scale_grad(T::of(scale));
    }
    Ok(ClipOutcome { norm, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
    };

    /// Store with a single parameter whose gradient is `g`.
    fn with_grad(x: &[f64], g: &[f64]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![x.len()], x.to_vec()).unwrap());
        let mut tape = Tape::new();
        let xv = tape.param(&store, id);
        let w = tape.constant(vec![g.len()], g.to_vec()).unwrap();
        let p = tape.mul(xv, w).unwrap();
        let root = tape.sum(p).unwrap();
        tape.backward(root, &mut store).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = with_grad(&[0.5], &[1.0]);
        let mut st = OptimizerState::new(&store);
        adam_step(&mut store, &mut st, 0.01, CFG).unwrap();
        let expect = 0.5 - 0.01 / (1.0 + 1e-8);
        assert!((store.get(store.find("x").unwrap()).data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = with_grad(&[0.5, -2.0], &[0.0, 0.0]);
        let mut st = OptimizerState::new(&store);
        adam_step(&mut store, &mut st, 0.01, CFG).unwrap();
        assert_eq!(store.get(store.find("x").unwrap()).data(), &[0.5, -2.0]);
    }

    #[test]
    fn constant_gradient_gives_equal_steps() {
        let mut store = with_grad(&[1.0], &[0.3]);
        let id = store.find("x").unwrap();
        let mut st = OptimizerState::new(&store);
        let x0 = store.get(id).data()[0];
        adam_step(&mut store, &mut st, 0.01, CFG).unwrap();
        let x1 = store.get(id).data()[0];
        adam_step(&mut store, &mut st, 0.01, CFG).unwrap();
        let x2 = store.get(id).data()[0];
        assert!(((x1 - x0).abs() - (x2 - x1).abs()).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = with_grad(&[1.0], &[0.3]);
        let id = store.find("x").unwrap();
        let mut st = OptimizerState::new(&store);
        store.get_mut(id).set_requires_grad(false);
        adam_step(&mut store, &mut st, 0.01, CFG).unwrap();
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(50, 1.0, 100, 1000), 0.5);
        assert_eq!(lr_schedule(100, 1.0, 100, 1000), 1.0);
        assert_eq!(lr_schedule(1000, 1.0, 100, 1000), 0.0);
        assert_eq!(lr_schedule(0, 1.0, 100, 1000), 0.0);
        assert!((lr_schedule(550, 1.0, 100, 1000) - 0.5).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 1.0, 0, 10), 1.0);
    }

    #[test]
    fn clipping_examples() {
        let mut small = with_grad(&[0.0, 0.0], &[0.03, 0.04]);
        let c = clip_gradients(&mut small, 0.1).unwrap();
        assert!((c.norm - 0.05).abs() < 1e-15 && c.scale == 1.0);
        assert_eq!(small.get(small.find("x").unwrap()).grad().unwrap(), &[0.03, 0.04]);

        let mut big = with_grad(&[0.0, 0.0], &[1.2, 1.6]);
        let c = clip_gradients(&mut big, 0.1).unwrap();
        assert!((c.scale - 0.05).abs() < 1e-15);
        assert!((global_grad_norm(&big) - 0.1).abs() < 1e-12);

        let mut zero = with_grad(&[0.0], &[0.0]);
        let c = clip_gradients(&mut zero, 0.1).unwrap();
        assert_eq!(c.norm, 0.0);
        assert_eq!(zero.get(zero.find("x").unwrap()).grad().unwrap(), &[0.0]);
        assert!(clip_gradients(&mut zero, 0.0).is_err());
    }
}
