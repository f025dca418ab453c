//! Adam with bias-corrected moments, plus the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrad};

/// Adam defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct AdamState {
    /// First/second moment per parameter, flattened as weights then bias,
    /// indexed like `Graph::params`.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(graph: &Graph<f32>) -> Self {
        let sizes: Vec<usize> = graph
            .params
            .iter()
            .map(|p| p.conv.weights.data.len() + p.conv.bias.len())
            .collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update: t is incremented first, then θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    graph: &mut Graph<f32>,
    state: &mut AdamState,
    grads: &[ParamGrad<f32>],
    lr: f64,
) -> Result<()> {
    if grads.len() != graph.params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameter gradients", graph.params.len()),
            got: format!("{}", grads.len()),
        });
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let corr1 = 1.0 - b1.powi(state.t as i32);
    let corr2 = 1.0 - b2.powi(state.t as i32);

    for (pi, grad) in grads.iter().enumerate() {
        let n_w = graph.params[pi].conv.weights.data.len();
        if grad.weights.data.len() != n_w || grad.bias.len() != graph.params[pi].conv.bias.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("gradient shapes of parameter '{}'", graph.params[pi].name),
                got: "mismatched gradient".into(),
            });
        }
        let flat_grad = grad.weights.data.iter().chain(grad.bias.iter());
        for (ei, &g) in flat_grad.enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}'",
                    graph.params[pi].name
                )));
            }
            let g = g as f64;
            let m = &mut state.m[pi][ei];
            let v = &mut state.v[pi][ei];
            *m = (b1 * *m as f64 + (1.0 - b1) * g) as f32;
            *v = (b2 * *v as f64 + (1.0 - b2) * g * g) as f32;
            let m_hat = *m as f64 / corr1;
            let v_hat = *v as f64 / corr2;
            let step = (lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
            let p = &mut graph.params[pi].conv;
            if ei < n_w {
                p.weights.data[ei] -= step;
            } else {
                p.bias[ei - n_w] -= step;
            }
        }
    }
    Ok(())
}

/// Step decay: lr(u) = initial · factor^(floor((u − start) / interval) + 1)
/// for u ≥ start, else initial.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_start: u64,
    pub decay_interval: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        // paper-scale defaults: 1e-4, x0.2 every 10M updates past 60M
        LrSchedule {
            initial: 1e-4,
            decay_factor: 0.2,
            decay_start: 60_000_000,
            decay_interval: 10_000_000,
        }
    }
}

pub fn lr_at(update: u64, schedule: &LrSchedule) -> f64 {
    if update < schedule.decay_start {
        schedule.initial
    } else {
        let steps = (update - schedule.decay_start) / schedule.decay_interval + 1;
        schedule.initial * schedule.decay_factor.powi(steps as i32)
    }
}
