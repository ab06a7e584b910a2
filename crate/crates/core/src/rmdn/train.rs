//! Truncated BPTT training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lstm::{backward_with, forward_with, LstmState, Mode, Network};
use super::mdn::StepTarget;
use super::{AdamConfig, NetworkConfig};
use crate::error::{Error, Result};

/// One training sequence: network inputs and the targets they predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<StepTarget>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Start/end pairs of overlapping windows of at most `len` steps. Starts are
/// `stride = ⌈len·(1 − overlap)⌉` apart; the last window may be shorter.
pub fn make_segments(n: usize, len: usize, overlap: f64) -> Vec<std::ops::Range<usize>> {
    let len = len.max(1);
    let stride = ((len as f64 * (1.0 - overlap)).ceil() as usize).clamp(1, len);
    let mut out = Vec::new();
    let mut start = 0;
    while start + len < n {
        out.push(start..start + len);
        start += stride;
    }
    out.push(start..n.min(start + len));
    out
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Sequences per optimiser step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub network: Network,
    /// Mean per-step training NLL of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Loss, step count and gradient of one sequence, segment by segment.
/// Each segment starts from the state reached just before its first step.
fn sequence_gradient(
    cfg: &NetworkConfig,
    w: &[f64],
    seq: &Sequence,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, Vec<f64>)> {
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let mut steps = 0;
    let segments = make_segments(seq.len(), cfg.seq_len, cfg.overlap);
    let mut state = LstmState::zeros(cfg);
    for (s, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            continue;
        }
        let f = forward_with(cfg, w, &seq.inputs[seg.clone()], &state, Mode::Train, rng)?;
        let (l, g) = backward_with(cfg, w, &f.steps, &seq.targets[seg.clone()])?;
        loss += l;
        steps += seg.len();
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        if let Some(next) = segments.get(s + 1) {
            state = f.steps[next.start - seg.start - 1].state();
        }
    }
    Ok((loss, steps, grad))
}

/// Trains a freshly initialised network. Sequences are shuffled every
/// epoch; each minibatch sums per-sequence gradients in a fixed order, so
/// results do not depend on thread scheduling.
pub fn train(cfg: &NetworkConfig, data: &[Sequence], opts: &TrainOptions) -> Result<TrainReport> {
    train_with_progress(cfg, data, opts, |_, _| {})
}

pub fn train_with_progress(
    cfg: &NetworkConfig,
    data: &[Sequence],
    opts: &TrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sequence".into()));
    }
    for s in data {
        if s.inputs.len() != s.targets.len() {
            return Err(Error::Dimension {
                expected: s.inputs.len(),
                actual: s.targets.len(),
            });
        }
    }
    let mut net = Network::init(cfg.clone(), opts.seed)?;
    let mut adam = AdamState::new(net.weights.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(opts.seed);
    shuffle.set_stream(u64::MAX);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let w = &net.weights;
            let parts: Vec<Result<(f64, usize, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    sequence_gradient(cfg, w, &data[i], &mut rng)
                })
                .collect();
            let mut grad = vec![0.0; w.len()];
            for part in parts {
                let (l, n, g) = part?;
                total += l;
                count += n;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss or gradient (loss {total})"),
                });
            }
            clip_gradients(&mut grad, cfg.clip_norm);
            adam_step(&mut net.weights, &grad, &mut adam, &cfg.adam);
        }
        let mean = total / count.max(1) as f64;
        progress(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        network: net,
        epoch_losses,
    })
}

/// Mean per-step NLL of whole sequences in inference mode, each from a
/// zero state.
pub fn evaluate(net: &Network, data: &[Sequence]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in data {
        let (params, _) = net.infer(&s.inputs, &LstmState::zeros(&net.config))?;
        total += super::mdn::nll_loss(&params, &s.targets)?;
        count += s.len();
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn segments_of_ten() {
        let starts: Vec<usize> = make_segments(10, 4, 0.5).iter().map(|r| r.start).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
        assert_eq!(make_segments(10, 4, 0.5).last().unwrap().end, 10);
    }

    #[test]
    fn short_sequence_is_one_segment() {
        assert_eq!(make_segments(3, 15, 0.5), vec![0..3]);
        assert_eq!(make_segments(15, 15, 0.5), vec![0..15]);
    }

    #[test]
    fn no_overlap_is_disjoint_with_tail() {
        assert_eq!(make_segments(10, 4, 0.0), vec![0..4, 4..8, 8..10]);
    }

    #[test]
    fn clip_three_four_five() {
        let mut g = vec![3.0, 4.0];
        clip_gradients(&mut g, 2.5);
        assert!((global_norm(&g) - 2.5).abs() < 1e-15);
        assert!((g[0] / g[1] - 0.75).abs() < 1e-15);
        let mut small = vec![0.3, 0.4];
        clip_gradients(&mut small, 2.5);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn clipped_norm_never_exceeds_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.gen_range(1..50);
            let mut g: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let c = rng.gen_range(0.1..20.0);
            clip_gradients(&mut g, c);
            assert!(global_norm(&g) <= c * (1.0 + 1e-12));
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut w = vec![1.0, -2.0];
        let mut st = AdamState {
            m: vec![0.5, 0.5],
            v: vec![0.25, 0.25],
            t: 3,
        };
        let before = w.clone();
        adam_step(&mut w, &[0.0, 0.0], &mut st, &AdamConfig::default());
        assert!((w[0] - before[0]).abs() < 1e-2);
        assert_eq!(st.m, vec![0.45, 0.45]);
        assert!((st.v[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_from_rest() {
        let mut w = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut w, &[0.0, 0.0], &mut st, &AdamConfig::default());
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, 7.0, -3.0] {
            let mut w = vec![0.0];
            adam_step(&mut w, &[g], &mut AdamState::new(1), &cfg);
            let expected = cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!((w[0].abs() - expected).abs() < 1e-15);
            assert!((w[0].abs() - cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimises_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut w = vec![3.0];
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let g = 2.0 * (w[0] - 1.25);
            adam_step(&mut w, &[g], &mut st, &cfg);
        }
        assert!((w[0] - 1.25).abs() < 1e-3);
    }
}
