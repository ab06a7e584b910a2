//! Stacked LSTM forward and backward passes.
//!
//! Gate order inside every 4H block is input, forget, cell, output.
//! Optional peepholes connect the previous cell to the input and forget
//! gates and the new cell to the output gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mdn::{self, GmmStepParams, StepTarget};
use super::NetworkConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic, no dropout.
    Infer,
    /// Dropout masks drawn from the supplied generator.
    Train,
}

/// Per-layer hidden and cell vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        LstmState {
            h: vec![vec![0.0; cfg.hidden_dim]; cfg.layers],
            c: vec![vec![0.0; cfg.hidden_dim]; cfg.layers],
        }
    }

    fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let dims_ok = self.h.len() == cfg.layers
            && self.c.len() == cfg.layers
            && self.h.iter().chain(&self.c).all(|v| v.len() == cfg.hidden_dim);
        if dims_ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("state dimensions do not match the network".into()))
        }
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Layer input after dropout.
    x: Vec<f64>,
    /// Dropout mask applied to `x` (layers above the first).
    mask: Option<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
}

/// Activations of one time step kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    layers: Vec<LayerCache>,
    out_mask: Option<Vec<f64>>,
    /// Raw head outputs.
    pub raw: Vec<f64>,
}

impl StepCache {
    /// Recurrent state after this step.
    pub fn state(&self) -> LstmState {
        LstmState {
            h: self.layers.iter().map(|l| l.h.clone()).collect(),
            c: self.layers.iter().map(|l| l.c.clone()).collect(),
        }
    }
}

pub struct Forward {
    pub steps: Vec<StepCache>,
    pub state: LstmState,
}

impl Forward {
    pub fn params(&self, cfg: &NetworkConfig) -> Vec<GmmStepParams> {
        self.steps
            .iter()
            .map(|s| mdn::transform(&s.raw, cfg.num_gaussians, cfg.pen_head))
            .collect()
    }
}

#[derive(Clone, Copy)]
struct LayerOffsets {
    input: usize,
    w_in: usize,
    w_rec: usize,
    bias: usize,
    peep: Option<usize>,
}

#[derive(Clone)]
struct Layout {
    layers: Vec<LayerOffsets>,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn of(cfg: &NetworkConfig) -> Self {
        let manifest = cfg.manifest();
        let find = |name: &str| manifest.iter().find(|b| b.name == name).map(|b| b.offset);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                input: if l == 0 { cfg.input_dim } else { cfg.hidden_dim },
                w_in: find(&format!("lstm{l}.w_in")).unwrap(),
                w_rec: find(&format!("lstm{l}.w_rec")).unwrap(),
                bias: find(&format!("lstm{l}.bias")).unwrap(),
                peep: find(&format!("lstm{l}.peep")),
            })
            .collect();
        Layout {
            layers,
            out_w: find("out.w").unwrap(),
            out_b: find("out.bias").unwrap(),
            total: manifest.iter().map(|b| b.len()).sum(),
        }
    }
}

/// out += W x, W row-major rows × cols.
fn gemv(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Wᵀ v.
fn gemv_t(w: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// G += a bᵀ.
fn outer(g: &mut [f64], cols: usize, a: &[f64], b: &[f64]) {
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (o, bv) in row.iter_mut().zip(b) {
            *o += ar * bv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dropout_mask(n: usize, keep: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Network configuration plus flat weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub weights: Vec<f64>,
}

impl Network {
    pub fn new(config: NetworkConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if weights.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: weights.len(),
            });
        }
        Ok(Network { config, weights })
    }

    /// Orthogonal recurrent blocks, uniform input and output weights scaled
    /// by fan-in, forget-gate bias 1.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let layout = Layout::of(&config);
        let mut w = vec![0.0; layout.total];
        for lay in &layout.layers {
            let bound = 1.0 / (lay.input as f64).sqrt();
            for v in &mut w[lay.w_in..lay.w_in + 4 * h * lay.input] {
                *v = rng.gen_range(-bound..bound);
            }
            for gate in 0..4 {
                let m = nalgebra::DMatrix::<f64>::from_fn(h, h, |_, _| rng.sample(StandardNormal));
                let q = m.qr().q();
                for r in 0..h {
                    for c in 0..h {
                        w[lay.w_rec + (gate * h + r) * h + c] = q[(r, c)];
                    }
                }
            }
            for v in &mut w[lay.bias + h..lay.bias + 2 * h] {
                *v = 1.0;
            }
        }
        let bound = 1.0 / (h as f64).sqrt();
        for v in &mut w[layout.out_w..layout.out_w + config.output_dim() * h] {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(Network { config, weights: w })
    }

    /// Runs the network over `xs` from `state`. Train mode draws dropout
    /// masks from `rng`; infer mode never touches it.
    pub fn forward(&self, xs: &[Vec<f64>], state: &LstmState, mode: Mode, rng: &mut impl Rng) -> Result<Forward> {
        forward_with(&self.config, &self.weights, xs, state, mode, rng)
    }

    /// Inference over a sequence, no caches kept beyond the outputs.
    pub fn infer(&self, xs: &[Vec<f64>], state: &LstmState) -> Result<(Vec<GmmStepParams>, LstmState)> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(xs, state, Mode::Infer, &mut unused)?;
        let params = f.params(&self.config);
        Ok((params, f.state))
    }

    /// One inference step, updating `state` in place.
    pub fn step(&self, x: &[f64], state: &mut LstmState) -> Result<GmmStepParams> {
        let (mut params, next) = self.infer(&[x.to_vec()], state)?;
        *state = next;
        Ok(params.pop().unwrap())
    }

    /// Summed loss of `steps` against `targets` and its gradient with
    /// respect to every weight.
    pub fn backward(&self, steps: &[StepCache], targets: &[StepTarget]) -> Result<(f64, Vec<f64>)> {
        backward_with(&self.config, &self.weights, steps, targets)
    }
}

pub(crate) fn forward_with(
    cfg: &NetworkConfig,
    w: &[f64],
    xs: &[Vec<f64>],
    state: &LstmState,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Forward> {
    state.check(cfg)?;
    let layout = Layout::of(cfg);
    let h = cfg.hidden_dim;
    let dropout = mode == Mode::Train && cfg.dropout_keep < 1.0;
    let mut hs = state.h.clone();
    let mut cs = state.c.clone();
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        if x.len() != cfg.input_dim {
            return Err(Error::Dimension {
                expected: cfg.input_dim,
                actual: x.len(),
            });
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut below = x.clone();
        for (l, lay) in layout.layers.iter().enumerate() {
            let mask = (l > 0 && dropout).then(|| dropout_mask(h, cfg.dropout_keep, rng));
            if let Some(m) = &mask {
                for (v, k) in below.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            let mut a = w[lay.bias..lay.bias + 4 * h].to_vec();
            gemv(&w[lay.w_in..], lay.input, &below, &mut a);
            gemv(&w[lay.w_rec..], h, &hs[l], &mut a);
            let c_prev = &cs[l];
            let (mut i, mut f, mut g, mut o) = (vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]);
            let mut c = vec![0.0; h];
            for u in 0..h {
                let (pi, pf) = match lay.peep {
                    Some(p) => (w[p + u] * c_prev[u], w[p + h + u] * c_prev[u]),
                    None => (0.0, 0.0),
                };
                i[u] = sigmoid(a[u] + pi);
                f[u] = sigmoid(a[h + u] + pf);
                g[u] = a[2 * h + u].tanh();
                c[u] = f[u] * c_prev[u] + i[u] * g[u];
                let po = lay.peep.map_or(0.0, |p| w[p + 2 * h + u] * c[u]);
                o[u] = sigmoid(a[3 * h + u] + po);
            }
            let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let hn: Vec<f64> = o.iter().zip(&tc).map(|(a, b)| a * b).collect();
            layers.push(LayerCache {
                x: below,
                mask,
                h_prev: hs[l].clone(),
                c_prev: c_prev.clone(),
                i,
                f,
                g,
                o,
                c: c.clone(),
                tc,
                h: hn.clone(),
            });
            hs[l] = hn.clone();
            cs[l] = c;
            below = hn;
        }
        let out_mask = dropout.then(|| dropout_mask(h, cfg.dropout_keep, rng));
        if let Some(m) = &out_mask {
            for (v, k) in below.iter_mut().zip(m) {
                *v *= k;
            }
        }
        let mut raw = w[layout.out_b..layout.out_b + cfg.output_dim()].to_vec();
        gemv(&w[layout.out_w..], h, &below, &mut raw);
        steps.push(StepCache {
            layers,
            out_mask,
            raw,
        });
    }
    Ok(Forward {
        steps,
        state: LstmState { h: hs, c: cs },
    })
}

pub(crate) fn backward_with(
    cfg: &NetworkConfig,
    w: &[f64],
    steps: &[StepCache],
    targets: &[StepTarget],
) -> Result<(f64, Vec<f64>)> {
    if steps.len() != targets.len() {
        return Err(Error::Dimension {
            expected: steps.len(),
            actual: targets.len(),
        });
    }
    let layout = Layout::of(cfg);
    let h = cfg.hidden_dim;
    let k = cfg.num_gaussians;
    let odim = cfg.output_dim();
    let mut grad = vec![0.0; layout.total];
    let mut loss = 0.0;

    // head: loss gradients flow into the top hidden state of every step
    let mut dh_above: Vec<Vec<f64>> = Vec::with_capacity(steps.len());
    let mut dy = vec![0.0; odim];
    for (s, t) in steps.iter().zip(targets) {
        loss += mdn::step_loss_grad(&s.raw, k, cfg.pen_head, t, &mut dy);
        let top = s.layers.last().unwrap();
        let mut input = top.h.clone();
        if let Some(m) = &s.out_mask {
            for (v, q) in input.iter_mut().zip(m) {
                *v *= q;
            }
        }
        outer(&mut grad[layout.out_w..layout.out_w + odim * h], h, &dy, &input);
        for (g, d) in grad[layout.out_b..layout.out_b + odim].iter_mut().zip(&dy) {
            *g += d;
        }
        let mut dh = vec![0.0; h];
        gemv_t(&w[layout.out_w..], h, &dy, &mut dh);
        if let Some(m) = &s.out_mask {
            for (v, q) in dh.iter_mut().zip(m) {
                *v *= q;
            }
        }
        dh_above.push(dh);
    }

    for l in (0..cfg.layers).rev() {
        let lay = layout.layers[l];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dh_below: Vec<Vec<f64>> = vec![Vec::new(); steps.len()];
        let mut da = vec![0.0; 4 * h];
        for t in (0..steps.len()).rev() {
            let c = &steps[t].layers[l];
            let mut dc_prev = vec![0.0; h];
            for u in 0..h {
                let dh = dh_above[t][u] + dh_next[u];
                let da_o = dh * c.tc[u] * c.o[u] * (1.0 - c.o[u]);
                let mut dc = dc_next[u] + dh * c.o[u] * (1.0 - c.tc[u] * c.tc[u]);
                if let Some(p) = lay.peep {
                    dc += da_o * w[p + 2 * h + u];
                }
                let da_i = dc * c.g[u] * c.i[u] * (1.0 - c.i[u]);
                let da_g = dc * c.i[u] * (1.0 - c.g[u] * c.g[u]);
                let da_f = dc * c.c_prev[u] * c.f[u] * (1.0 - c.f[u]);
                dc_prev[u] = dc * c.f[u];
                if let Some(p) = lay.peep {
                    dc_prev[u] += da_i * w[p + u] + da_f * w[p + h + u];
                    grad[p + u] += da_i * c.c_prev[u];
                    grad[p + h + u] += da_f * c.c_prev[u];
                    grad[p + 2 * h + u] += da_o * c.c[u];
                }
                da[u] = da_i;
                da[h + u] = da_f;
                da[2 * h + u] = da_g;
                da[3 * h + u] = da_o;
            }
            outer(&mut grad[lay.w_in..lay.w_in + 4 * h * lay.input], lay.input, &da, &c.x);
            outer(&mut grad[lay.w_rec..lay.w_rec + 4 * h * h], h, &da, &c.h_prev);
            for (g, d) in grad[lay.bias..lay.bias + 4 * h].iter_mut().zip(&da) {
                *g += d;
            }
            let mut dh_prev = vec![0.0; h];
            gemv_t(&w[lay.w_rec..], h, &da, &mut dh_prev);
            if l > 0 {
                let mut dx = vec![0.0; lay.input];
                gemv_t(&w[lay.w_in..], lay.input, &da, &mut dx);
                if let Some(m) = &c.mask {
                    for (v, q) in dx.iter_mut().zip(m) {
                        *v *= q;
                    }
                }
                dh_below[t] = dx;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dh_above = dh_below;
    }
    Ok((loss, grad))
}
