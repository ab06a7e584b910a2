//! Bivariate Gaussian mixture output head.
//!
//! Raw outputs per step are laid out as
//! `[π̂ (K), μ₁ (K), μ₂ (K), σ̂₁ (K), σ̂₂ (K), ρ̂ (K), ê?]`.


use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture parameters for one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmStepParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec2>,
    pub deviations: Vec<Vec2>,
    pub correlations: Vec<f64>,
    /// Probability that the step ends with the pen lifted.
    pub pen: Option<f64>,
}

/// Expected target for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTarget {
    pub y: Vec2,
    /// Ignored by networks without a pen head.
    pub pen: bool,
}

impl StepTarget {
    pub fn new(x: f64, y: f64) -> Self {
        StepTarget {
            y: Vec2::new(x, y),
            pen: false,
        }
    }
}

pub fn output_dim(k: usize, pen_head: bool) -> usize {
    6 * k + usize::from(pen_head)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + xs.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

fn log_softmax(raw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(raw);
    raw.iter().map(|x| x - lse).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Applies the output transforms to one raw step.
pub fn transform(raw: &[f64], k: usize, pen_head: bool) -> GmmStepParams {
    let logw = log_softmax(&raw[..k]);
    GmmStepParams {
        weights: logw.iter().map(|l| l.exp()).collect(),
        means: (0..k).map(|j| Vec2::new(raw[k + j], raw[2 * k + j])).collect(),
        deviations: (0..k)
            .map(|j| Vec2::new(raw[3 * k + j].exp(), raw[4 * k + j].exp()))
            .collect(),
        correlations: (0..k).map(|j| raw[5 * k + j].tanh()).collect(),
        pen: pen_head.then(|| sigmoid(raw[6 * k])),
    }
}

/// Density of a correlated bivariate normal, evaluated in closed form.
pub fn bivariate_pdf(y: Vec2, mu: Vec2, sigma: Vec2, rho: f64) -> f64 {
    log_bivariate(y, mu, sigma, rho).exp()
}

pub fn log_bivariate(y: Vec2, mu: Vec2, sigma: Vec2, rho: f64) -> f64 {
    let d1 = (y.x - mu.x) / sigma.x;
    let d2 = (y.y - mu.y) / sigma.y;
    let q = 1.0 - rho * rho;
    let z = d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2;
    -LN_2PI - sigma.x.ln() - sigma.y.ln() - 0.5 * q.ln() - z / (2.0 * q)
}

/// Negative log-likelihood of a sequence, summed over steps. Infinite when
/// every component density underflows.
pub fn nll_loss(params: &[GmmStepParams], targets: &[StepTarget]) -> Result<f64> {
    if params.len() != targets.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            actual: targets.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in params.iter().zip(targets) {
        let terms: Vec<f64> = (0..p.weights.len())
            .map(|j| p.weights[j].ln() + log_bivariate(t.y, p.means[j], p.deviations[j], p.correlations[j]))
            .collect();
        total -= log_sum_exp(&terms);
        if let Some(e) = p.pen {
            total -= if t.pen { e.ln() } else { (1.0 - e).ln() };
        }
    }
    Ok(if total.is_nan() { f64::INFINITY } else { total })
}

/// Loss of one raw step and its gradient with respect to the raw outputs.
pub(crate) fn step_loss_grad(raw: &[f64], k: usize, pen_head: bool, target: &StepTarget, grad: &mut [f64]) -> f64 {
    let logw = log_softmax(&raw[..k]);
    let mut terms = vec![0.0; k];
    let mut parts = Vec::with_capacity(k);
    for j in 0..k {
        let (s1, s2) = (raw[3 * k + j].exp(), raw[4 * k + j].exp());
        let rho = raw[5 * k + j].tanh();
        let d1 = (target.y.x - raw[k + j]) / s1;
        let d2 = (target.y.y - raw[2 * k + j]) / s2;
        let q = 1.0 - rho * rho;
        let z = d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2;
        terms[j] = logw[j] - LN_2PI - raw[3 * k + j] - raw[4 * k + j] - 0.5 * q.ln() - z / (2.0 * q);
        parts.push((s1, s2, rho, d1, d2, q, z));
    }
    let lse = log_sum_exp(&terms);
    let mut loss = -lse;
    for j in 0..k {
        let gamma = (terms[j] - lse).exp();
        let (s1, s2, rho, d1, d2, q, z) = parts[j];
        grad[j] = logw[j].exp() - gamma;
        grad[k + j] = -gamma * (d1 - rho * d2) / (s1 * q);
        grad[2 * k + j] = -gamma * (d2 - rho * d1) / (s2 * q);
        grad[3 * k + j] = -gamma * (-1.0 + (d1 * d1 - rho * d1 * d2) / q);
        grad[4 * k + j] = -gamma * (-1.0 + (d2 * d2 - rho * d1 * d2) / q);
        grad[5 * k + j] = -gamma * (rho + d1 * d2 - z * rho / q);
    }
    if pen_head {
        let logit = raw[6 * k];
        let u = if target.pen { 1.0 } else { 0.0 };
        loss += softplus(logit) - u * logit;
        grad[6 * k] = sigmoid(logit) - u;
    }
    loss
}

/// Draws a point (and pen bit) from the mixture.
pub fn sample_gmm(params: &GmmStepParams, rng: &mut impl Rng) -> (Vec2, bool) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = params.weights.len() - 1;
    for (j, w) in params.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = j;
            break;
        }
    }
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let (mu, s, rho) = (params.means[k], params.deviations[k], params.correlations[k]);
    let y = Vec2::new(
        mu.x + s.x * z1,
        mu.y + s.y * (rho * z1 + (1.0 - rho * rho).sqrt() * z2),
    );
    let pen = params.pen.is_some_and(|e| rng.gen::<f64>() < e);
    (y, pen)
}
