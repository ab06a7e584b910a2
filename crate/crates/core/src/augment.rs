//! Dataset growth by random perturbation of action plans.
//!
//! Every perturbation draws from its own ChaCha stream keyed by the seed and
//! the (sample, variation) pair, so the output does not depend on how the
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::slm::ActionPlan;

/// Largest |θ| a perturbation may produce.
pub(crate) const THETA_LIMIT: f64 = std::f64::consts::PI - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Variations generated per input plan.
    pub n_p: usize,
    /// Target noise std as a fraction of the plan extent.
    pub pos_sigma: f64,
    pub dt_sigma: f64,
    /// Radians.
    pub theta_sigma: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_p: 0,
            pos_sigma: 0.02,
            dt_sigma: 0.05,
            theta_sigma: 0.05,
            dt_min: 0.01,
            dt_max: 1.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.pos_sigma, self.dt_sigma, self.theta_sigma];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "augmentation sigmas must be finite and non-negative".into(),
            ));
        }
        if !(self.dt_min > 0.0 && self.dt_min < self.dt_max) {
            return Err(Error::InvalidArgument(
                "augmentation dt range must satisfy 0 < dt_min < dt_max".into(),
            ));
        }
        Ok(())
    }

    /// The generator used for variation `variation` of sample `sample`.
    pub fn stream(&self, sample: usize, variation: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((sample as u64) << 32) | variation as u64);
        rng
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative and finite")
}

/// Adds Gaussian noise to every target position, Δt and θ. Structure (stroke
/// count, pen states, stroke shapes) is left untouched. Zero sigmas return
/// the plan unchanged.
pub fn perturb_plan(plan: &ActionPlan, cfg: &AugmentConfig, rng: &mut impl rand::Rng) -> ActionPlan {
    let mut out = plan.clone();
    let pos = normal(cfg.pos_sigma * plan.extent());
    let dt = normal(cfg.dt_sigma);
    let theta = normal(cfg.theta_sigma);
    for t in &mut out.targets {
        t.position += Vec2::new(pos.sample(rng), pos.sample(rng));
    }
    for d in &mut out.dynamics {
        if cfg.dt_sigma > 0.0 {
            d.dt = (d.dt + dt.sample(rng)).clamp(cfg.dt_min, cfg.dt_max);
        }
        if cfg.theta_sigma > 0.0 {
            d.theta = (d.theta + theta.sample(rng)).clamp(-THETA_LIMIT, THETA_LIMIT);
        }
    }
    out
}

/// Originals first, then `n_p` variations of each original in input order;
/// `n * (1 + n_p)` plans in total.
pub fn augment_dataset(samples: &[ActionPlan], cfg: &AugmentConfig) -> Result<Vec<ActionPlan>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("augmentation needs at least one plan".into()));
    }
    for s in samples {
        s.validate()?;
    }
    let mut out = samples.to_vec();
    let variations: Vec<ActionPlan> = (0..samples.len() * cfg.n_p)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cfg.n_p, k % cfg.n_p);
            perturb_plan(&samples[i], cfg, &mut cfg.stream(i, j))
        })
        .collect();
    out.extend(variations);
    Ok(out)
}
