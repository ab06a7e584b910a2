//! Style learning applications built on the recurrent mixture-density
//! network.
//!
//! * **DPP** (dynamic parameter prediction) predicts `(Δt, θ)` for every
//!   stroke of a user-supplied list of virtual targets.
//! * **Stylisation** reconstructs a trace, discards its dynamics and lets a
//!   DPP model choose new ones.
//! * **VTP** (virtual target prediction) generates sparse target sequences;
//!   paired with a DPP model it draws complete tags.
//!
//! Step `i` of a DPP sequence sees stroke `i`'s displacement and pen flag
//! and the previous stroke's dynamics, and predicts stroke `i`'s dynamics.
//! The first stroke has no predecessor; it receives the dataset mean, which
//! is zero after normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentConfig, THETA_LIMIT};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::reconstruct::{reconstruct_plan, RawTrace, ReconstructionConfig};
use crate::rmdn::{
    nll_loss, sample_gmm, train_with_progress, GmmStepParams, LstmState, ModelCheckpoint, ModelKind, Network,
    NetworkConfig, Sequence, StepTarget, TrainOptions, TrainingMeta,
};
use crate::slm::{integrate_trajectory, ActionPlan, DynamicParams, IntegrationConfig, Trajectory, VirtualTarget};

pub use crate::rmdn::{FeatureStats, NormStats};

pub const DPP_INPUT_DIM: usize = 5;
pub const VTP_INPUT_DIM: usize = 3;

/// Plans chained into one training sequence when a model learns several
/// styles, so the recurrent state learns to carry style from one plan to the
/// next.
pub const STYLE_CHAIN: usize = 4;

/// Pen-up probability and run length that end VTP generation.
pub const VTP_STOP_PROBABILITY: f64 = 0.95;
pub const VTP_STOP_RUN: usize = 3;

/// Stream offset separating VTP sampling from DPP's per-stroke streams.
const VTP_STREAM: u64 = 1 << 40;

/// A style exemplar, fed to a model verbatim before prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimerExample {
    pub plan: ActionPlan,
    pub label: String,
}

impl PrimerExample {
    pub fn new(plan: ActionPlan, label: impl Into<String>) -> Self {
        PrimerExample {
            plan,
            label: label.into(),
        }
    }
}

/// Truncated BPTT length for a model trained on `styles` styles.
pub fn default_seq_len(styles: usize) -> usize {
    if styles > 1 {
        64
    } else {
        15
    }
}

/// Relative displacement of every stroke.
pub fn stroke_displacements(plan: &ActionPlan) -> Vec<Vec2> {
    plan.targets.windows(2).map(|w| w[1].position - w[0].position).collect()
}

fn pen_bit(up: bool) -> f64 {
    if up {
        1.0
    } else {
        0.0
    }
}

/// Statistics of the DPP features `[Δv.x, Δv.y, prev Δt, prev θ]` and
/// targets `(Δt, θ)`.
///
/// The first stroke of every plan is given the mean of the genuine previous
/// dynamics, so its normalised token is zero and the fitted column mean is
/// unchanged by it.
pub fn dpp_stats(plans: &[ActionPlan]) -> NormStats {
    let mut cols: [Vec<f64>; 4] = Default::default();
    let (mut dts, mut thetas) = (Vec::new(), Vec::new());
    let (mut prev_dt, mut prev_theta) = (Vec::new(), Vec::new());
    for p in plans {
        for (i, dv) in stroke_displacements(p).into_iter().enumerate() {
            cols[0].push(dv.x);
            cols[1].push(dv.y);
            dts.push(p.dynamics[i].dt);
            thetas.push(p.dynamics[i].theta);
            if i > 0 {
                prev_dt.push(p.dynamics[i - 1].dt);
                prev_theta.push(p.dynamics[i - 1].theta);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (fill_dt, fill_theta) = (mean(&prev_dt), mean(&prev_theta));
    for p in plans {
        if !p.dynamics.is_empty() {
            prev_dt.push(fill_dt);
            prev_theta.push(fill_theta);
        }
    }
    cols[2] = prev_dt;
    cols[3] = prev_theta;
    NormStats {
        inputs: cols.iter().map(|c| FeatureStats::fit(c)).collect(),
        targets: vec![FeatureStats::fit(&dts), FeatureStats::fit(&thetas)],
    }
}

fn dpp_input(dv: Vec2, pen_up: bool, prev: [f64; 2], stats: &NormStats) -> Vec<f64> {
    let s = &stats.inputs;
    vec![s[0].normalise(dv.x), s[1].normalise(dv.y), pen_bit(pen_up), prev[0], prev[1]]
}

fn prev_token(d: DynamicParams, stats: &NormStats) -> [f64; 2] {
    [stats.inputs[2].normalise(d.dt), stats.inputs[3].normalise(d.theta)]
}

fn dpp_normalise(d: DynamicParams, stats: &NormStats) -> [f64; 2] {
    [stats.targets[0].normalise(d.dt), stats.targets[1].normalise(d.theta)]
}

/// `m - 1` input/target pairs of a plan.
pub fn encode_dpp(plan: &ActionPlan, stats: &NormStats) -> Sequence {
    let mut inputs = Vec::with_capacity(plan.stroke_count());
    let mut targets = Vec::with_capacity(plan.stroke_count());
    for (i, dv) in stroke_displacements(plan).into_iter().enumerate() {
        let prev = match i {
            0 => [0.0, 0.0],
            _ => prev_token(plan.dynamics[i - 1], stats),
        };
        inputs.push(dpp_input(dv, plan.targets[i + 1].pen_up, prev, stats));
        let t = dpp_normalise(plan.dynamics[i], stats);
        targets.push(StepTarget::new(t[0], t[1]));
    }
    Sequence { inputs, targets }
}

/// Denormalised dynamics of DPP targets, without clamping.
pub fn decode_dpp(targets: &[StepTarget], stats: &NormStats) -> Vec<DynamicParams> {
    targets
        .iter()
        .map(|t| DynamicParams::new(stats.targets[0].denormalise(t.y.x), stats.targets[1].denormalise(t.y.y)))
        .collect()
}

/// Statistics of stroke displacements, shared by VTP inputs and targets.
pub fn vtp_stats(plans: &[ActionPlan]) -> NormStats {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for p in plans {
        for dv in stroke_displacements(p) {
            xs.push(dv.x);
            ys.push(dv.y);
        }
    }
    let f = vec![FeatureStats::fit(&xs), FeatureStats::fit(&ys)];
    NormStats {
        inputs: f.clone(),
        targets: f,
    }
}

fn vtp_input(dv: Vec2, pen_up: bool, stats: &NormStats) -> Vec<f64> {
    vec![stats.inputs[0].normalise(dv.x), stats.inputs[1].normalise(dv.y), pen_bit(pen_up)]
}

/// Next-stroke prediction over a plan: `m - 2` pairs.
pub fn encode_vtp(plan: &ActionPlan, stats: &NormStats) -> Sequence {
    let dvs = stroke_displacements(plan);
    let mut seq = Sequence {
        inputs: Vec::new(),
        targets: Vec::new(),
    };
    for i in 0..dvs.len().saturating_sub(1) {
        seq.inputs.push(vtp_input(dvs[i], plan.targets[i + 1].pen_up, stats));
        let next = dvs[i + 1];
        seq.targets.push(StepTarget {
            y: Vec2::new(stats.targets[0].normalise(next.x), stats.targets[1].normalise(next.y)),
            pen: plan.targets[i + 2].pen_up,
        });
    }
    seq
}

/// The plan followed by the end of the drawing: `VTP_STOP_RUN + 1` pen-up
/// targets resting at the final position. VTP models train on end-marked
/// plans, which teaches the stop signal generation looks for.
pub fn end_marked(plan: &ActionPlan) -> ActionPlan {
    let mut out = plan.clone();
    if let Some(&last) = plan.targets.last() {
        for _ in 0..=VTP_STOP_RUN {
            out.targets.push(VirtualTarget {
                position: last.position,
                pen_up: true,
            });
            out.dynamics.push(DynamicParams::new(0.5, 0.0));
            out.shapes.push(Default::default());
        }
    }
    out
}

fn concat(parts: impl IntoIterator<Item = Sequence>) -> Sequence {
    let mut out = Sequence {
        inputs: Vec::new(),
        targets: Vec::new(),
    };
    for p in parts {
        out.inputs.extend(p.inputs);
        out.targets.extend(p.targets);
    }
    out
}

/// Augmented plans with the index of the example each came from.
fn augment_labelled(examples: &[PrimerExample], aug: &AugmentConfig) -> Result<Vec<(usize, ActionPlan)>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one example".into()));
    }
    let plans: Vec<ActionPlan> = examples.iter().map(|e| e.plan.clone()).collect();
    let n = plans.len();
    let all = augment_dataset(&plans, aug)?;
    Ok(all
        .into_iter()
        .enumerate()
        .map(|(k, p)| (if k < n { k } else { (k - n) / aug.n_p }, p))
        .collect())
}

fn style_count(examples: &[PrimerExample]) -> usize {
    let mut labels: Vec<&str> = examples.iter().map(|e| e.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    labels.len()
}

/// One sequence per plan for a single style; for several styles, runs of
/// [`STYLE_CHAIN`] same-style plans.
fn build_sequences(
    examples: &[PrimerExample],
    plans: &[(usize, ActionPlan)],
    encode: impl Fn(&ActionPlan) -> Sequence,
) -> Vec<Sequence> {
    if style_count(examples) <= 1 {
        return plans.iter().map(|(_, p)| encode(p)).filter(|s| !s.is_empty()).collect();
    }
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for e in examples {
        if seen.contains(&e.label) {
            continue;
        }
        seen.push(e.label.clone());
        let members: Vec<&ActionPlan> = plans
            .iter()
            .filter(|(i, _)| examples[*i].label == e.label)
            .map(|(_, p)| p)
            .collect();
        for chunk in members.chunks(STYLE_CHAIN) {
            let seq = concat(chunk.iter().map(|p| encode(p)));
            if !seq.is_empty() {
                out.push(seq);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn fit(
    kind: ModelKind,
    data: &[Sequence],
    stats: NormStats,
    net: &NetworkConfig,
    opts: &TrainOptions,
    primers: Vec<PrimerExample>,
    dt_range: [f64; 2],
    progress: impl FnMut(usize, f64),
) -> Result<ModelCheckpoint> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("examples produced no training steps".into()));
    }
    let report = train_with_progress(net, data, opts, progress)?;
    let meta = TrainingMeta {
        epochs: opts.epochs,
        final_loss: report.final_loss(),
        seed: opts.seed,
        loss_curve: report.epoch_losses.clone(),
        dt_range,
    };
    ModelCheckpoint::new(kind, report.network, stats, meta, primers)
}

/// Trains a DPP model: augment, fit statistics, encode, train. The
/// network's input size and pen head are set by the encoding.
pub fn train_dpp(
    examples: &[PrimerExample],
    aug: &AugmentConfig,
    net: &NetworkConfig,
    opts: &TrainOptions,
) -> Result<ModelCheckpoint> {
    train_dpp_with_progress(examples, aug, net, opts, |_, _| {})
}

pub fn train_dpp_with_progress(
    examples: &[PrimerExample],
    aug: &AugmentConfig,
    net: &NetworkConfig,
    opts: &TrainOptions,
    progress: impl FnMut(usize, f64),
) -> Result<ModelCheckpoint> {
    let plans = augment_labelled(examples, aug)?;
    let all: Vec<ActionPlan> = plans.iter().map(|(_, p)| p.clone()).collect();
    let stats = dpp_stats(&all);
    let data = build_sequences(examples, &plans, |p| encode_dpp(p, &stats));
    let net = NetworkConfig {
        input_dim: DPP_INPUT_DIM,
        pen_head: false,
        ..net.clone()
    };
    fit(
        ModelKind::Dpp,
        &data,
        stats,
        &net,
        opts,
        examples.to_vec(),
        [aug.dt_min, aug.dt_max],
        progress,
    )
}

/// Trains a VTP model on end-marked examples. Augmentation perturbs target
/// positions only, including those of the end marker.
pub fn train_vtp(
    examples: &[PrimerExample],
    aug: &AugmentConfig,
    net: &NetworkConfig,
    opts: &TrainOptions,
) -> Result<ModelCheckpoint> {
    train_vtp_with_progress(examples, aug, net, opts, |_, _| {})
}

pub fn train_vtp_with_progress(
    examples: &[PrimerExample],
    aug: &AugmentConfig,
    net: &NetworkConfig,
    opts: &TrainOptions,
    progress: impl FnMut(usize, f64),
) -> Result<ModelCheckpoint> {
    let aug = AugmentConfig {
        dt_sigma: 0.0,
        theta_sigma: 0.0,
        ..*aug
    };
    let marked: Vec<PrimerExample> = examples
        .iter()
        .map(|e| PrimerExample::new(end_marked(&e.plan), e.label.clone()))
        .collect();
    let plans = augment_labelled(&marked, &aug)?;
    let all: Vec<ActionPlan> = plans.iter().map(|(_, p)| p.clone()).collect();
    let stats = vtp_stats(&all);
    let data = build_sequences(&marked, &plans, |p| encode_vtp(p, &stats));
    let net = NetworkConfig {
        input_dim: VTP_INPUT_DIM,
        pen_head: true,
        ..net.clone()
    };
    fit(
        ModelKind::Vtp,
        &data,
        stats,
        &net,
        opts,
        examples.to_vec(),
        [aug.dt_min, aug.dt_max],
        progress,
    )
}

/// Mean per-step NLL of a stationary bivariate Gaussian (plus a Bernoulli
/// pen rate when `pen` is set) fitted to the training targets.
pub fn gaussian_baseline_nll(train: &[Sequence], test: &[Sequence], pen: bool) -> Result<f64> {
    let ys: Vec<&StepTarget> = train.iter().flat_map(|s| &s.targets).collect();
    if ys.is_empty() {
        return Err(Error::InvalidArgument("baseline needs training targets".into()));
    }
    let n = ys.len() as f64;
    let mx = ys.iter().map(|t| t.y.x).sum::<f64>() / n;
    let my = ys.iter().map(|t| t.y.y).sum::<f64>() / n;
    let vx = ys.iter().map(|t| (t.y.x - mx).powi(2)).sum::<f64>() / n;
    let vy = ys.iter().map(|t| (t.y.y - my).powi(2)).sum::<f64>() / n;
    let cxy = ys.iter().map(|t| (t.y.x - mx) * (t.y.y - my)).sum::<f64>() / n;
    let (sx, sy) = (vx.sqrt().max(1e-9), vy.sqrt().max(1e-9));
    let rho = (cxy / (sx * sy)).clamp(-0.999_999, 0.999_999);
    let rate = (ys.iter().filter(|t| t.pen).count() as f64 / n).clamp(1e-6, 1.0 - 1e-6);
    let params = GmmStepParams {
        weights: vec![1.0],
        means: vec![Vec2::new(mx, my)],
        deviations: vec![Vec2::new(sx, sy)],
        correlations: vec![rho],
        pen: pen.then_some(rate),
    };
    let (mut total, mut count) = (0.0, 0usize);
    for s in test {
        total += nll_loss(&vec![params.clone(); s.len()], &s.targets)?;
        count += s.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Generator for the dynamics of stroke `i`. Each stroke has its own stream,
/// so recomputing a suffix reproduces a full run exactly.
pub fn stroke_rng(seed: u64, stroke: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stroke as u64);
    rng
}

/// Autoregressive DPP output for one target list.
#[derive(Clone, Debug, PartialEq)]
pub struct DppRun {
    pub dynamics: Vec<DynamicParams>,
    /// Features fed at every step.
    pub inputs: Vec<Vec<f64>>,
    /// Recurrent state before every step.
    pub states: Vec<LstmState>,
}

/// A loaded DPP checkpoint. Read-only; prediction state is owned by the
/// caller.
#[derive(Clone, Debug)]
pub struct DppModel {
    ckpt: ModelCheckpoint,
    net: Network,
}

impl DppModel {
    pub fn new(ckpt: ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Dpp)?;
        let net = ckpt.network()?;
        Ok(DppModel { ckpt, net })
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.ckpt
    }

    pub fn stats(&self) -> &NormStats {
        &self.ckpt.norm_stats
    }

    /// State after teacher-forcing the primer's features, or zeros.
    pub fn prime(&self, primer: Option<&PrimerExample>) -> Result<LstmState> {
        let zero = LstmState::zeros(&self.net.config);
        match primer {
            None => Ok(zero),
            Some(p) => {
                p.plan.validate()?;
                let seq = encode_dpp(&p.plan, self.stats());
                Ok(self.net.infer(&seq.inputs, &zero)?.1)
            }
        }
    }

    fn clamp(&self, d: DynamicParams) -> DynamicParams {
        let [lo, hi] = self.ckpt.training_meta.dt_range;
        DynamicParams::new(d.dt.clamp(lo, hi), d.theta.clamp(-THETA_LIMIT, THETA_LIMIT))
    }

    /// Predicts the dynamics of every stroke between `targets`, starting
    /// from `start`. With `resume = Some((run, k))` the first `k` strokes
    /// are copied from an earlier run over a target list that agrees with
    /// `targets` on those strokes.
    pub fn run(
        &self,
        targets: &[VirtualTarget],
        start: &LstmState,
        seed: u64,
        resume: Option<(&DppRun, usize)>,
    ) -> Result<DppRun> {
        if targets.len() < 2 {
            return Err(Error::InvalidPlan(format!(
                "a plan needs at least 2 targets, got {}",
                targets.len()
            )));
        }
        if let Some((i, _)) = targets.iter().enumerate().find(|(_, t)| !t.position.is_finite()) {
            return Err(Error::InvalidPlan(format!("target {i} is not finite")));
        }
        let strokes = targets.len() - 1;
        let mut run = DppRun {
            dynamics: Vec::with_capacity(strokes),
            inputs: Vec::with_capacity(strokes),
            states: Vec::with_capacity(strokes),
        };
        let mut state = start.clone();
        let mut prev = [0.0, 0.0];
        if let Some((old, k)) = resume {
            let k = k.min(strokes).min(old.dynamics.len());
            run.dynamics.extend_from_slice(&old.dynamics[..k]);
            run.inputs.extend_from_slice(&old.inputs[..k]);
            run.states.extend_from_slice(&old.states[..k]);
            if k > 0 {
                state = old.states.get(k).cloned().ok_or_else(|| {
                    Error::InvalidArgument("resumed run has no state for the edited stroke".into())
                })?;
                prev = prev_token(old.dynamics[k - 1], self.stats());
            }
        }
        let stats = self.stats();
        for i in run.dynamics.len()..strokes {
            let dv = targets[i + 1].position - targets[i].position;
            let x = dpp_input(dv, targets[i + 1].pen_up, prev, stats);
            run.states.push(state.clone());
            let params = self.net.step(&x, &mut state)?;
            let (y, _) = sample_gmm(&params, &mut stroke_rng(seed, i));
            let d = self.clamp(DynamicParams::new(
                stats.targets[0].denormalise(y.x),
                stats.targets[1].denormalise(y.y),
            ));
            run.inputs.push(x);
            run.dynamics.push(d);
            prev = prev_token(d, stats);
        }
        run.states.push(state);
        Ok(run)
    }

    pub fn predict(&self, targets: &[VirtualTarget], primer: Option<&PrimerExample>, seed: u64) -> Result<Vec<DynamicParams>> {
        let start = self.prime(primer)?;
        Ok(self.run(targets, &start, seed, None)?.dynamics)
    }

    /// Mean per-step NLL of a plan's true dynamics, teacher-forced, after
    /// an optional primer.
    pub fn plan_nll(&self, plan: &ActionPlan, primer: Option<&PrimerExample>) -> Result<f64> {
        self.plans_nll(std::slice::from_ref(plan), primer)
    }

    /// Mean per-step NLL over several plans, each evaluated from the primed
    /// state.
    pub fn plans_nll(&self, plans: &[ActionPlan], primer: Option<&PrimerExample>) -> Result<f64> {
        let start = self.prime(primer)?;
        let (mut total, mut count) = (0.0, 0usize);
        for p in plans {
            let seq = encode_dpp(p, self.stats());
            let (params, _) = self.net.infer(&seq.inputs, &start)?;
            total += nll_loss(&params, &seq.targets)?;
            count += seq.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Samples dynamics for `targets` from a DPP checkpoint.
pub fn predict_dynamics(
    ckpt: &ModelCheckpoint,
    targets: &[VirtualTarget],
    primer: Option<&PrimerExample>,
    seed: u64,
) -> Result<Vec<DynamicParams>> {
    DppModel::new(ckpt.clone())?.predict(targets, primer, seed)
}

/// A plan with predicted dynamics and its trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub plan: ActionPlan,
    pub trajectory: Trajectory,
}

/// Builds a default-shape plan over `targets` and integrates it.
pub fn render(targets: Vec<VirtualTarget>, dynamics: Vec<DynamicParams>) -> Result<Rendered> {
    let plan = ActionPlan::new(targets, dynamics)?;
    let trajectory = integrate_trajectory(&plan, &IntegrationConfig::default())?;
    Ok(Rendered { plan, trajectory })
}

/// Re-draws a trace in the style of a DPP model: its virtual targets are
/// kept and its dynamics replaced.
pub fn stylize(
    ckpt: &ModelCheckpoint,
    trace: &RawTrace,
    cfg: &ReconstructionConfig,
    primer: Option<&PrimerExample>,
    seed: u64,
) -> Result<Rendered> {
    let model = DppModel::new(ckpt.clone())?;
    let plan = reconstruct_plan(trace, cfg)?;
    let dynamics = model.predict(&plan.targets, primer, seed)?;
    render(plan.targets, dynamics)
}

/// A loaded VTP checkpoint.
#[derive(Clone, Debug)]
pub struct VtpModel {
    ckpt: ModelCheckpoint,
    net: Network,
}

impl VtpModel {
    pub fn new(ckpt: ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Vtp)?;
        let net = ckpt.network()?;
        Ok(VtpModel { ckpt, net })
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.ckpt
    }

    fn prime(&self, primer: Option<&PrimerExample>) -> Result<LstmState> {
        let zero = LstmState::zeros(&self.net.config);
        match primer {
            None => Ok(zero),
            Some(p) => {
                p.plan.validate()?;
                let seq = encode_vtp(&end_marked(&p.plan), &self.ckpt.norm_stats);
                Ok(self.net.infer(&seq.inputs, &zero)?.1)
            }
        }
    }

    /// Samples a target sequence starting at the origin. The opening stroke
    /// is the primer's first stroke, or the mean stroke when unprimed; each
    /// later stroke is drawn from the network. Generation stops after
    /// `max_targets` targets or once the pen-up probability has exceeded
    /// [`VTP_STOP_PROBABILITY`] for [`VTP_STOP_RUN`] consecutive steps, after
    /// which trailing pen-up targets (the end marker) are dropped.
    pub fn generate(&self, primer: Option<&PrimerExample>, seed: u64, max_targets: usize) -> Result<Vec<VirtualTarget>> {
        if max_targets < 2 {
            return Err(Error::InvalidArgument("max_targets must be at least 2".into()));
        }
        let stats = &self.ckpt.norm_stats;
        let mut state = self.prime(primer)?;
        let (mut dv, mut pen) = match primer {
            Some(p) => (stroke_displacements(&p.plan)[0], p.plan.targets[1].pen_up),
            None => (Vec2::new(stats.inputs[0].mean, stats.inputs[1].mean), false),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VTP_STREAM);
        let mut targets = vec![VirtualTarget::new(0.0, 0.0), VirtualTarget { position: dv, pen_up: pen }];
        let mut run = 0;
        while targets.len() < max_targets {
            let params = self.net.step(&vtp_input(dv, pen, stats), &mut state)?;
            if params.pen.unwrap_or(0.0) > VTP_STOP_PROBABILITY {
                run += 1;
                if run == VTP_STOP_RUN {
                    while targets.len() > 2 && targets[targets.len() - 1].pen_up {
                        targets.pop();
                    }
                    break;
                }
            } else {
                run = 0;
            }
            let (y, p) = sample_gmm(&params, &mut rng);
            dv = Vec2::new(stats.targets[0].denormalise(y.x), stats.targets[1].denormalise(y.y));
            pen = p;
            let last = targets[targets.len() - 1].position;
            targets.push(VirtualTarget {
                position: last + dv,
                pen_up: pen,
            });
        }
        Ok(targets)
    }

    /// Mean per-step NLL of plans, teacher-forced, after an optional primer.
    /// Plans are encoded as given; pass them through [`end_marked`] to
    /// match the training data.
    pub fn plans_nll(&self, plans: &[ActionPlan], primer: Option<&PrimerExample>) -> Result<f64> {
        let start = self.prime(primer)?;
        let (mut total, mut count) = (0.0, 0usize);
        for p in plans {
            let seq = encode_vtp(p, &self.ckpt.norm_stats);
            let (params, _) = self.net.infer(&seq.inputs, &start)?;
            total += nll_loss(&params, &seq.targets)?;
            count += seq.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Fully generative drawing: VTP samples targets, DPP their dynamics.
pub fn generate_tag(
    vtp: &ModelCheckpoint,
    dpp: &ModelCheckpoint,
    vtp_primer: Option<&PrimerExample>,
    dpp_primer: Option<&PrimerExample>,
    seed: u64,
    max_targets: usize,
) -> Result<Rendered> {
    let targets = VtpModel::new(vtp.clone())?.generate(vtp_primer, seed, max_targets)?;
    let dynamics = DppModel::new(dpp.clone())?.predict(&targets, dpp_primer, seed)?;
    render(targets, dynamics)
}
