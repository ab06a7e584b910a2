//! Command-line entry points.
//!
//! Every command prints its effective configuration, defaults resolved, as
//! one JSON line on standard error before doing any work. Exit codes: 0
//! success, 1 usage, 2 data error, 3 training divergence.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augment::{augment_dataset, AugmentConfig};
use crate::error::{Error, Result};
use crate::io::{
    export_svg, export_trajectory_csv, load_checkpoint, read_json, read_plan, read_trace, save_checkpoint,
    write_atomic, write_json, DatasetItem, DatasetManifest, TraceFormat,
};
use crate::pipelines::{
    default_seq_len, generate_tag, render, stylize, train_dpp_with_progress, train_vtp_with_progress,
    PrimerExample, Rendered,
};
use crate::reconstruct::{reconstruct_plan, ReconstructionConfig};
use crate::rmdn::{AdamConfig, ModelCheckpoint, ModelKind, NetworkConfig, TrainOptions};
use crate::service::ModelRegistry;
use crate::slm::{integrate_trajectory, ActionPlan, IntegrationConfig, VirtualTarget};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Parsed command line.
#[derive(Debug, Parser)]
#[command(name = "sigmastyle", version, about = "Sigma-Lognormal handwriting toolkit")]
pub struct CliConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover an action plan from a point trace.
    Reconstruct {
        input: PathBuf,
        #[arg(long)]
        format: Option<FormatArg>,
        /// Write the trajectory of the recovered plan as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Write the plan as JSON (default: standard output).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        recon: ReconArgs,
    },
    /// Write perturbed copies of a plan.
    Augment {
        plan: PathBuf,
        #[arg(long = "np", default_value_t = 10)]
        n_p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file for the JSON list of plans (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Train a dynamic-parameter model from a dataset manifest.
    TrainDpp(TrainArgs),
    /// Train a virtual-target model from a dataset manifest.
    TrainVtp(TrainArgs),
    /// Sample dynamics for a fixed list of targets.
    Sample {
        checkpoint: PathBuf,
        /// A plan, or a bare list of targets, as JSON.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        primer: Option<String>,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Redraw a trace in the style of a model.
    Stylize {
        checkpoint: PathBuf,
        trace: PathBuf,
        #[arg(long)]
        format: Option<FormatArg>,
        #[arg(long)]
        primer: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        recon: ReconArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Generate a drawing from a target model and a dynamics model.
    Generate {
        vtp: PathBuf,
        dpp: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Style label used to prime both models.
        #[arg(long)]
        primer: Option<String>,
        #[arg(long, default_value_t = 64)]
        max_targets: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Serve the HTTP and WebSocket API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory of `.ckpt` files.
        #[arg(long)]
        models: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Gml,
    PointsJson,
    PointsCsv,
}

impl From<FormatArg> for TraceFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Gml => TraceFormat::Gml,
            FormatArg::PointsJson => TraceFormat::PointsJson,
            FormatArg::PointsCsv => TraceFormat::PointsCsv,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long, default_value_t = ReconstructionConfig::default().resample_divisor)]
    pub resample_divisor: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().hanning_window)]
    pub hanning_window: usize,
    #[arg(long, default_value_t = ReconstructionConfig::default().mse_rel_threshold)]
    pub mse_rel_threshold: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().max_iters)]
    pub max_iters: usize,
    #[arg(long, default_value_t = ReconstructionConfig::default().sigma_ref)]
    pub sigma_ref: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().sigma_min)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().min_prominence)]
    pub min_prominence: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().refine_iters)]
    pub refine_iters: usize,
    #[arg(long, default_value_t = ReconstructionConfig::default().dt_min)]
    pub dt_min: f64,
    #[arg(long, default_value_t = ReconstructionConfig::default().dt_max)]
    pub dt_max: f64,
}

impl ReconArgs {
    fn config(&self) -> ReconstructionConfig {
        ReconstructionConfig {
            resample_divisor: self.resample_divisor,
            hanning_window: self.hanning_window,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
            mse_rel_threshold: self.mse_rel_threshold,
            max_iters: self.max_iters,
            sigma_ref: self.sigma_ref,
            sigma_min: self.sigma_min,
            min_prominence: self.min_prominence,
            refine_iters: self.refine_iters,
        }
    }
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value_t = AugmentConfig::default().pos_sigma)]
    pub pos_sigma: f64,
    #[arg(long, default_value_t = AugmentConfig::default().dt_sigma)]
    pub dt_sigma: f64,
    #[arg(long, default_value_t = AugmentConfig::default().theta_sigma)]
    pub theta_sigma: f64,
    #[arg(id = "aug_dt_min", long = "aug-dt-min", default_value_t = AugmentConfig::default().dt_min)]
    pub dt_min: f64,
    #[arg(id = "aug_dt_max", long = "aug-dt-max", default_value_t = AugmentConfig::default().dt_max)]
    pub dt_max: f64,
}

impl NoiseArgs {
    fn config(&self, n_p: usize, seed: u64) -> AugmentConfig {
        AugmentConfig {
            n_p,
            pos_sigma: self.pos_sigma,
            dt_sigma: self.dt_sigma,
            theta_sigma: self.theta_sigma,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Augmented variations per example.
    #[arg(long = "np", default_value_t = 200)]
    pub n_p: usize,
    /// Truncated backpropagation length (default: 15 for one style, 64 for
    /// several).
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 400)]
    pub hidden: usize,
    #[arg(long, default_value_t = 20)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainOptions::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainOptions::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = NetworkConfig::default().dropout_keep)]
    pub dropout_keep: f64,
    #[arg(long)]
    pub peepholes: bool,
    #[arg(long, default_value_t = NetworkConfig::default().overlap)]
    pub overlap: f64,
    #[arg(long, default_value_t = NetworkConfig::default().clip_norm)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    pub lr: f64,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    pub recon: ReconArgs,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Plan with the predicted dynamics (default: standard output).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Trajectory samples as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match CliConfig::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn report(command: &str, config: &impl Serialize) {
    let value = serde_json::json!({ "command": command, "config": config });
    eprintln!("{value}");
}

fn trace_format(path: &Path, arg: Option<FormatArg>) -> TraceFormat {
    arg.map(TraceFormat::from).unwrap_or_else(|| TraceFormat::from_path(path))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_outputs(out: &OutputArgs, r: &Rendered) -> Result<()> {
    if let Some(p) = &out.svg {
        write_atomic(p, &export_svg(&r.trajectory, Some(&r.plan)))?;
    }
    if let Some(p) = &out.csv {
        write_atomic(p, &export_trajectory_csv(&r.trajectory))?;
    }
    match &out.plan {
        Some(p) => write_json(p, &r.plan),
        None => print_json(&r.plan),
    }
}

fn primer<'a>(ckpt: &'a ModelCheckpoint, label: Option<&str>) -> Result<Option<&'a PrimerExample>> {
    match label {
        None => Ok(None),
        Some(l) => ckpt.primer(l).map(Some).ok_or_else(|| {
            let known: Vec<&str> = ckpt.primers.iter().map(|p| p.label.as_str()).collect();
            Error::InvalidArgument(format!("checkpoint has no primer {l:?} (available: {known:?})"))
        }),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Reconstruct {
            input,
            format,
            svg,
            plan,
            recon,
        } => {
            let cfg = recon.config();
            let format = trace_format(&input, format);
            report(
                "reconstruct",
                &serde_json::json!({ "input": input, "format": format, "svg": svg, "plan": plan, "reconstruction": cfg }),
            );
            let trace = read_trace(&input, format)?;
            let recovered = reconstruct_plan(&trace, &cfg)?;
            if let Some(path) = &svg {
                let traj = integrate_trajectory(&recovered, &IntegrationConfig::default())?;
                write_atomic(path, &export_svg(&traj, Some(&recovered)))?;
            }
            match &plan {
                Some(p) => write_json(p, &recovered),
                None => print_json(&recovered),
            }
        }
        Command::Augment {
            plan,
            n_p,
            seed,
            out,
            noise,
        } => {
            let cfg = noise.config(n_p, seed);
            report("augment", &serde_json::json!({ "plan": plan, "out": out, "augment": cfg }));
            let source = read_plan(&plan)?;
            let plans = augment_dataset(&[source], &cfg)?;
            match &out {
                Some(p) => write_json(p, &plans),
                None => print_json(&plans),
            }
        }
        Command::TrainDpp(args) => train(ModelKind::Dpp, args),
        Command::TrainVtp(args) => train(ModelKind::Vtp, args),
        Command::Sample {
            checkpoint,
            targets,
            seed,
            primer: label,
            out,
        } => {
            report(
                "sample",
                &serde_json::json!({
                    "checkpoint": checkpoint, "targets": targets, "seed": seed, "primer": label,
                    "svg": out.svg, "plan": out.plan, "csv": out.csv,
                }),
            );
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = crate::pipelines::DppModel::new(ckpt)?;
            let targets = read_targets(&targets)?;
            let dynamics = model.predict(&targets, primer(model.checkpoint(), label.as_deref())?, seed)?;
            write_outputs(&out, &render(targets, dynamics)?)
        }
        Command::Stylize {
            checkpoint,
            trace,
            format,
            primer: label,
            seed,
            recon,
            out,
        } => {
            let cfg = recon.config();
            let format = trace_format(&trace, format);
            report(
                "stylize",
                &serde_json::json!({
                    "checkpoint": checkpoint, "trace": trace, "format": format, "primer": label, "seed": seed,
                    "reconstruction": cfg, "svg": out.svg, "plan": out.plan, "csv": out.csv,
                }),
            );
            let ckpt = load_checkpoint(&checkpoint)?;
            ckpt.expect_kind(ModelKind::Dpp)?;
            let raw = read_trace(&trace, format)?;
            let r = stylize(&ckpt, &raw, &cfg, primer(&ckpt, label.as_deref())?, seed)?;
            write_outputs(&out, &r)
        }
        Command::Generate {
            vtp,
            dpp,
            seed,
            primer: label,
            max_targets,
            out,
        } => {
            report(
                "generate",
                &serde_json::json!({
                    "vtp": vtp, "dpp": dpp, "seed": seed, "primer": label, "max_targets": max_targets,
                    "svg": out.svg, "plan": out.plan, "csv": out.csv,
                }),
            );
            let v = load_checkpoint(&vtp)?;
            let d = load_checkpoint(&dpp)?;
            v.expect_kind(ModelKind::Vtp)?;
            d.expect_kind(ModelKind::Dpp)?;
            let (vp, dp) = (primer(&v, label.as_deref())?, primer(&d, label.as_deref())?);
            write_outputs(&out, &generate_tag(&v, &d, vp, dp, seed, max_targets)?)
        }
        Command::Serve { port, host, models } => {
            let addr = SocketAddr::new(host, port);
            report("serve", &serde_json::json!({ "addr": addr.to_string(), "models": models }));
            let registry = ModelRegistry::load_dir(&models)?;
            for entry in registry.catalog() {
                eprintln!("loaded {} ({}) styles {:?}", entry.id, entry.kind, entry.styles);
            }
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io(&models, e))?;
            runtime.block_on(async {
                let listener = crate::service::bind(addr).await.map_err(|e| Error::io(&models, e))?;
                eprintln!("listening on http://{addr}");
                crate::service::serve(listener, registry).await.map_err(|e| Error::io(&models, e))
            })
        }
    }
}

fn read_targets(path: &Path) -> Result<Vec<VirtualTarget>> {
    let value: serde_json::Value = read_json(path)?;
    let targets = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        serde_json::from_value::<ActionPlan>(value)?.targets
    };
    Ok(targets)
}

fn train(kind: ModelKind, args: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let recon = args.recon.config();
    let mut examples = Vec::new();
    for (i, item) in manifest.read_items(base)?.into_iter().enumerate() {
        let (label, plan) = match item {
            DatasetItem::Plan { label, plan } => (label, plan),
            DatasetItem::Trace { label, trace } => (label, reconstruct_plan(&trace, &recon)?),
        };
        let label = if label.is_empty() { format!("example-{i}") } else { label };
        examples.push(PrimerExample::new(plan, label));
    }
    let styles = {
        let mut l: Vec<&str> = manifest.entries.iter().map(|e| e.style_label.as_str()).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let net = NetworkConfig {
        layers: args.layers,
        hidden_dim: args.hidden,
        num_gaussians: args.gaussians,
        dropout_keep: args.dropout_keep,
        peepholes: args.peepholes,
        seq_len: args.seq_len.unwrap_or_else(|| default_seq_len(styles)),
        overlap: args.overlap,
        clip_norm: args.clip_norm,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        ..NetworkConfig::default()
    };
    let aug = args.noise.config(args.n_p, args.seed);
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    report(
        &format!("train-{kind}"),
        &serde_json::json!({
            "manifest": args.manifest, "out": args.out, "examples": examples.len(), "styles": styles,
            "network": net, "augment": aug, "train": {"epochs": opts.epochs, "batch_size": opts.batch_size, "seed": opts.seed},
            "reconstruction": recon,
        }),
    );
    let progress = |epoch: usize, loss: f64| eprintln!("epoch {:>4}  loss {loss:.6}", epoch + 1);
    let ckpt = match kind {
        ModelKind::Dpp => train_dpp_with_progress(&examples, &aug, &net, &opts, progress)?,
        ModelKind::Vtp => train_vtp_with_progress(&examples, &aug, &net, &opts, progress)?,
    };
    save_checkpoint(&args.out, &ckpt)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        CliConfig::command().debug_assert();
    }
}
