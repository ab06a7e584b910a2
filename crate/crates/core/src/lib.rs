//! Sigma-Lognormal handwriting toolkit.
//!
//! A trace is represented as a sparse *action plan*: an ordered list of
//! virtual targets plus per-stroke dynamic parameters (time offset and arc
//! curvature). This crate
//!
//! * integrates plans into smooth timed trajectories ([`slm`]),
//! * reconstructs plans from digitised point sequences ([`reconstruct`]),
//! * perturbs plans to grow tiny datasets ([`augment`]),
//! * trains recurrent mixture-density networks that predict dynamics or
//!   virtual targets ([`rmdn`], [`pipelines`]),
//! * reads and writes traces, plans, trajectories and checkpoints ([`io`]),
//! * and serves prediction over HTTP and WebSocket ([`service`]).
//!
//! Runnable walkthroughs live in `crates/core/examples/`.

pub mod augment;
pub mod cli;
pub mod error;
pub mod geom;
pub mod io;
pub mod pipelines;
pub mod reconstruct;
pub mod rmdn;
pub mod service;
pub mod slm;

pub use error::{Error, Result};
pub use geom::Vec2;
pub use slm::{ActionPlan, DynamicParams, StrokeShape, Trajectory, VirtualTarget};
