//! HTTP and WebSocket API.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /models` | | `[{id, kind, styles}]` |
//! | `POST /reconstruct` | `{points, config?}` | `{plan, raw_scale}` |
//! | `POST /predict` | `{model, targets, primer?, seed, svg?}` | `{model, seed, dynamics, trajectory, svg?}` |
//! | `POST /stylize` | `{model, points, primer?, seed, svg?}` | `{model, seed, plan, trajectory, svg?}` |
//! | `GET /session` | WebSocket upgrade | see [`ClientFrame`] / [`ServerFrame`] |
//!
//! `points` uses the JSON point-list schema of [`crate::io::parse_points`],
//! so traces arrive rescaled to unit extent; targets sent to `/predict` are
//! expected in that frame too.
//!
//! Errors are `{code, error}` objects: 400 for bodies that do not match the
//! schema, 404 for unknown models or primers, 422 for well-formed requests
//! the models cannot act on (fewer than two targets, a VTP model where a DPP
//! one is needed, ...), and 500 with an `incident` id that is also logged.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Error;
use crate::io::{export_svg, load_checkpoint, parse_points, TraceFormat};
use crate::pipelines::{render, DppModel, DppRun, PrimerExample, VtpModel};
use crate::reconstruct::{reconstruct_plan, ReconstructionConfig};
use crate::rmdn::{LstmState, ModelCheckpoint, ModelKind};
use crate::slm::{ActionPlan, DynamicParams, Trajectory, VirtualTarget};

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Dpp(DppModel),
    Vtp(VtpModel),
}

impl LoadedModel {
    pub fn checkpoint(&self) -> &ModelCheckpoint {
        match self {
            LoadedModel::Dpp(m) => m.checkpoint(),
            LoadedModel::Vtp(m) => m.checkpoint(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub kind: ModelKind,
    /// Labels of the primers stored in the checkpoint.
    pub styles: Vec<String>,
}

/// Models shared read-only by every request and session.
#[derive(Clone, Debug, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<LoadedModel>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, ckpt: ModelCheckpoint) -> crate::Result<()> {
        let model = match ckpt.model_kind {
            ModelKind::Dpp => LoadedModel::Dpp(DppModel::new(ckpt)?),
            ModelKind::Vtp => LoadedModel::Vtp(VtpModel::new(ckpt)?),
        };
        self.models.insert(id.into(), Arc::new(model));
        Ok(())
    }

    /// Loads every `*.ckpt` file in `dir`; ids are the file stems.
    pub fn load_dir(dir: &Path) -> crate::Result<Self> {
        let mut reg = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            reg.insert(id, load_checkpoint(&path)?)?;
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Option<&Arc<LoadedModel>> {
        self.models.get(id)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn catalog(&self) -> Vec<CatalogEntry> {
        self.models
            .iter()
            .map(|(id, m)| CatalogEntry {
                id: id.clone(),
                kind: m.checkpoint().model_kind,
                styles: m.checkpoint().primers.iter().map(|p| p.label.clone()).collect(),
            })
            .collect()
    }

    fn dpp(&self, id: &str) -> Result<&DppModel, ApiError> {
        match self.get(id).map(|m| &**m) {
            Some(LoadedModel::Dpp(m)) => Ok(m),
            Some(LoadedModel::Vtp(_)) => Err(ApiError::from(Error::KindMismatch {
                expected: ModelKind::Dpp.to_string(),
                actual: ModelKind::Vtp.to_string(),
            })),
            None => Err(ApiError::not_found(format!("unknown model {id:?}"))),
        }
    }
}

fn primer<'a>(model: &'a DppModel, label: Option<&str>) -> Result<Option<&'a PrimerExample>, ApiError> {
    match label {
        None => Ok(None),
        Some(l) => model
            .checkpoint()
            .primer(l)
            .map(Some)
            .ok_or_else(|| ApiError::not_found(format!("unknown primer {l:?}"))),
    }
}

/// An error reply. Also used as the body of WebSocket error frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: u16,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incident: Option<String>,
}

impl ApiError {
    fn new(code: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            code: code.as_u16(),
            error: error.into(),
            incident: None,
        }
    }

    fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }

    fn not_found(error: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, error)
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        let incident = uuid::Uuid::new_v4().to_string();
        eprintln!("incident {incident}: {detail}");
        ApiError {
            code: 500,
            error: "internal error".into(),
            incident: Some(incident),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::NonNumeric { .. }
            | Error::MalformedXml(_)
            | Error::Json(_)
            | Error::Dimension { .. } => ApiError::bad_request(e.to_string()),
            Error::InvalidPlan(_)
            | Error::InvalidShape(_)
            | Error::InvalidArgument(_)
            | Error::InvalidTrace(_)
            | Error::ZeroExtent
            | Error::NoPoints
            | Error::KindMismatch { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            Error::Divergence { .. }
            | Error::UnsupportedVersion { .. }
            | Error::CorruptPayload(_)
            | Error::Io { .. } => ApiError::internal(e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn points_trace(points: &serde_json::Value) -> Result<crate::reconstruct::RawTrace, ApiError> {
    let bytes = serde_json::to_vec(points).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(parse_points(&bytes, TraceFormat::PointsJson)?)
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRequest {
    pub points: serde_json::Value,
    #[serde(default)]
    pub config: Option<ReconstructionConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub model: String,
    pub targets: Vec<VirtualTarget>,
    #[serde(default)]
    pub primer: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub svg: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model: String,
    pub seed: u64,
    pub dynamics: Vec<DynamicParams>,
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeRequest {
    pub model: String,
    pub points: serde_json::Value,
    #[serde(default)]
    pub primer: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub svg: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizeResponse {
    pub model: String,
    pub seed: u64,
    pub plan: ActionPlan,
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<String>,
}

fn svg_string(traj: &Trajectory, plan: &ActionPlan) -> String {
    String::from_utf8(export_svg(traj, Some(plan))).expect("SVG output is UTF-8")
}

/// The body of a `/predict` reply. Shared with the session so both
/// transports give identical results.
pub fn predict(registry: &ModelRegistry, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let model = registry.dpp(&req.model)?;
    let primer = primer(model, req.primer.as_deref())?;
    let start = model.prime(primer)?;
    let run = model.run(&req.targets, &start, req.seed, None)?;
    let r = render(req.targets.clone(), run.dynamics)?;
    Ok(PredictResponse {
        model: req.model.clone(),
        seed: req.seed,
        svg: req.svg.then(|| svg_string(&r.trajectory, &r.plan)),
        dynamics: r.plan.dynamics,
        trajectory: r.trajectory,
    })
}

async fn models(State(reg): State<Arc<ModelRegistry>>) -> Json<Vec<CatalogEntry>> {
    Json(reg.catalog())
}

async fn reconstruct_route(bytes: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: ReconstructRequest = body(&bytes)?;
    blocking(move || {
        let trace = points_trace(&req.points)?;
        let plan = reconstruct_plan(&trace, &req.config.unwrap_or_default())?;
        Ok(Json(json!({ "plan": plan, "raw_scale": trace.meta.raw_scale })))
    })
    .await
}

async fn predict_route(State(reg): State<Arc<ModelRegistry>>, bytes: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = body(&bytes)?;
    blocking(move || predict(&reg, &req).map(Json)).await
}

async fn stylize_route(State(reg): State<Arc<ModelRegistry>>, bytes: Bytes) -> Result<Json<StylizeResponse>, ApiError> {
    let req: StylizeRequest = body(&bytes)?;
    blocking(move || {
        let model = reg.dpp(&req.model)?;
        let primer = primer(model, req.primer.as_deref())?;
        let trace = points_trace(&req.points)?;
        let plan = reconstruct_plan(&trace, &ReconstructionConfig::default())?;
        let dynamics = model.predict(&plan.targets, primer, req.seed)?;
        let r = render(plan.targets, dynamics)?;
        Ok(Json(StylizeResponse {
            model: req.model,
            seed: req.seed,
            svg: req.svg.then(|| svg_string(&r.trajectory, &r.plan)),
            plan: r.plan,
            trajectory: r.trajectory,
        }))
    })
    .await
}

async fn session_route(State(reg): State<Arc<ModelRegistry>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| run_session(socket, reg))
}

async fn run_session(mut socket: WebSocket, registry: Arc<ModelRegistry>) {
    let mut session = Some(Session::new(registry));
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        let mut s = session.take().expect("session is returned after every frame");
        let handled = tokio::task::spawn_blocking(move || {
            let reply = s.handle_text(&text);
            (s, reply)
        })
        .await;
        let reply = match handled {
            Ok((s, reply)) => {
                session = Some(s);
                reply
            }
            Err(e) => {
                let _ = socket.send(Message::Text(error_text(ApiError::internal(e)))).await;
                break;
            }
        };
        let text = serde_json::to_string(&reply).expect("frames serialise");
        if socket.send(Message::Text(text)).await.is_err() {
            break;
        }
    }
}

fn error_text(e: ApiError) -> String {
    serde_json::to_string(&ServerFrame::Error { plan_version: None, error: e }).expect("frames serialise")
}

/// The application router.
pub fn router(registry: Arc<ModelRegistry>) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/reconstruct", post(reconstruct_route))
        .route("/predict", post(predict_route))
        .route("/stylize", post(stylize_route))
        .route("/session", get(session_route))
        .with_state(registry)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, registry: ModelRegistry) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(registry))).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

/// A client message. Every frame carries the client's plan version, which
/// must increase strictly within a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    SetModel { version: u64, model: String },
    /// `null` clears the primer.
    SetPrimer { version: u64, primer: Option<String> },
    SetSeed { version: u64, seed: u64 },
    /// Replaces target `index`, or appends when `index` equals the target
    /// count.
    UpsertTarget {
        version: u64,
        index: usize,
        position: crate::Vec2,
        #[serde(default)]
        pen_up: bool,
    },
    DeleteTarget { version: u64, index: usize },
    /// Replaces every target.
    SetTargets { version: u64, targets: Vec<VirtualTarget> },
    /// Recomputes from scratch, dropping cached states.
    RequestResample { version: u64 },
}

impl ClientFrame {
    pub fn version(&self) -> u64 {
        match self {
            ClientFrame::SetModel { version, .. }
            | ClientFrame::SetPrimer { version, .. }
            | ClientFrame::SetSeed { version, .. }
            | ClientFrame::UpsertTarget { version, .. }
            | ClientFrame::DeleteTarget { version, .. }
            | ClientFrame::SetTargets { version, .. }
            | ClientFrame::RequestResample { version } => *version,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    /// `dynamics` is empty and `trajectory` absent until a DPP model is
    /// selected and the plan has two targets.
    Update {
        plan_version: u64,
        targets: Vec<VirtualTarget>,
        dynamics: Vec<DynamicParams>,
        trajectory: Option<Trajectory>,
        /// First stroke that was recomputed.
        recomputed_from: usize,
    },
    Error {
        plan_version: Option<u64>,
        #[serde(flatten)]
        error: ApiError,
    },
}

#[derive(Clone, Debug)]
struct Cached {
    model: String,
    primer: Option<String>,
    seed: u64,
    targets: Vec<VirtualTarget>,
    run: DppRun,
}

/// Server-side state of one WebSocket connection. Frames are handled in
/// order; dropping the session discards it.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    registry: Arc<ModelRegistry>,
    model: Option<String>,
    primer: Option<String>,
    seed: u64,
    targets: Vec<VirtualTarget>,
    version: Option<u64>,
    start: Option<(String, Option<String>, LstmState)>,
    cache: Option<Cached>,
}

impl Session {
    pub fn new(registry: Arc<ModelRegistry>) -> Self {
        Session {
            id: uuid::Uuid::new_v4().to_string(),
            registry,
            model: None,
            primer: None,
            seed: 0,
            targets: Vec::new(),
            version: None,
            start: None,
            cache: None,
        }
    }

    pub fn targets(&self) -> &[VirtualTarget] {
        &self.targets
    }

    pub fn handle_text(&mut self, text: &str) -> ServerFrame {
        match serde_json::from_str::<ClientFrame>(text) {
            Ok(frame) => self.handle(frame),
            Err(e) => ServerFrame::Error {
                plan_version: None,
                error: ApiError::bad_request(format!("malformed frame: {e}")),
            },
        }
    }

    /// Applies one frame. Rejected frames leave the session unchanged.
    pub fn handle(&mut self, frame: ClientFrame) -> ServerFrame {
        let version = frame.version();
        match self.apply(frame) {
            Ok(()) => match self.compute() {
                Ok(reply) => reply,
                Err(error) => ServerFrame::Error {
                    plan_version: Some(version),
                    error,
                },
            },
            Err(error) => ServerFrame::Error {
                plan_version: Some(version),
                error,
            },
        }
    }

    fn apply(&mut self, frame: ClientFrame) -> Result<(), ApiError> {
        let version = frame.version();
        if let Some(last) = self.version {
            if version <= last {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("out-of-order version {version}; last accepted {last}"),
                ));
            }
        }
        match frame {
            ClientFrame::SetModel { model, .. } => {
                self.registry.dpp(&model)?;
                self.model = Some(model);
            }
            ClientFrame::SetPrimer { primer: label, .. } => {
                if let (Some(model), Some(l)) = (&self.model, &label) {
                    primer(self.registry.dpp(model)?, Some(l))?;
                }
                self.primer = label;
            }
            ClientFrame::SetSeed { seed, .. } => {
                self.seed = seed;
            }
            ClientFrame::UpsertTarget {
                index, position, pen_up, ..
            } => {
                if !position.is_finite() {
                    return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "target is not finite"));
                }
                let t = VirtualTarget { position, pen_up };
                match index.cmp(&self.targets.len()) {
                    std::cmp::Ordering::Less => self.targets[index] = t,
                    std::cmp::Ordering::Equal => self.targets.push(t),
                    std::cmp::Ordering::Greater => {
                        return Err(ApiError::new(
                            StatusCode::UNPROCESSABLE_ENTITY,
                            format!("index {index} is past the end of {} targets", self.targets.len()),
                        ))
                    }
                }
            }
            ClientFrame::DeleteTarget { index, .. } => {
                if index >= self.targets.len() {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        format!("no target {index}"),
                    ));
                }
                self.targets.remove(index);
            }
            ClientFrame::SetTargets { targets, .. } => {
                self.targets = targets;
            }
            ClientFrame::RequestResample { .. } => {
                self.cache = None;
            }
        }
        self.version = Some(version);
        Ok(())
    }

    fn compute(&mut self) -> Result<ServerFrame, ApiError> {
        let version = self.version.unwrap_or(0);
        let Some(model_id) = self.model.clone() else {
            return Ok(self.pending(version));
        };
        if self.targets.len() < 2 {
            return Ok(self.pending(version));
        }
        let model = self.registry.dpp(&model_id)?;
        let primer_label = self.primer.clone();
        let start = match &self.start {
            Some((m, p, s)) if *m == model_id && *p == primer_label => s.clone(),
            _ => {
                let s = model.prime(primer(model, primer_label.as_deref())?)?;
                self.start = Some((model_id.clone(), primer_label.clone(), s.clone()));
                s
            }
        };
        // stroke i reads targets i and i + 1, so the first changed target d
        // invalidates stroke max(d, 1) - 1 onwards
        let reusable = self.cache.as_ref().and_then(|c| {
            (c.model == model_id && c.primer == primer_label && c.seed == self.seed).then(|| {
                let d = c
                    .targets
                    .iter()
                    .zip(&self.targets)
                    .position(|(a, b)| a != b)
                    .unwrap_or(c.targets.len().min(self.targets.len()));
                d.max(1) - 1
            })
        });
        let run = match (reusable, &self.cache) {
            (Some(k), Some(c)) => model.run(&self.targets, &start, self.seed, Some((&c.run, k)))?,
            _ => model.run(&self.targets, &start, self.seed, None)?,
        };
        let from = reusable.unwrap_or(0);
        let r = render(self.targets.clone(), run.dynamics.clone())?;
        self.cache = Some(Cached {
            model: model_id,
            primer: primer_label,
            seed: self.seed,
            targets: self.targets.clone(),
            run,
        });
        Ok(ServerFrame::Update {
            plan_version: version,
            targets: self.targets.clone(),
            dynamics: r.plan.dynamics,
            trajectory: Some(r.trajectory),
            recomputed_from: from,
        })
    }

    fn pending(&self, version: u64) -> ServerFrame {
        ServerFrame::Update {
            plan_version: version,
            targets: self.targets.clone(),
            dynamics: Vec::new(),
            trajectory: None,
            recomputed_from: 0,
        }
    }
}
