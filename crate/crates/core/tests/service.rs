use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sigmastyle::augment::AugmentConfig;
use sigmastyle::pipelines::{train_dpp, PrimerExample};
use sigmastyle::rmdn::{ModelCheckpoint, ModelKind, Network, NetworkConfig, TrainOptions, TrainingMeta};
use sigmastyle::pipelines::{FeatureStats, NormStats};
use sigmastyle::service::*;
use sigmastyle::slm::RandomPlanConfig;
use sigmastyle::{ActionPlan, DynamicParams, VirtualTarget};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn random_plan(m: usize, seed: u64) -> ActionPlan {
    RandomPlanConfig {
        targets: m..=m,
        ..Default::default()
    }
    .sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn styled(seed: u64, dt: f64, theta: f64) -> ActionPlan {
    let mut p = random_plan(8, seed);
    for (i, d) in p.dynamics.iter_mut().enumerate() {
        *d = DynamicParams::new(dt, if i % 2 == 0 { theta } else { -theta });
    }
    p
}

/// Desk-scale DPP with two styles, briefly trained.
fn dpp() -> &'static ModelCheckpoint {
    static M: OnceLock<ModelCheckpoint> = OnceLock::new();
    M.get_or_init(|| {
        let ex = [
            PrimerExample::new(styled(3, 0.3, 0.5), "quick"),
            PrimerExample::new(styled(4, 0.8, 0.2), "slow"),
        ];
        let net = NetworkConfig {
            hidden_dim: 64,
            num_gaussians: 5,
            ..Default::default()
        };
        let aug = AugmentConfig {
            n_p: 40,
            seed: 1,
            ..Default::default()
        };
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 32,
            seed: 2,
        };
        train_dpp(&ex, &aug, &net, &opts).unwrap()
    })
}

fn vtp() -> ModelCheckpoint {
    let cfg = NetworkConfig {
        input_dim: 3,
        pen_head: true,
        layers: 1,
        hidden_dim: 4,
        num_gaussians: 2,
        ..Default::default()
    };
    let f = FeatureStats::fit(&[0.0, 1.0]);
    ModelCheckpoint::new(
        ModelKind::Vtp,
        Network::init(cfg, 1).unwrap(),
        NormStats {
            inputs: vec![f; 2],
            targets: vec![f; 2],
        },
        TrainingMeta {
            epochs: 0,
            final_loss: 0.0,
            seed: 0,
            loss_curve: vec![],
            dt_range: [0.01, 1.0],
        },
        vec![],
    )
    .unwrap()
}

fn registry() -> Arc<ModelRegistry> {
    let mut r = ModelRegistry::new();
    r.insert("desk", dpp().clone()).unwrap();
    r.insert("targets", vtp()).unwrap();
    Arc::new(r)
}

async fn call(reg: &Arc<ModelRegistry>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let res = router(reg.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn post(reg: &Arc<ModelRegistry>, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(reg, "POST", uri, Some(body.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn targets_json(plan: &ActionPlan) -> Value {
    serde_json::to_value(&plan.targets).unwrap()
}

#[tokio::test]
async fn catalog_lists_models_and_styles() {
    let reg = registry();
    let (status, body) = call(&reg, "GET", "/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let cat: Vec<CatalogEntry> = serde_json::from_slice(&body).unwrap();
    assert_eq!(cat.len(), 2);
    assert_eq!(cat[0].id, "desk");
    assert_eq!(cat[0].kind, ModelKind::Dpp);
    assert_eq!(cat[0].styles, vec!["quick", "slow"]);
    assert_eq!(cat[1].kind, ModelKind::Vtp);
}

#[tokio::test]
async fn predict_two_targets_is_deterministic() {
    let reg = registry();
    let body = json!({"model": "desk", "targets": [{"position": [0, 0]}, {"position": [1, 0]}], "seed": 4});
    let (s1, a) = call(&reg, "POST", "/predict", Some(body.to_string())).await;
    let (s2, b) = call(&reg, "POST", "/predict", Some(body.to_string())).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let r: PredictResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!(r.dynamics.len(), 1);
    assert_eq!(r.seed, 4);
    assert!(r.svg.is_none());
    assert!(r.trajectory.len() > 2);
}

#[tokio::test]
async fn predict_with_primer_and_svg() {
    let reg = registry();
    let plan = random_plan(6, 9);
    let (s, v) = post(
        &reg,
        "/predict",
        json!({"model": "desk", "targets": targets_json(&plan), "primer": "slow", "seed": 1, "svg": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["dynamics"].as_array().unwrap().len(), 5);
    assert_eq!(v["svg"].as_str().unwrap().matches("<circle").count(), 6);
}

#[tokio::test]
async fn error_statuses() {
    let reg = registry();
    let two = json!([{"position": [0, 0]}, {"position": [1, 0]}]);
    let (s, v) = post(&reg, "/predict", json!({"model": "nope", "targets": two, "seed": 1})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], 404);
    let (s, _) = post(&reg, "/predict", json!({"model": "desk", "targets": two, "seed": 1, "primer": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&reg, "/predict", json!({"model": "targets", "targets": two, "seed": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(&reg, "/predict", json!({"model": "desk", "targets": [{"position": [0, 0]}], "seed": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(&reg, "/predict", json!({"model": "desk", "targets": two})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&reg, "/predict", json!({"model": "desk", "targets": two, "seed": 1, "extra": 0})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&reg, "POST", "/predict", Some("{".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&reg, "/reconstruct", json!({"points": [[0, 0]]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(&reg, "/reconstruct", json!({"points": [[0, "a"]]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[test]
fn internal_errors_carry_an_incident_id() {
    let e = ApiError::from(sigmastyle::Error::CorruptPayload("x".into()));
    assert_eq!(e.code, 500);
    assert!(e.incident.is_some_and(|id| id.len() == 36));
}

#[tokio::test]
async fn reconstruct_and_stylize() {
    let reg = registry();
    let trajectory = sigmastyle::slm::integrate_trajectory(&random_plan(5, 2), &Default::default()).unwrap();
    let points: Vec<[f64; 2]> = trajectory.positions().iter().map(|p| [200.0 * p.x, 200.0 * p.y]).collect();
    let (s, v) = post(&reg, "/reconstruct", json!({ "points": points })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let plan: ActionPlan = serde_json::from_value(v["plan"].clone()).unwrap();
    assert!(plan.targets.len() >= 2);
    assert!(v["raw_scale"].as_f64().unwrap() > 1.0);

    let (s, v) = post(&reg, "/stylize", json!({"model": "desk", "points": points, "primer": "quick", "seed": 3})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: StylizeResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.plan.targets, plan.targets);
    assert_eq!(r.seed, 3);
}

#[tokio::test]
async fn predict_latency_p50() {
    let reg = registry();
    let plan = random_plan(32, 5);
    let body = json!({"model": "desk", "targets": targets_json(&plan), "primer": "quick", "seed": 1}).to_string();
    let mut times = Vec::new();
    for _ in 0..31 {
        let t = Instant::now();
        let (s, _) = call(&reg, "POST", "/predict", Some(body.clone())).await;
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(s, StatusCode::OK);
    }
    times.sort_by(f64::total_cmp);
    assert!(times[15] < 0.05, "p50 {:.1} ms", 1e3 * times[15]);
}

fn frame(v: Value) -> String {
    v.to_string()
}

fn update(reply: ServerFrame) -> (u64, Vec<DynamicParams>, Option<sigmastyle::Trajectory>, usize) {
    match reply {
        ServerFrame::Update {
            plan_version,
            dynamics,
            trajectory,
            recomputed_from,
            ..
        } => (plan_version, dynamics, trajectory, recomputed_from),
        other => panic!("{other:?}"),
    }
}

fn loaded_session(reg: &Arc<ModelRegistry>, plan: &ActionPlan, seed: u64) -> Session {
    let mut s = Session::new(reg.clone());
    update(s.handle_text(&frame(json!({"type": "set_model", "version": 1, "model": "desk"}))));
    update(s.handle_text(&frame(json!({"type": "set_primer", "version": 2, "primer": "slow"}))));
    update(s.handle_text(&frame(json!({"type": "set_seed", "version": 3, "seed": seed}))));
    update(s.handle_text(&frame(json!({"type": "set_targets", "version": 4, "targets": targets_json(plan)}))));
    s
}

fn full(reg: &Arc<ModelRegistry>, targets: &[VirtualTarget], seed: u64) -> PredictResponse {
    predict(
        reg,
        &PredictRequest {
            model: "desk".into(),
            targets: targets.to_vec(),
            primer: Some("slow".into()),
            seed,
            svg: false,
        },
    )
    .unwrap()
}

#[test]
fn moving_the_last_target_matches_full_recompute() {
    let reg = registry();
    let plan = random_plan(10, 1);
    let mut s = loaded_session(&reg, &plan, 7);
    let reply = s.handle(ClientFrame::UpsertTarget {
        version: 5,
        index: 9,
        position: sigmastyle::Vec2::new(0.3, -0.2),
        pen_up: false,
    });
    let (v, dynamics, trajectory, from) = update(reply);
    assert_eq!(v, 5);
    assert_eq!(from, 8);
    let expect = full(&reg, s.targets(), 7);
    assert_eq!(dynamics, expect.dynamics);
    assert_eq!(trajectory.unwrap(), expect.trajectory);
}

#[test]
fn changing_the_seed_resamples_everything() {
    let reg = registry();
    let plan = random_plan(10, 1);
    let mut s = loaded_session(&reg, &plan, 7);
    let (_, before, t0, _) = update(s.handle(ClientFrame::RequestResample { version: 5 }));
    let (_, after, t1, from) = update(s.handle(ClientFrame::SetSeed { version: 6, seed: 8 }));
    assert_eq!(from, 0);
    assert!(before.iter().zip(&after).all(|(a, b)| a != b));
    assert_ne!(t0, t1);
}

#[test]
fn bad_frames_leave_the_session_intact() {
    let reg = registry();
    let plan = random_plan(6, 1);
    let mut s = loaded_session(&reg, &plan, 7);
    let code = |f: ServerFrame| match f {
        ServerFrame::Error { error, .. } => error.code,
        other => panic!("{other:?}"),
    };
    assert_eq!(code(s.handle_text("{not json")), 400);
    assert_eq!(code(s.handle_text(&frame(json!({"type": "warp", "version": 9})))), 400);
    assert_eq!(code(s.handle(ClientFrame::SetSeed { version: 4, seed: 1 })), 409);
    assert_eq!(code(s.handle(ClientFrame::SetModel { version: 5, model: "nope".into() })), 404);
    assert_eq!(code(s.handle(ClientFrame::SetModel { version: 6, model: "targets".into() })), 422);
    assert_eq!(code(s.handle(ClientFrame::DeleteTarget { version: 7, index: 6 })), 422);
    assert_eq!(s.targets(), &plan.targets[..]);
    let (v, dynamics, _, _) = update(s.handle(ClientFrame::RequestResample { version: 8 }));
    assert_eq!(v, 8);
    assert_eq!(dynamics, full(&reg, &plan.targets, 7).dynamics);
}

#[test]
fn pending_until_two_targets() {
    let reg = registry();
    let mut s = Session::new(reg);
    let (_, d, t, _) = update(s.handle_text(&frame(json!({"type": "upsert_target", "version": 1, "index": 0, "position": [0, 0]}))));
    assert!(d.is_empty() && t.is_none());
    let (_, d, t, _) = update(s.handle_text(&frame(json!({"type": "upsert_target", "version": 2, "index": 1, "position": [1, 0]}))));
    assert!(d.is_empty() && t.is_none(), "no model selected yet");
    let (_, d, t, _) = update(s.handle_text(&frame(json!({"type": "set_model", "version": 3, "model": "desk"}))));
    assert_eq!(d.len(), 1);
    assert!(t.is_some());
}

#[derive(Clone, Debug)]
enum Edit {
    Move(usize, f64, f64),
    Insert(f64, f64, bool),
    Delete(usize),
    Seed(u64),
    Primer(bool),
}

fn edit() -> impl Strategy<Value = Edit> {
    prop_oneof![
        4 => (0usize..16, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(i, x, y)| Edit::Move(i, x, y)),
        2 => (-1.0f64..1.0, -1.0f64..1.0, any::<bool>()).prop_map(|(x, y, p)| Edit::Insert(x, y, p)),
        1 => (0usize..16).prop_map(Edit::Delete),
        1 => (0u64..4).prop_map(Edit::Seed),
        1 => any::<bool>().prop_map(Edit::Primer),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_updates_equal_full_recompute(edits in prop::collection::vec(edit(), 1..12)) {
        let reg = registry();
        let plan = random_plan(8, 2);
        let mut s = loaded_session(&reg, &plan, 1);
        let (mut seed, mut primed) = (1, true);
        for (k, e) in edits.into_iter().enumerate() {
            let version = 10 + k as u64;
            let n = s.targets().len();
            let frame = match e {
                Edit::Move(i, x, y) if n > 0 => ClientFrame::UpsertTarget {
                    version, index: i % n, position: sigmastyle::Vec2::new(x, y), pen_up: false,
                },
                Edit::Delete(i) if n > 2 => ClientFrame::DeleteTarget { version, index: i % n },
                Edit::Seed(v) => {
                    seed = v;
                    ClientFrame::SetSeed { version, seed }
                }
                Edit::Primer(p) => {
                    primed = p;
                    ClientFrame::SetPrimer { version, primer: p.then(|| "slow".to_string()) }
                }
                Edit::Insert(x, y, p) => ClientFrame::UpsertTarget {
                    version, index: n, position: sigmastyle::Vec2::new(x, y), pen_up: p,
                },
                _ => ClientFrame::RequestResample { version },
            };
            let (v, dynamics, trajectory, _) = update(s.handle(frame));
            prop_assert_eq!(v, version);
            let expect = predict(&reg, &PredictRequest {
                model: "desk".into(),
                targets: s.targets().to_vec(),
                primer: primed.then(|| "slow".to_string()),
                seed,
                svg: false,
            }).unwrap();
            prop_assert_eq!(dynamics, expect.dynamics);
            prop_assert_eq!(trajectory.unwrap(), expect.trajectory);
        }
    }
}

async fn spawn_server() -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let reg = (*registry()).clone();
    tokio::spawn(serve(listener, reg));
    addr
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn send(ws: &mut Ws, v: Value) -> Value {
    ws.send(Message::Text(v.to_string())).await.unwrap();
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("{other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_session_agrees_with_predict() {
    let addr = spawn_server().await;
    let plan = random_plan(12, 6);
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session")).await.unwrap();
    send(&mut ws, json!({"type": "set_model", "version": 1, "model": "desk"})).await;
    send(&mut ws, json!({"type": "set_primer", "version": 2, "primer": "slow"})).await;
    send(&mut ws, json!({"type": "set_seed", "version": 3, "seed": 11})).await;
    send(&mut ws, json!({"type": "set_targets", "version": 4, "targets": targets_json(&plan)})).await;
    let reply = send(&mut ws, json!({"type": "upsert_target", "version": 5, "index": 11, "position": [0.2, 0.1]})).await;
    assert_eq!(reply["type"], "update");
    assert_eq!(reply["plan_version"], 5);
    assert_eq!(reply["recomputed_from"], 10);

    let mut targets = plan.targets.clone();
    targets[11].position = sigmastyle::Vec2::new(0.2, 0.1);
    let client = predict_via_router(&targets, 11).await;
    assert_eq!(reply["dynamics"], client["dynamics"]);
    assert_eq!(reply["trajectory"], client["trajectory"]);

    let err = send(&mut ws, json!({"type": "set_seed", "version": 5, "seed": 1})).await;
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], 409);
    let err = send(&mut ws, json!("garbage")).await;
    assert_eq!(err["code"], 400);
    let again = send(&mut ws, json!({"type": "request_resample", "version": 6})).await;
    assert_eq!(again["dynamics"], client["dynamics"]);
}

async fn predict_via_router(targets: &[VirtualTarget], seed: u64) -> Value {
    let reg = registry();
    let (s, v) = post(
        &reg,
        "/predict",
        json!({"model": "desk", "targets": targets, "primer": "slow", "seed": seed}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    v
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_independent() {
    let addr = spawn_server().await;
    let plan = random_plan(10, 8);
    let run = |seed: u64| {
        let plan = plan.clone();
        async move {
            let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session")).await.unwrap();
            send(&mut ws, json!({"type": "set_model", "version": 1, "model": "desk"})).await;
            send(&mut ws, json!({"type": "set_seed", "version": 2, "seed": seed})).await;
            let mut last = Value::Null;
            for (k, t) in plan.targets.iter().enumerate() {
                last = send(
                    &mut ws,
                    json!({"type": "upsert_target", "version": 3 + k, "index": k, "position": t.position, "pen_up": t.pen_up}),
                )
                .await;
            }
            last["dynamics"].clone()
        }
    };
    let handles: Vec<_> = (0..6).map(|i| tokio::spawn(run(i % 3))).collect();
    let mut results = Vec::new();
    for h in handles {
        results.push(h.await.unwrap());
    }
    for i in 0..3 {
        assert_eq!(results[i], results[i + 3]);
        let expect = serde_json::to_value(
            predict(
                &registry(),
                &PredictRequest {
                    model: "desk".into(),
                    targets: plan.targets.clone(),
                    primer: None,
                    seed: i as u64,
                    svg: false,
                },
            )
            .unwrap()
            .dynamics,
        )
        .unwrap();
        assert_eq!(results[i], expect);
    }
    assert_ne!(results[0], results[1]);
}
