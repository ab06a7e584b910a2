//! Train a small model and serve it on http://127.0.0.1:8080.
//!
//! ```text
//! curl localhost:8080/models
//! curl -X POST localhost:8080/predict -H 'content-type: application/json' \
//!   -d '{"model":"demo","targets":[{"position":[0,0]},{"position":[1,0.5]},{"position":[1.5,0]}],"seed":1}'
//! ```
//!
//! A WebSocket client on `/session` can then send
//! `{"type":"set_model","version":1,"model":"demo"}` followed by
//! `upsert_target` frames and receive a fresh trajectory for each edit.

use rand::SeedableRng;
use sigmastyle::augment::AugmentConfig;
use sigmastyle::pipelines::{train_dpp, PrimerExample};
use sigmastyle::rmdn::{NetworkConfig, TrainOptions};
use sigmastyle::service::{bind, serve, ModelRegistry};
use sigmastyle::slm::RandomPlanConfig;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let port: u16 = std::env::args().nth(1).and_then(|p| p.parse().ok()).unwrap_or(8080);
    let exemplar = RandomPlanConfig::default().sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let net = NetworkConfig {
        hidden_dim: 64,
        num_gaussians: 5,
        ..Default::default()
    };
    let ckpt = tokio::task::spawn_blocking(move || {
        train_dpp(
            &[PrimerExample::new(exemplar, "demo")],
            &AugmentConfig { n_p: 100, seed: 1, ..Default::default() },
            &net,
            &TrainOptions { epochs: 5, ..Default::default() },
        )
    })
    .await??;

    let mut registry = ModelRegistry::new();
    registry.insert("demo", ckpt)?;
    let listener = bind(([127, 0, 0, 1], port).into()).await?;
    println!("listening on http://{}", listener.local_addr()?);
    serve(listener, registry).await?;
    Ok(())
}
