//! HTTP inference service over a checkpoint loaded once at startup.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use born_core::checkpoint;
use born_core::data::{load_dataset, DatasetDescriptor, Image, Split};
use born_core::engine;
use born_core::networks::{BinModel, TargetCondition};
use born_core::Error;

use crate::api::*;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint_path: PathBuf,
    /// Overrides the dataset root recorded in the checkpoint.
    pub dataset_path: Option<PathBuf>,
    /// Upper bound on `limit` and interpolation `steps`.
    pub max_batch: usize,
    /// Empty means any origin.
    pub cors_allowed_origins: Vec<String>,
}

/// Everything a request can read. The model sits behind a mutex because
/// tensors are not shareable across threads; inference never mutates it.
pub struct Loaded {
    pub model: Mutex<BinModel>,
    pub dataset: DatasetDescriptor,
    pub test: Split,
    pub checkpoint: String,
    pub step: u64,
}

pub struct AppState {
    pub loaded: Option<Loaded>,
    pub max_batch: usize,
}

impl AppState {
    /// Loads the checkpoint and the held-out split it was trained against.
    pub fn load(cfg: &ServiceConfig) -> born_core::Result<Self> {
        let (model, manifest) = checkpoint::load_model(&cfg.checkpoint_path)?;
        let train_cfg = checkpoint::stored_config(&manifest).ok_or_else(|| {
            Error::Config(format!(
                "{}: checkpoint carries no run configuration",
                cfg.checkpoint_path.display()
            ))
        })?;
        let mut desc = train_cfg.dataset.clone();
        if let Some(root) = &cfg.dataset_path {
            desc.root = root.clone();
        }
        let splits = load_dataset(&desc, train_cfg.seed)?;
        Ok(Self {
            loaded: Some(Loaded {
                model: Mutex::new(model),
                dataset: desc,
                test: splits.test,
                checkpoint: cfg.checkpoint_path.display().to_string(),
                step: manifest.step,
            }),
            max_batch: cfg.max_batch,
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: msg.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Condition(_) | Error::Shape { .. } | Error::Contract(_) | Error::Image(_) | Error::Format { .. } => {
                StatusCode::BAD_REQUEST
            }
            Error::Lookup(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn loaded(state: &AppState) -> Result<&Loaded, ApiError> {
    state.loaded.as_ref().ok_or(ApiError {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: "model not loaded".into(),
    })
}

fn condition(v: Vec<f64>, k: usize, field: &str) -> Result<TargetCondition, ApiError> {
    if v.len() != k {
        return Err(ApiError::bad(format!("{field}: expected {k} entries, got {}", v.len())));
    }
    TargetCondition::new(v).map_err(|e| ApiError::bad(format!("{field}: {e}")))
}

fn sample(l: &Loaded, id: &str) -> Result<Image, ApiError> {
    let pos = l.test.position_of(id).ok_or(ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("unknown sample_id `{id}`"),
    })?;
    Ok(l.test.image(pos))
}

/// Runs blocking inference off the async workers.
async fn blocking<T: Send + 'static>(
    state: Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
}

async fn meta(State(state): State<Arc<AppState>>) -> ApiResult<MetaResponse> {
    let l = loaded(&state)?;
    Ok(Json(MetaResponse {
        dataset: l.dataset.name.clone(),
        classes: l.dataset.class_names(),
        image_shape: l.dataset.image_shape.as_hwc(),
        checkpoint: l.checkpoint.clone(),
        step: l.step,
    }))
}

async fn samples(State(state): State<Arc<AppState>>, Query(q): Query<SamplesQuery>) -> ApiResult<SamplesResponse> {
    loaded(&state)?;
    let split = q.split.unwrap_or_else(|| "test".into());
    if split != "test" {
        return Err(ApiError::bad(format!(
            "only the held-out `test` split is served, not `{split}`"
        )));
    }
    let limit = q.limit.unwrap_or(20);
    if limit > state.max_batch {
        return Err(ApiError::bad(format!(
            "limit {limit} exceeds the maximum of {}",
            state.max_batch
        )));
    }
    let offset = q.offset.unwrap_or(0);
    let raw = q.raw.unwrap_or(false);
    blocking(state, move |state| {
        let l = loaded(state)?;
        let positions: Vec<usize> = (offset..(offset + limit).min(l.test.len())).collect();
        let mut out = Vec::with_capacity(positions.len());
        let images: Vec<Image> = positions.iter().map(|&p| l.test.image(p)).collect();
        let pred = {
            let model = l.model.lock().expect("model lock");
            engine::predict(&model, &images.iter().collect::<Vec<_>>())?
        };
        for ((img, &pos), p) in images.iter().zip(&positions).zip(pred) {
            out.push(Sample {
                id: l.test.source_id(pos).to_string(),
                label: l.test.label(pos),
                predicted: p,
                thumbnail: B64.encode(engine::image_png(img)?),
                raw: raw.then(|| B64.encode(engine::f32_blob(img.pixels()))),
            });
        }
        Ok(SamplesResponse {
            split: "test".into(),
            total: l.test.len(),
            offset,
            samples: out,
        })
    })
    .await
    .map(Json)
}

async fn generate(State(state): State<Arc<AppState>>, Json(req): Json<GenerateRequest>) -> ApiResult<GeneratePayload> {
    loaded(&state)?;
    blocking(state, move |state| {
        let l = loaded(state)?;
        let k = l.dataset.num_classes;
        let y = condition(req.target, k, "target")?;
        let (x, id) = match (req.sample_id, req.image_b64) {
            (Some(id), _) => (sample(l, &id)?, id),
            (None, Some(b64)) => {
                let bytes = B64.decode(b64).map_err(|e| ApiError::bad(format!("image_b64: {e}")))?;
                (
                    engine::image_from_png(&bytes, l.dataset.image_shape, l.dataset.normalization)?,
                    "upload".to_string(),
                )
            }
            (None, None) => return Err(ApiError::bad("either sample_id or image_b64 is required")),
        };
        let model = l.model.lock().expect("model lock");
        let r = engine::generate(&model, &x, &id, &y)?;
        Ok(GeneratePayload::from_result(&r)?)
    })
    .await
    .map(Json)
}

async fn interpolate(
    State(state): State<Arc<AppState>>,
    Json(req): Json<InterpolateRequest>,
) -> ApiResult<Vec<GeneratePayload>> {
    loaded(&state)?;
    if req.steps < 2 || req.steps > state.max_batch {
        return Err(ApiError::bad(format!(
            "steps must lie in 2..={}, got {}",
            state.max_batch, req.steps
        )));
    }
    blocking(state, move |state| {
        let l = loaded(state)?;
        let k = l.dataset.num_classes;
        let a = condition(req.target_a, k, "target_a")?;
        let b = condition(req.target_b, k, "target_b")?;
        let x = sample(l, &req.sample_id)?;
        let model = l.model.lock().expect("model lock");
        let seq = engine::interpolate(&model, &x, &req.sample_id, &a, &b, req.steps)?;
        seq.iter().map(|r| Ok(GeneratePayload::from_result(r)?)).collect()
    })
    .await
    .map(Json)
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    let origins = if cors_origins.is_empty() || cors_origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/samples", get(samples))
        .route("/api/generate", post(generate))
        .route("/api/interpolate", post(interpolate))
        .layer(cors)
        .with_state(state)
}

/// Loads the checkpoint (failing fast) and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::load(&cfg)?);
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} on http://{}",
        cfg.checkpoint_path.display(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state, &cfg.cors_allowed_origins)).await?;
    Ok(())
}
