//! HTTP/JSON front end over `alpaca-core`.
//!
//! Batch operations (generate, train, eval, calibration, rollout, timing)
//! are stateless: each request carries its model and corpus. Online sessions
//! hold a posterior in memory and fold observations in one at a time.
//! CPU-heavy work runs on the blocking thread pool.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use alpaca_core::api::*;
use alpaca_core::bayes::{init_posterior, PosteriorState, PriorParams};
use alpaca_core::corpus::Corpus;
use alpaca_core::eval::{calibration, evaluate, rollout, rollout_spread, EvalOptions};
use alpaca_core::gp::{gp_timing_probe, SEKernelParams};
use alpaca_core::model::{ModelFile, TrainingMetadata};
use alpaca_core::tasks::{sample_corpus, TaskDataset};
use alpaca_core::train::train;
use alpaca_core::{seeded_rng, Error};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

/// Corpora of thousands of tasks exceed axum's default 2 MiB body limit.
pub const MAX_BODY_BYTES: usize = 1 << 30;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::NonFiniteLoss { .. } | Error::NotPositiveDefinite { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, "{}", self.message);
        } else {
            tracing::warn!(status = %self.status, "{}", self.message);
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, Error> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

struct Session {
    prior: PriorParams,
    state: PosteriorState,
}

impl Session {
    fn info(&self, id: &str) -> SessionInfo {
        SessionInfo {
            id: id.to_string(),
            observations: self.state.t,
            feature_dim: self.prior.feature_dim(),
            input_dim: self.prior.net.input_dim(),
            output_dim: self.prior.output_dim(),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Session>>>,
}

impl AppState {
    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, Error>,
    ) -> Result<T, ApiError> {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let session = sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))?;
        f(session).map_err(ApiError::from)
    }
}

pub fn router() -> Router {
    router_with_state(AppState::default())
}

pub fn router_with_state(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/generate", post(generate))
        .route("/v1/train", post(train_model))
        .route("/v1/eval", post(eval))
        .route("/v1/calibration", post(calibrate))
        .route("/v1/rollout", post(roll))
        .route("/v1/timing", post(timing))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_info).delete(delete_session))
        .route("/v1/sessions/{id}/observe", post(observe))
        .route("/v1/sessions/{id}/predict", post(predict))
        .route("/v1/sessions/{id}/sample", post(sample))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router())
        .with_graceful_shutdown(shutdown)
        .await
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn generate(Json(req): Json<GenerateRequest>) -> ApiResult<CorpusResponse> {
    blocking(move || {
        if req.tau == 0 {
            return Err(Error::InvalidArgument("tau must be at least 1".into()));
        }
        let mut rng = seeded_rng(req.seed);
        let tasks = sample_corpus(req.task, &mut rng, req.count, req.tau);
        let corpus = Corpus::new(tasks)
            .with_meta("generator", req.task)
            .with_meta("seed", req.seed)
            .with_meta("tau", req.tau);
        Ok(CorpusResponse {
            corpus: corpus.to_text(),
        })
    })
    .await
}

async fn train_model(Json(req): Json<TrainRequest>) -> ApiResult<TrainResponse> {
    blocking(move || {
        let corpus = Corpus::from_text(&req.corpus)?;
        tracing::info!(
            tasks = corpus.len(),
            iterations = req.config.iterations,
            "training started"
        );
        let (prior, report) = train(&corpus.tasks, &req.config)?;
        let net_config = req.config.net_config(prior.net.input_dim())?;
        let meta = TrainingMetadata::for_config(&req.config, report.losses.last().copied());
        let model = ModelFile::new(&prior, net_config, meta)?;
        tracing::info!(final_loss = ?report.losses.last(), "training finished");
        Ok(TrainResponse { model, report })
    })
    .await
}

async fn eval(Json(req): Json<EvalRequest>) -> ApiResult<EvalResponse> {
    blocking(move || {
        let prior = req.model.to_prior()?;
        let corpus = Corpus::from_text(&req.corpus)?;
        let gp = match req.gp {
            Some(p) => p,
            None => SEKernelParams::default_for(&prior.noise),
        };
        let opts = EvalOptions {
            max_context: req.max_context,
        };
        let mut rows = Vec::new();
        for method in req.methods {
            rows.extend(evaluate(method, &prior, &gp, &corpus.tasks, &opts)?);
        }
        Ok(EvalResponse { rows })
    })
    .await
}

async fn calibrate(Json(req): Json<CalibrationRequest>) -> ApiResult<CalibrationResponse> {
    blocking(move || {
        let prior = req.model.to_prior()?;
        let corpus = Corpus::from_text(&req.corpus)?;
        let coverage = calibration(&prior, &corpus.tasks, req.context_size, req.cov_scale)?;
        Ok(CalibrationResponse { coverage })
    })
    .await
}

async fn roll(Json(req): Json<RolloutRequest>) -> ApiResult<RolloutResponse> {
    blocking(move || {
        let prior = req.model.to_prior()?;
        let context = TaskDataset::new(req.context_xs, req.context_ys)?;
        let mut rng = seeded_rng(req.seed);
        let trajectories = rollout(&prior, &context, &req.start, req.horizon, req.samples, &mut rng)?;
        let spread = rollout_spread(&trajectories);
        Ok(RolloutResponse {
            trajectories,
            spread,
        })
    })
    .await
}

async fn timing(Json(req): Json<TimingRequest>) -> ApiResult<TimingResponse> {
    blocking(move || Ok(TimingResponse { rows: gp_timing_probe(&req)? })).await
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let prior = req.model.to_prior()?;
    let posterior = init_posterior(&prior)?;
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        prior,
        state: posterior,
    };
    let info = session.info(&id);
    state
        .sessions
        .lock()
        .expect("session lock poisoned")
        .insert(id, session);
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    state.with_session(&id, |s| Ok(s.info(&id))).map(Json)
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().expect("session lock poisoned").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no session '{id}'"))),
    }
}

async fn observe(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ObserveRequest>,
) -> ApiResult<SessionInfo> {
    state
        .with_session(&id, |s| {
            if req.y.len() != s.prior.output_dim() {
                return Err(Error::Dimension(format!(
                    "y has {} values, model has {} outputs",
                    req.y.len(),
                    s.prior.output_dim()
                )));
            }
            let phi = s.prior.net.features(&req.x)?;
            s.state.update(&phi, &req.y)?;
            Ok(s.info(&id))
        })
        .map(Json)
}

async fn predict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<PredictRequest>,
) -> ApiResult<PredictResponse> {
    state
        .with_session(&id, |s| {
            let phi = s.prior.net.features(&req.x)?;
            let p = s.state.predict(&phi, &s.prior.noise)?;
            Ok(PredictResponse {
                mean: p.mean,
                cov: p.cov,
            })
        })
        .map(Json)
}

async fn sample(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SampleRequest>,
) -> ApiResult<SampleResponse> {
    state
        .with_session(&id, |s| {
            let mut rng = seeded_rng(req.seed);
            Ok(SampleResponse {
                weights: s.state.sample_weights(&s.prior.noise, &mut rng)?,
            })
        })
        .map(Json)
}
