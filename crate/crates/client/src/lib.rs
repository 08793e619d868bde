//! Thin async client for the ALPaCA HTTP/JSON service.

use alpaca_core::api::*;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

async fn api_error(status: StatusCode, resp: reqwest::Response) -> ClientError {
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text)
        .map(|b| b.error)
        .unwrap_or(text);
    ClientError::Api { status, message }
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        Err(api_error(status, resp).await)
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.send(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        self.send::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn generate(&self, req: &GenerateRequest) -> Result<CorpusResponse> {
        self.post("/v1/generate", req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse> {
        self.post("/v1/train", req).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalResponse> {
        self.post("/v1/eval", req).await
    }

    pub async fn calibration(&self, req: &CalibrationRequest) -> Result<CalibrationResponse> {
        self.post("/v1/calibration", req).await
    }

    pub async fn rollout(&self, req: &RolloutRequest) -> Result<RolloutResponse> {
        self.post("/v1/rollout", req).await
    }

    pub async fn timing(&self, req: &TimingRequest) -> Result<TimingResponse> {
        self.post("/v1/timing", req).await
    }

    pub async fn create_session(&self, req: &CreateSessionRequest) -> Result<SessionInfo> {
        self.post("/v1/sessions", req).await
    }

    pub async fn session(&self, id: &str) -> Result<SessionInfo> {
        self.send::<(), _>(Method::GET, &format!("/v1/sessions/{id}"), None).await
    }

    pub async fn delete_session(&self, id: &str) -> Result<()> {
        let resp = self
            .http
            .delete(format!("{}/v1/sessions/{id}", self.base))
            .send()
            .await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        Err(api_error(status, resp).await)
    }

    pub async fn observe(&self, id: &str, req: &ObserveRequest) -> Result<SessionInfo> {
        self.post(&format!("/v1/sessions/{id}/observe"), req).await
    }

    pub async fn predict(&self, id: &str, req: &PredictRequest) -> Result<PredictResponse> {
        self.post(&format!("/v1/sessions/{id}/predict"), req).await
    }

    pub async fn sample(&self, id: &str, req: &SampleRequest) -> Result<SampleResponse> {
        self.post(&format!("/v1/sessions/{id}/sample"), req).await
    }
}
