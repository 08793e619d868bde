//! Request and response bodies of the HTTP/JSON service.
//!
//! Corpora travel in the plain-text corpus format; models travel as
//! [`ModelFile`] JSON.

use serde::{Deserialize, Serialize};

use crate::eval::{Coverage, EvalRow, Method};
use crate::gp::{SEKernelParams, TimingOptions, TimingRow};
use crate::linalg::Matrix;
use crate::model::ModelFile;
use crate::tasks::TaskKind;
use crate::train::{MetaTrainConfig, TrainReport};

pub const API_PREFIX: &str = "/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub task: TaskKind,
    pub count: usize,
    pub tau: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusResponse {
    pub corpus: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub corpus: String,
    pub config: MetaTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model: ModelFile,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub model: ModelFile,
    pub corpus: String,
    pub max_context: usize,
    pub methods: Vec<Method>,
    /// Defaults derived from the model's noise when absent.
    pub gp: Option<SEKernelParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRequest {
    pub model: ModelFile,
    pub corpus: String,
    pub context_size: usize,
    pub cov_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResponse {
    pub coverage: Coverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub model: ModelFile,
    /// Context transitions, `t × n_x` and `t × n_y`.
    pub context_xs: Matrix,
    pub context_ys: Matrix,
    pub start: Vec<f64>,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    /// `samples × horizon × n_y`
    pub trajectories: Vec<Vec<Vec<f64>>>,
    pub spread: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingResponse {
    pub rows: Vec<TimingRow>,
}

pub type TimingRequest = TimingOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub model: ModelFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    /// Number of observations folded in so far.
    pub observations: usize,
    pub feature_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserveRequest {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    /// `n_φ × n_y` weight draw from the current posterior.
    pub weights: Matrix,
}
