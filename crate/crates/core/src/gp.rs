//! Zero-mean squared-exponential GP regression baseline.
//!
//! Each output dimension is an independent scalar GP sharing one kernel; only
//! the noise variance differs per dimension.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{NoiseModel, PosteriorState, PredictiveDensity, PriorParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, Matrix};
use crate::net::{NetConfig, NetWeights};

pub const GP_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SEKernelParams {
    pub lengthscale: f64,
    pub signal_var: f64,
    /// One entry per output dimension.
    pub noise_var: Vec<f64>,
}

impl SEKernelParams {
    pub fn new(lengthscale: f64, signal_var: f64, noise_var: Vec<f64>) -> Result<Self> {
        let p = SEKernelParams {
            lengthscale,
            signal_var,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    /// `ℓ = 1`, `σ_f² = 6.25`, `σ_n²` from the diagonal of `Σ_ε`.
    pub fn default_for(noise: &NoiseModel) -> Self {
        SEKernelParams {
            lengthscale: 1.0,
            signal_var: 6.25,
            noise_var: noise.sigma().diag(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lengthscale) || !positive(self.signal_var) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale and signal variance must be positive, got {} and {}",
                self.lengthscale, self.signal_var
            )));
        }
        if self.noise_var.is_empty() || !self.noise_var.iter().all(|&v| positive(v)) {
            return Err(Error::InvalidArgument(format!(
                "noise variances must be positive, got {:?}",
                self.noise_var
            )));
        }
        Ok(())
    }
}

pub fn se_kernel(x: &[f64], x2: &[f64], params: &SEKernelParams) -> f64 {
    let d2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    params.signal_var * (-d2 / (2.0 * params.lengthscale * params.lengthscale)).exp()
}

fn gram(xs: &Matrix, params: &SEKernelParams) -> Matrix {
    let n = xs.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_var;
        for j in 0..i {
            let v = se_kernel(xs.row(i), xs.row(j), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// A GP conditioned on `(X, Y)`: one Cholesky factor and weight vector per
/// output dimension.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    params: SEKernelParams,
    xs: Matrix,
    factors: Vec<Matrix>,
    /// `n × n_y`, column `d` holding `(K + σ_n,d² I)⁻¹ y_d`.
    alpha: Matrix,
}

impl GpPosterior {
    pub fn fit(xs: &Matrix, ys: &Matrix, params: &SEKernelParams) -> Result<Self> {
        params.validate()?;
        if xs.rows() != ys.rows() {
            return Err(Error::shape("gp_fit", xs.shape(), ys.shape()));
        }
        if ys.cols() != params.noise_var.len() {
            return Err(Error::Dimension(format!(
                "{} outputs but {} noise variances",
                ys.cols(),
                params.noise_var.len()
            )));
        }
        let n = xs.rows();
        let k = gram(xs, params);
        let jitter = GP_JITTER * params.signal_var;
        let mut factors: Vec<Matrix> = Vec::with_capacity(ys.cols());
        let mut alpha = Matrix::zeros(n, ys.cols());
        for (d, &nv) in params.noise_var.iter().enumerate() {
            if d > 0 && nv == params.noise_var[d - 1] {
                factors.push(factors[d - 1].clone());
            } else {
                let mut kd = k.clone();
                for i in 0..n {
                    kd[(i, i)] += nv + jitter;
                }
                factors.push(cholesky(&kd)?);
            }
            let l: &Matrix = &factors[d];
            let y = Matrix::column(&ys.col_to_vec(d));
            let a = crate::linalg::cholesky_solve(l, &y)?;
            for i in 0..n {
                alpha[(i, d)] = a[(i, 0)];
            }
        }
        Ok(GpPosterior {
            params: params.clone(),
            xs: xs.clone(),
            factors,
            alpha,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictiveDensity> {
        let n_y = self.params.noise_var.len();
        let n = self.xs.rows();
        if n > 0 && x.len() != self.xs.cols() {
            return Err(Error::Dimension(format!(
                "query has {} inputs, data has {}",
                x.len(),
                self.xs.cols()
            )));
        }
        let kstar: Vec<f64> = (0..n).map(|i| se_kernel(self.xs.row(i), x, &self.params)).collect();
        let mut mean = vec![0.0; n_y];
        let mut var = vec![0.0; n_y];
        let ks = Matrix::column(&kstar);
        for d in 0..n_y {
            mean[d] = (0..n).map(|i| kstar[i] * self.alpha[(i, d)]).sum();
            let explained = if n == 0 {
                0.0
            } else {
                let v = solve_lower(&self.factors[d], &ks)?;
                v.as_slice().iter().map(|a| a * a).sum()
            };
            var[d] = (self.params.signal_var + self.params.noise_var[d] - explained).max(0.0);
        }
        Ok(PredictiveDensity {
            mean,
            cov: Matrix::diagonal(&var),
        })
    }
}

/// Exact GP posterior predictive at a single query.
pub fn gp_predict(
    xs: &Matrix,
    ys: &Matrix,
    x_query: &[f64],
    params: &SEKernelParams,
) -> Result<PredictiveDensity> {
    GpPosterior::fit(xs, ys, params)?.predict(x_query)
}

/// One timing measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub context_size: usize,
    pub queries: usize,
    pub seconds: f64,
}

pub const TIMING_CSV_HEADER: &str = "method,context_size,queries,seconds";

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from(TIMING_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{:e}", r.method, r.context_size, r.queries, r.seconds).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub context_sizes: Vec<usize>,
    pub queries: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Each measurement is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions {
            context_sizes: vec![256, 512, 1024, 2048],
            queries: 16,
            input_dim: 1,
            output_dim: 1,
            hidden_dims: vec![128, 128],
            feature_dim: 16,
            repeats: 3,
            seed: 0,
        }
    }
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Wall time of ALPaCA (`n` recursive updates plus `m` predictions, network
/// forward passes included) and of exact GP prediction (factorization plus
/// `m` predictions) on synthetic data.
pub fn gp_timing_probe(opts: &TimingOptions) -> Result<Vec<TimingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let net_cfg = NetConfig::new(opts.input_dim, opts.hidden_dims.clone(), opts.feature_dim)?;
    let noise = NoiseModel::isotropic(0.05, opts.output_dim)?;
    let prior = PriorParams::new(
        Matrix::zeros(opts.feature_dim, opts.output_dim),
        Matrix::identity(opts.feature_dim),
        NetWeights::init(&net_cfg, &mut rng),
        noise.clone(),
    )?;
    let gp_params = SEKernelParams::default_for(&noise);
    let queries = Matrix::from_fn(opts.queries, opts.input_dim, |_, _| rng.random_range(-5.0..5.0));

    let mut rows = Vec::new();
    for &n in &opts.context_sizes {
        let xs = Matrix::from_fn(n, opts.input_dim, |_, _| rng.random_range(-5.0..5.0));
        let ys = Matrix::from_fn(n, opts.output_dim, |_, _| rng.random_range(-1.0..1.0));

        let alpaca = min_time(opts.repeats, || {
            let mut state = PosteriorState::from_prior_terms(&prior.kbar0, &prior.l0)?;
            for t in 0..n {
                let phi = prior.net.features(xs.row(t))?;
                state.update(&phi, ys.row(t))?;
            }
            for q in 0..opts.queries {
                let phi = prior.net.features(queries.row(q))?;
                std::hint::black_box(state.predict(&phi, &noise)?);
            }
            Ok(())
        })?;
        rows.push(TimingRow {
            method: "alpaca".into(),
            context_size: n,
            queries: opts.queries,
            seconds: alpaca,
        });

        let gp = min_time(opts.repeats, || {
            let post = GpPosterior::fit(&xs, &ys, &gp_params)?;
            for q in 0..opts.queries {
                std::hint::black_box(post.predict(queries.row(q))?);
            }
            Ok(())
        })?;
        rows.push(TimingRow {
            method: "gp".into(),
            context_size: n,
            queries: opts.queries,
            seconds: gp,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln seconds` against `ln context_size` for one method.
pub fn log_log_slope(rows: &[TimingRow], method: &str) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method && r.context_size > 0 && r.seconds > 0.0)
        .map(|r| ((r.context_size as f64).ln(), r.seconds.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}
