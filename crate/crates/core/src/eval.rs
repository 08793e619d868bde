//! Evaluation harness: NLL/MSE against context size, calibration coverage,
//! and posterior-sampled rollouts.
//!
//! For every test task the first `max_context` points are context and the
//! remaining points are held out. Context is folded in one point at a time
//! and, after each `t ∈ {0, …, max_context}`, every held-out point is scored.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{gaussian_nll, init_posterior, PosteriorState, PredictiveDensity, PriorParams};
use crate::error::{Error, Result};
use crate::gp::{GpPosterior, SEKernelParams};
use crate::linalg::Matrix;
use crate::tasks::TaskDataset;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Alpaca,
    AlpacaNoMeta,
    AlpacaNoUpdate,
    Gp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Alpaca,
        Method::AlpacaNoMeta,
        Method::AlpacaNoUpdate,
        Method::Gp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Alpaca => "alpaca",
            Method::AlpacaNoMeta => "alpaca-no-meta",
            Method::AlpacaNoUpdate => "alpaca-no-update",
            Method::Gp => "gp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}' (expected alpaca, alpaca-no-meta, alpaca-no-update or gp)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_context: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub context_size: usize,
    pub nll_mean: f64,
    pub nll_stderr: f64,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub pred_var_mean: f64,
}

pub const EVAL_CSV_HEADER: &str =
    "method,context_size,nll_mean,nll_stderr,mse_mean,mse_stderr,pred_var_mean";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method, r.context_size, r.nll_mean, r.nll_stderr, r.mse_mean, r.mse_stderr, r.pred_var_mean
        )
        .unwrap();
    }
    out
}

/// Per-task scores at one context size.
#[derive(Clone, Copy, Debug, Default)]
struct TaskScore {
    nll: f64,
    mse: f64,
    var: f64,
}

fn score_points(
    data: &TaskDataset,
    start: usize,
    mut predict: impl FnMut(usize) -> Result<PredictiveDensity>,
) -> Result<TaskScore> {
    let n = data.len() - start;
    let n_y = data.output_dim() as f64;
    let mut s = TaskScore::default();
    for t in start..data.len() {
        let pred = predict(t)?;
        let y = data.ys.row(t);
        s.nll += gaussian_nll(&pred, y)?;
        s.mse += pred.mean.iter().zip(y).map(|(m, v)| (m - v) * (m - v)).sum::<f64>() / n_y;
        s.var += pred.cov.trace() / n_y;
    }
    let n = n as f64;
    Ok(TaskScore {
        nll: s.nll / n,
        mse: s.mse / n,
        var: s.var / n,
    })
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn aggregate(method: Method, per_task: &[Vec<TaskScore>]) -> Result<Vec<EvalRow>> {
    let steps = per_task.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let pick = |f: fn(&TaskScore) -> f64| per_task.iter().map(|s| f(&s[t])).collect::<Vec<_>>();
        let (nll_mean, nll_stderr) = mean_stderr(&pick(|s| s.nll));
        let (mse_mean, mse_stderr) = mean_stderr(&pick(|s| s.mse));
        let (pred_var_mean, _) = mean_stderr(&pick(|s| s.var));
        if !nll_mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{method} produced a non-finite NLL at context size {t}"
            )));
        }
        rows.push(EvalRow {
            method,
            context_size: t,
            nll_mean,
            nll_stderr,
            mse_mean,
            mse_stderr,
            pred_var_mean,
        });
    }
    Ok(rows)
}

fn check_tasks(tasks: &[TaskDataset], n_x: usize, n_y: usize, max_context: usize) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no test tasks".into()));
    }
    for (i, d) in tasks.iter().enumerate() {
        if d.input_dim() != n_x || d.output_dim() != n_y {
            return Err(Error::Dimension(format!(
                "test task {i} is {}->{}, model is {n_x}->{n_y}",
                d.input_dim(),
                d.output_dim()
            )));
        }
        if d.len() <= max_context {
            return Err(Error::InvalidArgument(format!(
                "test task {i} has {} points; need more than max_context = {max_context}",
                d.len()
            )));
        }
    }
    Ok(())
}

fn features_of(prior: &PriorParams, d: &TaskDataset) -> Result<Matrix> {
    prior.net.forward(&d.xs)
}

fn alpaca_scores(
    prior: &PriorParams,
    tasks: &[TaskDataset],
    opts: &EvalOptions,
    update: bool,
) -> Result<Vec<Vec<TaskScore>>> {
    check_tasks(tasks, prior.net.input_dim(), prior.output_dim(), opts.max_context)?;
    let noise = &prior.noise;
    let mut all = Vec::with_capacity(tasks.len());
    for d in tasks {
        let phi = features_of(prior, d)?;
        let mut state = init_posterior(prior)?;
        let mut scores = Vec::with_capacity(opts.max_context + 1);
        for t in 0..=opts.max_context {
            if t > 0 && update {
                state.update(phi.row(t - 1), d.ys.row(t - 1))?;
            }
            scores.push(score_points(d, opts.max_context, |i| state.predict(phi.row(i), noise))?);
        }
        all.push(scores);
    }
    Ok(all)
}

/// ALPaCA with recursive updates, tagged `alpaca`.
pub fn evaluate_alpaca(
    prior: &PriorParams,
    tasks: &[TaskDataset],
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    aggregate(Method::Alpaca, &alpaca_scores(prior, tasks, opts, true)?)
}

pub fn evaluate_gp(
    params: &SEKernelParams,
    tasks: &[TaskDataset],
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no test tasks".into()))?;
    check_tasks(tasks, first.input_dim(), params.noise_var.len(), opts.max_context)?;
    let mut all = Vec::with_capacity(tasks.len());
    for d in tasks {
        let mut scores = Vec::with_capacity(opts.max_context + 1);
        for t in 0..=opts.max_context {
            let gp = GpPosterior::fit(&d.xs.slice_rows(0, t), &d.ys.slice_rows(0, t), params)?;
            scores.push(score_points(d, opts.max_context, |i| gp.predict(d.xs.row(i)))?);
        }
        all.push(scores);
    }
    aggregate(Method::Gp, &all)
}

/// Rows for one method. `alpaca-no-meta` expects a model trained with the
/// no-meta ablation and evaluates it exactly like `alpaca`; `alpaca-no-update`
/// keeps the prior frozen.
pub fn evaluate(
    method: Method,
    prior: &PriorParams,
    gp_params: &SEKernelParams,
    tasks: &[TaskDataset],
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    match method {
        Method::Alpaca | Method::AlpacaNoMeta => {
            aggregate(method, &alpaca_scores(prior, tasks, opts, true)?)
        }
        Method::AlpacaNoUpdate => aggregate(method, &alpaca_scores(prior, tasks, opts, false)?),
        Method::Gp => evaluate_gp(gp_params, tasks, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub context_size: usize,
    pub covered: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Fraction of held-out outputs (per dimension) inside the central 95%
/// predictive interval after `t` context points. `cov_scale` multiplies the
/// predictive covariance.
pub fn calibration(
    prior: &PriorParams,
    tasks: &[TaskDataset],
    t: usize,
    cov_scale: f64,
) -> Result<Coverage> {
    check_tasks(tasks, prior.net.input_dim(), prior.output_dim(), t)?;
    if !(cov_scale > 0.0) {
        return Err(Error::InvalidArgument("covariance scale must be positive".into()));
    }
    let (mut covered, mut total) = (0, 0);
    for d in tasks {
        let phi = features_of(prior, d)?;
        let mut state = init_posterior(prior)?;
        for i in 0..t {
            state.update(phi.row(i), d.ys.row(i))?;
        }
        for i in t..d.len() {
            let pred = state.predict(phi.row(i), &prior.noise)?;
            for (k, (m, y)) in pred.mean.iter().zip(d.ys.row(i)).enumerate() {
                let half = Z_95 * (cov_scale * pred.cov[(k, k)]).sqrt();
                if (y - m).abs() <= half {
                    covered += 1;
                }
                total += 1;
            }
        }
    }
    Ok(Coverage {
        context_size: t,
        covered,
        total,
        fraction: covered as f64 / total as f64,
    })
}

/// Replaces every task's outputs with draws from the model itself: one
/// `K ~ MN(K̄₀, Λ₀⁻¹, Σ_ε)` per task and `y = Kᵀφ(x) + ε`.
pub fn resample_from_prior(
    prior: &PriorParams,
    tasks: &[TaskDataset],
    rng: &mut impl Rng,
) -> Result<Vec<TaskDataset>> {
    let state = init_posterior(prior)?;
    let noise_l = prior.noise.cholesky();
    let n_y = prior.output_dim();
    tasks
        .iter()
        .map(|d| {
            let k = state.sample_weights(&prior.noise, rng)?;
            let phi = features_of(prior, d)?;
            let mut ys = phi.matmul(&k)?;
            for r in 0..ys.rows() {
                let z: Vec<f64> = (0..n_y).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let eps = noise_l.matvec(&z);
                for (y, e) in ys.row_mut(r).iter_mut().zip(eps) {
                    *y += e;
                }
            }
            TaskDataset::new(d.xs.clone(), ys)
        })
        .collect()
}

/// Posterior-sampled trajectories of a learned dynamics model.
///
/// The model maps `x = (s, 0)` to `Δs`, with `s` the first `n_y` inputs and
/// any remaining inputs (actions) held at zero. Each sample draws one `K` and
/// rolls `s' = s + Kᵀφ(s, 0)` for `horizon` steps.
pub fn rollout(
    prior: &PriorParams,
    context: &TaskDataset,
    start: &[f64],
    horizon: usize,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_x = prior.net.input_dim();
    let n_y = prior.output_dim();
    if n_x < n_y {
        return Err(Error::Dimension(format!(
            "rollout needs inputs to contain the state: n_x = {n_x} < n_y = {n_y}"
        )));
    }
    if start.len() != n_y {
        return Err(Error::Dimension(format!(
            "start state has {} values, model state has {n_y}",
            start.len()
        )));
    }
    if !context.is_empty() && (context.input_dim() != n_x || context.output_dim() != n_y) {
        return Err(Error::Dimension(format!(
            "context is {}->{}, model is {n_x}->{n_y}",
            context.input_dim(),
            context.output_dim()
        )));
    }
    let state = conditioned(prior, context)?;
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let k = state.sample_weights(&prior.noise, rng)?;
        out.push(roll(prior, &k, start, horizon)?);
    }
    Ok(out)
}

/// Rollout under the posterior mean weights.
pub fn mean_rollout(
    prior: &PriorParams,
    context: &TaskDataset,
    start: &[f64],
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    let state = conditioned(prior, context)?;
    roll(prior, &state.kbar, start, horizon)
}

fn conditioned(prior: &PriorParams, context: &TaskDataset) -> Result<PosteriorState> {
    let mut state = init_posterior(prior)?;
    if !context.is_empty() {
        let phi = features_of(prior, context)?;
        for i in 0..context.len() {
            state.update(phi.row(i), context.ys.row(i))?;
        }
    }
    Ok(state)
}

fn roll(prior: &PriorParams, k: &Matrix, start: &[f64], horizon: usize) -> Result<Vec<Vec<f64>>> {
    let n_x = prior.net.input_dim();
    let mut s = start.to_vec();
    let mut traj = Vec::with_capacity(horizon);
    let mut x = vec![0.0; n_x];
    for _ in 0..horizon {
        x[..s.len()].copy_from_slice(&s);
        let phi = prior.net.features(&x)?;
        let delta = k.tr_matvec(&phi);
        for (v, d) in s.iter_mut().zip(delta) {
            *v += d;
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("rollout diverged".into()));
        }
        traj.push(s.clone());
    }
    Ok(traj)
}

/// Per-step spread: the across-sample standard deviation of each state
/// coordinate, averaged over coordinates.
pub fn rollout_spread(trajectories: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let n = trajectories.len();
    let Some(first) = trajectories.first() else {
        return Vec::new();
    };
    let dims = first.first().map_or(0, Vec::len);
    (0..first.len())
        .map(|step| {
            let mut total = 0.0;
            for d in 0..dims {
                let vals: Vec<f64> = trajectories.iter().map(|tr| tr[step][d]).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                total += var.sqrt();
            }
            total / dims.max(1) as f64
        })
        .collect()
}

pub const ROLLOUT_CSV_HEADER: &str = "sample,step,state";

/// One row per `(sample, step)`; state coordinates are space-separated.
pub fn rollout_csv(trajectories: &[Vec<Vec<f64>>]) -> String {
    let mut out = String::from(ROLLOUT_CSV_HEADER);
    out.push('\n');
    for (i, tr) in trajectories.iter().enumerate() {
        for (t, s) in tr.iter().enumerate() {
            let state: Vec<String> = s.iter().map(f64::to_string).collect();
            writeln!(out, "{i},{t},{}", state.join(" ")).unwrap();
        }
    }
    out
}
