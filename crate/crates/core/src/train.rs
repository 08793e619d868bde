//! Offline meta-training of the feature network and the last-layer prior.
//!
//! Each iteration samples `J` datasets and, for each, a context size `t_j`.
//! The posterior conditioned on the first `t_j` points is formed on the tape
//! and scored on the remaining points with the predictive log-likelihood
//! (the constant `ln det Σ_ε` term dropped). Adam then steps
//! `(K̄₀, L₀, w)`. `L₀` is stored as a free strictly-lower part plus a raw
//! diagonal mapped through softplus, so `Λ₀ = L₀L₀ᵀ` stays positive definite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{NoiseModel, PriorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_alpaca, EvalOptions};
use crate::linalg::Matrix;
use crate::net::{forward_on_tape, NetConfig, NetWeights};
use crate::tape::{softplus, Tape, Var};
use crate::tasks::TaskDataset;

/// Distribution of the context size `t_j` within a horizon `τ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonDist {
    /// Uniform over `{0, …, τ−1}`.
    Uniform,
    /// Always zero context: the no-meta ablation.
    Zero,
}

impl HorizonDist {
    pub fn sample(self, rng: &mut impl Rng, horizon: usize) -> usize {
        match self {
            HorizonDist::Uniform => rng.random_range(0..horizon),
            HorizonDist::Zero => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Noise covariance: one value (isotropic), `n_y` values (diagonal) or
    /// `n_y²` values (full, row-major).
    pub sigma_eps: Vec<f64>,
    /// Minibatch size `J`.
    pub batch_size: usize,
    /// Horizon `τ`: points per sampled dataset.
    pub horizon: usize,
    pub horizon_dist: HorizonDist,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Validation cadence in iterations; 0 disables.
    pub eval_every: usize,
    /// Largest context size scored during validation.
    pub eval_max_context: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            hidden_dims: vec![128, 128],
            feature_dim: 16,
            sigma_eps: vec![0.05],
            batch_size: 10,
            horizon: 20,
            horizon_dist: HorizonDist::Uniform,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 5000,
            eval_every: 0,
            eval_max_context: 10,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if self.sigma_eps.is_empty() {
            return Err(Error::Config("sigma_eps must be given".into()));
        }
        Ok(())
    }

    pub fn noise_model(&self, n_y: usize) -> Result<NoiseModel> {
        let s = &self.sigma_eps;
        if s.len() == 1 {
            NoiseModel::isotropic(s[0], n_y)
        } else if s.len() == n_y {
            NoiseModel::diagonal(s)
        } else if s.len() == n_y * n_y {
            NoiseModel::new(Matrix::from_vec(n_y, n_y, s.clone())?)
        } else {
            Err(Error::Config(format!(
                "sigma_eps has {} values; expected 1, {n_y} or {}",
                s.len(),
                n_y * n_y
            )))
        }
    }

    pub fn net_config(&self, input_dim: usize) -> Result<NetConfig> {
        NetConfig::new(input_dim, self.hidden_dims.clone(), self.feature_dim)
    }
}

/// Copy of `config` that trains only on zero-context prior predictions.
pub fn make_ablation_no_meta(config: &MetaTrainConfig) -> MetaTrainConfig {
    MetaTrainConfig {
        horizon_dist: HorizonDist::Zero,
        ..config.clone()
    }
}

/// Validation scores at one iteration and context size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub context_size: usize,
    pub nll: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
}

/// Optimizer-side parameterization of [`PriorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub kbar0: Matrix,
    /// Only the strictly lower triangle is used.
    pub l0_lower: Matrix,
    /// `n_φ × 1`, mapped through softplus onto the diagonal of `L₀`.
    pub l0_diag_raw: Matrix,
    pub net: NetWeights,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(eʸ − 1), written to stay accurate for large y.
    y + (-(-y).exp_m1()).ln()
}

/// Handles for the parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub kbar0: Var,
    pub l0_lower: Var,
    pub l0_diag_raw: Var,
    pub net: Vec<Var>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.kbar0, self.l0_lower, self.l0_diag_raw];
        v.extend_from_slice(&self.net);
        v
    }
}

impl TrainableParams {
    /// Network from Glorot init; `K̄₀ = 0`, `L₀ = I`.
    pub fn init(net_config: &NetConfig, n_y: usize, rng: &mut impl Rng) -> Self {
        let n_phi = net_config.feature_dim;
        TrainableParams {
            kbar0: Matrix::zeros(n_phi, n_y),
            l0_lower: Matrix::zeros(n_phi, n_phi),
            l0_diag_raw: Matrix::filled(n_phi, 1, inverse_softplus(1.0)),
            net: NetWeights::init(net_config, rng),
        }
    }

    pub fn from_prior(prior: &PriorParams) -> Self {
        let n = prior.l0.rows();
        TrainableParams {
            kbar0: prior.kbar0.clone(),
            l0_lower: Matrix::from_fn(n, n, |r, c| if c < r { prior.l0[(r, c)] } else { 0.0 }),
            l0_diag_raw: Matrix::column(
                &prior.l0.diag().into_iter().map(inverse_softplus).collect::<Vec<_>>(),
            ),
            net: prior.net.clone(),
        }
    }

    pub fn l0(&self) -> Matrix {
        let n = self.l0_lower.rows();
        Matrix::from_fn(n, n, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Greater => self.l0_lower[(r, c)],
            std::cmp::Ordering::Equal => softplus(self.l0_diag_raw[(r, 0)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn to_prior(&self, noise: NoiseModel) -> Result<PriorParams> {
        PriorParams::new(self.kbar0.clone(), self.l0(), self.net.clone(), noise)
    }

    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            kbar0: tape.leaf(self.kbar0.clone()),
            l0_lower: tape.leaf(self.l0_lower.clone()),
            l0_diag_raw: tape.leaf(self.l0_diag_raw.clone()),
            net: self.net.to_tape(tape),
        }
    }

    /// Parameter matrices in the order of [`ParamVars::all`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.kbar0, &mut self.l0_lower, &mut self.l0_diag_raw];
        v.extend(self.net.matrices_mut());
        v
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.kbar0, &self.l0_lower, &self.l0_diag_raw];
        v.extend(self.net.matrices());
        v
    }
}

/// One element of a minibatch: a dataset clipped to `horizon` points, with
/// the first `context` of them used to condition the posterior.
#[derive(Clone, Copy, Debug)]
pub struct TaskSample<'a> {
    pub data: &'a TaskDataset,
    pub context: usize,
    pub horizon: usize,
}

/// Records the Monte Carlo meta-loss for a minibatch and returns its node.
pub fn minibatch_loss(
    tape: &mut Tape,
    params: &ParamVars,
    batch: &[TaskSample<'_>],
    noise: &NoiseModel,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let n_x = tape.shape(params.net[0]).0;
    let n_y = noise.dim();
    for (j, s) in batch.iter().enumerate() {
        if s.horizon > s.data.len() || s.context >= s.horizon {
            return Err(Error::InvalidArgument(format!(
                "task {j}: need context < horizon <= length, got {} / {} / {}",
                s.context,
                s.horizon,
                s.data.len()
            )));
        }
        if s.data.input_dim() != n_x || s.data.output_dim() != n_y {
            return Err(Error::Dimension(format!(
                "task {j} is {}->{}, model is {n_x}->{n_y}",
                s.data.input_dim(),
                s.data.output_dim()
            )));
        }
    }

    // Features for every point of every task in one pass.
    let total: usize = batch.iter().map(|s| s.horizon).sum();
    let mut xs = Vec::with_capacity(total * n_x);
    for s in batch {
        xs.extend_from_slice(&s.data.xs.as_slice()[..s.horizon * n_x]);
    }
    let x_all = tape.constant(Matrix::from_vec(total, n_x, xs)?);
    let phi_all = forward_on_tape(tape, &params.net, x_all)?;

    // Λ₀ = L₀L₀ᵀ and Λ₀K̄₀, shared by all tasks.
    let lower = tape.strict_lower(params.l0_lower)?;
    let diag = tape.softplus(params.l0_diag_raw);
    let diag = tape.diag_embed(diag)?;
    let l0 = tape.add(lower, diag)?;
    let l0t = tape.transpose(l0);
    let lam0 = tape.matmul(l0, l0t)?;
    let q0 = tape.matmul(lam0, params.kbar0)?;
    let noise_inv = tape.constant(noise.inverse().clone());

    let mut task_losses = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for s in batch {
        let (ctx, tau) = (s.context, s.horizon);
        let phi_q = tape.slice_rows(phi_all, offset + ctx, offset + tau)?;
        let y_q = tape.constant(s.data.ys.slice_rows(ctx, tau));

        let (lam, kbar) = if ctx == 0 {
            (lam0, params.kbar0)
        } else {
            let phi_c = tape.slice_rows(phi_all, offset, offset + ctx)?;
            let y_c = tape.constant(s.data.ys.slice_rows(0, ctx));
            let gram = tape.tr_matmul(phi_c, phi_c)?;
            let lam = tape.add(gram, lam0)?;
            let cross = tape.tr_matmul(phi_c, y_c)?;
            let q = tape.add(cross, q0)?;
            (lam, tape.solve_psd(lam, q)?)
        };

        // s_t = 1 + φ_tᵀ Λ⁻¹ φ_t for every held-out row.
        let phi_q_t = tape.transpose(phi_q);
        let v = tape.solve_psd(lam, phi_q_t)?;
        let v_t = tape.transpose(v);
        let quad = tape.hadamard(phi_q, v_t)?;
        let quad = tape.row_sum(quad);
        let scale = tape.add_scalar(quad, 1.0);

        let pred = tape.matmul(phi_q, kbar)?;
        let resid = tape.sub(y_q, pred)?;
        let weighted = tape.matmul(resid, noise_inv)?;
        let maha = tape.hadamard(weighted, resid)?;
        let maha = tape.row_sum(maha);
        let maha = tape.div(maha, scale)?;

        let log_term = tape.log(scale);
        let log_term = tape.scale(log_term, n_y as f64);
        let per_point = tape.add(log_term, maha)?;
        let sum = tape.sum(per_point);
        task_losses.push(tape.scale(sum, 1.0 / (tau - ctx) as f64));
        offset += tau;
    }

    let mut total_loss = task_losses[0];
    for &l in &task_losses[1..] {
        total_loss = tape.add(total_loss, l)?;
    }
    Ok(tape.scale(total_loss, 1.0 / batch.len() as f64))
}

/// Loss value and gradients in the order of [`ParamVars::all`].
pub fn loss_and_gradient(
    params: &TrainableParams,
    batch: &[TaskSample<'_>],
    noise: &NoiseModel,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let loss = minibatch_loss(&mut tape, &vars, batch, noise)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.all().into_iter().map(|v| grads.take(v)).collect()))
}

pub fn loss_value(
    params: &TrainableParams,
    batch: &[TaskSample<'_>],
    noise: &NoiseModel,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let loss = minibatch_loss(&mut tape, &vars, batch, noise)?;
    Ok(tape.scalar(loss))
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn check_corpus(corpus: &[TaskDataset], horizon: usize) -> Result<(usize, usize)> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::InvalidArgument("training corpus is empty".into()))?;
    let (n_x, n_y) = (first.input_dim(), first.output_dim());
    for (i, d) in corpus.iter().enumerate() {
        if d.input_dim() != n_x || d.output_dim() != n_y {
            return Err(Error::Dimension(format!(
                "dataset {i} is {}->{}, expected {n_x}->{n_y}",
                d.input_dim(),
                d.output_dim()
            )));
        }
        if d.len() < horizon {
            return Err(Error::InvalidArgument(format!(
                "dataset {i} has {} points, horizon is {horizon}",
                d.len()
            )));
        }
    }
    Ok((n_x, n_y))
}

pub fn train(corpus: &[TaskDataset], config: &MetaTrainConfig) -> Result<(PriorParams, TrainReport)> {
    train_with_validation(corpus, &[], config)
}

/// Runs meta-training. When `validation` is non-empty and `eval_every > 0`,
/// the current model is scored on it at that cadence.
pub fn train_with_validation(
    corpus: &[TaskDataset],
    validation: &[TaskDataset],
    config: &MetaTrainConfig,
) -> Result<(PriorParams, TrainReport)> {
    config.validate()?;
    let (n_x, n_y) = check_corpus(corpus, config.horizon)?;
    let noise = config.noise_model(n_y)?;
    let net_config = config.net_config(n_x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = TrainableParams::init(&net_config, n_y, &mut rng);

    let shapes: Vec<_> = params.matrices().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(
        &shapes,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut report = TrainReport::default();
    let eval_opts = EvalOptions {
        max_context: config.eval_max_context,
    };

    for iteration in 0..config.iterations {
        let batch: Vec<TaskSample<'_>> = (0..config.batch_size)
            .map(|_| {
                let context = config.horizon_dist.sample(&mut rng, config.horizon);
                let data = &corpus[rng.random_range(0..corpus.len())];
                TaskSample {
                    data,
                    context,
                    horizon: config.horizon,
                }
            })
            .collect();
        let (loss, grads) = loss_and_gradient(&params, &batch, &noise)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                value: loss,
            });
        }
        report.losses.push(loss);
        adam.step(params.matrices_mut(), &grads);

        let done = iteration + 1;
        if config.eval_every > 0 && !validation.is_empty() && done % config.eval_every == 0 {
            let prior = params.to_prior(noise.clone())?;
            for row in evaluate_alpaca(&prior, validation, &eval_opts)? {
                report.validation.push(ValidationPoint {
                    iteration: done,
                    context_size: row.context_size,
                    nll: row.nll_mean,
                    mse: row.mse_mean,
                });
            }
        }
    }

    Ok((params.to_prior(noise)?, report))
}
