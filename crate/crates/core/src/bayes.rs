//! Matrix-normal Bayesian linear regression on fixed features.
//!
//! With prior `K ~ MN(K̄₀, Λ₀⁻¹, Σ_ε)` and observations `yᵀ = φᵀK + εᵀ`, the
//! posterior after `t` samples is `MN(K̄_t, Λ_t⁻¹, Σ_ε)` and the predictive
//! density at a new feature vector is
//! `N(K̄_tᵀφ, (1 + φᵀΛ_t⁻¹φ) Σ_ε)`.
//!
//! [`PosteriorState`] tracks `Λ_t⁻¹`, `Q_t = Λ_t K̄_t` and `K̄_t`. Online
//! updates are rank-1 Woodbury corrections of `Λ_t⁻¹` and never factorize.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, cholesky_solve, dot, log_det_from_cholesky, outer, solve_lower, sym_rank1_update,
    Matrix,
};
use crate::net::NetWeights;

/// Known output noise covariance `Σ_ε` with its factor and inverse cached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct NoiseModel {
    sigma: Matrix,
    chol: Matrix,
    inverse: Matrix,
    log_det: f64,
}

impl TryFrom<Matrix> for NoiseModel {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        NoiseModel::new(m)
    }
}

impl From<NoiseModel> for Matrix {
    fn from(n: NoiseModel) -> Matrix {
        n.sigma
    }
}

impl NoiseModel {
    pub fn new(sigma: Matrix) -> Result<Self> {
        if !sigma.is_square() || sigma.rows() == 0 {
            return Err(Error::Dimension(format!(
                "noise covariance must be square and non-empty, got {:?}",
                sigma.shape()
            )));
        }
        let asym = sigma.max_abs_diff(&sigma.transpose());
        if asym > 1e-12 * sigma.max_abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let chol = cholesky(&sigma)?;
        let mut inverse = cholesky_solve(&chol, &Matrix::identity(sigma.rows()))?;
        inverse.symmetrize();
        let log_det = log_det_from_cholesky(&chol);
        Ok(NoiseModel {
            sigma,
            chol,
            inverse,
            log_det,
        })
    }

    /// `variance · I` of size `n_y`.
    pub fn isotropic(variance: f64, n_y: usize) -> Result<Self> {
        NoiseModel::new(Matrix::identity(n_y).scale(variance))
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        NoiseModel::new(Matrix::diagonal(variances))
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    /// Lower factor `L` with `L Lᵀ = Σ_ε`.
    pub fn cholesky(&self) -> &Matrix {
        &self.chol
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        NoiseModel::new(self.sigma.scale(c))
    }
}

/// Everything produced by meta-training: the last-layer prior `(K̄₀, L₀)`,
/// the feature network, and the fixed noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// `n_φ × n_y` prior mean.
    pub kbar0: Matrix,
    /// Lower-triangular factor of the prior precision, `Λ₀ = L₀ L₀ᵀ`.
    pub l0: Matrix,
    pub net: NetWeights,
    pub noise: NoiseModel,
}

impl PriorParams {
    pub fn new(kbar0: Matrix, l0: Matrix, net: NetWeights, noise: NoiseModel) -> Result<Self> {
        let p = PriorParams {
            kbar0,
            l0,
            net,
            noise,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        self.kbar0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.kbar0.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n_phi = self.kbar0.rows();
        if self.l0.shape() != (n_phi, n_phi) {
            return Err(Error::Dimension(format!(
                "L0 is {:?}, expected {n_phi}x{n_phi}",
                self.l0.shape()
            )));
        }
        if self.net.feature_dim() != n_phi {
            return Err(Error::Dimension(format!(
                "network emits {} features, prior has {n_phi}",
                self.net.feature_dim()
            )));
        }
        if self.noise.dim() != self.kbar0.cols() {
            return Err(Error::Dimension(format!(
                "noise is {0}x{0}, prior has {1} outputs",
                self.noise.dim(),
                self.kbar0.cols()
            )));
        }
        for i in 0..n_phi {
            if !(self.l0[(i, i)] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "L0 diagonal entry {i} is not strictly positive"
                )));
            }
            for j in (i + 1)..n_phi {
                if self.l0[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument("L0 must be lower triangular".into()));
                }
            }
        }
        if !self.kbar0.is_finite() || !self.l0.is_finite() {
            return Err(Error::InvalidArgument("prior terms must be finite".into()));
        }
        Ok(())
    }

    /// `Λ₀ = L₀ L₀ᵀ`
    pub fn precision(&self) -> Matrix {
        self.l0.matmul_tr(&self.l0).expect("square L0")
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.net.forward(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDensity {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl PredictiveDensity {
    pub fn variances(&self) -> Vec<f64> {
        self.cov.diag()
    }
}

/// Sufficient statistics of the last-layer posterior after `t` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    /// `Λ_t⁻¹`
    pub lam_inv: Matrix,
    /// `Q_t = Λ_t K̄_t`
    pub q: Matrix,
    pub kbar: Matrix,
    pub t: usize,
}

impl PosteriorState {
    /// Prior state from `K̄₀` and the precision factor `L₀`.
    pub fn from_prior_terms(kbar0: &Matrix, l0: &Matrix) -> Result<Self> {
        let n = l0.rows();
        if !l0.is_square() || kbar0.rows() != n {
            return Err(Error::shape("init_posterior", l0.shape(), kbar0.shape()));
        }
        let lam0 = l0.matmul_tr(l0)?;
        let factor = cholesky(&lam0)?;
        let mut lam_inv = cholesky_solve(&factor, &Matrix::identity(n))?;
        lam_inv.symmetrize();
        let q = lam0.matmul(kbar0)?;
        Ok(PosteriorState {
            lam_inv,
            q,
            kbar: kbar0.clone(),
            t: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.lam_inv.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.kbar.cols()
    }

    /// `φᵀ Λ_t⁻¹ φ`
    pub fn feature_variance(&self, phi: &[f64]) -> f64 {
        self.lam_inv.quad_form(phi)
    }

    /// Rank-1 online update with one observation.
    pub fn update(&mut self, phi: &[f64], y: &[f64]) -> Result<()> {
        if phi.len() != self.feature_dim() || y.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "update expects phi of length {} and y of length {}, got {} and {}",
                self.feature_dim(),
                self.output_dim(),
                phi.len(),
                y.len()
            )));
        }
        let v = self.lam_inv.matvec(phi);
        let denom = 1.0 + dot(phi, &v);
        sym_rank1_update(&mut self.lam_inv, -1.0 / denom, &v);
        self.lam_inv.symmetrize();
        self.q.add_assign(&outer(phi, y));
        self.kbar = self.lam_inv.matmul(&self.q)?;
        self.t += 1;
        Ok(())
    }

    /// Functional form of [`update`](Self::update).
    pub fn updated(&self, phi: &[f64], y: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.update(phi, y)?;
        Ok(next)
    }

    pub fn predict(&self, phi: &[f64], noise: &NoiseModel) -> Result<PredictiveDensity> {
        if phi.len() != self.feature_dim() || noise.dim() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "predict expects phi of length {} and {}-dim noise",
                self.feature_dim(),
                self.output_dim()
            )));
        }
        let mean = self.kbar.tr_matvec(phi);
        let scale = 1.0 + self.feature_variance(phi);
        Ok(PredictiveDensity {
            mean,
            cov: noise.sigma().scale(scale),
        })
    }

    /// Draws `K = K̄_t + A Z B` with `A Aᵀ = Λ_t⁻¹` and `BᵀB = Σ_ε`.
    pub fn sample_weights(&self, noise: &NoiseModel, rng: &mut impl Rng) -> Result<Matrix> {
        let (n_phi, n_y) = self.kbar.shape();
        if noise.dim() != n_y {
            return Err(Error::Dimension("noise dimension does not match posterior".into()));
        }
        let row_factor = cholesky(&self.lam_inv)?;
        let z = Matrix::from_fn(n_phi, n_y, |_, _| StandardNormal.sample(rng));
        let az = row_factor.matmul(&z)?;
        let azb = az.matmul_tr(noise.cholesky())?;
        Ok(self.kbar.add(&azb))
    }
}

/// Prior state for a trained model.
pub fn init_posterior(prior: &PriorParams) -> Result<PosteriorState> {
    PosteriorState::from_prior_terms(&prior.kbar0, &prior.l0)
}

/// Posterior after conditioning on all rows of `(phi, y)` at once.
pub fn batch_posterior_terms(
    kbar0: &Matrix,
    l0: &Matrix,
    phi: &Matrix,
    y: &Matrix,
) -> Result<PosteriorState> {
    if phi.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "features have {} rows, targets {}",
            phi.rows(),
            y.rows()
        )));
    }
    if phi.cols() != kbar0.rows() || y.cols() != kbar0.cols() {
        return Err(Error::Dimension(format!(
            "data is {}->{}, prior is {}->{}",
            phi.cols(),
            y.cols(),
            kbar0.rows(),
            kbar0.cols()
        )));
    }
    let lam0 = l0.matmul_tr(l0)?;
    let mut lam = phi.tr_matmul(phi)?;
    lam.add_assign(&lam0);
    let mut q = phi.tr_matmul(y)?;
    q.add_assign(&lam0.matmul(kbar0)?);
    let factor = cholesky(&lam)?;
    let kbar = cholesky_solve(&factor, &q)?;
    let mut lam_inv = cholesky_solve(&factor, &Matrix::identity(lam.rows()))?;
    lam_inv.symmetrize();
    Ok(PosteriorState {
        lam_inv,
        q,
        kbar,
        t: phi.rows(),
    })
}

pub fn batch_posterior(prior: &PriorParams, phi: &Matrix, y: &Matrix) -> Result<PosteriorState> {
    batch_posterior_terms(&prior.kbar0, &prior.l0, phi, y)
}

/// Negative log density of `y` under a Gaussian predictive, including the
/// `2π` constant.
pub fn gaussian_nll(pred: &PredictiveDensity, y: &[f64]) -> Result<f64> {
    let n = pred.mean.len();
    if y.len() != n || pred.cov.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "nll: mean has {n} entries, y has {}, cov is {:?}",
            y.len(),
            pred.cov.shape()
        )));
    }
    let l = cholesky(&pred.cov)?;
    let r: Vec<f64> = y.iter().zip(&pred.mean).map(|(a, b)| a - b).collect();
    let w = solve_lower(&l, &Matrix::column(&r))?;
    let maha = dot(w.as_slice(), w.as_slice());
    Ok(0.5 * (n as f64 * (2.0 * PI).ln() + log_det_from_cholesky(&l) + maha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_lower(n: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(n, n, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
            std::cmp::Ordering::Equal => rng.random_range(0.5..1.5),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    fn scalar_noise(v: f64) -> NoiseModel {
        NoiseModel::isotropic(v, 1).unwrap()
    }

    #[test]
    fn init_identity_zero_prior() {
        let s = PosteriorState::from_prior_terms(&Matrix::zeros(3, 1), &Matrix::identity(3))
            .unwrap();
        assert_eq!(s.lam_inv, Matrix::identity(3));
        assert_eq!(s.q, Matrix::zeros(3, 1));
        assert_eq!(s.kbar, Matrix::zeros(3, 1));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn init_scaled_precision() {
        // Λ₀ = 4I, so L₀ = 2I.
        let kbar0 = Matrix::column(&[1.0, 2.0]);
        let s = PosteriorState::from_prior_terms(&kbar0, &Matrix::identity(2).scale(2.0))
            .unwrap();
        assert!(s.lam_inv.max_abs_diff(&Matrix::identity(2).scale(0.25)) < 1e-15);
        assert_eq!(s.q, Matrix::column(&[4.0, 8.0]));
        assert_eq!(s.kbar, kbar0);
    }

    #[test]
    fn init_rejects_degenerate_precision() {
        let l0 = Matrix::diagonal(&[1.0, 0.0]);
        assert!(matches!(
            PosteriorState::from_prior_terms(&Matrix::zeros(2, 1), &l0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn empty_batch_equals_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kbar0 = random_matrix(4, 2, &mut rng);
        let l0 = random_lower(4, &mut rng);
        let prior = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        let batch =
            batch_posterior_terms(&kbar0, &l0, &Matrix::zeros(0, 4), &Matrix::zeros(0, 2))
                .unwrap();
        assert!(batch.lam_inv.max_abs_diff(&prior.lam_inv) < 1e-12);
        assert!(batch.kbar.max_abs_diff(&prior.kbar) < 1e-12);
        assert!(batch.q.max_abs_diff(&prior.q) < 1e-12);
        assert_eq!(batch.t, 0);
    }

    #[test]
    fn scalar_running_example() {
        // Λ₀ = 1, K̄₀ = 0, one sample φ = 1, y = 1 → Λ₁ = 2, K̄₁ = 0.5.
        let kbar0 = Matrix::zeros(1, 1);
        let l0 = Matrix::identity(1);
        let batch =
            batch_posterior_terms(&kbar0, &l0, &Matrix::identity(1), &Matrix::identity(1))
                .unwrap();
        assert!((batch.lam_inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((batch.kbar[(0, 0)] - 0.5).abs() < 1e-15);

        let mut online = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        online.update(&[1.0], &[1.0]).unwrap();
        let noise = scalar_noise(0.05);
        let pred = online.predict(&[1.0], &noise).unwrap();
        assert!((pred.mean[0] - 0.5).abs() < 1e-15);
        assert!((pred.cov[(0, 0)] - 1.5 * 0.05).abs() < 1e-15);
    }

    #[test]
    fn batch_rejects_row_mismatch() {
        let r = batch_posterior_terms(
            &Matrix::zeros(2, 1),
            &Matrix::identity(2),
            &Matrix::zeros(3, 2),
            &Matrix::zeros(2, 1),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_feature_update_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kbar0 = random_matrix(3, 2, &mut rng);
        let l0 = random_lower(3, &mut rng);
        let s = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        let next = s.updated(&[0.0; 3], &[5.0, -1.0]).unwrap();
        assert_eq!(next.lam_inv, s.lam_inv);
        assert_eq!(next.q, s.q);
        assert!(next.kbar.max_abs_diff(&s.kbar) < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn woodbury_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let l0 = random_lower(n, &mut rng);
        let mut lam = l0.matmul_tr(&l0).unwrap();
        let mut s = PosteriorState::from_prior_terms(&Matrix::zeros(n, 1), &l0).unwrap();
        for _ in 0..30 {
            let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.update(&phi, &[rng.random_range(-1.0..1.0)]).unwrap();
            lam.add_assign(&outer(&phi, &phi));
            let res = lam.matmul(&s.lam_inv).unwrap().sub(&Matrix::identity(n));
            assert!(res.max_abs() < 1e-10);
        }
    }

    #[test]
    fn batch_matches_recursive_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_phi, n_y, tau) = (8, 2, 20);
        let kbar0 = random_matrix(n_phi, n_y, &mut rng);
        let l0 = random_lower(n_phi, &mut rng);
        let phi = random_matrix(tau, n_phi, &mut rng);
        let y = random_matrix(tau, n_y, &mut rng);
        let batch = batch_posterior_terms(&kbar0, &l0, &phi, &y).unwrap();
        let mut s = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        for t in 0..tau {
            s.update(phi.row(t), y.row(t)).unwrap();
        }
        assert!(batch.kbar.max_abs_diff(&s.kbar) < 1e-8);
        assert!(batch.lam_inv.max_abs_diff(&s.lam_inv) < 1e-8);
        assert!(batch.q.max_abs_diff(&s.q) < 1e-8);
        assert_eq!(batch.t, s.t);
    }

    #[test]
    fn predict_zero_feature_is_noise_floor() {
        let s = PosteriorState::from_prior_terms(&Matrix::column(&[1.0, 2.0]), &Matrix::identity(2))
            .unwrap();
        let noise = scalar_noise(0.3);
        let pred = s.predict(&[0.0, 0.0], &noise).unwrap();
        assert_eq!(pred.mean, vec![0.0]);
        assert_eq!(pred.cov, *noise.sigma());
    }

    #[test]
    fn predict_unit_feature_doubles_noise_at_prior() {
        let s = PosteriorState::from_prior_terms(&Matrix::zeros(3, 2), &Matrix::identity(3))
            .unwrap();
        let noise = NoiseModel::new(Matrix::from_rows(&[[0.2, 0.05], [0.05, 0.1]])).unwrap();
        let pred = s.predict(&[0.0, 1.0, 0.0], &noise).unwrap();
        assert!(pred.cov.max_abs_diff(&noise.sigma().scale(2.0)) < 1e-15);
    }

    #[test]
    fn log_det_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = NoiseModel::new(Matrix::from_rows(&[[0.2, 0.05], [0.05, 0.1]])).unwrap();
        let l0 = random_lower(4, &mut rng);
        let s = PosteriorState::from_prior_terms(&Matrix::zeros(4, 2), &l0).unwrap();
        for _ in 0..10 {
            let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pred = s.predict(&phi, &noise).unwrap();
            let direct = log_det_from_cholesky(&cholesky(&pred.cov).unwrap());
            let split = 2.0 * (1.0 + s.feature_variance(&phi)).ln() + noise.log_det();
            assert!((direct - split).abs() < 1e-10);
        }
    }

    #[test]
    fn nll_reference_values() {
        let pred = PredictiveDensity {
            mean: vec![0.0],
            cov: Matrix::identity(1),
        };
        let base = gaussian_nll(&pred, &[0.0]).unwrap();
        assert!((base - 0.918_938_533_204_672_7).abs() < 1e-12);
        let one_sigma = gaussian_nll(&pred, &[1.0]).unwrap();
        assert!((one_sigma - base - 0.5).abs() < 1e-12);

        let c: f64 = 3.0;
        let wide = PredictiveDensity {
            mean: vec![1.0, 2.0],
            cov: Matrix::identity(2).scale(c),
        };
        let narrow = PredictiveDensity {
            mean: vec![1.0, 2.0],
            cov: Matrix::identity(2),
        };
        let diff = gaussian_nll(&wide, &[1.0, 2.0]).unwrap()
            - gaussian_nll(&narrow, &[1.0, 2.0]).unwrap();
        assert!((diff - 0.5 * 2.0 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_singular_covariance() {
        let pred = PredictiveDensity {
            mean: vec![0.0],
            cov: Matrix::zeros(1, 1),
        };
        assert!(matches!(
            gaussian_nll(&pred, &[0.0]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn samples_collapse_with_vanishing_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kbar0 = random_matrix(3, 1, &mut rng);
        let s = PosteriorState::from_prior_terms(&kbar0, &Matrix::identity(3)).unwrap();
        let noise = scalar_noise(1e-12);
        for _ in 0..20 {
            let k = s.sample_weights(&noise, &mut rng).unwrap();
            assert!(k.max_abs_diff(&kbar0) < 1e-5);
        }
    }

    #[test]
    fn sample_mean_within_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kbar0 = Matrix::column(&[0.7, -1.3]);
        let l0 = Matrix::from_rows(&[[1.2, 0.0], [0.4, 0.8]]);
        let s = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        let noise = scalar_noise(0.5);
        let n = 10_000;
        let mut sum = Matrix::zeros(2, 1);
        for _ in 0..n {
            sum.add_assign(&s.sample_weights(&noise, &mut rng).unwrap());
        }
        let mean = sum.scale(1.0 / n as f64);
        for i in 0..2 {
            let se = (0.5 * s.lam_inv[(i, i)] / n as f64).sqrt();
            assert!((mean[(i, 0)] - kbar0[(i, 0)]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn sample_covariance_has_kronecker_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kbar0 = Matrix::column(&[0.2, 0.1]);
        let l0 = Matrix::from_rows(&[[1.0, 0.0], [0.6, 0.9]]);
        let s = PosteriorState::from_prior_terms(&kbar0, &l0).unwrap();
        let noise = scalar_noise(0.8);
        let expected = noise.sigma().kron(&s.lam_inv);
        let n = 100_000;
        let mut second = Matrix::zeros(2, 2);
        for _ in 0..n {
            let k = s.sample_weights(&noise, &mut rng).unwrap();
            let d: Vec<f64> = k.sub(&kbar0).vec_columns();
            second.add_assign(&outer(&d, &d));
        }
        let emp = second.scale(1.0 / n as f64);
        for r in 0..2 {
            for c in 0..2 {
                assert!(
                    (emp[(r, c)] - expected[(r, c)]).abs() < 0.05 * expected[(r, c)].abs(),
                    "({r},{c}): {} vs {}",
                    emp[(r, c)],
                    expected[(r, c)]
                );
            }
        }
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::new(Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]])).is_err());
        assert!(NoiseModel::new(Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).is_err());
        let n = NoiseModel::diagonal(&[0.5, 2.0]).unwrap();
        assert!((n.log_det() - 0.0).abs() < 1e-15);
        assert!(n.inverse().max_abs_diff(&Matrix::diagonal(&[2.0, 0.5])) < 1e-15);
    }

    #[test]
    fn noise_model_serde_round_trip() {
        let n = NoiseModel::diagonal(&[0.001, 0.001]).unwrap();
        let text = serde_json::to_string(&n).unwrap();
        let back: NoiseModel = serde_json::from_str(&text).unwrap();
        assert_eq!(n, back);
    }
}
