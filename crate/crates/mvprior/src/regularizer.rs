//! The structured quadratic regularizer `K = I - lambda * Sigma` and its
//! factorization `K = U'U`.
//!
//! `lambda` defaults to `0.9 / e_max` with `e_max` the largest eigenvalue of
//! `Sigma`, which analytically forces `min eig(K) >= 0.1` whenever `Sigma`
//! is positive semidefinite; a halving fallback (at most 20 steps) guards
//! the indefinite sparse case. The factorization feeds the
//! transform-train-transform-back route: features move to the whitened
//! space via `x~ = U^-T x`, models come back by solving `U w = w~`, and the
//! identities `w'Kw = w~'w~` and `w~'x~ = w'x` tie the two spaces together.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::TemplateLayout;
use crate::prior::SigmaMatrix;

/// Hard cap on the parameter dimension for dense factorization.
pub const MAX_FACTOR_DIM: usize = 20_000;

/// Maximum number of lambda halvings before giving up on positive
/// definiteness.
pub const MAX_HALVINGS: u32 = 20;

/// Eigenvalues at or below this threshold abort the eigen factorization.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Certified-positive-definite regularizer `K = I - lambda * Sigma`.
#[derive(Debug, Clone)]
pub struct Regularizer {
    sigma: SigmaMatrix,
    lambda: f64,
    e_max: f64,
    halvings: u32,
    pd_certified: bool,
    k: DMatrix<f64>,
}

impl Regularizer {
    /// The no-prior regularizer `K = I` (plain squared-norm penalty).
    pub fn identity(layout: TemplateLayout) -> Result<Self> {
        build_regularizer(SigmaMatrix::zero(layout))
    }

    pub fn layout(&self) -> &TemplateLayout {
        self.sigma.layout()
    }

    pub fn sigma(&self) -> &SigmaMatrix {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn pd_certified(&self) -> bool {
        self.pd_certified
    }

    /// The materialized `P x P` matrix `K`.
    pub fn k_dense(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// `K v` (kept sparse-aware through the prior's block storage).
    pub fn k_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(v - self.lambda * self.sigma.mul_vec(v)?)
    }

    /// Quadratic form `v' K v`.
    pub fn quad(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(v.dot(&self.k_mul(v)?))
    }

    /// One-line summary for experiment logs.
    pub fn describe(&self) -> String {
        format!(
            "lambda={} e_max={} halvings={} dim={}",
            self.lambda,
            self.e_max,
            self.halvings,
            self.dim()
        )
    }
}

/// Builds the regularizer with the default `lambda = 0.9 / e_max` rule.
///
/// `Sigma = 0` yields `K = I` with `lambda` reported as zero. An indefinite
/// `Sigma` whose initial `K` fails the Cholesky positive-definiteness probe
/// has `lambda` halved up to [`MAX_HALVINGS`] times.
pub fn build_regularizer(sigma: SigmaMatrix) -> Result<Regularizer> {
    build_regularizer_with_initial_lambda(sigma, None)
}

/// As [`build_regularizer`], but with an explicit starting `lambda`
/// (None = the default rule). Exposed so the halving fallback is reachable
/// with an exact `e_max` in hand, where the default start is already
/// positive definite by construction.
pub fn build_regularizer_with_initial_lambda(
    sigma: SigmaMatrix,
    lambda0: Option<f64>,
) -> Result<Regularizer> {
    let p = sigma.dim();
    if p > MAX_FACTOR_DIM {
        return Err(Error::InvalidArgument(format!(
            "parameter dimension {p} exceeds the dense factorization cap {MAX_FACTOR_DIM}"
        )));
    }
    let gap = sigma.symmetry_gap();
    if gap > 1e-12 * (1.0 + sigma.max_abs()) {
        return Err(Error::InvalidArgument(format!(
            "prior matrix must be symmetric; gap {gap}"
        )));
    }
    let dense_sigma = sigma.to_dense();
    let e_max = if sigma.max_abs() == 0.0 {
        0.0
    } else {
        dense_sigma
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    if e_max <= 0.0 {
        // Zero (or negative semidefinite) prior: K = I outright.
        return Ok(Regularizer {
            sigma,
            lambda: 0.0,
            e_max: e_max.max(0.0),
            halvings: 0,
            pd_certified: true,
            k: DMatrix::identity(p, p),
        });
    }
    let mut lambda = match lambda0 {
        Some(l) if l > 0.0 => l,
        Some(l) => {
            return Err(Error::InvalidArgument(format!(
                "initial lambda must be positive, got {l}"
            )))
        }
        None => 0.9 / e_max,
    };
    let mut halvings = 0u32;
    loop {
        let k = DMatrix::identity(p, p) - lambda * &dense_sigma;
        // PD probe = attempted Cholesky; failure on any non-positive pivot.
        if nalgebra::Cholesky::new(k.clone()).is_some() {
            return Ok(Regularizer {
                sigma,
                lambda,
                e_max,
                halvings,
                pd_certified: true,
                k,
            });
        }
        if halvings == MAX_HALVINGS {
            return Err(Error::NotPositiveDefinite(format!(
                "K stayed indefinite after {MAX_HALVINGS} lambda halvings (final lambda {lambda})"
            )));
        }
        lambda /= 2.0;
        halvings += 1;
    }
}

/// Factorization method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMethod {
    /// `U` = transposed Cholesky factor (upper triangular).
    Cholesky,
    /// `U = Lambda^{1/2} V'` from the symmetric eigendecomposition.
    Eigen,
}

impl FactorMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            FactorMethod::Cholesky => "cholesky",
            FactorMethod::Eigen => "eigen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cholesky" => Ok(FactorMethod::Cholesky),
            "eigen" => Ok(FactorMethod::Eigen),
            other => Err(Error::InvalidArgument(format!(
                "unknown factorization method {other:?} (expected cholesky or eigen)"
            ))),
        }
    }
}

/// A factor `U` with `K = U'U`, plus a condition-number estimate of `K`.
#[derive(Debug, Clone)]
pub struct Factorization {
    method: FactorMethod,
    u: DMatrix<f64>,
    condition: f64,
    /// Eigen method only: eigenvector matrix `V` and `sqrt(eigenvalues)`,
    /// kept so the transforms are spectral solves instead of dense inverses.
    spectral: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl Factorization {
    pub fn method(&self) -> FactorMethod {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Rough estimate of `cond(K)`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} != factorization dimension {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `x~ = U^-T x` via a triangular (Cholesky) or spectral (eigen) solve,
    /// never forming `U^-1` densely.
    pub fn transform_features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(x)?;
        match &self.spectral {
            // Cholesky factor: U' is lower triangular.
            None => self
                .u
                .transpose()
                .solve_lower_triangular(x)
                .ok_or_else(|| Error::Internal("singular factor in feature transform".into())),
            // Eigen factor: U' = V Lambda^{1/2}, so U^-T = Lambda^{-1/2} V'.
            Some((vectors, sqrt_vals)) => {
                let mut t = vectors.transpose() * x;
                for (i, v) in t.iter_mut().enumerate() {
                    *v /= sqrt_vals[i];
                }
                Ok(t)
            }
        }
    }

    /// Solves `U w = w~`, mapping a whitened-space model back.
    pub fn transform_model_back(&self, w_tilde: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(w_tilde)?;
        match &self.spectral {
            None => self
                .u
                .solve_upper_triangular(w_tilde)
                .ok_or_else(|| Error::Internal("singular factor in model back-transform".into())),
            // U = Lambda^{1/2} V' gives w = V Lambda^{-1/2} w~.
            Some((vectors, sqrt_vals)) => {
                let mut t = w_tilde.clone();
                for (i, v) in t.iter_mut().enumerate() {
                    *v /= sqrt_vals[i];
                }
                Ok(vectors * t)
            }
        }
    }

    /// `K^-1 x` through the two factor solves (no dense inverse).
    pub fn solve_k(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let half = self.transform_features(x)?;
        self.transform_model_back(&half)
    }
}

/// Factorizes a certified regularizer.
pub fn factorize(reg: &Regularizer, method: FactorMethod) -> Result<Factorization> {
    if !reg.pd_certified() {
        return Err(Error::NotPositiveDefinite(
            "regularizer lacks positive-definiteness certificate".into(),
        ));
    }
    factorize_matrix(reg.k_dense(), method)
}

/// Factorizes an arbitrary symmetric positive definite matrix as `U'U`.
pub fn factorize_matrix(k: &DMatrix<f64>, method: FactorMethod) -> Result<Factorization> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, expected square",
            k.nrows(),
            k.ncols()
        )));
    }
    match method {
        FactorMethod::Cholesky => {
            let chol = nalgebra::Cholesky::new(k.clone()).ok_or_else(|| {
                Error::NotPositiveDefinite("Cholesky pivot failure".into())
            })?;
            let u = chol.l().transpose();
            let diag_max = (0..u.nrows()).map(|i| u[(i, i)]).fold(0.0_f64, f64::max);
            let diag_min = (0..u.nrows())
                .map(|i| u[(i, i)])
                .fold(f64::INFINITY, f64::min);
            Ok(Factorization {
                method,
                condition: (diag_max / diag_min).powi(2),
                u,
                spectral: None,
            })
        }
        FactorMethod::Eigen => {
            let eig = k.clone().symmetric_eigen();
            let mut min_e = f64::INFINITY;
            let mut max_e = f64::NEG_INFINITY;
            for &e in eig.eigenvalues.iter() {
                min_e = min_e.min(e);
                max_e = max_e.max(e);
            }
            if min_e <= EIGEN_FLOOR {
                // No clamping: a near-null direction would make the
                // whitening transform non-invertible.
                return Err(Error::EigenvalueBelowThreshold(min_e));
            }
            let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
            let mut u = eig.eigenvectors.transpose();
            for (i, row) in (0..u.nrows()).map(|i| (i, sqrt_vals[i])) {
                u.row_mut(i).scale_mut(row);
            }
            Ok(Factorization {
                method,
                condition: max_e / min_e,
                u,
                spectral: Some((eig.eigenvectors, sqrt_vals)),
            })
        }
    }
}
