//! LMM market data: correlation, covariance, spectrum, frozen drift and the
//! coordinate transform between log-LIBOR space and principal components.
//!
//! Rates are indexed from zero: rate `j` is the forward rate fixing at
//! `T_j = alpha * j` and paying at `T_{j+1}`, for `j = 0..n`. The numeraire is
//! the terminal bond maturing at `T_n = alpha * n`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetry tolerance for matrices handed to the eigensolver.
pub const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-14;

/// Static description of a flat-volatility LMM with exponential correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmConfig {
    /// Accrual fraction in years.
    pub alpha: f64,
    /// Correlation decay rate.
    pub phi: f64,
    /// Flat lognormal volatility.
    pub vol: f64,
    /// Initial forward rates `L_j(0)`.
    pub initial_rates: Vec<f64>,
}

impl LmmConfig {
    pub fn new(alpha: f64, phi: f64, vol: f64, initial_rates: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            alpha,
            phi,
            vol,
            initial_rates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat initial curve at `level`.
    pub fn flat(n: usize, alpha: f64, phi: f64, vol: f64, level: f64) -> Result<Self> {
        Self::new(alpha, phi, vol, vec![level; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial_rates.len();
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 forward rates, got {n}"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "phi must be positive, got {}",
                self.phi
            )));
        }
        if !(self.vol > 0.0 && self.vol.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "volatility must be positive, got {}",
                self.vol
            )));
        }
        if let Some((j, l)) = self
            .initial_rates
            .iter()
            .enumerate()
            .find(|(_, l)| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidConfig(format!(
                "initial rate {j} must be positive, got {l}"
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.initial_rates.len()
    }

    /// Tenor date `T_j = alpha * j`, `j = 0..=n`.
    pub fn tenor(&self, j: usize) -> f64 {
        self.alpha * j as f64
    }

    /// Fixing date of the last rate, i.e. the horizon of every backward solve.
    pub fn maturity(&self) -> f64 {
        self.tenor(self.n() - 1)
    }

    /// Price at time zero of the terminal bond paying 1 at `T_n`.
    pub fn terminal_discount(&self) -> f64 {
        self.initial_rates
            .iter()
            .map(|l| 1.0 / (1.0 + self.alpha * l))
            .product()
    }
}

/// `rho_ij = exp(-phi |i - j|)`.
pub fn build_correlation(phi: f64, n: usize) -> Result<DMatrix<f64>> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "phi must be positive, got {phi}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 rates, got {n}"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        (-phi * (i as f64 - j as f64).abs()).exp()
    }))
}

/// `Sigma_ij = vol^2 * rho_ij` for a flat volatility.
pub fn build_covariance(vol: f64, rho: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !rho.is_square() {
        return Err(Error::InvalidInput("correlation matrix is not square".into()));
    }
    let n = rho.nrows();
    for i in 0..n {
        if (rho[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
            return Err(Error::InvalidInput(format!(
                "correlation diagonal entry {i} is {} (expected 1)",
                rho[(i, i)]
            )));
        }
        for j in 0..i {
            if (rho[(i, j)] - rho[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "correlation matrix is asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(rho * (vol * vol))
}

/// Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    pub fn eigenvalue(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Matrix `Q` whose column `i` is the eigenvector of `eigenvalue(i)`.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Entry `Q_{ji}`: component `j` of eigenvector `i`.
    pub fn q(&self, j: usize, i: usize) -> f64 {
        self.vectors[(j, i)]
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let col = self.vectors.column(k);
            out += self.values[k] * col * col.transpose();
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `1e-14 * ||A||_F`. Eigenvalues are sorted descending (stable, so ties keep
/// their original order); tiny negative eigenvalues from round-off are clamped
/// to zero; each eigenvector is signed so its largest-magnitude entry is positive.
pub fn eigendecompose(matrix: &DMatrix<f64>) -> Result<Spectrum> {
    if !matrix.is_square() || matrix.nrows() == 0 {
        return Err(Error::InvalidInput("eigendecompose needs a non-empty square matrix".into()));
    }
    let n = matrix.nrows();
    for i in 0..n {
        for j in 0..i {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut a = matrix.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();
    let target = JACOBI_REL_TOL * scale;
    let off_norm = |a: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= target;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= target;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps \
             (off-diagonal norm {:.3e}, target {:.3e})",
            off_norm(&a),
            target
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));

    let clamp = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lambda = a[(src, src)];
        if lambda < 0.0 && lambda >= -clamp {
            lambda = 0.0;
        }
        values.push(lambda);
        let mut col: Vec<f64> = v.column(src).iter().copied().collect();
        let mut pivot = 0;
        for k in 1..n {
            if col[k].abs() > col[pivot].abs() {
                pivot = k;
            }
        }
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (k, x) in col.into_iter().enumerate() {
            vectors[(k, dst)] = x;
        }
    }
    Ok(Spectrum { values, vectors })
}

/// Constant drift rates of the log-normal rates after freezing at `L(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDrift {
    pub rates: Vec<f64>,
}

/// Terminal-measure drift frozen at the initial curve:
/// `mu_i = -sum_{j>i} alpha L_j(0) / (1 + alpha L_j(0)) * vol^2 * rho_ij`.
pub fn freeze_drift(config: &LmmConfig, rho: &DMatrix<f64>) -> Result<FrozenDrift> {
    config.validate()?;
    let n = config.n();
    if rho.nrows() != n || rho.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "correlation is {}x{}, expected {n}x{n}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    let var = config.vol * config.vol;
    let weights: Vec<f64> = config
        .initial_rates
        .iter()
        .map(|l| config.alpha * l / (1.0 + config.alpha * l))
        .collect();
    let rates = (0..n)
        .map(|i| -((i + 1)..n).map(|j| weights[j] * var * rho[(i, j)]).sum::<f64>())
        .collect();
    Ok(FrozenDrift { rates })
}

/// `z = Q^T ln L + beta(tau)` with `tau = T - t`.
///
/// With frozen drift the log-rates have constant drift `mu - vol^2/2`, and
/// `beta(tau) = tau * Q^T (mu - vol^2/2)` removes it, leaving the pure heat
/// equation `u_tau = 1/2 sum_i lambda_i u_{z_i z_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZTransform {
    pub spectrum: Spectrum,
    pub drift: FrozenDrift,
    pub vols: Vec<f64>,
    pub maturity: f64,
}

impl ZTransform {
    pub fn n(&self) -> usize {
        self.vols.len()
    }

    /// Drift of `ln L_j` per unit time.
    pub fn log_drift(&self) -> Vec<f64> {
        self.drift
            .rates
            .iter()
            .zip(&self.vols)
            .map(|(mu, s)| mu - 0.5 * s * s)
            .collect()
    }

    pub fn beta(&self, tau: f64) -> Vec<f64> {
        let n = self.n();
        let g = self.log_drift();
        (0..n)
            .map(|i| tau * (0..n).map(|j| self.spectrum.q(j, i) * g[j]).sum::<f64>())
            .collect()
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        let slack = 1e-12 * self.maturity.max(1.0);
        if !(tau >= -slack && tau <= self.maturity + slack) {
            return Err(Error::Domain(format!(
                "time to maturity {tau} outside [0, {}]",
                self.maturity
            )));
        }
        Ok(())
    }

    pub fn z_from_libor(&self, rates: &[f64], tau: f64) -> Result<Vec<f64>> {
        let n = self.n();
        if rates.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} rates, got {}",
                rates.len()
            )));
        }
        if let Some((j, l)) = rates.iter().enumerate().find(|(_, l)| !(**l > 0.0)) {
            return Err(Error::Domain(format!("rate {j} is not positive: {l}")));
        }
        self.check_tau(tau)?;
        let logs: Vec<f64> = rates.iter().map(|l| l.ln()).collect();
        let beta = self.beta(tau);
        Ok((0..n)
            .map(|i| (0..n).map(|j| self.spectrum.q(j, i) * logs[j]).sum::<f64>() + beta[i])
            .collect())
    }

    pub fn log_libor_from_z(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        let n = self.n();
        if z.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} coordinates, got {}",
                z.len()
            )));
        }
        self.check_tau(tau)?;
        let beta = self.beta(tau);
        let shifted: Vec<f64> = z.iter().zip(&beta).map(|(a, b)| a - b).collect();
        Ok((0..n)
            .map(|j| (0..n).map(|i| self.spectrum.q(j, i) * shifted[i]).sum())
            .collect())
    }

    pub fn libor_from_z(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        Ok(self
            .log_libor_from_z(z, tau)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }
}

/// Everything derived from an [`LmmConfig`], built once and shared read-only.
#[derive(Debug, Clone)]
pub struct LmmModel {
    pub config: LmmConfig,
    pub correlation: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub transform: ZTransform,
}

impl LmmModel {
    pub fn new(config: LmmConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n();
        let correlation = build_correlation(config.phi, n)?;
        let covariance = build_covariance(config.vol, &correlation)?;
        let spectrum = eigendecompose(&covariance)?;
        let drift = freeze_drift(&config, &correlation)?;
        let transform = ZTransform {
            spectrum,
            drift,
            vols: vec![config.vol; n],
            maturity: config.maturity(),
        };
        Ok(Self {
            config,
            correlation,
            covariance,
            transform,
        })
    }

    pub fn n(&self) -> usize {
        self.config.n()
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.transform.spectrum
    }

    pub fn drift(&self) -> &FrozenDrift {
        &self.transform.drift
    }

    /// `Z(0) = Q^T ln L(0) + beta(T)`, the point every expansion term is read at.
    pub fn anchor(&self) -> Vec<f64> {
        self.transform
            .z_from_libor(&self.config.initial_rates, self.config.maturity())
            .expect("validated config yields a valid anchor")
    }

    /// Log-rates at calendar time `t` along the frozen-drift mean path,
    /// `ln L(0) + t (mu - vol^2/2)`. Adding `Q (z - Z(0))` gives the rates of
    /// any z-space state at that time.
    pub fn mean_log_rates(&self, t: f64) -> Vec<f64> {
        self.config
            .initial_rates
            .iter()
            .zip(self.transform.log_drift())
            .map(|(l, g)| l.ln() + t * g)
            .collect()
    }
}
