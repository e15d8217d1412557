//! DFT pilots, LMMSE channel estimation and the equivalent-noise
//! covariances exchanged between estimator and detector.
//!
//! The channel is vectorized column-major, `h = vec(H)`, so entry `(i, j)`
//! (receive `i`, transmit `j`) sits at `i + j * n_r`, and the pilot
//! observation is `vec(Y) = (X^T kron I_{n_r}) h + vec(N)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, exponential_correlation, SystemConfig};

type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix(pub CMatrix);

impl PilotMatrix {
    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }
}

/// First `n_t` rows of the `n_p`-point DFT matrix (unit-modulus entries).
pub fn dft_pilots(n_t: usize, n_p: usize) -> Result<PilotMatrix> {
    if n_p < n_t {
        return Err(Error::Config(format!("n_p={n_p} < n_t={n_t}")));
    }
    let w = -2.0 * std::f64::consts::PI / n_p as f64;
    Ok(PilotMatrix(DMatrix::from_fn(n_t, n_p, |k, n| {
        Complex64::from_polar(1.0, w * ((k * n) % n_p) as f64)
    })))
}

/// Prior covariance `R_hh` of `vec(H)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPrior {
    /// `c * I`; the estimator then decouples per receive antenna.
    Scaled(f64),
    Full(CMatrix),
}

impl ChannelPrior {
    /// `(1/n_r) I` for i.i.d. channels, `(R_T^T kron R_R) / n_r` for Kronecker.
    pub fn for_config(config: &SystemConfig) -> Self {
        let scale = 1.0 / config.n_r as f64;
        if config.rho == 0.0 {
            return ChannelPrior::Scaled(scale);
        }
        let rt = exponential_correlation(config.n_t, config.rho).transpose();
        let rr = exponential_correlation(config.n_r, config.rho);
        let full = linalg::kron(&rt, &rr).scale(scale);
        ChannelPrior::Full(full.map(|v| Complex64::new(v, 0.0)))
    }

    pub fn dense(&self, dim: usize) -> CMatrix {
        match self {
            ChannelPrior::Scaled(c) => CMatrix::identity(dim, dim).scale(*c),
            ChannelPrior::Full(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub n_r: usize,
    pub n_t: usize,
    pub h_hat: DVector<Complex64>,
    pub err_cov: CMatrix,
    pub per_entry_err_var: Vec<f64>,
}

impl ChannelEstimate {
    fn new(n_r: usize, n_t: usize, h_hat: DVector<Complex64>, err_cov: CMatrix) -> Self {
        let per_entry_err_var = err_cov.diagonal().iter().map(|v| v.re.max(0.0)).collect();
        ChannelEstimate {
            n_r,
            n_t,
            h_hat,
            err_cov,
            per_entry_err_var,
        }
    }

    /// Estimated channel as an `n_r x n_t` matrix.
    pub fn h_matrix(&self) -> CMatrix {
        CMatrix::from_column_slice(self.n_r, self.n_t, self.h_hat.as_slice())
    }

    pub fn h_real(&self) -> DMatrix<f64> {
        model::real_matrix(&self.h_matrix())
    }

    /// Error variance of entry `(i, j)`.
    pub fn err_var(&self, i: usize, j: usize) -> f64 {
        self.per_entry_err_var[i + j * self.n_r]
    }

    pub fn mse(&self, h_true: &CMatrix) -> f64 {
        (self.h_matrix() - h_true).norm_squared() / (self.n_r * self.n_t) as f64
    }
}

/// Equivalent-noise covariance seen by the detector: `diag(v_1..v_{n_r})`
/// with `v_i = sum_j sigma^2_{dh_ij} + sigma^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionNoiseCov {
    pub diag: Vec<f64>,
}

impl DetectionNoiseCov {
    pub fn white(n_r: usize, sigma2: f64) -> Self {
        DetectionNoiseCov {
            diag: vec![sigma2; n_r],
        }
    }

    pub fn complex(&self) -> CMatrix {
        CMatrix::from_diagonal(&DVector::from_iterator(
            self.diag.len(),
            self.diag.iter().map(|&v| Complex64::new(v, 0.0)),
        ))
    }

    /// Real-equivalent covariance (`diag / 2` on both real blocks).
    pub fn real(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        DMatrix::from_fn(2 * n, 2 * n, |i, j| if i == j { self.diag[i % n] / 2.0 } else { 0.0 })
    }
}

/// Block-diagonal covariance of the stacked pilot plus fed-back-data noise:
/// `sigma^2 I` for the `n_p` pilot columns, then `V_p[n] = v_n I_{n_r}` per
/// data column.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationNoiseCov {
    pub n_r: usize,
    pub n_p: usize,
    pub sigma2: f64,
    pub data_block_vars: Vec<f64>,
}

impl EstimationNoiseCov {
    pub fn n_d(&self) -> usize {
        self.data_block_vars.len()
    }

    /// Noise variance of every observation column, pilots first.
    pub fn column_vars(&self) -> Vec<f64> {
        std::iter::repeat_n(self.sigma2, self.n_p)
            .chain(self.data_block_vars.iter().copied())
            .collect()
    }

    pub fn dense(&self) -> CMatrix {
        let vars = self.column_vars();
        let dim = vars.len() * self.n_r;
        CMatrix::from_fn(dim, dim, |a, b| {
            if a == b {
                Complex64::new(vars[a / self.n_r], 0.0)
            } else {
                ZERO
            }
        })
    }
}

fn check_shape(context: &'static str, m: &CMatrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension {
            context,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// LMMSE estimate from observations `Y = H X + N` with per-column noise
/// variances `col_vars` (noise white across receive antennas).
fn lmmse_columns(y: &CMatrix, x: &CMatrix, prior: &ChannelPrior, col_vars: &[f64]) -> Result<ChannelEstimate> {
    let n_r = y.nrows();
    let n_t = x.nrows();
    let n_c = x.ncols();
    check_shape("lmmse observations", y, n_r, n_c)?;
    if col_vars.len() != n_c || col_vars.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config(
            "noise variances must be nonnegative, one per column".into(),
        ));
    }
    match prior {
        ChannelPrior::Scaled(c) => {
            // (A c I A^H + D kron I) = (c X^T conj(X) + D) kron I, so the
            // whole solve collapses to one n_c x n_c system.
            let c = *c;
            let mut gram = (x.transpose() * x.conjugate()).scale(c);
            for (k, v) in col_vars.iter().enumerate() {
                gram[(k, k)] += Complex64::new(*v, 0.0);
            }
            let s = linalg::spd_solve(&gram, &x.transpose())?;
            let h = (y * s.conjugate()).scale(c);
            let k = x.conjugate() * &s;
            let tx_cov = CMatrix::identity(n_t, n_t).scale(c) - k.scale(c * c);
            let err_cov = linalg::kron(&tx_cov, &CMatrix::identity(n_r, n_r));
            Ok(ChannelEstimate::new(
                n_r,
                n_t,
                DVector::from_column_slice(h.as_slice()),
                err_cov,
            ))
        }
        ChannelPrior::Full(r_hh) => {
            let dim = n_r * n_t;
            check_shape("R_hh", r_hh, dim, dim)?;
            let a = linalg::kron(&x.transpose(), &CMatrix::identity(n_r, n_r));
            let ar = &a * r_hh;
            let mut g = &ar * a.adjoint();
            for (idx, v) in col_vars.iter().enumerate() {
                for i in 0..n_r {
                    let d = idx * n_r + i;
                    g[(d, d)] += Complex64::new(*v, 0.0);
                }
            }
            let z = linalg::spd_solve(&g, &ar)?;
            let yv = DVector::from_column_slice(y.as_slice());
            let h_hat = z.adjoint() * yv;
            let err_cov = r_hh - ar.adjoint() * z;
            Ok(ChannelEstimate::new(n_r, n_t, h_hat, err_cov))
        }
    }
}

/// Pilot-only LMMSE: `h = R A^H (A R A^H + s2 I)^-1 y`,
/// `R_dh = R - R A^H (A R A^H + s2 I)^-1 A R` with `A = X_p^T kron I`.
pub fn lmmse_pilot_estimate(
    y_p: &CMatrix,
    x_p: &PilotMatrix,
    prior: &ChannelPrior,
    sigma2: f64,
) -> Result<ChannelEstimate> {
    if let ChannelPrior::Full(r) = prior {
        linalg::check_psd(r, 1e-10)?;
    }
    lmmse_columns(y_p, &x_p.0, prior, &vec![sigma2; x_p.0.ncols()])
}

/// Data-aided LMMSE with `X = (X_p, X_hat_d)` and block noise covariance `R_nn`.
pub fn lmmse_data_aided_estimate(
    y_p: &CMatrix,
    y_d: &CMatrix,
    x_p: &PilotMatrix,
    x_hat_d: &CMatrix,
    prior: &ChannelPrior,
    r_nn: &EstimationNoiseCov,
) -> Result<ChannelEstimate> {
    let n_t = x_p.0.nrows();
    let n_d = y_d.ncols();
    check_shape("data-aided X_hat_d", x_hat_d, n_t, n_d)?;
    if r_nn.n_p != x_p.0.ncols() || r_nn.n_d() != n_d || r_nn.n_r != y_p.nrows() {
        return Err(Error::Dimension {
            context: "R_nn blocks",
            expected: format!("n_p={} n_d={} n_r={}", x_p.0.ncols(), n_d, y_p.nrows()),
            got: format!("n_p={} n_d={} n_r={}", r_nn.n_p, r_nn.n_d(), r_nn.n_r),
        });
    }
    let mut y = CMatrix::zeros(y_p.nrows(), y_p.ncols() + n_d);
    y.columns_mut(0, y_p.ncols()).copy_from(y_p);
    y.columns_mut(y_p.ncols(), n_d).copy_from(y_d);
    let mut x = CMatrix::zeros(n_t, x_p.0.ncols() + n_d);
    x.columns_mut(0, x_p.0.ncols()).copy_from(&x_p.0);
    x.columns_mut(x_p.0.ncols(), n_d).copy_from(x_hat_d);
    if let ChannelPrior::Full(r) = prior {
        linalg::check_psd(r, 1e-10)?;
    }
    lmmse_columns(&y, &x, prior, &r_nn.column_vars())
}

/// Detector-side equivalent noise `diag(sum_j sigma^2_{dh_ij} + sigma^2)`.
pub fn detection_noise_cov(est: &ChannelEstimate, sigma2: f64) -> DetectionNoiseCov {
    let diag = (0..est.n_r)
        .map(|i| (0..est.n_t).map(|j| est.err_var(i, j)).sum::<f64>() + sigma2)
        .collect();
    DetectionNoiseCov { diag }
}

/// Estimator-side equivalent noise for fed-back data.
///
/// `posterior_vars[n][j]` is the complex error variance of symbol `j` at
/// data time `n`. Each data block is `(sum_j var / n_r + sigma^2) I_{n_r}`,
/// using the per-entry channel variance `1/n_r`.
pub fn estimation_noise_cov(
    posterior_vars: &[Vec<f64>],
    sigma2: f64,
    n_r: usize,
    n_p: usize,
) -> Result<EstimationNoiseCov> {
    let mut data_block_vars = Vec::with_capacity(posterior_vars.len());
    for col in posterior_vars {
        if col.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("negative or NaN detection error variance".into()));
        }
        data_block_vars.push(col.iter().sum::<f64>() / n_r as f64 + sigma2);
    }
    Ok(EstimationNoiseCov {
        n_r,
        n_p,
        sigma2,
        data_block_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{complex_gaussian_matrix, gen_iid_rayleigh};
    use crate::rng::{substream, Stream};

    #[test]
    fn two_point_dft() {
        let p = dft_pilots(2, 2).unwrap();
        let want = [[1.0, 1.0], [1.0, -1.0]];
        for (k, row) in want.iter().enumerate() {
            for (n, &w) in row.iter().enumerate() {
                assert!((p.0[(k, n)] - Complex64::new(w, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn dft_orthogonality_and_modulus() {
        for (nt, np) in [(4, 4), (4, 8)] {
            let p = dft_pilots(nt, np).unwrap();
            let g = &p.0 * p.0.adjoint();
            assert!((g - CMatrix::identity(nt, nt).scale(np as f64)).norm() < 1e-10);
            assert!(p.0.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        }
        assert!(dft_pilots(4, 3).is_err());
    }

    #[test]
    fn zero_pilots_give_prior() {
        let x = PilotMatrix(CMatrix::zeros(2, 3));
        let y = CMatrix::zeros(2, 3);
        let est = lmmse_pilot_estimate(&y, &x, &ChannelPrior::Scaled(0.5), 0.1).unwrap();
        assert!(est.h_hat.norm() == 0.0);
        assert!((est.err_cov - CMatrix::identity(4, 4).scale(0.5)).norm() < 1e-14);
    }

    #[test]
    fn noiseless_pilots_recover_channel() {
        let mut rng = substream(2, Stream::Channel, 0);
        let h = gen_iid_rayleigh(4, 4, &mut rng).0;
        let x = dft_pilots(4, 4).unwrap();
        let y = &h * &x.0;
        let est = lmmse_pilot_estimate(&y, &x, &ChannelPrior::Scaled(0.25), 1e-14).unwrap();
        assert!(est.mse(&h) < 1e-20);
        assert!(est.per_entry_err_var.iter().all(|v| *v < 1e-12));
    }

    #[test]
    fn full_prior_path_matches_scaled_path() {
        let mut rng = substream(4, Stream::Channel, 0);
        let h = gen_iid_rayleigh(3, 2, &mut rng).0;
        let x = dft_pilots(2, 4).unwrap();
        let y = &h * &x.0 + complex_gaussian_matrix(3, 4, 0.2, &mut rng);
        let a = lmmse_pilot_estimate(&y, &x, &ChannelPrior::Scaled(1.0 / 3.0), 0.2).unwrap();
        let full = ChannelPrior::Full(CMatrix::identity(6, 6).scale(1.0 / 3.0));
        let b = lmmse_pilot_estimate(&y, &x, &full, 0.2).unwrap();
        assert!((&a.h_hat - &b.h_hat).norm() < 1e-12);
        assert!((&a.err_cov - &b.err_cov).norm() < 1e-12);
    }

    #[test]
    fn data_aided_without_data_equals_pilot_only() {
        let mut rng = substream(6, Stream::Channel, 0);
        let h = gen_iid_rayleigh(4, 4, &mut rng).0;
        let x = dft_pilots(4, 4).unwrap();
        let y = &h * &x.0 + complex_gaussian_matrix(4, 4, 0.1, &mut rng);
        let prior = ChannelPrior::Scaled(0.25);
        let a = lmmse_pilot_estimate(&y, &x, &prior, 0.1).unwrap();
        let r_nn = estimation_noise_cov(&[], 0.1, 4, 4).unwrap();
        let empty = CMatrix::zeros(4, 0);
        let b = lmmse_data_aided_estimate(&y, &empty, &x, &empty, &prior, &r_nn).unwrap();
        assert!((&a.h_hat - &b.h_hat).norm() < 1e-13);
        assert!((&a.err_cov - &b.err_cov).norm() < 1e-13);
    }

    #[test]
    fn perfect_csi_noise_cov_is_white() {
        let est = ChannelEstimate::new(2, 2, DVector::zeros(4), CMatrix::zeros(4, 4));
        assert_eq!(detection_noise_cov(&est, 0.3), DetectionNoiseCov::white(2, 0.3));
    }

    #[test]
    fn estimation_noise_cov_structure() {
        let vars = vec![vec![0.0; 4]; 3];
        let r = estimation_noise_cov(&vars, 0.2, 4, 4).unwrap();
        assert_eq!(r.n_d(), 3);
        assert!((r.dense() - CMatrix::identity(28, 28).scale(0.2)).norm() < 1e-15);
        let vars = vec![vec![0.1, 0.2, 0.3, 0.2]];
        let r = estimation_noise_cov(&vars, 0.2, 4, 4).unwrap();
        assert!((r.data_block_vars[0] - (0.8 / 4.0 + 0.2)).abs() < 1e-15);
        assert!(estimation_noise_cov(&[vec![-0.1]], 0.2, 4, 4).is_err());
    }

    #[test]
    fn kronecker_prior_shape() {
        let cfg = SystemConfig {
            rho: 0.5,
            n_r: 3,
            n_t: 2,
            n_p: 2,
            ..Default::default()
        };
        match ChannelPrior::for_config(&cfg) {
            ChannelPrior::Full(m) => {
                assert_eq!(m.shape(), (6, 6));
                assert!((m[(0, 0)].re - 1.0 / 3.0).abs() < 1e-15);
                // (tx 0, rx 0) with (tx 1, rx 1): 0.5 * 0.5 / 3
                assert!((m[(0, 4)].re - 0.25 / 3.0).abs() < 1e-15);
            }
            _ => panic!("expected full prior"),
        }
    }
}
