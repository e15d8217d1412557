//! System configuration, Rayleigh channel generation and the complex to
//! real-equivalent transform used by every detector.
//!
//! Real-equivalent convention: a complex vector `v` becomes `[Re v; Im v]`
//! and a complex matrix `H` becomes `[[Re H, -Im H], [Im H, Re H]]`. A
//! circularly-symmetric complex covariance `C` maps to
//! `0.5 * [[Re C, -Im C], [Im C, Re C]]`, so white noise of complex variance
//! `sigma^2` has variance `sigma^2 / 2` per real dimension.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    /// i.i.d. entries `CN(0, 1/n_r)`, or Kronecker-correlated when `rho > 0`.
    Rayleigh,
    /// Rectangular identity; turns the system into parallel AWGN channels.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_p: usize,
    pub n_d: usize,
    pub mod_order: usize,
    pub snr_db: f64,
    pub rho: f64,
    pub layers: usize,
    pub turbo_iters: usize,
    pub seed: u64,
    pub channel: ChannelModel,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_t: 4,
            n_r: 4,
            n_p: 4,
            n_d: 12,
            mod_order: 4,
            snr_db: 10.0,
            rho: 0.0,
            layers: 4,
            turbo_iters: 1,
            seed: 1,
            channel: ChannelModel::Rayleigh,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_t == 0 || self.n_r == 0 {
            return fail(format!(
                "antenna counts must be >= 1 (n_t={}, n_r={})",
                self.n_t, self.n_r
            ));
        }
        if self.n_p < self.n_t {
            return fail(format!(
                "n_p={} < n_t={}: pilots cannot be full rank",
                self.n_p, self.n_t
            ));
        }
        if !matches!(self.mod_order, 4 | 16 | 64) {
            return fail(format!("unsupported modulation order {}", self.mod_order));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho={} outside [0, 1)", self.rho));
        }
        if self.layers == 0 || self.turbo_iters == 0 {
            return fail("layers and turbo_iters must be >= 1".into());
        }
        if self.snr_db.is_nan() {
            return fail("snr_db is NaN".into());
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        snr_to_noise_variance(self)
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        SystemConfig { snr_db, ..self.clone() }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.mod_order.trailing_zeros() as usize
    }

    /// Layer count used for a given SNR: 4 up to 25 dB, 10 above.
    pub fn default_layers(snr_db: f64) -> usize {
        if snr_db <= 25.0 {
            4
        } else {
            10
        }
    }
}

/// Complex noise variance `sigma^2 = n_t / (n_r * 10^(snr_db / 10))`.
///
/// With unit-energy symbols and per-entry channel variance `1/n_r`,
/// `E|Hx|^2 = n_t` and `E|n|^2 = n_r sigma^2`.
pub fn snr_to_noise_variance(config: &SystemConfig) -> f64 {
    config.n_t as f64 / (config.n_r as f64 * 10f64.powf(config.snr_db / 10.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexChannel(pub DMatrix<Complex64>);

impl ComplexChannel {
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn n_r(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.0.ncols()
    }

    pub fn to_real(&self) -> DMatrix<f64> {
        real_matrix(&self.0)
    }
}

/// Circularly-symmetric complex Gaussian sample with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn complex_gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> DMatrix<Complex64> {
    // Column-major fill keeps the draw order independent of nalgebra internals.
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = complex_gaussian(rng, var);
        }
    }
    m
}

pub fn gen_iid_rayleigh<R: Rng + ?Sized>(n_r: usize, n_t: usize, rng: &mut R) -> ComplexChannel {
    ComplexChannel(complex_gaussian_matrix(n_r, n_t, 1.0 / n_r as f64, rng))
}

/// Exponential correlation matrix with entries `rho^|i-j|`.
pub fn exponential_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Draws channels for one configuration, caching the Kronecker square roots.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    n_r: usize,
    n_t: usize,
    model: ChannelModel,
    sqrt_rx: Option<DMatrix<Complex64>>,
    sqrt_tx: Option<DMatrix<Complex64>>,
}

impl ChannelSampler {
    pub fn new(n_r: usize, n_t: usize, rho: f64, model: ChannelModel) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("rho={rho} outside [0, 1)")));
        }
        let (sqrt_rx, sqrt_tx) = if model == ChannelModel::Rayleigh && rho > 0.0 {
            let to_c = |m: DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
            (
                Some(to_c(linalg::psd_sqrt(&exponential_correlation(n_r, rho)))),
                Some(to_c(linalg::psd_sqrt(&exponential_correlation(n_t, rho)))),
            )
        } else {
            (None, None)
        };
        Ok(ChannelSampler {
            n_r,
            n_t,
            model,
            sqrt_rx,
            sqrt_tx,
        })
    }

    pub fn from_config(config: &SystemConfig) -> Result<Self> {
        Self::new(config.n_r, config.n_t, config.rho, config.channel)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ComplexChannel {
        match self.model {
            ChannelModel::Identity => ComplexChannel(DMatrix::from_fn(self.n_r, self.n_t, |i, j| {
                if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })),
            ChannelModel::Rayleigh => {
                let g = gen_iid_rayleigh(self.n_r, self.n_t, rng);
                match (&self.sqrt_rx, &self.sqrt_tx) {
                    (Some(rx), Some(tx)) => ComplexChannel(rx * g.0 * tx),
                    _ => g,
                }
            }
        }
    }
}

/// Kronecker channel `R_R^{1/2} G R_T^{1/2}` with exponential correlation.
pub fn gen_kronecker<R: Rng + ?Sized>(n_r: usize, n_t: usize, rho: f64, rng: &mut R) -> Result<ComplexChannel> {
    let g = gen_iid_rayleigh(n_r, n_t, rng);
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("rho={rho} outside [0, 1)")));
    }
    if rho == 0.0 {
        return Ok(g);
    }
    let to_c = |m: DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
    let rx = to_c(linalg::psd_sqrt(&exponential_correlation(n_r, rho)));
    let tx = to_c(linalg::psd_sqrt(&exponential_correlation(n_t, rho)));
    Ok(ComplexChannel(rx * g.0 * tx))
}

/// Real-equivalent of a stacked detection problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSystem {
    pub h_real: DMatrix<f64>,
    pub y_real: DVector<f64>,
    pub noise_var_per_dim: f64,
    pub noise_cov_real: DMatrix<f64>,
}

pub fn real_matrix(h: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = h.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let v = h[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

pub fn real_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

pub fn complex_vector(v: &DVector<f64>) -> DVector<Complex64> {
    let n = v.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(v[i], v[i + n]))
}

/// Inverse of [`real_matrix`]; reads the `[Re; Im]` first block column.
pub fn complex_matrix(h: &DMatrix<f64>) -> DMatrix<Complex64> {
    let (r, c) = (h.nrows() / 2, h.ncols() / 2);
    DMatrix::from_fn(r, c, |i, j| Complex64::new(h[(i, j)], h[(i + r, j)]))
}

/// Real-composite covariance of a circularly-symmetric complex vector.
pub fn real_covariance(cov: &DMatrix<Complex64>) -> DMatrix<f64> {
    real_matrix(cov).scale(0.5)
}

pub fn complex_to_real(
    h: &ComplexChannel,
    y: &DVector<Complex64>,
    noise_cov: &DMatrix<Complex64>,
) -> Result<RealSystem> {
    let n_r = h.n_r();
    if y.len() != n_r {
        return Err(Error::Dimension {
            context: "complex_to_real (y)",
            expected: n_r.to_string(),
            got: y.len().to_string(),
        });
    }
    if noise_cov.shape() != (n_r, n_r) {
        return Err(Error::Dimension {
            context: "complex_to_real (noise_cov)",
            expected: format!("{n_r}x{n_r}"),
            got: format!("{}x{}", noise_cov.nrows(), noise_cov.ncols()),
        });
    }
    let noise_cov_real = real_covariance(noise_cov);
    let noise_var_per_dim = linalg::trace(&noise_cov_real) / (2 * n_r) as f64;
    Ok(RealSystem {
        h_real: h.to_real(),
        y_real: real_vector(y),
        noise_var_per_dim,
        noise_cov_real,
    })
}
