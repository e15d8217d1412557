//! MIMO detectors in the real-equivalent domain: LMMSE, OAMP, the unfolded
//! OAMP-Net2 with four trainable scalars per layer, and exhaustive ML.
//!
//! Dimensions: `h` is `2 n_r x 2 n_t`, so the "number of transmit
//! dimensions" in every trace normalization is `n = 2 n_t`, and the error
//! variances `v2`, `tau2` are per real dimension.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SystemConfig;
use crate::modem::Constellation;

/// Floor applied to `v2` and `tau2`.
pub const VAR_FLOOR: f64 = 5e-13;

/// Largest candidate set `ml_detect` will enumerate.
pub const ML_MAX_CANDIDATES: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Step size of the linear estimator.
    pub gamma: f64,
    /// Output scale of the divergence-free denoiser.
    pub phi: f64,
    /// Weight of the input subtracted inside the denoiser.
    pub xi: f64,
    /// Scale inside the `tau2` estimator.
    pub theta: f64,
}

impl Default for LayerParams {
    fn default() -> Self {
        LayerParams {
            gamma: 1.0,
            phi: 1.0,
            xi: 0.0,
            theta: 1.0,
        }
    }
}

impl LayerParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.gamma, self.phi, self.xi, self.theta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        LayerParams {
            gamma: a[0],
            phi: a[1],
            xi: a[2],
            theta: a[3],
        }
    }
}

/// Context a parameter set was trained in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub snr_db: f64,
    pub rho: f64,
    pub mod_order: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub layers: usize,
    pub turbo_iters: usize,
}

impl ParamsMeta {
    pub fn from_config(config: &SystemConfig) -> Self {
        ParamsMeta {
            snr_db: config.snr_db,
            rho: config.rho,
            mod_order: config.mod_order,
            n_t: config.n_t,
            n_r: config.n_r,
            layers: config.layers,
            turbo_iters: config.turbo_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
    pub meta: ParamsMeta,
}

impl NetParams {
    /// `(1, 1, 0, 1)` in every layer: the network computes plain OAMP.
    pub fn default_for(config: &SystemConfig) -> Self {
        NetParams {
            layers: vec![LayerParams::default(); config.layers],
            meta: ParamsMeta::from_config(config),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Flattened `[gamma_1, phi_1, xi_1, theta_1, gamma_2, ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.to_array()).collect()
    }

    pub fn with_values(&self, values: &[f64]) -> Self {
        let layers = values
            .chunks_exact(4)
            .map(|c| LayerParams::from_array([c[0], c[1], c[2], c[3]]))
            .collect();
        NetParams {
            layers,
            meta: self.meta.clone(),
        }
    }
}

/// Channel, equivalent-noise covariance and the products every layer reuses.
#[derive(Debug, Clone)]
pub struct MimoSystem {
    h: DMatrix<f64>,
    hht: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    tr_hth: f64,
    tr_noise: f64,
    spectral: Option<Spectral>,
}

/// SVD of the whitened channel `L^-1 H = U S V^T` with `R = L L^T`.
///
/// Then `W_hat = v2 V S (v2 S^2 + I)^-1 U^T L^-1` and `W_hat H` has
/// eigenvalues `v2 s^2 / (v2 s^2 + 1)`, so a layer needs no factorization.
#[derive(Debug, Clone)]
struct Spectral {
    /// `U^T L^-1`, `k x 2 n_r`.
    proj: DMatrix<f64>,
    /// `V`, `2 n_t x k`.
    v: DMatrix<f64>,
    /// Squared singular values.
    s2: Vec<f64>,
    s: Vec<f64>,
}

impl Spectral {
    fn new(h: &DMatrix<f64>, noise_cov: &DMatrix<f64>) -> Option<Self> {
        let chol = noise_cov.clone().cholesky()?;
        let l = chol.l();
        let white = l.solve_lower_triangular(h)?;
        let svd = white.svd(true, true);
        let u = svd.u?;
        let v = svd.v_t?.transpose();
        let proj = l.transpose().solve_upper_triangular(&u)?.transpose();
        let s: Vec<f64> = svd.singular_values.iter().copied().collect();
        if s.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some(Spectral {
            proj,
            v,
            s2: s.iter().map(|x| x * x).collect(),
            s,
        })
    }
}

impl MimoSystem {
    pub fn new(h: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let m = h.nrows();
        if noise_cov.shape() != (m, m) {
            return Err(Error::Dimension {
                context: "noise covariance",
                expected: format!("{m}x{m}"),
                got: format!("{}x{}", noise_cov.nrows(), noise_cov.ncols()),
            });
        }
        let hht = &h * h.transpose();
        let tr_hth = h.norm_squared();
        let tr_noise = linalg::trace(&noise_cov);
        let spectral = Spectral::new(&h, &noise_cov);
        Ok(MimoSystem {
            h,
            hht,
            noise_cov,
            tr_hth,
            tr_noise,
            spectral,
        })
    }

    /// Same system without the spectral precomputation: every OAMP-Net2
    /// layer then factors `v2 H H^T + R` itself.
    pub fn direct_only(mut self) -> Self {
        self.spectral = None;
        self
    }

    pub fn has_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Real transmit dimension `2 n_t`.
    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.h.nrows() {
            return Err(Error::Dimension {
                context: "received vector",
                expected: self.h.nrows().to_string(),
                got: y.len().to_string(),
            });
        }
        Ok(())
    }

    /// De-correlated LMMSE matrix `W = n / tr(W_hat H) * W_hat` with
    /// `W_hat = v2 H^T (v2 H H^T + R)^-1`. Returns `(W, tr(W_hat H))`.
    pub fn build_w(&self, v2: f64) -> Result<(DMatrix<f64>, f64)> {
        let mut gram = self.hht.scale(v2);
        gram += &self.noise_cov;
        let z = linalg::spd_solve(&gram, &self.h)?;
        let normalizer = v2 * z.dot(&self.h);
        if !(normalizer > 1e-14) {
            return Err(Error::DegenerateChannel(normalizer));
        }
        let w = z.transpose().scale(v2 * self.dim() as f64 / normalizer);
        Ok((w, normalizer))
    }

    fn residual_variance(&self, residual: &DVector<f64>) -> f64 {
        ((residual.norm_squared() - self.tr_noise) / self.tr_hth).max(VAR_FLOOR)
    }
}

/// Free-function form of [`MimoSystem::build_w`].
pub fn build_w(h_real: &DMatrix<f64>, v2: f64, noise_cov_real: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    MimoSystem::new(h_real.clone(), noise_cov_real.clone())?.build_w(v2.max(VAR_FLOOR))
}

/// Detector state after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    /// Estimate fed to the next layer (`x_{t+1}`).
    pub x_hat: DVector<f64>,
    /// Linear-estimator output `r_t`.
    pub r: DVector<f64>,
    pub v2: f64,
    pub tau2: f64,
    /// Denoiser posterior means before the `phi` / `xi` combination.
    pub post_mean: DVector<f64>,
    pub per_symbol_var: DVector<f64>,
    /// `tr(I - W_t H)`; zero up to rounding for a de-correlated `W_t`.
    pub decorrelation: f64,
}

impl DetectorState {
    /// `x_1 = 0`, `tau_1 = 1`.
    pub fn initial(dim: usize) -> Self {
        DetectorState {
            x_hat: DVector::zeros(dim),
            r: DVector::zeros(dim),
            v2: 1.0,
            tau2: 1.0,
            post_mean: DVector::zeros(dim),
            per_symbol_var: DVector::zeros(dim),
            decorrelation: 0.0,
        }
    }
}

fn ensure_finite(layer: usize, quantity: &'static str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, quantity })
    }
}

fn denoise_all(r: &DVector<f64>, tau2: f64, c: &Constellation) -> (DVector<f64>, DVector<f64>) {
    let mut mean = DVector::zeros(r.len());
    let mut var = DVector::zeros(r.len());
    for (i, &ri) in r.iter().enumerate() {
        let s = c.denoise(ri, 2.0 * tau2);
        mean[i] = s.mean;
        var[i] = s.var;
    }
    (mean, var)
}

/// `sum_ij (W R)_ij W_ij = tr(W R W^T)`.
fn tr_wrw(w: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    (w * r).dot(w)
}

/// One plain OAMP iteration.
pub fn oamp_step(
    state: &DetectorState,
    y: &DVector<f64>,
    sys: &MimoSystem,
    c: &Constellation,
    layer: usize,
) -> Result<DetectorState> {
    let n = sys.dim() as f64;
    let residual = y - &sys.h * &state.x_hat;
    let v2 = sys.residual_variance(&residual);
    ensure_finite(layer, "v2", v2.is_finite())?;
    let (w, _) = sys.build_w(v2)?;
    let r = &state.x_hat + &w * &residual;
    ensure_finite(layer, "r", r.iter().all(|v| v.is_finite()))?;
    let mut b = -(&w * &sys.h);
    let decorrelation = b.trace() + n;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    let tau2 = (b.norm_squared() / n * v2 + tr_wrw(&w, &sys.noise_cov) / n).max(VAR_FLOOR);
    ensure_finite(layer, "tau2", tau2.is_finite())?;
    let (post_mean, per_symbol_var) = denoise_all(&r, tau2, c);
    Ok(DetectorState {
        x_hat: post_mean.clone(),
        r,
        v2,
        tau2,
        post_mean,
        per_symbol_var,
        decorrelation,
    })
}

/// One OAMP-Net2 layer with trainable `(gamma, phi, xi, theta)`.
pub fn oampnet2_step(
    state: &DetectorState,
    y: &DVector<f64>,
    sys: &MimoSystem,
    params: &LayerParams,
    c: &Constellation,
    layer: usize,
) -> Result<DetectorState> {
    let n = sys.dim() as f64;
    let residual = y - &sys.h * &state.x_hat;
    let v2 = sys.residual_variance(&residual);
    ensure_finite(layer, "v2", v2.is_finite())?;
    let theta2 = params.theta * params.theta;
    let (r, decorrelation, c_norm2, tr_wrw_) = match &sys.spectral {
        Some(sp) => {
            let k = sp.s.len();
            let mut d = Vec::with_capacity(k);
            let mut g = Vec::with_capacity(k);
            for (&s, &s2) in sp.s.iter().zip(&sp.s2) {
                let den = v2 * s2 + 1.0;
                d.push(v2 * s2 / den);
                g.push(v2 * s / den);
            }
            let normalizer: f64 = d.iter().sum();
            if !(normalizer > 1e-14) {
                return Err(Error::DegenerateChannel(normalizer));
            }
            let scale = n / normalizer;
            let mut coef = &sp.proj * &residual;
            for (ci, gi) in coef.iter_mut().zip(&g) {
                *ci *= gi * scale * params.gamma;
            }
            let r = &state.x_hat + &sp.v * coef;
            let c_norm2 = d
                .iter()
                .map(|di| (1.0 - params.theta * scale * di).powi(2))
                .sum::<f64>()
                + (n - k as f64);
            let tr = scale * scale * g.iter().map(|gi| gi * gi).sum::<f64>();
            (r, n - scale * normalizer, c_norm2, tr)
        }
        None => {
            let (w, _) = sys.build_w(v2)?;
            let r = &state.x_hat + (&w * &residual).scale(params.gamma);
            let wh = &w * &sys.h;
            let decorrelation = n - wh.trace();
            let mut cmat = -wh.scale(params.theta);
            for i in 0..cmat.nrows() {
                cmat[(i, i)] += 1.0;
            }
            (r, decorrelation, cmat.norm_squared(), tr_wrw(&w, &sys.noise_cov))
        }
    };
    ensure_finite(layer, "r", r.iter().all(|v| v.is_finite()))?;
    let tau2 = (c_norm2 / n * v2 + theta2 / n * tr_wrw_).max(VAR_FLOOR);
    ensure_finite(layer, "tau2", tau2.is_finite())?;
    let (post_mean, per_symbol_var) = denoise_all(&r, tau2, c);
    let x_hat = (&post_mean - r.scale(params.xi)).scale(params.phi);
    ensure_finite(layer, "x_hat", x_hat.iter().all(|v| v.is_finite()))?;
    Ok(DetectorState {
        x_hat,
        r,
        v2,
        tau2,
        post_mean,
        per_symbol_var,
        decorrelation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Final estimate `x_{T+1}` (real-equivalent).
    pub x_hat: DVector<f64>,
    pub hard_symbols: Vec<usize>,
    pub hard_bits: Vec<u8>,
    pub posterior_means: DVector<f64>,
    pub posterior_vars: DVector<f64>,
    /// Per antenna, `log2(M)` LLRs (`log P(b=1)/P(b=0)`), in-phase bits first.
    pub llrs: Vec<f64>,
    pub trajectory: Vec<DetectorState>,
}

impl DetectionResult {
    /// Complex error variance per antenna (sum over both real dimensions).
    pub fn symbol_error_vars(&self) -> Vec<f64> {
        let n_t = self.posterior_vars.len() / 2;
        (0..n_t)
            .map(|j| self.posterior_vars[j] + self.posterior_vars[j + n_t])
            .collect()
    }
}

/// LLRs of all antennas from per-dimension observations `r` with
/// per-dimension noise variances `noise_var`.
fn llrs_from(r: &DVector<f64>, noise_var: &[f64], c: &Constellation) -> Vec<f64> {
    let n_t = r.len() / 2;
    let mut out = Vec::with_capacity(n_t * c.bits_per_symbol());
    for j in 0..n_t {
        c.llr_into(r[j], 2.0 * noise_var[j].max(VAR_FLOOR), &mut out);
        c.llr_into(r[j + n_t], 2.0 * noise_var[j + n_t].max(VAR_FLOOR), &mut out);
    }
    out
}

fn finish(x_hat: DVector<f64>, trajectory: Vec<DetectorState>, c: &Constellation) -> DetectionResult {
    let last = trajectory.last().expect("at least one layer");
    let hard_symbols = c.hard_decisions_real(&x_hat);
    let hard_bits = c.labels_to_bits(&hard_symbols);
    let llrs = llrs_from(&last.r, &vec![last.tau2; last.r.len()], c);
    DetectionResult {
        hard_symbols,
        hard_bits,
        posterior_means: last.post_mean.clone(),
        posterior_vars: last.per_symbol_var.clone(),
        llrs,
        x_hat,
        trajectory,
    }
}

/// Plain OAMP with `layers` iterations.
pub fn oamp_detect(y: &DVector<f64>, sys: &MimoSystem, layers: usize, c: &Constellation) -> Result<DetectionResult> {
    if layers == 0 {
        return Err(Error::Config("OAMP needs at least one layer".into()));
    }
    sys.check_y(y)?;
    let mut state = DetectorState::initial(sys.dim());
    let mut trajectory = Vec::with_capacity(layers);
    for t in 0..layers {
        state = oamp_step(&state, y, sys, c, t + 1)?;
        trajectory.push(state.clone());
    }
    Ok(finish(state.x_hat, trajectory, c))
}

/// OAMP-Net2 forward pass.
pub fn oampnet2_detect(
    y: &DVector<f64>,
    sys: &MimoSystem,
    params: &NetParams,
    c: &Constellation,
) -> Result<DetectionResult> {
    if params.layers.is_empty() {
        return Err(Error::Config("OAMP-Net2 needs at least one layer".into()));
    }
    sys.check_y(y)?;
    let mut state = DetectorState::initial(sys.dim());
    let mut trajectory = Vec::with_capacity(params.depth());
    for (t, lp) in params.layers.iter().enumerate() {
        state = oampnet2_step(&state, y, sys, lp, c, t + 1)?;
        trajectory.push(state.clone());
    }
    Ok(finish(state.x_hat, trajectory, c))
}

/// Linear MMSE detector `x = E_s H^T (E_s H H^T + R)^-1 y`, `E_s = 1/2`.
///
/// LLRs use the unbiased per-stream output `x_i / mu_i` with
/// per-dimension noise `E_s (1 - mu_i) / mu_i`,
/// `mu_i = E_s [H^T (E_s H H^T + R)^-1 H]_ii`.
pub fn lmmse_detect(y: &DVector<f64>, sys: &MimoSystem, c: &Constellation) -> Result<DetectionResult> {
    const ES: f64 = 0.5;
    sys.check_y(y)?;
    let mut gram = sys.hht.scale(ES);
    gram += &sys.noise_cov;
    let z = linalg::spd_solve(&gram, &sys.h)?;
    let x_hat = z.tr_mul(y).scale(ES);
    let n = sys.dim();
    let zth = z.tr_mul(&sys.h);
    let mut r = DVector::zeros(n);
    let mut noise = vec![0.0; n];
    let mut err_var = DVector::zeros(n);
    for i in 0..n {
        let mu = (ES * zth[(i, i)]).clamp(1e-12, 1.0);
        r[i] = x_hat[i] / mu;
        noise[i] = ES * (1.0 - mu) / mu;
        err_var[i] = ES * (1.0 - mu);
    }
    let hard_symbols = c.hard_decisions_real(&x_hat);
    let hard_bits = c.labels_to_bits(&hard_symbols);
    Ok(DetectionResult {
        llrs: llrs_from(&r, &noise, c),
        hard_symbols,
        hard_bits,
        posterior_means: x_hat.clone(),
        posterior_vars: err_var,
        x_hat,
        trajectory: Vec::new(),
    })
}

/// Exhaustive ML search over all `M^{n_t}` candidates.
///
/// Candidates are ordered lexicographically by their label vectors (antenna
/// 0 most significant); ties keep the earliest.
#[derive(Debug, Clone)]
pub struct MlDetector {
    n_t: usize,
    order: usize,
    candidates: usize,
    /// `H s` for every candidate, one column each, when small enough to cache.
    images: Option<DMatrix<f64>>,
    h: DMatrix<f64>,
    c: Constellation,
}

impl MlDetector {
    pub fn new(h_real: &DMatrix<f64>, c: &Constellation, n_t: usize) -> Result<Self> {
        let count = (c.order() as u128).pow(n_t as u32);
        if count > ML_MAX_CANDIDATES {
            return Err(Error::EnumerationTooLarge(count));
        }
        if h_real.ncols() != 2 * n_t {
            return Err(Error::Dimension {
                context: "ML channel",
                expected: format!("{} columns", 2 * n_t),
                got: h_real.ncols().to_string(),
            });
        }
        let candidates = count as usize;
        let mut det = MlDetector {
            n_t,
            order: c.order(),
            candidates,
            images: None,
            h: h_real.clone(),
            c: c.clone(),
        };
        if candidates * h_real.nrows() <= 1 << 22 {
            let mut images = DMatrix::zeros(h_real.nrows(), candidates);
            let mut labels = vec![0; n_t];
            for k in 0..candidates {
                det.labels_of(k, &mut labels);
                images.set_column(k, &(h_real * c.symbols_to_real(&labels)));
            }
            det.images = Some(images);
        }
        Ok(det)
    }

    fn labels_of(&self, mut k: usize, out: &mut [usize]) {
        for j in (0..self.n_t).rev() {
            out[j] = k % self.order;
            k /= self.order;
        }
    }

    pub fn detect(&self, y: &DVector<f64>) -> Vec<usize> {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        let mut labels = vec![0; self.n_t];
        for k in 0..self.candidates {
            let d = match &self.images {
                Some(img) => img
                    .column(k)
                    .iter()
                    .zip(y.iter())
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>(),
                None => {
                    self.labels_of(k, &mut labels);
                    (y - &self.h * self.c.symbols_to_real(&labels)).norm_squared()
                }
            };
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        self.labels_of(best, &mut labels);
        labels
    }
}

pub fn ml_detect(y: &DVector<f64>, h_real: &DMatrix<f64>, c: &Constellation, n_t: usize) -> Result<Vec<usize>> {
    Ok(MlDetector::new(h_real, c, n_t)?.detect(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_iid_rayleigh, real_matrix};
    use crate::modem::make_constellation;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn instance(seed: u64, n_t: usize, n_r: usize, sigma2: f64, m: usize) -> (MimoSystem, DVector<f64>, Vec<usize>) {
        let c = make_constellation(m).unwrap();
        let mut rng = substream(seed, Stream::Channel, 0);
        let h = real_matrix(&gen_iid_rayleigh(n_r, n_t, &mut rng).0);
        let labels: Vec<usize> = (0..n_t).map(|_| rng.gen_range(0..m)).collect();
        let x = c.symbols_to_real(&labels);
        let noise = DVector::from_fn(2 * n_r, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * (sigma2 / 2.0).sqrt()
        });
        let y = &h * x + noise;
        let sys = MimoSystem::new(h, DMatrix::identity(2 * n_r, 2 * n_r).scale(sigma2 / 2.0)).unwrap();
        (sys, y, labels)
    }

    #[test]
    fn scalar_w() {
        let sigma2 = 0.2;
        let h = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2).scale(sigma2);
        let sys = MimoSystem::new(h, r).unwrap();
        let (w, norm) = sys.build_w(1.0).unwrap();
        assert!((norm - 2.0 / (1.0 + sigma2)).abs() < 1e-14);
        assert!((w - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn w_is_decorrelated() {
        let (sys, _, _) = instance(11, 4, 4, 0.1, 4);
        for v2 in [1e-3, 0.1, 0.5, 3.0] {
            let (w, _) = sys.build_w(v2).unwrap();
            let b = DMatrix::identity(8, 8) - &w * sys.h();
            assert!(b.trace().abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_channel_is_an_error() {
        let sys = MimoSystem::new(DMatrix::zeros(4, 4), DMatrix::identity(4, 4)).unwrap();
        assert!(matches!(sys.build_w(1.0), Err(Error::DegenerateChannel(_))));
    }

    #[test]
    fn default_net_step_equals_oamp_step() {
        let c = make_constellation(16).unwrap();
        let (sys, y, _) = instance(3, 4, 4, 0.05, 16);
        let mut a = DetectorState::initial(8);
        let mut b = a.clone();
        for t in 1..=5 {
            a = oamp_step(&a, &y, &sys, &c, t).unwrap();
            b = oampnet2_step(&b, &y, &sys, &LayerParams::default(), &c, t).unwrap();
            assert!((&a.x_hat - &b.x_hat).amax() <= 1e-12);
            assert!((a.tau2 - b.tau2).abs() <= 1e-12 && (a.v2 - b.v2).abs() <= 1e-12);
        }
    }

    #[test]
    fn spectral_layer_matches_direct_layer() {
        let mut rng = substream(40, Stream::Channel, 0);
        for (k, (n_t, n_r, m)) in [(4, 4, 4), (4, 6, 16), (6, 4, 4), (8, 8, 16)].into_iter().enumerate() {
            let (sys, y, _) = instance(30 + k as u64, n_t, n_r, 0.08, m);
            // colored, still diagonal-dominant noise
            let mut cov = sys.noise_cov().clone();
            for i in 0..2 * n_r {
                cov[(i, i)] += 0.02 * i as f64;
            }
            cov[(0, 1)] = 0.01;
            cov[(1, 0)] = 0.01;
            let fast = MimoSystem::new(sys.h().clone(), cov).unwrap();
            assert!(fast.has_spectral());
            let slow = fast.clone().direct_only();
            let c = make_constellation(m).unwrap();
            let (mut a, mut b) = (DetectorState::initial(2 * n_t), DetectorState::initial(2 * n_t));
            for t in 1..=4 {
                let p = LayerParams {
                    gamma: rng.gen_range(0.5..1.5),
                    phi: rng.gen_range(0.5..1.5),
                    xi: rng.gen_range(-0.2..0.2),
                    theta: rng.gen_range(0.5..1.5),
                };
                a = oampnet2_step(&a, &y, &fast, &p, &c, t).unwrap();
                b = oampnet2_step(&b, &y, &slow, &p, &c, t).unwrap();
                assert!((&a.r - &b.r).amax() < 1e-10, "{n_t}x{n_r} layer {t}");
                assert!((a.tau2 - b.tau2).abs() < 1e-10 * b.tau2.max(1.0));
                assert!(a.decorrelation.abs() < 1e-9 && b.decorrelation.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_exact_start_clamps_v2() {
        let c = make_constellation(4).unwrap();
        let (sys, _, labels) = instance(8, 2, 2, 0.0, 4);
        let x = c.symbols_to_real(&labels);
        let y = sys.h() * &x;
        let sys = MimoSystem::new(sys.h().clone(), DMatrix::zeros(4, 4)).unwrap();
        let state = DetectorState {
            x_hat: x.clone(),
            ..DetectorState::initial(4)
        };
        let next = oamp_step(&state, &y, &sys, &c, 1).unwrap();
        assert_eq!(next.v2, VAR_FLOOR);
        assert!(next.tau2 >= VAR_FLOOR);
        assert!((&next.x_hat - &x).amax() < 1e-12);
    }

    #[test]
    fn scalar_layer_by_hand() {
        // 1x1 real-equivalent system h = 0.8 (both dims), sigma^2/2 = 0.05, QPSK.
        let c = make_constellation(4).unwrap();
        let h = DMatrix::identity(2, 2).scale(0.8);
        let noise = DMatrix::identity(2, 2).scale(0.05);
        let sys = MimoSystem::new(h, noise).unwrap();
        let y = DVector::from_vec(vec![0.6, -0.5]);
        let s = oamp_step(&DetectorState::initial(2), &y, &sys, &c, 1).unwrap();
        // v2 = (0.36 + 0.25 - 0.1) / (2 * 0.64)
        let v2: f64 = 0.51 / 1.28;
        assert!((s.v2 - v2).abs() < 1e-15);
        // de-correlated W = 1/h, so r = y / h and tau2 = noise / h^2
        assert!((s.r[0] - 0.75).abs() < 1e-14 && (s.r[1] + 0.625).abs() < 1e-14);
        let tau2 = 0.05 / 0.64;
        assert!((s.tau2 - tau2).abs() < 1e-15);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let want = a * (2.0 * 0.75 * a / (2.0 * tau2)).tanh();
        assert!((s.x_hat[0] - want).abs() < 1e-14);
    }

    #[test]
    fn oamp_matches_default_net() {
        let c = make_constellation(4).unwrap();
        for seed in 0..20 {
            let (sys, y, _) = instance(seed, 4, 4, 0.1, 4);
            let cfg = SystemConfig::default();
            let a = oamp_detect(&y, &sys, 4, &c).unwrap();
            let b = oampnet2_detect(&y, &sys, &NetParams::default_for(&cfg), &c).unwrap();
            assert!((&a.x_hat - &b.x_hat).amax() <= 1e-12);
            assert_eq!(a.hard_bits, b.hard_bits);
        }
    }

    #[test]
    fn llr_signs_match_hard_bits_qpsk() {
        let c = make_constellation(4).unwrap();
        for seed in 0..50 {
            let (sys, y, _) = instance(seed, 4, 4, 0.2, 4);
            let res = oamp_detect(&y, &sys, 4, &c).unwrap();
            for (l, b) in res.llrs.iter().zip(&res.hard_bits) {
                if *l != 0.0 {
                    assert_eq!(*l > 0.0, *b == 1);
                }
            }
        }
    }

    #[test]
    fn lmmse_noiseless_and_scalar() {
        let c = make_constellation(16).unwrap();
        let (sys, _, labels) = instance(2, 3, 3, 0.0, 16);
        let y = sys.h() * c.symbols_to_real(&labels);
        let sys0 = MimoSystem::new(sys.h().clone(), DMatrix::zeros(6, 6)).unwrap();
        assert_eq!(lmmse_detect(&y, &sys0, &c).unwrap().hard_symbols, labels);

        let h = DMatrix::identity(2, 2).scale(0.7);
        let sys = MimoSystem::new(h, DMatrix::identity(2, 2).scale(0.1)).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.2]);
        let res = lmmse_detect(&y, &sys, &c).unwrap();
        let g = 0.5 * 0.7 / (0.5 * 0.49 + 0.1);
        assert!((res.x_hat[0] - g * 0.3).abs() < 1e-14);
        assert!((res.x_hat[1] + g * 0.2).abs() < 1e-14);
    }

    #[test]
    fn ml_noiseless_and_guard() {
        let c = make_constellation(4).unwrap();
        let (sys, _, labels) = instance(4, 3, 3, 0.0, 4);
        let y = sys.h() * c.symbols_to_real(&labels);
        assert_eq!(ml_detect(&y, sys.h(), &c, 3).unwrap(), labels);
        let c64 = make_constellation(64).unwrap();
        let h = DMatrix::zeros(8, 8);
        assert!(matches!(
            MlDetector::new(&h, &c64, 4),
            Err(Error::EnumerationTooLarge(_))
        ));
    }
}
