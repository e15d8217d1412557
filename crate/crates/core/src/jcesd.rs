//! Turbo joint channel estimation and detection.
//!
//! Iteration 1 estimates the channel from pilots only and detects every data
//! column against the estimate with the equivalent-noise covariance `V_est`.
//! Later iterations feed the hard-decided data back as extra pilots, with
//! the detector's posterior variances entering the block noise covariance
//! `R_nn`, then detect again.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chanest::{
    detection_noise_cov, dft_pilots, estimation_noise_cov, lmmse_data_aided_estimate, lmmse_pilot_estimate,
    ChannelEstimate, ChannelPrior, DetectionNoiseCov, EstimationNoiseCov, PilotMatrix,
};
use crate::detect::{oamp_detect, oampnet2_detect, DetectionResult, MimoSystem, NetParams};
use crate::error::{Error, Result};
use crate::model::{complex_gaussian_matrix, real_vector, ChannelSampler, ComplexChannel, SystemConfig};
use crate::modem::{make_constellation, Constellation};
use crate::rng::{substream, Stream};
use crate::train::{sample_l2, LossMode, Objective};

type CMatrix = nalgebra::DMatrix<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurboDetector {
    Oamp,
    OampNet2,
}

/// One coherence slot: a single channel draw shared by `n_p` pilot and
/// `n_d` data columns.
#[derive(Debug, Clone)]
pub struct Slot {
    pub h: ComplexChannel,
    /// Transmitted labels, one vector per data column.
    pub labels: Vec<Vec<usize>>,
    pub x_d: CMatrix,
    pub y_p: CMatrix,
    pub y_d: CMatrix,
}

/// Per-slot streams make slot `index` reproducible on its own. Noise is
/// drawn at unit variance and scaled, so the same slot index at two SNRs
/// differs only in noise power.
pub fn gen_slot(
    config: &SystemConfig,
    sampler: &ChannelSampler,
    pilots: &PilotMatrix,
    c: &Constellation,
    seed: u64,
    index: u64,
) -> Slot {
    let h = sampler.sample(&mut substream(seed, Stream::Channel, index));
    let mut bits_rng = substream(seed, Stream::Bits, index);
    let labels: Vec<Vec<usize>> = (0..config.n_d)
        .map(|_| (0..config.n_t).map(|_| bits_rng.gen_range(0..c.order())).collect())
        .collect();
    let x_d = CMatrix::from_fn(config.n_t, config.n_d, |j, n| c.point(labels[n][j]));
    let mut noise_rng = substream(seed, Stream::Noise, index);
    let scale = config.noise_variance().sqrt();
    let n_p = complex_gaussian_matrix(config.n_r, config.n_p, 1.0, &mut noise_rng).scale(scale);
    let n_d = complex_gaussian_matrix(config.n_r, config.n_d, 1.0, &mut noise_rng).scale(scale);
    let y_p = &h.0 * &pilots.0 + n_p;
    let y_d = &h.0 * &x_d + n_d;
    Slot {
        h,
        labels,
        x_d,
        y_p,
        y_d,
    }
}

#[derive(Debug, Clone)]
pub struct TurboState {
    /// Turbo index `l`, starting at 1.
    pub iter: usize,
    pub estimate: ChannelEstimate,
    pub v_est: DetectionNoiseCov,
    /// Block noise covariance of the data-aided estimate; `None` at `l = 1`.
    pub r_nn: Option<EstimationNoiseCov>,
    pub detections: Vec<DetectionResult>,
    /// Hard-decided data, `n_t x n_d`.
    pub x_det: CMatrix,
    pub feedback_used: bool,
}

impl TurboState {
    pub fn hard_labels(&self) -> Vec<Vec<usize>> {
        self.detections.iter().map(|d| d.hard_symbols.clone()).collect()
    }
}

/// Pilot-only estimate of a slot and the detector system built on it. It
/// does not depend on network parameters, so training computes it once.
#[derive(Debug, Clone)]
pub struct PilotStage {
    pub estimate: ChannelEstimate,
    pub v_est: DetectionNoiseCov,
    pub system: MimoSystem,
}

impl PilotStage {
    pub fn new(y_p: &CMatrix, x_p: &PilotMatrix, config: &SystemConfig) -> Result<Self> {
        let sigma2 = config.noise_variance();
        let estimate = lmmse_pilot_estimate(y_p, x_p, &ChannelPrior::for_config(config), sigma2)?;
        let v_est = detection_noise_cov(&estimate, sigma2);
        let system = MimoSystem::new(estimate.h_real(), v_est.real())?;
        Ok(PilotStage {
            estimate,
            v_est,
            system,
        })
    }
}

fn detect_columns(
    y_d: &CMatrix,
    sys: &MimoSystem,
    config: &SystemConfig,
    params: &NetParams,
    detector: TurboDetector,
    c: &Constellation,
) -> Result<Vec<DetectionResult>> {
    (0..y_d.ncols())
        .map(|n| {
            let y = real_vector(&y_d.column(n).into_owned());
            match detector {
                TurboDetector::Oamp => oamp_detect(&y, sys, config.layers, c),
                TurboDetector::OampNet2 => oampnet2_detect(&y, sys, params, c),
            }
        })
        .collect()
}

fn hard_matrix(dets: &[DetectionResult], c: &Constellation, n_t: usize) -> CMatrix {
    CMatrix::from_fn(n_t, dets.len(), |j, n| c.point(dets[n].hard_symbols[j]))
}

/// Run `config.turbo_iters` turbo iterations on one slot. The same network
/// parameters are used in every iteration. Returns the full trajectory; the
/// final detections are in its last entry.
pub fn jcesd_run(
    y_p: &CMatrix,
    y_d: &CMatrix,
    x_p: &PilotMatrix,
    config: &SystemConfig,
    params: &NetParams,
    detector: TurboDetector,
) -> Result<Vec<TurboState>> {
    let c = make_constellation(config.mod_order)?;
    jcesd_run_with(y_p, y_d, x_p, config, params, detector, &c, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn jcesd_run_with(
    y_p: &CMatrix,
    y_d: &CMatrix,
    x_p: &PilotMatrix,
    config: &SystemConfig,
    params: &NetParams,
    detector: TurboDetector,
    c: &Constellation,
    pilot_stage: Option<&PilotStage>,
) -> Result<Vec<TurboState>> {
    config.validate()?;
    let sigma2 = config.noise_variance();
    let prior = ChannelPrior::for_config(config);
    let mut states: Vec<TurboState> = Vec::with_capacity(config.turbo_iters);
    for iter in 1..=config.turbo_iters {
        let (estimate, v_est, r_nn, detections) = match states.last() {
            None => {
                let fresh;
                let stage = match pilot_stage {
                    Some(s) => s,
                    None => {
                        fresh = PilotStage::new(y_p, x_p, config)?;
                        &fresh
                    }
                };
                let dets = detect_columns(y_d, &stage.system, config, params, detector, c)?;
                (stage.estimate.clone(), stage.v_est.clone(), None, dets)
            }
            Some(prev) => {
                let vars: Vec<Vec<f64>> = prev.detections.iter().map(|d| d.symbol_error_vars()).collect();
                let r_nn = estimation_noise_cov(&vars, sigma2, config.n_r, config.n_p)?;
                let est = lmmse_data_aided_estimate(y_p, y_d, x_p, &prev.x_det, &prior, &r_nn)?;
                let v_est = detection_noise_cov(&est, sigma2);
                let sys = MimoSystem::new(est.h_real(), v_est.real())?;
                let dets = detect_columns(y_d, &sys, config, params, detector, c)?;
                (est, v_est, Some(r_nn), dets)
            }
        };
        let x_det = hard_matrix(&detections, c, config.n_t);
        let feedback_used = r_nn.is_some();
        states.push(TurboState {
            iter,
            estimate,
            v_est,
            r_nn,
            detections,
            x_det,
            feedback_used,
        });
    }
    Ok(states)
}

/// Sum over turbo iterations and layers of `|x - x_t^(l)|^2`, averaged over
/// the data columns of the slot.
pub fn jcesd_loss(slot: &Slot, states: &[TurboState], c: &Constellation) -> f64 {
    let n_d = slot.labels.len();
    let mut total = 0.0;
    for (n, labels) in slot.labels.iter().enumerate() {
        let x = c.symbols_to_real(labels);
        for st in states {
            let traj = st.detections[n].trajectory.iter().map(|s| s.x_hat.clone());
            total += sample_l2(&x, traj, LossMode::SumLayers);
        }
    }
    total / n_d as f64
}

/// Training objective over whole slots with the summed-layer loss.
#[derive(Debug, Clone)]
pub struct JcesdObjective {
    pub config: SystemConfig,
    pub constellation: Constellation,
    pilots: PilotMatrix,
    sampler: ChannelSampler,
}

impl JcesdObjective {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        Ok(JcesdObjective {
            config: config.clone(),
            constellation: make_constellation(config.mod_order)?,
            pilots: dft_pilots(config.n_t, config.n_p)?,
            sampler: ChannelSampler::from_config(config)?,
        })
    }
}

impl Objective for JcesdObjective {
    type Sample = (Slot, PilotStage);

    fn generate(&self, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<(Slot, PilotStage)>> {
        let seed: u64 = rng.gen();
        (0..n as u64)
            .map(|i| {
                let slot = gen_slot(&self.config, &self.sampler, &self.pilots, &self.constellation, seed, i);
                let stage = PilotStage::new(&slot.y_p, &self.pilots, &self.config)?;
                Ok((slot, stage))
            })
            .collect()
    }

    fn sample_loss(&self, params: &NetParams, sample: &(Slot, PilotStage)) -> Result<f64> {
        let (slot, stage) = sample;
        let states = jcesd_run_with(
            &slot.y_p,
            &slot.y_d,
            &self.pilots,
            &self.config,
            params,
            TurboDetector::OampNet2,
            &self.constellation,
            Some(stage),
        )?;
        Ok(jcesd_loss(slot, &states, &self.constellation))
    }
}

/// Real-equivalent received data column `n` of a slot.
pub fn data_column(slot: &Slot, n: usize) -> DVector<f64> {
    real_vector(&slot.y_d.column(n).into_owned())
}

/// Sanity of the exchanged covariances: `V_est >= sigma^2` and every data
/// block of `R_nn` at least `sigma^2`.
pub fn check_covariances(state: &TurboState, sigma2: f64) -> Result<()> {
    let tol = 1e-12 * sigma2.max(1.0);
    if state.v_est.diag.iter().any(|&v| v < sigma2 - tol) {
        return Err(Error::NotPsd(sigma2));
    }
    if let Some(r) = &state.r_nn {
        if r.data_block_vars.iter().any(|&v| v < sigma2 - tol) {
            return Err(Error::NotPsd(sigma2));
        }
    }
    Ok(())
}
