//! Training of the OAMP-Net2 scalars: dataset generation, l2 losses,
//! central finite-difference gradients, Adam, and the parameter file format.
//!
//! Gradients are taken by finite differences over the `4T` scalars. Every
//! probe of one gradient evaluation sees the same mini-batch, so the
//! difference quotients are free of sampling noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{
    detection_noise_cov, dft_pilots, lmmse_pilot_estimate, ChannelEstimate, ChannelPrior, DetectionNoiseCov,
    PilotMatrix,
};
use crate::detect::{oampnet2_detect, MimoSystem, NetParams, ParamsMeta};
use crate::error::{Error, Result};
use crate::model::{complex_gaussian_matrix, real_matrix, real_vector, ChannelSampler, SystemConfig};
use crate::modem::{make_constellation, Constellation};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    Perfect,
    /// Pilot-only LMMSE estimate with the matching equivalent-noise covariance.
    Estimated,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub labels: Vec<usize>,
    pub x_true: DVector<f64>,
    pub y: DVector<f64>,
    pub h_true: DMatrix<f64>,
    pub noise: DVector<f64>,
    /// Channel and noise covariance the detector works with.
    pub system: MimoSystem,
    pub estimate: Option<ChannelEstimate>,
    pub v_est: Option<DetectionNoiseCov>,
}

/// Draw `n` independent samples: fresh channel, symbols and noise each.
pub fn gen_dataset(config: &SystemConfig, n: usize, rng: &mut ChaCha8Rng, csi: CsiMode) -> Result<Vec<Sample>> {
    config.validate()?;
    let c = make_constellation(config.mod_order)?;
    let sampler = ChannelSampler::from_config(config)?;
    let sigma2 = config.noise_variance();
    let pilots = match csi {
        CsiMode::Estimated => Some(dft_pilots(config.n_t, config.n_p)?),
        CsiMode::Perfect => None,
    };
    let prior = ChannelPrior::for_config(config);
    (0..n)
        .map(|_| draw_sample(config, &c, &sampler, sigma2, pilots.as_ref(), &prior, rng))
        .collect()
}

fn draw_sample(
    config: &SystemConfig,
    c: &Constellation,
    sampler: &ChannelSampler,
    sigma2: f64,
    pilots: Option<&PilotMatrix>,
    prior: &ChannelPrior,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let h = sampler.sample(rng);
    let labels: Vec<usize> = (0..config.n_t).map(|_| rng.gen_range(0..c.order())).collect();
    let x_true = c.symbols_to_real(&labels);
    let noise = real_vector(
        &complex_gaussian_matrix(config.n_r, 1, sigma2, rng)
            .column(0)
            .into_owned(),
    );
    let h_true = h.to_real();
    let y = &h_true * &x_true + &noise;
    let (system, estimate, v_est) = match pilots {
        None => {
            let cov = DMatrix::identity(2 * config.n_r, 2 * config.n_r).scale(sigma2 / 2.0);
            (MimoSystem::new(h_true.clone(), cov)?, None, None)
        }
        Some(xp) => {
            let y_p = &h.0 * &xp.0 + complex_gaussian_matrix(config.n_r, config.n_p, sigma2, rng);
            let est = lmmse_pilot_estimate(&y_p, xp, prior, sigma2)?;
            let v_est = detection_noise_cov(&est, sigma2);
            let sys = MimoSystem::new(real_matrix(&est.h_matrix()), v_est.real())?;
            (sys, Some(est), Some(v_est))
        }
    };
    Ok(Sample {
        labels,
        x_true,
        y,
        h_true,
        noise,
        system,
        estimate,
        v_est,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `|x - x_{T+1}|^2`.
    Final,
    /// Sum of `|x - x_{t+1}|^2` over all layers.
    SumLayers,
}

/// Loss of one detection problem given its layer outputs.
pub fn sample_l2(x_true: &DVector<f64>, outputs: impl IntoIterator<Item = DVector<f64>>, mode: LossMode) -> f64 {
    let outs: Vec<_> = outputs.into_iter().collect();
    match mode {
        LossMode::Final => outs.last().map_or(0.0, |x| (x_true - x).norm_squared()),
        LossMode::SumLayers => outs.iter().map(|x| (x_true - x).norm_squared()).sum(),
    }
}

/// Mean l2 loss of the network over a batch.
pub fn l2_loss(batch: &[Sample], params: &NetParams, c: &Constellation, mode: LossMode) -> Result<f64> {
    let obj = DetectionObjective {
        config: None,
        csi: CsiMode::Perfect,
        mode,
        constellation: c.clone(),
    };
    batch_loss(&obj, params, batch)
}

/// Something the trainer can minimize: a sample generator plus a per-sample
/// loss of the network parameters.
pub trait Objective: Sync {
    type Sample: Send + Sync;

    fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Self::Sample>>;

    fn sample_loss(&self, params: &NetParams, sample: &Self::Sample) -> Result<f64>;
}

/// Mean of the per-sample losses. Summation order is fixed so the result is
/// reproducible regardless of thread scheduling.
pub fn batch_loss<O: Objective>(obj: &O, params: &NetParams, batch: &[O::Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| obj.sample_loss(params, s))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Per-vector detection objective.
#[derive(Debug, Clone)]
pub struct DetectionObjective {
    /// Generator configuration; `None` for evaluation-only use.
    pub config: Option<SystemConfig>,
    pub csi: CsiMode,
    pub mode: LossMode,
    pub constellation: Constellation,
}

impl DetectionObjective {
    pub fn new(config: &SystemConfig, csi: CsiMode, mode: LossMode) -> Result<Self> {
        Ok(DetectionObjective {
            config: Some(config.clone()),
            csi,
            mode,
            constellation: make_constellation(config.mod_order)?,
        })
    }
}

impl Objective for DetectionObjective {
    type Sample = Sample;

    fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let config = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("objective has no generator configuration".into()))?;
        gen_dataset(config, n, rng, self.csi)
    }

    fn sample_loss(&self, params: &NetParams, s: &Sample) -> Result<f64> {
        let res = oampnet2_detect(&s.y, &s.system, params, &self.constellation)?;
        Ok(sample_l2(
            &s.x_true,
            res.trajectory.into_iter().map(|st| st.x_hat),
            self.mode,
        ))
    }
}

/// Central differences `(L(w + h e_k) - L(w - h e_k)) / 2h` with
/// `h = fd_step * max(|w_k|, 1)`. Returns `(L(w), gradient)`.
///
/// A non-finite probe shrinks `h` by 10x once before failing.
pub fn fd_gradient<F>(loss: F, point: &[f64], fd_step: f64) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64,
{
    let base = loss(point);
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let mut h = fd_step * point[k].abs().max(1.0);
        let mut attempt = 0;
        let g = loop {
            probe[k] = point[k] + h;
            let up = loss(&probe);
            probe[k] = point[k] - h;
            let down = loss(&probe);
            probe[k] = point[k];
            let g = (up - down) / (2.0 * h);
            if g.is_finite() {
                break g;
            }
            attempt += 1;
            if attempt > 1 {
                return Err(Error::NonFiniteGradient { index: k });
            }
            h /= 10.0;
        };
        grad.push(g);
    }
    Ok((base, grad))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub validation_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fd_step: f64,
    pub loss: LossMode,
}

impl TrainConfig {
    /// Full schedule: 1000 epochs of 5000 samples, batch 100, lr 1e-3
    /// (1e-4 and 10000 validation samples from 30 dB up).
    pub fn full(snr_db: f64) -> Self {
        let high = snr_db >= 30.0;
        TrainConfig {
            epochs: 1000,
            samples_per_epoch: 5000,
            validation_size: if high { 10_000 } else { 1000 },
            batch_size: 100,
            learning_rate: if high { 1e-4 } else { 1e-3 },
            fd_step: 1e-5,
            loss: LossMode::Final,
        }
    }

    /// Desk-scale schedule: same batch size and learning rate, fewer epochs.
    pub fn desk(snr_db: f64, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            ..Self::full(snr_db)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.samples_per_epoch == 0
            || self.validation_size == 0
            || self.batch_size == 0
            || !(self.fd_step > 0.0)
            || !(self.learning_rate >= 0.0)
        {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Validation loss of the initial parameters (epoch 0).
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub best_params: NetParams,
    pub final_params: NetParams,
    pub wall_time: f64,
}

/// Adam on an arbitrary objective. Epoch 0 (the initial parameters) takes
/// part in the best-on-validation selection.
pub fn train_objective<O: Objective>(obj: &O, init: &NetParams, tcfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    tcfg.validate()?;
    let start = Instant::now();
    let validation = obj.generate(tcfg.validation_size, &mut substream(seed, Stream::Validation, 0))?;
    let initial_val_loss = batch_loss(obj, init, &validation)?;
    let mut best = (initial_val_loss, 0, init.clone());
    let mut values = init.to_vec();
    let mut adam = Adam::new(values.len(), tcfg.learning_rate);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut blowups = 0;
    for epoch in 1..=tcfg.epochs {
        let train = obj.generate(
            tcfg.samples_per_epoch,
            &mut substream(seed, Stream::Train, epoch as u64),
        )?;
        let mut train_loss = 0.0;
        let mut batches = 0;
        for batch in train.chunks(tcfg.batch_size) {
            let (base, grad) = fd_gradient(
                |v| batch_loss(obj, &init.with_values(v), batch).unwrap_or(f64::NAN),
                &values,
                tcfg.fd_step,
            )?;
            train_loss += base;
            batches += 1;
            adam.step(&mut values, &grad);
        }
        let params = init.with_values(&values);
        let val_loss = batch_loss(obj, &params, &validation).unwrap_or(f64::INFINITY);
        history.push(EpochRecord {
            epoch,
            train_loss: train_loss / batches as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: train {:.6} val {val_loss:.6}",
            train_loss / batches as f64
        );
        if val_loss < best.0 {
            best = (val_loss, epoch, params);
        }
        if !(val_loss <= 10.0 * initial_val_loss) {
            blowups += 1;
            if blowups >= 3 {
                return Err(Error::Diverged { epoch, val_loss });
            }
        } else {
            blowups = 0;
        }
    }
    Ok(TrainReport {
        history,
        initial_val_loss,
        best_val_loss: best.0,
        best_epoch: best.1,
        best_params: best.2,
        final_params: init.with_values(&values),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Train OAMP-Net2 for one configuration, starting from `(1, 1, 0, 1)`.
pub fn adam_train(config: &SystemConfig, tcfg: &TrainConfig, csi: CsiMode) -> Result<TrainReport> {
    let obj = DetectionObjective::new(config, csi, tcfg.loss)?;
    train_objective(&obj, &NetParams::default_for(config), tcfg, config.seed)
}

/// `epoch,train_loss,val_loss,seconds`; epoch 0 carries the initial
/// validation loss and an empty training loss.
pub fn training_log_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
    let _ = writeln!(out, "0,,{:.17e},0", report.initial_val_loss);
    for r in &report.history {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.3}",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    }
    out
}

const PARAMS_HEADER: &str = "oampnet2-params v1";

/// Whether a parameter file trained in another context may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaPolicy {
    Strict,
    /// Mismatches are logged; only the layer count must agree.
    AllowMismatch,
}

pub fn params_to_string(params: &NetParams) -> String {
    let m = &params.meta;
    let mut out = format!("{PARAMS_HEADER}\n");
    let _ = writeln!(
        out,
        "snr_db={} rho={} M={} nt={} nr={} T={} L={}",
        m.snr_db,
        m.rho,
        m.mod_order,
        m.n_t,
        m.n_r,
        params.depth(),
        m.turbo_iters
    );
    for (t, l) in params.layers.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} {:.16e} {:.16e} {:.16e} {:.16e}",
            t + 1,
            l.gamma,
            l.phi,
            l.xi,
            l.theta
        );
    }
    out
}

pub fn save_params(path: &Path, params: &NetParams) -> Result<()> {
    fs::write(path, params_to_string(params))?;
    Ok(())
}

pub fn parse_params(text: &str, path: &Path) -> Result<NetParams> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == PARAMS_HEADER => {}
        Some((n, l)) => return Err(err(n, format!("expected header `{PARAMS_HEADER}`, found `{l}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let (meta_line, meta_text) = lines.next().ok_or_else(|| err(2, "missing meta line".into()))?;
    let mut fields = std::collections::HashMap::new();
    for kv in meta_text.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(meta_line, format!("malformed meta field `{kv}`")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| err(meta_line, format!("missing meta key `{key}`")))
    };
    let float = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| err(meta_line, format!("bad value for `{key}`")))
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| err(meta_line, format!("bad value for `{key}`")))
    };
    let meta = ParamsMeta {
        snr_db: float("snr_db")?,
        rho: float("rho")?,
        mod_order: int("M")?,
        n_t: int("nt")?,
        n_r: int("nr")?,
        layers: int("T")?,
        turbo_iters: int("L")?,
    };
    let mut layers = Vec::with_capacity(meta.layers);
    for (n, l) in lines {
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(err(
                n,
                format!("expected `t gamma phi xi theta`, found {} fields", parts.len()),
            ));
        }
        let t: usize = parts[0]
            .parse()
            .map_err(|_| err(n, format!("bad layer index `{}`", parts[0])))?;
        if t != layers.len() + 1 {
            return Err(err(n, format!("layer index {t} out of order")));
        }
        let mut v = [0.0f64; 4];
        for (slot, s) in v.iter_mut().zip(&parts[1..]) {
            *slot = s.parse().map_err(|_| err(n, format!("bad number `{s}`")))?;
            if !slot.is_finite() {
                return Err(err(n, format!("non-finite value `{s}`")));
            }
        }
        layers.push(crate::detect::LayerParams::from_array(v));
    }
    if layers.len() != meta.layers || layers.is_empty() {
        return Err(err(
            0,
            format!("meta says T={} but {} layer lines found", meta.layers, layers.len()),
        ));
    }
    Ok(NetParams { layers, meta })
}

/// Fields in which two training contexts differ.
pub fn meta_differences(a: &ParamsMeta, b: &ParamsMeta) -> Vec<String> {
    let mut diffs = Vec::new();
    let mut cmp = |name: &str, x: String, y: String| {
        if x != y {
            diffs.push(format!("{name}: {x} vs {y}"));
        }
    };
    cmp("snr_db", a.snr_db.to_string(), b.snr_db.to_string());
    cmp("rho", a.rho.to_string(), b.rho.to_string());
    cmp("M", a.mod_order.to_string(), b.mod_order.to_string());
    cmp("nt", a.n_t.to_string(), b.n_t.to_string());
    cmp("nr", a.n_r.to_string(), b.n_r.to_string());
    cmp("T", a.layers.to_string(), b.layers.to_string());
    cmp("L", a.turbo_iters.to_string(), b.turbo_iters.to_string());
    diffs
}

/// Load a parameter file and check it against the requested context.
pub fn load_params(path: &Path, requested: Option<&ParamsMeta>, policy: MetaPolicy) -> Result<NetParams> {
    let params = parse_params(&fs::read_to_string(path)?, path)?;
    if let Some(req) = requested {
        check_meta(&params, req, policy)?;
    }
    Ok(params)
}

pub fn check_meta(params: &NetParams, requested: &ParamsMeta, policy: MetaPolicy) -> Result<()> {
    if params.depth() != requested.layers {
        return Err(Error::ParamsMismatch(format!(
            "file has T={} layers, run needs T={}",
            params.depth(),
            requested.layers
        )));
    }
    let diffs = meta_differences(&params.meta, requested);
    if !diffs.is_empty() {
        match policy {
            MetaPolicy::Strict => return Err(Error::ParamsMismatch(diffs.join(", "))),
            MetaPolicy::AllowMismatch => log::warn!("using parameters out of context: {}", diffs.join(", ")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::LayerParams;

    #[test]
    fn fd_gradient_of_quadratic() {
        let c = [0.3, -1.2, 4.0];
        let loss = |w: &[f64]| w.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let point = [1.0, 2.0, -3.0];
        let (base, g) = fd_gradient(loss, &point, 1e-5).unwrap();
        assert_eq!(base, loss(&point));
        for k in 0..3 {
            let want = 2.0 * (point[k] - c[k]);
            assert!(((g[k] - want) / want).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_gradient_non_finite_fails() {
        let loss = |w: &[f64]| if w[0] != 0.0 { f64::NAN } else { 0.0 };
        assert!(matches!(
            fd_gradient(loss, &[0.0], 1e-3),
            Err(Error::NonFiniteGradient { index: 0 })
        ));
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut adam = Adam::new(1, 0.1);
        let mut x = [5.0];
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 1.0)];
            adam.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn params_round_trip_is_exact() {
        let cfg = SystemConfig {
            layers: 3,
            snr_db: 12.5,
            rho: 0.3,
            ..Default::default()
        };
        let mut p = NetParams::default_for(&cfg);
        p.layers[1] = LayerParams {
            gamma: 0.1 + 0.2,
            phi: 1.0 / 3.0,
            xi: -2e-17,
            theta: std::f64::consts::PI,
        };
        let q = parse_params(&params_to_string(&p), Path::new("mem")).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_params_report_line() {
        let text = "oampnet2-params v1\nsnr_db=1 rho=0 M=4 nt=4 nr=4 T=1 L=1\n1 1.0 abc 0 1\n";
        match parse_params(text, Path::new("p.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "oampnet2-params v2\n";
        assert!(matches!(
            parse_params(text, Path::new("p")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn meta_policy() {
        let cfg8 = SystemConfig {
            n_t: 8,
            n_r: 8,
            n_p: 8,
            ..Default::default()
        };
        let p = NetParams::default_for(&cfg8);
        let req4 = ParamsMeta::from_config(&SystemConfig::default());
        assert!(check_meta(&p, &req4, MetaPolicy::Strict).is_err());
        assert!(check_meta(&p, &req4, MetaPolicy::AllowMismatch).is_ok());
        let req_t10 = ParamsMeta { layers: 10, ..req4 };
        assert!(check_meta(&p, &req_t10, MetaPolicy::AllowMismatch).is_err());
    }

    #[test]
    fn sum_layers_with_one_layer_equals_final() {
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let outs = vec![DVector::from_vec(vec![0.5, 0.0])];
        assert_eq!(
            sample_l2(&x, outs.clone(), LossMode::Final),
            sample_l2(&x, outs, LossMode::SumLayers)
        );
    }
}
