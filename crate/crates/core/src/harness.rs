//! Monte Carlo BER experiments: single runs, sweeps over detectors, and
//! out-of-context (mismatch) evaluation of trained parameters.
//!
//! Slots are generated from per-slot derived seeds and evaluated in
//! parallel chunks. Counts are folded back in slot order, and a run stops at
//! the first slot where the error target is met, so results do not depend
//! on chunk size or thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{detection_noise_cov, dft_pilots, lmmse_pilot_estimate, ChannelPrior, PilotMatrix};
use crate::detect::{
    lmmse_detect, ml_detect, oamp_detect, oampnet2_detect, MimoSystem, MlDetector, NetParams, ParamsMeta,
};
use crate::error::{Error, Result};
use crate::jcesd::{data_column, gen_slot, jcesd_run_with, Slot, TurboDetector};
use crate::model::{gen_iid_rayleigh, real_matrix, ChannelSampler, SystemConfig};
use crate::modem::{make_constellation, Constellation};
use crate::rng::{substream, Stream};
use crate::train::{check_meta, CsiMode, MetaPolicy};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Lmmse,
    Oamp,
    OampNet2,
    Ml,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Lmmse => "lmmse",
            DetectorKind::Oamp => "oamp",
            DetectorKind::OampNet2 => "oampnet2",
            DetectorKind::Ml => "ml",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lmmse" => Ok(DetectorKind::Lmmse),
            "oamp" => Ok(DetectorKind::Oamp),
            "oampnet2" | "oamp-net2" => Ok(DetectorKind::OampNet2),
            "ml" => Ok(DetectorKind::Ml),
            other => Err(Error::Config(format!("unknown detector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    /// Network parameters; `None` runs OAMP-Net2 with `(1, 1, 0, 1)`.
    pub params: Option<NetParams>,
    pub params_id: String,
    pub csi: CsiMode,
}

impl DetectorSpec {
    pub fn new(kind: DetectorKind, csi: CsiMode) -> Self {
        DetectorSpec {
            kind,
            params: None,
            params_id: "default".into(),
            csi,
        }
    }

    pub fn with_params(mut self, params: NetParams, id: impl Into<String>) -> Self {
        self.params = Some(params);
        self.params_id = id.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_bits: u64,
    /// Keep per-slot error counts in the report.
    pub record_slots: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            min_errors: 10_000,
            max_bits: 100_000_000,
            record_slots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub snr_db: f64,
    pub bits_sent: u64,
    pub bit_errors: u64,
    pub ber: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub wall_time_s: f64,
    /// Stopped by `max_bits` before reaching `min_errors`.
    pub capped: bool,
    pub slots: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_errors: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub config: SystemConfig,
    pub detector: DetectorKind,
    pub csi: CsiMode,
    pub params_id: String,
    /// Context the parameters were trained in, when it differs from the test.
    pub train_context: Option<ParamsMeta>,
    pub test_context: ParamsMeta,
    pub rows: Vec<BerRow>,
    pub seed: u64,
}

impl BerReport {
    pub fn row(&self, snr_db: f64) -> Option<&BerRow> {
        self.rows.iter().find(|r| r.snr_db == snr_db)
    }

    pub fn snr_at_ber(&self, target: f64) -> Option<f64> {
        snr_at_ber(&self.rows, target)
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_ci(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// SNR where the BER curve crosses `target`, interpolating `log10(ber)`
/// linearly between the first bracketing pair of grid points.
pub fn snr_at_ber(rows: &[BerRow], target: f64) -> Option<f64> {
    let mut sorted: Vec<&BerRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.ber >= target && b.ber <= target && a.ber > 0.0 && b.ber > 0.0 {
            let (la, lb, lt) = (a.ber.log10(), b.ber.log10(), target.log10());
            if la == lb {
                return Some(a.snr_db);
            }
            return Some(a.snr_db + (b.snr_db - a.snr_db) * (la - lt) / (la - lb));
        }
    }
    None
}

/// Everything needed to evaluate slots of one (config, detector) pair.
struct Evaluator<'a> {
    config: SystemConfig,
    spec: &'a DetectorSpec,
    params: NetParams,
    c: Constellation,
    sampler: ChannelSampler,
    pilots: PilotMatrix,
    prior: ChannelPrior,
}

impl<'a> Evaluator<'a> {
    fn new(config: &SystemConfig, spec: &'a DetectorSpec) -> Result<Self> {
        config.validate()?;
        let params = spec.params.clone().unwrap_or_else(|| NetParams::default_for(config));
        if spec.kind == DetectorKind::OampNet2 && params.depth() != config.layers {
            return Err(Error::ParamsMismatch(format!(
                "parameters have T={} layers, run needs T={}",
                params.depth(),
                config.layers
            )));
        }
        let c = make_constellation(config.mod_order)?;
        if spec.kind == DetectorKind::Ml {
            let count = (c.order() as u128).pow(config.n_t as u32);
            if count > crate::detect::ML_MAX_CANDIDATES {
                return Err(Error::EnumerationTooLarge(count));
            }
        }
        Ok(Evaluator {
            config: config.clone(),
            spec,
            params,
            sampler: ChannelSampler::from_config(config)?,
            pilots: dft_pilots(config.n_t, config.n_p)?,
            prior: ChannelPrior::for_config(config),
            c,
        })
    }

    fn slot(&self, index: u64) -> Slot {
        gen_slot(
            &self.config,
            &self.sampler,
            &self.pilots,
            &self.c,
            self.config.seed,
            index,
        )
    }

    /// Hard labels for every data column of a slot.
    fn detect_slot(&self, slot: &Slot) -> Result<Vec<Vec<usize>>> {
        let cfg = &self.config;
        let n_d = cfg.n_d;
        let sigma2 = cfg.noise_variance();
        let turbo = |det| -> Result<Vec<Vec<usize>>> {
            let states = jcesd_run_with(
                &slot.y_p,
                &slot.y_d,
                &self.pilots,
                cfg,
                &self.params,
                det,
                &self.c,
                None,
            )?;
            Ok(states.last().expect("turbo_iters >= 1").hard_labels())
        };
        let (h, cov) = match self.spec.csi {
            CsiMode::Perfect => (
                slot.h.to_real(),
                DMatrix::identity(2 * cfg.n_r, 2 * cfg.n_r).scale(sigma2 / 2.0),
            ),
            CsiMode::Estimated => match self.spec.kind {
                DetectorKind::Oamp => return turbo(TurboDetector::Oamp),
                DetectorKind::OampNet2 => return turbo(TurboDetector::OampNet2),
                DetectorKind::Lmmse | DetectorKind::Ml => {
                    let est = lmmse_pilot_estimate(&slot.y_p, &self.pilots, &self.prior, sigma2)?;
                    (real_matrix(&est.h_matrix()), detection_noise_cov(&est, sigma2).real())
                }
            },
        };
        if self.spec.kind == DetectorKind::Ml {
            let ml = MlDetector::new(&h, &self.c, cfg.n_t)?;
            return Ok((0..n_d).map(|n| ml.detect(&data_column(slot, n))).collect());
        }
        let sys = MimoSystem::new(h, cov)?;
        (0..n_d)
            .map(|n| {
                let y = data_column(slot, n);
                let res = match self.spec.kind {
                    DetectorKind::Lmmse => lmmse_detect(&y, &sys, &self.c)?,
                    DetectorKind::Oamp => oamp_detect(&y, &sys, cfg.layers, &self.c)?,
                    DetectorKind::OampNet2 => oampnet2_detect(&y, &sys, &self.params, &self.c)?,
                    DetectorKind::Ml => unreachable!(),
                };
                Ok(res.hard_symbols)
            })
            .collect()
    }

    fn slot_errors(&self, index: u64) -> Result<u32> {
        let slot = self.slot(index);
        let detected = self.detect_slot(&slot)?;
        Ok(slot
            .labels
            .iter()
            .zip(&detected)
            .flat_map(|(tx, rx)| tx.iter().zip(rx))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }

    fn bits_per_slot(&self) -> u64 {
        (self.config.n_d * self.config.n_t * self.c.bits_per_symbol()) as u64
    }
}

fn run_point(config: &SystemConfig, spec: &DetectorSpec, stop: &StopRule) -> Result<BerRow> {
    let start = Instant::now();
    let ev = Evaluator::new(config, spec)?;
    let bits_per_slot = ev.bits_per_slot();
    let max_slots = stop.max_bits / bits_per_slot;
    let mut errors = 0u64;
    let mut slots = 0u64;
    let mut per_slot = stop.record_slots.then(Vec::new);
    'outer: while slots < max_slots && errors < stop.min_errors {
        let end = (slots + CHUNK as u64).min(max_slots);
        let counts: Vec<u32> = (slots..end)
            .into_par_iter()
            .map(|i| ev.slot_errors(i))
            .collect::<Result<_>>()?;
        for e in counts {
            errors += e as u64;
            slots += 1;
            if let Some(v) = per_slot.as_mut() {
                v.push(e);
            }
            if errors >= stop.min_errors {
                break 'outer;
            }
        }
    }
    let bits_sent = slots * bits_per_slot;
    let (wilson_lo, wilson_hi) = wilson_ci(errors, bits_sent, Z95);
    Ok(BerRow {
        snr_db: config.snr_db,
        bits_sent,
        bit_errors: errors,
        ber: if bits_sent > 0 {
            errors as f64 / bits_sent as f64
        } else {
            0.0
        },
        wilson_lo,
        wilson_hi,
        wall_time_s: start.elapsed().as_secs_f64(),
        capped: errors < stop.min_errors,
        slots,
        slot_errors: per_slot,
    })
}

/// BER of one detector over an SNR list. Every SNR point reuses the same
/// slot seeds (channels and payload), only the noise power changes.
pub fn run_ber(config: &SystemConfig, spec: &DetectorSpec, snr_list: &[f64], stop: &StopRule) -> Result<BerReport> {
    if snr_list.is_empty() {
        return Err(Error::Config("empty SNR list".into()));
    }
    let mut rows = Vec::with_capacity(snr_list.len());
    for &snr in snr_list {
        let row = run_point(&config.with_snr(snr), spec, stop)?;
        log::info!(
            "{} snr={snr} ber={:.4e} errors={} bits={}{}",
            spec.kind.name(),
            row.ber,
            row.bit_errors,
            row.bits_sent,
            if row.capped { " (capped)" } else { "" }
        );
        rows.push(row);
    }
    let train_context = spec
        .params
        .as_ref()
        .map(|p| p.meta.clone())
        .filter(|m| *m != ParamsMeta::from_config(config));
    Ok(BerReport {
        config: config.clone(),
        detector: spec.kind,
        csi: spec.csi,
        params_id: spec.params_id.clone(),
        train_context,
        test_context: ParamsMeta::from_config(config),
        rows,
        seed: config.seed,
    })
}

/// Several detectors over the same SNR list and slot seeds.
pub fn run_sweep(
    config: &SystemConfig,
    specs: &[DetectorSpec],
    snr_list: &[f64],
    stop: &StopRule,
) -> Result<Vec<BerReport>> {
    specs.iter().map(|s| run_ber(config, s, snr_list, stop)).collect()
}

/// Evaluate one trained parameter set in other contexts (SNR, correlation,
/// geometry, modulation). The layer count must match, the rest is logged.
pub fn run_mismatch(
    params: &NetParams,
    params_id: &str,
    tests: &[(SystemConfig, Vec<f64>)],
    csi: CsiMode,
    stop: &StopRule,
) -> Result<Vec<BerReport>> {
    let mut out = Vec::with_capacity(tests.len());
    for (config, snrs) in tests {
        check_meta(params, &ParamsMeta::from_config(config), MetaPolicy::AllowMismatch)?;
        let spec = DetectorSpec::new(DetectorKind::OampNet2, csi).with_params(params.clone(), params_id);
        let mut report = run_ber(config, &spec, snrs, stop)?;
        report.train_context = Some(params.meta.clone());
        out.push(report);
    }
    Ok(out)
}

fn context_key(m: &ParamsMeta) -> String {
    format!(
        "snr={} rho={} M={} nt={} nr={} T={} L={}",
        m.snr_db, m.rho, m.mod_order, m.n_t, m.n_r, m.layers, m.turbo_iters
    )
}

pub fn results_csv(reports: &[BerReport]) -> String {
    let mut out = String::from(
        "detector,csi,params,train_context,test_context,snr_db,bits_sent,bit_errors,ber,wilson_lo,wilson_hi,wall_time_s,capped\n",
    );
    for rep in reports {
        let train = rep.train_context.as_ref().map(context_key).unwrap_or_default();
        let csi = match rep.csi {
            CsiMode::Perfect => "perfect",
            CsiMode::Estimated => "estimated",
        };
        for r in &rep.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.3},{}",
                rep.detector.name(),
                csi,
                rep.params_id,
                train,
                context_key(&rep.test_context),
                r.snr_db,
                r.bits_sent,
                r.bit_errors,
                r.ber,
                r.wilson_lo,
                r.wilson_hi,
                r.wall_time_s,
                r.capped
            );
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    stop: &'a StopRule,
    reports: &'a [BerReport],
}

/// Write `results.csv` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, command: &str, stop: &StopRule, reports: &[BerReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(reports))?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        stop,
        reports,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Per-layer diagnostics of one slot:
/// `turbo,column,layer,v2,tau2,decorrelation,sq_error`.
pub fn trajectory_csv(config: &SystemConfig, spec: &DetectorSpec, slot_index: u64) -> Result<String> {
    let ev = Evaluator::new(config, spec)?;
    let det = match spec.kind {
        DetectorKind::Oamp => TurboDetector::Oamp,
        DetectorKind::OampNet2 => TurboDetector::OampNet2,
        other => return Err(Error::Config(format!("no layer trajectory for {}", other.name()))),
    };
    let slot = ev.slot(slot_index);
    let mut out = String::from("turbo,column,layer,v2,tau2,decorrelation,sq_error\n");
    let mut write_traj = |l: usize, n: usize, traj: &[crate::detect::DetectorState]| {
        let x = ev.c.symbols_to_real(&slot.labels[n]);
        for (t, st) in traj.iter().enumerate() {
            let _ = writeln!(
                out,
                "{l},{n},{},{:.6e},{:.6e},{:.3e},{:.6e}",
                t + 1,
                st.v2,
                st.tau2,
                st.decorrelation,
                (&x - &st.x_hat).norm_squared()
            );
        }
    };
    match spec.csi {
        CsiMode::Estimated => {
            let states = jcesd_run_with(
                &slot.y_p, &slot.y_d, &ev.pilots, &ev.config, &ev.params, det, &ev.c, None,
            )?;
            for st in &states {
                for (n, d) in st.detections.iter().enumerate() {
                    write_traj(st.iter, n, &d.trajectory);
                }
            }
        }
        CsiMode::Perfect => {
            let sys = MimoSystem::new(
                slot.h.to_real(),
                DMatrix::identity(2 * config.n_r, 2 * config.n_r).scale(config.noise_variance() / 2.0),
            )?;
            for n in 0..config.n_d {
                let y = data_column(&slot, n);
                let d = match det {
                    TurboDetector::Oamp => oamp_detect(&y, &sys, config.layers, &ev.c)?,
                    TurboDetector::OampNet2 => oampnet2_detect(&y, &sys, &ev.params, &ev.c)?,
                };
                write_traj(1, n, &d.trajectory);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfTestOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick run of the structural invariants: default-parameter reduction,
/// decorrelation, ML against a reversed enumeration.
pub fn selftest(seed: u64) -> Result<Vec<SelfTestOutcome>> {
    let mut out = Vec::new();

    let mut worst_red: f64 = 0.0;
    let mut worst_dec: f64 = 0.0;
    for (k, (n, m)) in [(4, 4), (4, 16), (8, 4), (8, 16)].into_iter().enumerate() {
        let cfg = SystemConfig {
            n_t: n,
            n_r: n,
            n_p: n,
            mod_order: m,
            snr_db: 15.0,
            ..Default::default()
        };
        let c = make_constellation(m)?;
        let params = NetParams::default_for(&cfg);
        let mut rng = substream(seed, Stream::Detection, k as u64);
        for _ in 0..25 {
            let h = gen_iid_rayleigh(n, n, &mut rng).to_real();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let noise = crate::model::real_vector(
                &crate::model::complex_gaussian_matrix(n, 1, cfg.noise_variance(), &mut rng)
                    .column(0)
                    .into_owned(),
            );
            let y = &h * c.symbols_to_real(&labels) + noise;
            let sys = MimoSystem::new(h, DMatrix::identity(2 * n, 2 * n).scale(cfg.noise_variance() / 2.0))?;
            let a = oamp_detect(&y, &sys, cfg.layers, &c)?;
            let b = oampnet2_detect(&y, &sys, &params, &c)?;
            for (sa, sb) in a.trajectory.iter().zip(&b.trajectory) {
                worst_red = worst_red.max((&sa.x_hat - &sb.x_hat).amax());
                worst_dec = worst_dec.max(sb.decorrelation.abs());
            }
        }
    }
    out.push(SelfTestOutcome {
        name: "reduction",
        passed: worst_red <= 1e-12,
        detail: format!("max |oamp - oampnet2(default)| = {worst_red:.3e}"),
    });
    out.push(SelfTestOutcome {
        name: "decorrelation",
        passed: worst_dec <= 1e-9,
        detail: format!("max |tr(I - W H)| = {worst_dec:.3e}"),
    });

    let c = make_constellation(4)?;
    let mut rng = substream(seed, Stream::Detection, 100);
    let mut mismatches = 0;
    for _ in 0..500 {
        let h = gen_iid_rayleigh(2, 2, &mut rng).to_real();
        let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..4)).collect();
        let noise = crate::model::real_vector(
            &crate::model::complex_gaussian_matrix(2, 1, 0.3, &mut rng)
                .column(0)
                .into_owned(),
        );
        let y = &h * c.symbols_to_real(&labels) + noise;
        let fast = ml_detect(&y, &h, &c, 2)?;
        let mut best = (f64::INFINITY, vec![0, 0]);
        for k in (0..16).rev() {
            let cand = vec![k / 4, k % 4];
            let d = (&y - &h * c.symbols_to_real(&cand)).norm_squared();
            if d <= best.0 {
                best = (d, cand);
            }
        }
        if fast != best.1 {
            mismatches += 1;
        }
    }
    out.push(SelfTestOutcome {
        name: "ml-enumeration",
        passed: mismatches == 0,
        detail: format!("{mismatches} of 500 instances differ from reversed enumeration"),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChannelModel;

    #[test]
    fn wilson_known_values() {
        let (lo, hi) = wilson_ci(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036994).abs() < 1e-5);
        let (lo, hi) = wilson_ci(50, 100, Z95);
        assert!((lo - 0.403832).abs() < 1e-5 && (hi - 0.596168).abs() < 1e-5);
    }

    #[test]
    fn snr_interpolation() {
        let row = |s: f64, b: f64| BerRow {
            snr_db: s,
            bits_sent: 1,
            bit_errors: 0,
            ber: b,
            wilson_lo: 0.0,
            wilson_hi: 1.0,
            wall_time_s: 0.0,
            capped: false,
            slots: 1,
            slot_errors: None,
        };
        let rows = vec![row(10.0, 1e-1), row(0.0, 1.0), row(20.0, 1e-3)];
        assert!((snr_at_ber(&rows, 1e-2).unwrap() - 15.0).abs() < 1e-12);
        assert!(snr_at_ber(&rows, 1e-5).is_none());
    }

    #[test]
    fn noiseless_identity_ml_hits_cap() {
        let cfg = SystemConfig {
            channel: ChannelModel::Identity,
            snr_db: 300.0,
            ..Default::default()
        };
        let stop = StopRule {
            min_errors: 10,
            max_bits: 10_000,
            record_slots: true,
        };
        let rep = run_ber(
            &cfg,
            &DetectorSpec::new(DetectorKind::Ml, CsiMode::Perfect),
            &[300.0],
            &stop,
        )
        .unwrap();
        let r = &rep.rows[0];
        assert_eq!(r.ber, 0.0);
        assert!(r.capped);
        assert_eq!(r.bits_sent, (10_000 / 96) * 96);
        assert_eq!(r.slot_errors.as_ref().unwrap().len() as u64, r.slots);
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let cfg = SystemConfig::default();
        let params = NetParams::default_for(&SystemConfig {
            layers: 10,
            ..cfg.clone()
        });
        let res = run_mismatch(
            &params,
            "p",
            &[(cfg, vec![10.0])],
            CsiMode::Perfect,
            &StopRule::default(),
        );
        assert!(matches!(res, Err(Error::ParamsMismatch(_))));
    }

    #[test]
    fn selftest_passes() {
        assert!(selftest(1).unwrap().iter().all(|o| o.passed));
    }
}
