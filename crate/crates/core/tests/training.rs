use nalgebra::DVector;
use oampnet::detect::{oamp_detect, oampnet2_detect, NetParams};
use oampnet::model::SystemConfig;
use oampnet::modem::make_constellation;
use oampnet::rng::{substream, Stream};
use oampnet::train::{
    adam_train, batch_loss, fd_gradient, gen_dataset, l2_loss, CsiMode, DetectionObjective, LossMode, Sample,
    TrainConfig,
};

fn batch(cfg: &SystemConfig, n: usize, seed: u64) -> Vec<Sample> {
    gen_dataset(cfg, n, &mut substream(seed, Stream::Train, 0), CsiMode::Perfect).unwrap()
}

fn some_params(cfg: &SystemConfig) -> NetParams {
    let mut p = NetParams::default_for(cfg);
    for (t, l) in p.layers.iter_mut().enumerate() {
        l.gamma = 0.9 + 0.05 * t as f64;
        l.theta = 1.1;
        l.xi = 0.02;
    }
    p.layers.last_mut().unwrap().xi = 0.0;
    p
}

#[test]
fn dataset_is_deterministic_and_consistent() {
    for csi in [CsiMode::Perfect, CsiMode::Estimated] {
        let cfg = SystemConfig {
            snr_db: 12.0,
            ..Default::default()
        };
        let a = gen_dataset(&cfg, 50, &mut substream(4, Stream::Train, 1), csi).unwrap();
        let b = gen_dataset(&cfg, 50, &mut substream(4, Stream::Train, 1), csi).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.y, t.y);
            assert_eq!(s.system.h(), t.system.h());
            assert!((&s.y - (&s.h_true * &s.x_true + &s.noise)).amax() < 1e-12);
            assert_eq!(s.estimate.is_some(), csi == CsiMode::Estimated);
        }
    }
}

#[test]
fn symbols_are_uniform() {
    let cfg = SystemConfig {
        mod_order: 16,
        n_t: 1,
        n_r: 1,
        n_p: 1,
        ..Default::default()
    };
    let data = batch(&cfg, 10_000, 8);
    let mut counts = [0usize; 16];
    for s in &data {
        counts[s.labels[0]] += 1;
    }
    let p: f64 = 1.0 / 16.0;
    let sd = (10_000.0 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - 10_000.0 * p).abs() < 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn loss_of_zero_estimate_is_symbol_energy() {
    let cfg = SystemConfig::default();
    let c = make_constellation(4).unwrap();
    let data = batch(&cfg, 200, 2);
    let mut p = NetParams::default_for(&cfg);
    p.layers.last_mut().unwrap().phi = 0.0;
    let loss = l2_loss(&data, &p, &c, LossMode::Final).unwrap();
    assert!((loss - cfg.n_t as f64).abs() < 1e-12);
}

#[test]
fn loss_is_zero_when_estimate_is_exact() {
    let cfg = SystemConfig {
        snr_db: 200.0,
        ..Default::default()
    };
    let c = make_constellation(4).unwrap();
    let data = batch(&cfg, 20, 2);
    let loss = l2_loss(&data, &NetParams::default_for(&cfg), &c, LossMode::Final).unwrap();
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn base_loss_is_reproducible_on_fixed_batch() {
    let cfg = SystemConfig::default();
    let obj = DetectionObjective::new(&cfg, CsiMode::Perfect, LossMode::Final).unwrap();
    let data = batch(&cfg, 100, 3);
    let p = some_params(&cfg);
    assert_eq!(
        batch_loss(&obj, &p, &data).unwrap(),
        batch_loss(&obj, &p, &data).unwrap()
    );
}

/// With `xi_T = 0` the last layer outputs `phi m`, and `m` does not depend on
/// `phi_T`, so `dL/dphi_T = -2 mean <x - phi m, m>`.
#[test]
fn fd_gradient_of_last_phi_matches_analytic() {
    for (snr, m) in [(10.0, 4), (18.0, 16)] {
        let cfg = SystemConfig {
            snr_db: snr,
            mod_order: m,
            ..Default::default()
        };
        let c = make_constellation(m).unwrap();
        let data = batch(&cfg, 100, 5);
        let p = some_params(&cfg);
        let k = 4 * (cfg.layers - 1) + 1;
        let phi = p.layers[cfg.layers - 1].phi;
        let mut analytic = 0.0;
        for s in &data {
            let res = oampnet2_detect(&s.y, &s.system, &p, &c).unwrap();
            let mean: &DVector<f64> = &res.trajectory.last().unwrap().post_mean;
            analytic += -2.0 * (&s.x_true - mean.scale(phi)).dot(mean);
        }
        analytic /= data.len() as f64;
        let (_, g) = fd_gradient(
            |v| l2_loss(&data, &p.with_values(v), &c, LossMode::Final).unwrap(),
            &p.to_vec(),
            1e-5,
        )
        .unwrap();
        assert!(
            ((g[k] - analytic) / analytic).abs() < 1e-4,
            "fd {} analytic {analytic}",
            g[k]
        );
    }
}

#[test]
fn fd_gradient_vanishes_at_least_squares_phi() {
    let cfg = SystemConfig {
        snr_db: 8.0,
        ..Default::default()
    };
    let c = make_constellation(4).unwrap();
    let data = batch(&cfg, 100, 6);
    let mut p = some_params(&cfg);
    let (mut num, mut den) = (0.0, 0.0);
    for s in &data {
        let res = oampnet2_detect(&s.y, &s.system, &p, &c).unwrap();
        let m = &res.trajectory.last().unwrap().post_mean;
        num += s.x_true.dot(m);
        den += m.norm_squared();
    }
    let t = cfg.layers - 1;
    p.layers[t].phi = num / den;
    let (_, g) = fd_gradient(
        |v| l2_loss(&data, &p.with_values(v), &c, LossMode::Final).unwrap(),
        &p.to_vec(),
        1e-5,
    )
    .unwrap();
    let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(g[4 * t + 1].abs() < 1e-6 * scale.max(1.0), "{}", g[4 * t + 1]);
}

#[test]
fn zero_learning_rate_keeps_oamp() {
    let cfg = SystemConfig {
        seed: 9,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 2,
        samples_per_epoch: 200,
        validation_size: 300,
        learning_rate: 0.0,
        ..TrainConfig::desk(cfg.snr_db, 2)
    };
    let rep = adam_train(&cfg, &tcfg, CsiMode::Perfect).unwrap();
    assert_eq!(rep.final_params, NetParams::default_for(&cfg));
    let val = gen_dataset(
        &cfg,
        300,
        &mut substream(cfg.seed, Stream::Validation, 0),
        CsiMode::Perfect,
    )
    .unwrap();
    let c = make_constellation(4).unwrap();
    let oamp: f64 = val
        .iter()
        .map(|s| (&s.x_true - oamp_detect(&s.y, &s.system, cfg.layers, &c).unwrap().x_hat).norm_squared())
        .sum::<f64>()
        / 300.0;
    assert!((rep.initial_val_loss - oamp).abs() < 1e-12);
    for r in &rep.history {
        assert!((r.val_loss - oamp).abs() < 1e-12);
    }
}

#[test]
fn training_is_reproducible_and_selects_minimum() {
    let cfg = SystemConfig {
        seed: 21,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        samples_per_epoch: 500,
        validation_size: 300,
        ..TrainConfig::desk(10.0, 3)
    };
    let a = adam_train(&cfg, &tcfg, CsiMode::Perfect).unwrap();
    let b = adam_train(&cfg, &tcfg, CsiMode::Perfect).unwrap();
    assert_eq!(a.best_params, b.best_params);
    let min = a.history.iter().map(|r| r.val_loss).fold(a.initial_val_loss, f64::min);
    assert_eq!(a.best_val_loss, min);
    assert!(a.best_val_loss <= a.initial_val_loss);
    assert!(a.best_val_loss <= a.history.last().unwrap().val_loss);
}

#[test]
fn desk_training_improves_on_oamp() {
    let cfg = SystemConfig {
        snr_db: 10.0,
        seed: 2,
        ..Default::default()
    };
    let rep = adam_train(&cfg, &TrainConfig::desk(10.0, 50), CsiMode::Perfect).unwrap();
    assert!(
        rep.best_val_loss < rep.initial_val_loss,
        "{} vs {}",
        rep.best_val_loss,
        rep.initial_val_loss
    );
}
