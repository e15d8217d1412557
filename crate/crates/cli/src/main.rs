use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oampnet::detect::{NetParams, ParamsMeta};
use oampnet::harness::{
    results_csv, run_ber, run_mismatch, run_sweep, selftest, trajectory_csv, write_outputs, DetectorKind, DetectorSpec,
    StopRule,
};
use oampnet::jcesd::JcesdObjective;
use oampnet::model::SystemConfig;
use oampnet::train::{
    load_params, save_params, train_objective, training_log_csv, CsiMode, DetectionObjective, LossMode, MetaPolicy,
    TrainConfig,
};
use oampnet::{Error, Result};

#[derive(Parser)]
#[command(name = "oampnet-cli", version, about = "OAMP / OAMP-Net2 MIMO detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train OAMP-Net2 parameters for one configuration.
    Train(TrainArgs),
    /// BER of one detector over an SNR list.
    Ber(BerArgs),
    /// BER of several detectors on the same slots.
    Sweep(SweepArgs),
    /// BER with estimated CSI through the turbo estimation/detection loop.
    Jcesd(BerArgs),
    /// Evaluate a parameter file outside its training context.
    Mismatch(MismatchArgs),
    /// Quick structural invariant checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Csi {
    Perfect,
    Estimated,
}

impl From<Csi> for CsiMode {
    fn from(c: Csi) -> Self {
        match c {
            Csi::Perfect => CsiMode::Perfect,
            Csi::Estimated => CsiMode::Estimated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Det {
    Lmmse,
    Oamp,
    Oampnet2,
    Ml,
}

impl From<Det> for DetectorKind {
    fn from(d: Det) -> Self {
        match d {
            Det::Lmmse => DetectorKind::Lmmse,
            Det::Oamp => DetectorKind::Oamp,
            Det::Oampnet2 => DetectorKind::OampNet2,
            Det::Ml => DetectorKind::Ml,
        }
    }
}

#[derive(Args, Clone)]
struct SystemArgs {
    #[arg(long, default_value_t = 4)]
    nt: usize,
    #[arg(long, default_value_t = 4)]
    nr: usize,
    /// Pilot length; defaults to nt.
    #[arg(long)]
    np: Option<usize>,
    /// Data columns per slot.
    #[arg(long, default_value_t = 12)]
    nd: usize,
    #[arg(long = "mod", default_value = "4", value_parser = clap::builder::TypedValueParser::map(clap::builder::PossibleValuesParser::new(["4", "16", "64"]), |s: String| s.parse::<usize>().unwrap()))]
    modulation: usize,
    /// Comma-separated SNR list in dB.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Layers T; defaults to 4 up to 25 dB and 10 above.
    #[arg(long)]
    layers: Option<usize>,
    /// Turbo iterations L.
    #[arg(long = "turbo", short = 'L', default_value_t = 1)]
    turbo: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl SystemArgs {
    fn config(&self) -> Result<SystemConfig> {
        let first = *self
            .snr
            .first()
            .ok_or_else(|| Error::Config("empty --snr list".into()))?;
        let cfg = SystemConfig {
            n_t: self.nt,
            n_r: self.nr,
            n_p: self.np.unwrap_or(self.nt),
            n_d: self.nd,
            mod_order: self.modulation,
            snr_db: first,
            rho: self.rho,
            layers: self.layers.unwrap_or_else(|| SystemConfig::default_layers(first)),
            turbo_iters: self.turbo,
            seed: self.seed,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct StopArgs {
    #[arg(long, default_value_t = 10_000)]
    min_errors: u64,
    #[arg(long, default_value_t = 100_000_000)]
    max_bits: u64,
}

impl StopArgs {
    fn rule(&self) -> StopRule {
        StopRule {
            min_errors: self.min_errors,
            max_bits: self.max_bits,
            record_slots: false,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_enum, default_value = "perfect")]
    csi: Csi,
    /// Train through the turbo loop with the summed-layer loss.
    #[arg(long)]
    jcesd: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Use the full schedule (1000 epochs) instead of --epochs.
    #[arg(long)]
    full_schedule: bool,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BerArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    stop: StopArgs,
    #[arg(long, value_enum, default_value = "oamp")]
    detector: Det,
    #[arg(long, value_enum, default_value = "perfect")]
    csi: Csi,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Accept parameters trained in another context.
    #[arg(long)]
    allow_mismatch: bool,
    /// Also write per-layer diagnostics of the first slot.
    #[arg(long)]
    trajectory: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    stop: StopArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "lmmse,oamp,oampnet2,ml")]
    detector: Vec<Det>,
    #[arg(long, value_enum, default_value = "perfect")]
    csi: Csi,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    allow_mismatch: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct MismatchArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    stop: StopArgs,
    #[arg(long)]
    params: PathBuf,
    /// Comma-separated test correlation values; defaults to --rho.
    #[arg(long, value_delimiter = ',')]
    test_rho: Vec<f64>,
    #[arg(long, value_enum, default_value = "perfect")]
    csi: Csi,
    /// Also run plain OAMP on every test context.
    #[arg(long)]
    with_oamp: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn load_for(path: &Path, cfg: &SystemConfig, allow: bool) -> Result<NetParams> {
    let policy = if allow {
        MetaPolicy::AllowMismatch
    } else {
        MetaPolicy::Strict
    };
    load_params(path, Some(&ParamsMeta::from_config(cfg)), policy)
}

fn spec_for(kind: Det, csi: Csi, params: Option<&Path>, cfg: &SystemConfig, allow: bool) -> Result<DetectorSpec> {
    let mut spec = DetectorSpec::new(kind.into(), csi.into());
    if let (DetectorKind::OampNet2, Some(p)) = (spec.kind, params) {
        spec = spec.with_params(load_for(p, cfg, allow)?, p.display().to_string());
    }
    Ok(spec)
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.system.config()?;
    let mut tcfg = if args.full_schedule {
        TrainConfig::full(cfg.snr_db)
    } else {
        TrainConfig::desk(cfg.snr_db, args.epochs)
    };
    if args.jcesd {
        tcfg.loss = LossMode::SumLayers;
        tcfg.learning_rate = 1e-4;
    }
    tcfg.samples_per_epoch = args.samples.unwrap_or(tcfg.samples_per_epoch);
    tcfg.validation_size = args.validation.unwrap_or(tcfg.validation_size);
    tcfg.batch_size = args.batch.unwrap_or(tcfg.batch_size);
    tcfg.learning_rate = args.lr.unwrap_or(tcfg.learning_rate);
    tcfg.fd_step = args.fd_step;
    let init = NetParams::default_for(&cfg);
    let report = if args.jcesd {
        train_objective(&JcesdObjective::new(&cfg)?, &init, &tcfg, cfg.seed)?
    } else {
        let obj = DetectionObjective::new(&cfg, args.csi.into(), tcfg.loss)?;
        train_objective(&obj, &init, &tcfg, cfg.seed)?
    };
    std::fs::create_dir_all(&args.out)?;
    save_params(&args.out.join("params.txt"), &report.best_params)?;
    std::fs::write(args.out.join("training_log.csv"), training_log_csv(&report))?;
    println!(
        "initial val {:.6} best val {:.6} at epoch {} ({:.1}s)",
        report.initial_val_loss, report.best_val_loss, report.best_epoch, report.wall_time
    );
    Ok(())
}

fn ber(args: &BerArgs, csi_override: Option<Csi>) -> Result<()> {
    let cfg = args.system.config()?;
    let csi = csi_override.unwrap_or(args.csi);
    let spec = spec_for(args.detector, csi, args.params.as_deref(), &cfg, args.allow_mismatch)?;
    let stop = args.stop.rule();
    let report = run_ber(&cfg, &spec, &args.system.snr, &stop)?;
    write_outputs(&args.out, &command_line(), &stop, std::slice::from_ref(&report))?;
    if args.trajectory {
        std::fs::write(args.out.join("trajectory.csv"), trajectory_csv(&cfg, &spec, 0)?)?;
    }
    print!("{}", results_csv(std::slice::from_ref(&report)));
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.system.config()?;
    let specs = args
        .detector
        .iter()
        .map(|&d| spec_for(d, args.csi, args.params.as_deref(), &cfg, args.allow_mismatch))
        .collect::<Result<Vec<_>>>()?;
    let stop = args.stop.rule();
    let reports = run_sweep(&cfg, &specs, &args.system.snr, &stop)?;
    write_outputs(&args.out, &command_line(), &stop, &reports)?;
    print!("{}", results_csv(&reports));
    Ok(())
}

fn mismatch(args: &MismatchArgs) -> Result<()> {
    let base = args.system.config()?;
    let params = load_params(&args.params, None, MetaPolicy::AllowMismatch)?;
    let rhos = if args.test_rho.is_empty() {
        vec![base.rho]
    } else {
        args.test_rho.clone()
    };
    let tests: Vec<(SystemConfig, Vec<f64>)> = rhos
        .iter()
        .map(|&rho| (SystemConfig { rho, ..base.clone() }, args.system.snr.clone()))
        .collect();
    let stop = args.stop.rule();
    let mut reports = run_mismatch(
        &params,
        &args.params.display().to_string(),
        &tests,
        args.csi.into(),
        &stop,
    )?;
    if args.with_oamp {
        for (cfg, snrs) in &tests {
            reports.push(run_ber(
                cfg,
                &DetectorSpec::new(DetectorKind::Oamp, args.csi.into()),
                snrs,
                &stop,
            )?);
        }
    }
    write_outputs(&args.out, &command_line(), &stop, &reports)?;
    print!("{}", results_csv(&reports));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Ber(a) => ber(&a, None),
        Command::Sweep(a) => sweep(&a),
        Command::Jcesd(a) => ber(&a, Some(Csi::Estimated)),
        Command::Mismatch(a) => mismatch(&a),
        Command::Selftest { seed } => {
            let outcomes = selftest(seed)?;
            for o in &outcomes {
                println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if outcomes.iter().all(|o| o.passed) {
                Ok(())
            } else {
                Err(Error::Config("selftest failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
