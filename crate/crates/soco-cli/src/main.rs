//! CLI for the switching-cost online optimization pipeline.
//!
//! `synth-weather` writes a synthetic hourly weather trace, `gen-data` turns
//! a weather CSV into train/val/test episode files, `train` fits either the
//! calibrated optimizer or the PureML baseline, `eval` scores a policy with
//! ratio metrics, and `bounds` tabulates the closed-form bound curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use soco::baselines::{mla_robd_params, robd_params, ActivePolicy};
use soco::bounds::{cr_lower_pure_ml, cr_upper_optimal, crossing_rho};
use soco::cost::{CostModel, CostModelConfig};
use soco::demand::{
    load_dataset_csv, load_weather_csv, make_dataset, synth_weather, write_dataset_csv,
    write_weather_csv, AugmentConfig, RenewableParams, SplitConfig, SynthWeatherConfig,
};
use soco::error::Error;
use soco::eval::{evaluate, write_metrics_csv, write_per_instance_csv, Policy};
use soco::net::PolicyWeights;
use soco::train::{
    train_ecl2o, train_pureml, write_training_log_csv, Dataset, PureMlConfig, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "soco",
    version,
    about = "Online convex optimization with switching costs: calibrated learning, oracles, and bounds"
)]
struct Cli {
    /// Seed; falls back to the SOCO_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic hourly weather CSV.
    SynthWeather(SynthWeatherArgs),
    /// Build train/val/test episode files from a weather CSV.
    GenData(GenDataArgs),
    /// Train the calibrated optimizer or the PureML baseline.
    Train(TrainArgs),
    /// Evaluate a policy over a dataset split.
    Eval(EvalArgs),
    /// Tabulate competitive-ratio bound curves over the prediction error.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct SynthWeatherArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 365)]
    days: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Input weather CSV (see synth-weather for the schema).
    #[arg(long)]
    weather: PathBuf,
    /// Output directory for train.csv, val.csv, test.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    episode_len: usize,
    /// Total number of training sequences to produce; 0 keeps raw episodes.
    #[arg(long, default_value_t = 1400)]
    augment: usize,
    #[arg(long, default_value_t = 2)]
    train_months: usize,
    #[arg(long, default_value_t = 1)]
    val_months: usize,
    #[arg(long, default_value_t = 0.2)]
    scale_amplitude: f64,
    #[arg(long, default_value_t = 0.02)]
    jitter_sigma: f64,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Ecl2o,
    Pureml,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: TrainMode,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to <out>.log.csv.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// PureML ratio-loss weight.
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0.1)]
    rho_bar: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args)]
struct CostArgs {
    /// Isotropic switching weight: c(x, x') = (alpha/2) ||x - x'||^2.
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// JSON cost-model config; overrides --alpha.
    #[arg(long)]
    cost_config: Option<PathBuf>,
}

impl CostArgs {
    fn build(&self, dim: usize) -> Result<CostModel, Error> {
        match &self.cost_config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                CostModelConfig::from_json(&text)?.build(dim)
            }
            None => CostModel::tracking_with_alpha(dim, self.alpha),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    Oracle,
    Robd,
    Greedy,
    Ftp,
    Pureml,
    MlaRobd,
    Ecl2o,
    Switch,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    policy: PolicyName,
    /// Weights file for the ML-backed policies.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-instance ratio CSV.
    #[arg(long)]
    per_instance: Option<PathBuf>,
    /// Comma-separated tail percentiles.
    #[arg(long, default_value = "99,99.9", value_delimiter = ',')]
    percentiles: Vec<f64>,
    /// Chain each instance's initial action to the previous final action.
    #[arg(long)]
    chain_x0: bool,
    /// Worker threads for instance-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Trust parameter for mla-robd / ecl2o.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Switch threshold.
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma_growth: f64,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, default_value_t = 1.0)]
    m: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    /// Trust parameters, comma separated.
    #[arg(long, default_value = "0.1,0.5,1", value_delimiter = ',')]
    theta_list: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    rho_max: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_seed(cli_seed: Option<u64>) -> u64 {
    cli_seed
        .or_else(|| {
            std::env::var("SOCO_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(0)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn write_manifest<T: Serialize>(path: &Path, config: &T) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    let hash = fnv1a64(body.as_bytes());
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{{")?;
    writeln!(f, "  \"config_hash\": \"{hash:016x}\",")?;
    writeln!(f, "  \"config\": {body}")?;
    writeln!(f, "}}")?;
    Ok(())
}

fn file_name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), Error> {
    if path.exists() && !force {
        return Err(Error::InvalidParameter(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = resolve_seed(cli.seed);
    match cli.command {
        Command::SynthWeather(args) => cmd_synth_weather(args, seed),
        Command::GenData(args) => cmd_gen_data(args, seed),
        Command::Train(args) => cmd_train(args, seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Bounds(args) => cmd_bounds(args),
    }
}

fn cmd_synth_weather(args: SynthWeatherArgs, seed: u64) -> Result<(), Error> {
    refuse_overwrite(&args.out, args.force)?;
    let cfg = SynthWeatherConfig {
        days: args.days,
        seed,
        ..SynthWeatherConfig::default()
    };
    let records = synth_weather(&cfg);
    write_weather_csv(&args.out, &records)?;
    println!("wrote {} hourly records to {}", records.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GenDataManifest {
    command: &'static str,
    seed: u64,
    weather: String,
    episode_len: usize,
    augment_target: usize,
    split: SplitConfig,
    augmentation: AugmentConfig,
    renewables: RenewableParams,
    normalization_scale_mw: f64,
    train_episodes: usize,
    val_episodes: usize,
    test_episodes: usize,
}

fn cmd_gen_data(args: GenDataArgs, seed: u64) -> Result<(), Error> {
    let manifest_path = args.out.join("manifest.json");
    refuse_overwrite(&manifest_path, args.force)?;
    std::fs::create_dir_all(&args.out)?;

    let records = load_weather_csv(&args.weather)?;
    let split = SplitConfig {
        train_months: args.train_months,
        val_months: args.val_months,
    };
    let augment = AugmentConfig {
        scale_amplitude: args.scale_amplitude,
        jitter_sigma: args.jitter_sigma,
        max_shift: args.episode_len.saturating_sub(1).min(23),
    };
    let renewables = RenewableParams::default();
    let dataset = make_dataset(
        &records,
        &renewables,
        args.episode_len,
        &split,
        args.augment,
        &augment,
        seed,
    )?;

    write_dataset_csv(&args.out.join("train.csv"), &dataset.train)?;
    write_dataset_csv(&args.out.join("val.csv"), &dataset.val)?;
    write_dataset_csv(&args.out.join("test.csv"), &dataset.test)?;
    write_manifest(
        &manifest_path,
        &GenDataManifest {
            command: "gen-data",
            seed,
            // file name only, so identical-seed runs in different directories
            // produce identical manifests
            weather: file_name_of(&args.weather),
            episode_len: args.episode_len,
            augment_target: args.augment,
            split,
            augmentation: augment,
            renewables,
            normalization_scale_mw: dataset.scale,
            train_episodes: dataset.train.len(),
            val_episodes: dataset.val.len(),
            test_episodes: dataset.test.len(),
        },
    )?;
    println!(
        "wrote {} train / {} val / {} test episodes to {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest {
    command: &'static str,
    mode: &'static str,
    seed: u64,
    data: String,
    mu: f64,
    theta: f64,
    kappa: f64,
    rho_bar: f64,
    lambda1: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    alpha: f64,
    best_epoch: usize,
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<(), Error> {
    let train_instances = load_dataset_csv(&args.data.join("train.csv"))?;
    let val_instances = load_dataset_csv(&args.data.join("val.csv"))?;
    let dim = train_instances[0].action_dim();
    let model = args.cost.build(dim)?;
    let train_set = Dataset::from_instances(train_instances, &model)?;
    let val_set = Dataset::from_instances(val_instances, &model)?;

    let report = match args.mode {
        TrainMode::Ecl2o => {
            let config = TrainConfig {
                mu: args.mu,
                rho_bar: args.rho_bar,
                theta: args.theta,
                lambda1: args.lambda1,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                seed,
                ..TrainConfig::default()
            };
            train_ecl2o(&train_set, &val_set, &model, &config)?
        }
        TrainMode::Pureml => {
            let config = PureMlConfig {
                kappa: args.kappa,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                seed,
                ..PureMlConfig::default()
            };
            train_pureml(&train_set, &val_set, &model, &config)?
        }
    };

    report.weights.save(&args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.csv"));
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    write_training_log_csv(&mut log_file, &report.log)?;
    write_manifest(
        &args.out.with_extension("manifest.json"),
        &TrainManifest {
            command: "train",
            mode: match args.mode {
                TrainMode::Ecl2o => "ecl2o",
                TrainMode::Pureml => "pureml",
            },
            seed,
            data: file_name_of(&args.data),
            mu: args.mu,
            theta: args.theta,
            kappa: args.kappa,
            rho_bar: args.rho_bar,
            lambda1: args.lambda1,
            epochs: args.epochs,
            batch_size: args.batch_size,
            learning_rate: args.lr,
            alpha: args.cost.alpha,
            best_epoch: report.best_epoch,
        },
    )?;
    println!(
        "trained {} epochs (best validation at epoch {}); weights in {}",
        report.log.len(),
        report.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    if args.jobs > 0 {
        // ignore the error when a pool already exists (tests call run twice)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global();
    }
    let needs_weights = matches!(
        args.policy,
        PolicyName::Ftp | PolicyName::Pureml | PolicyName::MlaRobd | PolicyName::Ecl2o | PolicyName::Switch
    );
    let weights: Option<PolicyWeights> = if needs_weights {
        let path = args.weights.as_ref().ok_or_else(|| {
            Error::InvalidParameter("this policy requires --weights".into())
        })?;
        Some(PolicyWeights::load(path)?)
    } else {
        None
    };

    let split_file = match args.split {
        SplitName::Train => "train.csv",
        SplitName::Val => "val.csv",
        SplitName::Test => "test.csv",
    };
    let instances = load_dataset_csv(&args.data.join(split_file))?;
    let model = args.cost.build(instances[0].action_dim())?;

    let policy = match args.policy {
        PolicyName::Oracle => Policy::Oracle,
        PolicyName::Robd => Policy::Robd,
        PolicyName::Greedy => Policy::Greedy,
        PolicyName::Ftp => Policy::FollowThePrediction {
            weights: weights.as_ref().unwrap(),
        },
        PolicyName::Pureml => Policy::PureMl {
            weights: weights.as_ref().unwrap(),
        },
        PolicyName::MlaRobd => Policy::MlaRobd {
            weights: weights.as_ref().unwrap(),
            params: mla_robd_params(&model, args.theta)?,
        },
        PolicyName::Ecl2o => Policy::EcL2o {
            weights: weights.as_ref().unwrap(),
            params: mla_robd_params(&model, args.theta)?,
        },
        PolicyName::Switch => Policy::Switch {
            pureml: weights.as_ref().unwrap(),
            robd: robd_params(&model)?,
            gamma: args.gamma,
            gamma_growth: args.gamma_growth,
            initial: ActivePolicy::Ml,
        },
    };

    let result = evaluate(&policy, &instances, &model, args.chain_x0, &args.percentiles)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_metrics_csv(
        &mut out,
        &[(policy.name().to_string(), result.clone())],
        &args.percentiles,
    )?;
    if let Some(path) = &args.per_instance {
        let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
        let mut f = BufWriter::new(File::create(path)?);
        write_per_instance_csv(&mut f, &ids, &result)?;
    }
    println!(
        "{}: norm_avg {:.4}, empirical CR {:.4}, excluded {}",
        policy.name(),
        result.normalized_avg_cost,
        result.empirical_cr,
        result.excluded
    );
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> Result<(), Error> {
    if args.steps == 0 || args.rho_max <= 0.0 {
        return Err(Error::InvalidParameter(
            "bounds needs steps > 0 and rho_max > 0".into(),
        ));
    }
    let mut f = BufWriter::new(File::create(&args.out)?);
    let mut header = String::from("rho,lower_ml,upper_robd");
    for theta in &args.theta_list {
        header.push_str(&format!(",upper_theta_{theta}"));
    }
    writeln!(f, "{header}")?;
    let robd = cr_upper_optimal(args.m, args.alpha, args.beta, 0.0, 0.0);
    for i in 0..=args.steps {
        let rho = args.rho_max * i as f64 / args.steps as f64;
        let mut line = format!(
            "{rho},{},{robd}",
            cr_lower_pure_ml(args.m, args.alpha, rho)
        );
        for theta in &args.theta_list {
            line.push_str(&format!(
                ",{}",
                cr_upper_optimal(args.m, args.alpha, args.beta, *theta, rho)
            ));
        }
        writeln!(f, "{line}")?;
    }
    for theta in &args.theta_list {
        match crossing_rho(args.m, args.alpha, args.beta, *theta, args.rho_max.max(100.0)) {
            Some(rho_star) => println!("theta {theta}: crosses the robd bound at rho = {rho_star:.6}"),
            None => println!("theta {theta}: no crossing in (0, {}]", args.rho_max.max(100.0)),
        }
    }
    println!("wrote bound curves to {}", args.out.display());
    Ok(())
}
