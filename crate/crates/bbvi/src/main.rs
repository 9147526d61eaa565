//! Batch front end: dataset generation, model fitting with either inference
//! engine, variance diagnostics, and held-out evaluation. Every command is a
//! pure function of (input files, flags, seed) to output bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bbvi::baseline::{run_chain, ChainConfig, ProposalConfig};
use bbvi::estimators::{CvMode, EstimatorKind};
use bbvi::families::MeanFieldFamily;
use bbvi::model::ModelSpec;
use bbvi::optimize::{
    init_lambda, run_bbvi, RobbinsMonroSchedule, RunConfig, RunTrace, Schedule,
};
use bbvi::zoo::{
    build_conjugate_oracle, build_model, default_family, generate_synthetic, init_factor_lambda,
    predictive_likelihood, predictive_likelihood_mcmc, FactorModelConfig, LongitudinalDataset,
    PredictiveProtocol, WeightPrior, MODEL_NAMES,
};
use bbvi::{Error, Result};

const OUT_DIR_ENV: &str = "BBVI_OUT_DIR";

#[derive(Parser)]
#[command(name = "bbvi", about = "Black-box variational inference toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic longitudinal dataset, its train/test split, and the
    /// generating latents.
    Generate(CommonArgs),
    /// Fit a model with a variational engine (lambda + trace) or the
    /// Gibbs baseline (samples + acceptance report).
    Fit(FitArgs),
    /// Per-coordinate variance of the gradient estimators along a training
    /// run's checkpoints.
    Variance(FitArgs),
    /// Held-out predictive likelihood of a fitted artifact.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// gamma | gamma-ts | gamma-normal | gamma-normal-ts | conjugate-oracle
    #[arg(long)]
    model: Option<String>,
    /// Defaults to $BBVI_OUT_DIR, then the current directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    labs: Option<usize>,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    visits: Option<usize>,
    #[arg(long)]
    test_patients: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// Comma-separated observations for the conjugate-oracle model.
    #[arg(long)]
    oracle_obs: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// bbvi-naive | bbvi-rb | bbvi-rbcv | bbvi-subsampled | mh-gibbs
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// adagrad | robbins-monro
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    subsample_batch: Option<usize>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    proposal_scale: Option<f64>,
    /// Variance command: number of lambda checkpoints.
    #[arg(long)]
    checkpoints: Option<usize>,
    /// Variance command: single-sample terms per estimator per checkpoint.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Fitted artifact: lambda.csv for bbvi engines, samples.csv for
    /// mh-gibbs.
    #[arg(long)]
    fitted: Option<PathBuf>,
    #[arg(long)]
    m_samples: Option<usize>,
    #[arg(long)]
    fit_fraction: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Fit(args) => cmd_fit(args),
        Cmd::Variance(args) => cmd_variance(args),
        Cmd::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Diverged { .. } => 2,
                Error::Io(_) | Error::Parse { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

// --------------------------------------------------------------------------
// Config resolution: flags > file > defaults.

struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let file = std::fs::File::open(path)?;
            for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: expected key=value", line_no + 1),
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value '{raw}' for key {key}"))),
            None => Ok(None),
        }
    }

    fn resolve<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
    }
}

struct Resolved {
    seed: u64,
    out_dir: PathBuf,
    force: bool,
    zoo: Option<FactorModelConfig>,
    n_test: usize,
    sparsity: f64,
    oracle_obs: Vec<f64>,
    /// Sorted key=value pairs for the output comment line.
    settings: Vec<(String, String)>,
}

impl Resolved {
    fn comment(&self) -> String {
        let mut line = String::from("#");
        for (k, v) in &self.settings {
            let _ = write!(line, " {k}={v}");
        }
        line
    }
}

fn resolve_common(args: &CommonArgs, file: &FileConfig) -> Result<Resolved> {
    let seed = file.require("seed", args.seed)?;
    let model = file.require("model", args.model.clone())?;
    let out_dir = match file.get("out-dir", args.out_dir.clone())? {
        Some(d) => d,
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let n_test = file.resolve("test-patients", args.test_patients, 5)?;
    let sparsity = file.resolve("sparsity", args.sparsity, 0.7)?;
    let oracle_raw = file
        .resolve("oracle-obs", args.oracle_obs.clone(), "1.0".to_string())?;
    let oracle_obs: Vec<f64> = oracle_raw
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad oracle observation '{t}'")))
        })
        .collect::<Result<_>>()?;
    let zoo = if model == "conjugate-oracle" {
        None
    } else if MODEL_NAMES.contains(&model.as_str()) {
        let mut cfg = FactorModelConfig::by_name(&model)?;
        cfg.n_labs = file.resolve("labs", args.labs, cfg.n_labs)?;
        cfg.n_factors = file.resolve("factors", args.factors, cfg.n_factors)?;
        cfg.n_patients = file.resolve("patients", args.patients, cfg.n_patients)?;
        cfg.n_visits = file.resolve("visits", args.visits, cfg.n_visits)?;
        cfg.validate()?;
        Some(cfg)
    } else {
        return Err(Error::Config(format!("unknown model '{model}'")));
    };
    let mut settings = vec![
        ("seed".into(), seed.to_string()),
        ("model".into(), model.clone()),
    ];
    if let Some(cfg) = &zoo {
        settings.push(("labs".into(), cfg.n_labs.to_string()));
        settings.push(("factors".into(), cfg.n_factors.to_string()));
        settings.push(("patients".into(), cfg.n_patients.to_string()));
        settings.push(("visits".into(), cfg.n_visits.to_string()));
        settings.push(("test-patients".into(), n_test.to_string()));
        settings.push(("sparsity".into(), sparsity.to_string()));
    } else {
        settings.push(("oracle-obs".into(), oracle_raw.clone()));
    }
    Ok(Resolved {
        seed,
        out_dir,
        force: args.force,
        zoo,
        n_test,
        sparsity,
        oracle_obs,
        settings,
    })
}

// --------------------------------------------------------------------------
// Output plumbing

fn create_output(dir: &Path, name: &str, force: bool) -> Result<std::fs::File> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(std::fs::File::create(path)?)
}

fn write_lambda_csv(
    out: &mut impl Write,
    comment: &str,
    model: &ModelSpec,
    family: &MeanFieldFamily,
    lambda: &[f64],
) -> std::io::Result<()> {
    writeln!(out, "{comment}")?;
    writeln!(out, "latent_id,coordinate,value")?;
    for i in 0..model.layout().len() {
        let id = &model.layout().entry(i).id;
        for (c, p) in family.param_range(i).enumerate() {
            writeln!(out, "{id},{c},{}", lambda[p])?;
        }
    }
    Ok(())
}

fn write_trace_csv(out: &mut impl Write, comment: &str, trace: &RunTrace) -> std::io::Result<()> {
    writeln!(out, "{comment}")?;
    writeln!(out, "iteration,elbo,grad_norm,rho_mean,max_change,converged")?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.elbo, r.grad_norm, r.rho_mean, r.max_change, trace.converged
        )?;
    }
    Ok(())
}

// --------------------------------------------------------------------------
// generate

fn cmd_generate(args: CommonArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let rs = resolve_common(&args, &file)?;
    let cfg = rs.zoo.as_ref().ok_or_else(|| {
        Error::Config("generate needs a zoo model, not conjugate-oracle".into())
    })?;
    let (mut data, truth) = generate_synthetic(cfg, rs.sparsity, rs.seed)?;
    data.assign_split(rs.n_test)?;
    let comment = rs.comment();

    let mut f = create_output(&rs.out_dir, "dataset.csv", rs.force)?;
    writeln!(f, "{comment}")?;
    data.write_csv(&mut f)?;

    let mut f = create_output(&rs.out_dir, "split.csv", rs.force)?;
    writeln!(f, "{comment}")?;
    data.write_split_csv(&mut f)?;

    let model = build_model(cfg, &data.patients)?;
    let mut f = create_output(&rs.out_dir, "truth.csv", rs.force)?;
    writeln!(f, "{comment}")?;
    writeln!(f, "latent_id,coordinate,value")?;
    for i in 0..model.layout().len() {
        let id = &model.layout().entry(i).id;
        for (c, v) in model.layout().value_range(i).enumerate() {
            writeln!(f, "{id},{c},{}", truth[v])?;
        }
    }
    Ok(())
}

// --------------------------------------------------------------------------
// fit

struct FitSetup {
    rs: Resolved,
    engine: String,
    model: ModelSpec,
    run: RunConfig,
    chain: ChainConfig,
}

fn load_training_model(
    rs: &Resolved,
    file: &FileConfig,
    args: &FitArgs,
) -> Result<(ModelSpec, Option<LongitudinalDataset>)> {
    match &rs.zoo {
        Some(cfg) => {
            let data_path: PathBuf = file.require("data", args.data.clone())?;
            let mut data = LongitudinalDataset::read_csv(&data_path)?;
            if let Some(split_path) = file.get("split", args.split.clone())? {
                data.read_split_csv(&split_path)?;
            }
            let train: Vec<_> = data.train_patients().into_iter().cloned().collect();
            let model = build_model(cfg, &train)?;
            Ok((model, Some(data)))
        }
        None => {
            let oracle = build_conjugate_oracle(0.0, 1.0, 1.0, rs.oracle_obs.clone())?;
            Ok((oracle.model, None))
        }
    }
}

fn resolve_fit(args: &FitArgs) -> Result<(FitSetup, Option<LongitudinalDataset>)> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut rs = resolve_common(&args.common, &file)?;
    let engine: String = file.require("engine", args.engine.clone())?;
    let (model, data) = load_training_model(&rs, &file, args)?;

    let estimator = match engine.as_str() {
        "bbvi-naive" => EstimatorKind::Naive,
        "bbvi-rb" => EstimatorKind::RaoBlackwell,
        "bbvi-rbcv" => EstimatorKind::RaoBlackwellCv,
        "bbvi-subsampled" => EstimatorKind::Subsampled,
        "mh-gibbs" => EstimatorKind::RaoBlackwellCv,
        other => return Err(Error::Config(format!("unknown engine '{other}'"))),
    };
    let default_eta = match &rs.zoo {
        Some(cfg) if cfg.weight_prior == WeightPrior::Gamma => 0.5,
        Some(_) => 1.0,
        None => 0.5,
    };
    let eta = file.resolve("eta", args.eta, default_eta)?;
    let schedule_name: String =
        file.resolve("schedule", args.schedule.clone(), "adagrad".to_string())?;
    let schedule = match schedule_name.as_str() {
        "adagrad" => Schedule::adagrad(eta),
        "robbins-monro" => Schedule::RobbinsMonro(RobbinsMonroSchedule {
            eta,
            ..RobbinsMonroSchedule::default()
        }),
        other => return Err(Error::Config(format!("unknown schedule '{other}'"))),
    };
    let mut run = RunConfig::new(estimator, rs.seed);
    run.cv_mode = CvMode::SameSamples;
    run.s = file.resolve("s", args.s, run.s)?;
    run.max_iterations = file.resolve("max-iterations", args.max_iterations, run.max_iterations)?;
    run.convergence_threshold =
        file.resolve("threshold", args.threshold, run.convergence_threshold)?;
    run.subsample_batch =
        file.resolve("subsample-batch", args.subsample_batch, run.subsample_batch)?;
    run.snapshot_every = file.resolve("snapshot-every", args.snapshot_every, run.snapshot_every)?;
    run.max_seconds = file.get("max-seconds", args.max_seconds)?;
    run.schedule = schedule;

    let sweeps = file.resolve("sweeps", args.sweeps, 10_000)?;
    let burn_in = file.resolve("burn-in", args.burn_in, sweeps / 5)?;
    let mut chain = ChainConfig::new(sweeps, burn_in, rs.seed);
    chain.thin = file.resolve("thin", args.thin, 10)?;
    chain.proposal = ProposalConfig {
        scale: file.resolve("proposal-scale", args.proposal_scale, 0.1)?,
    };

    rs.settings.push(("engine".into(), engine.clone()));
    if engine == "mh-gibbs" {
        rs.settings.push(("sweeps".into(), sweeps.to_string()));
        rs.settings.push(("burn-in".into(), burn_in.to_string()));
        rs.settings.push(("thin".into(), chain.thin.to_string()));
        rs.settings
            .push(("proposal-scale".into(), chain.proposal.scale.to_string()));
    } else {
        rs.settings.push(("s".into(), run.s.to_string()));
        rs.settings
            .push(("max-iterations".into(), run.max_iterations.to_string()));
        rs.settings.push(("schedule".into(), schedule_name));
        rs.settings.push(("eta".into(), eta.to_string()));
    }
    Ok((
        FitSetup {
            rs,
            engine,
            model,
            run,
            chain,
        },
        data,
    ))
}

/// Warm-started init for zoo models, generic random init otherwise.
fn initial_lambda(
    rs: &Resolved,
    data: &Option<LongitudinalDataset>,
    family: &MeanFieldFamily,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rs.seed ^ 0x5eed_2222);
    match (&rs.zoo, data) {
        (Some(cfg), Some(d)) => {
            let train: Vec<_> = d.train_patients().into_iter().cloned().collect();
            init_factor_lambda(cfg, family, &train, &mut rng)
        }
        _ => init_lambda(family, &mut rng),
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (setup, data) = resolve_fit(&args)?;
    let FitSetup {
        rs,
        engine,
        model,
        run,
        chain,
    } = setup;
    let comment = rs.comment();
    if engine == "mh-gibbs" {
        let mut rng = ChaCha8Rng::seed_from_u64(rs.seed ^ 0x5eed_1111);
        let z0 = model.random_assignment(&mut rng);
        let out = run_chain(&model, &z0, &chain)?;
        let mut f = create_output(&rs.out_dir, "samples.csv", rs.force)?;
        writeln!(f, "{comment}")?;
        writeln!(f, "sample,latent_id,coordinate,value")?;
        for (s, z) in out.samples.iter().enumerate() {
            for i in 0..model.layout().len() {
                let id = &model.layout().entry(i).id;
                for (c, v) in model.layout().value_range(i).enumerate() {
                    writeln!(f, "{s},{id},{c},{}", z[v])?;
                }
            }
        }
        let mut f = create_output(&rs.out_dir, "acceptance.csv", rs.force)?;
        writeln!(f, "{comment}")?;
        writeln!(f, "latent_id,acceptance_rate")?;
        for i in 0..model.layout().len() {
            writeln!(f, "{},{}", model.layout().entry(i).id, out.acceptance[i])?;
        }
        return Ok(());
    }
    let family = default_family(&model);
    let lambda0 = initial_lambda(&rs, &data, &family);
    match run_bbvi(&model, &family, &lambda0, &run) {
        Ok((lambda, trace)) => {
            let mut f = create_output(&rs.out_dir, "lambda.csv", rs.force)?;
            write_lambda_csv(&mut f, &comment, &model, &family, &lambda)?;
            let mut f = create_output(&rs.out_dir, "trace.csv", rs.force)?;
            write_trace_csv(&mut f, &comment, &trace)?;
            Ok(())
        }
        Err(Error::Diverged {
            iteration,
            reason,
            trace,
        }) => {
            let mut f = create_output(&rs.out_dir, "trace.csv", rs.force)?;
            write_trace_csv(&mut f, &comment, &trace)?;
            Err(Error::Diverged {
                iteration,
                reason,
                trace,
            })
        }
        Err(e) => Err(e),
    }
}

// --------------------------------------------------------------------------
// variance

fn cmd_variance(args: FitArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let checkpoints = file.resolve("checkpoints", args.checkpoints, 10)?;
    let replicates = file.resolve("replicates", args.replicates, 500)?;
    if checkpoints == 0 {
        return Err(Error::Config("checkpoints must be >= 1".into()));
    }
    let (setup, data) = resolve_fit(&args)?;
    let FitSetup {
        mut rs,
        model,
        mut run,
        ..
    } = setup;
    rs.settings
        .push(("checkpoints".into(), checkpoints.to_string()));
    rs.settings
        .push(("replicates".into(), replicates.to_string()));
    let family = default_family(&model);
    run.snapshot_every = (run.max_iterations / checkpoints).max(1);
    let lambda0 = initial_lambda(&rs, &data, &family);
    let (_, trace) = run_bbvi(&model, &family, &lambda0, &run)?;
    let snaps: Vec<(usize, Vec<f64>)> = trace
        .records
        .iter()
        .filter_map(|r| r.lambda.clone().map(|l| (r.iteration, l)))
        .collect();
    if snaps.is_empty() {
        return Err(Error::Config("training run produced no checkpoints".into()));
    }
    let take = checkpoints.min(snaps.len());
    let mut f = create_output(&rs.out_dir, "variance.csv", rs.force)?;
    writeln!(f, "{}", rs.comment())?;
    writeln!(f, "iteration,estimator,coordinate,variance")?;
    for j in 0..take {
        let (iter, lambda) = &snaps[j * snaps.len() / take];
        for kind in [
            EstimatorKind::Naive,
            EstimatorKind::RaoBlackwell,
            EstimatorKind::RaoBlackwellCv,
        ] {
            let mut vrng =
                ChaCha8Rng::seed_from_u64(rs.seed ^ (*iter as u64) << 2 ^ kind as u64);
            let var = bbvi::estimators::estimator_variance(
                &model, &family, lambda, kind, replicates, &mut vrng,
            )?;
            for (c, v) in var.iter().enumerate() {
                writeln!(f, "{iter},{},{c},{v}", kind.name())?;
            }
        }
    }
    Ok(())
}

// --------------------------------------------------------------------------
// eval

fn read_lambda_for_latent(path: &Path, latent_id: &str) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path)?;
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("latent_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: expected 3 fields", line_no + 1),
            });
        }
        if fields[0] != latent_id {
            continue;
        }
        let c: usize = fields[1].parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {}: bad coordinate", line_no + 1),
        })?;
        let v: f64 = fields[2].parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {}: bad value", line_no + 1),
        })?;
        rows.push((c, v));
    }
    rows.sort_by_key(|&(c, _)| c);
    for (expect, &(c, _)) in rows.iter().enumerate() {
        if c != expect {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("latent {latent_id}: missing coordinate {expect}"),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("no rows for latent {latent_id}"),
        });
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

/// Posterior mean of one latent's coordinates from a samples.csv artifact.
fn read_sample_mean(path: &Path, latent_id: &str) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("sample") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || fields[1] != latent_id {
            continue;
        }
        let c: usize = fields[2].parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            message: "bad coordinate".into(),
        })?;
        let v: f64 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            message: "bad value".into(),
        })?;
        let e = sums.entry(c).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("no rows for latent {latent_id}"),
        });
    }
    Ok(sums.values().map(|&(s, n)| s / n as f64).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.fit.common.config.as_deref())?;
    let fitted: PathBuf = file.require("fitted", args.fitted.clone())?;
    let m_samples = file.resolve("m-samples", args.m_samples, 200)?;
    let fit_fraction = file.resolve("fit-fraction", args.fit_fraction, 0.75)?;
    let (setup, data) = resolve_fit(&args.fit)?;
    let FitSetup {
        mut rs,
        engine,
        run,
        mut chain,
        ..
    } = setup;
    let cfg = rs
        .zoo
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs a zoo model".into()))?;
    let data = data.ok_or_else(|| Error::Config("eval needs --data".into()))?;
    let test: Vec<_> = data.test_patients().into_iter().cloned().collect();
    if test.is_empty() {
        return Err(Error::Validation("split manifest has no test patients".into()));
    }
    let protocol = PredictiveProtocol {
        fit_fraction,
        m_samples,
        seed: rs.seed,
    };
    rs.settings.push(("m-samples".into(), m_samples.to_string()));
    rs.settings
        .push(("fit-fraction".into(), fit_fraction.to_string()));
    rs.settings
        .push(("fitted".into(), fitted.display().to_string()));
    let report = if engine == "mh-gibbs" {
        let w_hat = read_sample_mean(&fitted, "W")?;
        chain.seed = rs.seed;
        predictive_likelihood_mcmc(cfg, &w_hat, &test, &protocol, &chain)?
    } else {
        let w_lambda = read_lambda_for_latent(&fitted, "W")?;
        let mut local_run = run;
        local_run.max_seconds = None;
        predictive_likelihood(cfg, &w_lambda, &test, &protocol, &local_run)?
    };
    let mut f = create_output(&rs.out_dir, "eval.csv", rs.force)?;
    writeln!(f, "{}", rs.comment())?;
    writeln!(f, "patient_id,n_eval,avg_log_likelihood")?;
    for p in &report.per_patient {
        writeln!(f, "{},{},{}", p.patient_id, p.n_eval, p.avg_log_likelihood)?;
    }
    writeln!(f, "aggregate,{},{}", report.total_eval, report.aggregate)?;
    Ok(())
}
