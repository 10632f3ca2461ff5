//! `arlp` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arlp_core::checkpoint::Checkpoint;
use arlp_core::evaluation::{self, ArBaseline, EvalReport, ModelPredictor, Persistence, Predictor, RunMeta};
use arlp_core::grid::split_days;
use arlp_core::ingest::ingest_files;
use arlp_core::synthetic::{generate_with, write_labels};
use arlp_core::training::{self, GradCheckOptions};
use arlp_core::{CityCube, Dataset, Error, Execution, Model, ModelKind, Result, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Supply-demand gap forecasting on gridded ride-hailing data.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numeric failure (divergence, degenerate attention, failed gradient check).
#[derive(Parser)]
#[command(name = "arlp", version)]
struct Cli {
    /// Run every computation on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cube and its planted cluster labels.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        grid: GridOverride,
    },
    /// Bin order, trajectory and weather CSV files into a cube.
    Ingest {
        #[arg(long)]
        orders: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file whose [grid] section sets the geometry.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        grid: GridOverride,
    },
    /// Train a model on the training days of a cube.
    Train {
        #[arg(long, value_enum)]
        model: KindArg,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV [default: <out>.loss.csv].
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (and baselines) on the test days of a cube.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report metrics in normalized units.
        #[arg(long)]
        normalized: bool,
        /// Skip the persistence and AR baselines.
        #[arg(long)]
        no_baselines: bool,
        /// AR baseline order.
        #[arg(long, default_value_t = 2)]
        ar_order: usize,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Print one forecast (normalized units unless --denormalize).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        /// Row-major region index.
        #[arg(long)]
        region: usize,
        #[arg(long)]
        day: usize,
        /// Interval being predicted; the window is the preceding intervals.
        #[arg(long)]
        interval: usize,
        #[arg(long)]
        denormalize: bool,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Model kinds to check [default: arlp and advanced].
        #[arg(long, value_enum)]
        model: Vec<KindArg>,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Random scalars per parameter group; 0 checks every scalar.
        #[arg(long, default_value_t = 200)]
        per_group: usize,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Multiply one group's analytic gradient by 2 (detector sanity check).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Merge evaluation runs and checkpoint loss curves into one report.
    Report {
        /// `runs.json` files written by `eval`.
        #[arg(long, required = true)]
        runs: Vec<PathBuf>,
        /// Checkpoints whose loss history is plotted.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GridOverride {
    /// Override the grid's interval length.
    #[arg(long)]
    interval_minutes: Option<usize>,
}

#[derive(Args)]
struct DumpArgs {
    /// Write sd/ha/sa/fa maps as CSV grids per sample.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Samples dumped by `eval`.
    #[arg(long, default_value_t = 16)]
    dump_limit: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Arlp,
    Advanced,
    Lstm,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Arlp => ModelKind::Arlp,
            KindArg::Advanced => ModelKind::Advanced,
            KindArg::Lstm => ModelKind::Lstm,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        return EXIT_NUMERIC;
    }
    match e {
        Error::Config(_) | Error::Bounds(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn load_config(path: &Path, grid: &GridOverride) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(m) = grid.interval_minutes {
        cfg.grid.interval_minutes = m;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Synth { config, out, labels, grid } => {
            let cfg = load_config(&config, &grid)?;
            let (cube, assigned) = generate_with(&cfg.synthetic, &cfg.grid, exec)?;
            cube.save(&out)?;
            write_labels(&labels, &assigned)?;
            info!("wrote {}-day cube to {}", cube.days(), out.display());
            Ok(())
        }
        Command::Ingest { orders, trajectories, weather, out, config, grid } => {
            let mut spec = match &config {
                Some(path) => RunConfig::load(path)?.grid,
                None => Default::default(),
            };
            if let Some(m) = grid.interval_minutes {
                spec.interval_minutes = m;
            }
            let (cube, report) = ingest_files(spec, orders, trajectories, weather)?;
            cube.save(&out)?;
            info!(
                "wrote {}-day cube to {} ({} orders and {} trajectory points skipped)",
                cube.days(),
                out.display(),
                report.skipped_orders,
                report.skipped_points
            );
            Ok(())
        }
        Command::Train { model, cube, config, out, loss_log } => train(model.into(), &cube, &config, &out, loss_log, exec),
        Command::Eval { checkpoint, cube, out, normalized, no_baselines, ar_order, dump } => {
            eval(&checkpoint, &cube, &out, normalized, !no_baselines, ar_order, &dump, exec)
        }
        Command::Predict { checkpoint, cube, region, day, interval, denormalize, dump } => {
            predict(&checkpoint, &cube, region, day, interval, denormalize, &dump)
        }
        Command::Gradcheck { config, model, epsilon, tolerance, per_group, samples, corrupt } => {
            gradcheck(&config, &model, epsilon, tolerance, per_group, samples, corrupt, exec)
        }
        Command::Report { runs, checkpoint, out } => report(&runs, &checkpoint, &out),
    }
}

fn train(kind: ModelKind, cube: &Path, config: &Path, out: &Path, loss_log: Option<PathBuf>, exec: Execution) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cube = CityCube::load(cube)?.with_grid(cfg.grid)?;
    let (train_days, _) = split_days(cube.days(), cfg.train.split_ratio())?;
    let data = Dataset::from_raw(&cube, train_days.clone(), exec)?;
    let (model, params) = Model::new(kind, cfg.grid, cfg.model, cfg.train.seed)?;
    let outcome = training::train(&model, params, &data, train_days, &cfg.train, exec)?;
    let ck = Checkpoint {
        model,
        params: outcome.params,
        stats: *data.stats(),
        train: cfg.train.clone(),
        step: outcome.steps,
        history: outcome.history,
        config_hash: cfg.hash()?,
    };
    ck.save(out)?;
    let log_path = loss_log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut text = String::from("epoch,train_loss,val_mae\n");
    for e in &ck.history.epochs {
        let val = e.val_mae.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, val));
    }
    fs::write(&log_path, text)?;
    info!("saved checkpoint after {} steps (best epoch {})", outcome.steps, outcome.best_epoch);
    Ok(())
}

fn open(checkpoint: &Path, cube: &Path, exec: Execution) -> Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cube = CityCube::load(cube)?.with_grid(*ck.model.grid())?;
    let data = Dataset::with_stats(&cube, ck.stats, exec)?;
    Ok((ck, data))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    cube: &Path,
    out: &Path,
    normalized: bool,
    baselines: bool,
    ar_order: usize,
    dump: &DumpArgs,
    exec: Execution,
) -> Result<()> {
    let (ck, data) = open(checkpoint, cube, exec)?;
    let (train_days, test_days) = split_days(data.days(), ck.train.split_ratio())?;
    let history = ck.model.history();
    let meta = RunMeta { seed: ck.train.seed, config_hash: ck.config_hash.clone() };
    let net = ModelPredictor { model: &ck.model, params: &ck.params };
    let mut predictors: Vec<Box<dyn Predictor + '_>> = vec![Box::new(net)];
    if baselines {
        predictors.push(Box::new(Persistence));
        predictors.push(Box::new(ArBaseline::fit(&data, train_days, ar_order, false, exec)?));
    }
    let mut reports = Vec::new();
    for p in &predictors {
        let ev = evaluation::evaluate(p.as_ref(), &data, test_days.clone(), history, exec)?;
        reports.push(ev.report(&data, false, meta.clone())?);
        if normalized {
            reports.push(ev.report(&data, true, meta.clone())?);
        }
    }
    for r in &reports {
        info!("{}: MAE {:.4} RMSE {:.4} MAPE {:.2}% (n = {})", r.model, r.mae, r.rmse, r.mape_percent, r.n);
    }
    let curves = vec![(format!("{}_steps", ck.model.kind().name()), ck.history.steps.clone())];
    evaluation::emit_report(&reports, &curves, out)?;
    if let Some(dir) = &dump.dump_attention {
        for s in data.samples(test_days, history).iter().take(dump.dump_limit) {
            dump_attention(&ck.model, &ck, &data, s.region, s.day, s.start, dir)?;
        }
    }
    Ok(())
}

fn dump_attention(model: &Model, ck: &Checkpoint, data: &Dataset, region: usize, day: usize, start: usize, dir: &Path) -> Result<()> {
    if model.kind() == ModelKind::Lstm {
        return Ok(());
    }
    let history = model.history();
    for d in day + 1 - history..=day {
        let att = model.attention(&ck.params, data, d, start, region)?;
        att.dump_csv(dir, &format!("r{region}_d{d}_t{start}"), data.grid())?;
    }
    Ok(())
}

fn predict(checkpoint: &Path, cube: &Path, region: usize, day: usize, interval: usize, denormalize: bool, dump: &DumpArgs) -> Result<()> {
    let (ck, data) = open(checkpoint, cube, Execution::Sequential)?;
    let window = data.grid().window;
    let start = interval
        .checked_sub(window)
        .ok_or_else(|| Error::Bounds(format!("interval {interval} leaves no room for a {window}-interval window")))?;
    let history = ck.model.history();
    if day + 1 < history {
        return Err(Error::Bounds(format!("day {day} has fewer than {history} days of history")));
    }
    let sample = data.sample(region, day, start)?;
    let y = ck.model.predict(&ck.params, &data, &sample)?;
    let y = if denormalize { ck.stats.denormalize_value(arlp_core::Channel::Gap, y) } else { y };
    println!("{y:?}");
    if let Some(dir) = &dump.dump_attention {
        dump_attention(&ck.model, &ck, &data, region, day, start, dir)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    config: &Path,
    kinds: &[KindArg],
    epsilon: f64,
    tolerance: f64,
    per_group: usize,
    samples: usize,
    corrupt: Option<String>,
    exec: Execution,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let kinds: Vec<ModelKind> = if kinds.is_empty() {
        vec![ModelKind::Arlp, ModelKind::Advanced]
    } else {
        kinds.iter().map(|&k| k.into()).collect()
    };
    let (cube, _) = generate_with(&cfg.synthetic, &cfg.grid, exec)?;
    let data = Dataset::from_raw(&cube, 0..cube.days(), exec)?;
    let options = GradCheckOptions {
        per_group: (per_group > 0).then_some(per_group),
        corrupt: corrupt.map(|g| (g, 2.0)),
        seed: cfg.train.seed,
    };
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for kind in kinds {
        let (model, mut params) = Model::new(kind, cfg.grid, cfg.model, cfg.train.seed)?;
        training::gradcheck_point(&mut params, cfg.train.seed);
        let all = data.samples(0..data.days(), model.history());
        if all.is_empty() {
            return Err(Error::Config("configuration yields no samples to check".into()));
        }
        let stride = (all.len() / samples.max(1)).max(1);
        let picked: Vec<_> = all.iter().step_by(stride).take(samples.max(1)).copied().collect();
        let r = training::grad_check(&model, &params, &data, &picked, epsilon, &options, exec)?;
        for (group, g) in &r.groups {
            println!(
                "{:<14} {:<10} checked {:>6}  max rel err {:.3e}  worst {}[{}]",
                kind.name(),
                group,
                g.checked,
                g.max_rel_error,
                g.worst.0,
                g.worst.1
            );
        }
        let ok = r.passes(tolerance);
        println!("{:<14} {} (max {:.3e}, tolerance {tolerance:e})", kind.name(), if ok { "PASS" } else { "FAIL" }, r.max_rel_error());
        pass &= ok;
        worst = worst.max(r.max_rel_error());
    }
    if pass {
        Ok(())
    } else {
        Err(Error::GradCheckFailed(worst))
    }
}

fn report(runs: &[PathBuf], checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in runs {
        reports.extend(evaluation::load_runs(path)?);
    }
    let mut curves = Vec::new();
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        curves.push((stem, ck.history.steps));
    }
    evaluation::emit_report(&reports, &curves, out)?;
    Ok(())
}
