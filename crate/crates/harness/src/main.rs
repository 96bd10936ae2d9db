use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use backman_core::nash::RolloutMode;
use backman_core::network::read_params;
use backman_harness::config::{ConfigError, Engine, RunConfig, Settings};
use backman_harness::data::{build_split_mnist, make_splits, DataError, Mnist, MnistPaths, Splits};
use backman_harness::experiments::{
    depth_sweep, distinct_pairing_seed, forgetting_run, grid_search, tune_forgetting_rate, write_depth,
    write_forgetting, write_grid,
};
use backman_harness::train::{evaluate, train_run, RunData, RunError};
use backman_harness::verify::{nash_runs, run_checks, summarize, write_checks, write_nash, NashNet};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "backman", version, about = "BackMAN and EBP experiments on MNIST")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (key = value, with [subcommand] sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    engine: Option<String>,
    /// BackMAN budget (or dynamic eta).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// EBP learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// fixed | dynamic
    #[arg(long, global = true)]
    alpha_policy: Option<String>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write damping.csv for BackMAN runs.
    #[arg(long, global = true)]
    diagnostics: bool,
    /// Extra settings, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network on desk MNIST.
    Train,
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        params: PathBuf,
    },
    /// Sequential Split-MNIST training for both engines.
    SplitMnist,
    /// Train MLPs of several depths.
    DepthSweep,
    /// Rate x batch grid on the validation split.
    GridSearch,
    /// Best-response search on toy networks.
    NashVerify {
        /// Hold the next-layer signal fixed (diagnostic).
        #[arg(long)]
        frozen_signal: bool,
    },
    /// Gradient, equivalence, proportionality and adjoint suites.
    Check,
}

impl Command {
    fn section(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::SplitMnist => "split-mnist",
            Command::DepthSweep => "depth-sweep",
            Command::GridSearch => "grid-search",
            Command::NashVerify { .. } => "nash-verify",
            Command::Check => "check",
        }
    }
}

fn settings(common: &Common, section: &str) -> anyhow::Result<Settings> {
    let mut s = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Settings::parse(&text, section)?
        }
        None => Settings::default(),
    };
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects key=value, got {kv:?}") };
        s.set(k.trim(), v.trim());
    }
    if let Some(v) = common.seed {
        s.set("seed", v);
    }
    if let Some(v) = &common.engine {
        s.set("engine", v);
        s.set("engines", v);
    }
    if let Some(v) = common.lr {
        s.set("rate", v);
    }
    if let Some(v) = common.alpha {
        s.set("rate", v);
    }
    if let Some(v) = &common.alpha_policy {
        s.set("alpha_policy", v);
    }
    if let Some(v) = common.batch {
        s.set("batch", v);
    }
    if let Some(v) = common.epochs {
        s.set("epochs", v);
    }
    if let Some(v) = &common.out {
        s.set("out", v.display());
    }
    if let Some(v) = common.threads {
        s.set("threads", v);
    }
    if common.diagnostics {
        s.set("diagnostics", true);
    }
    Ok(s)
}

fn mnist_paths(s: &Settings) -> MnistPaths {
    let mut p = match s.raw("mnist_dir") {
        Some(d) => MnistPaths::in_dir(Path::new(d)),
        None => MnistPaths::from_env(),
    };
    if let Some(v) = s.raw("images") {
        p.train_images = v.into();
    }
    if let Some(v) = s.raw("labels") {
        p.train_labels = v.into();
    }
    p
}

fn load_splits(s: &Settings, test_default: usize) -> anyhow::Result<Splits> {
    let mnist = Mnist::load(&mnist_paths(s))?;
    let splits = make_splits(
        &mnist,
        s.get_or("data_seed", 0)?,
        s.get_or("train_size", 10_000)?,
        s.get_or("test_size", test_default)?,
    )?;
    Ok(splits)
}

fn out_dir(s: &Settings, section: &str) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(s.raw("out").unwrap_or(&format!("runs/{section}")));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn engines(s: &Settings) -> anyhow::Result<Vec<Engine>> {
    Ok(s.list_or("engines", vec![Engine::Ebp, Engine::Backman])?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let section = cli.command.section();
    let s = settings(&cli.common, section)?;
    let threads: usize = s.get_or("threads", 1)?;
    match &cli.command {
        Command::Train => {
            let dir = out_dir(&s, section)?;
            let mut cfg = RunConfig::from_settings(&s)?;
            cfg.out = Some(dir.clone());
            let splits = load_splits(&s, 2000)?;
            let data = RunData { train: &splits.train, val: &splits.val, test: &splits.test };
            let m = train_run(&cfg, data, None)?;
            println!(
                "best epoch {}: val {:.4} test {:.4} -> {}",
                m.best_epoch,
                m.best_val_accuracy,
                m.test_accuracy,
                dir.display()
            );
        }
        Command::Eval { params } => {
            let dir = out_dir(&s, section)?;
            let cfg = RunConfig::from_settings(&s)?;
            let file = File::open(params).with_context(|| format!("opening {}", params.display()))?;
            let p = read_params(BufReader::new(file))?;
            p.check(&cfg.spec())?;
            let splits = load_splits(&s, 2000)?;
            let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
            w.write_record(["split", "loss", "accuracy"])?;
            for d in [&splits.val, &splits.test] {
                let (loss, acc) = evaluate(&cfg.spec(), &p, d)?;
                println!("{}: loss {loss:.5} accuracy {acc:.4}", d.split.name());
                w.write_record([d.split.name().to_string(), loss.to_string(), acc.to_string()])?;
            }
            w.flush()?;
        }
        Command::SplitMnist => {
            let dir = out_dir(&s, section)?;
            let mut base = s.clone();
            if s.raw("hidden").is_none() {
                base.set("hidden", "128,128");
            }
            if s.raw("epochs").is_none() {
                base.set("epochs", 5);
            }
            let splits = load_splits(&s, 0)?;
            let seeds: Vec<u64> = s.list_or("seeds", (0..10).collect())?;
            let mut reports = Vec::new();
            let tune: Vec<f64> = s.list_or("tune_rates", vec![0.002, 0.01, 0.05, 0.25])?;
            let tuning_seed = distinct_pairing_seed(s.get_or("tuning_seed", 1000)?, &seeds);
            let mut summary = csv::Writer::from_path(dir.join("forgetting_summary.csv"))?;
            summary.write_record(["engine", "rate", "seeds", "mean_average_accuracy", "mean_drop"])?;
            let mut tuning = csv::Writer::from_path(dir.join("tuning.csv"))?;
            tuning.write_record(["engine", "pairing_seed", "rate", "average_accuracy"])?;
            for engine in engines(&s)? {
                let mut seeded = base.clone();
                seeded.set("engine", engine.name());
                if !tune.is_empty() {
                    let (rate, table) =
                        tune_forgetting_rate(&RunConfig::from_settings(&seeded)?, &tune, &splits, tuning_seed)?;
                    for (r, a) in table {
                        tuning.write_record([
                            engine.name().to_string(),
                            tuning_seed.to_string(),
                            r.to_string(),
                            a.to_string(),
                        ])?;
                    }
                    seeded.set("rate", rate);
                }
                let rate: f64 = seeded.get_or("rate", RunConfig::default().rate)?;
                let (mut avg, mut drop) = (0.0, 0.0);
                for &seed in &seeds {
                    seeded.set("seed", seed);
                    let cfg = RunConfig::from_settings(&seeded)?;
                    let stream = build_split_mnist(&splits.train, &splits.test, seed)?;
                    let r = forgetting_run(&cfg, &stream)?;
                    avg += r.average() / seeds.len() as f64;
                    drop += r.mean_drop() / seeds.len() as f64;
                    reports.push(r);
                }
                println!("{} (rate {rate}): average accuracy {avg:.4}, mean drop {drop:.4}", engine.name());
                summary.write_record([
                    engine.name().to_string(),
                    rate.to_string(),
                    seeds.len().to_string(),
                    avg.to_string(),
                    drop.to_string(),
                ])?;
            }
            summary.flush()?;
            tuning.flush()?;
            write_forgetting(&dir.join("forgetting.csv"), &reports)?;
        }
        Command::GridSearch => {
            let dir = out_dir(&s, section)?;
            let splits = load_splits(&s, 2000)?;
            let rates: Vec<f64> = s.list_or("rates", vec![0.002, 0.01, 0.05, 0.25])?;
            let batches: Vec<usize> = s.list_or("batches", vec![64, 128, 256, 512])?;
            let mut reports = Vec::new();
            for engine in engines(&s)? {
                let mut e = s.clone();
                e.set("engine", engine.name());
                let cfg = RunConfig::from_settings(&e)?;
                let g = grid_search(&cfg, &rates, &batches, &splits, threads)?;
                let b = g.best_cell();
                println!("{}: rate {} batch {} val {:.4}", engine.name(), b.rate, b.batch, b.val_accuracy);
                reports.push(g);
            }
            write_grid(&dir.join("grid.csv"), &reports)?;
        }
        Command::DepthSweep => {
            let dir = out_dir(&s, section)?;
            let splits = load_splits(&s, 2000)?;
            let cfg = RunConfig::from_settings(&s)?;
            let rows = depth_sweep(
                &cfg,
                s.get_or("width", 128)?,
                &s.list_or("depths", vec![1, 2, 4, 8])?,
                &engines(&s)?,
                &s.list_or("seeds", vec![cfg.seed])?,
                &s.list_or("rates", vec![cfg.rate])?,
                &splits,
                threads,
            )?;
            for r in &rows {
                println!(
                    "depth {} {} seed {}: rate {} test {:.4}",
                    r.depth,
                    r.engine.name(),
                    r.seed,
                    r.rate,
                    r.test_accuracy
                );
            }
            write_depth(&dir.join("depth.csv"), &rows)?;
        }
        Command::NashVerify { frozen_signal } => {
            let dir = out_dir(&s, section)?;
            let net = match s.raw("net").unwrap_or("mlp") {
                "mlp" => NashNet::Mlp,
                "cnn" => NashNet::Cnn,
                other => return Err(ConfigError::Value { key: "net".into(), value: other.into() }.into()),
            };
            let mode =
                if *frozen_signal || s.flag("frozen_signal")? { RolloutMode::FrozenSignal } else { RolloutMode::Full };
            let runs = nash_runs(
                net,
                &s.list_or("seeds", vec![0, 1, 2])?,
                &s.list_or("alphas", vec![1e-2, 1e-3, 1e-4])?,
                s.get_or("budget", 10_000)?,
                mode,
            )?;
            write_nash(&dir.join("nash_report.csv"), &runs)?;
            let sum = summarize(&runs);
            println!(
                "hidden agents at smallest alpha: min cosine {:.6}, max |ratio-1| {:.2e}",
                sum.hidden_min_cosine, sum.hidden_max_ratio_gap
            );
            println!("last-layer agents: min cosine {:.6}", sum.last_min_cosine);
            println!("stalled agents skipped: {}", sum.invalid);
        }
        Command::Check => {
            let dir = out_dir(&s, section)?;
            let paths = mnist_paths(&s);
            let train = if paths.exist() { Some(Mnist::load(&paths)?.train) } else { None };
            if train.is_none() {
                eprintln!("MNIST not found, equivalence checks use random inputs");
            }
            let rows = run_checks(train.as_ref(), s.get_or("seed", 0)?)?;
            write_checks(&dir.join("check.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{} {:<28} {:.3e} <= {:.0e} {}",
                    r.suite,
                    r.metric,
                    r.value,
                    r.tolerance,
                    if r.pass() { "ok" } else { "FAIL" }
                );
            }
            return Ok(rows.iter().all(|r| r.pass()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.downcast_ref::<RunError>().is_some_and(RunError::is_divergence)
                || matches!(e.downcast_ref::<backman_core::Error>(), Some(backman_core::Error::Diverged { .. }));
            let parse = e.is::<ConfigError>() || e.is::<DataError>() || e.is::<clap::Error>();
            ExitCode::from(if diverged {
                3
            } else if parse {
                2
            } else {
                1
            })
        }
    }
}
