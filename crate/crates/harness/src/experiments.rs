//! Split-MNIST forgetting, grid search and depth sweep.

use std::path::Path;

use backman_core::network::init_params;
use rayon::prelude::*;

use crate::config::{Engine, PolicyKind, RunConfig};
use crate::data::{build_split_mnist, digit_pairs, Splits, TaskStream};
use crate::train::{evaluate, train_run, RunData, RunError, RunResult, Trainer};

/// Accuracies of one sequential run over a task stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub engine: Engine,
    pub seed: u64,
    pub classes: Vec<[usize; 2]>,
    /// Accuracy on each task before any training.
    pub initial: Vec<f64>,
    /// Accuracy on each task right after training on it.
    pub end_of_task: Vec<f64>,
    /// Accuracy on each task after the whole stream.
    pub final_acc: Vec<f64>,
}

impl ForgettingReport {
    pub fn average(&self) -> f64 {
        self.final_acc.iter().sum::<f64>() / self.final_acc.len().max(1) as f64
    }

    /// `end_of_task - final` per task; the last task has no later training.
    pub fn drops(&self) -> Vec<f64> {
        self.end_of_task.iter().zip(&self.final_acc).map(|(e, f)| e - f).collect()
    }

    /// Mean drop over every task except the last.
    pub fn mean_drop(&self) -> f64 {
        let d = self.drops();
        let n = d.len().saturating_sub(1);
        if n == 0 {
            return 0.0;
        }
        d[..n].iter().sum::<f64>() / n as f64
    }
}

/// Trains one two-output network on the tasks in order, `cfg.epochs` each.
/// The BackMAN engine always uses the dynamic budget here.
pub fn forgetting_run(cfg: &RunConfig, stream: &TaskStream) -> RunResult<ForgettingReport> {
    let mut cfg = RunConfig { classes: 2, ..cfg.clone() };
    if cfg.engine == Engine::Backman {
        cfg.policy = PolicyKind::Dynamic;
    }
    cfg.validate()?;
    let spec = cfg.spec();
    let mut params = init_params(&spec, cfg.seed)?;
    let acc =
        |p: &_| -> RunResult<Vec<f64>> { stream.tasks.iter().map(|t| Ok(evaluate(&spec, p, &t.test)?.1)).collect() };
    let initial = acc(&params)?;
    let mut trainer = Trainer::new(&cfg, spec.clone());
    let mut end_of_task = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        for epoch in 1..=cfg.epochs {
            trainer.epoch(&mut params, &task.train, epoch, None)?;
        }
        end_of_task.push(evaluate(&spec, &params, &task.test)?.1);
    }
    Ok(ForgettingReport {
        engine: cfg.engine,
        seed: cfg.seed,
        classes: stream.tasks.iter().map(|t| t.classes).collect(),
        initial,
        end_of_task,
        final_acc: acc(&params)?,
    })
}

pub fn write_forgetting(path: &Path, reports: &[ForgettingReport]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["engine", "seed", "task", "classes", "initial", "end_of_task", "final", "drop"])?;
    for r in reports {
        for (t, drop) in r.drops().iter().enumerate() {
            w.write_record([
                r.engine.name().to_string(),
                r.seed.to_string(),
                (t + 1).to_string(),
                format!("{}-{}", r.classes[t][0], r.classes[t][1]),
                r.initial[t].to_string(),
                r.end_of_task[t].to_string(),
                r.final_acc[t].to_string(),
                drop.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// First seed from `start` whose digit pairing differs from that of every
/// seed in `avoid`.
pub fn distinct_pairing_seed(start: u64, avoid: &[u64]) -> u64 {
    let key = |s: u64| {
        let mut p = digit_pairs(s);
        p.iter_mut().for_each(|q| q.sort());
        p.sort();
        p
    };
    let taken: Vec<_> = avoid.iter().map(|&s| key(s)).collect();
    (start..).find(|&s| !taken.contains(&key(s))).expect("unbounded search")
}

/// Picks the rate with the best average final accuracy on a task stream built
/// from the training images and the validation images with `pairing_seed`.
/// Ties go to the smaller rate. Returns the choice and every `(rate, average)`.
pub fn tune_forgetting_rate(
    template: &RunConfig,
    rates: &[f64],
    splits: &Splits,
    pairing_seed: u64,
) -> RunResult<(f64, Vec<(f64, f64)>)> {
    if rates.is_empty() {
        return Err(RunError::Other("no rates to tune".into()));
    }
    let stream = build_split_mnist(&splits.train, &splits.val, pairing_seed)?;
    let mut table = Vec::with_capacity(rates.len());
    for &rate in rates {
        let r = forgetting_run(&RunConfig { rate, ..template.clone() }, &stream);
        let avg = match r {
            Ok(r) => r.average(),
            Err(e) if e.is_divergence() => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        table.push((rate, avg));
    }
    let best = table.iter().copied().min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0))).expect("non-empty");
    Ok((best.0, table))
}

/// One cell of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub rate: f64,
    pub batch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    /// Diverged cells score zero and are never selected.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub engine: Engine,
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridReport {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }
}

fn pool(threads: usize) -> RunResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| RunError::Other(e.to_string()))
}

/// Index of the best cell: highest validation accuracy, then smaller rate,
/// then smaller batch.
pub fn select_best(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).filter(|&i| !cells[i].diverged).min_by(|&a, &b| {
        let (x, y) = (&cells[a], &cells[b]);
        y.val_accuracy.total_cmp(&x.val_accuracy).then(x.rate.total_cmp(&y.rate)).then(x.batch.cmp(&y.batch))
    })
}

/// Trains every (rate, batch) cell from `template` and scores it on validation.
/// Cells run on `threads` workers; results keep grid order.
pub fn grid_search(
    template: &RunConfig,
    rates: &[f64],
    batches: &[usize],
    splits: &Splits,
    threads: usize,
) -> RunResult<GridReport> {
    if rates.is_empty() || batches.is_empty() {
        return Err(RunError::Other("grid needs at least one rate and one batch size".into()));
    }
    let grid: Vec<(f64, usize)> = rates.iter().flat_map(|&r| batches.iter().map(move |&b| (r, b))).collect();
    let data = RunData { train: &splits.train, val: &splits.val, test: &splits.test };
    let run = |&(rate, batch): &(f64, usize)| -> RunResult<GridCell> {
        let cfg = RunConfig { rate, batch, out: None, diagnostics: false, ..template.clone() };
        match train_run(&cfg, data, None) {
            Ok(m) => Ok(GridCell {
                rate,
                batch,
                val_accuracy: m.best_val_accuracy,
                test_accuracy: m.test_accuracy,
                best_epoch: m.best_epoch,
                diverged: false,
            }),
            Err(e) if e.is_divergence() => {
                Ok(GridCell { rate, batch, val_accuracy: 0.0, test_accuracy: 0.0, best_epoch: 0, diverged: true })
            }
            Err(e) => Err(e),
        }
    };
    let cells = pool(threads)?.install(|| grid.par_iter().map(run).collect::<RunResult<Vec<_>>>())?;
    let best = select_best(&cells).ok_or_else(|| RunError::Other("every grid cell diverged".into()))?;
    Ok(GridReport { engine: template.engine, cells, best })
}

pub fn write_grid(path: &Path, reports: &[GridReport]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["engine", "rate", "batch", "val_accuracy", "test_accuracy", "best_epoch", "diverged", "selected"])?;
    for r in reports {
        for (i, c) in r.cells.iter().enumerate() {
            w.write_record([
                r.engine.name().to_string(),
                c.rate.to_string(),
                c.batch.to_string(),
                c.val_accuracy.to_string(),
                c.test_accuracy.to_string(),
                c.best_epoch.to_string(),
                c.diverged.to_string(),
                (i == r.best).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of the depth table.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRow {
    /// Number of hidden layers.
    pub depth: usize,
    pub engine: Engine,
    pub seed: u64,
    /// Rate picked on validation.
    pub rate: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// For every depth, engine and seed, trains `depth` hidden layers of `width`
/// units at each rate and keeps the rate with the best validation accuracy.
pub fn depth_sweep(
    template: &RunConfig,
    width: usize,
    depths: &[usize],
    engines: &[Engine],
    seeds: &[u64],
    rates: &[f64],
    splits: &Splits,
    threads: usize,
) -> RunResult<Vec<DepthRow>> {
    if depths.is_empty() || engines.is_empty() || seeds.is_empty() {
        return Err(RunError::Other("depth sweep needs depths, engines and seeds".into()));
    }
    let mut rows = Vec::new();
    for &depth in depths {
        for &engine in engines {
            for &seed in seeds {
                let cfg = RunConfig { hidden: vec![width; depth], engine, seed, ..template.clone() };
                let g = grid_search(&cfg, rates, &[cfg.batch], splits, threads)?;
                let c = g.best_cell();
                rows.push(DepthRow {
                    depth,
                    engine,
                    seed,
                    rate: c.rate,
                    val_accuracy: c.val_accuracy,
                    test_accuracy: c.test_accuracy,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_depth(path: &Path, rows: &[DepthRow]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["depth", "engine", "seed", "rate", "val_accuracy", "best_accuracy"])?;
    for r in rows {
        w.write_record([
            r.depth.to_string(),
            r.engine.name().to_string(),
            r.seed.to_string(),
            r.rate.to_string(),
            r.val_accuracy.to_string(),
            r.test_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
