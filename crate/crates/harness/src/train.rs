//! Epoch loop, evaluation, best-on-validation selection and run outputs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use backman_core::backman::{apply_updates_mut, backward_backman, BackSignals};
use backman_core::ebp::{backward_ebp, sgd_step_mut};
use backman_core::nash::{damping_correlation, damping_records, DampingRecord};
use backman_core::network::{
    argmax_rows, forward, head_signal, init_params, write_params, Batch, NetSpec, Params, Targets,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, Engine, RunConfig};
use crate::data::{DataError, Dataset, Split};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] backman_core::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

impl RunError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, RunError::Core(backman_core::Error::Diverged { .. }))
    }
}

pub type RunResult<T> = Result<T, RunError>;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// What an observer sees after every parameter update.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    pub rate: f64,
    pub before: &'a Params,
    pub after: &'a Params,
    pub signals: Option<&'a BackSignals>,
}

pub trait StepObserver {
    /// Whether the observer needs `before`; copying the weights every step is
    /// skipped otherwise.
    fn wants_weights(&self) -> bool {
        true
    }
    fn observe(&mut self, view: &StepView);
}

impl<F: FnMut(&StepView)> StepObserver for F {
    fn observe(&mut self, view: &StepView) {
        self(view)
    }
}

/// Mean loss and accuracy of `params` on `data`, evaluated in chunks.
pub fn evaluate(spec: &NetSpec, params: &Params, data: &Dataset) -> RunResult<(f64, f64)> {
    const CHUNK: usize = 1000;
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    let mut start = 0;
    while start < data.len() {
        let end = (start + CHUNK).min(data.len());
        let x = Batch::Flat(data.images.slice_rows(start, end));
        let labels = &data.labels[start..end];
        let cache = forward(spec, params, &x)?;
        let (l, _) = head_signal(spec.head, cache.output(), &Targets::Classes(labels.to_vec()))?;
        loss += l * (end - start) as f64;
        let pred = argmax_rows(&cache.output().to_flat());
        hits += pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        start = end;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Training statistics for one pass over the data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Signals of the epoch's last BackMAN step.
    pub last_signals: Option<BackSignals>,
}

/// Shuffles and batches one dataset and applies the configured engine.
pub struct Trainer<'c> {
    pub cfg: &'c RunConfig,
    pub spec: NetSpec,
    rng: ChaCha8Rng,
    steps: usize,
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &'c RunConfig, spec: NetSpec) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_fba7_c4e5);
        Trainer { cfg, spec, rng, steps: 0 }
    }

    pub fn epoch<'o>(
        &mut self,
        params: &mut Params,
        data: &Dataset,
        epoch: usize,
        mut observer: Option<&mut (dyn StepObserver + 'o)>,
    ) -> RunResult<EpochStats> {
        let rate = self.cfg.rate_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss, mut hits) = (0.0, 0usize);
        let mut last_signals = None;
        for idx in order.chunks(self.cfg.batch) {
            let x = Batch::Flat(data.images.select_rows(idx));
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let cache = forward(&self.spec, params, &x)?;
            let (l, r_out) = head_signal(self.spec.head, cache.output(), &Targets::Classes(labels.clone()))?;
            if !l.is_finite() {
                return Err(backman_core::Error::Diverged { layer: params.len() }.into());
            }
            loss += l * idx.len() as f64;
            let pred = argmax_rows(&cache.output().to_flat());
            hits += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();

            let before = match &observer {
                Some(o) if o.wants_weights() => Some(params.clone()),
                _ => None,
            };
            let signals = match self.cfg.engine {
                Engine::Ebp => {
                    let grads = backward_ebp(params, &cache, &r_out)?;
                    sgd_step_mut(params, &grads, rate)?;
                    None
                }
                Engine::Backman => {
                    let s = backward_backman(params, &cache, &r_out, &self.cfg.alpha_policy(rate))?;
                    apply_updates_mut(params, &s)?;
                    Some(s)
                }
            };
            if !params.all_finite() {
                return Err(backman_core::Error::Diverged { layer: params.len() }.into());
            }
            self.steps += 1;
            if let Some(o) = observer.as_deref_mut() {
                let view = StepView {
                    epoch,
                    step: self.steps,
                    rate,
                    before: before.as_ref().unwrap_or(params),
                    after: params,
                    signals: signals.as_ref(),
                };
                o.observe(&view);
            }
            if signals.is_some() {
                last_signals = signals;
            }
        }
        let n = data.len().max(1) as f64;
        Ok(EpochStats { loss: loss / n, accuracy: hits as f64 / n, last_signals })
    }
}

/// Outcome of [`train_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    /// Epoch of the retained checkpoint; 0 is the initialization.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the retained checkpoint.
    pub test_accuracy: f64,
    pub best_params: Params,
    pub damping: Vec<DampingRecord>,
}

/// Train, validation and test data for a run.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Trains a fresh network and keeps the checkpoint with the best validation
/// accuracy (earliest on ties). When `cfg.out` is set, writes `metrics.csv`
/// and `best.params` there, plus `damping.csv` with diagnostics on. A run that
/// diverges still flushes the rows it has.
pub fn train_run(cfg: &RunConfig, data: RunData, observer: Option<&mut dyn StepObserver>) -> RunResult<Metrics> {
    cfg.validate()?;
    let spec = cfg.spec();
    let mut params = init_params(&spec, cfg.seed)?;
    let mut m = Metrics {
        rows: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        test_accuracy: 0.0,
        best_params: params.clone(),
        damping: Vec::new(),
    };
    let outcome = run_epochs(cfg, &spec, data, &mut params, &mut m, observer);
    m.test_accuracy =
        m.rows.iter().find(|r| r.epoch == m.best_epoch && r.split == Split::Test).map_or(0.0, |r| r.accuracy);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_metrics(&dir.join("metrics.csv"), &m.rows)?;
        if cfg.diagnostics && cfg.engine == Engine::Backman {
            write_damping(dir, &m.damping)?;
        }
        if outcome.is_ok() {
            write_params(&m.best_params, BufWriter::new(File::create(dir.join("best.params"))?))?;
        }
    }
    outcome.map(|_| m)
}

fn eval_rows(spec: &NetSpec, params: &Params, data: RunData, epoch: usize, m: &mut Metrics) -> RunResult<f64> {
    let (vl, va) = evaluate(spec, params, data.val)?;
    m.rows.push(MetricRow { epoch, split: Split::Val, loss: vl, accuracy: va });
    if !data.test.is_empty() {
        let (tl, ta) = evaluate(spec, params, data.test)?;
        m.rows.push(MetricRow { epoch, split: Split::Test, loss: tl, accuracy: ta });
    }
    Ok(va)
}

fn run_epochs<'o>(
    cfg: &RunConfig,
    spec: &NetSpec,
    data: RunData,
    params: &mut Params,
    m: &mut Metrics,
    mut observer: Option<&mut (dyn StepObserver + 'o)>,
) -> RunResult<()> {
    let (l0, a0) = evaluate(spec, params, data.train)?;
    m.rows.push(MetricRow { epoch: 0, split: Split::Train, loss: l0, accuracy: a0 });
    m.best_val_accuracy = eval_rows(spec, params, data, 0, m)?;
    let mut trainer = Trainer::new(cfg, spec.clone());
    for epoch in 1..=cfg.epochs {
        let stats = trainer.epoch(params, data.train, epoch, observer.as_deref_mut())?;
        m.rows.push(MetricRow { epoch, split: Split::Train, loss: stats.loss, accuracy: stats.accuracy });
        if cfg.diagnostics {
            if let Some(s) = &stats.last_signals {
                m.damping.extend(damping_records(epoch, s));
            }
        }
        let va = eval_rows(spec, params, data, epoch, m)?;
        if va > m.best_val_accuracy {
            m.best_val_accuracy = va;
            m.best_epoch = epoch;
            m.best_params = params.clone();
        }
    }
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss", "accuracy"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.split.name().into(), r.loss.to_string(), r.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `damping.csv` with one row per agent and epoch, and `damping_summary.csv`
/// with the per-layer correlation of `log c` and `log |g_i|` (empty when undefined).
pub fn write_damping(dir: &Path, records: &[DampingRecord]) -> RunResult<()> {
    let mut w = csv::Writer::from_path(dir.join("damping.csv"))?;
    w.write_record(["epoch", "layer", "neuron", "c", "g_norm", "r_norm"])?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.layer.to_string(),
            r.neuron.to_string(),
            r.c.to_string(),
            r.g_norm.to_string(),
            r.r_norm.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("damping_summary.csv"))?;
    w.write_record(["layer", "correlation"])?;
    for (layer, c) in damping_correlation(records) {
        w.write_record([layer.to_string(), c.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}
