//! Deterministic training: run configuration, one optimizer step per batch,
//! metric logging, checkpoints and resumption.

mod bench;
mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bench::{bench, BenchConfig, BenchReport};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{GenConfig, KeyValues, OptimizerConfig, RunConfig};
pub use optim::Adam;

use crate::alignment::{contrastive_loss, sample_negatives, ContrastiveSpec, LossStats};
use crate::data::{batches, generate, read_dataset, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eval_subset, extract_features, linear_probe};
use crate::math::{Graph, Real, Tensor};
use crate::model::Model;

/// Salt separating the negative-sampling stream from other uses of the train seed.
const NEGATIVE_STREAM: u64 = 0x6e65_6761_7469_7665;

/// Loss, parameter gradients (in [`Model::parameters`] order) and counters
/// for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub stats: LossStats,
}

/// Forward and backward pass of the configured loss over one batch.
///
/// Negatives are drawn from `rng` for every anchor, restricted to the other
/// sequences of the anchor's group.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    samples: &[Vec<T>],
    groups: &[usize],
    spec: ContrastiveSpec,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchGradients<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut zs = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut lengths = Vec::with_capacity(samples.len());
    for s in samples {
        let (z, c) = model.forward_graph(&mut g, &bound, s)?;
        let len = g.value(z).rows();
        if len <= spec.m {
            return Err(Error::TooShort(format!("{len} latents, need more than M={}", spec.m)));
        }
        preds.push(model.predict_graph(&mut g, &bound, c, len - spec.m)?);
        zs.push(z);
        lengths.push(len);
    }
    let positions: Vec<usize> = lengths.iter().map(|l| l - spec.m).collect();
    let plan = sample_negatives(&lengths, groups, &positions, negatives, rng)?;
    let (loss, stats) = contrastive_loss(&mut g, &preds, &zs, &plan, &spec)?;
    let grads = g.backward(loss)?;
    Ok(BatchGradients {
        loss: g.value(loss).data()[0],
        grads: bound.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect(),
        stats,
    })
}

/// One row of the metrics log: either a training step or an evaluation
/// metric recorded after that step.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricRow {
    Step { step: u64, wall_ms: f64, loss: f64 },
    Eval { step: u64, wall_ms: f64, metric: String, value: f64 },
}

impl MetricRow {
    pub fn step(&self) -> u64 {
        match self {
            Self::Step { step, .. } | Self::Eval { step, .. } => *step,
        }
    }
}

/// Append-only log with header `step,wall_ms,loss,metric,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "step,wall_ms,loss,metric,value";

impl MetricsLog {
    /// Appends a training step; steps must strictly increase and time must be positive.
    pub fn push_step(&mut self, step: u64, wall_ms: f64, loss: f64) -> Result<()> {
        if let Some(last) = self.losses().last() {
            if step <= last.0 {
                return Err(Error::Invalid(format!("step {step} does not follow {}", last.0)));
            }
        }
        if wall_ms.is_nan() || wall_ms <= 0.0 {
            return Err(Error::Invalid(format!("step time {wall_ms} ms is not positive")));
        }
        self.rows.push(MetricRow::Step { step, wall_ms, loss });
        Ok(())
    }

    pub fn push_eval(&mut self, step: u64, wall_ms: f64, metric: &str, value: f64) {
        self.rows.push(MetricRow::Eval { step, wall_ms, metric: metric.to_string(), value });
    }

    /// `(step, loss)` of every training row.
    pub fn losses(&self) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                MetricRow::Step { step, loss, .. } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                MetricRow::Eval { step, metric: m, value, .. } if m == metric => Some((*step, *value)),
                _ => None,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = match r {
                MetricRow::Step { step, wall_ms, loss } => writeln!(s, "{step},{wall_ms:.3},{loss},,"),
                MetricRow::Eval { step, wall_ms, metric, value } => writeln!(s, "{step},{wall_ms:.3},,{metric},{value}"),
            };
        }
        s
    }

    /// The log without the wall-clock column: what must repeat exactly
    /// across runs with identical seeds.
    pub fn deterministic_csv(&self) -> String {
        self.to_csv()
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}\n", f[0], f[2], f[3], f[4])
            })
            .collect()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Invalid("missing metrics header".into()));
        }
        let mut log = Self::default();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Invalid(format!("metrics row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let step: u64 = f[0].parse().map_err(|_| bad())?;
            let wall_ms: f64 = f[1].parse().map_err(|_| bad())?;
            if f[3].is_empty() {
                log.push_step(step, wall_ms, f[2].parse().map_err(|_| bad())?)?;
            } else {
                log.push_eval(step, wall_ms, f[3], f[4].parse().map_err(|_| bad())?);
            }
        }
        Ok(log)
    }

    /// Drops rows after `step`, used when resuming from a checkpoint.
    pub fn truncate_after(&mut self, step: u64) {
        self.rows.retain(|r| r.step() <= step);
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub wall_ms: f64,
    pub grad_norm: f64,
    pub stats: LossStats,
}

/// Training state. Everything except wall-clock times is a function of the
/// config, the dataset and the number of steps taken.
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub metrics: MetricsLog,
    step: u64,
    epoch: u64,
    batch: u64,
    rng: ChaCha8Rng,
    schedule: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.init_seed)?;
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let adam = Adam::new(config.optimizer, &shapes);
        let rng = ChaCha8Rng::seed_from_u64(config.train_seed ^ NEGATIVE_STREAM);
        let t = Self { config, dataset, model, adam, metrics: MetricsLog::default(), step: 0, epoch: 0, batch: 0, rng, schedule: None };
        t.check_dataset()?;
        Ok(t)
    }

    pub fn from_checkpoint(ck: Checkpoint<f32>, dataset: Dataset, metrics: MetricsLog) -> Result<Self> {
        let t = Self {
            config: ck.config,
            dataset,
            model: ck.model,
            adam: ck.adam,
            metrics,
            step: ck.step,
            epoch: ck.epoch,
            batch: ck.batch,
            rng: ck.rng.restore(),
            schedule: None,
        };
        t.check_dataset()?;
        Ok(t)
    }

    fn check_dataset(&self) -> Result<()> {
        let shortest = self.dataset.sequences.iter().map(|s| s.samples.len()).min().ok_or(Error::Empty("dataset"))?;
        let len = self.config.model.latent_len(shortest)?;
        if len <= self.config.window {
            return Err(Error::TooShort(format!("{len} latents per sequence, need more than window {}", self.config.window)));
        }
        batches(&self.dataset, self.config.batch_size, self.config.groups, self.config.train_seed, 0).map(|_| ())
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            batch: self.batch,
            rng: RngState::capture(&self.rng),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs as u64
    }

    pub fn spec(&self) -> ContrastiveSpec {
        ContrastiveSpec { k: self.config.predictions, m: self.config.window, kind: self.config.loss }
    }

    fn epoch_batches(&mut self) -> Result<&[Batch]> {
        if self.schedule.as_ref().map(|s| s.0) != Some(self.epoch) {
            let b = batches(&self.dataset, self.config.batch_size, self.config.groups, self.config.train_seed, self.epoch)?;
            self.schedule = Some((self.epoch, b));
        }
        Ok(&self.schedule.as_ref().unwrap().1)
    }

    /// Loss and gradients of a batch without touching any state except the
    /// negative-sampling RNG.
    pub fn gradients(&mut self, batch: &Batch) -> Result<BatchGradients<f32>> {
        let samples: Vec<Vec<f32>> = batch.indices.iter().map(|&i| self.dataset.sequences[i].samples.clone()).collect();
        let spec = self.spec();
        batch_gradients(&self.model, &samples, &batch.groups, spec, self.config.negatives, &mut self.rng)
    }

    /// Computes the loss on `batch`, backpropagates and applies one update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let start = Instant::now();
        let out = self.gradients(batch)?;
        let mut params = self.model.parameters_mut();
        let grad_norm = self.adam.step(&mut params, &out.grads)?;
        self.step += 1;
        let wall_ms = (start.elapsed().as_secs_f64() * 1e3).max(1e-6);
        let loss = out.loss as f64;
        self.metrics.push_step(self.step, wall_ms, loss)?;
        Ok(StepReport { step: self.step, epoch: self.epoch, loss, wall_ms, grad_norm, stats: out.stats })
    }

    /// Next step of the schedule, or `None` once all epochs are done.
    /// Returns whether the step completed an epoch alongside its report.
    pub fn next_step(&mut self) -> Result<Option<(StepReport, bool)>> {
        if self.finished() {
            return Ok(None);
        }
        let slot = self.batch as usize;
        let batch = self.epoch_batches()?[slot].clone();
        let report = self.train_step(&batch)?;
        self.batch += 1;
        let per_epoch = self.epoch_batches()?.len() as u64;
        let end = self.batch == per_epoch;
        if end {
            self.epoch += 1;
            self.batch = 0;
            let every = self.config.eval_every as u64;
            if every > 0 && self.epoch.is_multiple_of(every) {
                self.evaluate_probe()?;
            }
        }
        Ok(Some((report, end)))
    }

    /// Linear probe on context features of the evaluation subset.
    pub fn evaluate_probe(&mut self) -> Result<f64> {
        let start = Instant::now();
        let idx = eval_subset(&self.dataset, self.config.eval_sequences);
        let feats = extract_features(&self.model, &self.dataset, &idx)?;
        let probe = linear_probe(&feats.contexts, self.config.eval_seed, crate::eval::PROBE_EPOCHS)?;
        let ms = (start.elapsed().as_secs_f64() * 1e3).max(1e-6);
        self.metrics.push_eval(self.step, ms, "probe_accuracy_val", probe.val_accuracy);
        Ok(probe.val_accuracy)
    }

    /// Runs until every epoch is done, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while let Some((_, end)) = self.next_step()? {
            if end {
                on_epoch(self)?;
            }
        }
        Ok(())
    }
}

pub fn load_or_generate(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        Some(p) => read_dataset(p),
        None => generate(&config.synthetic, config.data_seed),
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Full training run writing `checkpoint.bin` and `metrics.csv` to the
/// configured output directory after every epoch. Resumes from
/// `config.resume` when set.
pub fn train(config: &RunConfig) -> Result<Trainer> {
    let dataset = load_or_generate(config)?;
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    let mut trainer = match &config.resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let mut log = match fs::read_to_string(out.join(METRICS_FILE)) {
                Ok(text) => MetricsLog::from_csv(&text)?,
                Err(_) => MetricsLog::default(),
            };
            log.truncate_after(ck.step);
            let mut t = Trainer::from_checkpoint(ck, dataset, log)?;
            // the run may extend the number of epochs or move the outputs
            t.config.epochs = config.epochs;
            t.config.out_dir = config.out_dir.clone();
            t
        }
        None => Trainer::new(config.clone(), dataset)?,
    };
    trainer.run(|t| save_outputs(t, &out))?;
    save_outputs(&trainer, &out)?;
    Ok(trainer)
}

fn save_outputs(t: &Trainer, dir: &Path) -> Result<()> {
    t.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(METRICS_FILE), t.metrics.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::LossKind;
    use crate::data::SyntheticSpec;
    use crate::math::check_gradients;
    use crate::model::ModelConfig;
    use crate::stats::mann_kendall_decreasing;

    fn tiny(loss: LossKind, k: usize, m: usize) -> RunConfig {
        RunConfig {
            loss,
            predictions: k,
            window: m,
            negatives: 4,
            model: ModelConfig { dim: 8, hidden: 8, predictions: k, ..ModelConfig::default() },
            batch_size: 4,
            groups: 2,
            epochs: 1,
            eval_sequences: 2,
            synthetic: SyntheticSpec { channels: 2, sequences_per_channel: 8, length: 256, ..SyntheticSpec::default() },
            ..RunConfig::default()
        }
    }

    fn trainer(config: RunConfig) -> Trainer {
        let data = generate(&config.synthetic, config.data_seed).unwrap();
        Trainer::new(config, data).unwrap()
    }

    fn flat(model: &Model<f32>) -> Vec<f32> {
        model.parameters().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn one_epoch_logs_one_row_per_batch() {
        let mut t = trainer(tiny(LossKind::Aligned, 2, 4));
        t.run(|_| Ok(())).unwrap();
        // 8 sequences per channel in batches of 4
        assert_eq!(t.metrics.losses().len(), 4);
        assert_eq!(t.step_count(), 4);
        assert!(t.finished());
        assert!(t.next_step().unwrap().is_none());
    }

    #[test]
    fn identical_seeds_give_identical_logs_and_weights() {
        let run = || {
            let mut t = trainer(RunConfig { epochs: 2, eval_every: 1, ..tiny(LossKind::Aligned, 2, 4) });
            t.run(|_| Ok(())).unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a.metrics.deterministic_csv(), b.metrics.deterministic_csv());
        assert_eq!(a.metrics.evals("probe_accuracy_val").len(), 2);
        assert_eq!(flat(&a.model), flat(&b.model));
    }

    #[test]
    fn zero_learning_rate_freezes_the_model() {
        let mut c = tiny(LossKind::Aligned, 2, 4);
        c.optimizer.learning_rate = 0.0;
        let mut t = trainer(c);
        let before = flat(&t.model);
        t.run(|_| Ok(())).unwrap();
        assert_eq!(before, flat(&t.model));
    }

    #[test]
    fn step_on_a_batch_lowers_its_loss() {
        let mut lower = 0;
        let trials = 20;
        for seed in 0..trials {
            let mut t = trainer(RunConfig { init_seed: seed, train_seed: 100 + seed, ..tiny(LossKind::Aligned, 2, 4) });
            let batch = t.epoch_batches().unwrap()[0].clone();
            let rng = t.rng.clone();
            let first = t.train_step(&batch).unwrap().loss;
            t.rng = rng;
            let second = t.gradients(&batch).unwrap().loss as f64;
            lower += usize::from(second < first);
        }
        assert!(lower * 100 >= 95 * trials as usize, "{lower}/{trials}");
    }

    #[test]
    fn score_counter_follows_positions() {
        for (loss, k, m) in [(LossKind::Aligned, 2, 4), (LossKind::Diagonal, 4, 4)] {
            let mut t = trainer(tiny(loss, k, m));
            let batch = t.epoch_batches().unwrap()[0].clone();
            let out = t.gradients(&batch).unwrap();
            let n = t.config.negatives;
            assert_eq!(out.stats.score_evaluations, (out.stats.positions * k * (m + n)) as u64);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut t = trainer(tiny(LossKind::Aligned, 2, 4));
        let batch = t.epoch_batches().unwrap()[0].clone();
        let out = t.gradients(&batch).unwrap();
        for ((name, _), g) in t.model.parameters().iter().zip(&out.grads) {
            assert!(g.data().iter().any(|v| *v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume_are_exact() {
        let config = RunConfig { epochs: 2, ..tiny(LossKind::Aligned, 2, 4) };
        let mut straight = trainer(config.clone());
        straight.run(|_| Ok(())).unwrap();

        let mut first = trainer(config.clone());
        for _ in 0..3 {
            first.next_step().unwrap();
        }
        let bytes = first.checkpoint().to_bytes();
        let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let mut resumed = Trainer::from_checkpoint(ck, first.dataset.clone(), first.metrics.clone()).unwrap();
        resumed.run(|_| Ok(())).unwrap();
        assert_eq!(resumed.metrics.deterministic_csv(), straight.metrics.deterministic_csv());
        assert_eq!(flat(&resumed.model), flat(&straight.model));
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn train_writes_outputs_and_resumes_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig { epochs: 1, out_dir: dir.path().join("a"), ..tiny(LossKind::Aligned, 2, 4) };
        train(&config).unwrap();
        let ck = config.out_dir.join(CHECKPOINT_FILE);
        assert!(ck.exists());
        let resumed = train(&RunConfig { epochs: 2, resume: Some(ck), ..config.clone() }).unwrap();
        let straight = train(&RunConfig { epochs: 2, out_dir: dir.path().join("b"), ..config }).unwrap();
        let a = fs::read_to_string(resumed.config.out_dir.join(METRICS_FILE)).unwrap();
        let b = fs::read_to_string(straight.config.out_dir.join(METRICS_FILE)).unwrap();
        let a = MetricsLog::from_csv(&a).unwrap();
        let b = MetricsLog::from_csv(&b).unwrap();
        assert_eq!(a.deterministic_csv(), b.deterministic_csv());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let mut log = MetricsLog::default();
        log.push_step(1, 2.5, 2.75).unwrap();
        log.push_step(2, 2.25, 2.5).unwrap();
        log.push_eval(2, 10.0, "probe_accuracy_val", 0.5);
        assert!(log.push_step(2, 1.0, 1.0).is_err());
        assert_eq!(MetricsLog::from_csv(&log.to_csv()).unwrap(), log);
        assert!(log.to_csv().starts_with("step,wall_ms,loss,metric,value\n1,2.500,2.75,,\n"));
        let mut cut = log.clone();
        cut.truncate_after(1);
        assert_eq!(cut.rows.len(), 1);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let config = ModelConfig { dim: 4, hidden: 4, predictions: 2, ..ModelConfig::default() };
        let model = Model::<f64>::init(config, 7).unwrap();
        let spec = ContrastiveSpec { k: 2, m: 3, kind: crate::alignment::LossKind::Aligned };
        let samples: Vec<Vec<f64>> = (0..2)
            .map(|s| (0..64).map(|i| ((i * (s + 3)) as f64 * 0.37).sin()).collect())
            .collect();
        let lens: Vec<usize> = samples.iter().map(|s| model.config.latent_len(s.len()).unwrap()).collect();
        let positions: Vec<usize> = lens.iter().map(|l| l - spec.m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_negatives(&lens, &[0, 0], &positions, 2, &mut rng).unwrap();
        let point: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        let r = check_gradients(
            |g, vars| {
                let bound = model.bind_vars(vars.to_vec())?;
                let mut zs = Vec::new();
                let mut preds = Vec::new();
                for (s, &len) in samples.iter().zip(&lens) {
                    let (z, c) = model.forward_graph(g, &bound, s)?;
                    preds.push(model.predict_graph(g, &bound, c, len - spec.m)?);
                    zs.push(z);
                }
                Ok(contrastive_loss(g, &preds, &zs, &plan, &spec)?.0)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn loss_starts_near_chance_and_decreases() {
        let negatives = 4;
        let mut t = trainer(RunConfig { epochs: 5, ..tiny(LossKind::Diagonal, 4, 4) });
        let mut means = Vec::new();
        t.run(|t| {
            let l = t.metrics.losses();
            let per = l.len() / t.epoch() as usize;
            let last = &l[l.len() - per..];
            means.push(last.iter().map(|r| r.1).sum::<f64>() / per as f64);
            Ok(())
        })
        .unwrap();
        assert!(means[0] < ((negatives + 1) as f64).ln() + 0.1, "{means:?}");
        let (_, p) = mann_kendall_decreasing(&means).unwrap();
        assert!(p < 0.05, "{means:?} p={p}");
    }
}
