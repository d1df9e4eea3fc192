//! Flat `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, every key may appear once
//! and every key must be understood by the consumer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alignment::LossKind;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Parsed key/value pairs; typed getters remove the keys they read so that
/// [`KeyValues::finish`] can report the leftovers.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
            }
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: {key} must be a comma-separated list of integers"))),
        }
    }

    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads the generator keys shared by `gen` specs and run configs.
fn take_synthetic(kv: &mut KeyValues) -> Result<(SyntheticSpec, u64)> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        alphabet: kv.take_or("alphabet", d.alphabet)?,
        min_duration: kv.take_or("min_duration", d.min_duration)?,
        max_duration: kv.take_or("max_duration", d.max_duration)?,
        samples_per_frame: kv.take_or("samples_per_frame", d.samples_per_frame)?,
        noise_std: kv.take_or("noise_std", d.noise_std)?,
        channels: kv.take_or("channels", d.channels)?,
        length: kv.take_or("length", d.length)?,
        sequences_per_channel: kv.take_or("sequences_per_channel", d.sequences_per_channel)?,
        embedding_dim: kv.take_or("embedding_dim", d.embedding_dim)?,
        template_scale: kv.take_or("template_scale", d.template_scale)?,
        gain_spread: kv.take_or("gain_spread", d.gain_spread)?,
        offset_spread: kv.take_or("offset_spread", d.offset_spread)?,
        filter_spread: kv.take_or("filter_spread", d.filter_spread)?,
    };
    let seed = kv.take_or("data_seed", 0u64)?;
    Ok((spec, seed))
}

fn write_synthetic(out: &mut String, spec: &SyntheticSpec, seed: u64) {
    let _ = writeln!(out, "alphabet = {}", spec.alphabet);
    let _ = writeln!(out, "min_duration = {}", spec.min_duration);
    let _ = writeln!(out, "max_duration = {}", spec.max_duration);
    let _ = writeln!(out, "samples_per_frame = {}", spec.samples_per_frame);
    let _ = writeln!(out, "noise_std = {}", spec.noise_std);
    let _ = writeln!(out, "channels = {}", spec.channels);
    let _ = writeln!(out, "length = {}", spec.length);
    let _ = writeln!(out, "sequences_per_channel = {}", spec.sequences_per_channel);
    let _ = writeln!(out, "embedding_dim = {}", spec.embedding_dim);
    let _ = writeln!(out, "template_scale = {}", spec.template_scale);
    let _ = writeln!(out, "gain_spread = {}", spec.gain_spread);
    let _ = writeln!(out, "offset_spread = {}", spec.offset_spread);
    let _ = writeln!(out, "filter_spread = {}", spec.filter_spread);
    let _ = writeln!(out, "data_seed = {seed}");
}

/// Generator settings for `acpc gen`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub spec: SyntheticSpec,
    pub seed: u64,
}

impl GenConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let (spec, seed) = take_synthetic(&mut kv)?;
        kv.finish()?;
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { spec, seed })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_synthetic(&mut s, &self.spec, self.seed);
        s
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: 5.0 }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub loss: LossKind,
    /// Number of predictions `K`.
    pub predictions: usize,
    /// Number of upcoming latents `M` the predictions are aligned to.
    pub window: usize,
    pub negatives: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub groups: usize,
    pub epochs: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    /// Linear-probe evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Sequences per channel used by the periodic probe.
    pub eval_sequences: usize,
    pub eval_seed: u64,
    /// Dataset file; when absent the corpus is generated from the synthetic keys.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Aligned,
            predictions: 8,
            window: 12,
            negatives: 16,
            model: ModelConfig { predictions: 8, ..ModelConfig::default() },
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            groups: 2,
            epochs: 50,
            init_seed: 1,
            train_seed: 2,
            eval_every: 0,
            eval_sequences: 10,
            eval_seed: 3,
            data: None,
            synthetic: SyntheticSpec::default(),
            data_seed: 0,
            out_dir: PathBuf::from("run"),
            resume: None,
        }
    }
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Aligned => "acpc",
        LossKind::Diagonal => "cpc",
    }
}

impl RunConfig {
    /// Parses and validates a run config. Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let loss = match kv.take::<String>("loss")?.as_deref() {
            None | Some("acpc") => LossKind::Aligned,
            Some("cpc") => LossKind::Diagonal,
            Some(other) => return Err(Error::Config(format!("loss must be cpc or acpc, got {other:?}"))),
        };
        let predictions = kv.take_or("predictions", d.predictions)?;
        let window = match (loss, kv.take::<usize>("window")?) {
            (LossKind::Diagonal, None) => predictions,
            (LossKind::Diagonal, Some(m)) if m != predictions => {
                return Err(Error::Config(format!("loss = cpc requires window = predictions, got {m} vs {predictions}")))
            }
            (_, Some(m)) => m,
            (LossKind::Aligned, None) => d.window,
        };
        let dm = ModelConfig::default();
        let model = ModelConfig {
            conv_widths: kv.take_list("conv_widths")?.unwrap_or(dm.conv_widths),
            conv_strides: kv.take_list("conv_strides")?.unwrap_or(dm.conv_strides),
            dim: kv.take_or("dim", dm.dim)?,
            hidden: kv.take_or("hidden", dm.hidden)?,
            context_layers: kv.take_or("context_layers", dm.context_layers)?,
            predictions,
        };
        let od = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            learning_rate: kv.take_or("learning_rate", od.learning_rate)?,
            beta1: kv.take_or("beta1", od.beta1)?,
            beta2: kv.take_or("beta2", od.beta2)?,
            epsilon: kv.take_or("adam_epsilon", od.epsilon)?,
            clip_norm: kv.take_or("clip_norm", od.clip_norm)?,
        };
        let (synthetic, data_seed) = take_synthetic(&mut kv)?;
        let cfg = Self {
            loss,
            predictions,
            window,
            negatives: kv.take_or("negatives", d.negatives)?,
            model,
            optimizer,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            groups: kv.take_or("groups", d.groups)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            init_seed: kv.take_or("init_seed", d.init_seed)?,
            train_seed: kv.take_or("train_seed", d.train_seed)?,
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            eval_sequences: kv.take_or("eval_sequences", d.eval_sequences)?,
            eval_seed: kv.take_or("eval_seed", d.eval_seed)?,
            data: kv.take::<String>("data")?.map(PathBuf::from),
            synthetic,
            data_seed,
            out_dir: kv.take::<String>("out_dir")?.map_or(d.out_dir, PathBuf::from),
            resume: kv.take::<String>("resume")?.map(PathBuf::from),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.predictions == 0 || self.predictions > self.window {
            return bad(format!("need 1 <= predictions <= window, got {} > {}", self.predictions, self.window));
        }
        if self.loss == LossKind::Diagonal && self.window != self.predictions {
            return bad("loss = cpc requires window = predictions".into());
        }
        if self.model.predictions != self.predictions {
            return bad("model head count must equal predictions".into());
        }
        self.model.validate()?;
        if self.negatives == 0 {
            return bad("negatives must be positive".into());
        }
        if self.batch_size < 2 || self.groups == 0 || self.groups > self.batch_size {
            return bad(format!("need batch_size >= 2 and 1 <= groups <= batch_size, got {} / {}", self.batch_size, self.groups));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0 && o.clip_norm > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.data.is_none() {
            self.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "loss = {}", loss_name(self.loss));
        let _ = writeln!(s, "predictions = {}", self.predictions);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "negatives = {}", self.negatives);
        let _ = writeln!(s, "conv_widths = {}", join(&self.model.conv_widths));
        let _ = writeln!(s, "conv_strides = {}", join(&self.model.conv_strides));
        let _ = writeln!(s, "dim = {}", self.model.dim);
        let _ = writeln!(s, "hidden = {}", self.model.hidden);
        let _ = writeln!(s, "context_layers = {}", self.model.context_layers);
        let o = &self.optimizer;
        let _ = writeln!(s, "learning_rate = {}", o.learning_rate);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "adam_epsilon = {}", o.epsilon);
        let _ = writeln!(s, "clip_norm = {}", o.clip_norm);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        let _ = writeln!(s, "train_seed = {}", self.train_seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_sequences = {}", self.eval_sequences);
        let _ = writeln!(s, "eval_seed = {}", self.eval_seed);
        if let Some(p) = &self.data {
            let _ = writeln!(s, "data = {}", p.display());
        }
        write_synthetic(&mut s, &self.synthetic, self.data_seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if let Some(p) = &self.resume {
            let _ = writeln!(s, "resume = {}", p.display());
        }
        s
    }
}
