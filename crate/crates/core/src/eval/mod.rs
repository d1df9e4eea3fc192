//! Analyses of learned representations: linear probe, clustering, ABX and
//! similarity structure.

mod abx;
mod cluster;
mod probe;
mod similarity;

use std::fmt::Write as _;
use std::ops::Range;

pub use abx::{abx_error, angular_distance, dtw_distance, AbxResult, ABX_TRIPLES};
pub use cluster::{kmeans, nmi, KMeans};
pub use probe::{linear_probe, linear_probe_with_labels, ProbeResult, PROBE_EPOCHS, PROBE_LEARNING_RATE};
pub use similarity::{
    cosine, read_similarity, self_similarity_matrix, similarity_from_bytes, similarity_stats, similarity_to_bytes,
    stride_periodicity, write_similarity, Histogram, SimilarityMatrix, SimilarityStats, HISTOGRAM_BINS,
    SIMILARITY_MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, RawSequence};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{Model, ModelConfig};

/// Frozen features with their ground truth. Rows of one sequence are
/// contiguous and in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    frames: Vec<f64>,
    pub labels: Vec<u16>,
    pub sequence: Vec<u32>,
    pub channel: Vec<u16>,
    pub position: Vec<u32>,
}

impl FeatureTable {
    pub fn new(
        dim: usize,
        frames: Vec<f64>,
        labels: Vec<u16>,
        sequence: Vec<u32>,
        channel: Vec<u16>,
        position: Vec<u32>,
    ) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || frames.len() != n * dim || sequence.len() != n || channel.len() != n || position.len() != n {
            return Err(Error::Shape(format!("feature table of {n} frames with width {dim} has inconsistent columns")));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {} of frame {}", i % dim, i / dim)));
        }
        for i in 1..n {
            if sequence[i] == sequence[i - 1] && position[i] <= position[i - 1] {
                return Err(Error::Invalid(format!("frame {i} is out of time order")));
            }
        }
        Ok(Self { dim, frames, labels, sequence, channel, position })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    /// Row ranges of maximal runs with the same sequence id.
    pub fn sequence_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let mut start = 0;
        (1..=self.len()).filter_map(move |i| {
            if i == self.len() || self.sequence[i] != self.sequence[start] {
                let r = start..i;
                start = i;
                Some(r)
            } else {
                None
            }
        })
    }
}

/// Ground-truth label of latent `j`: the frame containing the centre of its
/// receptive field.
pub fn latent_labels(config: &ModelConfig, seq: &RawSequence, latents: usize) -> Vec<u16> {
    let spf = seq.samples_per_frame().max(1);
    (0..latents)
        .map(|j| {
            let frame = (config.latent_center(j) / spf).min(seq.frame_labels.len() - 1);
            seq.frame_labels[frame]
        })
        .collect()
}

/// Latent (`z`) and context (`c`) tables for the chosen sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub latents: FeatureTable,
    pub contexts: FeatureTable,
}

pub fn extract_features<T: Real>(model: &Model<T>, dataset: &Dataset, indices: &[usize]) -> Result<Features> {
    let mut z_rows = Vec::new();
    let mut c_rows = Vec::new();
    let (mut labels, mut seq, mut chan, mut pos) = (vec![], vec![], vec![], vec![]);
    for &i in indices {
        let s = dataset.sequences.get(i).ok_or_else(|| Error::Invalid(format!("sequence {i} out of range")))?;
        let samples: Vec<T> = s.samples.iter().map(|&v| T::lit(v as f64)).collect();
        let (z, c) = model.features(&samples)?;
        z_rows.extend(z.as_tensor().data().iter().map(|v| v.as_f64()));
        c_rows.extend(c.as_tensor().data().iter().map(|v| v.as_f64()));
        let n = z.len();
        labels.extend(latent_labels(&model.config, s, n));
        seq.extend(std::iter::repeat_n(i as u32, n));
        chan.extend(std::iter::repeat_n(s.channel, n));
        pos.extend(0..n as u32);
    }
    Ok(Features {
        latents: FeatureTable::new(model.config.dim, z_rows, labels.clone(), seq.clone(), chan.clone(), pos.clone())?,
        contexts: FeatureTable::new(model.config.hidden, c_rows, labels, seq, chan, pos)?,
    })
}

/// Up to `per_channel` sequences of every channel, in dataset order.
pub fn eval_subset(dataset: &Dataset, per_channel: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for c in dataset.channels() {
        out.extend(dataset.sequences.iter().enumerate().filter(|(_, s)| s.channel == c).map(|(i, _)| i).take(per_channel));
    }
    out
}

pub const KMEANS_SWEEP: [usize; 4] = [8, 16, 32, 64];
pub const KMEANS_ITERS: usize = 50;

/// What [`evaluate`] computes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub probe_epochs: usize,
    pub kmeans_sweep: Vec<usize>,
    pub kmeans_iters: usize,
    pub abx_triples: usize,
    pub period: usize,
}

impl EvalOptions {
    pub fn for_model(config: &ModelConfig, seed: u64) -> Self {
        Self {
            seed,
            probe_epochs: PROBE_EPOCHS,
            kmeans_sweep: KMEANS_SWEEP.to_vec(),
            kmeans_iters: KMEANS_ITERS,
            abx_triples: ABX_TRIPLES,
            period: config.rate_reduction(),
        }
    }
}

/// Metric rows `(name, split, value)` plus the two similarity histograms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, String, f64)>,
    pub histograms: Vec<(String, Histogram)>,
}

impl EvalReport {
    pub fn push(&mut self, name: &str, split: &str, value: f64) {
        self.rows.push((name.to_string(), split.to_string(), value));
    }

    pub fn get(&self, name: &str, split: &str) -> Option<f64> {
        self.rows.iter().find(|(n, s, _)| n == name && s == split).map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,split,value\n");
        for (n, sp, v) in &self.rows {
            let _ = writeln!(s, "{n},{sp},{v}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("name,split,value") {
            return Err(Error::Invalid("missing EvalReport header".into()));
        }
        let mut out = Self::default();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            let [n, sp, v] = parts[..] else {
                return Err(Error::Invalid(format!("row {}: expected 3 fields", i + 1)));
            };
            let v: f64 = v.parse().map_err(|_| Error::Invalid(format!("row {}: bad value {v:?}", i + 1)))?;
            out.push(n, sp, v);
        }
        Ok(out)
    }
}

/// Full battery on precomputed features. Probe and ABX use contexts,
/// clustering, similarity and periodicity use latents.
pub fn evaluate_features(features: &Features, opts: &EvalOptions) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let probe = linear_probe(&features.contexts, opts.seed, opts.probe_epochs)?;
    report.push("probe_accuracy", "train", probe.train_accuracy);
    report.push("probe_accuracy", "val", probe.val_accuracy);
    let mut shuffled = features.contexts.labels.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed));
    let control = linear_probe_with_labels(&features.contexts, &shuffled, opts.seed, opts.probe_epochs)?;
    report.push("probe_accuracy_shuffled", "val", control.val_accuracy);
    let zprobe = linear_probe(&features.latents, opts.seed, opts.probe_epochs)?;
    report.push("probe_accuracy_latent", "val", zprobe.val_accuracy);

    let z = &features.latents;
    for &k in &opts.kmeans_sweep {
        if k > z.len() {
            continue;
        }
        let km = kmeans(z.frames(), z.dim(), k, opts.seed, opts.kmeans_iters)?;
        report.push(&format!("kmeans_distortion_k{k}"), "latent", km.distortion);
        report.push(&format!("nmi_k{k}"), "latent", nmi(&km.assignments, &z.labels)?);
    }

    let sim = similarity_stats(z, opts.seed)?;
    report.push("cosine_consecutive_mean", "latent", sim.consecutive.mean);
    report.push("cosine_consecutive_median", "latent", sim.consecutive.median);
    report.push("cosine_random_mean", "latent", sim.random.mean);
    report.push("cosine_random_median", "latent", sim.random.median);
    report.histograms.push(("consecutive".into(), sim.consecutive));
    report.histograms.push(("random".into(), sim.random));
    report.push("stride_periodicity", "latent", stride_periodicity(z, opts.period)?);

    let abx = abx_error(&features.contexts, opts.seed, opts.abx_triples)?;
    report.push("abx_error", "within", abx.within);
    report.push("abx_error", "across", abx.across);
    Ok(report)
}

pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset, indices: &[usize], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_features(&extract_features(model, dataset, indices)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    #[test]
    fn table_validation() {
        assert!(FeatureTable::new(2, vec![0.0; 3], vec![0, 0], vec![0; 2], vec![0; 2], vec![0, 1]).is_err());
        assert!(FeatureTable::new(1, vec![0.0, f64::NAN], vec![0, 0], vec![0; 2], vec![0; 2], vec![0, 1]).is_err());
        assert!(FeatureTable::new(1, vec![0.0; 2], vec![0, 0], vec![0; 2], vec![0; 2], vec![1, 1]).is_err());
        let t = FeatureTable::new(1, vec![0.0; 5], vec![0; 5], vec![3, 3, 1, 1, 1], vec![0; 5], vec![0, 1, 0, 1, 2]).unwrap();
        assert_eq!(t.sequence_ranges().collect::<Vec<_>>(), vec![0..2, 2..5]);
    }

    #[test]
    fn latent_labels_use_receptive_field_centre() {
        let cfg = ModelConfig::default();
        let seq = RawSequence { samples: vec![0.0; 32], frame_labels: vec![0, 1, 2, 3], channel: 0 };
        // receptive field 20 samples -> centre offset 9; latent 1 starts at 8
        assert_eq!(cfg.latent_center(1), 17);
        assert_eq!(latent_labels(&cfg, &seq, 2), vec![1, 2]);
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = EvalReport::default();
        r.push("probe_accuracy", "val", 0.25);
        r.push("abx_error", "within", 0.125);
        let text = r.to_csv();
        assert_eq!(text, "name,split,value\nprobe_accuracy,val,0.25\nabx_error,within,0.125\n");
        assert_eq!(EvalReport::from_csv(&text).unwrap().rows, r.rows);
        assert!(EvalReport::from_csv("x\n").is_err());
    }

    #[test]
    fn battery_runs_on_an_untrained_model() {
        let spec = SyntheticSpec { channels: 2, sequences_per_channel: 4, length: 512, ..SyntheticSpec::default() };
        let d = generate(&spec, 1).unwrap();
        let cfg = ModelConfig { dim: 8, hidden: 8, predictions: 2, ..ModelConfig::default() };
        let model = Model::<f32>::init(cfg.clone(), 2).unwrap();
        let opts = EvalOptions { probe_epochs: 20, abx_triples: 50, kmeans_sweep: vec![8, 16], ..EvalOptions::for_model(&cfg, 3) };
        let idx = eval_subset(&d, 3);
        assert_eq!(idx, vec![0, 1, 2, 4, 5, 6]);
        let r = evaluate(&model, &d, &idx, &opts).unwrap();
        for (n, s, v) in &r.rows {
            assert!(v.is_finite(), "{n}/{s}");
            if n.starts_with("probe") || n.starts_with("abx") || n.starts_with("nmi") {
                assert!((0.0..=1.0).contains(v), "{n}/{s} = {v}");
            }
        }
        assert!(r.get("nmi_k16", "latent").is_some());
        assert_eq!(r, evaluate(&model, &d, &idx, &opts).unwrap());
    }
}
