//! Loss-only timing of aligned versus plain CPC scoring.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::KeyValues;
use crate::alignment::{acpc_loss, count_score_evaluations, cpc_loss, sample_negatives, LossStats};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::model::{ContextSequence, LatentSequence, PredictionHeads};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub predictions: usize,
    pub window: usize,
    pub negatives: usize,
    pub dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub latents: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { predictions: 4, window: 12, negatives: 128, dim: 32, hidden: 32, batch_size: 8, latents: 126, repeats: 5, seed: 0 }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = Self::default();
        let c = Self {
            predictions: kv.take_or("predictions", d.predictions)?,
            window: kv.take_or("window", d.window)?,
            negatives: kv.take_or("negatives", d.negatives)?,
            dim: kv.take_or("dim", d.dim)?,
            hidden: kv.take_or("hidden", d.hidden)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            latents: kv.take_or("latents", d.latents)?,
            repeats: kv.take_or("repeats", d.repeats)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        if c.predictions == 0 || c.predictions > c.window {
            return Err(Error::Config(format!("need 1 <= predictions <= window, got {} and {}", c.predictions, c.window)));
        }
        if c.latents <= c.window || c.batch_size < 2 || c.repeats == 0 || c.negatives == 0 || c.dim == 0 || c.hidden == 0 {
            return Err(Error::Config("bench needs latents > window, batch_size >= 2 and positive sizes".into()));
        }
        Ok(c)
    }
}

/// Timing of one scoring configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub predictions: usize,
    pub window: usize,
    /// Fastest of the interleaved repeats, in milliseconds.
    pub wall_ms: f64,
    pub stats: LossStats,
    /// Evaluations per anchor from the cost formula.
    pub per_position: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub aligned: BenchRow,
    pub plain: BenchRow,
}

impl BenchReport {
    pub fn wall_ratio(&self) -> f64 {
        self.aligned.wall_ms / self.plain.wall_ms
    }

    pub fn count_ratio(&self) -> f64 {
        self.aligned.stats.score_evaluations as f64 / self.plain.stats.score_evaluations as f64
    }

    /// Whether the instrumented counters equal the cost formula exactly.
    pub fn counts_match(&self) -> bool {
        [self.aligned, self.plain].iter().all(|r| r.stats.score_evaluations == r.stats.positions as u64 * r.per_position)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("config,predictions,window,wall_ms,positions,score_evaluations,per_position\n");
        for (name, r) in [("acpc", &self.aligned), ("cpc", &self.plain)] {
            let _ = writeln!(
                s,
                "{name},{},{},{:.3},{},{},{}",
                r.predictions, r.window, r.wall_ms, r.stats.positions, r.stats.score_evaluations, r.per_position
            );
        }
        let _ = writeln!(s, "# wall ratio {:.3}, count ratio {:.3}", self.wall_ratio(), self.count_ratio());
        s
    }
}

/// Times the loss (forward and backward) on random latents and contexts
/// for `K = predictions, M = window` against `K = M = window`.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut random = |shape: &[usize], scale: f32| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let (b, t, d, h) = (config.batch_size, config.latents, config.dim, config.hidden);
    let latents: Vec<LatentSequence<f32>> = (0..b).map(|_| LatentSequence::new(random(&[t, d], 1.0)).unwrap()).collect();
    let contexts: Vec<ContextSequence<f32>> = (0..b).map(|_| ContextSequence::new(random(&[t, h], 1.0)).unwrap()).collect();
    let heads = |k: usize, rng_w: Tensor<f32>, rng_b: Tensor<f32>| PredictionHeads::new(k, rng_w, rng_b);
    let scale = 1.0 / (h as f32).sqrt();
    let aligned_heads = heads(config.predictions, random(&[config.predictions * d, h], scale), random(&[config.predictions * d], 0.1))?;
    let plain_heads = heads(config.window, random(&[config.window * d, h], scale), random(&[config.window * d], 0.1))?;

    let lengths = vec![t; b];
    let groups = vec![0; b];
    let positions = vec![t - config.window; b];
    let mut nrng = ChaCha8Rng::seed_from_u64(config.seed ^ 1);
    let plan = sample_negatives(&lengths, &groups, &positions, config.negatives, &mut nrng)?;

    let run = |aligned: bool| -> Result<(f64, LossStats)> {
        let start = Instant::now();
        let out = if aligned {
            acpc_loss(&latents, &contexts, &aligned_heads, &plan, config.predictions, config.window)?
        } else {
            cpc_loss(&latents, &contexts, &plain_heads, &plan, config.window)?
        };
        Ok((start.elapsed().as_secs_f64() * 1e3, out.stats))
    };
    let row = |aligned: bool, wall_ms: f64, stats: LossStats| -> Result<BenchRow> {
        let k = if aligned { config.predictions } else { config.window };
        Ok(BenchRow {
            predictions: k,
            window: config.window,
            wall_ms,
            stats,
            per_position: count_score_evaluations(k, config.window, config.negatives)?,
        })
    };
    // one warm-up of each, then alternate so drift in machine state hits both
    run(false)?;
    run(true)?;
    let (mut best_plain, mut best_aligned) = (f64::INFINITY, f64::INFINITY);
    let (mut plain_stats, mut aligned_stats) = (LossStats::default(), LossStats::default());
    for _ in 0..config.repeats {
        let (ms, s) = run(false)?;
        best_plain = best_plain.min(ms);
        plain_stats = s;
        let (ms, s) = run(true)?;
        best_aligned = best_aligned.min(ms);
        aligned_stats = s;
    }
    let plain = row(false, best_plain, plain_stats)?;
    let aligned = row(true, best_aligned, aligned_stats)?;
    Ok(BenchReport { aligned, plain })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_counts_follow_the_formula() {
        let cfg = BenchConfig { negatives: 8, batch_size: 2, latents: 20, repeats: 1, dim: 4, hidden: 4, ..BenchConfig::default() };
        let r = bench(&cfg).unwrap();
        assert!(r.counts_match());
        assert_eq!(r.aligned.per_position, 4 * (12 + 8));
        assert_eq!(r.plain.per_position, 12 * (12 + 8));
        assert_eq!(r.aligned.stats.positions, 2 * 8);
        assert!((r.count_ratio() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn parse_rejects_bad_sizes() {
        assert!(BenchConfig::parse("predictions = 13\n").is_err());
        assert!(BenchConfig::parse("latents = 12\n").is_err());
        assert_eq!(BenchConfig::parse("# defaults\n").unwrap(), BenchConfig::default());
    }
}
