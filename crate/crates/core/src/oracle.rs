//! Independent checks of the fast paths against exhaustive or closed-form
//! references. Each check reports its worst error and whether it stayed
//! inside tolerance; `acpc oracle` runs them all.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    acpc_loss, best_path, binomial, count_score_evaluations, cpc_loss, ctc_blank_trick_score, enumerate_paths,
    expected_path_score, sample_negatives, score_matrix, ContrastiveSpec, LossKind, ScoreMatrix,
};
use crate::error::Result;
use crate::eval::{angular_distance, dtw_distance, kmeans, nmi};
use crate::math::{check_gradients, logsumexp, Tensor};
use crate::model::{ContextSequence, LatentSequence, Model, ModelConfig, PredictionHeads};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Worst deviation seen, in the check's own units.
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub millis: f64,
}

impl fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} cases={:<6} max_error={:.3e} tol={:.0e} ({:.0} ms)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            self.millis
        )
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    worst: f64,
    failed: bool,
    cases: usize,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, tolerance, worst: 0.0, failed: false, cases: 0, start: Instant::now() }
    }

    /// Records an error that must stay below the tolerance.
    fn error(&mut self, e: f64) {
        self.cases += 1;
        if e.is_nan() || e >= self.tolerance {
            self.failed = true;
        }
        if e.is_nan() || e > self.worst {
            self.worst = e;
        }
    }

    /// Records a condition that must hold exactly.
    fn require(&mut self, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failed = true;
            self.worst = f64::INFINITY;
        }
    }

    fn finish(self) -> OracleCheck {
        OracleCheck {
            name: self.name,
            passed: !self.failed && self.cases > 0,
            max_error: self.worst,
            tolerance: self.tolerance,
            cases: self.cases,
            millis: self.start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

fn random_scores(k: usize, m: usize, rng: &mut ChaCha8Rng) -> ScoreMatrix<f64> {
    ScoreMatrix::new(k, m, (0..k * m).map(|_| rng.gen_range(-8.0..0.0)).collect()).expect("valid shape")
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Sum-over-paths and Viterbi against explicit enumeration for every
/// `1 <= K <= M <= max_m`, plus path counts and cell posteriors.
pub fn alignment_paths(seed: u64, matrices: usize, max_m: usize) -> Result<[OracleCheck; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expected = Tally::new("expected_path_score", 1e-9);
    let mut best = Tally::new("best_path", 1e-12);
    let mut counts = Tally::new("path_count", 0.5);
    let mut occupancy = Tally::new("occupancy", 1e-9);
    for m in 1..=max_m {
        for k in 1..=m {
            let paths = enumerate_paths(k, m)?;
            counts.require(paths.len() as u64 == binomial(m - 1, k - 1));
            for _ in 0..matrices {
                let s = random_scores(k, m, &mut rng);
                let totals: Vec<f64> = paths.iter().map(|p| p.score(&s)).collect();
                let brute = logsumexp(&totals)?;
                let (value, occ) = expected_path_score(&s);
                expected.error((value - brute).abs());

                let brute_max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (path, score) = best_path(&s);
                best.error((score - brute_max).abs().max((path.score(&s) - score).abs()));

                let mut post = vec![0.0; k * m];
                for (p, t) in paths.iter().zip(&totals) {
                    let w = (t - brute).exp();
                    for (col, &row) in p.assignment().iter().enumerate() {
                        post[row * m + col] += w;
                    }
                }
                let worst = post.iter().zip(occ.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                occupancy.error(worst);
            }
        }
    }
    Ok([expected.finish(), best.finish(), counts.finish(), occupancy.finish()])
}

/// The CTC emulation with a pinned blank row recovers the expected path
/// score, and blanks keep no posterior mass.
pub fn blank_trick(seed: u64, matrices: usize) -> Result<[OracleCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identity = Tally::new("blank_trick_identity", 1e-6);
    let mut mass = Tally::new("blank_mass", 1e-20);
    for _ in 0..matrices {
        let m = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=m);
        let s = random_scores(k, m, &mut rng);
        let trick = ctc_blank_trick_score(&s);
        identity.error((expected_path_score(&s).0 - trick.unnormalized()).abs());
        mass.error(trick.blank_mass);
    }
    Ok([identity.finish(), mass.finish()])
}

/// With `K == M` the aligned loss is the plain loss, bit for bit, including
/// every gradient.
pub fn cpc_equivalence(seed: u64, batches: usize) -> Result<OracleCheck> {
    let mut t = Tally::new("cpc_equivalence", 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..batches {
        let (k, d, h, batch) = (rng.gen_range(1..=6), 3, 4, 3);
        let lens: Vec<usize> = (0..batch).map(|_| rng.gen_range(k + 1..k + 10)).collect();
        let latents: Vec<_> = lens.iter().map(|&l| LatentSequence::new(random_tensor(&[l, d], &mut rng))).collect::<Result<_>>()?;
        let contexts: Vec<_> = lens.iter().map(|&l| ContextSequence::new(random_tensor(&[l, h], &mut rng))).collect::<Result<_>>()?;
        let heads = PredictionHeads::new(k, random_tensor(&[k * d, h], &mut rng), random_tensor(&[k * d], &mut rng))?;
        let positions: Vec<usize> = lens.iter().map(|l| l - k).collect();
        let plan = sample_negatives(&lens, &vec![0; batch], &positions, 5, &mut rng)?;
        let a = acpc_loss(&latents, &contexts, &heads, &plan, k, k)?;
        let c = cpc_loss(&latents, &contexts, &heads, &plan, k)?;
        let same = a.loss.to_bits() == c.loss.to_bits()
            && a.grad_latents == c.grad_latents
            && a.grad_contexts == c.grad_contexts
            && a.grad_head_weight == c.grad_head_weight
            && a.grad_head_bias == c.grad_head_bias;
        t.require(same);
    }
    Ok(t.finish())
}

/// Reverse-mode gradient of the aligned loss through the whole model against
/// central differences, in double precision.
pub fn model_gradients(seed: u64) -> Result<OracleCheck> {
    let mut t = Tally::new("model_gradients", 1e-4);
    let config = ModelConfig { dim: 4, hidden: 4, predictions: 2, ..ModelConfig::default() };
    let model = Model::<f64>::init(config, seed)?;
    let spec = ContrastiveSpec { k: 2, m: 3, kind: LossKind::Aligned };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let lens: Vec<usize> = samples.iter().map(|s| model.config.latent_len(s.len())).collect::<Result<_>>()?;
    let positions: Vec<usize> = lens.iter().map(|l| l - spec.m).collect();
    let plan = sample_negatives(&lens, &[0, 0], &positions, 2, &mut rng)?;
    let point: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, p)| p.clone()).collect();
    let report = check_gradients(
        |g, vars| {
            let bound = model.bind_vars(vars.to_vec())?;
            let mut zs = Vec::new();
            let mut preds = Vec::new();
            for (s, &len) in samples.iter().zip(&lens) {
                let (z, c) = model.forward_graph(g, &bound, s)?;
                preds.push(model.predict_graph(g, &bound, c, len - spec.m)?);
                zs.push(z);
            }
            Ok(crate::alignment::contrastive_loss(g, &preds, &zs, &plan, &spec)?.0)
        },
        &point,
        1e-6,
    )?;
    t.error(report.max_rel_error);
    t.cases = report.components;
    Ok(t.finish())
}

/// Instrumented dot-product counts equal `K (M + N)` per anchor.
pub fn score_counts(seed: u64) -> Result<OracleCheck> {
    let mut t = Tally::new("score_counts", 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, m, n) in [(1, 1, 1), (4, 12, 128), (12, 12, 128), (8, 12, 16), (3, 7, 5)] {
        let d = 4;
        let mut counter = 0;
        score_matrix(
            &random_tensor(&[k, d], &mut rng),
            &random_tensor(&[m, d], &mut rng),
            &random_tensor(&[n, d], &mut rng),
            &mut counter,
        )?;
        t.require(counter == count_score_evaluations(k, m, n)? && counter == (k * (m + n)) as u64);
    }
    t.require(count_score_evaluations(4, 12, 128)? == 560);
    Ok(t.finish())
}

/// Scores that ignore the context make every cell `-ln(N + 1)`, so the loss
/// is a closed form in `N`, `K` and `M`.
pub fn uniform_loss(seed: u64) -> Result<OracleCheck> {
    let mut t = Tally::new("uniform_scores_loss", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, n, len) = (3, 2, 16, 20);
    let latents: Vec<_> = (0..2).map(|_| LatentSequence::new(random_tensor(&[len, d], &mut rng))).collect::<Result<_>>()?;
    let contexts: Vec<_> = (0..2).map(|_| ContextSequence::new(random_tensor(&[len, h], &mut rng))).collect::<Result<_>>()?;
    for (k, m) in [(12, 12), (8, 12), (4, 12), (1, 5)] {
        let heads = PredictionHeads::new(k, Tensor::zeros(&[k * d, h]), Tensor::zeros(&[k * d]))?;
        let positions = vec![len - m; 2];
        let plan = sample_negatives(&[len, len], &[0, 0], &positions, n, &mut rng)?;
        let out = acpc_loss(&latents, &contexts, &heads, &plan, k, m)?;
        let closed = ((n + 1) as f64).ln() - (binomial(m - 1, k - 1) as f64).ln() / m as f64;
        t.error((out.loss - closed).abs());
    }
    Ok(t.finish())
}

/// DTW against exhaustive path search, and k-means recovering well
/// separated clusters exactly.
pub fn evaluation_references(seed: u64) -> Result<[OracleCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dtw = Tally::new("dtw_brute_force", 1e-12);
    for _ in 0..30 {
        let (la, lb) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let a: Vec<Vec<f64>> = (0..la).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..lb).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        dtw.error((dtw_distance(&ra, &rb)? - brute_dtw(&ra, &rb)).abs());
    }

    let mut clusters = Tally::new("kmeans_separated", 1e-12);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..25 {
            points.push(center[0] + rng.gen_range(-0.5..0.5));
            points.push(center[1] + rng.gen_range(-0.5..0.5));
            labels.push(c);
        }
    }
    let km = kmeans(&points, 2, 4, seed, 50)?;
    clusters.error(1.0 - nmi(&km.assignments, &labels)?);
    Ok([dtw.finish(), clusters.finish()])
}

/// Minimum-cost monotone path by exhaustive search; ties go to the shortest.
fn brute_dtw(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    fn walk(i: usize, j: usize, cost: f64, len: usize, a: &[&[f64]], b: &[&[f64]], best: &mut (f64, usize)) {
        let cost = cost + angular_distance(a[i], b[j]);
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.len() {
            walk(i + 1, j, cost, len, a, b, best);
        }
        if j + 1 < b.len() {
            walk(i, j + 1, cost, len, a, b, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(i + 1, j + 1, cost, len, a, b, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(0, 0, 0.0, 0, a, b, &mut best);
    best.0 / best.1 as f64
}

/// Every oracle at its default size.
pub fn run_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    out.extend(alignment_paths(seed, 100, 7)?);
    out.extend(blank_trick(seed + 1, 100)?);
    out.push(cpc_equivalence(seed + 2, 10)?);
    out.push(model_gradients(seed + 3)?);
    out.push(score_counts(seed + 4)?);
    out.push(uniform_loss(seed + 5)?);
    out.extend(evaluation_references(seed + 6)?);
    Ok(out)
}
