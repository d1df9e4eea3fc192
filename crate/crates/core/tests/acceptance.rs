//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the test
//! harness so the lines are always printed; exits nonzero if any fails.
//!
//! `ACPC_ACCEPTANCE_SKIP_TRAINING=1` skips the multi-seed training
//! experiment behind criteria 5, 6, 7 and 9 (they are then reported as
//! SKIP, not PASS).

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use acpc_core::alignment::LossKind;
use acpc_core::data::{generate, Dataset, SyntheticSpec};
use acpc_core::eval::{eval_subset, evaluate, EvalOptions};
use acpc_core::model::ModelConfig;
use acpc_core::oracle::{self, OracleCheck};
use acpc_core::stats::paired_t_greater;
use acpc_core::train::{bench, BenchConfig, Checkpoint, RunConfig, Trainer};

const SEEDS: u64 = 5;
const EPOCHS: usize = 50;
const WINDOW: usize = 12;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: u32,
    title: &'static str,
    verdict: Verdict,
    detail: String,
}

fn line(id: u32, title: &'static str, ok: bool, detail: String) -> Line {
    Line { id, title, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn checks_ok(checks: &[OracleCheck]) -> (bool, String) {
    let ok = checks.iter().all(|c| c.passed);
    let detail = checks.iter().map(|c| format!("{}={:.2e}", c.name, c.max_error)).collect::<Vec<_>>().join(" ");
    (ok, detail)
}

fn alignment_oracle() -> Line {
    let start = Instant::now();
    let checks = oracle::alignment_paths(1, 100, 7).expect("alignment oracle");
    let secs = start.elapsed().as_secs_f64();
    let relevant: Vec<OracleCheck> = checks.into_iter().filter(|c| c.name != "occupancy").collect();
    let (ok, detail) = checks_ok(&relevant);
    line(1, "alignment oracle", ok && secs < 10.0, format!("{detail} runtime={secs:.2}s"))
}

fn blank_trick() -> Line {
    let (ok, detail) = checks_ok(&oracle::blank_trick(2, 100).expect("blank trick"));
    line(2, "blank-trick identity", ok, detail)
}

fn cpc_equivalence() -> Line {
    let c = oracle::cpc_equivalence(3, 10).expect("cpc equivalence");
    line(3, "cpc equivalence", c.passed, format!("{} bit-identical batches of {}", if c.passed { c.cases } else { 0 }, c.cases))
}

fn gradients() -> Line {
    let c = oracle::model_gradients(4).expect("gradient check");
    let secs = c.millis / 1e3;
    line(4, "gradient correctness", c.passed && secs < 30.0, format!("max_rel_error={:.2e} runtime={secs:.2}s", c.max_error))
}

/// Final metrics of one training run.
#[derive(Clone, Copy, Debug)]
struct RunMetrics {
    probe: f64,
    cosine: f64,
    nmi16: f64,
    stride: f64,
    abx_within: f64,
    abx_across: f64,
}

fn run_config(loss: LossKind, k: usize, seed: u64) -> RunConfig {
    RunConfig {
        loss,
        predictions: k,
        window: WINDOW,
        epochs: EPOCHS,
        init_seed: 10 * seed + 1,
        train_seed: 10 * seed + 2,
        model: ModelConfig { predictions: k, ..ModelConfig::default() },
        ..RunConfig::default()
    }
}

fn train_and_evaluate(config: RunConfig, data: &Dataset) -> RunMetrics {
    let mut t = Trainer::new(config.clone(), data.clone()).expect("trainer");
    t.run(|_| Ok(())).expect("training");
    let idx = eval_subset(data, config.eval_sequences);
    let opts = EvalOptions::for_model(&config.model, config.eval_seed);
    let r = evaluate(&t.model, data, &idx, &opts).expect("evaluation");
    let get = |name: &str, split: &str| r.get(name, split).unwrap_or_else(|| panic!("missing {name}/{split}"));
    RunMetrics {
        probe: get("probe_accuracy", "val"),
        cosine: get("cosine_consecutive_mean", "latent"),
        nmi16: get("nmi_k16", "latent"),
        stride: get("stride_periodicity", "latent"),
        abx_within: get("abx_error", "within"),
        abx_across: get("abx_error", "across"),
    }
}

struct Experiment {
    cpc: Vec<RunMetrics>,
    /// `(K, per-seed metrics)` for each aligned setting.
    aligned: Vec<(usize, Vec<RunMetrics>)>,
    minutes: f64,
}

fn experiment() -> Experiment {
    let data = generate(&SyntheticSpec::default(), 0).expect("default corpus");
    let start = Instant::now();
    let mut cpc = Vec::new();
    let mut aligned = vec![(6, Vec::new()), (8, Vec::new())];
    for seed in 0..SEEDS {
        let m = train_and_evaluate(run_config(LossKind::Diagonal, WINDOW, seed), &data);
        println!("  seed {seed} cpc  K=12 {m:?}");
        cpc.push(m);
        for (k, runs) in aligned.iter_mut() {
            let m = train_and_evaluate(run_config(LossKind::Aligned, *k, seed), &data);
            println!("  seed {seed} acpc K={k:<2} {m:?}");
            runs.push(m);
        }
    }
    Experiment { cpc, aligned, minutes: start.elapsed().as_secs_f64() / 60.0 }
}

/// Seeds where `better(aligned, plain)` holds.
fn wins(a: &[RunMetrics], c: &[RunMetrics], better: impl Fn(&RunMetrics, &RunMetrics) -> bool) -> usize {
    a.iter().zip(c).filter(|(a, c)| better(a, c)).count()
}

fn directional(e: &Experiment) -> [Line; 4] {
    let mut ok5 = e.minutes < 30.0;
    let mut d5 = String::new();
    let cpc_probe: Vec<f64> = e.cpc.iter().map(|m| m.probe).collect();
    for (k, runs) in &e.aligned {
        let probe: Vec<f64> = runs.iter().map(|m| m.probe).collect();
        let (t, p) = paired_t_greater(&probe, &cpc_probe).expect("paired test");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        ok5 &= p < 0.05;
        let _ = write!(d5, "K={k}: {:.4} vs {:.4} t={t:.2} p={p:.4}; ", mean(&probe), mean(&cpc_probe));
    }
    let _ = write!(d5, "runtime={:.1}min", e.minutes);

    let need = 4;
    let mut ok6 = true;
    let mut d6 = String::new();
    let mut ok7 = true;
    let mut d7 = String::new();
    for (k, runs) in &e.aligned {
        let cos = wins(runs, &e.cpc, |a, c| a.cosine > c.cosine);
        let nmi = wins(runs, &e.cpc, |a, c| a.nmi16 > c.nmi16);
        ok6 &= cos >= need && nmi >= need;
        let _ = write!(d6, "K={k}: cosine {cos}/5, nmi16 {nmi}/5; ");
        let stride = wins(runs, &e.cpc, |a, c| a.stride < c.stride);
        ok7 &= stride >= need;
        let _ = write!(d7, "K={k}: {stride}/5; ");
    }

    let (_, k8) = e.aligned.iter().find(|(k, _)| *k == 8).expect("K=8 runs");
    let within = wins(k8, &e.cpc, |a, c| a.abx_within <= c.abx_within);
    let across = wins(k8, &e.cpc, |a, c| a.abx_across <= c.abx_across);
    let ok9 = within >= need && across >= need;
    [
        line(5, "probe accuracy (table analog)", ok5, d5),
        line(6, "consecutive similarity and NMI", ok6, d6.trim_end_matches("; ").to_string()),
        line(7, "stride periodicity", ok7, d7.trim_end_matches("; ").to_string()),
        line(9, "ABX error", ok9, format!("K=8: within {within}/5, across {across}/5")),
    ]
}

fn step_cost() -> Line {
    let r = bench(&BenchConfig { repeats: 10, ..BenchConfig::default() }).expect("bench");
    let ratio = r.wall_ratio();
    let ok = ratio <= 0.7 && r.counts_match();
    // Reported, not gated: per-anchor gather and scatter of the N negatives
    // cost the same for every K, so wall time cannot track the count ratio.
    let gap = ratio / r.count_ratio() - 1.0;
    line(
        8,
        "step cost",
        ok,
        format!(
            "wall ratio {ratio:.3} ({:.2} vs {:.2} ms), counts exact: {}, count ratio {:.3} (wall off by {:.0}%)",
            r.aligned.wall_ms,
            r.plain.wall_ms,
            r.counts_match(),
            r.count_ratio(),
            100.0 * gap
        ),
    )
}

fn determinism() -> Line {
    let spec = SyntheticSpec { channels: 2, sequences_per_channel: 8, length: 512, ..SyntheticSpec::default() };
    let config = RunConfig {
        predictions: 4,
        window: 6,
        model: ModelConfig { predictions: 4, dim: 8, hidden: 8, ..ModelConfig::default() },
        batch_size: 4,
        epochs: 2,
        eval_every: 1,
        eval_sequences: 2,
        synthetic: spec.clone(),
        ..RunConfig::default()
    };
    let data = generate(&spec, 5).expect("corpus");
    let run = || {
        let mut t = Trainer::new(config.clone(), data.clone()).expect("trainer");
        t.run(|_| Ok(())).expect("training");
        t
    };
    let (a, b) = (run(), run());
    let logs = a.metrics.deterministic_csv() == b.metrics.deterministic_csv() && !a.metrics.rows.is_empty();

    let dir = tempfile::tempdir().expect("tempdir");
    let data_path = dir.path().join("data.bin");
    acpc_core::data::write_dataset(&data, &data_path).expect("write dataset");
    let reread = acpc_core::data::read_dataset(&data_path).expect("read dataset");
    let on_disk = std::fs::read(&data_path).expect("dataset bytes");
    let dataset_ok = reread == data && reread.to_bytes().expect("encode") == on_disk;

    let ck_path = dir.path().join("ck.bin");
    a.checkpoint().save(&ck_path).expect("save checkpoint");
    let on_disk = std::fs::read(&ck_path).expect("checkpoint bytes");
    let loaded = Checkpoint::<f32>::load(&ck_path).expect("load checkpoint");
    let ck_ok = loaded.to_bytes() == on_disk && on_disk == a.checkpoint().to_bytes();
    line(
        10,
        "determinism and round-trips",
        logs && dataset_ok && ck_ok,
        format!("metric logs identical: {logs}, dataset byte-exact: {dataset_ok}, checkpoint byte-exact: {ck_ok}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines = vec![alignment_oracle(), blank_trick(), cpc_equivalence(), gradients()];
    if std::env::var_os("ACPC_ACCEPTANCE_SKIP_TRAINING").is_some() {
        for (id, title) in [(5, "probe accuracy (table analog)"), (6, "consecutive similarity and NMI"), (7, "stride periodicity"), (9, "ABX error")] {
            lines.push(Line { id, title, verdict: Verdict::Skip, detail: "training experiment skipped".into() });
        }
    } else {
        println!("training {} runs x {EPOCHS} epochs", 3 * SEEDS);
        lines.extend(directional(&experiment()));
    }
    lines.push(step_cost());
    lines.push(determinism());
    lines.sort_by_key(|l| l.id);

    println!("\nacceptance criteria");
    let mut failed = 0;
    for l in &lines {
        let tag = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("[{tag}] {:>2}. {:<31} {}", l.id, l.title, l.detail);
    }
    println!("total time {:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
