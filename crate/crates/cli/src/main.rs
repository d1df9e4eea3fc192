use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use acpc_core::data::{generate, read_dataset, write_dataset};
use acpc_core::eval::{
    eval_subset, evaluate, extract_features, self_similarity_matrix, write_similarity, EvalOptions,
};
use acpc_core::oracle::run_all;
use acpc_core::train::{bench, train, BenchConfig, Checkpoint, GenConfig, RunConfig};

#[derive(Parser)]
#[command(name = "acpc", version, about = "Aligned contrastive predictive coding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Generator config (`key = value` lines).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin and metrics.csv to the configured out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and write the `name,split,value` report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the consecutive/random similarity histograms here.
        #[arg(long)]
        histograms: Option<PathBuf>,
        /// Sequences per channel to evaluate; defaults to the training config.
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Export latent self-similarity matrices with label boundaries.
    ExportSim {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences, taken round-robin from the evaluation subset.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run every correctness oracle; exits nonzero if any fails.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the aligned and plain losses on random features.
    Bench {
        /// Bench config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { spec, out } => {
            let config = GenConfig::parse(&read_text(&spec, "generator config")?)?;
            let data = generate(&config.spec, config.seed)?;
            write_dataset(&data, &out).with_context(|| format!("cannot write {}", out.display()))?;
            println!("wrote {} sequences ({} bytes) to {}", data.len(), data.encoded_len(), out.display());
        }
        Command::Train { config } => {
            let config = RunConfig::parse(&read_text(&config, "run config")?)?;
            let t = train(&config)?;
            let losses = t.metrics.losses();
            let last = losses.last().map_or(f64::NAN, |l| l.1);
            println!(
                "trained {} steps over {} epochs, final loss {last:.4}; outputs in {}",
                t.step_count(),
                t.epoch(),
                config.out_dir.display()
            );
        }
        Command::Eval { ckpt, data, out, histograms, sequences } => {
            let ck = load_checkpoint(&ckpt)?;
            let dataset = read_dataset(&data).with_context(|| format!("cannot read dataset {}", data.display()))?;
            let idx = eval_subset(&dataset, sequences.unwrap_or(ck.config.eval_sequences));
            let opts = EvalOptions::for_model(&ck.model.config, ck.config.eval_seed);
            let report = evaluate(&ck.model, &dataset, &idx, &opts)?;
            fs::write(&out, report.to_csv()).with_context(|| format!("cannot write {}", out.display()))?;
            if let Some(dir) = histograms {
                fs::create_dir_all(&dir)?;
                for (name, h) in &report.histograms {
                    fs::write(dir.join(format!("{name}.csv")), h.to_csv())?;
                }
            }
            for (name, split, value) in &report.rows {
                println!("{name:<28} {split:<8} {value:.4}");
            }
        }
        Command::ExportSim { ckpt, data, out, count } => {
            let ck = load_checkpoint(&ckpt)?;
            let dataset = read_dataset(&data).with_context(|| format!("cannot read dataset {}", data.display()))?;
            let per_channel = count.div_ceil(dataset.channels().len().max(1));
            let mut idx = eval_subset(&dataset, per_channel);
            // interleave channels so a small count still covers several
            idx.sort_by_key(|&i| (idx_rank(&dataset, i), dataset.sequences[i].channel));
            idx.truncate(count);
            let feats = extract_features(&ck.model, &dataset, &idx)?;
            let table = &feats.latents;
            let mut matrices = Vec::new();
            for r in table.sequence_ranges() {
                let frames = &table.frames()[r.start * table.dim()..r.end * table.dim()];
                matrices.push(self_similarity_matrix(frames, table.dim(), &table.labels[r.clone()], table.channel[r.start])?);
            }
            write_similarity(&matrices, &out).with_context(|| format!("cannot write {}", out.display()))?;
            println!("wrote {} similarity matrices to {}", matrices.len(), out.display());
        }
        Command::Oracle { seed } => {
            let checks = run_all(seed)?;
            let mut ok = true;
            for c in &checks {
                println!("{c}");
                ok &= c.passed;
            }
            println!("{}/{} oracles passed", checks.iter().filter(|c| c.passed).count(), checks.len());
            return Ok(ok);
        }
        Command::Bench { config } => {
            let config = match config {
                Some(p) => BenchConfig::parse(&read_text(&p, "bench config")?)?,
                None => BenchConfig::default(),
            };
            print!("{}", bench(&config)?.to_text());
        }
    }
    Ok(true)
}

/// Position of sequence `i` among the sequences of its channel.
fn idx_rank(dataset: &acpc_core::data::Dataset, i: usize) -> usize {
    let c = dataset.sequences[i].channel;
    dataset.sequences[..i].iter().filter(|s| s.channel == c).count()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
