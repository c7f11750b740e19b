//! Command-line surface. Exit codes: 0 success, 1 validation error,
//! 2 runtime error, 3 check failure (gradcheck/losscheck violations).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{self, Config, ProbeSource};
use crate::error::Error;
use crate::gradcheck;
use crate::losses::{diversity_bruteforce, diversity_fast_value, PredictionBatch};
use crate::manifest::load_manifest;
use crate::mel;
use crate::probe;
use crate::synth;
use crate::tensor::Tensor;
use crate::trainer;
use crate::wav::{load_wav, resample_linear};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "audio-ssl", about = "Self-supervised audio representation learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert every manifest clip to a log-mel CSV file
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run self-supervised pretraining; writes a checkpoint and metrics CSV
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// resume from an existing checkpoint file
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear-probe a checkpoint's frozen embeddings
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// which branch to extract embeddings from
        #[arg(long, value_parser = parse_source)]
        source: Option<ProbeSource>,
        /// probe the projection output instead of the encoder embedding
        #[arg(long)]
        use_projection: bool,
        /// write the JSON report here in addition to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// also dump the embedding table as CSV
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Generate a labeled synthetic corpus with a manifest
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 25)]
        n_per_class: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every op and the composed model
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Fast-vs-bruteforce equivalence of the diversity loss
    Losscheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// max batch size sampled
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// max embedding dim sampled
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// deliberately offset the fast form (sensitivity check of the gate)
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
}

#[derive(Args, Debug, Default)]
pub struct ConfigOverrides {
    /// key=value config file with [train]/[augment]/[probe] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_div: Option<f64>,
    #[arg(long)]
    lambda_dec: Option<f64>,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    use_predictor: Option<bool>,
    #[arg(long)]
    log_seconds: Option<bool>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    probe_iters: Option<usize>,
}

fn parse_source(s: &str) -> Result<ProbeSource, String> {
    match s {
        "online" => Ok(ProbeSource::Online),
        "target" => Ok(ProbeSource::Target),
        _ => Err(format!("expected online or target, got {s:?}")),
    }
}

/// Seed fallback chain: flag > config file > SSL_SEED > builtin default.
fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("SSL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::contract(format!("SSL_SEED must be an integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl ConfigOverrides {
    fn build(&self) -> Result<Config, Error> {
        let mut cfg;
        let mut seed_from_file = false;
        match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                cfg = config::parse(&text)?;
                seed_from_file = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.starts_with('#'))
                    .any(|l| l.split('=').next().map(str::trim) == Some("seed"));
            }
            None => cfg = Config::default(),
        }
        if self.seed.is_none() && !seed_from_file {
            if let Some(seed) = env_seed()? {
                cfg.seed = seed;
            }
        }
        macro_rules! over {
            ($field:ident, $section:literal, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($section, $key, &v.to_string(), 0)?;
                }
            };
        }
        over!(seed, "train", "seed");
        over!(learning_rate, "train", "learning_rate");
        over!(batch_size, "train", "batch_size");
        over!(epochs, "train", "epochs");
        over!(tau, "train", "tau");
        over!(lambda_div, "train", "lambda_div");
        over!(lambda_dec, "train", "lambda_dec");
        over!(network, "train", "network");
        over!(precision, "train", "precision");
        over!(use_predictor, "train", "use_predictor");
        over!(log_seconds, "train", "log_seconds");
        over!(probe_lr, "probe", "lr");
        over!(probe_iters, "probe", "iters");
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Contract(_) | Error::Format(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_features(manifest_path: &PathBuf, out_dir: &PathBuf) -> Result<i32, Error> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::contract("manifest is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = 0usize;
    for row in &manifest.rows {
        let result = load_wav(&row.path)
            .and_then(|c| resample_linear(&c, mel::SAMPLE_RATE))
            .and_then(|c| mel::logmel(&c));
        let spec = match result {
            Ok(s) => s,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", row.path.display());
                continue;
            }
        };
        let stem = row
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".to_string());
        let out = out_dir.join(format!("{stem}.logmel.csv"));
        let mut text = String::new();
        let frames = spec.frames();
        for t in 0..frames {
            let row_vals: Vec<String> = (0..mel::N_MELS)
                .map(|m| format!("{:.9e}", spec.values.at2(t, m)))
                .collect();
            text.push_str(&row_vals.join(","));
            text.push('\n');
        }
        std::fs::write(&out, text)?;
        written += 1;
    }
    if written == 0 {
        eprintln!("error: no clip could be converted");
        return Ok(EXIT_RUNTIME);
    }
    println!("wrote {written} log-mel files to {}", out_dir.display());
    Ok(EXIT_OK)
}

fn cmd_pretrain(
    manifest_path: &PathBuf,
    out_dir: &PathBuf,
    overrides: &ConfigOverrides,
    resume: &Option<PathBuf>,
) -> Result<i32, Error> {
    let cfg = overrides.build()?;
    let manifest = load_manifest(manifest_path)?;
    let resume_ckpt = match resume {
        Some(path) => Some(checkpoint::load_checkpoint(path)?),
        None => None,
    };
    let outcome = trainer::train(&manifest, &cfg, out_dir, resume_ckpt)?;
    println!(
        "final loss: total={:.6} align={:.6} div={:.6} decor={:.6} ({} steps)",
        outcome.final_loss.total,
        outcome.final_loss.align,
        outcome.final_loss.div,
        outcome.final_loss.dec,
        outcome.steps_run
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    checkpoint_path: &PathBuf,
    manifest_path: &PathBuf,
    source: Option<ProbeSource>,
    use_projection: bool,
    out: &Option<PathBuf>,
    dump_embeddings: &Option<PathBuf>,
    overrides: &ConfigOverrides,
) -> Result<i32, Error> {
    let cfg = overrides.build()?;
    let source = source.unwrap_or(cfg.probe_source);
    let use_projection = use_projection || cfg.probe_use_projection;
    let manifest = load_manifest(manifest_path)?;
    let mut ckpt = checkpoint::load_checkpoint(checkpoint_path)?;
    let table =
        probe::extract_embeddings(&mut ckpt.state, &manifest, source, use_projection, cfg.seed)?;
    if let Some(path) = dump_embeddings {
        probe::save_table(path, &table)?;
    }
    let report = probe::cross_validate(&table, cfg.probe_lr, cfg.probe_iters)?;
    for (fold, acc) in &report.per_fold {
        println!("fold {fold}: accuracy {acc:.4}");
    }
    println!("mean accuracy ({source}): {:.4}", report.mean_accuracy);
    let json = probe::report_json(&report, source);
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64) -> i32 {
    let rows = gradcheck::full_battery(seed);
    let mut ok = true;
    println!("{:<24} {:>14} {:>10}  status", "check", "max_rel_err", "tol");
    for row in &rows {
        let pass = row.pass();
        ok &= pass;
        println!(
            "{:<24} {:>14.3e} {:>10.0e}  {}",
            row.name,
            row.max_rel_err,
            row.tol,
            if pass { "pass" } else { "FAIL" }
        );
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

fn cmd_losscheck(trials: usize, n_max: usize, d_max: usize, seed: u64, perturb: f64) -> i32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..=n_max.max(2));
        let d = rng.gen_range(2..=d_max.max(2));
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(v.into_iter().map(|x| x / norm));
        }
        let batch = match PredictionBatch::from_rows(Tensor::from_vec(vec![n, d], data)) {
            Ok(b) => b,
            Err(e) => {
                eprintln!("internal error: {e}");
                return EXIT_RUNTIME;
            }
        };
        let fast = diversity_fast_value(&batch) + perturb;
        let brute = diversity_bruteforce(&batch);
        worst = worst.max((fast - brute).abs());
    }
    println!("losscheck: {trials} trials, max |fast - brute| = {worst:.3e}");
    if worst <= 1e-6 {
        EXIT_OK
    } else {
        println!("FAIL: exceeds 1e-6 tolerance");
        EXIT_CHECK_FAILED
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<i32, Error> = match &cli.command {
        Command::Features { manifest, out_dir } => cmd_features(manifest, out_dir),
        Command::Pretrain { manifest, out_dir, overrides, resume } => {
            cmd_pretrain(manifest, out_dir, overrides, resume)
        }
        Command::Probe {
            checkpoint,
            manifest,
            source,
            use_projection,
            out,
            dump_embeddings,
            overrides,
        } => cmd_probe(
            checkpoint,
            manifest,
            *source,
            *use_projection,
            out,
            dump_embeddings,
            overrides,
        ),
        Command::Synth { out_dir, classes, n_per_class, seed } => {
            let seed = match seed.map(Ok).or_else(|| env_seed().transpose()) {
                Some(Ok(s)) => s,
                Some(Err(e)) => {
                    eprintln!("error: {e}");
                    return EXIT_VALIDATION;
                }
                None => 0,
            };
            synth::generate(out_dir, *classes, *n_per_class, seed).map(|(manifest, _)| {
                println!(
                    "wrote {} clips and manifest to {}",
                    manifest.len(),
                    out_dir.display()
                );
                EXIT_OK
            })
        }
        Command::Gradcheck { seed } => return cmd_gradcheck(*seed),
        Command::Losscheck { trials, n, d, seed, perturb } => {
            let seed = match seed.map(Ok).or_else(|| env_seed().transpose()) {
                Some(Ok(s)) => s,
                Some(Err(e)) => {
                    eprintln!("error: {e}");
                    return EXIT_VALIDATION;
                }
                None => 0,
            };
            return cmd_losscheck(*trials, *n, *d, seed, *perturb);
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
