use clap::{Parser, Subcommand};
use gramtune_cli::audit::{audit, AuditOptions};
use gramtune_cli::embedding::EmbeddingFile;
use gramtune_cli::{atomic_write, synth, CliError};
use gramtune_core::data::SynthConfig;
use gramtune_core::gw::{self, GwOrder, MetricSpace};
use gramtune_core::linalg::FeatureMatrix;
use gramtune_core::metrics::fmt_sig9;
use gramtune_core::trainer::{self, TrainConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Gram-matrix geometry workbench: synthesize token datasets, run regularized
/// few-shot fine-tuning, and audit representation drift between embedding
/// snapshots.
#[derive(Parser)]
#[command(name = "gramtune", version)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Globals {
    /// Seed for every stochastic step of the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for generated files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Suppress stdout summaries (files are still written).
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-conditional token dataset on disk.
    Synth {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        /// Tokens per sample.
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        /// Raw dimension of each token.
        #[arg(long, default_value_t = 8)]
        token_dim: usize,
        /// Noise standard deviation around each class field.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
    },
    /// Run a fine-tuning job described by a key=value config file.
    Train {
        /// Config file; every scalar hyperparameter key is required, plus
        /// `data_dir` pointing at a synthesized dataset.
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and print the resolved learning-rate schedule
        /// endpoints without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compare two embedding snapshots row-paired by id.
    Audit {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Optional class-prototype embedding file enabling the
        /// prediction-shift metrics.
        #[arg(long)]
        prototypes: Option<PathBuf>,
        /// Softmax temperature for prototype predictions.
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
    },
    /// Exact transport upper estimate between two small embedding files.
    Gw {
        #[arg(long)]
        file_a: PathBuf,
        #[arg(long)]
        file_b: PathBuf,
        /// Objective exponent (1 or 2).
        #[arg(long, default_value_t = 1)]
        p: u8,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_class().code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let Cli { globals, command } = cli;
    match command {
        Command::Synth {
            classes,
            per_class,
            tokens,
            token_dim,
            noise,
        } => {
            let cfg = SynthConfig {
                classes,
                per_class,
                patch_count: tokens,
                patch_input_dim: token_dim,
                noise,
                seed: globals.seed,
            };
            synth::write_dataset(&globals.out_dir, &cfg)?;
            if !globals.quiet {
                for path in synth::output_paths(&globals.out_dir) {
                    println!("wrote {}", path.display());
                }
            }
            Ok(())
        }
        Command::Train { config, dry_run } => cmd_train(&globals, &config, dry_run),
        Command::Audit {
            before,
            after,
            prototypes,
            tau,
        } => {
            let before = EmbeddingFile::read(&before)?;
            let after = EmbeddingFile::read(&after)?;
            let protos = prototypes.map(|p| EmbeddingFile::read(&p)).transpose()?;
            let opts = AuditOptions {
                seed: globals.seed,
                tau,
            };
            let report = audit(&before, &after, protos.as_ref(), &opts)?;
            let text = report.render();
            let path = globals.out_dir.join("audit_report.txt");
            std::fs::create_dir_all(&globals.out_dir).map_err(|e| CliError::io(&globals.out_dir, e))?;
            atomic_write(&path, text.as_bytes())?;
            if !globals.quiet {
                print!("{text}");
            }
            Ok(())
        }
        Command::Gw { file_a, file_b, p } => cmd_gw(&file_a, &file_b, p),
    }
}

fn cmd_train(globals: &Globals, config_path: &PathBuf, dry_run: bool) -> Result<(), CliError> {
    // Config problems are usage errors (exit 2), including an unreadable or
    // malformed config file; data files keep their own exit class.
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", config_path.display())))?;
    let mut map = gramtune_core::trainer::parse_kv_text(&text)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data_dir = map.remove("data_dir").map(PathBuf::from);
    let cfg = TrainConfig::from_kv(&map)?;

    if dry_run {
        println!("config ok");
        println!("warmup_start_lr={}", fmt_sig9(cfg.warmup_start_lr));
        println!("peak_lr={}", fmt_sig9(cfg.peak_lr));
        return Ok(());
    }

    let data_dir = data_dir.ok_or_else(|| {
        CliError::Train(gramtune_core::trainer::TrainError::MissingKey(
            "data_dir".to_string(),
        ))
    })?;
    let dataset = synth::load_dataset(&data_dir)?;
    let outcome = trainer::train(&cfg, &dataset)?;

    std::fs::create_dir_all(&globals.out_dir).map_err(|e| CliError::io(&globals.out_dir, e))?;
    let mut report = String::new();
    report.push_str(&outcome.initial_report.to_kv_block());
    for r in &outcome.epoch_reports {
        report.push('\n');
        report.push_str(&r.to_kv_block());
    }
    report.push_str(&format!("\nparam_hash={:016x}\n", outcome.param_hash()));
    atomic_write(&globals.out_dir.join("run_report.txt"), report.as_bytes())?;

    let mut checkpoint = Vec::new();
    outcome.tuned.save_checkpoint(&mut checkpoint)?;
    atomic_write(&globals.out_dir.join("checkpoint.bin"), &checkpoint)?;

    if !globals.quiet {
        let last = outcome.final_report();
        println!(
            "trained {} epochs: test_accuracy={} loss_total={}",
            outcome.epoch_reports.len(),
            fmt_sig9(last.test_accuracy),
            fmt_sig9(last.loss_total),
        );
        println!("wrote {}", globals.out_dir.join("run_report.txt").display());
        println!("wrote {}", globals.out_dir.join("checkpoint.bin").display());
    }
    Ok(())
}

fn cmd_gw(file_a: &PathBuf, file_b: &PathBuf, p: u8) -> Result<(), CliError> {
    let order = match p {
        1 => GwOrder::P1,
        2 => GwOrder::P2,
        other => return Err(CliError::Usage(format!("--p must be 1 or 2, got {other}"))),
    };
    let a = EmbeddingFile::read(file_a)?;
    let b = EmbeddingFile::read(file_b)?;
    if a.n() != b.n() {
        return Err(CliError::Usage(format!(
            "inputs must have equal row counts, got {} and {}",
            a.n(),
            b.n()
        )));
    }
    if a.n() > gw::DEFAULT_MAX_EXACT_N {
        return Err(CliError::Gw(gw::GwError::TooLarge {
            n: a.n(),
            max: gw::DEFAULT_MAX_EXACT_N,
        }))
        .map_err(|e| {
            // Same classification, friendlier advice.
            if let CliError::Gw(gw::GwError::TooLarge { n, max }) = &e {
                CliError::Usage(format!(
                    "{n} rows exceed the exact enumeration cap of {max}; subsample the files (the audit command does this automatically)"
                ))
            } else {
                e
            }
        });
    }
    let za = FeatureMatrix::normalize_rows(&a.data)?;
    let zb = FeatureMatrix::normalize_rows(&b.data)?;
    let x = MetricSpace::from_features(&za);
    let y = MetricSpace::from_features(&zb);
    let est = gw::gw_estimate(&x, &y, order, gw::DEFAULT_MAX_EXACT_N)?;
    let bound = gw::gram_bound(
        &gramtune_core::linalg::gram(&za),
        &gramtune_core::linalg::gram(&zb),
        order,
    )?;
    println!("gw_upper_estimate={}", fmt_sig9(est.value));
    println!("achieved_by={}", est.achieved_by.describe());
    println!("gram_bound={}", fmt_sig9(bound));
    Ok(())
}
