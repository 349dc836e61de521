use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flocora::{BitWidth, ModelKind, PolicyVariant};
use flocora_cli::tools::{self, PartitionOptions, SizeReportOptions};
use flocora_cli::{exit_code, RunOptions, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "flocora", version, about = "Federated training with low-rank conv adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train sampled clients on this many threads.
        #[arg(long)]
        parallel_clients: Option<usize>,
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Parameter counts, message sizes and total communication cost.
    SizeReport {
        #[arg(long, default_value = "resnet8", value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        /// Adapter rank; repeat for several rows.
        #[arg(long = "rank")]
        ranks: Vec<usize>,
        /// Quantization bit width (2, 4 or 8); omit for FP32.
        #[arg(long, value_parser = parse_bits)]
        bits: Option<BitWidth>,
        #[arg(long, default_value_t = 100)]
        rounds: u64,
        #[arg(long, default_value = "plus_norm_plus_final_fc", value_parser = parse_policy)]
        policy: PolicyVariant,
        /// Put an adapter on the input conv instead of training it directly.
        #[arg(long)]
        adapt_stem: bool,
        #[arg(long, default_value_t = 16.0)]
        alpha_per_rank: f32,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the client partition and a per-client class histogram.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
    },
    /// Check the quantizer's error bound on a freshly initialized model.
    QuantizeRoundtripCheck {
        #[arg(long, default_value = "resnet8", value_parser = parse_model)]
        model: ModelKind,
        #[arg(long = "bits", value_parser = parse_bits)]
        bits: Vec<BitWidth>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?}; expected resnet8, resnet18, tiny or toy"))
}

fn parse_bits(s: &str) -> Result<BitWidth, String> {
    s.parse::<u8>().ok().and_then(BitWidth::from_bits).ok_or_else(|| format!("bit width must be 2, 4 or 8, got {s:?}"))
}

fn parse_policy(s: &str) -> Result<PolicyVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown policy {s:?}; expected vanilla, plus_norm or plus_norm_plus_final_fc"))
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run { config, seed, out, parallel_clients, data_root, quiet } => {
            let outcome = flocora_cli::run(&RunOptions { config, seed, out, parallel_clients, data_root, quiet })?;
            let s = &outcome.summary;
            println!("wrote {}", outcome.out_dir.display());
            if let Some(mean) = s.final_accuracy.mean {
                println!(
                    "final accuracy {:.4} ± {:.4} over {} seed(s); TCC {:.3} MB per client",
                    mean,
                    s.final_accuracy.std.unwrap_or(0.0),
                    s.seeds.len(),
                    s.total_tcc_mb.mean.unwrap_or(0.0)
                );
            }
            Ok(true)
        }
        Command::SizeReport { model, num_classes, ranks, bits, rounds, policy, adapt_stem, alpha_per_rank, csv } => {
            let rows = tools::size_report(&SizeReportOptions {
                model,
                num_classes,
                ranks,
                bits,
                rounds,
                policy,
                adapt_stem,
                alpha_per_rank,
                csv,
            })?;
            tools::print_size_table(&rows, &mut io::stdout())?;
            Ok(true)
        }
        Command::Partition { config, clients, alpha, seed, out, data_root } => {
            let outcome = tools::partition(&PartitionOptions { config, clients, alpha, seed, out: out.clone(), data_root })?;
            println!(
                "{} clients, sizes {:?}, mean label entropy {:.4}; wrote {}",
                outcome.partition.num_clients(),
                outcome.partition.sizes(),
                outcome.mean_label_entropy,
                out.display()
            );
            Ok(true)
        }
        Command::QuantizeRoundtripCheck { model, bits, seed } => {
            let bits = if bits.is_empty() { vec![BitWidth::B2, BitWidth::B4, BitWidth::B8] } else { bits };
            let rows = tools::quantize_roundtrip_check(model, &bits, seed)?;
            let mut ok = true;
            for r in &rows {
                println!(
                    "{}-bit: {} tensors, {} values, max error {:.4} steps, idempotent {}, {} payload bytes: {}",
                    r.bits,
                    r.tensors,
                    r.elements,
                    r.max_error_in_steps,
                    r.idempotent,
                    r.packed_bytes,
                    if r.ok() { "ok" } else { "FAIL" }
                );
                ok &= r.ok();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
