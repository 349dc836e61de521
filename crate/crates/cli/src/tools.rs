//! `size-report`, `partition` and `quantize-roundtrip-check`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use flocora::data::{lda_partition, PartitionMap};
use flocora::federation::{partition_seed, FederationConfig, Method};
use flocora::nn::{Role, CIFAR_INPUT};
use flocora::quant::{self, dequantize, quantize, quantize_tensor};
use flocora::wire::{message_size_report, Encoding, SizeReport};
use flocora::{BitWidth, ModelKind, PolicyVariant, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::run::write_json;

#[derive(Debug, Clone)]
pub struct SizeReportOptions {
    pub model: ModelKind,
    pub num_classes: usize,
    pub ranks: Vec<usize>,
    pub bits: Option<BitWidth>,
    pub rounds: u64,
    pub policy: PolicyVariant,
    pub adapt_stem: bool,
    pub alpha_per_rank: f32,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub model: String,
    pub method: String,
    pub rank: Option<usize>,
    pub bits: Option<u32>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub message_bytes: u64,
    pub rounds: u64,
    pub tcc_bytes: u64,
    pub tcc_mb: f64,
}

impl SizeRow {
    fn new(method: &str, rank: Option<usize>, bits: Option<BitWidth>, r: SizeReport) -> Self {
        SizeRow {
            model: r.model,
            method: method.into(),
            rank,
            bits: bits.map(BitWidth::bits),
            total_params: r.total_params,
            trainable_params: r.trainable_params,
            message_bytes: r.message_bytes,
            rounds: r.rounds,
            tcc_bytes: r.tcc_bytes,
            tcc_mb: r.tcc_bytes as f64 / 1e6,
        }
    }
}

/// The full-model row followed by one row per rank, all measured from
/// serialized messages.
pub fn size_report(opts: &SizeReportOptions) -> anyhow::Result<Vec<SizeRow>> {
    let spec = opts.model.spec(opts.num_classes, CIFAR_INPUT)?;
    let encoding = Encoding::from_bits(opts.bits);
    let mut rows = Vec::new();
    let full = FederationConfig { method: Method::Fedavg, ..Default::default() };
    rows.push(SizeRow::new(
        "fedavg",
        None,
        opts.bits,
        message_size_report(&spec, &full.training_mode(&spec), encoding, opts.rounds)?,
    ));
    for &rank in &opts.ranks {
        let cfg = FederationConfig {
            method: Method::Flocora,
            rank,
            alpha_per_rank: Some(opts.alpha_per_rank),
            policy: opts.policy,
            train_stem: !opts.adapt_stem,
            ..Default::default()
        };
        let report = message_size_report(&spec, &cfg.training_mode(&spec), encoding, opts.rounds)?;
        rows.push(SizeRow::new("flocora", Some(rank), opts.bits, report));
    }
    if let Some(path) = &opts.csv {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

pub fn print_size_table(rows: &[SizeRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<10} {:<8} {:>5} {:>5} {:>12} {:>12} {:>14} {:>7} {:>12}",
        "model", "method", "rank", "bits", "total", "trainable", "message_B", "rounds", "TCC_MB"
    )?;
    for r in rows {
        let dash = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<10} {:<8} {:>5} {:>5} {:>12} {:>12} {:>14} {:>7} {:>12.2}",
            r.model,
            r.method,
            dash(r.rank.map(|x| x.to_string())),
            dash(r.bits.map(|x| x.to_string())),
            r.total_params,
            r.trainable_params,
            r.message_bytes,
            r.rounds,
            r.tcc_mb
        )?;
    }
    Ok(())
}

pub const PARTITION_FILE: &str = "partition.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

#[derive(Debug, Clone, Default)]
pub struct PartitionOptions {
    pub config: PathBuf,
    pub clients: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub data_root: Option<PathBuf>,
}

pub struct PartitionOutcome {
    pub partition: PartitionMap,
    pub histogram: Vec<Vec<usize>>,
    pub mean_label_entropy: f64,
}

/// Splits the training set exactly as a run with the same master seed does
/// and writes the map plus a per-client class histogram.
pub fn partition(opts: &PartitionOptions) -> anyhow::Result<PartitionOutcome> {
    let cfg = ExperimentConfig::load(&opts.config)?;
    let (train, _) = cfg.load_dataset(opts.data_root.as_deref())?;
    let clients = opts.clients.unwrap_or(cfg.federation.num_clients);
    let alpha = opts.alpha.unwrap_or(cfg.federation.lda_alpha);
    let seed = partition_seed(opts.seed.unwrap_or(cfg.seeds[0]));
    let partition =
        lda_partition(train.labels(), clients, alpha, seed).map_err(|e| ConfigError(e.to_string()))?;
    let histogram = partition.class_histogram(train.labels(), train.num_classes());
    let mean_label_entropy = partition.mean_label_entropy(train.labels(), train.num_classes());

    fs::create_dir_all(&opts.out).with_context(|| format!("cannot create {}", opts.out.display()))?;
    write_json(&opts.out.join(PARTITION_FILE), &partition)?;
    let mut w = csv::Writer::from_path(opts.out.join(HISTOGRAM_FILE))?;
    let mut header = vec!["client".to_string(), "examples".to_string()];
    header.extend((0..train.num_classes()).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (client, row) in histogram.iter().enumerate() {
        let mut record = vec![client.to_string(), row.iter().sum::<usize>().to_string()];
        record.extend(row.iter().map(usize::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(PartitionOutcome { partition, histogram, mean_label_entropy })
}

pub fn load_partition(path: &Path) -> anyhow::Result<PartitionMap> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTripRow {
    pub bits: u32,
    pub tensors: usize,
    pub elements: usize,
    /// Largest `|x − x̂| / scale` over all elements; at most 0.5 when sound.
    pub max_error_in_steps: f64,
    pub idempotent: bool,
    pub packed_bytes: usize,
}

impl RoundTripRow {
    pub fn ok(&self) -> bool {
        self.max_error_in_steps <= 0.5 + 1e-3 && self.idempotent
    }
}

/// Quantizes every non-norm tensor of a freshly initialized model at each
/// bit width and checks the round-trip error bound and code idempotence.
pub fn quantize_roundtrip_check(model: ModelKind, bits: &[BitWidth], seed: u64) -> anyhow::Result<Vec<RoundTripRow>> {
    let spec = model.spec(10, CIFAR_INPUT)?;
    let mut params = spec.init_params(seed);
    // Biases start at zero; perturb them so they exercise the codec too.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with(Role::Bias.as_str()) {
            *t = Tensor::uniform(t.shape(), 0.1, &mut rng);
        }
    }
    let mut rows = Vec::new();
    for &b in bits {
        let mut row = RoundTripRow {
            bits: b.bits(),
            tensors: 0,
            elements: 0,
            max_error_in_steps: 0.0,
            idempotent: true,
            packed_bytes: 0,
        };
        for (name, t) in params.iter() {
            if flocora::nn::split_param_name(name).is_some_and(|(_, role)| role.is_norm()) {
                continue;
            }
            let q = quantize_tensor(t, b)?;
            let back = dequantize(&q)?;
            let axis = q.params.axis;
            let inner: usize = axis.map_or(1, |a| t.shape()[a + 1..].iter().product());
            for (i, (&x, &y)) in t.data().iter().zip(back.data()).enumerate() {
                let c = axis.map_or(0, |a| (i / inner) % t.shape()[a]);
                let steps = ((x - y).abs() / q.params.scales[c]) as f64;
                row.max_error_in_steps = row.max_error_in_steps.max(steps);
            }
            row.idempotent &= quantize(&back, &q.params)?.packed == q.packed;
            row.tensors += 1;
            row.elements += t.len();
            row.packed_bytes += quant::quantized_payload_bytes(t.shape(), axis, b);
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet8_rows_match_known_counts() {
        let opts = SizeReportOptions {
            model: ModelKind::Resnet8,
            num_classes: 10,
            ranks: vec![32],
            bits: None,
            rounds: 100,
            policy: PolicyVariant::PlusNormPlusFinalFc,
            adapt_stem: false,
            alpha_per_rank: 16.0,
            csv: None,
        };
        let rows = size_report(&opts).unwrap();
        assert_eq!(rows[0].total_params, 1_227_594);
        assert_eq!(rows[0].trainable_params, 1_227_594);
        assert_eq!(rows[1].trainable_params, 7808 * 32 + 6986);
        let zero = size_report(&SizeReportOptions { rounds: 0, ..opts }).unwrap();
        assert!(zero.iter().all(|r| r.tcc_bytes == 0));
    }

    #[test]
    fn roundtrip_check_passes_on_tiny() {
        let rows = quantize_roundtrip_check(ModelKind::Tiny { width: 8 }, &[BitWidth::B2, BitWidth::B8], 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(RoundTripRow::ok), "{rows:?}");
    }
}
