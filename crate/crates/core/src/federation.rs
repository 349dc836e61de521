//! Round orchestration: sample clients, broadcast the global trainable set,
//! train locally, upload, and aggregate with dataset-size weights.
//!
//! Both directions go through the wire codec, so quantization error and
//! byte counts are exactly what a deployment would see.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{lda_partition, Dataset, PartitionMap};
use crate::error::{Error, Result};
use crate::lora::{check_congruent, AdaptedModel, FreezePolicy, PolicyVariant, TrainingMode};
use crate::nn::{ModelSpec, ParamSet};
use crate::optim::SgdMomentum;
use crate::quant::BitWidth;
use crate::tensor::Tensor;
use crate::wire::{self, CostLedger, Encoding, UpdateMessage, SERVER_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Train and exchange the full model.
    Fedavg,
    /// Freeze the base, train and exchange adapters plus policy-unfrozen layers.
    Flocora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub sample_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub method: Method,
    pub rank: usize,
    pub alpha: f32,
    /// When set, `alpha = alpha_per_rank · rank`.
    pub alpha_per_rank: Option<f32>,
    pub policy: PolicyVariant,
    /// Train the input conv directly instead of adapting it.
    pub train_stem: bool,
    pub quant_bits: Option<BitWidth>,
    pub lda_alpha: f64,
    /// Master seed; experiment files supply it through their seed list.
    #[serde(skip)]
    pub seed: u64,
    pub parallel_clients: usize,
    /// Cap on training examples used for the per-round training-loss metric.
    pub train_eval_limit: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 100,
            sample_fraction: 0.1,
            rounds: 100,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            method: Method::Flocora,
            rank: 32,
            alpha: 512.0,
            alpha_per_rank: None,
            policy: PolicyVariant::PlusNormPlusFinalFc,
            train_stem: true,
            quant_bits: None,
            lda_alpha: 0.5,
            seed: 0,
            parallel_clients: 1,
            train_eval_limit: 10_000,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return fail("num_clients must be >= 1".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return fail(format!("sample_fraction must be in (0, 1], got {}", self.sample_fraction));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local_epochs and batch_size must be >= 1".into());
        }
        if self.lr.is_nan() || self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("need lr >= 0 and 0 <= momentum < 1, got {} / {}", self.lr, self.momentum));
        }
        if self.method == Method::Flocora && self.rank == 0 {
            return fail("rank must be >= 1".into());
        }
        if self.lda_alpha.is_nan() || self.lda_alpha <= 0.0 {
            return fail(format!("lda_alpha must be positive, got {}", self.lda_alpha));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f32 {
        self.alpha_per_rank.map_or(self.alpha, |m| m * self.rank as f32)
    }

    pub fn encoding(&self) -> Encoding {
        Encoding::from_bits(self.quant_bits)
    }

    pub fn training_mode(&self, spec: &ModelSpec) -> TrainingMode {
        match self.method {
            Method::Fedavg => TrainingMode::Full,
            Method::Flocora => {
                let mut policy = FreezePolicy::new(self.policy);
                if self.train_stem {
                    if let Some(stem) = spec.stem() {
                        policy = policy.with_direct_conv(&stem.name);
                    }
                }
                TrainingMode::Lora { rank: self.rank, alpha: self.effective_alpha(), policy }
            }
        }
    }

    pub fn clients_per_round(&self) -> usize {
        ((self.num_clients as f64 * self.sample_fraction).round() as usize).clamp(1, self.num_clients)
    }
}

/// SplitMix64 finalizer over the master seed and a list of stream ids.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_BASE: u64 = 1;
const STREAM_ADAPTERS: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_SAMPLING: u64 = 4;
const STREAM_CLIENT: u64 = 5;

/// Seed of the client partition used by a run with this master seed.
pub fn partition_seed(master: u64) -> u64 {
    derive_seed(master, &[STREAM_PARTITION])
}

/// Uniform sample without replacement, sorted ascending.
pub fn sample_clients(round: usize, cfg: &FederationConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SAMPLING, round as u64]));
    let mut ids = index::sample(&mut rng, cfg.num_clients, cfg.clients_per_round()).into_vec();
    ids.sort_unstable();
    ids
}

/// Seed of the shuffling stream for one client in one round.
pub fn client_seed(master: u64, client: usize, round: usize) -> u64 {
    derive_seed(master, &[STREAM_CLIENT, client as u64, round as u64])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl From<&FederationConfig> for LocalTrainConfig {
    fn from(c: &FederationConfig) -> Self {
        LocalTrainConfig { epochs: c.local_epochs, batch_size: c.batch_size, lr: c.lr, momentum: c.momentum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats {
    pub steps: usize,
    pub mean_loss: f32,
}

/// Minibatch SGD with momentum over `indices` for `cfg.epochs` epochs.
/// Momentum buffers start at zero on every call.
pub fn train_local(
    model: &mut AdaptedModel,
    data: &Dataset,
    indices: &[usize],
    cfg: &LocalTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LocalStats> {
    if indices.is_empty() {
        return Err(Error::Config("client has no training data".into()));
    }
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut order = indices.to_vec();
    let mut steps = 0;
    let mut loss_sum = 0.0f64;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            loss_sum += sgd_step(model, data, chunk, &mut opt)? as f64;
            steps += 1;
        }
    }
    Ok(LocalStats { steps, mean_loss: (loss_sum / steps as f64) as f32 })
}

/// One forward/backward/update on a single minibatch; returns the batch loss.
pub fn sgd_step(model: &mut AdaptedModel, data: &Dataset, batch: &[usize], opt: &mut SgdMomentum) -> Result<f32> {
    let (x, labels) = data.batch(batch);
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let (logits, binding) = model.forward(&mut tape, input)?;
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    for (name, param) in model.trainable_mut().iter_mut() {
        let var = binding.get(name).expect("every trainable is bound");
        match tape.grad(var) {
            Some(g) => opt.step(name, param, g)?,
            None => opt.step(name, param, &vec![0.0; param.len()])?,
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy over the first `limit` examples.
pub fn evaluate(model: &AdaptedModel, data: &Dataset, limit: usize) -> Result<Evaluation> {
    let n = data.len().min(limit);
    if n == 0 {
        return Ok(Evaluation { accuracy: 0.0, loss: 0.0 });
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let (logits, _) = model.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        let k = tape.value(logits).shape()[1];
        for (row, &label) in tape.value(logits).data().chunks(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (pred == label) as usize;
        }
    }
    Ok(Evaluation { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub num_examples: usize,
    pub tensors: ParamSet,
    pub stats: LocalStats,
}

/// `Σ_k (n_k / n)·u_k`, accumulated in FP64 in ascending client order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParamSet> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client);
    let first = ordered.first().ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    for u in &ordered[1..] {
        check_congruent(&first.tensors, &u.tensors)?;
    }
    let total: usize = ordered.iter().map(|u| u.num_examples).sum();
    if total == 0 {
        return Err(Error::Protocol("client updates carry no examples".into()));
    }
    let mut out = ParamSet::new();
    for (name, reference) in first.tensors.iter() {
        let mut acc = vec![0.0f64; reference.len()];
        for u in &ordered {
            let w = u.num_examples as f64 / total as f64;
            let t = u.tensors.get_named(name).expect("congruent");
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += w * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        let t = Tensor::new(reference.shape(), data)?.with_requires_grad(reference.requires_grad());
        out.insert_named(name.to_string(), t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub seed: u64,
    pub sampled: Vec<usize>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Global model's loss on (up to `train_eval_limit`) training examples.
    pub train_loss: f64,
    /// Example-weighted mean of the clients' local training losses.
    pub client_loss: f64,
    /// Bytes summed over all sampled clients.
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Bytes moved by a single participating client.
    pub uplink_bytes_per_client: u64,
    pub downlink_bytes_per_client: u64,
    /// Running per-client communication cost including this round.
    pub cumulative_tcc: u64,
    pub wall_time_ms: u64,
}

pub struct Federation {
    cfg: FederationConfig,
    global: AdaptedModel,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    partition: PartitionMap,
    ledger: CostLedger,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    /// Initializes the shared base weights, the adapters and the partition
    /// from the master seed.
    pub fn new(cfg: FederationConfig, spec: ModelSpec, train: Arc<Dataset>, test: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let partition = lda_partition(
            train.labels(),
            cfg.num_clients,
            cfg.lda_alpha,
            partition_seed(cfg.seed),
        )?;
        Self::with_partition(cfg, spec, train, test, partition)
    }

    pub fn with_partition(
        cfg: FederationConfig,
        spec: ModelSpec,
        train: Arc<Dataset>,
        test: Arc<Dataset>,
        partition: PartitionMap,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.num_clients() != cfg.num_clients {
            return Err(Error::Config(format!(
                "partition has {} clients, config {}",
                partition.num_clients(),
                cfg.num_clients
            )));
        }
        if spec.input_shape != train.image_shape() || spec.num_classes != train.num_classes() {
            return Err(Error::Config(format!(
                "model expects {:?} inputs and {} classes; dataset has {:?} and {}",
                spec.input_shape,
                spec.num_classes,
                train.image_shape(),
                train.num_classes()
            )));
        }
        let mode = cfg.training_mode(&spec);
        let spec = Arc::new(spec);
        let base = Arc::new(spec.init_params(derive_seed(cfg.seed, &[STREAM_BASE])));
        let global = AdaptedModel::from_mode(spec, base, &mode, derive_seed(cfg.seed, &[STREAM_ADAPTERS]))?;
        let pool = if cfg.parallel_clients > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.parallel_clients)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Federation { cfg, global, train, test, partition, ledger: CostLedger::new(), pool })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn global(&self) -> &AdaptedModel {
        &self.global
    }

    pub fn partition(&self) -> &PartitionMap {
        &self.partition
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    /// Client-side step 2: load the broadcast trainables into a private model
    /// and train on the client's partition.
    pub fn local_train(&self, client: usize, round: usize, received: &ParamSet) -> Result<ClientUpdate> {
        let mut model = self.global.clone();
        model.load_trainables(received)?;
        let indices = self.partition.client(client);
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(self.cfg.seed, client, round));
        let stats = train_local(&mut model, &self.train, indices, &(&self.cfg).into(), &mut rng)?;
        Ok(ClientUpdate {
            client,
            num_examples: indices.len(),
            tensors: model.trainable_tensors().clone(),
            stats,
        })
    }

    pub fn run_round(&mut self, round: usize) -> Result<RoundReport> {
        let started = Instant::now();
        let sampled = sample_clients(round, &self.cfg);
        let encoding = self.cfg.encoding();

        // (1) broadcast
        let down = UpdateMessage::encode_params(round as u32, SERVER_ID, self.global.trainable_tensors(), encoding)?
            .to_bytes();
        let received = wire::deserialize(&down)?.decode()?;

        // (2) local training, (3) upload
        let job = |&client: &usize| -> Result<(ClientUpdate, Vec<u8>)> {
            let update = self.local_train(client, round, &received)?;
            let up = UpdateMessage::encode_params(round as u32, client as u32, &update.tensors, encoding)?.to_bytes();
            Ok((update, up))
        };
        let results: Vec<Result<(ClientUpdate, Vec<u8>)>> = match &self.pool {
            Some(pool) => pool.install(|| sampled.par_iter().map(job).collect()),
            None => sampled.iter().map(job).collect(),
        };

        let mut updates = Vec::with_capacity(results.len());
        let mut uplink_total = 0u64;
        let mut per_client_up = 0u64;
        for r in results {
            let (mut update, bytes) = r?;
            let message = wire::deserialize(&bytes)?;
            if message.sender as usize != update.client || message.round as usize != round {
                return Err(Error::Protocol(format!("message from client {} mislabelled", update.client)));
            }
            update.tensors = message.decode()?;
            self.ledger.record(round, update.client, bytes.len() as u64, down.len() as u64);
            uplink_total += bytes.len() as u64;
            per_client_up = per_client_up.max(bytes.len() as u64);
            updates.push(update);
        }

        // (4) aggregate
        let aggregated = aggregate(&updates)?;
        self.global.load_trainables(&aggregated)?;

        let test = evaluate(&self.global, &self.test, usize::MAX)?;
        let train = evaluate(&self.global, &self.train, self.cfg.train_eval_limit)?;
        let total_n: usize = updates.iter().map(|u| u.num_examples).sum();
        let client_loss = updates
            .iter()
            .map(|u| u.stats.mean_loss as f64 * u.num_examples as f64)
            .sum::<f64>()
            / total_n as f64;
        Ok(RoundReport {
            round,
            seed: self.cfg.seed,
            sampled,
            test_accuracy: test.accuracy,
            test_loss: test.loss,
            train_loss: train.loss,
            client_loss,
            uplink_bytes: uplink_total,
            downlink_bytes: down.len() as u64 * updates.len() as u64,
            uplink_bytes_per_client: per_client_up,
            downlink_bytes_per_client: down.len() as u64,
            cumulative_tcc: self.ledger.client_tcc(),
            wall_time_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (0..self.cfg.rounds).map(|r| self.run_round(r)).collect()
    }
}

pub fn run_experiment(cfg: FederationConfig, spec: ModelSpec, train: Arc<Dataset>, test: Arc<Dataset>) -> Result<Vec<RoundReport>> {
    Federation::new(cfg, spec, train, test)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(client: usize, n: usize, values: &[f32]) -> ClientUpdate {
        let mut tensors = ParamSet::new();
        tensors.insert_named("w".into(), Tensor::new(&[values.len()], values.to_vec()).unwrap());
        ClientUpdate { client, num_examples: n, tensors, stats: LocalStats { steps: 0, mean_loss: 0.0 } }
    }

    #[test]
    fn full_fraction_samples_everyone() {
        let cfg = FederationConfig { num_clients: 7, sample_fraction: 1.0, ..Default::default() };
        assert_eq!(sample_clients(3, &cfg), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn ten_percent_of_hundred() {
        let cfg = FederationConfig::default();
        let k = sample_clients(0, &cfg);
        assert_eq!(k.len(), 10);
        let mut d = k.clone();
        d.dedup();
        assert_eq!(d.len(), 10);
        assert_eq!(k, sample_clients(0, &cfg));
        assert_ne!(k, sample_clients(1, &cfg));
    }

    #[test]
    fn weighted_mean_hand_computed() {
        let ups = [update(0, 1, &[6.0]), update(1, 2, &[3.0]), update(2, 3, &[1.0])];
        let agg = aggregate(&ups).unwrap();
        assert_eq!(agg.get_named("w").unwrap().data(), &[2.5]);
    }

    #[test]
    fn identical_updates_are_a_fixed_point() {
        let ups = [update(4, 10, &[0.1, -0.3]), update(1, 3, &[0.1, -0.3]), update(9, 7, &[0.1, -0.3])];
        let agg = aggregate(&ups).unwrap();
        assert_eq!(agg.get_named("w").unwrap().data(), &[0.1, -0.3]);
    }

    #[test]
    fn opposite_updates_cancel() {
        let ups = [update(0, 5, &[1.5, -2.0]), update(1, 5, &[-1.5, 2.0])];
        assert_eq!(aggregate(&ups).unwrap().get_named("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn incongruent_updates_are_rejected() {
        let ups = [update(0, 1, &[1.0]), update(1, 1, &[1.0, 2.0])];
        assert!(matches!(aggregate(&ups), Err(Error::Protocol(_))));
        assert!(matches!(aggregate(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::default().validate().is_ok());
        let bad = FederationConfig { sample_fraction: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FederationConfig { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(client_seed(1, 0, 0), client_seed(1, 0, 1));
        assert_ne!(client_seed(1, 0, 0), client_seed(1, 1, 0));
        assert_ne!(client_seed(1, 0, 0), client_seed(2, 0, 0));
        assert_eq!(client_seed(1, 2, 3), client_seed(1, 2, 3));
    }
}
