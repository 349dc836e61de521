//! Datasets (CIFAR-10 binary batches and a synthetic generator) and
//! Dirichlet label partitioning across clients.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Immutable labelled image collection stored as one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], images: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} values cannot hold {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label: bad, classes: num_classes });
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite pixel value".into()));
        }
        Ok(Dataset { image_shape, images, labels, num_classes, normalization: None })
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = Some(n);
        self
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Stacks the selected examples into `[N,C,H,W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            image_shape: self.image_shape,
            images: t.into_data(),
            labels,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Stores the dataset as `images` and `labels` tensors, suitable for the
    /// checkpoint container.
    pub fn to_params(&self) -> ParamSet {
        let [c, h, w] = self.image_shape;
        let mut p = ParamSet::new();
        let images = Tensor::new(&[self.len(), c, h, w], self.images.clone()).expect("consistent");
        let labels = Tensor::new(&[self.len()], self.labels.iter().map(|&l| l as f32).collect()).expect("consistent");
        p.insert_named("images".into(), images);
        p.insert_named("labels".into(), labels);
        p.insert_named("num_classes".into(), Tensor::scalar(self.num_classes as f32));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Dataset> {
        let get = |n: &str| p.get_named(n).ok_or_else(|| Error::Format(format!("dataset container lacks {n}")));
        let images = get("images")?;
        let labels = get("labels")?;
        let classes = get("num_classes")?.data()[0] as usize;
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Format(format!("images tensor {s:?} must be 4-D")));
        }
        let labels = labels.data().iter().map(|&l| l as usize).collect();
        Dataset::new([s[1], s[2], s[3]], images.data().to_vec(), labels, classes)
    }
}

/// Parses `records` CIFAR-10 binary records: one label byte, then 1024 red,
/// 1024 green and 1024 blue pixel bytes in row-major order.
pub fn parse_cifar_records(bytes: &[u8], records: usize) -> Result<Dataset> {
    if bytes.len() != records * CIFAR_RECORD_BYTES {
        return Err(Error::Format(format!(
            "CIFAR-10 batch must be {} bytes for {records} records, got {}",
            records * CIFAR_RECORD_BYTES,
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(records);
    let mut images = Vec::with_capacity(records * (CIFAR_RECORD_BYTES - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r}: label byte {label} is not a CIFAR-10 class")));
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok(Dataset::new([3, 32, 32], images, labels, CIFAR_CLASSES)?.with_normalization(Normalization {
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    }))
}

pub fn read_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_cifar_records(&bytes, CIFAR_BATCH_RECORDS).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Format("no batches".into()))?;
    let (shape, classes, norm) = (first.image_shape, first.num_classes, first.normalization.clone());
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    let mut d = Dataset::new(shape, images, labels, classes)?;
    d.normalization = norm;
    Ok(d)
}

/// Train and test splits of the standard binary distribution
/// (`data_batch_1.bin` … `data_batch_5.bin`, `test_batch.bin`).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::Format(format!("CIFAR-10 directory {} not found", dir.display())));
    }
    let train = (1..=5)
        .map(|i| read_cifar_batch(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar_batch(&dir.join("test_batch.bin"))?;
    Ok((concat(train)?, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_shape: [usize; 3],
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 3,
            train_per_class: 100,
            test_per_class: 50,
            image_shape: [3, 8, 8],
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Class mean images drawn uniformly in `[-1, 1]` plus Gaussian noise;
/// examples are ordered by class.
pub fn synthetic_dataset(num_classes: usize, per_class: usize, image_shape: [usize; 3], noise: f32, seed: u64) -> Result<Dataset> {
    let cfg = SyntheticConfig { num_classes, train_per_class: per_class, test_per_class: 0, image_shape, noise, seed };
    Ok(synthetic_split(&cfg)?.0)
}

/// Train and test sets drawn from the same class means.
pub fn synthetic_split(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if cfg.train_per_class == 0 || cfg.num_classes < 2 {
        return Err(Error::Config("synthetic data needs >= 2 classes and >= 1 example per class".into()));
    }
    let per: usize = cfg.image_shape.iter().product();
    let mut mean_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|_| (0..per).map(|_| mean_rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut draw = |count: usize| {
        let mut images = Vec::with_capacity(cfg.num_classes * count * per);
        let mut labels = Vec::with_capacity(cfg.num_classes * count);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..count {
                images.extend(mean.iter().map(|&m| {
                    let z: f32 = StandardNormal.sample(&mut noise_rng);
                    m + cfg.noise * z
                }));
                labels.push(class);
            }
        }
        (images, labels)
    };
    let (ti, tl) = draw(cfg.train_per_class);
    let (vi, vl) = draw(cfg.test_per_class);
    let train = Dataset::new(cfg.image_shape, ti, tl, cfg.num_classes)?;
    let test = if vl.is_empty() {
        train.clone()
    } else {
        Dataset::new(cfg.image_shape, vi, vl, cfg.num_classes)?
    };
    Ok((train, test))
}

/// Client → example indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionMap {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.clients[id]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// `histogram[client][class]`.
    pub fn class_histogram(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean over clients of the Shannon entropy (nats) of their label distribution.
    pub fn mean_label_entropy(&self, labels: &[usize], num_classes: usize) -> f64 {
        let hist = self.class_histogram(labels, num_classes);
        let total: f64 = hist
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                h.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n as f64;
                        -p * p.ln()
                    })
                    .sum::<f64>()
            })
            .sum();
        total / hist.len() as f64
    }
}

const PARTITION_RETRIES: usize = 100;

/// Per class, client shares ~ Dirichlet(alpha·1); counts are rounded with the
/// largest-remainder method so they sum exactly to the class size.
pub fn lda_partition(labels: &[usize], num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionMap> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Config(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if labels.len() < num_clients {
        return Err(Error::Config(format!(
            "{} examples cannot give each of {num_clients} clients at least one",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut clients = vec![Vec::new(); num_clients];
    for _ in 0..PARTITION_RETRIES {
        for c in &mut clients {
            c.clear();
        }
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let shares = dirichlet(&gamma, num_clients, &mut rng);
            let counts = largest_remainder(&shares, members.len());
            let mut start = 0;
            for (client, &n) in clients.iter_mut().zip(&counts) {
                client.extend_from_slice(&members[start..start + n]);
                start += n;
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            break;
        }
    }
    // Retries exhausted: hand one example from the largest client to each empty one.
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..num_clients).max_by_key(|&i| (clients[i].len(), std::cmp::Reverse(i))).unwrap();
        let moved = clients[donor].pop().expect("donor has > 1 example");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionMap { dirichlet_alpha: alpha, seed, clients })
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    for _ in 0..PARTITION_RETRIES {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
    // Every component underflowed (tiny alpha): put all mass on one client.
    let mut out = vec![0.0; k];
    out[rng.random_range(0..k)] = 1.0;
    out
}

/// Integer counts proportional to `shares` summing exactly to `total`.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(4, 10);
        let p = lda_partition(&labels, 1, 0.5, 3).unwrap();
        assert_eq!(p.clients[0], (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let labels = balanced_labels(10, 1000);
        let p = lda_partition(&labels, 10, 1e6, 11).unwrap();
        for h in p.class_histogram(&labels, 10) {
            for &c in &h {
                assert!((c as f64 - 100.0).abs() <= 10.0, "{h:?}");
            }
        }
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let labels = balanced_labels(5, 37);
        for alpha in [0.05, 0.5, 1.0, 100.0] {
            for seed in 0..5 {
                let p = lda_partition(&labels, 12, alpha, seed).unwrap();
                let mut all: Vec<usize> = p.clients.concat();
                all.sort_unstable();
                assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
                assert!(p.clients.iter().all(|c| !c.is_empty()));
                assert_eq!(p, lda_partition(&labels, 12, alpha, seed).unwrap());
            }
        }
    }

    #[test]
    fn partition_rejects_bad_input() {
        assert!(lda_partition(&[0, 1], 3, 0.5, 0).is_err());
        assert!(lda_partition(&[0, 1, 1], 2, 0.0, 0).is_err());
        assert!(lda_partition(&[0, 1, 1], 0, 1.0, 0).is_err());
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn noiseless_synthetic_data_is_nearest_mean_separable() {
        let d = synthetic_dataset(4, 10, [1, 4, 4], 0.0, 5).unwrap();
        let means: Vec<&[f32]> = (0..4).map(|c| d.image(c * 10)).collect();
        for i in 0..d.len() {
            let x = d.image(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f32 = x.iter().zip(means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f32 = x.iter().zip(means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, d.labels()[i]);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_dataset(3, 5, [3, 4, 4], 0.5, 9).unwrap();
        let b = synthetic_dataset(3, 5, [3, 4, 4], 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_dataset(3, 5, [3, 4, 4], 0.5, 10).unwrap());
    }

    #[test]
    fn cifar_record_parsing() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 7;
        for i in 0..3072 {
            bytes[1 + i] = (i % 256) as u8;
        }
        bytes[CIFAR_RECORD_BYTES] = 2;
        let d = parse_cifar_records(&bytes, 2).unwrap();
        assert_eq!(d.labels(), &[7, 2]);
        let img = d.image(0);
        // Red plane starts at 0, green plane pixel 0 is byte 1024 % 256 = 0,
        // blue plane's last pixel is 3071 % 256 = 255.
        assert!((img[0] - (0.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!((img[1023] - (255.0 / 255.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!((img[3071] - (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-6);

        assert!(parse_cifar_records(&bytes[..bytes.len() - 1], 2).is_err());
        bytes[0] = 10;
        assert!(matches!(parse_cifar_records(&bytes, 2), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_container_round_trip() {
        let d = synthetic_dataset(3, 4, [2, 3, 3], 0.3, 1).unwrap();
        assert_eq!(Dataset::from_params(&d.to_params()).unwrap(), d);
    }
}
