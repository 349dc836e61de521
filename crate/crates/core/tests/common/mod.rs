//! Independent reference implementations used by the integration and
//! acceptance tests. Everything here is written directly from the
//! definitions, in FP64, without touching the library kernels.

#![allow(dead_code)]

use std::sync::Arc;

use flocora::autograd::{Tape, Var};
use flocora::data::{synthetic_split, Dataset, SyntheticConfig};
use flocora::federation::{FederationConfig, Method};
use flocora::nn::{tiny_spec, ModelSpec};
use flocora::{BitWidth, PolicyVariant, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct cross-correlation with zero padding.
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0f64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * stride + u) as isize - padding as isize;
                                let ix = (z * stride + v) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64;
                                let kv = kd[((oc * c + ic) * kh + u) * kw + v] as f64;
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + z] = acc;
                }
            }
        }
    }
    out
}

/// `Σ_k (n_k / Σn)·u_k` in FP64.
pub fn weighted_mean_oracle(updates: &[(usize, Vec<f32>)]) -> Vec<f64> {
    let total: f64 = updates.iter().map(|(n, _)| *n as f64).sum();
    let len = updates[0].1.len();
    (0..len)
        .map(|i| updates.iter().map(|(n, u)| *n as f64 * u[i] as f64).sum::<f64>() / total)
        .collect()
}

/// `max |a − b| / max |b|`; the reference scale keeps near-zero entries
/// from dominating.
pub fn max_rel_error(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max) / scale
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

/// Central finite differences on `coords` random coordinates of every
/// input that requires a gradient. Relative error is measured against
/// `max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(inputs: &[Tensor], coords: usize, h: f32, floor: f64, seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0] as f64)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck { max_rel: 0.0, checked: 0 };
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = tape.grad(vars[i]).expect("gradient requested").to_vec();
        for _ in 0..coords {
            let j = rng.random_range(0..t.len());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h as f64);
            let a = analytic[j] as f64;
            let denom = a.abs().max(numeric.abs()).max(floor);
            report.max_rel = report.max_rel.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element carries a
/// distinct weight in the scalar loss.
pub fn random_projection(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

// Desk-scale setup shared by the convergence, ablation and determinism checks.

pub const DESK_WIDTH: usize = 16;
pub const DESK_IMAGE: [usize; 3] = [3, 8, 8];

pub fn desk_data() -> (Arc<Dataset>, Arc<Dataset>) {
    let cfg = SyntheticConfig {
        num_classes: 3,
        train_per_class: 200,
        test_per_class: 100,
        image_shape: DESK_IMAGE,
        noise: 1.0,
        seed: 0,
    };
    let (train, test) = synthetic_split(&cfg).expect("synthetic data");
    (Arc::new(train), Arc::new(test))
}

pub fn desk_spec() -> ModelSpec {
    tiny_spec(3, DESK_IMAGE, DESK_WIDTH).expect("tiny spec")
}

pub fn desk_config(method: Method, seed: u64) -> FederationConfig {
    FederationConfig {
        num_clients: 8,
        sample_fraction: 1.0,
        rounds: 20,
        local_epochs: 2,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.9,
        method,
        rank: DESK_WIDTH,
        alpha: 2.0 * DESK_WIDTH as f32,
        alpha_per_rank: None,
        policy: PolicyVariant::PlusNormPlusFinalFc,
        train_stem: true,
        quant_bits: None,
        lda_alpha: 0.5,
        seed,
        parallel_clients: 1,
        train_eval_limit: usize::MAX,
    }
}

/// Rank-2 adapters with the same `alpha/r`, where the freezing policy
/// visibly matters.
pub fn ablation_config(policy: PolicyVariant, seed: u64) -> FederationConfig {
    FederationConfig { rank: 2, alpha: 4.0, policy, ..desk_config(Method::Flocora, seed) }
}

pub fn with_bits(cfg: FederationConfig, bits: BitWidth) -> FederationConfig {
    FederationConfig { quant_bits: Some(bits), ..cfg }
}
