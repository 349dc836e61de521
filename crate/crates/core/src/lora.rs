//! Low-rank adapters on convolutions and the classifier.
//!
//! A conv kernel `W: [O,I,K,K]` is paired with `B: [r,I,K,K]` (an r-channel
//! conv with the base geometry) and `A: [O,r,1,1]` (a 1×1 projection). The
//! adapted layer computes `conv(x, W) + (alpha/r)·conv1x1(conv(x, B), A)`,
//! which equals a conv with kernel `W + (alpha/r)·A·B`. `B` starts at zero,
//! so attaching adapters does not change the model's output.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{
    count_parameters, kaiming_uniform, param_name, Binding, CountFilter, Layer, LayerKind, ModelSpec, ParamSet, Role,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub layer: String,
    /// `[r,I,K,K]` for convs, `[D,r]` for the classifier.
    pub b: Tensor,
    /// `[O,r,1,1]` for convs, `[r,M]` for the classifier.
    pub a: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl AdapterPair {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Layer-training ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Adapters on every conv and on the classifier; nothing else trains.
    Vanilla,
    /// As `Vanilla`, plus trainable group-norm affine parameters.
    PlusNorm,
    /// As `PlusNorm`, with the classifier trained directly instead of adapted.
    PlusNormPlusFinalFc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub variant: PolicyVariant,
    /// Convs trained directly (no adapter, base not frozen).
    pub direct_convs: BTreeSet<String>,
}

impl FreezePolicy {
    pub fn new(variant: PolicyVariant) -> Self {
        FreezePolicy { variant, direct_convs: BTreeSet::new() }
    }

    /// Trainable norms and classifier, stem conv trained directly, adapters
    /// on every other conv.
    pub fn flocora(spec: &ModelSpec) -> Self {
        let mut policy = Self::new(PolicyVariant::PlusNormPlusFinalFc);
        if let Some(stem) = spec.stem() {
            policy.direct_convs.insert(stem.name.clone());
        }
        policy
    }

    pub fn with_direct_conv(mut self, layer: &str) -> Self {
        self.direct_convs.insert(layer.to_string());
        self
    }

    pub fn trains_norms(&self) -> bool {
        self.variant != PolicyVariant::Vanilla
    }

    pub fn adapts(&self, layer: &Layer) -> bool {
        match layer.kind {
            LayerKind::Conv { .. } => !self.direct_convs.contains(&layer.name),
            LayerKind::Fc { .. } => self.variant != PolicyVariant::PlusNormPlusFinalFc,
            _ => false,
        }
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for name in &self.direct_convs {
            match spec.layer(name) {
                Some(l) if matches!(l.kind, LayerKind::Conv { .. }) => {}
                Some(_) => return Err(Error::Config(format!("freeze policy names {name}, which is not a conv"))),
                None => return Err(Error::Config(format!("freeze policy names unknown layer {name}"))),
            }
        }
        Ok(())
    }
}

/// How a model is trained and what it exchanges.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingMode {
    /// Every parameter trains and travels (plain FedAvg).
    Full,
    Lora { rank: usize, alpha: f32, policy: FreezePolicy },
}

/// A model whose base weights stay fixed at their initial values, with a
/// separately owned set of trainable tensors.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    spec: Arc<ModelSpec>,
    base: Arc<ParamSet>,
    trainable: ParamSet,
    scales: BTreeMap<String, f32>,
    mode: TrainingMode,
}

impl AdaptedModel {
    /// Every base tensor becomes trainable.
    pub fn full(spec: Arc<ModelSpec>, base: Arc<ParamSet>) -> Self {
        let mut trainable = (*base).clone();
        trainable.set_all_trainable(true);
        AdaptedModel { spec, base, trainable, scales: BTreeMap::new(), mode: TrainingMode::Full }
    }

    pub fn attach(
        spec: Arc<ModelSpec>,
        base: Arc<ParamSet>,
        rank: usize,
        alpha: f32,
        policy: FreezePolicy,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::Config(format!("adapter alpha must be finite, got {alpha}")));
        }
        policy.validate(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = ParamSet::new();
        let mut scales = BTreeMap::new();
        let missing = |name: &str| Error::Config(format!("base parameters lack {name}"));
        for layer in spec.layers() {
            let name = layer.name.as_str();
            match layer.kind {
                LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                    if policy.adapts(layer) {
                        let b = Tensor::zeros(&[rank, in_channels, kernel, kernel]);
                        let a = kaiming_uniform(&[out_channels, rank, 1, 1], rank, &mut rng);
                        trainable.insert(name, Role::LoraB, b);
                        trainable.insert(name, Role::LoraA, a);
                        scales.insert(name.to_string(), alpha / rank as f32);
                    } else {
                        let k = base.get(name, Role::Kernel).ok_or_else(|| missing(name))?;
                        trainable.insert(name, Role::Kernel, k.clone());
                    }
                }
                LayerKind::GroupNorm { .. } if policy.trains_norms() => {
                    for role in [Role::Gamma, Role::Beta] {
                        let t = base.get(name, role).ok_or_else(|| missing(name))?;
                        trainable.insert(name, role, t.clone());
                    }
                }
                LayerKind::Fc { in_features, out_features } => {
                    if policy.adapts(layer) {
                        trainable.insert(name, Role::LoraB, Tensor::zeros(&[in_features, rank]));
                        trainable.insert(name, Role::LoraA, kaiming_uniform(&[rank, out_features], rank, &mut rng));
                        scales.insert(name.to_string(), alpha / rank as f32);
                    } else {
                        for role in [Role::Weight, Role::Bias] {
                            let t = base.get(name, role).ok_or_else(|| missing(name))?;
                            trainable.insert(name, role, t.clone());
                        }
                    }
                }
                _ => {}
            }
        }
        trainable.set_all_trainable(true);
        Ok(AdaptedModel { spec, base, trainable, scales, mode: TrainingMode::Lora { rank, alpha, policy } })
    }

    pub fn from_mode(spec: Arc<ModelSpec>, base: Arc<ParamSet>, mode: &TrainingMode, seed: u64) -> Result<Self> {
        match mode {
            TrainingMode::Full => Ok(Self::full(spec, base)),
            TrainingMode::Lora { rank, alpha, policy } => {
                Self::attach(spec, base, *rank, *alpha, policy.clone(), seed)
            }
        }
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    /// The frozen initial weights shared by every client.
    pub fn base(&self) -> &Arc<ParamSet> {
        &self.base
    }

    pub fn mode(&self) -> &TrainingMode {
        &self.mode
    }

    /// Everything that trains and travels, in name order.
    pub fn trainable_tensors(&self) -> &ParamSet {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut ParamSet {
        &mut self.trainable
    }

    /// Replaces the trainable set; names and shapes must match exactly.
    pub fn load_trainables(&mut self, incoming: &ParamSet) -> Result<()> {
        check_congruent(&self.trainable, incoming)?;
        for (name, t) in incoming.iter() {
            let dst = self.trainable.get_named_mut(name).expect("congruent");
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn adapter(&self, layer: &str) -> Option<AdapterPair> {
        let b = self.trainable.get(layer, Role::LoraB)?.clone();
        let a = self.trainable.get(layer, Role::LoraA)?.clone();
        let TrainingMode::Lora { rank, alpha, .. } = self.mode else {
            return None;
        };
        Some(AdapterPair { layer: layer.to_string(), b, a, rank, alpha })
    }

    /// Records base tensors as constants and trainables as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let mut binding = Binding::default();
        for (name, t) in self.base.iter() {
            if !self.trainable.contains(name) {
                binding.insert(name.to_string(), tape.constant(t.clone()));
            }
        }
        for (name, t) in self.trainable.iter() {
            binding.insert(name.to_string(), tape.param(t.clone()));
        }
        for (layer, &scale) in &self.scales {
            binding.set_adapter_scale(layer, scale);
        }
        binding
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Binding)> {
        let binding = self.bind(tape);
        let out = self.spec.forward(tape, input, &binding)?;
        Ok((out, binding))
    }

    /// Base plus adapters, trainable flags set; used for parameter counting.
    pub fn all_params(&self) -> ParamSet {
        let mut all = (*self.base).clone();
        all.set_all_trainable(false);
        for (name, t) in self.trainable.iter() {
            all.insert_named(name.to_string(), t.clone());
        }
        all
    }

    pub fn count_parameters(&self, filter: CountFilter) -> usize {
        count_parameters(&self.all_params(), filter)
    }

    /// Plain parameters with every adapter folded into its base weight.
    pub fn merged_params(&self) -> Result<ParamSet> {
        let mut out = (*self.base).clone();
        out.set_all_trainable(false);
        for (name, t) in self.trainable.iter() {
            if !matches!(crate::nn::split_param_name(name), Some((_, Role::LoraA | Role::LoraB))) {
                out.insert_named(name.to_string(), t.clone().with_requires_grad(false));
            }
        }
        for layer in self.spec.layers() {
            if let Some(pair) = self.adapter(&layer.name) {
                let role = if matches!(layer.kind, LayerKind::Conv { .. }) { Role::Kernel } else { Role::Weight };
                let w = self.base.get(&layer.name, role).expect("base weight");
                let merged = merge_adapter(w, &pair)?;
                out.insert(&layer.name, role, merged);
            }
        }
        Ok(out)
    }
}

/// Names and shapes of `incoming` must equal those of `reference`.
pub fn check_congruent(reference: &ParamSet, incoming: &ParamSet) -> Result<()> {
    if reference.len() != incoming.len() {
        return Err(Error::Protocol(format!(
            "expected {} tensors, received {}",
            reference.len(),
            incoming.len()
        )));
    }
    for ((rn, rt), (inn, it)) in reference.iter().zip(incoming.iter()) {
        if rn != inn {
            return Err(Error::Protocol(format!("tensor {inn} does not match expected {rn}")));
        }
        if rt.shape() != it.shape() {
            return Err(Error::Protocol(format!(
                "tensor {rn}: expected shape {:?}, received {:?}",
                rt.shape(),
                it.shape()
            )));
        }
    }
    Ok(())
}

/// `conv(x, W) + scale·conv1x1(conv(x, B), A)`.
#[allow(clippy::too_many_arguments)]
pub fn adapter_forward(
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    lora_b: Var,
    lora_a: Var,
    scale: f32,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let base = tape.conv2d(input, kernel, stride, padding)?;
    let down = tape.conv2d(input, lora_b, stride, padding)?;
    let up = tape.conv2d(down, lora_a, 1, 0)?;
    let up = tape.scale(up, scale);
    tape.add(base, up)
}

/// Folds the adapter product into the base weight.
///
/// Conv: `K[o,i,u,v] = W[o,i,u,v] + (alpha/r)·Σρ A[o,ρ]·B[ρ,i,u,v]`.
/// Classifier: `W[d,m] + (alpha/r)·Σρ B[d,ρ]·A[ρ,m]`.
pub fn merge_adapter(weight: &Tensor, pair: &AdapterPair) -> Result<Tensor> {
    let r = pair.rank;
    let ws = weight.shape();
    let mut delta = match ws.len() {
        4 => {
            let (o, i, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            if pair.b.shape() != [r, i, kh, kw] || pair.a.shape() != [o, r, 1, 1] {
                return Err(Error::shape(
                    "merge_adapter",
                    format!("kernel {ws:?} with B {:?}, A {:?}", pair.b.shape(), pair.a.shape()),
                ));
            }
            let mut d = vec![0.0; weight.len()];
            kernels::gemm_nn(o, r, i * kh * kw, pair.a.data(), pair.b.data(), &mut d);
            d
        }
        2 => {
            let (dim, m) = (ws[0], ws[1]);
            if pair.b.shape() != [dim, r] || pair.a.shape() != [r, m] {
                return Err(Error::shape(
                    "merge_adapter",
                    format!("weight {ws:?} with B {:?}, A {:?}", pair.b.shape(), pair.a.shape()),
                ));
            }
            let mut d = vec![0.0; weight.len()];
            kernels::gemm_nn(dim, r, m, pair.b.data(), pair.a.data(), &mut d);
            d
        }
        _ => return Err(Error::shape("merge_adapter", format!("unsupported weight {ws:?}"))),
    };
    let scale = pair.scale();
    for (d, &w) in delta.iter_mut().zip(weight.data()) {
        *d = w + scale * *d;
    }
    Tensor::new(ws, delta)
}

pub fn adapter_param_names(layer: &str) -> [String; 2] {
    [param_name(layer, Role::LoraB), param_name(layer, Role::LoraA)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{resnet8_spec, tiny_spec, CIFAR_INPUT};

    fn tiny() -> (Arc<ModelSpec>, Arc<ParamSet>) {
        let spec = tiny_spec(3, [3, 8, 8], 4).unwrap();
        let base = spec.init_params(3);
        (Arc::new(spec), Arc::new(base))
    }

    #[test]
    fn attach_rejects_bad_arguments() {
        let (spec, base) = tiny();
        let policy = FreezePolicy::new(PolicyVariant::Vanilla);
        assert!(AdaptedModel::attach(spec.clone(), base.clone(), 0, 1.0, policy.clone(), 0).is_err());
        let bogus = policy.clone().with_direct_conv("nope");
        assert!(matches!(
            AdaptedModel::attach(spec.clone(), base.clone(), 2, 1.0, bogus, 0),
            Err(Error::Config(_))
        ));
        let not_conv = policy.with_direct_conv("fc");
        assert!(AdaptedModel::attach(spec, base, 2, 1.0, not_conv, 0).is_err());
    }

    #[test]
    fn trainable_sets_follow_policy() {
        let (spec, base) = tiny();
        let vanilla = AdaptedModel::attach(spec.clone(), base.clone(), 2, 4.0, FreezePolicy::new(PolicyVariant::Vanilla), 0).unwrap();
        for name in vanilla.trainable_tensors().names() {
            assert!(name.ends_with("lora_a") || name.ends_with("lora_b"), "{name}");
        }
        assert!(vanilla.trainable_tensors().contains("fc.lora_b"));

        let norm = AdaptedModel::attach(spec.clone(), base.clone(), 2, 4.0, FreezePolicy::new(PolicyVariant::PlusNorm), 0).unwrap();
        assert!(norm.trainable_tensors().contains("stem.norm.gamma"));
        assert!(norm.trainable_tensors().contains("fc.lora_a"));
        assert!(!norm.trainable_tensors().contains("fc.weight"));

        let full = AdaptedModel::attach(spec.clone(), base.clone(), 2, 4.0, FreezePolicy::flocora(&spec), 0).unwrap();
        let t = full.trainable_tensors();
        assert!(t.contains("fc.weight") && t.contains("fc.bias"));
        assert!(t.contains("stem.conv.kernel"));
        assert!(!t.contains("stem.conv.lora_b"));
        assert!(t.contains("block.conv1.lora_b"));
        assert!(!t.contains("block.conv1.kernel"));
        let names: Vec<_> = t.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn load_trainables_checks_congruence() {
        let (spec, base) = tiny();
        let mut m = AdaptedModel::attach(spec.clone(), base, 2, 4.0, FreezePolicy::flocora(&spec), 0).unwrap();
        let mut other = m.trainable_tensors().clone();
        other.remove_named("fc.bias");
        assert!(matches!(m.load_trainables(&other), Err(Error::Protocol(_))));
        let mut reshaped = m.trainable_tensors().clone();
        reshaped.insert_named("fc.bias".into(), Tensor::zeros(&[4]));
        assert!(matches!(m.load_trainables(&reshaped), Err(Error::Protocol(_))));
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
        let pair = AdapterPair {
            layer: "x".into(),
            b: Tensor::zeros(&[2, 3, 3, 3]),
            a: Tensor::uniform(&[4, 2, 1, 1], 1.0, &mut rng),
            rank: 2,
            alpha: 16.0,
        };
        assert!(merge_adapter(&w, &pair).unwrap().bit_eq(&w));
    }

    #[test]
    fn merge_single_rank_unit_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[1, 2, 3, 3], 1.0, &mut rng);
        let mut a = Tensor::zeros(&[3, 1, 1, 1]);
        a.data_mut()[1] = 1.0;
        let pair = AdapterPair { layer: "x".into(), b: b.clone(), a, rank: 1, alpha: 2.5 };
        let k = merge_adapter(&w, &pair).unwrap();
        let per_out = 2 * 9;
        for o in 0..3 {
            for j in 0..per_out {
                let idx = o * per_out + j;
                let want = if o == 1 { w.data()[idx] + 2.5 * b.data()[j] } else { w.data()[idx] };
                assert_eq!(k.data()[idx], want);
            }
        }
    }

    #[test]
    fn resnet8_rank32_counts() {
        let spec = Arc::new(resnet8_spec(10, CIFAR_INPUT).unwrap());
        let base = Arc::new(spec.init_params(0));
        let m = AdaptedModel::attach(spec.clone(), base, 32, 512.0, FreezePolicy::flocora(&spec), 0).unwrap();
        // 7808 adapter elements per unit of rank plus the directly trained
        // stem, norms and classifier.
        assert_eq!(m.count_parameters(CountFilter::Trainable), 7808 * 32 + 6986);
        assert_eq!(m.count_parameters(CountFilter::All), 1_227_594 + 7808 * 32);
    }
}
