//! Model descriptions, parameter storage, and the ResNet family builders.
//!
//! A [`ModelSpec`] is a list of named layers in topological order; each layer
//! names its inputs, which lets residual joins be expressed without a
//! separate graph type. Parameters live in a [`ParamSet`] keyed by
//! `"{layer}.{role}"`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora;
use crate::tensor::Tensor;

pub const INPUT: &str = "input";
pub const GROUP_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    GroupNorm { channels: usize, groups: usize },
    Relu,
    Pool,
    Fc { in_features: usize, out_features: usize },
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Tensor roles within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Kernel,
    Gamma,
    Beta,
    Weight,
    Bias,
    /// First adapter factor, applied to the layer input.
    LoraB,
    /// Second adapter factor, projecting rank `r` up to the output width.
    LoraA,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Kernel => "kernel",
            Role::Gamma => "gamma",
            Role::Beta => "beta",
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::LoraB => "lora_b",
            Role::LoraA => "lora_a",
        }
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Some(match name {
            "kernel" => Role::Kernel,
            "gamma" => Role::Gamma,
            "beta" => Role::Beta,
            "weight" => Role::Weight,
            "bias" => Role::Bias,
            "lora_b" => Role::LoraB,
            "lora_a" => Role::LoraA,
            _ => return None,
        })
    }

    pub fn is_norm(self) -> bool {
        matches!(self, Role::Gamma | Role::Beta)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn param_name(layer: &str, role: Role) -> String {
    format!("{layer}.{role}")
}

/// Splits `"{layer}.{role}"` back into its parts.
pub fn split_param_name(name: &str) -> Option<(&str, Role)> {
    let (layer, role) = name.rsplit_once('.')?;
    Some((layer, Role::from_name(role)?))
}

/// Largest divisor of `channels` not exceeding 32.
pub fn group_norm_groups_for(channels: usize) -> usize {
    assert!(channels >= 1);
    (1..=channels.min(32)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]` of one example.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Map([usize; 3]),
    Flat(usize),
}

impl ModelSpec {
    pub fn new(name: &str, input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = ModelSpec { name: name.to_string(), input_shape, num_classes, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
    }

    /// The conv applied directly to the input image.
    pub fn stem(&self) -> Option<&Layer> {
        self.conv_layers().find(|l| l.inputs == [INPUT])
    }

    /// The final fully-connected layer.
    pub fn classifier(&self) -> Option<&Layer> {
        self.layers.iter().rev().find(|l| matches!(l.kind, LayerKind::Fc { .. }))
    }

    /// Parameter shapes in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv { in_channels, out_channels, kernel, .. } => out.push((
                    param_name(&layer.name, Role::Kernel),
                    vec![out_channels, in_channels, kernel, kernel],
                )),
                LayerKind::GroupNorm { channels, .. } => {
                    out.push((param_name(&layer.name, Role::Gamma), vec![channels]));
                    out.push((param_name(&layer.name, Role::Beta), vec![channels]));
                }
                LayerKind::Fc { in_features, out_features } => {
                    out.push((param_name(&layer.name, Role::Weight), vec![in_features, out_features]));
                    out.push((param_name(&layer.name, Role::Bias), vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    /// Total parameter count; depends only on the architecture.
    pub fn parameter_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let mut shapes: HashMap<&str, Activation> = HashMap::new();
        shapes.insert(INPUT, Activation::Map(self.input_shape));
        let bad = |layer: &Layer, what: String| Error::Config(format!("layer {}: {what}", layer.name));
        for layer in &self.layers {
            if layer.name.is_empty() || layer.name == INPUT {
                return Err(bad(layer, "invalid layer name".into()));
            }
            if shapes.contains_key(layer.name.as_str()) {
                return Err(bad(layer, "duplicate layer name".into()));
            }
            let mut ins = Vec::new();
            for i in &layer.inputs {
                ins.push(*shapes.get(i.as_str()).ok_or_else(|| bad(layer, format!("unknown input {i}")))?);
            }
            let expect_arity = if layer.kind == LayerKind::Add { 2 } else { 1 };
            if ins.len() != expect_arity {
                return Err(bad(layer, format!("expected {expect_arity} inputs, got {}", ins.len())));
            }
            let out = match (layer.kind, ins[0]) {
                (LayerKind::Conv { in_channels, out_channels, kernel, stride, padding }, Activation::Map([c, h, w])) => {
                    if c != in_channels || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(bad(layer, format!("conv does not fit input [{c},{h},{w}]")));
                    }
                    Activation::Map([
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                (LayerKind::GroupNorm { channels, groups }, a @ Activation::Map([c, _, _])) => {
                    if c != channels || groups == 0 || channels % groups != 0 {
                        return Err(bad(layer, format!("group norm over {channels}/{groups} does not fit {c} channels")));
                    }
                    a
                }
                (LayerKind::Relu, a) => a,
                (LayerKind::Pool, Activation::Map([c, _, _])) => Activation::Flat(c),
                (LayerKind::Fc { in_features, out_features }, Activation::Flat(d)) => {
                    if d != in_features {
                        return Err(bad(layer, format!("fc expects {in_features} features, got {d}")));
                    }
                    Activation::Flat(out_features)
                }
                (LayerKind::Add, a) => {
                    if ins[1] != a {
                        return Err(bad(layer, format!("residual operands differ: {a:?} vs {:?}", ins[1])));
                    }
                    a
                }
                (kind, a) => return Err(bad(layer, format!("{kind:?} cannot consume {a:?}"))),
            };
            shapes.insert(&layer.name, out);
        }
        match self.layers.last().map(|l| shapes[l.name.as_str()]) {
            Some(Activation::Flat(k)) if k == self.num_classes => Ok(()),
            other => Err(Error::Config(format!(
                "model must end in {} logits, ends in {other:?}",
                self.num_classes
            ))),
        }
    }

    /// Runs the model on `input` (`[N,C,H,W]`) using the tensors in `binding`.
    ///
    /// A conv or fc layer with `lora_b`/`lora_a` bound computes
    /// `base(x) + (alpha/r)·A(B(x))` with the scale taken from the binding.
    pub fn forward(&self, tape: &mut Tape, input: Var, binding: &Binding) -> Result<Var> {
        let mut acts: HashMap<&str, Var> = HashMap::new();
        acts.insert(INPUT, input);
        let mut last = input;
        for layer in &self.layers {
            let x = acts[layer.inputs[0].as_str()];
            let name = layer.name.as_str();
            let y = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let kernel = binding.var(name, Role::Kernel)?;
                    match binding.adapter(name) {
                        Some((b, a, scale)) => lora::adapter_forward(tape, x, kernel, b, a, scale, stride, padding)?,
                        None => tape.conv2d(x, kernel, stride, padding)?,
                    }
                }
                LayerKind::GroupNorm { groups, .. } => tape.group_norm(
                    x,
                    groups,
                    binding.var(name, Role::Gamma)?,
                    binding.var(name, Role::Beta)?,
                    GROUP_NORM_EPS,
                )?,
                LayerKind::Relu => tape.relu(x),
                LayerKind::Pool => tape.avg_pool(x)?,
                LayerKind::Fc { .. } => {
                    let base = tape.linear(x, binding.var(name, Role::Weight)?, Some(binding.var(name, Role::Bias)?))?;
                    match binding.adapter(name) {
                        Some((b, a, scale)) => {
                            let down = tape.linear(x, b, None)?;
                            let up = tape.linear(down, a, None)?;
                            let up = tape.scale(up, scale);
                            tape.add(base, up)?
                        }
                        None => base,
                    }
                }
                LayerKind::Add => tape.add(x, acts[layer.inputs[1].as_str()])?,
            };
            acts.insert(name, y);
            last = y;
        }
        Ok(last)
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let shape = [out_channels, in_channels, kernel, kernel];
                    params.insert(&layer.name, Role::Kernel, kaiming_uniform(&shape, fan_in, &mut rng));
                }
                LayerKind::GroupNorm { channels, .. } => {
                    params.insert(&layer.name, Role::Gamma, Tensor::full(&[channels], 1.0));
                    params.insert(&layer.name, Role::Beta, Tensor::zeros(&[channels]));
                }
                LayerKind::Fc { in_features, out_features } => {
                    let w = kaiming_uniform(&[in_features, out_features], in_features, &mut rng);
                    params.insert(&layer.name, Role::Weight, w);
                    params.insert(&layer.name, Role::Bias, Tensor::zeros(&[out_features]));
                }
                _ => {}
            }
        }
        params
    }
}

pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Named tensors ordered by name. `requires_grad` on each tensor marks it
/// as trainable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, role: Role, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(param_name(layer, role), tensor)
    }

    pub fn insert_named(&mut self, name: String, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name, tensor)
    }

    pub fn get(&self, layer: &str, role: Role) -> Option<&Tensor> {
        self.tensors.get(&param_name(layer, role))
    }

    pub fn get_named(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_named_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove_named(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Records every tensor on `tape`, keeping each tensor's trainable flag.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let mut binding = Binding::default();
        for (name, t) in &self.tensors {
            binding.vars.insert(name.clone(), tape.leaf(t.clone()));
        }
        binding
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { tensors: iter.into_iter().collect() }
    }
}

impl IntoIterator for ParamSet {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFilter {
    Trainable,
    All,
}

pub fn count_parameters(params: &ParamSet, filter: CountFilter) -> usize {
    params
        .iter()
        .filter(|(_, t)| filter == CountFilter::All || t.requires_grad())
        .map(|(_, t)| t.len())
        .sum()
}

/// Tape handles for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
    scales: HashMap<String, f32>,
}

impl Binding {
    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    pub fn set_adapter_scale(&mut self, layer: &str, scale: f32) {
        self.scales.insert(layer.to_string(), scale);
    }

    pub fn var(&self, layer: &str, role: Role) -> Result<Var> {
        let name = param_name(layer, role);
        self.vars
            .get(&name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no tensor bound for {name}")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn adapter(&self, layer: &str) -> Option<(Var, Var, f32)> {
        let b = self.get(&param_name(layer, Role::LoraB))?;
        let a = self.get(&param_name(layer, Role::LoraA))?;
        Some((b, a, self.scales.get(layer).copied().unwrap_or(1.0)))
    }
}

/// Incremental builder used by the architecture constructors.
struct Builder {
    layers: Vec<Layer>,
    last: String,
}

impl Builder {
    fn new() -> Self {
        Builder { layers: Vec::new(), last: INPUT.to_string() }
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<String>) -> String {
        self.layers.push(Layer { name: name.clone(), kind, inputs });
        self.last = name.clone();
        name
    }

    fn then(&mut self, name: String, kind: LayerKind) -> String {
        let input = self.last.clone();
        self.push(name, kind, vec![input])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_norm(&mut self, prefix: &str, suffix: &str, from: &str, cin: usize, cout: usize, k: usize, stride: usize) -> String {
        let conv = format!("{prefix}conv{suffix}");
        self.push(
            conv.clone(),
            LayerKind::Conv { in_channels: cin, out_channels: cout, kernel: k, stride, padding: k / 2 },
            vec![from.to_string()],
        );
        self.then(
            format!("{prefix}norm{suffix}"),
            LayerKind::GroupNorm { channels: cout, groups: group_norm_groups_for(cout) },
        )
    }

    /// Basic residual block; a 1×1 projection (conv + norm) is used when the
    /// shape changes.
    fn basic_block(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize) {
        let input = self.last.clone();
        self.conv_norm(prefix, "1", &input, cin, cout, 3, stride);
        self.then(format!("{prefix}relu1"), LayerKind::Relu);
        let h = self.last.clone();
        let main = self.conv_norm(prefix, "2", &h, cout, cout, 3, 1);
        let shortcut = if stride != 1 || cin != cout {
            self.conv_norm(&format!("{prefix}shortcut."), "", &input, cin, cout, 1, stride)
        } else {
            input
        };
        self.push(format!("{prefix}add"), LayerKind::Add, vec![main, shortcut]);
        self.then(format!("{prefix}relu2"), LayerKind::Relu);
    }

    fn head(&mut self, features: usize, num_classes: usize) {
        self.then("pool".into(), LayerKind::Pool);
        self.then("fc".into(), LayerKind::Fc { in_features: features, out_features: num_classes });
    }
}

fn resnet(name: &str, input_shape: [usize; 3], num_classes: usize, widths: &[usize], blocks: usize) -> Result<ModelSpec> {
    let mut b = Builder::new();
    b.conv_norm("stem.", "", INPUT, input_shape[0], widths[0], 3, 1);
    b.then("stem.relu".into(), LayerKind::Relu);
    let mut cin = widths[0];
    for (stage, &w) in widths.iter().enumerate() {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            b.basic_block(&format!("layer{}.{block}.", stage + 1), cin, w, stride);
            cin = w;
        }
    }
    b.head(cin, num_classes);
    ModelSpec::new(name, input_shape, num_classes, b.layers)
}

pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];

/// Three stages of one basic block at 64/128/256 channels.
pub fn resnet8_spec(num_classes: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
    resnet("resnet8", input_shape, num_classes, &[64, 128, 256], 1)
}

/// Four stages of two basic blocks at 64/128/256/512 channels.
pub fn resnet18_spec(num_classes: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
    resnet("resnet18", input_shape, num_classes, &[64, 128, 256, 512], 2)
}

/// Three convs: stem at `width`, then a strided conv to `2·width` and a
/// second conv at `2·width` joined by an identity residual.
pub fn tiny_spec(num_classes: usize, input_shape: [usize; 3], width: usize) -> Result<ModelSpec> {
    let mut b = Builder::new();
    b.conv_norm("stem.", "", INPUT, input_shape[0], width, 3, 1);
    b.then("stem.relu".into(), LayerKind::Relu);
    let h = b.last.clone();
    b.conv_norm("block.", "1", &h, width, 2 * width, 3, 2);
    let skip = b.then("block.relu1".into(), LayerKind::Relu);
    let main = b.conv_norm("block.", "2", &skip, 2 * width, 2 * width, 3, 1);
    b.push("block.add".into(), LayerKind::Add, vec![main, skip]);
    b.then("block.relu2".into(), LayerKind::Relu);
    b.head(2 * width, num_classes);
    ModelSpec::new("tiny", input_shape, num_classes, b.layers)
}

/// Single conv followed by pooling and a classifier.
pub fn toy_spec(num_classes: usize, input_shape: [usize; 3], width: usize) -> Result<ModelSpec> {
    let mut b = Builder::new();
    b.conv_norm("", "", INPUT, input_shape[0], width, 3, 1);
    b.then("relu".into(), LayerKind::Relu);
    b.head(width, num_classes);
    ModelSpec::new("toy", input_shape, num_classes, b.layers)
}

pub fn build_resnet8(num_classes: usize, seed: u64) -> Result<(ModelSpec, ParamSet)> {
    let spec = resnet8_spec(num_classes, CIFAR_INPUT)?;
    let params = spec.init_params(seed);
    Ok((spec, params))
}

pub fn build_resnet18(num_classes: usize, seed: u64) -> Result<(ModelSpec, ParamSet)> {
    let spec = resnet18_spec(num_classes, CIFAR_INPUT)?;
    let params = spec.init_params(seed);
    Ok((spec, params))
}

/// Architectures selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "arch", deny_unknown_fields)]
pub enum ModelKind {
    Resnet8,
    Resnet18,
    Tiny { width: usize },
    Toy { width: usize },
}

impl ModelKind {
    pub fn spec(self, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
        match self {
            ModelKind::Resnet8 => resnet8_spec(num_classes, input_shape),
            ModelKind::Resnet18 => resnet18_spec(num_classes, input_shape),
            ModelKind::Tiny { width } => tiny_spec(num_classes, input_shape, width),
            ModelKind::Toy { width } => toy_spec(num_classes, input_shape, width),
        }
    }

    pub fn parse(name: &str) -> Option<ModelKind> {
        match name {
            "resnet8" => Some(ModelKind::Resnet8),
            "resnet18" => Some(ModelKind::Resnet18),
            "tiny" => Some(ModelKind::Tiny { width: 16 }),
            "toy" => Some(ModelKind::Toy { width: 8 }),
            _ => None,
        }
    }
}
