//! DenseNet-style classifier.
//!
//! Layout: a 3×3 stem convolution, then dense blocks separated by
//! transition layers, then global average pooling and a linear head.
//!
//! * dense layer: batch-norm → relu → 3×3 conv producing `growth_rate`
//!   channels, concatenated onto everything the block has produced so far
//! * transition: batch-norm → relu → 1×1 conv (compression) → 2×2 average
//!   pool, stride 2
//!
//! Weights live in a [`NetworkState`] keyed by canonical names such as
//! `block1.layer3.conv.weight` or `transition0.norm.running_var`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{NormConfig, NormMode, RunningStats, Tape, Var};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input size {input_size} shrinks below 2 pixels before transition {transition}")]
    SpatialUnderflow { input_size: usize, transition: usize },
    #[error("weight names do not match the network spec (missing: {missing:?}, unexpected: {unexpected:?})")]
    NameSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    SlotShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("donor network is incompatible: {0}")]
    DonorMismatch(String),
    #[error("unknown weight name {0}")]
    UnknownName(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Square input side in pixels.
    pub input_size: usize,
    pub initial_channels: usize,
    pub growth_rate: usize,
    pub block_layout: Vec<usize>,
    /// Channel compression applied by transitions, in `(0, 1]`.
    pub compression: f64,
    pub num_classes: usize,
    pub norm_momentum: f64,
    pub norm_epsilon: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_size: 96,
            initial_channels: 16,
            growth_rate: 12,
            block_layout: vec![4, 4, 4],
            compression: 0.5,
            num_classes: 3,
            norm_momentum: 0.9,
            norm_epsilon: 1e-5,
        }
    }
}

/// Channel and spatial bookkeeping of one dense block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub layers: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    ConvWeight,
    NormGamma,
    NormBeta,
    NormMean,
    NormVar,
    LinearWeight,
    LinearBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
}

impl Slot {
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

pub const HEAD_WEIGHT: &str = "head.linear.weight";
pub const HEAD_BIAS: &str = "head.linear.bias";

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ModelError::InvalidSpec(msg.to_string()));
        if self.input_size == 0 || self.initial_channels == 0 || self.growth_rate == 0 || self.num_classes == 0 {
            return bad("sizes, channel counts and num_classes must be positive");
        }
        if self.block_layout.is_empty() || self.block_layout.contains(&0) {
            return bad("block_layout needs at least one block and every block at least one layer");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if !(self.norm_momentum >= 0.0 && self.norm_momentum < 1.0) || !(self.norm_epsilon > 0.0) {
            return bad("norm_momentum must lie in [0, 1) and norm_epsilon must be positive");
        }
        self.block_plan().map(|_| ())
    }

    /// Channels and spatial size for every dense block.
    pub fn block_plan(&self) -> Result<Vec<BlockPlan>> {
        let mut plans = Vec::with_capacity(self.block_layout.len());
        let mut channels = self.initial_channels;
        let mut spatial = self.input_size;
        for (i, &layers) in self.block_layout.iter().enumerate() {
            if i > 0 {
                if spatial < 2 {
                    return Err(ModelError::SpatialUnderflow {
                        input_size: self.input_size,
                        transition: i - 1,
                    });
                }
                spatial /= 2;
                channels = self.compressed(plans.last().map(|p: &BlockPlan| p.out_channels).unwrap_or(channels))?;
            }
            let out = channels + layers * self.growth_rate;
            plans.push(BlockPlan {
                in_channels: channels,
                out_channels: out,
                layers,
                spatial,
            });
        }
        Ok(plans)
    }

    fn compressed(&self, channels: usize) -> Result<usize> {
        let c = (self.compression * channels as f64).floor() as usize;
        if c == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "compression {} leaves no channels out of {channels}",
                self.compression
            )));
        }
        Ok(c)
    }

    /// Length of the pooled feature vector fed to the head.
    pub fn feature_len(&self) -> Result<usize> {
        Ok(self.block_plan()?.last().map(|p| p.out_channels).unwrap_or(0))
    }

    /// Every weight slot in canonical order.
    pub fn slots(&self) -> Result<Vec<Slot>> {
        self.validate()?;
        let mut slots = Vec::new();
        let conv = |name: String, shape: Vec<usize>| Slot {
            name,
            shape,
            kind: SlotKind::ConvWeight,
        };
        let norm = |slots: &mut Vec<Slot>, prefix: &str, c: usize| {
            for (suffix, kind) in [
                ("gamma", SlotKind::NormGamma),
                ("beta", SlotKind::NormBeta),
                ("running_mean", SlotKind::NormMean),
                ("running_var", SlotKind::NormVar),
            ] {
                slots.push(Slot {
                    name: format!("{prefix}.norm.{suffix}"),
                    shape: vec![c],
                    kind,
                });
            }
        };
        slots.push(conv("stem.conv.weight".into(), vec![self.initial_channels, 1, 3, 3]));
        let plans = self.block_plan()?;
        for (b, plan) in plans.iter().enumerate() {
            if b > 0 {
                let prev = plans[b - 1].out_channels;
                let prefix = format!("transition{}", b - 1);
                norm(&mut slots, &prefix, prev);
                slots.push(conv(format!("{prefix}.conv.weight"), vec![plan.in_channels, prev, 1, 1]));
            }
            for l in 0..plan.layers {
                let cin = plan.in_channels + l * self.growth_rate;
                let prefix = format!("block{b}.layer{l}");
                norm(&mut slots, &prefix, cin);
                slots.push(conv(format!("{prefix}.conv.weight"), vec![self.growth_rate, cin, 3, 3]));
            }
        }
        let features = self.feature_len()?;
        slots.push(Slot {
            name: HEAD_WEIGHT.into(),
            shape: vec![self.num_classes, features],
            kind: SlotKind::LinearWeight,
        });
        slots.push(Slot {
            name: HEAD_BIAS.into(),
            shape: vec![self.num_classes],
            kind: SlotKind::LinearBias,
        });
        Ok(slots)
    }

    pub fn head_names() -> BTreeSet<String> {
        [HEAD_WEIGHT, HEAD_BIAS].iter().map(|s| s.to_string()).collect()
    }

    /// Same architecture apart from the number of classes.
    fn same_body(&self, other: &NetworkSpec) -> bool {
        NetworkSpec {
            num_classes: other.num_classes,
            ..self.clone()
        } == *other
    }
}

/// Named weight tensors of a network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkState {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl NetworkState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Leaves and side outputs of one forward pass.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Parameter leaves, in canonical slot order.
    pub params: Vec<(String, Var)>,
    /// Updated running statistics for batch-norm layers normalized with
    /// batch statistics, keyed by layer prefix.
    pub running: Vec<(String, RunningStats<T>)>,
    /// Output of each dense block (after the final concatenation).
    pub block_outputs: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    state: NetworkState,
    frozen: BTreeSet<String>,
}

impl Network {
    /// Builds a zero-filled skeleton for `spec`.
    pub fn build(spec: NetworkSpec) -> Result<Self> {
        let mut state = NetworkState::new();
        for slot in spec.slots()? {
            state.insert(slot.name, Tensor::zeros(&slot.shape)?);
        }
        Ok(Self {
            spec,
            state,
            frozen: BTreeSet::new(),
        })
    }

    /// Wraps an existing state, checking it fills exactly the slots of `spec`.
    pub fn from_state(spec: NetworkSpec, state: NetworkState) -> Result<Self> {
        let slots = spec.slots()?;
        let expected: BTreeSet<String> = slots.iter().map(|s| s.name.clone()).collect();
        let found = state.names();
        if expected != found {
            return Err(ModelError::NameSetMismatch {
                missing: expected.difference(&found).cloned().collect(),
                unexpected: found.difference(&expected).cloned().collect(),
            });
        }
        for slot in &slots {
            let t = state.get(&slot.name).expect("checked above");
            if t.shape() != slot.shape.as_slice() {
                return Err(ModelError::SlotShape {
                    name: slot.name.clone(),
                    expected: slot.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            spec,
            state,
            frozen: BTreeSet::new(),
        })
    }

    /// He-scaled Gaussian weights (std = sqrt(2 / fan_in)), zero biases,
    /// identity batch-norm. Each slot draws from its own stream derived
    /// from `seed` and the slot name.
    pub fn init_gaussian(&mut self, seed: u64) -> Result<()> {
        let slots = self.spec.slots()?;
        for slot in &slots {
            self.init_slot(slot, seed)?;
        }
        Ok(())
    }

    fn init_slot(&mut self, slot: &Slot, seed: u64) -> Result<()> {
        let tensor = match slot.kind {
            SlotKind::ConvWeight | SlotKind::LinearWeight => {
                let std = (2.0 / slot.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &slot.name));
                Tensor::from_fn(&slot.shape, |_| normal.sample(&mut rng) as f32)?
            }
            SlotKind::NormGamma | SlotKind::NormVar => Tensor::full(&slot.shape, 1.0)?,
            SlotKind::NormBeta | SlotKind::NormMean | SlotKind::LinearBias => Tensor::zeros(&slot.shape)?,
        };
        self.state.insert(slot.name.clone(), tensor);
        Ok(())
    }

    /// Copies every non-head weight from `donor`, re-initializes the head
    /// from `seed`, and freezes everything outside `trainable`.
    pub fn load_pretrained_frozen(
        spec: NetworkSpec,
        donor: &Network,
        trainable: &BTreeSet<String>,
        seed: u64,
    ) -> Result<Self> {
        if !spec.same_body(&donor.spec) {
            return Err(ModelError::DonorMismatch(format!(
                "target {:?} vs donor {:?} differ outside the classifier head",
                spec, donor.spec
            )));
        }
        let mut net = Network::build(spec)?;
        let head = NetworkSpec::head_names();
        let slots = net.spec.slots()?;
        for slot in &slots {
            if head.contains(&slot.name) {
                net.init_slot(slot, seed)?;
            } else {
                let t = donor.state.get(&slot.name).ok_or_else(|| ModelError::UnknownName(slot.name.clone()))?;
                net.state.insert(slot.name.clone(), t.clone());
            }
        }
        for name in trainable {
            if net.state.get(name).is_none() {
                return Err(ModelError::UnknownName(name.clone()));
            }
        }
        net.frozen = slots
            .into_iter()
            .map(|s| s.name)
            .filter(|n| !trainable.contains(n))
            .collect();
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut NetworkState {
        &mut self.state
    }

    pub fn into_state(self) -> NetworkState {
        self.state
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, frozen: BTreeSet<String>) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Names the optimizer may update: weights and affine batch-norm
    /// parameters that are not frozen. Running statistics are excluded.
    pub fn trainable_names(&self) -> Result<Vec<String>> {
        Ok(self
            .spec
            .slots()?
            .into_iter()
            .filter(|s| !matches!(s.kind, SlotKind::NormMean | SlotKind::NormVar))
            .map(|s| s.name)
            .filter(|n| !self.frozen.contains(n))
            .collect())
    }

    pub fn apply_running_stats<T: Scalar>(&mut self, updates: &[(String, RunningStats<T>)]) -> Result<()> {
        for (prefix, stats) in updates {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.norm.{suffix}");
                let t = self.state.get_mut(&name).ok_or_else(|| ModelError::UnknownName(name.clone()))?;
                for (dst, v) in t.data_mut().iter_mut().zip(values) {
                    *dst = v.as_f64() as f32;
                }
            }
        }
        Ok(())
    }

    /// Records the network on `tape` for an input of shape `[N, 1, S, S]`.
    ///
    /// Batch-norm layers whose `gamma` is frozen always use their running
    /// statistics. Parameter leaves require gradients only when
    /// `track_params` is set and the parameter is not frozen.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: NormMode,
        track_params: bool,
    ) -> Result<ForwardPass<T>> {
        let shape = tape.value(input)?.shape().to_vec();
        let s = self.spec.input_size;
        if !matches!(shape.as_slice(), [_, 1, h, w] if *h == s && *w == s) {
            return Err(TensorError::ShapeMismatch {
                op: "densenet.forward",
                detail: format!("expected input [N, 1, {s}, {s}], got {shape:?}"),
            }
            .into());
        }
        let mut ctx = ForwardCtx {
            net: self,
            tape,
            mode,
            track_params,
            params: Vec::new(),
            running: Vec::new(),
            norm: NormConfig {
                epsilon: T::of(self.spec.norm_epsilon),
                momentum: T::of(self.spec.norm_momentum),
            },
        };
        let mut x = {
            let w = ctx.param("stem.conv.weight")?;
            ctx.tape.conv2d(input, w, None, 1, 1)?
        };
        let plans = self.spec.block_plan()?;
        let mut block_outputs = Vec::with_capacity(plans.len());
        for (b, plan) in plans.iter().enumerate() {
            if b > 0 {
                let prefix = format!("transition{}", b - 1);
                let h = ctx.norm_relu(x, &prefix)?;
                let w = ctx.param(&format!("{prefix}.conv.weight"))?;
                let h = ctx.tape.conv2d(h, w, None, 1, 0)?;
                x = ctx.tape.avg_pool2d(h, 2, 2)?;
            }
            for l in 0..plan.layers {
                let prefix = format!("block{b}.layer{l}");
                let h = ctx.norm_relu(x, &prefix)?;
                let w = ctx.param(&format!("{prefix}.conv.weight"))?;
                let new = ctx.tape.conv2d(h, w, None, 1, 1)?;
                x = ctx.tape.concat_channels(x, new)?;
            }
            block_outputs.push(x);
        }
        let spatial = plans.last().map(|p| p.spatial).unwrap_or(s);
        let pooled = ctx.tape.avg_pool2d(x, spatial, spatial)?;
        let n = shape[0];
        let features = ctx.tape.reshape(pooled, &[n, plans.last().map(|p| p.out_channels).unwrap_or(0)])?;
        let w = ctx.param(HEAD_WEIGHT)?;
        let bias = ctx.param(HEAD_BIAS)?;
        let logits = ctx.tape.linear(features, w, bias)?;
        Ok(ForwardPass {
            logits,
            params: ctx.params,
            running: ctx.running,
            block_outputs,
        })
    }
}

struct ForwardCtx<'a, T: Scalar> {
    net: &'a Network,
    tape: &'a mut Tape<T>,
    mode: NormMode,
    track_params: bool,
    params: Vec<(String, Var)>,
    running: Vec<(String, RunningStats<T>)>,
    norm: NormConfig<T>,
}

impl<T: Scalar> ForwardCtx<'_, T> {
    fn tensor(&self, name: &str) -> Result<Tensor<T>> {
        self.net
            .state
            .get(name)
            .map(Tensor::cast)
            .ok_or_else(|| ModelError::UnknownName(name.to_string()))
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.tensor(name)?;
        let grad = self.track_params && !self.net.is_frozen(name);
        let var = self.tape.leaf(value, grad);
        self.params.push((name.to_string(), var));
        Ok(var)
    }

    fn norm_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma_name = format!("{prefix}.norm.gamma");
        let gamma = self.param(&gamma_name)?;
        let beta = self.param(&format!("{prefix}.norm.beta"))?;
        let mut running = RunningStats {
            mean: self.tensor(&format!("{prefix}.norm.running_mean"))?.into_data(),
            var: self.tensor(&format!("{prefix}.norm.running_var"))?.into_data(),
        };
        let mode = if self.net.is_frozen(&gamma_name) {
            NormMode::Eval
        } else {
            self.mode
        };
        let y = self.tape.batch_norm(x, gamma, beta, &mut running, mode, self.norm)?;
        if mode == NormMode::Train {
            self.running.push((prefix.to_string(), running));
        }
        Ok(self.tape.relu(y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            input_size: 8,
            initial_channels: 4,
            growth_rate: 2,
            block_layout: vec![2, 2],
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn default_block_plan() {
        let plan = NetworkSpec::default().block_plan().unwrap();
        let channels: Vec<_> = plan.iter().map(|p| (p.in_channels, p.out_channels, p.spatial)).collect();
        assert_eq!(channels, vec![(16, 64, 96), (32, 80, 48), (40, 88, 24)]);
    }

    #[test]
    fn block_of_four_adds_four_growths() {
        let spec = NetworkSpec {
            initial_channels: 16,
            growth_rate: 8,
            block_layout: vec![4],
            ..NetworkSpec::default()
        };
        assert_eq!(spec.block_plan().unwrap()[0].out_channels, 48);
    }

    #[test]
    fn three_transitions_reach_twelve_pixels() {
        let spec = NetworkSpec {
            block_layout: vec![1, 1, 1, 1],
            ..NetworkSpec::default()
        };
        assert_eq!(spec.block_plan().unwrap().last().unwrap().spatial, 12);
    }

    #[test]
    fn too_many_transitions_underflow() {
        let spec = NetworkSpec {
            input_size: 4,
            block_layout: vec![1, 1, 1, 1],
            ..NetworkSpec::default()
        };
        assert!(matches!(spec.validate(), Err(ModelError::SpatialUnderflow { .. })));
    }

    #[test]
    fn skeleton_covers_every_slot_once() {
        let spec = tiny();
        let net = Network::build(spec.clone()).unwrap();
        let names: Vec<_> = spec.slots().unwrap().into_iter().map(|s| s.name).collect();
        let unique: BTreeSet<_> = names.iter().cloned().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(net.state().names(), unique);
    }

    #[test]
    fn from_state_reports_orphans_and_holes() {
        let net = Network::build(tiny()).unwrap();
        let mut state = net.state().clone();
        state.insert("block9.layer0.conv.weight", Tensor::zeros(&[1]).unwrap());
        state.tensors.remove(HEAD_BIAS);
        match Network::from_state(tiny(), state) {
            Err(ModelError::NameSetMismatch { missing, unexpected }) => {
                assert_eq!(missing, vec![HEAD_BIAS.to_string()]);
                assert_eq!(unexpected, vec!["block9.layer0.conv.weight".to_string()]);
            }
            other => panic!("expected name-set mismatch, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seeded() {
        let mut a = Network::build(tiny()).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        a.init_gaussian(7).unwrap();
        b.init_gaussian(7).unwrap();
        c.init_gaussian(8).unwrap();
        assert_eq!(a.state(), b.state());
        assert_ne!(a.state(), c.state());
        let gamma = a.state().get("block0.layer0.norm.gamma").unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logits_have_one_column_per_class() {
        let mut net = Network::build(tiny()).unwrap();
        net.init_gaussian(1).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5) as f32).unwrap(), false);
        let pass = net.forward(&mut tape, x, NormMode::Eval, false).unwrap();
        assert_eq!(tape.value(pass.logits).unwrap().shape(), &[2, 3]);
        assert!(pass.running.is_empty());
    }

    #[test]
    fn rejects_wrong_input_size() {
        let net = Network::build(tiny()).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 9, 9]).unwrap(), false);
        assert!(net.forward(&mut tape, x, NormMode::Eval, false).is_err());
    }
}
