//! Adam training, grid search, donor pretraining, the initialization
//! comparison and evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NormMode, Tape};
use crate::data::{self, AugmentParams, DataError, Manifest, Split};
use crate::densenet::{ModelError, Network, NetworkSpec};
use crate::image::{self, GrayImage, ImageError};
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("image {id} is {width}x{height}, the network expects {expected}x{expected}")]
    ImageSize {
        id: String,
        width: usize,
        height: usize,
        expected: usize,
    },
    #[error("the network has {spec} classes but the manifest has {manifest} ({labels:?})")]
    ClassCount {
        spec: usize,
        manifest: usize,
        labels: Vec<String>,
    },
    #[error("label {0:?} is not one of the network's classes")]
    UnknownLabel(String),
    #[error("pretrained-frozen initialization needs donor weights")]
    MissingDonor,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("adam: {0}")]
    Adam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Gaussian,
    PretrainedFrozen,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Gaussian => "gaussian",
            InitMode::PretrainedFrozen => "pretrained-frozen",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(InitMode::Gaussian),
            "pretrained-frozen" | "pretrained_frozen" => Ok(InitMode::PretrainedFrozen),
            other => Err(format!("unknown init mode {other:?} (gaussian, pretrained-frozen)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    pub augment: AugmentParams,
    pub spec: NetworkSpec,
}

/// Epoch count of the desk preset.
pub const DESK_EPOCHS: usize = 100;
/// Epoch count of the full-length `paper` preset.
pub const PAPER_EPOCHS: usize = 350;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            batch_size: 5,
            epochs: DESK_EPOCHS,
            seed: 42,
            init_mode: InitMode::Gaussian,
            augment: AugmentParams::default(),
            spec: NetworkSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: PAPER_EPOCHS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(a.epsilon.is_finite() && a.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        self.augment.validate()?;
        self.spec.validate()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.adam.learning_rate * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }
}

/// One Adam update with bias correction. `t` is the 1-based step index.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(TrainError::Adam(format!(
            "lengths differ: params {}, grads {}, m {}, v {}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(TrainError::Adam("step index starts at 1".into()));
    }
    let one = T::one();
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam moments for every trainable tensor of a network.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every non-frozen tensor that has a gradient.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &BTreeMap<String, Tensor<f32>>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            if net.is_frozen(name) {
                continue;
            }
            let param = net
                .state_mut()
                .get_mut(name)
                .ok_or_else(|| ModelError::UnknownName(name.clone()))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            adam_step(param.data_mut(), g.data(), m, v, self.step, cfg)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Which images reached the network in which form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub epoch: usize,
    pub id: String,
    pub split: Split,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub init_mode: InitMode,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights were kept (0 when no epoch ran).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub wall_time_secs: f64,
    pub stop_reason: Option<String>,
    #[serde(skip)]
    pub audit: Vec<AuditEntry>,
}

impl RunRecord {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }

    /// `epoch,train_loss,val_accuracy` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_accuracy).expect("string write");
        }
        out
    }
}

/// Images of one split, decoded once, with class indices.
struct Loaded {
    ids: Vec<String>,
    images: Vec<GrayImage>,
    labels: Vec<usize>,
}

fn class_index(classes: &[String], label: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| TrainError::UnknownLabel(label.to_string()))
}

fn check_classes(spec: &NetworkSpec, classes: &[String]) -> Result<()> {
    if spec.num_classes != classes.len() {
        return Err(TrainError::ClassCount {
            spec: spec.num_classes,
            manifest: classes.len(),
            labels: classes.to_vec(),
        });
    }
    Ok(())
}

fn load_image(manifest: &Manifest, record: &data::Record, size: usize) -> Result<GrayImage> {
    let img = image::load_gray(&manifest.resolve(record))?;
    if img.width() != size || img.height() != size {
        return Err(TrainError::ImageSize {
            id: record.id.clone(),
            width: img.width(),
            height: img.height(),
            expected: size,
        });
    }
    Ok(img)
}

fn load_split(manifest: &Manifest, split: Split, classes: &[String], size: usize) -> Result<Loaded> {
    let records = manifest.in_split(split);
    if records.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let images = records
        .par_iter()
        .map(|r| load_image(manifest, r, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        labels: records
            .iter()
            .map(|r| class_index(classes, &r.label))
            .collect::<Result<_>>()?,
        images,
    })
}

fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let (h, w) = (images[0].shape()[2], images[0].shape()[3]);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for t in images {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

/// Eval-mode logits for one normalized image.
pub fn logits(net: &Network, input: &Tensor<f32>) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(input.clone(), false);
    let pass = net.forward(&mut tape, x, NormMode::Eval, false)?;
    Ok(tape.value(pass.logits)?.data().to_vec())
}

pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn accuracy(net: &Network, split: &Loaded) -> Result<f64> {
    let correct = split
        .images
        .par_iter()
        .zip(&split.labels)
        .map(|(img, &label)| Ok((argmax(&logits(net, &data::normalize(img))?) == label) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / split.images.len() as f64)
}

/// Starting network for `config`. Frozen mode copies the donor body and
/// trains only the classifier head.
pub fn initial_network(config: &TrainConfig, donor: Option<&Network>) -> Result<Network> {
    let init_seed = derive_seed(config.seed, "init");
    match config.init_mode {
        InitMode::Gaussian => {
            let mut net = Network::build(config.spec.clone())?;
            net.init_gaussian(init_seed)?;
            Ok(net)
        }
        InitMode::PretrainedFrozen => {
            let donor = donor.ok_or(TrainError::MissingDonor)?;
            Ok(Network::load_pretrained_frozen(
                config.spec.clone(),
                donor,
                &NetworkSpec::head_names(),
                init_seed,
            )?)
        }
    }
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub network: Network,
    pub record: RunRecord,
}

/// Trains from `config.init_mode` using the train and val splits.
pub fn train(config: &TrainConfig, manifest: &Manifest, donor: Option<&Network>) -> Result<TrainOutcome> {
    let net = initial_network(config, donor)?;
    train_from(config, manifest, net)
}

/// Trains an already initialized network.
///
/// Every random draw derives from `config.seed`: the batch order of epoch
/// `e` from `("shuffle", e)`, the augmentation of training image `i` in
/// epoch `e` from `("augment", e)` and `i`. The best checkpoint is the
/// epoch with the highest validation accuracy, the later epoch on ties.
pub fn train_from(config: &TrainConfig, manifest: &Manifest, mut net: Network) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let classes = manifest.classes();
    check_classes(net.spec(), &classes)?;
    let size = net.spec().input_size;
    let train_set = load_split(manifest, Split::Train, &classes, size)?;
    let val_set = load_split(manifest, Split::Val, &classes, size)?;

    let mut record = RunRecord {
        init_mode: config.init_mode,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_accuracy: 0.0,
        wall_time_secs: 0.0,
        stop_reason: None,
        audit: Vec::new(),
    };
    let mut best = net.clone();
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train_set.images.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(config.seed, "shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let adam_cfg = AdamConfig {
            learning_rate: config.learning_rate_at(epoch),
            ..config.adam
        };
        let augment_seed = derive_seed_indexed(config.seed, "augment", epoch as u64);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let inputs = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(augment_seed, "sample", i as u64));
                    Ok(data::normalize(&data::augment(&train_set.images[i], &config.augment, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            for &i in batch {
                record.audit.push(AuditEntry {
                    epoch,
                    id: train_set.ids[i].clone(),
                    split: Split::Train,
                    augmented: config.augment.enabled,
                });
            }

            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(stack(&inputs)?, false);
            let pass = net.forward(&mut tape, x, NormMode::Train, true)?;
            let (loss, _) = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss)?.data()[0] as f64;
            if !loss_value.is_finite() {
                record.stop_reason = Some(format!("non-finite loss at epoch {epoch}, batch {batch_no}"));
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: loss_value,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let named: BTreeMap<String, Tensor<f32>> = pass
                .params
                .iter()
                .filter(|(name, _)| !net.is_frozen(name))
                .filter_map(|(name, var)| grads.take(*var).map(|g| (name.clone(), g)))
                .collect();
            adam.step(&mut net, &named, &adam_cfg)?;
            net.apply_running_stats(&pass.running)?;
        }

        for id in &val_set.ids {
            record.audit.push(AuditEntry {
                epoch,
                id: id.clone(),
                split: Split::Val,
                augmented: false,
            });
        }
        let val_accuracy = accuracy(&net, &val_set)?;
        let train_loss = loss_sum / train_set.images.len() as f64;
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_accuracy {val_accuracy:.4}");
        record.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy >= record.best_val_accuracy || record.best_epoch == 0 {
            record.best_val_accuracy = val_accuracy;
            record.best_epoch = epoch;
            best = net.clone();
        }
    }
    if config.epochs == 0 {
        best = net;
    }
    record.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { network: best, record })
}

/// Trains a donor on an unrelated task (the shape corpus).
pub fn pretrain_donor(config: &TrainConfig, donor_manifest: &Manifest) -> Result<TrainOutcome> {
    let spec = NetworkSpec {
        num_classes: donor_manifest.classes().len(),
        ..config.spec.clone()
    };
    let config = TrainConfig {
        init_mode: InitMode::Gaussian,
        spec,
        ..config.clone()
    };
    train(&config, donor_manifest, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub gaussian_final_val_accuracy: f64,
    pub frozen_final_val_accuracy: f64,
    /// `gaussian − frozen`.
    pub accuracy_difference: f64,
    pub gaussian_final_train_loss: f64,
    pub frozen_final_train_loss: f64,
    /// First-epoch loss over final-epoch loss.
    pub gaussian_loss_reduction: f64,
    pub frozen_loss_reduction: f64,
}

impl Verdict {
    pub fn table(&self) -> String {
        format!(
            "init_mode,final_val_accuracy,final_train_loss,loss_reduction\n\
             gaussian,{},{},{}\n\
             pretrained-frozen,{},{},{}\n\
             accuracy_difference,{}\n",
            self.gaussian_final_val_accuracy,
            self.gaussian_final_train_loss,
            self.gaussian_loss_reduction,
            self.frozen_final_val_accuracy,
            self.frozen_final_train_loss,
            self.frozen_loss_reduction,
            self.accuracy_difference,
        )
    }
}

pub struct Comparison {
    pub gaussian: TrainOutcome,
    pub frozen: TrainOutcome,
    pub verdict: Verdict,
}

fn loss_reduction(r: &RunRecord) -> f64 {
    match (r.epochs.first(), r.epochs.last()) {
        (Some(a), Some(b)) => a.train_loss / b.train_loss,
        _ => 1.0,
    }
}

/// Trains the same config twice, from Gaussian weights and from the frozen
/// donor, with identical seeds and data order.
pub fn compare_init_modes(config: &TrainConfig, manifest: &Manifest, donor: &Network) -> Result<Comparison> {
    let gaussian = train(
        &TrainConfig {
            init_mode: InitMode::Gaussian,
            ..config.clone()
        },
        manifest,
        None,
    )?;
    let frozen = train(
        &TrainConfig {
            init_mode: InitMode::PretrainedFrozen,
            ..config.clone()
        },
        manifest,
        Some(donor),
    )?;
    let (g, f) = (&gaussian.record, &frozen.record);
    let verdict = Verdict {
        gaussian_final_val_accuracy: g.final_val_accuracy().unwrap_or(0.0),
        frozen_final_val_accuracy: f.final_val_accuracy().unwrap_or(0.0),
        accuracy_difference: g.final_val_accuracy().unwrap_or(0.0) - f.final_val_accuracy().unwrap_or(0.0),
        gaussian_final_train_loss: g.final_train_loss().unwrap_or(f64::NAN),
        frozen_final_train_loss: f.final_train_loss().unwrap_or(f64::NAN),
        gaussian_loss_reduction: loss_reduction(g),
        frozen_loss_reduction: loss_reduction(f),
    };
    Ok(Comparison {
        gaussian,
        frozen,
        verdict,
    })
}

/// Value lists to search; an empty list keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grid {
    pub learning_rate: Vec<f64>,
    pub lr_decay: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub translation: Vec<f64>,
    pub epochs: Vec<usize>,
}

fn or_base<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl Grid {
    /// Cartesian product in key order, the last key varying fastest.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &or_base(&self.learning_rate, base.adam.learning_rate) {
            for &decay in &or_base(&self.lr_decay, base.lr_decay) {
                for &bs in &or_base(&self.batch_size, base.batch_size) {
                    for &rot in &or_base(&self.rotation, base.augment.rotation) {
                        for &sc in &or_base(&self.scale, base.augment.scale) {
                            for &tr in &or_base(&self.translation, base.augment.translation) {
                                for &ep in &or_base(&self.epochs, base.epochs) {
                                    out.push(TrainConfig {
                                        adam: AdamConfig {
                                            learning_rate: lr,
                                            ..base.adam
                                        },
                                        lr_decay: decay,
                                        batch_size: bs,
                                        epochs: ep,
                                        augment: AugmentParams {
                                            rotation: rot,
                                            scale: sc,
                                            translation: tr,
                                            ..base.augment
                                        },
                                        ..base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
}

impl Trial {
    fn key(&self) -> [f64; 7] {
        let c = &self.config;
        [
            c.adam.learning_rate,
            c.lr_decay,
            c.batch_size as f64,
            c.augment.rotation,
            c.augment.scale,
            c.augment.translation,
            c.epochs as f64,
        ]
    }
}

/// Selection order: higher validation accuracy, then lower final training
/// loss, then the lexicographically smaller config, then the earlier trial.
pub fn rank_trials(a: &Trial, b: &Trial) -> Ordering {
    b.best_val_accuracy
        .total_cmp(&a.best_val_accuracy)
        .then(a.final_train_loss.total_cmp(&b.final_train_loss))
        .then_with(|| {
            a.key()
                .iter()
                .zip(b.key().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.index.cmp(&b.index))
}

pub struct GridResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl GridResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "trial,learning_rate,lr_decay,batch_size,rotation,scale,translation,epochs,best_val_accuracy,final_train_loss,selected\n",
        );
        for t in &self.trials {
            let c = &t.config;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                t.index,
                c.adam.learning_rate,
                c.lr_decay,
                c.batch_size,
                c.augment.rotation,
                c.augment.scale,
                c.augment.translation,
                c.epochs,
                t.best_val_accuracy,
                t.final_train_loss,
                t.index == self.best
            )
            .expect("string write");
        }
        out
    }
}

/// Runs every grid point (in parallel) and selects by [`rank_trials`].
pub fn grid_search(base: &TrainConfig, grid: &Grid, manifest: &Manifest, donor: Option<&Network>) -> Result<GridResult> {
    let configs = grid.expand(base);
    let trials = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let outcome = train(&config, manifest, donor)?;
            Ok(Trial {
                index,
                best_val_accuracy: outcome.record.best_val_accuracy,
                final_train_loss: outcome.record.final_train_loss().unwrap_or(f64::INFINITY),
                config,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = trials
        .iter()
        .min_by(|a, b| rank_trials(a, b))
        .map(|t| t.index)
        .expect("grid expands to at least one trial");
    Ok(GridResult { trials, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
    pub predicted: String,
    pub logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean seconds per image from reading the file to logits.
    pub mean_latency_secs: f64,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn predictions_jsonl(&self) -> String {
        self.predictions
            .iter()
            .map(|p| serde_json::to_string(p).expect("predictions serialize") + "\n")
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut out = format!("accuracy {:.4}\nconfusion (rows true, columns predicted)\n", self.accuracy);
        writeln!(out, "   {}", self.classes.join(" ")).expect("string write");
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{c}: {}", cells.join(" ")).expect("string write");
        }
        writeln!(out, "mean latency {:.4} s/image", self.mean_latency_secs).expect("string write");
        out
    }
}

/// Classifies every record of `split` one image at a time, timing each from
/// file read to logits. Class names come from `classes`.
pub fn evaluate(net: &Network, manifest: &Manifest, split: Split, classes: &[String]) -> Result<EvalReport> {
    check_classes(net.spec(), classes)?;
    let records = manifest.in_split(split);
    if records.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(records.len());
    let mut latency = 0.0;
    for r in records {
        let started = Instant::now();
        let img = load_image(manifest, r, net.spec().input_size)?;
        let out = logits(net, &data::normalize(&img))?;
        latency += started.elapsed().as_secs_f64();
        let truth = class_index(classes, &r.label)?;
        let predicted = argmax(&out);
        confusion[truth][predicted] += 1;
        predictions.push(Prediction {
            id: r.id.clone(),
            label: r.label.clone(),
            predicted: classes[predicted].clone(),
            logits: out,
            localization: None,
        });
    }
    let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
    Ok(EvalReport {
        classes: classes.to_vec(),
        accuracy: correct as f64 / predictions.len() as f64,
        confusion,
        mean_latency_secs: latency / predictions.len() as f64,
        predictions,
    })
}

/// Names whose tensors differ between two networks.
pub fn changed_tensors(a: &Network, b: &Network) -> BTreeSet<String> {
    a.state()
        .iter()
        .filter(|(name, t)| b.state().get(name) != Some(t))
        .map(|(name, _)| name.clone())
        .collect()
}
