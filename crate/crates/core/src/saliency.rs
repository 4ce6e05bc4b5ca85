//! Vanilla-gradient saliency maps, heatmap overlays and localization
//! scoring against ground-truth masks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NormMode, Tape, Var};
use crate::densenet::{ModelError, Network};
use crate::image::{self, GrayImage, ImageError, Mask};
use crate::phantom::{self, PhantomError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("top fraction {0} must lie in (0, 1]")]
    Fraction(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Masks(#[from] PhantomError),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

/// Anything that maps a `[1, 1, H, W]` input to a row of class scores on a
/// tape.
pub trait ScoreModel {
    fn num_classes(&self) -> usize;
    fn record(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var>;
}

impl ScoreModel for Network {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn record(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
        Ok(self.forward(tape, input, NormMode::Eval, false)?.logits)
    }
}

/// `scores = input_flat · weightᵀ + bias`, the closed-form reference model.
#[derive(Debug, Clone)]
pub struct LinearModel {
    /// `[K, H·W]`.
    pub weight: Tensor<f32>,
    /// `[K]`.
    pub bias: Tensor<f32>,
}

impl ScoreModel for LinearModel {
    fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn record(&self, tape: &mut Tape<f32>, input: Var) -> Result<Var> {
        let features = self.weight.shape()[1];
        let flat = tape.reshape(input, &[1, features])?;
        let w = tape.leaf(self.weight.clone(), false);
        let b = tape.leaf(self.bias.clone(), false);
        Ok(tape.linear(flat, w, b)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub scores: Vec<f32>,
    pub class_index: usize,
    /// Set when every gradient was zero; the scores are then all zero.
    pub degenerate: bool,
}

/// `|∂ score[class] / ∂ pixel|`, max-normalized. Without a class the
/// predicted (arg-max) class is explained.
pub fn compute_saliency<M: ScoreModel + ?Sized>(
    model: &M,
    input: &Tensor<f32>,
    class_index: Option<usize>,
) -> Result<SaliencyMap> {
    let (n, c, height, width) = input.dims4("saliency")?;
    if n != 1 || c != 1 {
        return Err(SaliencyError::Dims(format!(
            "expected a single-channel [1, 1, H, W] input, got {:?}",
            input.shape()
        )));
    }
    let classes = model.num_classes();
    if let Some(index) = class_index {
        if index >= classes {
            return Err(SaliencyError::ClassIndex { index, classes });
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let scores = model.record(&mut tape, x)?;
    let class_index = match class_index {
        Some(i) => i,
        None => crate::train::argmax(tape.value(scores)?.data()),
    };
    let target = tape.element(scores, class_index)?;
    let grads = tape.backward(target)?;
    let mut values: Vec<f32> = grads.wrt(x).into_data().into_iter().map(f32::abs).collect();
    let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
    let degenerate = !(max > 0.0 && max.is_finite());
    if degenerate {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap {
        width,
        height,
        scores: values,
        class_index,
        degenerate,
    })
}

/// Share of pixels scored by default.
pub const DEFAULT_TOP_FRACTION: f64 = 0.1;

/// Localization of the predicted-class map of a phantom image against the
/// union of the masks stored beside it. `None` when there are no masks.
pub fn score_phantom(net: &Network, image_path: &Path, top_fraction: f64) -> Result<Option<f64>> {
    if phantom::mask_paths(image_path).iter().any(|(_, p)| !p.is_file()) {
        return Ok(None);
    }
    let img = image::load_gray(image_path)?;
    let map = compute_saliency(net, &crate::data::normalize(&img), None)?;
    let masks = phantom::load_masks(image_path)?;
    Ok(Some(localization_score(&map, &masks.union(), top_fraction)?))
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Score 0 maps to pure blue, 1 to pure red, linear in between.
pub fn colormap(score: f32) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0) as f64;
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

/// Interleaved RGB: the colormap blended over the grayscale image at
/// [`OVERLAY_ALPHA`].
pub fn overlay_rgb(image: &GrayImage, map: &SaliencyMap) -> Result<Vec<u8>> {
    if image.width() != map.width || image.height() != map.height {
        return Err(SaliencyError::Dims(format!(
            "image {}x{} vs map {}x{}",
            image.width(),
            image.height(),
            map.width,
            map.height
        )));
    }
    let mut out = Vec::with_capacity(image.pixels().len() * 3);
    for (&g, &s) in image.pixels().iter().zip(&map.scores) {
        for c in colormap(s) {
            let v = (1.0 - OVERLAY_ALPHA) * g as f64 + OVERLAY_ALPHA * c as f64;
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &GrayImage, map: &SaliencyMap) -> Result<Vec<u8>> {
    let rgb = overlay_rgb(image, map)?;
    Ok(image::encode_rgb_png(map.width, map.height, &rgb)?)
}

fn top_indices(scores: &[f32], top_fraction: f64) -> Result<Vec<usize>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(SaliencyError::Fraction(top_fraction));
    }
    let k = ((top_fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len().max(1));
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores keep row-major order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Fraction of the `ceil(top_fraction · n)` highest-scoring pixels that lie
/// inside `mask`. Ties are taken in row-major order. An empty mask scores 0.
pub fn localization_score(map: &SaliencyMap, mask: &Mask, top_fraction: f64) -> Result<f64> {
    if mask.width() != map.width || mask.height() != map.height {
        return Err(SaliencyError::Dims(format!(
            "mask {}x{} vs map {}x{}",
            mask.width(),
            mask.height(),
            map.width,
            map.height
        )));
    }
    let selected = top_indices(&map.scores, top_fraction)?;
    if mask.is_empty() {
        log::warn!("localization score requested for an empty mask");
        return Ok(0.0);
    }
    let inside = selected.iter().filter(|&&i| mask.bits()[i]).count();
    Ok(inside as f64 / selected.len() as f64)
}

/// Mean localization score of `trials` random permutations of the map,
/// the chance level a map with no spatial information achieves.
pub fn permutation_null(map: &SaliencyMap, mask: &Mask, top_fraction: f64, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = map.clone();
    let mut total = 0.0;
    for _ in 0..trials {
        shuffled.scores.shuffle(&mut rng);
        total += localization_score(&shuffled, mask, top_fraction)?;
    }
    Ok(total / trials.max(1) as f64)
}
