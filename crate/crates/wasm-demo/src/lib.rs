//! Browser bindings: render a phantom, augment it and overlay a saliency
//! map from uploaded weights.

use hipnet::data::{self, AugmentParams};
use hipnet::densenet::{Network, NetworkSpec};
use hipnet::image::{self, GrayImage};
use hipnet::phantom::{self, DesignClass, PhantomMasks};
use hipnet::saliency;
use hipnet::weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("unknown design class {0:?} (A, B or C)")]
    Class(String),
    #[error("render a phantom first")]
    NoImage,
    #[error("load weights or initialize a network first")]
    NoNetwork,
    #[error("the network expects {expected}x{expected} images, the current image is {actual}x{actual}")]
    Size { expected: usize, actual: usize },
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Weights(#[from] weights::WeightsError),
    #[error(transparent)]
    Model(#[from] hipnet::densenet::ModelError),
    #[error(transparent)]
    Saliency(#[from] saliency::SaliencyError),
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

fn design_class(label: &str) -> Result<DesignClass, DemoError> {
    DesignClass::ALL
        .into_iter()
        .find(|c| c.label() == label)
        .ok_or_else(|| DemoError::Class(label.to_string()))
}

/// Page state: the rendered phantom, its current (possibly augmented) view
/// and the loaded network.
#[wasm_bindgen]
#[derive(Default)]
pub struct Demo {
    original: Option<GrayImage>,
    masks: Option<PhantomMasks>,
    current: Option<GrayImage>,
    augmented: bool,
    network: Option<Network>,
    localization: Option<f64>,
    class_index: Option<usize>,
}

impl Demo {
    pub fn try_render(&mut self, class: &str, seed: u64, size: usize) -> Result<Vec<u8>, DemoError> {
        let scene = phantom::scene_for_index(design_class(class)?, seed, 0);
        let rendered = phantom::render(&scene, size)?;
        let png = image::encode_gray_png(&rendered.image)?;
        self.current = Some(rendered.image.clone());
        self.original = Some(rendered.image);
        self.masks = Some(rendered.masks);
        self.augmented = false;
        Ok(png)
    }

    /// Implant mask union as a PNG.
    pub fn try_masks(&self) -> Result<Vec<u8>, DemoError> {
        let masks = self.masks.as_ref().ok_or(DemoError::NoImage)?;
        Ok(image::encode_mask_png(&masks.union())?)
    }

    /// Augments the rendered phantom (not the previous augmentation).
    pub fn try_augment(&mut self, rotation: f64, scale: f64, translation: f64, seed: u64) -> Result<Vec<u8>, DemoError> {
        let original = self.original.as_ref().ok_or(DemoError::NoImage)?;
        let params = AugmentParams {
            rotation,
            scale,
            translation,
            enabled: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = data::augment(original, &params, &mut rng)?;
        let png = image::encode_gray_png(&out)?;
        self.current = Some(out);
        self.augmented = true;
        Ok(png)
    }

    pub fn try_load_weights(&mut self, bytes: &[u8]) -> Result<usize, DemoError> {
        let state = weights::decode(bytes)?;
        let spec = NetworkSpec {
            num_classes: weights::head_classes(&state).unwrap_or(NetworkSpec::default().num_classes),
            ..NetworkSpec::default()
        };
        let net = Network::from_state(spec, state)?;
        let classes = net.spec().num_classes;
        self.network = Some(net);
        Ok(classes)
    }

    pub fn try_random_network(&mut self, seed: u64) -> Result<(), DemoError> {
        let mut net = Network::build(NetworkSpec::default())?;
        net.init_gaussian(seed)?;
        self.network = Some(net);
        Ok(())
    }

    /// Overlay PNG for the current image. The localization score is kept
    /// for unaugmented phantoms, whose masks still line up.
    pub fn try_saliency(&mut self, class_index: Option<usize>) -> Result<Vec<u8>, DemoError> {
        let net = self.network.as_ref().ok_or(DemoError::NoNetwork)?;
        let img = self.current.as_ref().ok_or(DemoError::NoImage)?;
        let expected = net.spec().input_size;
        if img.width() != expected || img.height() != expected {
            return Err(DemoError::Size {
                expected,
                actual: img.width(),
            });
        }
        let map = saliency::compute_saliency(net, &data::normalize(img), class_index)?;
        self.class_index = Some(map.class_index);
        self.localization = match (&self.masks, self.augmented) {
            (Some(m), false) => Some(saliency::localization_score(
                &map,
                &m.union(),
                saliency::DEFAULT_TOP_FRACTION,
            )?),
            _ => None,
        };
        Ok(saliency::render_overlay(img, &map)?)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        Demo::default()
    }

    /// Grayscale PNG of a phantom of design `class` ("A", "B" or "C").
    pub fn render(&mut self, class: &str, seed: u64, size: usize) -> Result<Vec<u8>, JsError> {
        self.try_render(class, seed, size).map_err(js)
    }

    pub fn masks(&self) -> Result<Vec<u8>, JsError> {
        self.try_masks().map_err(js)
    }

    pub fn augment(&mut self, rotation: f64, scale: f64, translation: f64, seed: u64) -> Result<Vec<u8>, JsError> {
        self.try_augment(rotation, scale, translation, seed).map_err(js)
    }

    /// Loads a weights file; returns the class count.
    #[wasm_bindgen(js_name = loadWeights)]
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<usize, JsError> {
        self.try_load_weights(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = randomNetwork)]
    pub fn random_network(&mut self, seed: u64) -> Result<(), JsError> {
        self.try_random_network(seed).map_err(js)
    }

    /// Overlay PNG; `class_index` defaults to the predicted class.
    pub fn saliency(&mut self, class_index: Option<usize>) -> Result<Vec<u8>, JsError> {
        self.try_saliency(class_index).map_err(js)
    }

    /// Class explained by the last overlay.
    #[wasm_bindgen(getter, js_name = classIndex)]
    pub fn class_index(&self) -> Option<usize> {
        self.class_index
    }

    /// Localization of the last overlay against the phantom masks.
    #[wasm_bindgen(getter)]
    pub fn localization(&self) -> Option<f64> {
        self.localization
    }
}
