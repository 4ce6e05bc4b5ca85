//! Dataset manifests, stratified splitting, online augmentation and input
//! normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: image {path} does not exist")]
    MissingFile { id: String, path: String },
    #[error("split ratios {0:?} must be nonnegative and sum to 1")]
    Ratios([f64; 3]),
    #[error("split {split} has a positive ratio but receives no records")]
    EmptySplit { split: Split },
    #[error("manifest has no records")]
    Empty,
    #[error("augmentation needs a square image, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("augmentation ranges must be finite and nonnegative (scale below 1)")]
    AugmentRange,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split {other:?} (train, val, test, unassigned)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Record {
    pub fn new(id: impl Into<String>, path: PathBuf, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path,
            label: label.into(),
            split: None,
        }
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::Unassigned)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<Record>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            base_dir: PathBuf::new(),
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// Sorted distinct labels; a label's position is its class index.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn in_split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split() == split).collect()
    }

    /// Records per `(label, split)`.
    pub fn counts(&self) -> BTreeMap<(String, Split), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.label.clone(), r.split())).or_insert(0) += 1;
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Self::new(records)
    }

    /// Loads a manifest and checks that every image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse_jsonl(&text)?.with_base_dir(base);
        for r in &manifest.records {
            let p = manifest.resolve(r);
            if !p.is_file() {
                return Err(DataError::MissingFile {
                    id: r.id.clone(),
                    path: p.display().to_string(),
                });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Default split ratios (train, val, test).
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Integer apportionment of `total` by `ratios`: floor every quota, then
/// hand the leftover units to the largest fractional parts, ties going to
/// the lower bin.
pub fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    const TIE: f64 = 1e-9;
    let quotas = ratios.map(|r| r * total as f64);
    let mut counts = quotas.map(|q| (q + TIE).floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    let frac = |i: usize| (quotas[i] - counts[i] as f64).max(0.0);
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() <= TIE {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let ok = ratios.iter().all(|r| r.is_finite() && *r >= 0.0) && (ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DataError::Ratios(ratios))
    }
}

/// Assigns train/val/test per class by largest remainder after a seeded
/// shuffle within each class. Input order of records is preserved.
pub fn stratified_split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    check_ratios(ratios)?;
    if manifest.is_empty() {
        return Err(DataError::Empty);
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label.as_str()).or_default().push(i);
    }
    let mut assignment = vec![Split::Unassigned; manifest.len()];
    for (label, mut members) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split:{label}")));
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), ratios);
        let mut it = members.into_iter();
        for (split, n) in Split::ASSIGNED.into_iter().zip(counts) {
            for idx in it.by_ref().take(n) {
                assignment[idx] = split;
            }
        }
    }
    for (split, ratio) in Split::ASSIGNED.into_iter().zip(ratios) {
        if ratio > 0.0 && !assignment.contains(&split) {
            return Err(DataError::EmptySplit { split });
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(assignment)
        .map(|(r, s)| Record {
            split: Some(s),
            ..r.clone()
        })
        .collect();
    Ok(Manifest {
        records,
        base_dir: manifest.base_dir.clone(),
    })
}

/// Symmetric ranges for online augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Maximum rotation, degrees.
    pub rotation: f64,
    /// Maximum relative change of magnification.
    pub scale: f64,
    /// Maximum shift as a fraction of the image size.
    pub translation: f64,
    pub enabled: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation: 10.0,
            scale: 0.1,
            translation: 0.05,
            enabled: true,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 0.0,
            translation: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation, self.scale, self.translation]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if finite && self.scale < 1.0 {
            Ok(())
        } else {
            Err(DataError::AugmentRange)
        }
    }

    /// Draws one transform. Always consumes four draws so streams stay
    /// aligned whatever the ranges.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Transform {
        let mut symmetric = |range: f64| range * (2.0 * rng.random::<f64>() - 1.0);
        Transform {
            rotation: symmetric(self.rotation),
            scale: 1.0 + symmetric(self.scale),
            shift_x: symmetric(self.translation),
            shift_y: symmetric(self.translation),
        }
    }
}

/// Rotation (degrees), then isotropic scale, then shift (fraction of size),
/// all about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation: 0.0,
        scale: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };
}

/// Resamples `image` under `t` with bilinear interpolation; samples outside
/// the source take the nearest edge value.
pub fn apply_transform(image: &GrayImage, t: &Transform) -> Result<GrayImage> {
    if !image.is_square() {
        return Err(DataError::NotSquare {
            width: image.width(),
            height: image.height(),
        });
    }
    let n = image.width();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = t.rotation.to_radians().sin_cos();
    let (tx, ty) = (t.shift_x * n as f64, t.shift_y * n as f64);
    let src = image.pixels();
    let at = |x: usize, y: usize| src[y * n + x] as f64;
    let max = (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for oy in 0..n {
        for ox in 0..n {
            // Invert p' = c + shift + s·R(θ)(p − c).
            let (u, v) = ((ox as f64 - c - tx) / t.scale, (oy as f64 - c - ty) / t.scale);
            let x = (c + u * cos + v * sin).clamp(0.0, max);
            let y = (c - u * sin + v * cos).clamp(0.0, max);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(GrayImage::new(n, n, out).expect("square output"))
}

/// Applies a random transform drawn from `params`; disabled params return a
/// copy.
pub fn augment<R: Rng>(image: &GrayImage, params: &AugmentParams, rng: &mut R) -> Result<GrayImage> {
    if !params.enabled {
        return Ok(image.clone());
    }
    params.validate()?;
    apply_transform(image, &params.draw(rng))
}

/// Variance guard for constant images.
pub const NORMALIZE_EPSILON: f64 = 1e-8;

/// Per-image standardization to zero mean and unit variance, as `[1,1,H,W]`.
pub fn normalize(image: &GrayImage) -> Tensor<f32> {
    let values = normalize_values(image.pixels().iter().map(|&p| p as f64));
    Tensor::new(&[1, 1, image.height(), image.width()], values).expect("length matches image")
}

pub fn normalize_values(values: impl ExactSizeIterator<Item = f64> + Clone) -> Vec<f32> {
    let n = values.len().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORMALIZE_EPSILON).sqrt();
    values.map(|v| ((v - mean) * inv) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(sizes: [usize; 3]) -> Manifest {
        let mut records = Vec::new();
        for (label, &n) in ["A", "B", "C"].iter().zip(&sizes) {
            for i in 0..n {
                records.push(Record::new(format!("{label}{i}"), PathBuf::from("x.png"), *label));
            }
        }
        Manifest::new(records).unwrap()
    }

    #[test]
    fn default_class_counts_split_to_twenty_five() {
        assert_eq!(largest_remainder(130, DEFAULT_RATIOS), [104, 13, 13]);
        assert_eq!(largest_remainder(93, DEFAULT_RATIOS), [75, 9, 9]);
        assert_eq!(largest_remainder(29, DEFAULT_RATIOS), [23, 3, 3]);
        let split = stratified_split(&manifest([130, 93, 29]), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(split.in_split(Split::Test).len(), 25);
        assert_eq!(split.in_split(Split::Val).len(), 25);
        assert_eq!(split.in_split(Split::Train).len(), 202);
    }

    #[test]
    fn all_train_ratio() {
        let split = stratified_split(&manifest([3, 2, 1]), [1.0, 0.0, 0.0], 0).unwrap();
        assert!(split.records().iter().all(|r| r.split == Some(Split::Train)));
    }

    #[test]
    fn seeds_permute_without_changing_counts() {
        let m = manifest([30, 20, 10]);
        let a = stratified_split(&m, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(a, stratified_split(&m, DEFAULT_RATIOS, 1).unwrap());
        let b = stratified_split(&m, DEFAULT_RATIOS, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.counts(), b.counts());
    }

    #[test]
    fn bad_ratios_and_starved_splits() {
        let m = manifest([1, 1, 1]);
        assert!(matches!(stratified_split(&m, [0.5, 0.1, 0.1], 0), Err(DataError::Ratios(_))));
        assert!(matches!(
            stratified_split(&m, DEFAULT_RATIOS, 0),
            Err(DataError::EmptySplit { split: Split::Val })
        ));
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = stratified_split(&manifest([10, 10, 10]), DEFAULT_RATIOS, 3).unwrap();
        let text = m.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"split\":\"train\"") || text.contains("\"split\""));
        assert_eq!(Manifest::parse_jsonl(&text).unwrap(), m);
        let unsplit = manifest([1, 0, 0]).to_jsonl();
        assert_eq!(unsplit, "{\"id\":\"A0\",\"path\":\"x.png\",\"label\":\"A\"}\n");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let r = Record::new("a", PathBuf::from("p"), "A");
        assert!(matches!(Manifest::new(vec![r.clone(), r]), Err(DataError::DuplicateId(_))));
    }

    fn gradient_image(n: usize) -> GrayImage {
        GrayImage::new(n, n, (0..n * n).map(|i| ((i * 7) % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn identity_transform_is_exact() {
        let img = gradient_image(17);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentParams::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn full_turn_matches_no_turn() {
        let img = gradient_image(16);
        let turned = apply_transform(
            &img,
            &Transform {
                rotation: 360.0,
                ..Transform::IDENTITY
            },
        )
        .unwrap();
        for (a, b) in turned.pixels().iter().zip(img.pixels()) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_rejects_rectangles() {
        let img = gradient_image(20);
        let p = AugmentParams::default();
        let a = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let rect = GrayImage::filled(4, 3, 0);
        assert!(matches!(apply_transform(&rect, &Transform::IDENTITY), Err(DataError::NotSquare { .. })));
    }

    #[test]
    fn normalize_constant_and_affine() {
        let flat = normalize(&GrayImage::filled(4, 4, 77));
        assert!(flat.data().iter().all(|&v| v == 0.0));
        let img = gradient_image(8);
        let t = normalize(&img);
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var: f64 = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-3);
        let affine = normalize_values(img.pixels().iter().map(|&p| 3.0 * p as f64 + 11.0));
        for (a, b) in affine.iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
