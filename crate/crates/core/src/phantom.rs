//! Synthetic hip radiographs with ground-truth feature masks.
//!
//! Three implant designs share one geometry sampler and differ only in
//! their class features: the stem tip profile, a collar (design B), a
//! modular sleeve (design C) and the acetabular cup rim (thick and flanged
//! for A and C, thin for B). Geometry is expressed in pixels of a
//! 96-pixel reference canvas and scaled to the render size.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Manifest, Record};
use crate::image::{self, GrayImage, ImageError, Mask};
use crate::seed::derive_seed_indexed;

pub const REFERENCE_SIZE: f64 = 96.0;
/// Subsamples per pixel axis when estimating shape coverage.
pub const SUPERSAMPLE: usize = 4;
pub const MIN_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("{name} = {value} outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("render size {0} below the minimum of {MIN_SIZE}")]
    Size(usize),
    #[error("class counts must all be positive, got {0:?}")]
    Counts(Vec<usize>),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DesignClass {
    A,
    B,
    C,
}

impl DesignClass {
    pub const ALL: [DesignClass; 3] = [DesignClass::A, DesignClass::B, DesignClass::C];

    pub fn label(self) -> &'static str {
        match self {
            DesignClass::A => "A",
            DesignClass::B => "B",
            DesignClass::C => "C",
        }
    }

    pub fn tip(self) -> TipProfile {
        match self {
            DesignClass::A => TipProfile::Tapered,
            DesignClass::B => TipProfile::Rounded,
            DesignClass::C => TipProfile::Flat,
        }
    }

    pub fn cup(self) -> CupProfile {
        match self {
            DesignClass::B => CupProfile::Thin,
            DesignClass::A | DesignClass::C => CupProfile::ThickFlanged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TipProfile {
    Tapered = 0,
    Rounded = 1,
    Flat = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CupProfile {
    ThickFlanged,
    Thin,
}

/// Implant geometry, in reference-canvas pixels and degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Horizontal distance from the stem axis to the head centre.
    pub medial_offset: f64,
    /// Vertical drop from the head centre to the stem shoulder.
    pub vertical_height: f64,
    pub neck_shaft_angle: f64,
    pub stem_length: f64,
    pub tip_profile: TipProfile,
    pub collar: bool,
    pub sleeve: bool,
    pub cup_profile: CupProfile,
    /// Stem axis position.
    pub axis_x: f64,
    /// Head centre height.
    pub head_y: f64,
    pub head_radius: f64,
    pub cup_radius: f64,
    /// Cup opening tilt, degrees away from vertical towards the medial side.
    pub cup_tilt: f64,
    pub proximal_width: f64,
    pub distal_width: f64,
}

/// Appearance parameters drawn independently of the design class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub texture_seed: u64,
    pub clutter_count: usize,
    pub rotation: f64,
    pub exposure_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub design_class: DesignClass,
    pub geometry: Geometry,
    pub nuisance: Nuisance,
}

type Range = (f64, f64);

/// Per-class sampling ranges. They overlap on every parameter so only the
/// class features separate the designs.
fn class_ranges(class: DesignClass) -> [(&'static str, Range); 4] {
    let (length, offset) = match class {
        DesignClass::A => ((48.0, 58.0), (18.0, 25.0)),
        DesignClass::B => ((50.0, 60.0), (19.0, 26.0)),
        DesignClass::C => ((49.0, 59.0), (18.0, 26.0)),
    };
    [
        ("stem_length", length),
        ("medial_offset", offset),
        ("vertical_height", (6.0, 12.0)),
        ("neck_shaft_angle", (125.0, 140.0)),
    ]
}

const SHARED_RANGES: [(&str, Range); 7] = [
    ("axis_x", (56.0, 62.0)),
    ("head_y", (20.0, 25.0)),
    ("head_radius", (8.0, 9.5)),
    ("cup_radius", (15.0, 17.0)),
    ("cup_tilt", (10.0, 25.0)),
    ("proximal_width", (15.0, 17.0)),
    ("distal_width", (12.0, 14.0)),
];

/// Documented limits enforced by [`render`]; wider than any sampler range.
const LIMITS: [(&str, Range); 11] = [
    ("medial_offset", (14.0, 30.0)),
    ("vertical_height", (3.0, 16.0)),
    ("neck_shaft_angle", (115.0, 150.0)),
    ("stem_length", (40.0, 64.0)),
    ("axis_x", (50.0, 68.0)),
    ("head_y", (16.0, 30.0)),
    ("head_radius", (6.0, 11.0)),
    ("cup_radius", (13.0, 19.0)),
    ("cup_tilt", (0.0, 35.0)),
    ("proximal_width", (9.0, 20.0)),
    ("distal_width", (4.0, 16.0)),
];

const NUISANCE_LIMITS: [(&str, Range); 2] = [("rotation", (-10.0, 10.0)), ("exposure_gain", (0.8, 1.2))];
const MAX_CLUTTER: usize = 10;

impl Geometry {
    fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("medial_offset", self.medial_offset),
            ("vertical_height", self.vertical_height),
            ("neck_shaft_angle", self.neck_shaft_angle),
            ("stem_length", self.stem_length),
            ("axis_x", self.axis_x),
            ("head_y", self.head_y),
            ("head_radius", self.head_radius),
            ("cup_radius", self.cup_radius),
            ("cup_tilt", self.cup_tilt),
            ("proximal_width", self.proximal_width),
            ("distal_width", self.distal_width),
        ]
    }

    fn cup_thickness(&self) -> f64 {
        match self.cup_profile {
            CupProfile::ThickFlanged => 4.5,
            CupProfile::Thin => 2.5,
        }
    }
}

fn check(name: &'static str, value: f64, (min, max): Range) -> Result<()> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(PhantomError::OutOfRange { name, value, min, max })
    }
}

impl PhantomScene {
    pub fn validate(&self) -> Result<()> {
        let named = self.geometry.named();
        for ((name, value), (_, range)) in named.iter().zip(LIMITS.iter()) {
            check(name, *value, *range)?;
        }
        check("rotation", self.nuisance.rotation, NUISANCE_LIMITS[0].1)?;
        check("exposure_gain", self.nuisance.exposure_gain, NUISANCE_LIMITS[1].1)?;
        check(
            "clutter_count",
            self.nuisance.clutter_count as f64,
            (0.0, MAX_CLUTTER as f64),
        )?;
        let g = &self.geometry;
        check(
            "head_radius",
            g.head_radius,
            (LIMITS[6].1 .0, g.cup_radius - g.cup_thickness() - 0.5),
        )?;
        Ok(())
    }
}

/// Draws a scene. Nuisance parameters come first and use a fixed number of
/// draws, so they are identically distributed for every class.
pub fn sample_scene<R: Rng>(design_class: DesignClass, rng: &mut R) -> PhantomScene {
    let nuisance = Nuisance {
        texture_seed: rng.random(),
        clutter_count: rng.random_range(3..=8),
        rotation: rng.random_range(-8.0..=8.0),
        exposure_gain: rng.random_range(0.85..=1.15),
    };
    let mut uniform = |(lo, hi): Range| rng.random_range(lo..=hi);
    let per_class = class_ranges(design_class).map(|(_, r)| uniform(r));
    let shared = SHARED_RANGES.map(|(_, r)| uniform(r));
    let geometry = Geometry {
        stem_length: per_class[0],
        medial_offset: per_class[1],
        vertical_height: per_class[2],
        neck_shaft_angle: per_class[3],
        tip_profile: design_class.tip(),
        collar: design_class == DesignClass::B,
        sleeve: design_class == DesignClass::C,
        cup_profile: design_class.cup(),
        axis_x: shared[0],
        head_y: shared[1],
        head_radius: shared[2],
        cup_radius: shared[3],
        cup_tilt: shared[4],
        proximal_width: shared[5],
        distal_width: shared[6],
    };
    PhantomScene {
        design_class,
        geometry,
        nuisance,
    }
}

/// Scene for sample `index` of a corpus drawn with `seed`.
pub fn scene_for_index(design_class: DesignClass, seed: u64, index: u64) -> PhantomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "phantom-scene", index));
    sample_scene(design_class, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhantomMasks {
    pub implant: Mask,
    pub tip: Mask,
    pub collar: Mask,
    pub sleeve: Mask,
    pub cup: Mask,
}

impl PhantomMasks {
    pub const SUFFIXES: [&'static str; 5] = ["implant", "tip", "collar", "sleeve", "cup"];

    pub fn named(&self) -> [(&'static str, &Mask); 5] {
        [
            ("implant", &self.implant),
            ("tip", &self.tip),
            ("collar", &self.collar),
            ("sleeve", &self.sleeve),
            ("cup", &self.cup),
        ]
    }

    /// Implant together with every feature mask.
    pub fn union(&self) -> Mask {
        let mut u = self.implant.clone();
        for (_, m) in &self.named()[1..] {
            u.union_with(m);
        }
        u
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phantom {
    pub image: GrayImage,
    pub masks: PhantomMasks,
}

#[derive(Clone, Copy)]
struct Pt {
    x: f64,
    y: f64,
}

/// Implant parts, as bit flags.
const HEAD: u8 = 1;
const NECK: u8 = 2;
const STEM: u8 = 4;
const TIP: u8 = 8;
const COLLAR: u8 = 16;
const SLEEVE: u8 = 32;
const CUP: u8 = 64;

/// Length of the distal region that carries the tip profile.
const TIP_LENGTH: f64 = 16.0;
/// Fraction of the tip width a tapered tip loses by its end.
const TAPER: f64 = 0.75;

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.x - a.x - t * dx).powi(2) + (p.y - a.y - t * dy).powi(2)).sqrt()
}

struct Implant<'a> {
    g: &'a Geometry,
    head: Pt,
    neck_end: Pt,
    shoulder_y: f64,
    end_y: f64,
    cup_axis: (f64, f64),
}

impl<'a> Implant<'a> {
    fn new(g: &'a Geometry) -> Self {
        let head = Pt {
            x: g.axis_x - g.medial_offset,
            y: g.head_y,
        };
        let slope = (g.neck_shaft_angle - 90.0).to_radians().tan();
        let neck_end = Pt {
            x: g.axis_x,
            y: head.y + g.medial_offset * slope,
        };
        let tilt = g.cup_tilt.to_radians();
        Self {
            g,
            head,
            neck_end,
            shoulder_y: head.y + g.vertical_height,
            end_y: head.y + g.vertical_height + g.stem_length,
            cup_axis: (-tilt.sin(), -tilt.cos()),
        }
    }

    fn half_width(&self, y: f64) -> f64 {
        let t = ((y - self.shoulder_y) / self.g.stem_length).clamp(0.0, 1.0);
        0.5 * (self.g.proximal_width + t * (self.g.distal_width - self.g.proximal_width))
    }

    fn parts(&self, p: Pt) -> u8 {
        let g = self.g;
        let mut bits = 0;
        let (hx, hy) = (p.x - self.head.x, p.y - self.head.y);
        let r = (hx * hx + hy * hy).sqrt();
        if r <= g.head_radius {
            bits |= HEAD;
        }
        if segment_distance(p, self.head, self.neck_end) <= 3.5 {
            bits |= NECK;
        }

        let tip_start = self.end_y - TIP_LENGTH;
        let dx = (p.x - g.axis_x).abs();
        if p.y >= self.shoulder_y && p.y <= tip_start && dx <= self.half_width(p.y) {
            bits |= STEM;
        }
        if p.y > tip_start && p.y <= self.end_y + g.distal_width {
            let w = 0.5 * g.distal_width;
            let inside = match g.tip_profile {
                TipProfile::Tapered => {
                    let t = (p.y - tip_start) / TIP_LENGTH;
                    p.y <= self.end_y && dx <= w * (1.0 - TAPER * t)
                }
                TipProfile::Rounded => {
                    let cy = self.end_y - w;
                    (p.y <= cy && dx <= w) || (dx * dx + (p.y - cy).powi(2)).sqrt() <= w
                }
                TipProfile::Flat => p.y <= self.end_y && dx <= w,
            };
            if inside {
                bits |= TIP;
            }
        }
        if g.collar
            && p.y >= self.shoulder_y - 1.5
            && p.y <= self.shoulder_y + 2.5
            && p.x >= g.axis_x - 0.5 * g.proximal_width - 5.0
            && p.x <= g.axis_x + 0.5 * g.proximal_width + 1.0
        {
            bits |= COLLAR;
        }
        if g.sleeve && p.y >= self.shoulder_y + 2.0 && p.y <= self.shoulder_y + 17.0 {
            // Stepped outline: alternate 3-pixel bands stand proud by one pixel.
            let band = ((p.y - self.shoulder_y - 2.0) / 3.0).floor() as i64;
            let ridge = if band % 2 == 0 { 4.5 } else { 3.5 };
            if dx <= self.half_width(p.y) + ridge {
                bits |= SLEEVE;
            }
        }
        if r > 0.0 {
            let facing = (hx * self.cup_axis.0 + hy * self.cup_axis.1) / r;
            let outer = g.cup_radius;
            let inner = outer - g.cup_thickness();
            if facing >= 0.0 && r >= inner && r <= outer {
                bits |= CUP;
            }
            if g.cup_profile == CupProfile::ThickFlanged && facing.abs() < 0.15 && r > outer && r <= outer + 3.0 {
                bits |= CUP;
            }
        }
        bits
    }
}

/// Smooth random field in `[-1, 1]` on a coarse lattice.
struct ValueNoise {
    cells: usize,
    cell: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(seed: u64, extent: f64, cell: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (extent / cell).ceil() as usize + 2;
        let values = (0..cells * cells).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { cells, cell, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let fx = (x / self.cell).clamp(0.0, (self.cells - 2) as f64);
        let fy = (y / self.cell).clamp(0.0, (self.cells - 2) as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let v = |i: usize, j: usize| self.values[j * self.cells + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    contrast: f64,
}

impl Ellipse {
    fn contains(&self, p: Pt) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

const TISSUE: f64 = 45.0;
const BONE: f64 = 40.0;
const PELVIS: f64 = 28.0;
/// Width of the femur's soft edge.
const BONE_EDGE: f64 = 4.0;
const METAL: f64 = 225.0;
const TEXTURE_AMPLITUDE: f64 = 10.0;
const NOISE_STD: f64 = 3.0;
const SALT_PEPPER: f64 = 0.004;

/// Anatomy behind the implant, in reference coordinates.
fn background(scene: &PhantomScene, texture: &ValueNoise, clutter: &[Ellipse], p: Pt) -> f64 {
    let g = &scene.geometry;
    let implant = Implant::new(g);
    let mut v = TISSUE + TEXTURE_AMPLITUDE * texture.at(p.x, p.y);
    // Femur: a shaft around the stem whose edges fade over a few pixels.
    let shaft_half = 0.5 * g.proximal_width + 8.0;
    let dx = (p.x - g.axis_x).abs();
    let ramp = |t: f64| {
        let t = t.clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    v += BONE * ramp((shaft_half - dx) / BONE_EDGE) * ramp((p.y - implant.shoulder_y + 4.0) / BONE_EDGE);
    // Pelvis: a broad band above and medial of the cup.
    let pelvis = Ellipse {
        cx: implant.head.x - 10.0,
        cy: implant.head.y - 14.0,
        rx: 40.0,
        ry: 16.0,
        angle: 0.2,
        contrast: PELVIS,
    };
    if pelvis.contains(p) {
        v += pelvis.contrast;
    }
    for e in clutter {
        if e.contains(p) {
            v += e.contrast;
        }
    }
    v
}

fn clutter(scene: &PhantomScene) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.nuisance.texture_seed ^ 0x5eed_c1a5);
    (0..scene.nuisance.clutter_count)
        .map(|_| Ellipse {
            cx: rng.random_range(0.0..REFERENCE_SIZE),
            cy: rng.random_range(0.0..REFERENCE_SIZE),
            rx: rng.random_range(3.0..10.0),
            ry: rng.random_range(3.0..10.0),
            angle: rng.random_range(0.0..PI),
            contrast: rng.random_range(-10.0..10.0),
        })
        .collect()
}

/// Renders `scene` at `size`×`size`. Masks count any partially covered
/// pixel as inside.
pub fn render(scene: &PhantomScene, size: usize) -> Result<Phantom> {
    if size < MIN_SIZE {
        return Err(PhantomError::Size(size));
    }
    scene.validate()?;
    let g = &scene.geometry;
    let implant = Implant::new(g);
    let texture = ValueNoise::new(scene.nuisance.texture_seed, REFERENCE_SIZE, 12.0);
    let clutter = clutter(scene);
    let scale = REFERENCE_SIZE / size as f64;
    let centre = 0.5 * REFERENCE_SIZE;
    let (sin, cos) = (-scene.nuisance.rotation.to_radians()).sin_cos();
    // Output pixel (sub)position to reference scene coordinates.
    let to_scene = |px: f64, py: f64| {
        let (x, y) = (px * scale - centre, py * scale - centre);
        Pt {
            x: centre + x * cos - y * sin,
            y: centre + x * sin + y * cos,
        }
    };

    let n = size * size;
    let mut masks = PhantomMasks {
        implant: Mask::empty(size, size),
        tip: Mask::empty(size, size),
        collar: Mask::empty(size, size),
        sleeve: Mask::empty(size, size),
        cup: Mask::empty(size, size),
    };
    let mut values = vec![0.0f64; n];
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let i = py * size + px;
            let mut covered = 0usize;
            let mut any = 0u8;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = to_scene(
                        px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    );
                    let bits = implant.parts(p);
                    if bits != 0 {
                        covered += 1;
                    }
                    any |= bits;
                }
            }
            let coverage = covered as f64 / samples;
            let bg = background(scene, &texture, &clutter, to_scene(px as f64 + 0.5, py as f64 + 0.5));
            values[i] = bg * (1.0 - coverage) + METAL * coverage;
            masks.implant.bits_mut()[i] = any != 0;
            masks.tip.bits_mut()[i] = any & TIP != 0;
            masks.collar.bits_mut()[i] = any & COLLAR != 0;
            masks.sleeve.bits_mut()[i] = any & SLEEVE != 0;
            masks.cup.bits_mut()[i] = any & CUP != 0;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.nuisance.texture_seed ^ 0x0a15_e000);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let pixels = values
        .iter()
        .map(|&v| {
            let v = v * scene.nuisance.exposure_gain + noise.sample(&mut rng);
            let roll: f64 = rng.random();
            if roll < SALT_PEPPER / 2.0 {
                0
            } else if roll < SALT_PEPPER {
                255
            } else {
                v.round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(Phantom {
        image: GrayImage::new(size, size, pixels)?,
        masks,
    })
}

/// Default images per design class.
pub const DEFAULT_COUNTS: [usize; 3] = [130, 93, 29];
pub const DEFAULT_SIZE: usize = 96;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Renders `counts[k]` images of each class into `out_dir` and writes
/// `manifest.jsonl`. Sample `i` depends only on `(seed, i)`, so the corpus
/// is byte-identical whatever the thread count.
pub fn generate_dataset(counts: [usize; 3], size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if counts.contains(&0) {
        return Err(PhantomError::Counts(counts.to_vec()));
    }
    let jobs: Vec<(usize, DesignClass)> = DesignClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .enumerate()
        .collect();
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let records = jobs
        .par_iter()
        .map(|&(i, class)| {
            let scene = scene_for_index(class, seed, i as u64);
            let phantom = render(&scene, size)?;
            let id = format!("phantom_{i:04}");
            let file = format!("{id}.png");
            image::save_gray(&phantom.image, &out_dir.join(&file))?;
            for (suffix, mask) in phantom.masks.named() {
                image::save_mask(mask, &out_dir.join(format!("{id}_{suffix}.png")))?;
            }
            Ok(Record::new(id, PathBuf::from(file), class.label()))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records).expect("ids are unique by construction");
    manifest
        .save(&out_dir.join(crate::data::MANIFEST_FILE))
        .map_err(|e| PhantomError::Io {
            path: out_dir.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    Ok(manifest)
}

/// Mask paths that accompany an image written by [`generate_dataset`].
pub fn mask_paths(image_path: &Path) -> Vec<(&'static str, PathBuf)> {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    PhantomMasks::SUFFIXES
        .iter()
        .map(|suffix| (*suffix, image_path.with_file_name(format!("{stem}_{suffix}.png"))))
        .collect()
}

pub fn load_masks(image_path: &Path) -> Result<PhantomMasks> {
    let mut loaded = Vec::with_capacity(5);
    for (_, path) in mask_paths(image_path) {
        loaded.push(image::load_mask(&path)?);
    }
    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("five masks");
    Ok(PhantomMasks {
        implant: next(),
        tip: next(),
        collar: next(),
        sleeve: next(),
        cup: next(),
    })
}

/// Shape classes of the pretraining corpus, which is unrelated to implants.
pub const SHAPE_CLASSES: [&str; 3] = ["circle", "line", "polygon"];

/// One bright geometric shape over a textured background.
pub fn render_shape(class: usize, size: usize, seed: u64) -> Result<GrayImage> {
    if size < MIN_SIZE {
        return Err(PhantomError::Size(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let radius = rng.random_range(0.12 * s..0.25 * s);
    let angle = rng.random_range(0.0..PI);
    let brightness = rng.random_range(150.0..230.0);
    let sides = rng.random_range(3..=5);
    let vertices: Vec<Pt> = (0..sides)
        .map(|k| {
            let a = angle + 2.0 * PI * k as f64 / sides as f64;
            Pt {
                x: cx + radius * a.cos(),
                y: cy + radius * a.sin(),
            }
        })
        .collect();
    let line_a = Pt {
        x: cx - 1.5 * radius * angle.cos(),
        y: cy - 1.5 * radius * angle.sin(),
    };
    let line_b = Pt {
        x: cx + 1.5 * radius * angle.cos(),
        y: cy + 1.5 * radius * angle.sin(),
    };
    let inside = |p: Pt| match class {
        0 => ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt() <= radius,
        1 => segment_distance(p, line_a, line_b) <= 0.04 * s,
        _ => (0..sides).all(|k| {
            let (a, b) = (vertices[k], vertices[(k + 1) % sides]);
            (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0
        }),
    };
    let texture = ValueNoise::new(rng.random(), s, s / 8.0);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut pixels = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut covered = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = Pt {
                        x: px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        y: py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    };
                    covered += inside(p) as usize;
                }
            }
            let c = covered as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let bg = 60.0 + 15.0 * texture.at(px as f64, py as f64);
            let v = bg * (1.0 - c) + brightness * c + noise.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(GrayImage::new(size, size, pixels)?)
}

/// Writes a shape-classification corpus with `counts[k]` images of
/// `SHAPE_CLASSES[k]`.
pub fn generate_shapes(counts: [usize; 3], size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if counts.contains(&0) {
        return Err(PhantomError::Counts(counts.to_vec()));
    }
    let jobs: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .enumerate()
        .collect();
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let records = jobs
        .par_iter()
        .map(|&(i, class)| {
            let img = render_shape(class, size, derive_seed_indexed(seed, "shape", i as u64))?;
            let id = format!("shape_{i:04}");
            let file = format!("{id}.png");
            image::save_gray(&img, &out_dir.join(&file))?;
            Ok(Record::new(id, PathBuf::from(file), SHAPE_CLASSES[class]))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records).expect("ids are unique by construction");
    manifest
        .save(&out_dir.join(crate::data::MANIFEST_FILE))
        .map_err(|e| PhantomError::Io {
            path: out_dir.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    Ok(manifest)
}
