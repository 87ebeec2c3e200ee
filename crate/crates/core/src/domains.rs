//! Procedural labeled street scenes.
//!
//! Every sample is a 32x32 RGB image plus a dense class mask, rendered as a
//! pure function of a [`DomainSpec`] and a sample seed: horizontal background
//! bands (sky / far structure / near ground / road analogs), a handful of
//! class-conditioned foreground shapes, per-domain palette and texture noise,
//! an optional weather overlay, and camera jitter. Nothing is cached and no
//! global state is consulted, so two calls with the same arguments are
//! identical down to the last bit.
//!
//! Two families of presets ship with the crate:
//!
//! * [`real_domain_presets`] — four domains over one shared 19-class label
//!   space ([`target_label_space`]). They differ in palette cast, texture
//!   noise, class frequencies, layout, and weather; the palette shifts are
//!   deliberately strong so that a small model trained on one domain degrades
//!   visibly on the others.
//! * [`sim_domain_presets`] — two "simulator" domains with their own larger
//!   label spaces (23 and 31 classes), cleaner textures, and a large
//!   per-sample *style jitter* that randomizes the palette. The style
//!   randomization is what makes simulated data useful as a regularizer: it
//!   spans the color manifold the real domains live on instead of committing
//!   to any single domain's look.
//!
//! Real masks never contain the ignore index; it only appears after a label
//! map drops simulator-specific classes (see [`crate::labelspace`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{sima_rules, simb_rules, MapTarget};
use crate::rng::{rng_for, Stream};
use crate::tensor::{MaskTensor, Tensor, IGNORE_INDEX};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Canvas edge length in pixels; all samples are square.
pub const CANVAS: usize = 32;

/// A named, ordered set of classes. The class id is the index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaceSpec {
    name: String,
    classes: Vec<String>,
}

impl LabelSpaceSpec {
    /// Build a label space; class names must be unique and fit in a u8
    /// below the ignore index.
    pub fn new(name: &str, classes: &[&str]) -> Result<LabelSpaceSpec> {
        if classes.is_empty() || classes.len() >= usize::from(IGNORE_INDEX) {
            return Err(Error::config(format!(
                "label space {name:?} must have between 1 and {} classes",
                usize::from(IGNORE_INDEX) - 1
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(Error::config(format!(
                    "label space {name:?} repeats class {c:?}"
                )));
            }
        }
        Ok(LabelSpaceSpec {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.classes.get(usize::from(id)).map(String::as_str)
    }

    pub fn id_of(&self, class: &str) -> Option<u8> {
        self.classes
            .iter()
            .position(|c| c == class)
            .map(|i| i as u8)
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(String::as_str)
    }
}

/// The shared 19-class target label space of the four real domains.
pub fn target_label_space() -> LabelSpaceSpec {
    LabelSpaceSpec::new(
        "target",
        &[
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic light",
            "traffic sign",
            "vegetation",
            "terrain",
            "sky",
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "train",
            "motorcycle",
            "bicycle",
        ],
    )
    .expect("target label space is valid")
}

/// Kinds of weather overlay a domain can apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherKind {
    Fog,
    Rain,
    Snow,
}

/// One weather option: an overlay kind and its strength in `[0, 1]`.
/// Strength zero is a clear-sky no-op, which lets a preset mix clear samples
/// into an otherwise weathered domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherOverlay {
    pub kind: WeatherKind,
    pub strength: f64,
}

/// Parametric description of a procedural domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Short unique name ("metro", "sima", ...).
    pub name: String,
    /// The label space samples are annotated in.
    pub label_space: LabelSpaceSpec,
    /// Base RGB color per class id, values in `[0, 1]`.
    pub palette: Vec<[f64; 3]>,
    /// Standard deviation of per-pixel Gaussian texture noise.
    pub texture_noise_sigma: f64,
    /// Per-class sampling weights for foreground shapes.
    pub class_frequency_weights: Vec<f64>,
    /// Inclusive range of foreground shapes per sample.
    pub shape_count_range: (usize, usize),
    /// Weather options; one is drawn per sample, empty means always clear.
    pub weather_overlays: Vec<WeatherOverlay>,
    /// Strength of per-sample band shifts and brightness wobble, `[0, 1]`.
    pub camera_jitter: f64,
    /// Strength of per-sample palette randomization, `[0, 1]`. Zero for the
    /// real domains; large for simulators (domain randomization).
    pub style_jitter: f64,
    /// Alternative palette centers for the style roll. When non-empty, each
    /// rendered sample picks one anchor uniformly and jitters around it
    /// instead of around `palette` — the randomization then hops between
    /// distinct looks rather than spreading around a single one. Empty for
    /// the real domains.
    pub style_anchors: Vec<Vec<[f64; 3]>>,
    /// Class ids of the horizontal background bands, top to bottom.
    pub background_layers: Vec<u8>,
    /// Namespace separating this domain's random streams from all others.
    pub seed_namespace: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.label_space.num_classes();
        if self.palette.len() != c {
            return Err(Error::config(format!(
                "domain {:?}: palette covers {} classes, label space has {c}",
                self.name,
                self.palette.len()
            )));
        }
        for (i, anchor) in self.style_anchors.iter().enumerate() {
            if anchor.len() != c {
                return Err(Error::config(format!(
                    "domain {:?}: style anchor {i} covers {} classes, label space has {c}",
                    self.name,
                    anchor.len()
                )));
            }
        }
        if self.class_frequency_weights.len() != c {
            return Err(Error::config(format!(
                "domain {:?}: {} frequency weights for {c} classes",
                self.name,
                self.class_frequency_weights.len()
            )));
        }
        let mut positive = 0;
        for (i, w) in self.class_frequency_weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::config(format!(
                    "domain {:?}: weight {w} for class {i} must be finite and >= 0",
                    self.name
                )));
            }
            if *w > 0.0 {
                positive += 1;
            }
        }
        if positive < 2 {
            return Err(Error::config(format!(
                "domain {:?}: need at least two classes with positive frequency weight",
                self.name
            )));
        }
        if self.shape_count_range.0 > self.shape_count_range.1 {
            return Err(Error::config(format!(
                "domain {:?}: empty shape count range",
                self.name
            )));
        }
        if self.background_layers.is_empty() {
            return Err(Error::config(format!(
                "domain {:?}: at least one background band required",
                self.name
            )));
        }
        for id in &self.background_layers {
            if usize::from(*id) >= c {
                return Err(Error::config(format!(
                    "domain {:?}: background class id {id} outside label space",
                    self.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.camera_jitter)
            || !(0.0..=1.0).contains(&self.style_jitter)
            || self.texture_noise_sigma < 0.0
        {
            return Err(Error::config(format!(
                "domain {:?}: jitter/noise parameters out of range",
                self.name
            )));
        }
        for w in &self.weather_overlays {
            if !(0.0..=1.0).contains(&w.strength) {
                return Err(Error::config(format!(
                    "domain {:?}: weather strength {} out of [0, 1]",
                    self.name, w.strength
                )));
            }
        }
        Ok(())
    }
}

/// One labeled image: `3 x CANVAS x CANVAS` RGB in `[0, 1]` plus a dense
/// class mask in the domain's own label space.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor,
    pub mask: MaskTensor,
    pub domain: String,
}

/// A contiguous range of sample seeds — the bench's representation of a
/// dataset split. Materializing a sample is always explicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: usize,
}

impl SeedRange {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.start..self.start + self.count as u64
    }
}

/// Deterministic train/test seed ranges for a domain.
///
/// The test range always starts at seed 0, so the test set is unaffected by
/// the training-split size; the train range follows it, so the two are
/// disjoint by construction.
pub fn make_split(train_count: usize, test_count: usize) -> (SeedRange, SeedRange) {
    let test = SeedRange {
        start: 0,
        count: test_count,
    };
    let train = SeedRange {
        start: test_count as u64,
        count: train_count,
    };
    (train, test)
}

/// Allowed geometry of foreground shapes for a class.
struct ShapeProfile {
    kinds: &'static [ShapeKind],
    w: (usize, usize),
    h: (usize, usize),
    /// Vertical zone of the shape center, as fractions of the canvas.
    zone: (f64, f64),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

/// Geometry priors keyed by semantic class name, shared by all domains so a
/// simulator's "vehicles" look like the real domains' "car".
fn shape_profile(class: &str) -> ShapeProfile {
    use ShapeKind::*;
    match class {
        "car" | "vehicles" | "van" | "truck" | "bus" | "train" | "trailer" | "boat" => {
            ShapeProfile {
                kinds: &[Rect],
                w: (7, 13),
                h: (3, 6),
                zone: (0.55, 0.95),
            }
        }
        "person" | "pedestrian" | "rider" => ShapeProfile {
            kinds: &[Rect],
            w: (2, 3),
            h: (5, 8),
            zone: (0.45, 0.9),
        },
        "motorcycle" | "bicycle" | "animal" => ShapeProfile {
            kinds: &[Rect],
            w: (3, 5),
            h: (2, 4),
            zone: (0.55, 0.95),
        },
        "pole" => ShapeProfile {
            kinds: &[Rect],
            w: (1, 2),
            h: (9, 16),
            zone: (0.3, 0.8),
        },
        "traffic light" | "traffic sign" | "billboard" => ShapeProfile {
            kinds: &[Circle, Rect],
            w: (2, 4),
            h: (2, 4),
            zone: (0.15, 0.55),
        },
        "vegetation" | "tree" => ShapeProfile {
            kinds: &[Circle, Triangle],
            w: (5, 9),
            h: (5, 9),
            zone: (0.25, 0.7),
        },
        "terrain" | "ground" | "water" | "sand" => ShapeProfile {
            kinds: &[Rect],
            w: (8, 16),
            h: (2, 4),
            zone: (0.6, 0.95),
        },
        "wall" | "fence" | "guard rail" | "mobile barrier" => ShapeProfile {
            kinds: &[Rect],
            w: (6, 14),
            h: (2, 4),
            zone: (0.45, 0.85),
        },
        "building" | "bridge" | "tunnel" | "infrastructure" => ShapeProfile {
            kinds: &[Rect],
            w: (6, 12),
            h: (6, 12),
            zone: (0.1, 0.5),
        },
        "road line" => ShapeProfile {
            kinds: &[Rect],
            w: (8, 16),
            h: (1, 2),
            zone: (0.75, 0.98),
        },
        _ => ShapeProfile {
            kinds: &[Rect, Circle, Triangle],
            w: (3, 8),
            h: (3, 8),
            zone: (0.2, 0.9),
        },
    }
}

fn weighted_class(rng: &mut ChaCha8Rng, weights: &[f64]) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u8;
        }
    }
    // Rounding can push u just past the final cumulative sum; return the
    // last positively weighted class.
    weights
        .iter()
        .rposition(|w| *w > 0.0)
        .map(|i| i as u8)
        .unwrap_or(0)
}

fn rasterize(
    kind: ShapeKind,
    cx: isize,
    cy: isize,
    w: usize,
    h: usize,
    class: u8,
    mask: &mut MaskTensor,
) {
    let (hw, hh) = ((w / 2) as isize, (h / 2) as isize);
    let size = CANVAS as isize;
    let v = mask.values_mut();
    match kind {
        ShapeKind::Rect => {
            for y in (cy - hh).max(0)..(cy + hh + 1).min(size) {
                for x in (cx - hw).max(0)..(cx + hw + 1).min(size) {
                    v[(y * size + x) as usize] = class;
                }
            }
        }
        ShapeKind::Circle => {
            let r = hw.max(hh).max(1);
            for y in (cy - r).max(0)..(cy + r + 1).min(size) {
                for x in (cx - r).max(0)..(cx + r + 1).min(size) {
                    let (dx, dy) = (x - cx, y - cy);
                    if dx * dx + dy * dy <= r * r {
                        v[(y * size + x) as usize] = class;
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            // Upward-pointing wedge filling the bounding box.
            let height = (2 * hh).max(1);
            for row in 0..=height {
                let y = cy - hh + row;
                if y < 0 || y >= size {
                    continue;
                }
                let half = (hw * row) / height;
                for x in (cx - half).max(0)..(cx + half + 1).min(size) {
                    v[(y * size + x) as usize] = class;
                }
            }
        }
    }
}

/// Render the sample with the given seed — a pure function of
/// `(spec, sample_seed)`.
///
/// The draw order of random values is fixed and independent of the palette
/// colors, so recoloring a class changes image pixels only where the mask
/// holds that class. Declaring style anchors adds exactly one draw (the
/// per-sample anchor pick) regardless of how many anchors there are.
pub fn generate_sample(spec: &DomainSpec, sample_seed: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed_namespace, Stream::Sample, sample_seed);
    let size = CANVAS;
    let classes = spec.label_space.num_classes();

    // Camera wobble: vertical band shift and a global brightness offset.
    let vshift = (rng.gen_range(-1.0..1.0) * spec.camera_jitter * 4.0).round() as isize;
    let brightness = rng.gen_range(-1.0..1.0) * spec.camera_jitter * 0.12;

    // Background band boundaries around an even split of the canvas.
    let bands = spec.background_layers.len();
    let mut bounds = Vec::with_capacity(bands + 1);
    bounds.push(0isize);
    for i in 1..bands {
        let base = (i * size / bands) as isize;
        let jitter = rng.gen_range(-2i64..=2) as isize;
        bounds.push((base + jitter + vshift).clamp(0, size as isize));
    }
    bounds.push(size as isize);
    for i in 1..bounds.len() {
        if bounds[i] < bounds[i - 1] {
            bounds[i] = bounds[i - 1];
        }
    }

    // Style anchor for this sample: the palette the style roll centers on.
    // Domains without anchors always center on their own palette.
    let anchor: &[[f64; 3]] = if spec.style_anchors.is_empty() {
        &spec.palette
    } else {
        &spec.style_anchors[rng.gen_range(0..spec.style_anchors.len())]
    };

    // Per-sample style: a palette offset per class. Drawn unconditionally so
    // consumption never depends on the jitter amount, then scaled.
    let mut style = vec![[0.0f64; 3]; classes];
    for off in style.iter_mut() {
        for ch in off.iter_mut() {
            *ch = rng.gen_range(-1.0..1.0) * spec.style_jitter;
        }
    }

    // Weather pick for this sample.
    let weather = if spec.weather_overlays.is_empty() {
        None
    } else {
        let idx = rng.gen_range(0..spec.weather_overlays.len());
        Some(spec.weather_overlays[idx])
    };

    // Mask: bands, then foreground shapes drawn over them.
    let mut mask = MaskTensor::filled(&[size, size], spec.background_layers[0]);
    for (band, class) in spec.background_layers.iter().enumerate() {
        for y in bounds[band]..bounds[band + 1] {
            let row = &mut mask.values_mut()[(y as usize) * size..(y as usize + 1) * size];
            row.fill(*class);
        }
    }
    let count = rng.gen_range(spec.shape_count_range.0..=spec.shape_count_range.1);
    for _ in 0..count {
        let class = weighted_class(&mut rng, &spec.class_frequency_weights);
        let name = spec
            .label_space
            .class_name(class)
            .expect("weighted class id within label space");
        let profile = shape_profile(name);
        let kind = profile.kinds[rng.gen_range(0..profile.kinds.len())];
        let w = rng.gen_range(profile.w.0..=profile.w.1);
        let h = rng.gen_range(profile.h.0..=profile.h.1);
        let cx = rng.gen_range(0..size) as isize;
        let zone_lo = (profile.zone.0 * size as f64) as usize;
        let zone_hi = ((profile.zone.1 * size as f64) as usize).clamp(zone_lo + 1, size);
        let cy = rng.gen_range(zone_lo..zone_hi) as isize;
        rasterize(kind, cx, cy, w, h, class, &mut mask);
    }

    // Image: class color (+ style + brightness), then texture noise.
    let mut image = Tensor::zeros(&[3, size, size]);
    {
        let iv = image.values_mut();
        let mv = mask.values();
        for p in 0..size * size {
            let class = usize::from(mv[p]);
            for ch in 0..3 {
                iv[ch * size * size + p] = anchor[class][ch] + style[class][ch] + brightness;
            }
        }
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        for v in iv.iter_mut() {
            *v += noise.sample(&mut rng) * spec.texture_noise_sigma;
        }
    }

    // Weather overlay: additive low-frequency luminance and streaks.
    if let Some(overlay) = weather {
        if overlay.strength > 0.0 {
            let s = overlay.strength;
            let iv = image.values_mut();
            match overlay.kind {
                WeatherKind::Fog => {
                    let fx = rng.gen_range(0.5..2.0);
                    let fy = rng.gen_range(0.5..2.0);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    for y in 0..size {
                        for x in 0..size {
                            let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64)
                                / size as f64
                                + phase;
                            let f = s * (0.55 + 0.45 * arg.sin()).max(0.0) * 0.5;
                            for ch in 0..3 {
                                iv[ch * size * size + y * size + x] += f;
                            }
                        }
                    }
                }
                WeatherKind::Rain => {
                    let streaks = (s * 30.0).round() as usize;
                    for _ in 0..streaks {
                        let x0 = rng.gen_range(0..size) as isize;
                        let y0 = rng.gen_range(0..size) as isize;
                        let len = rng.gen_range(4..10);
                        let delta = rng.gen_range(0.1..0.25) * s;
                        for i in 0..len {
                            let (y, x) = (y0 + i, x0 + i / 3);
                            if y < 0 || y >= size as isize || x < 0 || x >= size as isize {
                                continue;
                            }
                            for ch in 0..3 {
                                iv[ch * size * size + (y as usize) * size + x as usize] += delta;
                            }
                        }
                    }
                }
                WeatherKind::Snow => {
                    let dots = (s * 40.0).round() as usize;
                    for _ in 0..dots {
                        let x = rng.gen_range(0..size);
                        let y = rng.gen_range(0..size);
                        for ch in 0..3 {
                            iv[ch * size * size + y * size + x] += 0.5 * s;
                        }
                    }
                }
            }
        }
    }

    for v in image.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(LabeledSample {
        image,
        mask,
        domain: spec.name.clone(),
    })
}

/// Stack samples into batch tensors: images `N x 3 x H x W`, labels
/// `N x H x W`. All samples must share the canvas size.
pub fn collate<'a, I>(samples: I) -> Result<(Tensor, MaskTensor)>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let samples: Vec<&LabeledSample> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::config("cannot collate an empty batch"));
    }
    let n = samples.len();
    let size = CANVAS;
    let mut images = Tensor::zeros(&[n, 3, size, size]);
    let mut labels = MaskTensor::filled(&[n, size, size], 0);
    let plane = 3 * size * size;
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != [3, size, size] || s.mask.shape() != [size, size] {
            return Err(Error::data(format!(
                "sample from domain {:?} has unexpected shape {:?}/{:?}",
                s.domain,
                s.image.shape(),
                s.mask.shape()
            )));
        }
        images.values_mut()[i * plane..(i + 1) * plane].copy_from_slice(s.image.values());
        labels.values_mut()[i * size * size..(i + 1) * size * size]
            .copy_from_slice(s.mask.values());
    }
    Ok((images, labels))
}

/// Render a sample for on-disk inspection: the image as 8-bit RGB
/// (`round(255 * v)`) and the mask as 8-bit grayscale holding raw class ids
/// (ignore stays 255).
pub fn render_sample_images(sample: &LabeledSample) -> Result<(image::RgbImage, image::GrayImage)> {
    let size = CANVAS;
    if sample.image.shape() != [3, size, size] || sample.mask.shape() != [size, size] {
        return Err(Error::data(format!(
            "sample from domain {:?} has unexpected shape {:?}/{:?}",
            sample.domain,
            sample.image.shape(),
            sample.mask.shape()
        )));
    }
    let plane = size * size;
    let px = |c: usize, x: u32, y: u32| {
        let v = sample.image.values()[c * plane + y as usize * size + x as usize];
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let rgb = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        image::Rgb([px(0, x, y), px(1, x, y), px(2, x, y)])
    });
    let mask = image::GrayImage::from_fn(size as u32, size as u32, |x, y| {
        image::Luma([sample.mask.values()[y as usize * size + x as usize]])
    });
    Ok((rgb, mask))
}

fn base_palette() -> Vec<[f64; 3]> {
    vec![
        [0.29, 0.29, 0.31], // road
        [0.72, 0.55, 0.62], // sidewalk
        [0.45, 0.30, 0.24], // building
        [0.55, 0.50, 0.42], // wall
        [0.62, 0.56, 0.28], // fence
        [0.60, 0.60, 0.60], // pole
        [0.95, 0.65, 0.15], // traffic light
        [0.90, 0.85, 0.20], // traffic sign
        [0.25, 0.55, 0.22], // vegetation
        [0.55, 0.70, 0.35], // terrain
        [0.45, 0.65, 0.90], // sky
        [0.85, 0.15, 0.25], // person
        [0.95, 0.05, 0.60], // rider
        [0.10, 0.15, 0.75], // car
        [0.15, 0.25, 0.45], // truck
        [0.70, 0.35, 0.10], // bus
        [0.30, 0.70, 0.70], // train
        [0.45, 0.10, 0.55], // motorcycle
        [0.55, 0.25, 0.10], // bicycle
    ]
}

fn map_palette(base: &[[f64; 3]], f: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<[f64; 3]> {
    base.iter().map(|c| f(*c)).collect()
}

fn weights_for(space: &LabelSpaceSpec, entries: &[(&str, f64)]) -> Vec<f64> {
    let mut w = vec![0.0; space.num_classes()];
    for (name, weight) in entries {
        let id = space
            .id_of(name)
            .unwrap_or_else(|| panic!("preset weight for unknown class {name:?}"));
        w[usize::from(id)] = *weight;
    }
    w
}

/// The four real domains, in their canonical stream order.
///
/// All four share [`target_label_space`]; they differ in palette cast,
/// noise, frequencies, background layout, weather, and camera jitter. The
/// second domain ("delta") skews heavily toward vehicle classes.
pub fn real_domain_presets() -> Vec<DomainSpec> {
    let space = target_label_space();
    let base = base_palette();
    let id = |name: &str| space.id_of(name).expect("known class");

    let metro = DomainSpec {
        name: "metro".into(),
        label_space: space.clone(),
        palette: map_palette(&base, |c| c),
        texture_noise_sigma: 0.03,
        class_frequency_weights: weights_for(
            &space,
            &[
                ("pole", 1.2),
                ("traffic light", 0.8),
                ("traffic sign", 1.0),
                ("vegetation", 1.5),
                ("terrain", 0.8),
                ("person", 1.2),
                ("rider", 0.4),
                ("car", 2.0),
                ("truck", 0.5),
                ("bus", 0.4),
                ("train", 0.15),
                ("motorcycle", 0.4),
                ("bicycle", 0.6),
                ("wall", 0.7),
                ("fence", 0.8),
                ("building", 0.3),
            ],
        ),
        shape_count_range: (4, 9),
        weather_overlays: vec![],
        camera_jitter: 0.3,
        style_jitter: 0.0,
        style_anchors: vec![],
        background_layers: vec![id("sky"), id("building"), id("sidewalk"), id("road")],
        seed_namespace: 0xA1,
    };

    let delta = DomainSpec {
        name: "delta".into(),
        label_space: space.clone(),
        palette: map_palette(&base, |[r, g, b]| {
            [0.75 * r + 0.25, 0.85 * g + 0.08, 0.80 * b]
        }),
        texture_noise_sigma: 0.05,
        class_frequency_weights: weights_for(
            &space,
            &[
                ("car", 2.5),
                ("motorcycle", 1.8),
                ("bicycle", 1.0),
                ("rider", 1.2),
                ("person", 1.8),
                ("truck", 0.9),
                ("bus", 0.8),
                ("pole", 0.9),
                ("traffic light", 0.4),
                ("traffic sign", 0.7),
                ("vegetation", 1.0),
                ("terrain", 1.0),
                ("wall", 0.5),
                ("fence", 0.6),
                ("train", 0.1),
                ("building", 0.3),
            ],
        ),
        shape_count_range: (6, 12),
        weather_overlays: vec![],
        camera_jitter: 0.5,
        style_jitter: 0.0,
        style_anchors: vec![],
        background_layers: vec![id("sky"), id("building"), id("sidewalk"), id("road")],
        seed_namespace: 0xA2,
    };

    // Coastal light reuses several of the plain-daylight colors for other
    // surfaces: wet sea-wall concrete sits where asphalt sits in the first
    // domain, whitewashed facades where its pink pavers sit. Those reused
    // colors are what make later training overwrite earlier domains.
    let coastal = DomainSpec {
        name: "coastal".into(),
        label_space: space.clone(),
        palette: vec![
            [0.20, 0.26, 0.36], // road (wet, blue cast)
            [0.82, 0.76, 0.58], // sidewalk (sand pavers)
            [0.73, 0.57, 0.63], // building (whitewash, warm shade)
            [0.30, 0.30, 0.32], // wall (wet sea-wall concrete)
            [0.58, 0.53, 0.40], // fence (weathered wood)
            [0.55, 0.58, 0.62], // pole
            [0.94, 0.60, 0.20], // traffic light
            [0.88, 0.82, 0.30], // traffic sign
            [0.33, 0.52, 0.26], // vegetation (dune scrub)
            [0.72, 0.64, 0.46], // terrain (dry sand)
            [0.60, 0.73, 0.90], // sky (bright haze)
            [0.84, 0.19, 0.27], // person
            [0.93, 0.09, 0.56], // rider
            [0.11, 0.17, 0.72], // car
            [0.17, 0.27, 0.47], // truck
            [0.69, 0.37, 0.11], // bus
            [0.31, 0.69, 0.69], // train
            [0.47, 0.11, 0.54], // motorcycle
            [0.52, 0.27, 0.11], // bicycle
        ],
        texture_noise_sigma: 0.08,
        class_frequency_weights: weights_for(
            &space,
            &[
                ("car", 2.2),
                ("truck", 0.8),
                ("bus", 0.5),
                ("person", 0.9),
                ("vegetation", 1.3),
                ("terrain", 1.1),
                ("pole", 1.0),
                ("traffic light", 0.7),
                ("traffic sign", 1.1),
                ("wall", 0.5),
                ("fence", 0.7),
                ("motorcycle", 0.5),
                ("bicycle", 0.4),
                ("rider", 0.25),
                ("train", 0.1),
                ("building", 0.4),
            ],
        ),
        shape_count_range: (4, 9),
        weather_overlays: vec![],
        camera_jitter: 0.4,
        style_jitter: 0.0,
        style_anchors: vec![],
        background_layers: vec![id("sky"), id("vegetation"), id("sidewalk"), id("road")],
        seed_namespace: 0xA3,
    };

    // Alpine reuses first-domain colors most aggressively: cleared stone
    // walks take the asphalt gray, chalets take the paver pink, granite
    // takes the brick brown, and glacial ice — a background band — takes
    // the sky blue. Snow itself claims a near-white region no earlier
    // domain uses.
    let alpine = DomainSpec {
        name: "alpine".into(),
        label_space: space.clone(),
        palette: vec![
            [0.78, 0.80, 0.85], // road (packed snow)
            [0.32, 0.32, 0.35], // sidewalk (cleared wet stone)
            [0.71, 0.54, 0.61], // building (warm-lit chalet)
            [0.44, 0.30, 0.23], // wall (granite and timber)
            [0.26, 0.19, 0.14], // fence (dark wood)
            [0.52, 0.55, 0.60], // pole
            [0.92, 0.62, 0.18], // traffic light
            [0.86, 0.81, 0.24], // traffic sign
            [0.13, 0.30, 0.17], // vegetation (conifer)
            [0.46, 0.64, 0.88], // terrain (glacial ice)
            [0.91, 0.93, 0.96], // sky (overcast white)
            [0.83, 0.17, 0.28], // person
            [0.91, 0.07, 0.57], // rider
            [0.12, 0.16, 0.73], // car
            [0.16, 0.26, 0.46], // truck
            [0.68, 0.36, 0.12], // bus
            [0.31, 0.68, 0.69], // train
            [0.46, 0.11, 0.53], // motorcycle
            [0.53, 0.26, 0.11], // bicycle
        ],
        texture_noise_sigma: 0.05,
        class_frequency_weights: weights_for(
            &space,
            &[
                ("car", 1.6),
                ("person", 0.8),
                ("vegetation", 1.6),
                ("terrain", 1.4),
                ("pole", 0.9),
                ("traffic sign", 0.9),
                ("traffic light", 0.5),
                ("wall", 0.6),
                ("fence", 0.7),
                ("truck", 0.5),
                ("bus", 0.3),
                ("motorcycle", 0.25),
                ("bicycle", 0.3),
                ("rider", 0.15),
                ("train", 0.1),
                ("building", 0.35),
            ],
        ),
        shape_count_range: (3, 8),
        weather_overlays: vec![
            WeatherOverlay {
                kind: WeatherKind::Fog,
                strength: 0.0,
            },
            WeatherOverlay {
                kind: WeatherKind::Fog,
                strength: 0.35,
            },
            WeatherOverlay {
                kind: WeatherKind::Snow,
                strength: 0.5,
            },
        ],
        camera_jitter: 0.5,
        style_jitter: 0.0,
        style_anchors: vec![],
        background_layers: vec![id("sky"), id("vegetation"), id("terrain"), id("road")],
        seed_namespace: 0xA4,
    };

    vec![metro, delta, coastal, alpine]
}

fn sima_label_space() -> LabelSpaceSpec {
    LabelSpaceSpec::new(
        "sima",
        &[
            "unlabeled",
            "building",
            "fence",
            "other",
            "pedestrian",
            "road line",
            "road",
            "sidewalk",
            "vegetation",
            "vehicles",
            "wall",
            "traffic sign",
            "sky",
            "ground",
            "bridge",
            "rail track",
            "guard rail",
            "static",
            "dynamic",
            "water",
            "terrain",
            "tunnel",
            "debris",
        ],
    )
    .expect("sima label space is valid")
}

fn simb_label_space() -> LabelSpaceSpec {
    LabelSpaceSpec::new(
        "simb",
        &[
            "ambiguous",
            "sky",
            "road",
            "sidewalk",
            "rail track",
            "terrain",
            "tree",
            "vegetation",
            "building",
            "infrastructure",
            "fence",
            "billboard",
            "traffic light",
            "traffic sign",
            "mobile barrier",
            "fire hydrant",
            "chair",
            "trash",
            "trash can",
            "person",
            "animal",
            "bicycle",
            "motorcycle",
            "car",
            "van",
            "bus",
            "truck",
            "trailer",
            "train",
            "plane",
            "boat",
        ],
    )
    .expect("simb label space is valid")
}

/// Project the real domains' palettes into a simulator's label space: one
/// anchor palette per real domain, where every simulator class the relabel
/// rules keep takes that real domain's color for its mapped target class,
/// and dropped classes keep the simulator's own color everywhere.
fn real_look_anchors(
    space: &LabelSpaceSpec,
    base: &[[f64; 3]],
    rules: &[(&str, MapTarget)],
) -> Vec<Vec<[f64; 3]>> {
    let target = target_label_space();
    real_domain_presets()
        .iter()
        .map(|real| {
            space
                .class_names()
                .enumerate()
                .map(|(id, name)| {
                    let (_, verdict) = rules
                        .iter()
                        .find(|(n, _)| *n == name)
                        .expect("relabel rules cover every simulator class");
                    match verdict {
                        MapTarget::Class(t) => {
                            let tid = target.id_of(t).expect("mapped target class exists");
                            real.palette[usize::from(tid)]
                        }
                        MapTarget::Drop => base[id],
                    }
                })
                .collect()
        })
        .collect()
}

/// The two simulator domains.
///
/// Both render cleaner images than the real domains but randomize their
/// style per sample: the renderer hops between anchor palettes — one per
/// real capture condition, projected through the relabel rules — and then
/// jitters around the chosen anchor (`style_jitter`). Simulated data thus
/// rehearses every real look continuously while matching none exactly:
/// colors sit a jitter away, and texture noise, shape mix, and weather stay
/// the simulator's own. Their label spaces are their own; training on them
/// requires a label map, and classes the map drops keep distinct colors
/// that never track the real looks.
pub fn sim_domain_presets() -> Vec<DomainSpec> {
    let a_space = sima_label_space();
    let a_id = |name: &str| a_space.id_of(name).expect("known class");
    // Base colors (used for dropped classes and as the canonical palette)
    // sit near the middle of the real domains' colors for the mapped target
    // class.
    let a_palette = vec![
        [0.00, 0.00, 0.00], // unlabeled
        [0.62, 0.44, 0.42], // building
        [0.54, 0.46, 0.26], // fence
        [0.50, 0.50, 0.50], // other
        [0.85, 0.18, 0.25], // pedestrian
        [0.86, 0.87, 0.86], // road line
        [0.43, 0.42, 0.44], // road
        [0.66, 0.54, 0.51], // sidewalk
        [0.29, 0.48, 0.21], // vegetation
        [0.16, 0.17, 0.70], // vehicles
        [0.49, 0.40, 0.33], // wall
        [0.89, 0.82, 0.23], // traffic sign
        [0.64, 0.74, 0.87], // sky
        [0.50, 0.45, 0.35], // ground
        [0.40, 0.40, 0.45], // bridge
        [0.35, 0.30, 0.30], // rail track
        [0.70, 0.70, 0.72], // guard rail
        [0.40, 0.35, 0.30], // static
        [0.60, 0.40, 0.30], // dynamic
        [0.15, 0.40, 0.60], // water
        [0.60, 0.66, 0.49], // terrain
        [0.20, 0.20, 0.24], // tunnel
        [0.45, 0.40, 0.32], // debris
    ];
    let a_anchors = real_look_anchors(&a_space, &a_palette, &sima_rules());
    let sima = DomainSpec {
        name: "sima".into(),
        label_space: a_space.clone(),
        palette: a_palette,
        style_anchors: a_anchors,
        texture_noise_sigma: 0.01,
        class_frequency_weights: weights_for(
            &a_space,
            &[
                ("pedestrian", 1.5),
                ("vehicles", 2.2),
                ("vegetation", 1.2),
                ("wall", 0.6),
                ("fence", 0.6),
                ("traffic sign", 0.9),
                ("road line", 1.2),
                ("terrain", 0.8),
                ("other", 0.3),
                ("ground", 0.4),
                ("bridge", 0.2),
                ("rail track", 0.2),
                ("guard rail", 0.3),
                ("static", 0.3),
                ("dynamic", 0.3),
                ("water", 0.3),
                ("tunnel", 0.15),
                ("debris", 0.2),
            ],
        ),
        shape_count_range: (5, 10),
        weather_overlays: vec![
            WeatherOverlay {
                kind: WeatherKind::Fog,
                strength: 0.0,
            },
            WeatherOverlay {
                kind: WeatherKind::Fog,
                strength: 0.45,
            },
            WeatherOverlay {
                kind: WeatherKind::Rain,
                strength: 0.4,
            },
        ],
        camera_jitter: 0.5,
        style_jitter: 0.16,
        background_layers: vec![
            a_id("sky"),
            a_id("building"),
            a_id("sidewalk"),
            a_id("road"),
        ],
        seed_namespace: 0xB1,
    };

    let b_space = simb_label_space();
    let b_id = |name: &str| b_space.id_of(name).expect("known class");
    let b_palette = vec![
        [0.50, 0.50, 0.50], // ambiguous
        [0.63, 0.73, 0.88], // sky
        [0.44, 0.43, 0.43], // road
        [0.65, 0.55, 0.52], // sidewalk
        [0.36, 0.31, 0.31], // rail track
        [0.59, 0.65, 0.50], // terrain
        [0.18, 0.42, 0.18], // tree
        [0.28, 0.47, 0.22], // vegetation
        [0.61, 0.45, 0.41], // building
        [0.42, 0.42, 0.46], // infrastructure
        [0.55, 0.47, 0.25], // fence
        [0.85, 0.75, 0.55], // billboard
        [0.94, 0.63, 0.16], // traffic light
        [0.88, 0.81, 0.24], // traffic sign
        [0.75, 0.45, 0.20], // mobile barrier
        [0.80, 0.20, 0.15], // fire hydrant
        [0.55, 0.40, 0.25], // chair
        [0.45, 0.42, 0.35], // trash
        [0.35, 0.45, 0.40], // trash can
        [0.84, 0.17, 0.26], // person
        [0.60, 0.45, 0.25], // animal
        [0.56, 0.27, 0.11], // bicycle
        [0.49, 0.12, 0.52], // motorcycle
        [0.15, 0.17, 0.71], // car
        [0.18, 0.20, 0.62], // van
        [0.70, 0.36, 0.11], // bus
        [0.20, 0.27, 0.45], // truck
        [0.30, 0.35, 0.40], // trailer
        [0.31, 0.69, 0.69], // train
        [0.60, 0.65, 0.75], // plane
        [0.25, 0.45, 0.60], // boat
    ];
    let b_anchors = real_look_anchors(&b_space, &b_palette, &simb_rules());
    let simb = DomainSpec {
        name: "simb".into(),
        label_space: b_space.clone(),
        palette: b_palette,
        style_anchors: b_anchors,
        texture_noise_sigma: 0.04,
        class_frequency_weights: weights_for(
            &b_space,
            &[
                ("person", 1.6),
                ("car", 2.0),
                ("van", 0.8),
                ("bus", 0.6),
                ("truck", 0.7),
                ("bicycle", 0.9),
                ("motorcycle", 0.9),
                ("vegetation", 1.2),
                ("tree", 0.8),
                ("terrain", 0.8),
                ("traffic light", 0.8),
                ("traffic sign", 1.0),
                ("fence", 0.6),
                ("billboard", 0.5),
                ("fire hydrant", 0.3),
                ("chair", 0.3),
                ("trash", 0.3),
                ("trash can", 0.3),
                ("animal", 0.25),
                ("mobile barrier", 0.3),
                ("infrastructure", 0.5),
                ("trailer", 0.3),
                ("train", 0.15),
                ("plane", 0.1),
                ("boat", 0.1),
                ("building", 0.4),
                ("rail track", 0.2),
                ("ambiguous", 0.2),
            ],
        ),
        shape_count_range: (6, 12),
        weather_overlays: vec![
            WeatherOverlay {
                kind: WeatherKind::Fog,
                strength: 0.0,
            },
            WeatherOverlay {
                kind: WeatherKind::Rain,
                strength: 0.35,
            },
            WeatherOverlay {
                kind: WeatherKind::Snow,
                strength: 0.4,
            },
        ],
        camera_jitter: 0.5,
        style_jitter: 0.10,
        background_layers: vec![
            b_id("sky"),
            b_id("building"),
            b_id("sidewalk"),
            b_id("road"),
        ],
        seed_namespace: 0xB2,
    };

    vec![sima, simb]
}

/// Look up any built-in domain preset by name.
pub fn domain_preset(name: &str) -> Option<DomainSpec> {
    real_domain_presets()
        .into_iter()
        .chain(sim_domain_presets())
        .find(|d| d.name == name)
}
