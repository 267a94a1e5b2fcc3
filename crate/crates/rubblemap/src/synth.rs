//! Deterministic generator of small textured scenes with noisy
//! multi-annotator polygon annotations. Damage severity is encoded as
//! texture statistics: local variance grows from mild (regular grid) through
//! medium (grid with cell dropout and jitter) to severe (strong speckle),
//! so the classes are separable by texture while sharing similar shapes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    rasterize_annotations, write_annotations, write_image, write_label_map, AnnotationSet,
    AnnotatorEntry, DamageLabel, Image, LabelMap, Polygon,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundKind {
    SmoothGradient,
    Speckle,
    Stripes,
}

/// Recipe for one scene: geometry, class mix, textures and annotation noise.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: BackgroundKind,
    pub structures_min: usize,
    pub structures_max: usize,
    /// Sampling frequencies for (mild, medium, severe).
    pub class_freqs: [f64; 3],
    pub annotators: usize,
    /// Uniform vertex jitter in pixels applied per annotator.
    pub jitter_px: f64,
    /// Row-stochastic label confusion (true class -> annotated class).
    pub confusion: [[f64; 3]; 3],
    /// Probability that a scene contains no structures at all.
    pub empty_frac: f64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 48,
            background: BackgroundKind::SmoothGradient,
            structures_min: 1,
            structures_max: 3,
            class_freqs: [0.54, 0.22, 0.24],
            annotators: 3,
            jitter_px: 1.0,
            // Annotator disagreement concentrates between medium and severe.
            confusion: [
                [0.92, 0.05, 0.03],
                [0.04, 0.78, 0.18],
                [0.02, 0.20, 0.78],
            ],
            empty_frac: 0.0,
        }
    }
}

impl SceneSpec {
    /// A noise-free variant: one annotator, zero jitter, identity confusion.
    pub fn noise_free(mut self) -> SceneSpec {
        self.annotators = 1;
        self.jitter_px = 0.0;
        self.confusion = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        self
    }

    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("scene must be at least 16x16".into()));
        }
        if self.structures_min > self.structures_max {
            return Err(Error::Config("structure count range inverted".into()));
        }
        if self.annotators == 0 {
            return Err(Error::Config("need at least one annotator".into()));
        }
        if self.class_freqs.iter().any(|&f| f < 0.0)
            || self.class_freqs.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("class frequencies must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_frac) {
            return Err(Error::Config("empty fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One generated scene: the rendered image, noisy annotations, and the exact
/// ground-truth label map.
pub struct Scene {
    pub image: Image,
    pub annotations: AnnotationSet,
    pub truth: LabelMap,
}

use crate::format::splitmix64;

// Order-independent per-pixel randomness: a splitmix64 hash of
// (seed, coordinates) mapped to [0,1).
fn hash_unit(seed: u64, a: u64, b: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(a.wrapping_mul(0x9e3779b97f4a7c15) ^ b));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn uniform_pm(seed: u64, a: u64, b: u64, amplitude: f64) -> f64 {
    (hash_unit(seed, a, b) * 2.0 - 1.0) * amplitude
}

struct Structure {
    polygon: Polygon,
    cx: f64,
    cy: f64,
    radius: f64,
    salt: u64,
}

fn sample_class(freqs: &[f64; 3], u: f64) -> DamageLabel {
    let total: f64 = freqs.iter().sum();
    let mut acc = 0.0;
    for (i, &f) in freqs.iter().enumerate() {
        acc += f / total;
        if u < acc {
            return match i {
                0 => DamageLabel::Mild,
                1 => DamageLabel::Medium,
                _ => DamageLabel::Severe,
            };
        }
    }
    DamageLabel::Severe
}

fn paint_background(spec: &SceneSpec, rng: &mut ChaCha8Rng, salt: u64, data: &mut [f32]) {
    let (w, h) = (spec.width as usize, spec.height as usize);
    match spec.background {
        BackgroundKind::SmoothGradient => {
            let base = 0.30 + rng.gen::<f64>() * 0.10;
            let gx = 0.15 + rng.gen::<f64>() * 0.10;
            let gy = 0.05 + rng.gen::<f64>() * 0.10;
            for y in 0..h {
                for x in 0..w {
                    let v = base + gx * x as f64 / (w - 1) as f64 + gy * y as f64 / (h - 1) as f64;
                    data[y * w + x] = v.clamp(0.02, 0.98) as f32;
                }
            }
        }
        BackgroundKind::Speckle => {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 + uniform_pm(salt, x as u64, y as u64, 0.04);
                    data[y * w + x] = v.clamp(0.02, 0.98) as f32;
                }
            }
        }
        BackgroundKind::Stripes => {
            let phi = rng.gen::<f64>() * std::f64::consts::PI;
            let period = 7.0 + rng.gen::<f64>() * 4.0;
            let (c, s) = (phi.cos(), phi.sin());
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f64 * c + y as f64 * s) / period;
                    let v = 0.45 + 0.12 * (2.0 * std::f64::consts::PI * t).sin();
                    data[y * w + x] = v.clamp(0.02, 0.98) as f32;
                }
            }
        }
    }
}

/// Texture value for a damage class at pixel (x, y). Local variance rises
/// with severity; the per-scene test pins that ordering.
fn class_texture(label: DamageLabel, x: u32, y: u32, salt: u64) -> f64 {
    let grid_offset = (splitmix64(salt) % 4) as u32;
    let on_grid = |period: u32| -> bool {
        (x + grid_offset) % period == 0 || (y + grid_offset) % period == 0
    };
    match label {
        DamageLabel::Mild => {
            let base = 0.64;
            let v = if on_grid(4) { base - 0.16 } else { base };
            v + uniform_pm(salt ^ 0x11, x as u64, y as u64, 0.01)
        }
        DamageLabel::Medium => {
            let base = 0.60;
            let cell = (
                (x + grid_offset) / 4,
                (y + grid_offset) / 4,
            );
            let dropped = hash_unit(salt ^ 0x22, cell.0 as u64, cell.1 as u64) < 0.35;
            let v = if on_grid(4) && !dropped { base - 0.30 } else { base };
            v + uniform_pm(salt ^ 0x33, x as u64, y as u64, 0.22)
        }
        DamageLabel::Severe => 0.50 + uniform_pm(salt ^ 0x44, x as u64, y as u64, 0.45),
    }
    .clamp(0.02, 0.98)
}

/// A whole image of uniform speckle around mid-gray, for texture-encoding
/// experiments where the discriminating signal is the speckle amplitude.
pub fn speckle_image(width: u32, height: u32, amplitude: f64, seed: u64) -> Image {
    let salt = splitmix64(seed);
    let mut data = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let v = 0.5 + uniform_pm(salt, x as u64, y as u64, amplitude);
            data.push(v.clamp(0.02, 0.98) as f32);
        }
    }
    Image {
        width,
        height,
        channels: 1,
        data,
    }
}

/// A whole image filled with one damage-class texture, for texture-encoding
/// experiments.
pub fn texture_image(label: DamageLabel, width: u32, height: u32, seed: u64) -> Image {
    let salt = splitmix64(seed);
    let mut data = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            data.push(class_texture(label, x, y, salt) as f32);
        }
    }
    Image {
        width,
        height,
        channels: 1,
        data,
    }
}

fn rotated_rect(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Vec<[f64; 2]> {
    let (c, s) = (angle.cos(), angle.sin());
    [(-a, -b), (a, -b), (a, b), (-a, b)]
        .iter()
        .map(|&(dx, dy)| [cx + dx * c - dy * s, cy + dx * s + dy * c])
        .collect()
}

fn place_structures(spec: &SceneSpec, rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Structure>> {
    let mut placed: Vec<Structure> = Vec::new();
    let max_attempts = 200 * count.max(1);
    let mut attempts = 0;
    let mut stuck = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "could not place {count} structures in a {}x{} scene after {max_attempts} attempts",
                spec.width, spec.height
            )));
        }
        // An early large placement can wedge the rest; start over.
        stuck += 1;
        if stuck > 40 {
            placed.clear();
            stuck = 0;
        }
        let a = 3.0 + rng.gen::<f64>() * 3.0;
        let b = 3.0 + rng.gen::<f64>() * 3.0;
        let angle = rng.gen::<f64>() * std::f64::consts::FRAC_PI_2;
        let radius = (a * a + b * b).sqrt();
        let lo_x = radius + 1.0;
        let hi_x = spec.width as f64 - radius - 1.0;
        let lo_y = radius + 1.0;
        let hi_y = spec.height as f64 - radius - 1.0;
        if hi_x <= lo_x || hi_y <= lo_y {
            continue;
        }
        let cx = lo_x + rng.gen::<f64>() * (hi_x - lo_x);
        let cy = lo_y + rng.gen::<f64>() * (hi_y - lo_y);
        let clear = placed.iter().all(|p| {
            let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
            d > p.radius + radius + 2.0
        });
        if !clear {
            continue;
        }
        let label = sample_class(&spec.class_freqs, rng.gen::<f64>());
        placed.push(Structure {
            polygon: Polygon {
                label,
                points: rotated_rect(cx, cy, a, b, angle),
            },
            cx,
            cy,
            radius,
            salt: rng.gen::<u64>(),
        });
        stuck = 0;
    }
    Ok(placed)
}

fn confused_label(confusion: &[[f64; 3]; 3], truth: DamageLabel, u: f64) -> DamageLabel {
    let row = &confusion[(truth.class_index() - 1) as usize];
    let total: f64 = row.iter().sum();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p / total.max(1e-12);
        if u < acc {
            return DamageLabel::from_class_index(i as u8 + 1).unwrap();
        }
    }
    truth
}

/// Generates one scene. Deterministic for a given (spec, seed); the truth
/// map is exactly the rasterization of the noise-free polygons.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_salt = rng.gen::<u64>();

    let empty = rng.gen::<f64>() < spec.empty_frac;
    let count = if empty {
        0
    } else if spec.structures_max == spec.structures_min {
        spec.structures_min
    } else {
        rng.gen_range(spec.structures_min..=spec.structures_max)
    };
    let structures = place_structures(spec, &mut rng, count)?;

    // Render: background first, then each structure's class texture inside
    // its exact mask.
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut data = vec![0.0f32; w * h];
    paint_background(spec, &mut rng, scene_salt, &mut data);

    let clean = AnnotationSet {
        image: String::new(),
        width: spec.width,
        height: spec.height,
        annotations: vec![AnnotatorEntry {
            annotator: "truth".into(),
            polygons: structures.iter().map(|s| s.polygon.clone()).collect(),
        }],
    };
    let truth = rasterize_annotations(&clean, spec.width, spec.height)
        .maps
        .pop()
        .expect("one annotator");

    for s in &structures {
        let mask = rasterize_annotations(
            &AnnotationSet {
                image: String::new(),
                width: spec.width,
                height: spec.height,
                annotations: vec![AnnotatorEntry {
                    annotator: String::new(),
                    polygons: vec![s.polygon.clone()],
                }],
            },
            spec.width,
            spec.height,
        )
        .maps
        .pop()
        .expect("one annotator");
        for y in 0..spec.height {
            for x in 0..spec.width {
                if mask.get(x, y) != 0 {
                    data[y as usize * w + x as usize] =
                        class_texture(s.polygon.label, x, y, s.salt) as f32;
                }
            }
        }
    }

    // Annotators: jittered vertices, possibly confused labels.
    let mut annotations = Vec::with_capacity(spec.annotators);
    for a in 0..spec.annotators {
        let mut polygons = Vec::with_capacity(structures.len());
        for (si, s) in structures.iter().enumerate() {
            let jitter_salt = scene_salt ^ splitmix64((a as u64) << 32 | si as u64);
            let points: Vec<[f64; 2]> = s
                .polygon
                .points
                .iter()
                .enumerate()
                .map(|(vi, &[x, y])| {
                    [
                        x + uniform_pm(jitter_salt, vi as u64, 0, spec.jitter_px),
                        y + uniform_pm(jitter_salt, vi as u64, 1, spec.jitter_px),
                    ]
                })
                .collect();
            let label = confused_label(
                &spec.confusion,
                s.polygon.label,
                hash_unit(jitter_salt ^ 0x55, si as u64, 0),
            );
            polygons.push(Polygon { label, points });
        }
        annotations.push(AnnotatorEntry {
            annotator: format!("annotator-{a}"),
            polygons,
        });
    }

    let image = Image {
        width: spec.width,
        height: spec.height,
        channels: 1,
        data,
    };
    Ok(Scene {
        image,
        annotations: AnnotationSet {
            image: String::new(),
            width: spec.width,
            height: spec.height,
            annotations,
        },
        truth,
    })
}

/// One corpus entry in the manifest: paths relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneEntry {
    pub image: String,
    pub annotations: String,
    pub truth: String,
}

/// Generates `n` scenes under `dir` and writes `manifest.json` listing them.
/// Returns the manifest path.
pub fn generate_corpus(dir: &Path, n: usize, spec: &SceneSpec, seed: u64) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config("corpus needs at least one scene".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = splitmix64(seed ^ splitmix64(i as u64 + 1));
        let mut scene = generate_scene(spec, scene_seed)?;
        let stem = format!("{i:04}");
        let image_name = format!("{stem}.pgm");
        let ann_name = format!("{stem}.json");
        let truth_name = format!("{stem}_truth.pgm");
        scene.annotations.image = image_name.clone();
        write_image(&dir.join(&image_name), &scene.image)?;
        write_annotations(&dir.join(&ann_name), &scene.annotations)?;
        write_label_map(&dir.join(&truth_name), &scene.truth)?;
        entries.push(SceneEntry {
            image: image_name,
            annotations: ann_name,
            truth: truth_name,
        });
    }
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serialization");
    fs::write(&manifest, json).map_err(|e| Error::file(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
}
