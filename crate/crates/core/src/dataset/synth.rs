use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, write_manifest, DatasetManifest, ImageRecord, Split, StoneClass, View};
use crate::error::{Error, Result};

/// Grating period (pixels) for each surface factor level.
pub const SURFACE_PERIODS: [f64; 3] = [4.0, 8.0, 16.0];
/// Per-channel direction of the section mottle for each hue level (warm, cool).
pub const SECTION_HUES: [[f64; 3]; 2] = [[1.0, 0.35, -0.65], [-0.65, 0.35, 1.0]];

const SURFACE_BASE: [f64; 3] = [140.0, 128.0, 118.0];
const SURFACE_AMPLITUDE: f64 = 50.0;
const SECTION_BASE: [f64; 3] = [130.0, 112.0, 100.0];
const SECTION_AMPLITUDE: f64 = 70.0;
const MOTTLE_PERIODS: [f64; 3] = [10.0, 14.0, 18.0];

/// Factorial synthetic design: class `c = a·section_levels + b`, where the
/// surface view shows only `a` (grating frequency) and the section view shows
/// only `b` (foreground hue).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub surface_factor_levels: usize,
    pub section_factor_levels: usize,
    pub noise_std: f64,
    pub images_per_class_per_view: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 6,
            surface_factor_levels: 3,
            section_factor_levels: 2,
            noise_std: 8.0,
            images_per_class_per_view: 20,
            image_size: 256,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != StoneClass::ALL.len() {
            return Err(Error::InvalidConfig(format!("synthetic data has 6 classes, got {}", self.classes)));
        }
        if self.surface_factor_levels * self.section_factor_levels != self.classes
            || self.surface_factor_levels != SURFACE_PERIODS.len()
            || self.section_factor_levels != SECTION_HUES.len()
        {
            return Err(Error::InvalidConfig(format!(
                "factor levels {}×{} must be 3×2 to encode 6 classes",
                self.surface_factor_levels, self.section_factor_levels
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if self.image_size < 8 || self.images_per_class_per_view == 0 {
            return Err(Error::InvalidConfig("image_size ≥ 8 and at least one image per class and view".into()));
        }
        Ok(())
    }

    /// `(surface level, section level)` of a class.
    pub fn factors(&self, class: StoneClass) -> (usize, usize) {
        (class.index() / self.section_factor_levels, class.index() % self.section_factor_levels)
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub record: ImageRecord,
    pub image: RgbImage,
}

fn noise_sampler(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("valid std"))
}

fn render(size: usize, noise_std: f64, noise_rng: &mut ChaCha8Rng, f: impl Fn(f64, f64, usize) -> f64) -> RgbImage {
    let noise = noise_sampler(noise_std);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(noise_rng));
                *out = (f(x as f64, y as f64, c) + n).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

fn grating(geo: &mut ChaCha8Rng, period: f64) -> impl Fn(f64, f64) -> f64 {
    let theta: f64 = geo.gen_range(0.0..PI);
    let phase: f64 = geo.gen_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    move |x, y| (2.0 * PI * (x * c + y * s) / period + phase).sin()
}

fn render_surface(level: usize, size: usize, geo: &mut ChaCha8Rng, noise_rng: &mut ChaCha8Rng, std: f64) -> RgbImage {
    let g = grating(geo, SURFACE_PERIODS[level]);
    render(size, std, noise_rng, |x, y, c| SURFACE_BASE[c] + SURFACE_AMPLITUDE * g(x, y))
}

fn render_section(level: usize, size: usize, geo: &mut ChaCha8Rng, noise_rng: &mut ChaCha8Rng, std: f64) -> RgbImage {
    let parts: Vec<_> = MOTTLE_PERIODS.iter().map(|&p| grating(geo, p)).collect();
    let hue = SECTION_HUES[level];
    render(size, std, noise_rng, |x, y, c| {
        let m = parts.iter().map(|g| g(x, y)).sum::<f64>() / parts.len() as f64;
        SECTION_BASE[c] + SECTION_AMPLITUDE * m * hue[c]
    })
}

/// Renders the whole synthetic corpus in memory.
///
/// Image `i` of a class has stone id `syn-<CLASS>-<i>` in both views. Texture
/// geometry depends only on `(seed, view, i)`, so images that share a factor
/// level differ only by pixel noise.
pub fn synth_generate(config: &SynthConfig) -> Result<(DatasetManifest, Vec<SynthImage>)> {
    config.validate()?;
    let mut images = Vec::new();
    for class in StoneClass::ALL {
        let (a, b) = config.factors(class);
        for view in View::ALL {
            for i in 0..config.images_per_class_per_view {
                let stone_id = format!("syn-{}-{i:04}", class.as_str());
                let mut geo = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[view as u64, i as u64]));
                let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    &[view as u64, i as u64, class.index() as u64, 1],
                ));
                let image = match view {
                    View::Surface => render_surface(a, config.image_size, &mut geo, &mut noise, config.noise_std),
                    View::Section => render_section(b, config.image_size, &mut geo, &mut noise, config.noise_std),
                };
                let record = ImageRecord {
                    image_path: format!("images/{}/{}/{stone_id}_{}.png", class.as_str(), view.as_str(), view.as_str()),
                    stone_class: class,
                    view,
                    stone_id,
                    split: Split::Unassigned,
                };
                images.push(SynthImage { record, image });
            }
        }
    }
    let manifest = DatasetManifest {
        records: images.iter().map(|s| s.record.clone()).collect(),
        ..DatasetManifest::default()
    };
    Ok((manifest, images))
}

/// Renders the corpus and writes the PNG files plus `manifest.jsonl` under `out_dir`.
/// Image paths in the manifest are relative to `out_dir`.
pub fn synth_write(config: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, Vec<std::path::PathBuf>)> {
    let (manifest, images) = synth_generate(config)?;
    let mut written = Vec::with_capacity(images.len() + 1);
    for img in &images {
        let path = out_dir.join(&img.record.image_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.image.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
        written.push(path);
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &manifest.records)?;
    written.push(manifest_path);
    Ok((manifest, written))
}
