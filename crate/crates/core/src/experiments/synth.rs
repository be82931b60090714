//! Synthetic multi-domain segmentation data.
//!
//! Every image is a single foreground shape over a shaded background,
//! degraded by multiplicative speckle with a configurable grain and by
//! additive noise. Domains differ in shape family, foreground contrast and
//! texture, so the features two domains share can be chosen explicitly.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Image, Mask, Role, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Texture {
    /// Standard deviation of the multiplicative speckle field.
    pub speckle: f32,
    /// Side in pixels of the speckle correlation cell.
    pub grain: usize,
    pub additive: f32,
    /// Peak-to-peak brightness ramp across the image.
    pub gradient: f32,
}

impl Default for Texture {
    fn default() -> Self {
        Self { speckle: 0.3, grain: 2, additive: 0.05, gradient: 0.1 }
    }
}

/// Intensity model of one family of images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub background: f32,
    /// Foreground mean minus background mean; negative gives dark lesions.
    pub contrast: f32,
    /// Standard deviation of extra pixel noise inside the foreground only,
    /// a texture cue that leaves the mean unchanged.
    #[serde(default)]
    pub interior_noise: f32,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub role: Role,
    pub samples: usize,
    pub shape: ShapeFamily,
    /// Each image picks one appearance uniformly at random. Listing the same
    /// appearance in two domains is how they share features.
    pub appearances: Vec<Appearance>,
    /// Shape radius range as fractions of the image side.
    pub size_range: (f32, f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub domains: Vec<DomainStyle>,
}

impl SyntheticSpec {
    /// Target plus two sources with limited similarity. Target lesions are
    /// blobs carrying two weak cues at once: a darker mean and a noisier
    /// interior. Source 1 draws ellipses with only the intensity cue, source 2
    /// rectangles with only the interior-texture cue, both at full strength.
    /// No shape family is shared with the target and each source shares a
    /// different cue with it.
    pub fn limited_similarity(image_size: usize, target_samples: usize, source_samples: usize) -> Self {
        let texture = Texture { speckle: 0.15, grain: (image_size / 16).max(2), additive: 0.08, gradient: 0.2 };
        let look = |contrast, interior_noise| Appearance { background: 0.5, contrast, interior_noise, texture };
        let size_range = (0.14, 0.3);
        let style = |name: &str, role, samples, shape, appearance| DomainStyle {
            name: name.into(),
            role,
            samples,
            shape,
            appearances: vec![appearance],
            size_range,
        };
        Self {
            image_size,
            domains: vec![
                style("target", Role::Target, target_samples, ShapeFamily::Blob, look(-0.1, 0.1)),
                style("source1", Role::Source(1), source_samples, ShapeFamily::Ellipse, look(-0.25, 0.0)),
                style("source2", Role::Source(2), source_samples, ShapeFamily::Rectangle, look(0.0, 0.25)),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("synthetic image size {} is too small", self.image_size)));
        }
        for d in &self.domains {
            let (lo, hi) = d.size_range;
            if !(0.0 < lo && lo <= hi && hi < 0.5) {
                return Err(Error::Config(format!("domain {}: bad size range", d.name)));
            }
            if d.appearances.is_empty() || d.appearances.iter().any(|a| a.texture.grain == 0) {
                return Err(Error::Config(format!("domain {}: needs appearances with positive grain", d.name)));
            }
        }
        Ok(())
    }
}

/// Analytic foreground region of one sample, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeParams {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, angle: f32 },
    Rectangle { cx: f32, cy: f32, half_w: f32, half_h: f32, angle: f32 },
    Blob { cx: f32, cy: f32, radius: f32, harmonics: [(f32, f32); 3] },
}

impl ShapeParams {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            ShapeParams::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeParams::Rectangle { cx, cy, half_w, half_h, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                u.abs() <= half_w && v.abs() <= half_h
            }
            ShapeParams::Blob { cx, cy, radius, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = dy.atan2(dx);
                let r = harmonics
                    .iter()
                    .enumerate()
                    .fold(1.0, |acc, (k, &(a, phase))| acc + a * ((k as f32 + 2.0) * theta + phase).cos());
                (dx * dx + dy * dy).sqrt() <= radius * r
            }
        }
    }

    /// Mask sampled at pixel centres.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let bits = (0..height * width)
            .map(|p| u8::from(self.contains((p % width) as f32 + 0.5, (p / width) as f32 + 0.5)))
            .collect();
        Mask { height, width, bits }
    }
}

fn rotate(dx: f32, dy: f32, angle: f32) -> (f32, f32) {
    let (s, c) = angle.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

fn sample_shape(family: ShapeFamily, size: usize, range: (f32, f32), rng: &mut ChaCha8Rng) -> ShapeParams {
    let n = size as f32;
    let r = rng.random_range(range.0..=range.1) * n;
    let margin = 1.25 * r;
    let cx = rng.random_range(margin..=(n - margin).max(margin));
    let cy = rng.random_range(margin..=(n - margin).max(margin));
    let angle = rng.random_range(0.0..PI);
    match family {
        ShapeFamily::Ellipse => ShapeParams::Ellipse { cx, cy, rx: r, ry: r * rng.random_range(0.55..=1.0), angle },
        ShapeFamily::Rectangle => {
            ShapeParams::Rectangle { cx, cy, half_w: r * 0.9, half_h: r * rng.random_range(0.5..=0.9), angle }
        }
        ShapeFamily::Blob => ShapeParams::Blob {
            cx,
            cy,
            radius: r,
            harmonics: std::array::from_fn(|_| (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI))),
        },
    }
}

/// Smooth noise: a coarse Gaussian grid bilinearly interpolated to full size.
fn speckle_field(size: usize, grain: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let cells = size.div_ceil(grain) + 1;
    let grid: Vec<f32> = (0..cells * cells).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f32 / grain as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / grain as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |r: usize, c: usize| grid[r * cells + c];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn render(style: &DomainStyle, size: usize, shape: &ShapeParams, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let mask = shape.rasterize(size, size);
    let look = style.appearances[rng.random_range(0..style.appearances.len())];
    let dir = rng.random_range(0.0..2.0 * PI);
    let (s, c) = dir.sin_cos();
    let t = &look.texture;
    let speckle = if t.speckle > 0.0 { speckle_field(size, t.grain, rng) } else { vec![0.0; size * size] };
    let n = size as f32;
    let pixels = (0..size * size)
        .map(|p| {
            let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
            let ramp = ((x - n / 2.0) * c + (y - n / 2.0) * s) / n;
            let clean = look.background + t.gradient * ramp + look.contrast * f32::from(mask.bits[p]);
            let noise: f32 = StandardNormal.sample(rng);
            let mut v = clean * (1.0 + t.speckle * speckle[p]) + t.additive * noise;
            if look.interior_noise > 0.0 && mask.bits[p] == 1 {
                let extra: f32 = StandardNormal.sample(rng);
                v += look.interior_noise * extra;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    (Image { height: size, width: size, pixels }, mask)
}

/// A generated domain with the analytic shape behind every mask.
pub struct SyntheticDomain {
    pub dataset: DomainDataset,
    pub shapes: Vec<ShapeParams>,
}

pub fn gen_synthetic_detailed(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticDomain>> {
    spec.validate()?;
    let size = spec.image_size;
    spec.domains
        .iter()
        .enumerate()
        .map(|(d, style)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100_0193).wrapping_add(d as u64 + 1));
            let mut samples = Vec::with_capacity(style.samples);
            let mut shapes = Vec::with_capacity(style.samples);
            for k in 0..style.samples {
                let shape = sample_shape(style.shape, size, style.size_range, &mut rng);
                let (image, mask) = render(style, size, &shape, &mut rng);
                samples.push(Sample::new(format!("{}_{k:04}", style.name), image, Some(mask), style.role.domain_id())?);
                shapes.push(shape);
            }
            Ok(SyntheticDomain { dataset: DomainDataset::new(style.name.clone(), style.role, samples)?, shapes })
        })
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainDataset>> {
    Ok(gen_synthetic_detailed(spec, seed)?.into_iter().map(|d| d.dataset).collect())
}

/// Writes a domain in the paired-mask-files layout (`images/`, `masks/`,
/// 8-bit PNG, masks stored as 0/255).
pub fn write_domain(ds: &DomainDataset, root: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    for s in &ds.samples {
        let (w, h) = (s.image.width as u32, s.image.height as u32);
        let px = s.image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let path = img_dir.join(format!("{}.png", s.sample_id));
        image::GrayImage::from_raw(w, h, px)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })?;
        if let Some(m) = &s.mask {
            let path = mask_dir.join(format!("{}.png", s.sample_id));
            image::GrayImage::from_raw(w, h, m.bits.iter().map(|&b| b * 255).collect())
                .expect("buffer matches dimensions")
                .save(&path)
                .map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })?;
        }
    }
    Ok(())
}
