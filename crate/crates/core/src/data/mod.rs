//! Domain datasets: ingestion, preprocessing and deterministic partitioning.

mod load;
mod preprocess;
mod raster;
mod split;

pub use load::{load_domain, parse_exclusions, CropParams, LayoutDescriptor, LoadOptions, PointFormat, XmlSchema};
pub use preprocess::{apply_exclusions, crop_dark_border, resize_pair, CropBox};
pub use raster::{point_in_polygon, rasterize_contours, trace_contours, Polygon};
pub use split::{partition_labels, split_target, SplitSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Binary mask, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask union of different sizes".into()));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }
}

/// Which side of the transfer a dataset plays. Sources are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Target,
    Source(usize),
}

impl Role {
    /// 0 for the target, `i` for source `i`.
    pub fn domain_id(self) -> usize {
        match self {
            Role::Target => 0,
            Role::Source(i) => i,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub domain_id: usize,
    /// When false the mask is withheld from training even if present.
    pub labeled: bool,
}

impl Sample {
    pub fn new(sample_id: impl Into<String>, image: Image, mask: Option<Mask>, domain_id: usize) -> Result<Self> {
        let sample_id = sample_id.into();
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::Shape(format!(
                    "sample {sample_id}: image {}x{} with mask {}x{}",
                    image.height, image.width, m.height, m.width
                )));
            }
        }
        let labeled = mask.is_some();
        Ok(Self { sample_id, image, mask, domain_id, labeled })
    }

    /// The mask as seen by training: hidden when the sample is unlabeled.
    pub fn training_mask(&self) -> Option<&Mask> {
        if self.labeled {
            self.mask.as_ref()
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub role: Role,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    /// Builds a dataset, sorting samples by id and checking role invariants.
    pub fn new(name: impl Into<String>, role: Role, mut samples: Vec<Sample>) -> Result<Self> {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let ds = Self { name: name.into(), role, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.samples.windows(2) {
            if w[0].sample_id == w[1].sample_id {
                return Err(Error::Data(format!("duplicate sample id {}", w[0].sample_id)));
            }
        }
        if let Role::Source(_) = self.role {
            if let Some(s) = self.samples.iter().find(|s| !s.labeled || s.mask.is_none()) {
                return Err(Error::MissingMask(s.sample_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.labeled).count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.len() - self.n_labeled()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples
            .binary_search_by(|s| s.sample_id.as_str().cmp(sample_id))
            .ok()
            .map(|i| &self.samples[i])
    }

    /// Subset keeping only the given ids (order follows `self`).
    pub fn subset(&self, name: impl Into<String>, keep: impl Fn(&Sample) -> bool) -> Self {
        Self {
            name: name.into(),
            role: self.role,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}
