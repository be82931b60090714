//! Directory ingestion for the supported dataset layouts.
//!
//! * paired mask files: `<root>/images/*` and `<root>/masks/*`, paired by file
//!   stem. Extra masks named `<stem>_<k>.<ext>` (k = 1, 2, ...) are merged into
//!   the primary mask when [`LoadOptions::merge_extra_masks`] is set; otherwise
//!   images with extra masks are skipped.
//! * xml contours: `<root>/images/*` and `<root>/annotations/*.xml`; the
//!   element names and point encoding are described by [`XmlSchema`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::{apply_exclusions, crop_dark_border, resize_pair, CropBox};
use super::raster::{rasterize_contours, Polygon};
use super::{DomainDataset, Image, Mask, Role, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayoutDescriptor {
    PairedMaskFiles,
    XmlContours(XmlSchema),
}

/// How polygon point lists are encoded inside an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "kebab-case")]
pub enum PointFormat {
    /// Element text is JSON: an array of objects each holding an array of
    /// `{x, y}` points under `points_key` (the DDTI convention).
    Json { points_key: String, x_key: String, y_key: String },
    /// Each polygon element has point children carrying coordinate attributes.
    Children { point_element: String, x_attr: String, y_attr: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XmlSchema {
    /// Element grouping the polygons of one image; `None` means the whole file
    /// annotates the image sharing its stem.
    pub group_element: Option<String>,
    /// Child of the group holding the image reference.
    pub image_ref_element: Option<String>,
    /// Builds the image stem from `{stem}` (annotation file) and `{image}`
    /// (reference text).
    pub image_key_template: String,
    pub polygon_element: String,
    pub points: PointFormat,
}

impl XmlSchema {
    /// Layout of the DDTI thyroid dataset: `<mark><image>k</image><svg>[json]</svg></mark>`
    /// inside `<case>`, images named `<case>_<k>`.
    pub fn ddti() -> Self {
        Self {
            group_element: Some("mark".into()),
            image_ref_element: Some("image".into()),
            image_key_template: "{stem}_{image}".into(),
            polygon_element: "svg".into(),
            points: PointFormat::Json { points_key: "points".into(), x_key: "x".into(), y_key: "y".into() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub threshold: f32,
    pub margin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Working resolution `(height, width)`; `None` keeps native size.
    pub resolution: Option<(usize, usize)>,
    pub crop: Option<CropParams>,
    /// Sidecar file of `sample_id x0 y0 x1 y1` rectangles to black out.
    pub exclusions: Option<PathBuf>,
    pub merge_extra_masks: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { resolution: Some((256, 256)), crop: None, exclusions: None, merge_extra_masks: true }
    }
}

/// Parses the exclusion sidecar format, one `sample_id x0 y0 x1 y1` per line.
/// Blank lines and `#` comments are ignored.
pub fn parse_exclusions(text: &str, path: &Path) -> Result<HashMap<String, Vec<CropBox>>> {
    let mut out: HashMap<String, Vec<CropBox>> = HashMap::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: &str| Error::Csv { path: path.to_path_buf(), row: row + 1, reason: reason.into() };
        if parts.len() != 5 {
            return Err(bad("expected `sample_id x0 y0 x1 y1`"));
        }
        let nums: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-integer coordinate"))?;
        if nums[0] > nums[2] || nums[1] > nums[3] {
            return Err(bad("inverted rectangle"));
        }
        out.entry(parts[0].to_string())
            .or_default()
            .push(CropBox { x0: nums[0], y0: nums[1], x1: nums[2], y1: nums[3] });
    }
    Ok(out)
}

/// Loads a grayscale image in `[0, 1]`; colour channels are averaged.
pub(crate) fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| ((p[0] + p[1] + p[2]) / 3.0).clamp(0.0, 1.0)).collect();
    Image::new(h as usize, w as usize, pixels)
}

/// Loads a mask; any nonzero pixel is foreground.
pub(crate) fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Mask::new(h as usize, w as usize, luma.pixels().map(|p| u8::from(p[0] > 0)).collect())
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn load_domain(
    root: &Path,
    layout: &LayoutDescriptor,
    role: Role,
    options: &LoadOptions,
) -> Result<DomainDataset> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} does not exist", root.display()),
        )));
    }
    let images = list_images(&root.join("images"))?;
    let exclusions = match &options.exclusions {
        Some(p) => parse_exclusions(&fs::read_to_string(p)?, p)?,
        None => HashMap::new(),
    };
    let masks: BTreeMap<String, Option<Mask>> = match layout {
        LayoutDescriptor::PairedMaskFiles => paired_masks(root, &images, options.merge_extra_masks)?,
        LayoutDescriptor::XmlContours(schema) => xml_masks(root, &images, schema)?,
    };

    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let mask = match masks.get(stem) {
            Some(None) => continue, // excluded (extra masks without merging)
            Some(Some(m)) => Some(m.clone()),
            None => None,
        };
        if mask.is_none() {
            if let Role::Source(_) = role {
                return Err(Error::MissingMask(stem.clone()));
            }
        }
        let mut image = read_image(path)?;
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::Shape(format!(
                    "{}: image {}x{} but mask {}x{}",
                    path.display(),
                    image.height,
                    image.width,
                    m.height,
                    m.width
                )));
            }
        }
        if let Some(rects) = exclusions.get(stem) {
            apply_exclusions(&mut image, rects);
        }
        let (image, mask) = preprocess(image, mask, options);
        samples.push(Sample::new(stem.clone(), image, mask, role.domain_id())?);
    }
    let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("domain").to_string();
    DomainDataset::new(name, role, samples)
}

fn preprocess(image: Image, mask: Option<Mask>, options: &LoadOptions) -> (Image, Option<Mask>) {
    let (image, mask) = match options.crop {
        Some(c) => {
            let (img, bx) = crop_dark_border(&image, c.threshold, c.margin);
            (img, mask.map(|m| bx.crop_mask(&m)))
        }
        None => (image, mask),
    };
    match options.resolution {
        Some((h, w)) => resize_pair(&image, mask.as_ref(), h, w),
        None => (image, mask),
    }
}

/// `Some(mask)` for paired images, `None` for images excluded because of
/// unmerged extra masks. Images absent from the map have no mask.
fn paired_masks(
    root: &Path,
    images: &BTreeMap<String, PathBuf>,
    merge_extra: bool,
) -> Result<BTreeMap<String, Option<Mask>>> {
    let mask_files = list_images(&root.join("masks"))?;
    let mut out = BTreeMap::new();
    for stem in images.keys() {
        let Some(primary) = mask_files.get(stem) else { continue };
        let mut mask = read_mask(primary)?;
        let mut k = 1;
        let mut extras = 0;
        while let Some(extra) = mask_files.get(&format!("{stem}_{k}")) {
            if merge_extra {
                mask.union_with(&read_mask(extra)?).map_err(|_| {
                    Error::Shape(format!("{}: extra mask size differs from primary", extra.display()))
                })?;
            }
            extras += 1;
            k += 1;
        }
        out.insert(stem.clone(), if extras > 0 && !merge_extra { None } else { Some(mask) });
    }
    Ok(out)
}

fn xml_masks(
    root: &Path,
    images: &BTreeMap<String, PathBuf>,
    schema: &XmlSchema,
) -> Result<BTreeMap<String, Option<Mask>>> {
    let dir = root.join("annotations");
    let mut polys: BTreeMap<String, Vec<Polygon>> = BTreeMap::new();
    if dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
            .collect();
        files.sort();
        for file in files {
            for (key, p) in parse_annotation(&file, schema)? {
                polys.entry(key).or_default().extend(p);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (key, p) in polys {
        let Some(path) = images.get(&key) else { continue };
        let (w, h) = image::image_dimensions(path)
            .map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })?;
        out.insert(key, Some(rasterize_contours(&p, h as usize, w as usize)?));
    }
    Ok(out)
}

/// Polygons per image stem from one annotation file.
pub(crate) fn parse_annotation(path: &Path, schema: &XmlSchema) -> Result<Vec<(String, Vec<Polygon>)>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Annotation { path: path.to_path_buf(), reason };
    let doc = roxmltree::Document::parse(&text).map_err(|e| bad(e.to_string()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();

    let groups: Vec<roxmltree::Node> = match &schema.group_element {
        Some(g) => doc.descendants().filter(|n| n.has_tag_name(g.as_str())).collect(),
        None => vec![doc.root_element()],
    };
    let mut out = Vec::new();
    for group in groups {
        let image_ref = match &schema.image_ref_element {
            Some(r) => group
                .descendants()
                .find(|n| n.has_tag_name(r.as_str()))
                .and_then(|n| n.text())
                .map(|t| t.trim().to_string())
                .ok_or_else(|| bad(format!("group without <{r}>")))?,
            None => String::new(),
        };
        let key = schema.image_key_template.replace("{stem}", &stem).replace("{image}", &image_ref);
        let mut polys = Vec::new();
        for node in group.descendants().filter(|n| n.has_tag_name(schema.polygon_element.as_str())) {
            match &schema.points {
                PointFormat::Json { points_key, x_key, y_key } => {
                    let body = node.text().unwrap_or("").trim();
                    if body.is_empty() {
                        continue;
                    }
                    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| bad(e.to_string()))?;
                    let shapes = value.as_array().cloned().unwrap_or_else(|| vec![value.clone()]);
                    for shape in shapes {
                        let pts = shape
                            .get(points_key)
                            .and_then(|p| p.as_array())
                            .ok_or_else(|| bad(format!("polygon without `{points_key}`")))?;
                        let poly = pts
                            .iter()
                            .map(|p| {
                                let x = p.get(x_key).and_then(|v| v.as_f64());
                                let y = p.get(y_key).and_then(|v| v.as_f64());
                                x.zip(y).ok_or_else(|| bad("point without numeric coordinates".into()))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        polys.push(poly);
                    }
                }
                PointFormat::Children { point_element, x_attr, y_attr } => {
                    let poly = node
                        .children()
                        .filter(|c| c.has_tag_name(point_element.as_str()))
                        .map(|c| {
                            let x = c.attribute(x_attr.as_str()).and_then(|v| v.parse::<f64>().ok());
                            let y = c.attribute(y_attr.as_str()).and_then(|v| v.parse::<f64>().ok());
                            x.zip(y).ok_or_else(|| bad("point without numeric coordinates".into()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    polys.push(poly);
                }
            }
        }
        out.push((key, polys));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exclusions_parse_and_reject_garbage() {
        let p = Path::new("x.txt");
        let m = parse_exclusions("# header\na 1 2 3 4\n\na 0 0 0 0\nb 5 5 6 6\n", p).unwrap();
        assert_eq!(m["a"].len(), 2);
        assert_eq!(m["b"][0], CropBox { x0: 5, y0: 5, x1: 6, y1: 6 });
        assert!(matches!(parse_exclusions("a 1 2 3\n", p), Err(Error::Csv { row: 1, .. })));
        assert!(parse_exclusions("a 4 2 3 9\n", p).is_err());
    }
}
