use serde::{Deserialize, Serialize};

use super::{Image, Mask};

/// Inclusive pixel rectangle `(x0, y0)`–`(x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn full(image: &Image) -> Self {
        Self { x0: 0, y0: 0, x1: image.width - 1, y1: image.height - 1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn crop_image(&self, image: &Image) -> Image {
        let mut pixels = Vec::with_capacity(self.width() * self.height());
        for r in self.y0..=self.y1 {
            pixels.extend_from_slice(&image.pixels[r * image.width + self.x0..=r * image.width + self.x1]);
        }
        Image { height: self.height(), width: self.width(), pixels }
    }

    pub fn crop_mask(&self, mask: &Mask) -> Mask {
        let mut bits = Vec::with_capacity(self.width() * self.height());
        for r in self.y0..=self.y1 {
            bits.extend_from_slice(&mask.bits[r * mask.width + self.x0..=r * mask.width + self.x1]);
        }
        Mask { height: self.height(), width: self.width(), bits }
    }
}

/// Crops to the bounding box of pixels brighter than `threshold`, grown by
/// `margin` and clipped to the frame. An image with no such pixel is
/// returned whole.
pub fn crop_dark_border(image: &Image, threshold: f32, margin: usize) -> (Image, CropBox) {
    let mut bbox: Option<CropBox> = None;
    for r in 0..image.height {
        for c in 0..image.width {
            if image.get(r, c) > threshold {
                let b = bbox.get_or_insert(CropBox { x0: c, y0: r, x1: c, y1: r });
                b.x0 = b.x0.min(c);
                b.x1 = b.x1.max(c);
                b.y0 = b.y0.min(r);
                b.y1 = b.y1.max(r);
            }
        }
    }
    let Some(b) = bbox else {
        return (image.clone(), CropBox::full(image));
    };
    let b = CropBox {
        x0: b.x0.saturating_sub(margin),
        y0: b.y0.saturating_sub(margin),
        x1: (b.x1 + margin).min(image.width - 1),
        y1: (b.y1 + margin).min(image.height - 1),
    };
    (b.crop_image(image), b)
}

/// Blacks out the given inclusive rectangles (clipped to the frame).
pub fn apply_exclusions(image: &mut Image, rects: &[CropBox]) {
    for r in rects {
        if r.x0 >= image.width || r.y0 >= image.height {
            continue;
        }
        for y in r.y0..=r.y1.min(image.height - 1) {
            for x in r.x0..=r.x1.min(image.width - 1) {
                image.pixels[y * image.width + x] = 0.0;
            }
        }
    }
}

/// Bilinear resampling of the image and nearest-neighbour resampling of the
/// mask, both with half-pixel centres.
pub fn resize_pair(image: &Image, mask: Option<&Mask>, target_h: usize, target_w: usize) -> (Image, Option<Mask>) {
    assert!(target_h > 0 && target_w > 0, "target size must be positive");
    let image = if (image.height, image.width) == (target_h, target_w) {
        image.clone()
    } else {
        bilinear(image, target_h, target_w)
    };
    let mask = mask.map(|m| {
        if (m.height, m.width) == (target_h, target_w) {
            return m.clone();
        }
        let rows: Vec<usize> = (0..target_h).map(|o| nearest(o, m.height, target_h)).collect();
        let cols: Vec<usize> = (0..target_w).map(|o| nearest(o, m.width, target_w)).collect();
        let mut bits = Vec::with_capacity(target_h * target_w);
        for &r in &rows {
            for &c in &cols {
                // Re-binarize at 0.5 so any interpolating mask path stays {0, 1}.
                bits.push(u8::from(m.get(r, c) as f32 >= 0.5));
            }
        }
        Mask { height: target_h, width: target_w, bits }
    });
    (image, mask)
}

fn nearest(o: usize, n_in: usize, n_out: usize) -> usize {
    (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn bilinear(image: &Image, h: usize, w: usize) -> Image {
    let ty = taps(image.height, h);
    let tx = taps(image.width, w);
    let mut pixels = Vec::with_capacity(h * w);
    for &(y0, y1, ly) in &ty {
        for &(x0, x1, lx) in &tx {
            let top = image.get(y0, x0) * (1.0 - lx) + image.get(y0, x1) * lx;
            let bot = image.get(y1, x0) * (1.0 - lx) + image.get(y1, x1) * lx;
            pixels.push((top * (1.0 - ly) + bot * ly).clamp(0.0, 1.0));
        }
    }
    Image { height: h, width: w, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch_image() -> Image {
        let mut img = Image::filled(20, 20, 0.0);
        for r in 5..15 {
            for c in 5..15 {
                img.pixels[r * 20 + c] = 0.8;
            }
        }
        img
    }

    #[test]
    fn crop_finds_bright_patch() {
        let img = patch_image();
        let (out, bx) = crop_dark_border(&img, 0.1, 0);
        // exhaustive scan oracle
        let bright: Vec<(usize, usize)> =
            (0..20).flat_map(|r| (0..20).map(move |c| (r, c))).filter(|&(r, c)| img.get(r, c) > 0.1).collect();
        let want = CropBox {
            x0: bright.iter().map(|p| p.1).min().unwrap(),
            y0: bright.iter().map(|p| p.0).min().unwrap(),
            x1: bright.iter().map(|p| p.1).max().unwrap(),
            y1: bright.iter().map(|p| p.0).max().unwrap(),
        };
        assert_eq!(bx, want);
        assert_eq!(bx, CropBox { x0: 5, y0: 5, x1: 14, y1: 14 });
        assert_eq!((out.height, out.width), (10, 10));
    }

    #[test]
    fn crop_margin_is_clipped() {
        let (_, bx) = crop_dark_border(&patch_image(), 0.1, 7);
        assert_eq!(bx, CropBox { x0: 0, y0: 0, x1: 19, y1: 19 });
    }

    #[test]
    fn crop_of_bright_or_dark_image_is_full_frame() {
        let bright = Image::filled(6, 9, 1.0);
        assert_eq!(crop_dark_border(&bright, 0.5, 0), (bright.clone(), CropBox::full(&bright)));
        let dark = Image::filled(6, 9, 0.0);
        assert_eq!(crop_dark_border(&dark, 0.5, 2), (dark.clone(), CropBox::full(&dark)));
    }

    #[test]
    fn exclusions_black_out_rectangles() {
        let mut img = Image::filled(4, 4, 1.0);
        apply_exclusions(&mut img, &[CropBox { x0: 1, y0: 0, x1: 2, y1: 1 }, CropBox { x0: 3, y0: 3, x1: 9, y1: 9 }]);
        assert_eq!(img.pixels.iter().filter(|&&v| v == 0.0).count(), 5);
    }

    #[test]
    fn identity_resize_is_bit_identical() {
        let m = Mask::new(3, 2, vec![0, 1, 1, 0, 1, 1]).unwrap();
        let img = Image::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (i2, m2) = resize_pair(&img, Some(&m), 3, 2);
        assert_eq!(i2, img);
        assert_eq!(m2.unwrap(), m);
    }

    #[test]
    fn upscaled_masks_stay_binary() {
        let ones = Mask::new(4, 4, vec![1; 16]).unwrap();
        let (_, m) = resize_pair(&Image::filled(4, 4, 0.5), Some(&ones), 8, 8);
        assert!(m.unwrap().bits.iter().all(|&b| b == 1));

        let checker = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let (_, m) = resize_pair(&Image::filled(2, 2, 0.5), Some(&checker), 4, 4);
        let m = m.unwrap();
        assert!(m.bits.iter().all(|&b| b <= 1));
        assert_eq!(m.area(), 8);
    }

    proptest! {
        #[test]
        fn crop_is_idempotent(
            h in 1usize..24, w in 1usize..24,
            pix in prop::collection::vec(0.0f32..1.0, 576),
            threshold in 0.0f32..0.99,
            margin in 0usize..4,
        ) {
            let img = Image::new(h, w, pix[..h * w].to_vec()).unwrap();
            let (once, _) = crop_dark_border(&img, threshold, margin);
            let (twice, bx) = crop_dark_border(&once, threshold, margin);
            prop_assert_eq!(bx, CropBox::full(&once));
            prop_assert_eq!(twice, once);
        }
    }
}
