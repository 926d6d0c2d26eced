//! Seeded, box-aware image augmentation.
//!
//! Every random draw comes from ChaCha8 (`rand_chacha`), whose output stream
//! for a given 64-bit seed and stream id is fixed by its published spec. A
//! variant of example `i` with index `v` uses key `seed_from_u64(seed)` and
//! stream `(i << 32) | v`. Floats are drawn as `(next_u64() >> 11) * 2^-53`.
//! Transcendental functions go through `libm` so results do not depend on
//! the platform math library.

use std::io::Cursor;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Annotation;
use crate::geometry::{clip_box, BBox};

/// Boxes keeping less than this fraction of their area after rotation are dropped.
pub const ROTATION_MIN_RETAINED_AREA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("mosaic inputs must share dimensions, got {0}")]
    DimensionMismatch(String),
    #[error("mosaic needs exactly 4 inputs, got {0}")]
    MosaicArity(usize),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, AugmentError> {
        if width == 0 || height == 0 {
            return Err(AugmentError::InvalidImage(format!("{width}x{height} has no pixels")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(AugmentError::InvalidImage(format!(
                "{width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, AugmentError> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, AugmentError> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = decoded.dimensions();
        Self::new(w, h, decoded.into_raw())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, AugmentError> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Bilinear sample at fractional pixel-index coordinates, `None` off-canvas.
    fn sample(&self, fx: f64, fy: f64) -> Option<[f64; 3]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
            return None;
        }
        Some(bilinear(&self.pixels, self.width, [0, 0, self.width, self.height], fx, fy))
    }
}

/// Bilinear interpolation restricted to the pixel rectangle `[x0, y0, x1, y1)`.
fn bilinear(pixels: &[u8], stride: u32, rect: [u32; 4], fx: f64, fy: f64) -> [f64; 3] {
    let [rx0, ry0, rx1, ry1] = rect;
    let fx = fx.clamp(rx0 as f64, (rx1 - 1) as f64);
    let fy = fy.clamp(ry0 as f64, (ry1 - 1) as f64);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(rx1 - 1);
    let y1 = (y0 + 1).min(ry1 - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let at = |x: u32, y: u32, c: usize| pixels[(y as usize * stride as usize + x as usize) * 3 + c] as f64;
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let top = at(x0, y0, c) + (at(x1, y0, c) - at(x0, y0, c)) * tx;
        let bottom = at(x0, y1, c) + (at(x1, y1, c) - at(x0, y1, c)) * tx;
        *slot = top + (bottom - top) * ty;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn rgb_u8(v: [f64; 3]) -> [u8; 3] {
    [to_u8(v[0]), to_u8(v[1]), to_u8(v[2])]
}

/// An image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

impl Example {
    pub fn new(image: Image, annotations: Vec<Annotation>) -> Self {
        Self { image, annotations }
    }
}

fn clip_all(anns: impl IntoIterator<Item = Annotation>, width: u32, height: u32) -> Vec<Annotation> {
    anns.into_iter()
        .filter_map(|a| {
            clip_box(&a.bbox, width as f64, height as f64).map(|bbox| Annotation {
                bbox,
                category: a.category,
            })
        })
        .collect()
}

/// Stretch to `target_w x target_h` with independent axis scales and bilinear resampling.
pub fn resize_stretch(example: &Example, target_w: u32, target_h: u32) -> Example {
    assert!(target_w > 0 && target_h > 0, "resize target must be non-empty");
    let src = &example.image;
    if (src.width, src.height) == (target_w, target_h) {
        return example.clone();
    }
    let (w, h) = (src.width as f64, src.height as f64);
    let (tw, th) = (target_w as f64, target_h as f64);

    let mut pixels = Vec::with_capacity(target_w as usize * target_h as usize * 3);
    let full = [0, 0, src.width, src.height];
    for y in 0..target_h {
        let fy = (y as f64 + 0.5) * h / th - 0.5;
        for x in 0..target_w {
            let fx = (x as f64 + 0.5) * w / tw - 0.5;
            pixels.extend_from_slice(&rgb_u8(bilinear(&src.pixels, src.width, full, fx, fy)));
        }
    }
    let image = Image::new(target_w, target_h, pixels).expect("sized above");

    let scaled = example.annotations.iter().filter_map(|a| {
        let b = &a.bbox;
        BBox::new(b.x1() * tw / w, b.y1() * th / h, b.x2() * tw / w, b.y2() * th / h)
            .ok()
            .map(|bbox| Annotation {
                bbox,
                category: a.category.clone(),
            })
    });
    let annotations = clip_all(scaled, target_w, target_h);
    Example { image, annotations }
}

/// Mirror left-right: pixel `x -> W-1-x`, box `[x1, x2] -> [W-x2, W-x1]`.
pub fn flip_horizontal(example: &Example) -> Example {
    let img = &example.image;
    let row = img.width as usize * 3;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for line in img.pixels.chunks_exact(row) {
        for px in line.chunks_exact(3).rev() {
            pixels.extend_from_slice(px);
        }
    }
    let w = img.width as f64;
    let annotations = example
        .annotations
        .iter()
        .map(|a| Annotation {
            bbox: BBox::new(w - a.bbox.x2(), a.bbox.y1(), w - a.bbox.x1(), a.bbox.y2())
                .expect("reflection preserves extent"),
            category: a.category.clone(),
        })
        .collect();
    Example {
        image: Image::new(img.width, img.height, pixels).expect("same size"),
        annotations,
    }
}

/// Rotate a point about `center` by the matrix `[[cos, -sin], [sin, cos]]`.
fn rotate_point(p: (f64, f64), center: (f64, f64), cos: f64, sin: f64) -> (f64, f64) {
    let (dx, dy) = (p.0 - center.0, p.1 - center.1);
    (center.0 + dx * cos - dy * sin, center.1 + dx * sin + dy * cos)
}

/// Rotate the image about its center, keeping the canvas size and filling
/// uncovered pixels with black.
///
/// Positive angles apply `[[cos, -sin], [sin, cos]]` in pixel coordinates
/// (x right, y down). Each box becomes the axis-aligned hull of its rotated
/// corners, clipped to the canvas; boxes keeping under
/// [`ROTATION_MIN_RETAINED_AREA`] of their original area are dropped.
pub fn rotate_with_boxes(example: &Example, angle_deg: f64) -> Example {
    assert!(angle_deg.abs() <= 180.0, "rotation angle out of range: {angle_deg}");
    if angle_deg == 0.0 {
        return example.clone();
    }
    let img = &example.image;
    let theta = angle_deg.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let center = (img.width as f64 / 2.0, img.height as f64 / 2.0);

    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse rotation of the output pixel center
            let (sx, sy) = rotate_point((x as f64 + 0.5, y as f64 + 0.5), center, cos, -sin);
            let rgb = img.sample(sx - 0.5, sy - 0.5).map(rgb_u8).unwrap_or([0, 0, 0]);
            pixels.extend_from_slice(&rgb);
        }
    }

    let annotations = example
        .annotations
        .iter()
        .filter_map(|a| {
            let b = &a.bbox;
            let corners = [(b.x1(), b.y1()), (b.x2(), b.y1()), (b.x1(), b.y2()), (b.x2(), b.y2())]
                .map(|p| rotate_point(p, center, cos, sin));
            let xs = corners.map(|p| p.0);
            let ys = corners.map(|p| p.1);
            let hull = BBox::new(
                xs.iter().copied().fold(f64::INFINITY, f64::min),
                ys.iter().copied().fold(f64::INFINITY, f64::min),
                xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
            .ok()?;
            let clipped = clip_box(&hull, img.width as f64, img.height as f64)?;
            (clipped.area() >= ROTATION_MIN_RETAINED_AREA * b.area()).then(|| Annotation {
                bbox: clipped,
                category: a.category.clone(),
            })
        })
        .collect();

    Example {
        image: Image::new(img.width, img.height, pixels).expect("same size"),
        annotations,
    }
}

/// Whole-image color changes. Hue in degrees, the others as fractions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub grayscale: bool,
    pub hue_shift_deg: f64,
    pub saturation: f64,
    pub exposure: f64,
}

impl PhotometricParams {
    fn is_identity(&self) -> bool {
        !self.grayscale && self.hue_shift_deg == 0.0 && self.saturation == 0.0 && self.exposure == 0.0
    }
}

/// RGB in `[0, 255]` to `(hue degrees, saturation [0, 1], value [0, 255])`.
fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn luma(rgb: [u8; 3]) -> u8 {
    to_u8(0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64)
}

/// Grayscale (Rec. 601 luma), then hue rotation and saturation/value scaling
/// in HSV with clamping. Boxes are untouched.
pub fn photometric(image: &Image, params: &PhotometricParams) -> Image {
    if params.is_identity() {
        return image.clone();
    }
    let hsv_change = params.hue_shift_deg != 0.0 || params.saturation != 0.0 || params.exposure != 0.0;
    let mut out = image.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let mut rgb = [px[0], px[1], px[2]];
        if params.grayscale {
            let l = luma(rgb);
            rgb = [l, l, l];
        }
        if hsv_change {
            let (h, s, v) = rgb_to_hsv(rgb.map(f64::from));
            let h = (h + params.hue_shift_deg).rem_euclid(360.0);
            let s = (s * (1.0 + params.saturation)).clamp(0.0, 1.0);
            let v = (v * (1.0 + params.exposure)).clamp(0.0, 255.0);
            rgb = rgb_u8(hsv_to_rgb(h, s, v));
        }
        px.copy_from_slice(&rgb);
    }
    out
}

fn gaussian_kernel(radius: f64) -> Vec<f64> {
    let sigma = radius / 2.0;
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian blur with `sigma = radius / 2`, truncated at `3 sigma`,
/// clamped edges. Radius 0 is the identity.
pub fn gaussian_blur(image: &Image, radius: f64) -> Image {
    if radius <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(radius);
    let half = (kernel.len() / 2) as i64;
    let (w, h) = (image.width as i64, image.height as i64);
    let src: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();

    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = (x + k as i64 - half).clamp(0, w - 1);
                    acc += wt * src[((y * w + sx) * 3 + c) as usize];
                }
                horiz[((y * w + x) * 3 + c) as usize] = acc;
            }
        }
    }
    let mut pixels = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = (y + k as i64 - half).clamp(0, h - 1);
                    acc += wt * horiz[((sy * w + x) * 3 + c) as usize];
                }
                pixels[((y * w + x) * 3 + c) as usize] = to_u8(acc);
            }
        }
    }
    Image::new(image.width, image.height, pixels).expect("same size")
}

/// Transforms applied only to pixels covered by annotation boxes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BBoxLocalParams {
    pub shear_h_deg: f64,
    pub shear_v_deg: f64,
    pub exposure: f64,
    pub noise: f64,
}

/// Pixel rectangle `[x0, y0, x1, y1)` touched by a box.
pub fn box_pixel_region(b: &BBox, width: u32, height: u32) -> Option<[u32; 4]> {
    let x0 = b.x1().floor().max(0.0) as u32;
    let y0 = b.y1().floor().max(0.0) as u32;
    let x1 = (b.x2().ceil().max(0.0) as u32).min(width);
    let y1 = (b.y2().ceil().max(0.0) as u32).min(height);
    (x0 < x1 && y0 < y1).then_some([x0, y0, x1, y1])
}

fn shear_region(img: &mut Image, region: [u32; 4], shear_h_deg: f64, shear_v_deg: f64) {
    let tx = libm::tan(shear_h_deg.to_radians());
    let ty = libm::tan(shear_v_deg.to_radians());
    let det = 1.0 - tx * ty;
    let [x0, y0, x1, y1] = region;
    let cx = (x0 + x1) as f64 / 2.0 - 0.5;
    let cy = (y0 + y1) as f64 / 2.0 - 0.5;
    let src = img.pixels.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + (dx - tx * dy) / det;
            let sy = cy + (dy - ty * dx) / det;
            let rgb = bilinear(&src, img.width, region, sx, sy);
            img.put(x, y, rgb_u8(rgb));
        }
    }
}

fn scale_value_region(img: &mut Image, region: [u32; 4], exposure: f64) {
    let [x0, y0, x1, y1] = region;
    for y in y0..y1 {
        for x in x0..x1 {
            let rgb = img.get(x, y).map(f64::from);
            let v = rgb[0].max(rgb[1]).max(rgb[2]);
            if v == 0.0 {
                continue;
            }
            let ratio = (v * (1.0 + exposure)).clamp(0.0, 255.0) / v;
            img.put(x, y, rgb_u8(rgb.map(|c| c * ratio)));
        }
    }
}

fn noise_region(img: &mut Image, region: [u32; 4], fraction: f64, rng: &mut ChaCha8Rng) {
    let [x0, y0, x1, y1] = region;
    let w = (x1 - x0) as usize;
    let total = w * (y1 - y0) as usize;
    let count = ((fraction * total as f64).floor() as usize).min(total);
    let mut cells: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = i + below(rng, total - i);
        cells.swap(i, j);
        let (x, y) = (x0 + (cells[i] % w) as u32, y0 + (cells[i] / w) as u32);
        let old = img.get(x, y);
        let replacement = loop {
            let bits = rng.next_u64().to_le_bytes();
            let candidate = [bits[0], bits[1], bits[2]];
            if candidate != old {
                break candidate;
            }
        };
        img.put(x, y, replacement);
    }
}

/// Shear, value scaling and pixel noise confined to each annotation's pixel
/// region, applied box by box. Box coordinates never change and pixels
/// outside every region are untouched.
///
/// Noise replaces exactly `floor(noise * region_pixels)` distinct pixels per
/// box with uniformly random colors different from the current one; the
/// choice is driven by `noise_seed`.
pub fn bbox_local(image: &Image, annotations: &[Annotation], params: &BBoxLocalParams, noise_seed: u64) -> Image {
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for ann in annotations {
        let Some(region) = box_pixel_region(&ann.bbox, out.width, out.height) else {
            continue;
        };
        if params.shear_h_deg != 0.0 || params.shear_v_deg != 0.0 {
            shear_region(&mut out, region, params.shear_h_deg, params.shear_v_deg);
        }
        if params.exposure != 0.0 {
            scale_value_region(&mut out, region, params.exposure);
        }
        if params.noise > 0.0 {
            noise_region(&mut out, region, params.noise, &mut rng);
        }
    }
    out
}

const QUADRANTS: usize = 4;

/// Place four same-sized examples on a `2W x 2H` canvas. Slot `q` of the
/// layout `(0,0), (W,0), (0,H), (W,H)` receives `examples[order[q]]`.
pub fn mosaic_canvas(examples: &[Example], order: [usize; QUADRANTS]) -> Result<Example, AugmentError> {
    if examples.len() != QUADRANTS {
        return Err(AugmentError::MosaicArity(examples.len()));
    }
    let (w, h) = (examples[0].image.width, examples[0].image.height);
    if let Some(bad) = examples.iter().find(|e| (e.image.width, e.image.height) != (w, h)) {
        return Err(AugmentError::DimensionMismatch(format!(
            "{w}x{h} and {}x{}",
            bad.image.width, bad.image.height
        )));
    }
    let mut canvas = Image::filled(2 * w, 2 * h, [0, 0, 0])?;
    let mut annotations = Vec::new();
    for (slot, &source) in order.iter().enumerate() {
        let (ox, oy) = ((slot as u32 % 2) * w, (slot as u32 / 2) * h);
        let ex = &examples[source];
        let row = w as usize * 3;
        for y in 0..h {
            let src = &ex.image.pixels[y as usize * row..(y as usize + 1) * row];
            let dst = canvas.offset(ox, oy + y);
            canvas.pixels[dst..dst + row].copy_from_slice(src);
        }
        for a in &ex.annotations {
            annotations.push(Annotation {
                bbox: a.bbox.translate(ox as f64, oy as f64).expect("offset keeps extent"),
                category: a.category.clone(),
            });
        }
    }
    Ok(Example {
        image: canvas,
        annotations,
    })
}

/// Mosaic with a seed-shuffled quadrant order, resized to the target size.
pub fn mosaic_compose(
    examples: &[Example],
    seed: u64,
    target_w: u32,
    target_h: u32,
) -> Result<Example, AugmentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_quadrants(&mut rng);
    let canvas = mosaic_canvas(examples, order)?;
    Ok(resize_stretch(&canvas, target_w, target_h))
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

fn chance(rng: &mut ChaCha8Rng, p: f64) -> bool {
    unit(rng) < p
}

/// Unbiased integer in `[0, n)` by rejection.
fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let n = n as u64;
    let limit = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < limit {
            return (x % n) as usize;
        }
    }
}

fn shuffled_quadrants(rng: &mut ChaCha8Rng) -> [usize; QUADRANTS] {
    let mut order = [0, 1, 2, 3];
    for i in (1..QUADRANTS).rev() {
        order.swap(i, below(rng, i + 1));
    }
    order
}

/// Generator for variant `variant` of dataset example `example_index`.
pub fn variant_rng(seed: u64, example_index: usize, variant: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((example_index as u64) << 32) | variant as u64);
    rng
}

/// Augmentation recipe. [`AugmentConfig::default`] is the reference recipe
/// (three outputs per example, flips, +-15 degree rotation, 25% grayscale,
/// +-25 degree hue, +-25% saturation and exposure, blur up to 2.5 px, mosaic,
/// +-15 degree in-box shear, +-25% in-box exposure, up to 5% in-box noise,
/// stretched to 640x640).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub outputs_per_example: usize,
    pub auto_orient: bool,
    pub flip_horizontal_prob: f64,
    pub rotation_degrees: f64,
    pub grayscale_prob: f64,
    pub hue_degrees: f64,
    pub saturation_fraction: f64,
    pub exposure_fraction: f64,
    pub blur_max_px: f64,
    pub mosaic: bool,
    pub bbox_shear_horizontal_degrees: f64,
    pub bbox_shear_vertical_degrees: f64,
    pub bbox_exposure_fraction: f64,
    pub bbox_noise_max_fraction: f64,
    pub target_size: [u32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            outputs_per_example: 3,
            auto_orient: true,
            flip_horizontal_prob: 0.5,
            rotation_degrees: 15.0,
            grayscale_prob: 0.25,
            hue_degrees: 25.0,
            saturation_fraction: 0.25,
            exposure_fraction: 0.25,
            blur_max_px: 2.5,
            mosaic: true,
            bbox_shear_horizontal_degrees: 15.0,
            bbox_shear_vertical_degrees: 15.0,
            bbox_exposure_fraction: 0.25,
            bbox_noise_max_fraction: 0.05,
            target_size: [640, 640],
        }
    }
}

impl AugmentConfig {
    /// Everything off: output is the input stretched to `target_size`.
    pub fn identity(target_size: [u32; 2]) -> Self {
        Self {
            outputs_per_example: 1,
            auto_orient: false,
            flip_horizontal_prob: 0.0,
            rotation_degrees: 0.0,
            grayscale_prob: 0.0,
            hue_degrees: 0.0,
            saturation_fraction: 0.0,
            exposure_fraction: 0.0,
            blur_max_px: 0.0,
            mosaic: false,
            bbox_shear_horizontal_degrees: 0.0,
            bbox_shear_vertical_degrees: 0.0,
            bbox_exposure_fraction: 0.0,
            bbox_noise_max_fraction: 0.0,
            target_size,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AugmentError> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| AugmentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        if self.outputs_per_example < 1 {
            return bad("outputs_per_example must be at least 1".into());
        }
        for (name, p) in [
            ("flip_horizontal_prob", self.flip_horizontal_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, v, max) in [
            ("rotation_degrees", self.rotation_degrees, 180.0),
            ("hue_degrees", self.hue_degrees, 180.0),
            ("saturation_fraction", self.saturation_fraction, 1.0),
            ("exposure_fraction", self.exposure_fraction, 1.0),
            ("blur_max_px", self.blur_max_px, f64::MAX),
            ("bbox_shear_horizontal_degrees", self.bbox_shear_horizontal_degrees, 45.0),
            ("bbox_shear_vertical_degrees", self.bbox_shear_vertical_degrees, 45.0),
            ("bbox_exposure_fraction", self.bbox_exposure_fraction, 1.0),
            ("bbox_noise_max_fraction", self.bbox_noise_max_fraction, 1.0),
        ] {
            if !(0.0..=max).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, {max}]"));
            }
        }
        if self.target_size.contains(&0) {
            return bad("target_size must be positive".into());
        }
        Ok(())
    }
}

/// Random choices for one output variant, drawn in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantPlan {
    pub flip: bool,
    pub rotation_deg: f64,
    pub photometric: PhotometricParams,
    pub blur_radius: f64,
    pub bbox: BBoxLocalParams,
    pub noise_seed: u64,
    /// Quadrant order over partners `[i, i+1, i+2, i+3]` (wrapping) when mosaic is on.
    pub mosaic_order: Option<[usize; QUADRANTS]>,
}

impl VariantPlan {
    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let sym = |rng: &mut ChaCha8Rng, r: f64| uniform(rng, -r, r);
        let flip = chance(rng, cfg.flip_horizontal_prob);
        let rotation_deg = sym(rng, cfg.rotation_degrees);
        let grayscale = chance(rng, cfg.grayscale_prob);
        let hue_shift_deg = sym(rng, cfg.hue_degrees);
        let saturation = sym(rng, cfg.saturation_fraction);
        let exposure = sym(rng, cfg.exposure_fraction);
        let blur_radius = uniform(rng, 0.0, cfg.blur_max_px);
        let bbox = BBoxLocalParams {
            shear_h_deg: sym(rng, cfg.bbox_shear_horizontal_degrees),
            shear_v_deg: sym(rng, cfg.bbox_shear_vertical_degrees),
            exposure: sym(rng, cfg.bbox_exposure_fraction),
            noise: uniform(rng, 0.0, cfg.bbox_noise_max_fraction),
        };
        let noise_seed = rng.next_u64();
        let mosaic_order = cfg.mosaic.then(|| shuffled_quadrants(rng));
        Self {
            flip,
            rotation_deg,
            photometric: PhotometricParams {
                grayscale,
                hue_shift_deg,
                saturation,
                exposure,
            },
            blur_radius,
            bbox,
            noise_seed,
            mosaic_order,
        }
    }

    /// Everything except mosaic and the final resize.
    fn apply_local(&self, example: &Example) -> Example {
        let mut ex = if self.flip {
            flip_horizontal(example)
        } else {
            example.clone()
        };
        ex = rotate_with_boxes(&ex, self.rotation_deg);
        ex.image = photometric(&ex.image, &self.photometric);
        ex.image = gaussian_blur(&ex.image, self.blur_radius);
        ex.image = bbox_local(&ex.image, &ex.annotations, &self.bbox, self.noise_seed);
        ex
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedExample {
    pub source_index: usize,
    pub variant: usize,
    pub plan: VariantPlan,
    pub example: Example,
}

#[derive(Debug, Clone)]
pub struct AugmentRun {
    pub outputs: Vec<AugmentedExample>,
    pub notes: Vec<String>,
}

/// Augment a dataset: `outputs_per_example` variants per input, each ending
/// in a stretch to `target_size`.
///
/// With mosaic on, variant `v` of example `i` tiles variant `v` of examples
/// `i..i+4` (wrapping), each first stretched to half the target size, so the
/// `2W x 2H` canvas already has the target size.
pub fn augment_dataset(examples: &[Example], cfg: &AugmentConfig, seed: u64) -> Result<AugmentRun, AugmentError> {
    cfg.validate()?;
    let mut notes = Vec::new();
    if cfg.auto_orient {
        notes.push("auto-orient: no-op, raw RGB buffers carry no EXIF orientation".to_string());
    }
    let [tw, th] = cfg.target_size;
    let n = examples.len();

    let mut staged: Vec<Vec<(VariantPlan, Example)>> = Vec::with_capacity(n);
    for (i, ex) in examples.iter().enumerate() {
        let variants = (0..cfg.outputs_per_example)
            .map(|v| {
                let plan = VariantPlan::draw(cfg, &mut variant_rng(seed, i, v));
                let out = plan.apply_local(ex);
                (plan, out)
            })
            .collect();
        staged.push(variants);
    }

    let (qw, qh) = ((tw / 2).max(1), (th / 2).max(1));
    let mut outputs = Vec::with_capacity(n * cfg.outputs_per_example);
    for (i, row) in staged.iter().enumerate() {
        for (v, (plan, local)) in row.iter().enumerate() {
            let example = match plan.mosaic_order {
                Some(order) => {
                    let tiles: Vec<Example> = (0..QUADRANTS)
                        .map(|k| resize_stretch(&staged[(i + k) % n][v].1, qw, qh))
                        .collect();
                    resize_stretch(&mosaic_canvas(&tiles, order)?, tw, th)
                }
                None => resize_stretch(local, tw, th),
            };
            outputs.push(AugmentedExample {
                source_index: i,
                variant: v,
                plan: plan.clone(),
                example,
            });
        }
    }
    Ok(AugmentRun { outputs, notes })
}

/// Augment a single example (mosaic tiles it with itself).
pub fn augment_pipeline(example: &Example, cfg: &AugmentConfig, seed: u64) -> Result<Vec<Example>, AugmentError> {
    let run = augment_dataset(std::slice::from_ref(example), cfg, seed)?;
    Ok(run.outputs.into_iter().map(|o| o.example).collect())
}
