//! Frame preprocessing: square center crop, center zoom, bilinear resize and
//! ImageNet normalization.

use image::RgbImage;

use crate::error::{Error, Result};

pub const CROP_SIZE: u32 = 300;
pub const DEFAULT_IMAGE_SIZE: usize = 256;
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Square planar RGB image with values in `[0, 1]`, channel-major (`3 × size × size`).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitImage {
    pub size: usize,
    pub data: Vec<f32>,
}

impl UnitImage {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Self {
            size,
            data: vec![value; 3 * size * size],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.size + y) * self.size + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Bilinear sample of a `w × h` plane at continuous pixel coordinates.
/// Coordinates are clamped into `[lo, hi]` along each axis (edge replication).
#[inline]
pub(crate) fn sample_clamped(
    plane: &[f32],
    w: usize,
    x: f64,
    y: f64,
    x_lim: (f64, f64),
    y_lim: (f64, f64),
) -> f32 {
    let x = x.clamp(x_lim.0, x_lim.1);
    let y = y.clamp(y_lim.0, y_lim.1);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let p = |xx: usize, yy: usize| plane[yy * w + xx];
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear sample treating everything outside the `n × n` plane as zero.
#[inline]
pub(crate) fn sample_zero_fill(plane: &[f32], n: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let p = |xx: i64, yy: i64| {
        if xx < 0 || yy < 0 || xx >= n as i64 || yy >= n as i64 {
            0.0
        } else {
            plane[yy as usize * n + xx as usize]
        }
    };
    let top = p(x0, y0) * (1.0 - fx) + p(x0 + 1, y0) * fx;
    let bottom = p(x0, y0 + 1) * (1.0 - fx) + p(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Center crop to 300×300, zoom toward the center by `zoom`, resize to `size`.
/// Output is in `[0, 1]`, before ImageNet normalization.
pub fn preprocess_unit(img: &RgbImage, zoom: f64, size: usize) -> Result<UnitImage> {
    let (w, h) = img.dimensions();
    if w < CROP_SIZE || h < CROP_SIZE {
        return Err(Error::data(format!(
            "image is {w}x{h}, smaller than the {CROP_SIZE}x{CROP_SIZE} crop"
        )));
    }
    if !(zoom.is_finite() && zoom >= 1.0) {
        return Err(Error::config("zoom", format!("must be >= 1, got {zoom}")));
    }
    if size == 0 {
        return Err(Error::config("image_size", "must be positive"));
    }
    let crop_x = ((w - CROP_SIZE) / 2) as f64;
    let crop_y = ((h - CROP_SIZE) / 2) as f64;
    let side = CROP_SIZE as f64 / zoom;
    let origin = (CROP_SIZE as f64 - side) / 2.0;
    let scale = side / size as f64;

    let (wu, hu) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut planes = vec![vec![0f32; wu * hu]; 3];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c][i] = px[c] as f32 / 255.0;
        }
    }
    let x_lim = (crop_x, crop_x + CROP_SIZE as f64 - 1.0);
    let y_lim = (crop_y, crop_y + CROP_SIZE as f64 - 1.0);

    let mut out = UnitImage::zeros(size);
    for oy in 0..size {
        let sy = crop_y + origin + (oy as f64 + 0.5) * scale - 0.5;
        for ox in 0..size {
            let sx = crop_x + origin + (ox as f64 + 0.5) * scale - 0.5;
            for (c, plane) in planes.iter().enumerate() {
                let i = out.index(c, oy, ox);
                out.data[i] = sample_clamped(plane, wu, sx, sy, x_lim, y_lim);
            }
        }
    }
    Ok(out)
}

/// Per-channel `(x − mean) / std` with ImageNet constants.
pub fn imagenet_normalize(img: &UnitImage) -> Vec<f32> {
    let n = img.size * img.size;
    let mut out = img.data.clone();
    for c in 0..3 {
        for v in &mut out[c * n..(c + 1) * n] {
            *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

/// Full preprocessing: `3 × size × size`, normalized.
pub fn preprocess_image(img: &RgbImage, zoom: f64, size: usize) -> Result<Vec<f32>> {
    Ok(imagenet_normalize(&preprocess_unit(img, zoom, size)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn uniform_gray_is_constant_per_channel() {
        let img = RgbImage::from_pixel(320, 310, Rgb([128, 128, 128]));
        let out = preprocess_image(&img, 1.0, 256).unwrap();
        assert_eq!(out.len(), 3 * 256 * 256);
        for c in 0..3 {
            let expected = (128.0f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            let plane = &out[c * 256 * 256..(c + 1) * 256 * 256];
            assert!(plane.iter().all(|v| (v - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn undersized_image_rejected() {
        let img = RgbImage::new(299, 400);
        assert!(matches!(
            preprocess_unit(&img, 1.0, 256),
            Err(Error::Data(_))
        ));
    }

    // Independent oracle: explicit four-neighbour interpolation with
    // half-pixel centers and edge clamping.
    fn oracle(img: &RgbImage, c: usize, ox: usize, oy: usize, out: usize) -> f32 {
        let scale = 300.0 / out as f64;
        let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, 299.0);
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, 299.0);
        let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(299), (y0 + 1).min(299));
        let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
        let p = |x: u32, y: u32| img.get_pixel(x, y)[c] as f64 / 255.0;
        let v = (1.0 - ay) * ((1.0 - ax) * p(x0, y0) + ax * p(x1, y0))
            + ay * ((1.0 - ax) * p(x0, y1) + ax * p(x1, y1));
        v as f32
    }

    #[test]
    fn resize_matches_bilinear_oracle() {
        let img = RgbImage::from_fn(300, 300, |x, y| {
            Rgb([
                ((x * 7 + y * 3) % 256) as u8,
                ((x * x + y) % 256) as u8,
                ((x ^ y) % 256) as u8,
            ])
        });
        let out = preprocess_unit(&img, 1.0, 256).unwrap();
        for &(ox, oy) in &[(0, 0), (255, 0), (0, 255), (255, 255), (17, 200), (128, 128)] {
            for c in 0..3 {
                let got = out.get(c, oy, ox);
                let want = oracle(&img, c, ox, oy, 256);
                assert!((got - want).abs() < 1e-5, "({ox},{oy},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn zoom_keeps_center_and_drops_border() {
        // Black image, white 20×20 marker at the center, red 10-pixel frame.
        let img = RgbImage::from_fn(300, 300, |x, y| {
            if x < 10 || y < 10 || x >= 290 || y >= 290 {
                Rgb([255, 0, 0])
            } else if (140..160).contains(&x) && (140..160).contains(&y) {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        });
        let out = preprocess_unit(&img, 1.5, 64).unwrap();
        // No red border survives.
        let red = out.channel(0);
        let green = out.channel(1);
        for (r, g) in red.iter().zip(green) {
            assert!(r - g < 0.05);
        }
        // The marker centroid stays at the image center.
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                let v = out.get(1, y, x) as f64;
                sx += v * x as f64;
                sy += v * y as f64;
                sw += v;
            }
        }
        assert!(sw > 0.0);
        assert!((sx / sw - 31.5).abs() < 0.05 && (sy / sw - 31.5).abs() < 0.05);
    }

    #[test]
    fn preprocessing_is_bit_identical() {
        let img = RgbImage::from_fn(333, 301, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 9]));
        let a = preprocess_image(&img, 1.2, 64).unwrap();
        let b = preprocess_image(&img, 1.2, 64).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
