//! Prediction overlays: part boxes and keypoints drawn on an upscaled copy.

use adapart::geometry::BoundingBox;
use image::{Rgb, RgbImage};

/// Box colours by part index: red, green, blue, then extras.
pub const PART_COLORS: [[u8; 3]; 5] = [[230, 30, 30], [30, 200, 60], [40, 90, 240], [240, 200, 20], [200, 40, 220]];
const KEYPOINT_COLOR: [u8; 3] = [255, 255, 0];

/// Nearest-neighbour upscale of `[3, H, W]` planar data in [0, 1].
pub fn upscale(planar: &[f32], h: usize, w: usize, factor: usize) -> RgbImage {
    let n = h * w;
    RgbImage::from_fn((w * factor) as u32, (h * factor) as u32, |x, y| {
        let i = (y as usize / factor) * w + x as usize / factor;
        let px = |c: usize| (planar[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Outline of a normalized box, `thickness` pixels wide, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BoundingBox, color: [u8; 3], thickness: i64) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (b.x * w).round() as i64;
    let y0 = (b.y * h).round() as i64;
    let x1 = ((b.x + b.w) * w).round() as i64;
    let y1 = ((b.y + b.h) * h).round() as i64;
    for t in 0..thickness {
        for x in x0..=x1 {
            put(img, x, y0 + t, color);
            put(img, x, y1 - t, color);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, color);
            put(img, x1 - t, y, color);
        }
    }
}

pub fn draw_keypoint(img: &mut RgbImage, p: [f64; 2]) {
    let cx = (p[0] * img.width() as f64).round() as i64;
    let cy = (p[1] * img.height() as f64).round() as i64;
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, cx + dx, cy + dy, KEYPOINT_COLOR);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_outline_lands_on_expected_pixels() {
        let mut img = RgbImage::new(100, 100);
        draw_box(&mut img, &BoundingBox::new(0.5, 0.2, 0.1, 0.3), PART_COLORS[0], 1);
        assert_eq!(img.get_pixel(10, 30).0, PART_COLORS[0]);
        assert_eq!(img.get_pixel(60, 50).0, PART_COLORS[0]);
        assert_eq!(img.get_pixel(30, 40).0, [0, 0, 0]);
    }

    #[test]
    fn out_of_image_boxes_are_clipped() {
        let mut img = RgbImage::new(10, 10);
        draw_box(&mut img, &BoundingBox::new(2.0, 2.0, -0.5, -0.5), PART_COLORS[1], 2);
        draw_keypoint(&mut img, [-1.0, 5.0]);
    }

    #[test]
    fn upscale_repeats_pixels() {
        let planar = [1.0f32, 0.0, 0.0, 0.0, 0.5, 0.0];
        let img = upscale(&planar, 1, 2, 3);
        assert_eq!((img.width(), img.height()), (6, 3));
        assert_eq!(img.get_pixel(2, 2).0, [255, 0, 128]);
        assert_eq!(img.get_pixel(3, 0).0, [0, 0, 0]);
    }
}
