//! Detection overlays: point sets and boxes drawn onto the scene PNGs.
//!
//! Initial points are hollow rings, refined points filled discs, and the
//! converted pseudo box a rectangle outline — all in one per-class color.

use image::{Rgb, RgbImage};

use crate::eval::Detection;
use crate::geometry::{BBox, PointSet};

/// Per-class overlay palette; wraps for class indices past the palette end.
pub fn class_color(class: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 6] = [
        [255, 64, 64],
        [64, 255, 64],
        [80, 144, 255],
        [255, 224, 32],
        [255, 64, 255],
        [64, 255, 255],
    ];
    Rgb(PALETTE[class % PALETTE.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Continuous image coordinate to the pixel that contains it.
fn px(v: f64) -> i64 {
    v.floor() as i64
}

/// Hollow ring of radius 2 around the point.
pub fn draw_point_hollow(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (cx, cy) = (px(x), px(y));
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let r2 = dx * dx + dy * dy;
            if (4..=5).contains(&r2) {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

/// Filled disc of radius 1 plus the axis tips at radius 2.
pub fn draw_point_filled(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (cx, cy) = (px(x), px(y));
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            if dx * dx + dy * dy <= 4 {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

/// One-pixel rectangle outline.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (x0, y0, x1, y1) = (px(b.x0), px(b.y0), px(b.x1), px(b.y1));
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

pub fn draw_point_set_hollow(img: &mut RgbImage, points: &PointSet, color: Rgb<u8>) {
    for p in &points.pts {
        draw_point_hollow(img, p[0], p[1], color);
    }
}

pub fn draw_point_set_filled(img: &mut RgbImage, points: &PointSet, color: Rgb<u8>) {
    for p in &points.pts {
        draw_point_filled(img, p[0], p[1], color);
    }
}

/// Overlay one detection: pseudo box outline, then stage-1 hollow markers,
/// then stage-2 filled markers on top.
pub fn draw_detection(img: &mut RgbImage, det: &Detection) {
    let color = class_color(det.class);
    draw_box(img, &det.bbox, color);
    draw_point_set_hollow(img, &det.points1, color);
    draw_point_set_filled(img, &det.points, color);
}

pub fn draw_detections(img: &mut RgbImage, dets: &[Detection]) {
    for det in dets {
        draw_detection(img, det);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([0, 0, 0]))
    }

    fn lit(img: &RgbImage) -> usize {
        img.pixels().filter(|p| p.0 != [0, 0, 0]).count()
    }

    #[test]
    fn hollow_marker_leaves_its_center_unpainted() {
        let mut img = blank(16, 16);
        draw_point_hollow(&mut img, 8.5, 8.5, Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(8, 8).0, [0, 0, 0]);
        assert!(lit(&img) > 8);
    }

    #[test]
    fn filled_marker_paints_its_center() {
        let mut img = blank(16, 16);
        draw_point_filled(&mut img, 8.5, 8.5, Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(8, 8).0, [255, 0, 0]);
    }

    #[test]
    fn markers_clip_at_the_border_without_panicking() {
        let mut img = blank(8, 8);
        draw_point_hollow(&mut img, 0.0, 0.0, Rgb([255, 0, 0]));
        draw_point_filled(&mut img, 7.9, 7.9, Rgb([255, 0, 0]));
        draw_box(&mut img, &BBox::new(-3.0, -3.0, 10.0, 10.0), Rgb([255, 0, 0]));
        assert!(lit(&img) > 0);
    }

    #[test]
    fn box_outline_matches_the_box_edges() {
        let mut img = blank(32, 32);
        draw_box(&mut img, &BBox::new(4.0, 6.0, 20.0, 18.0), Rgb([0, 255, 0]));
        assert_eq!(img.get_pixel(4, 6).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(20, 18).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(12, 12).0, [0, 0, 0], "interior stays clear");
    }
}
