//! Minimal PNG plots: axes, polylines and scatter markers. No text; the
//! CSV/JSON next to each image carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 360;
const MARGIN: i64 = 30;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];
pub const RED: [u8; 3] = [214, 39, 40];

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        let widen = |r: (f64, f64)| if r.1 > r.0 { r } else { (r.0 - 0.5, r.0 + 0.5) };
        let (x, y) = (widen(x), widen(y));
        for k in 0..=10 {
            let gx = MARGIN + k * (W as i64 - 2 * MARGIN) / 10;
            let gy = MARGIN + k * (H as i64 - 2 * MARGIN) / 10;
            line(&mut img, (gx, MARGIN), (gx, H as i64 - MARGIN), GRID);
            line(&mut img, (MARGIN, gy), (W as i64 - MARGIN, gy), GRID);
        }
        let (l, r, t, b) = (MARGIN, W as i64 - MARGIN, MARGIN, H as i64 - MARGIN);
        line(&mut img, (l, b), (r, b), AXIS);
        line(&mut img, (l, b), (l, t), AXIS);
        Self { img, x, y }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        let px = MARGIN as f64 + fx * (W as i64 - 2 * MARGIN) as f64;
        let py = (H as i64 - MARGIN) as f64 - fy * (H as i64 - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for pair in pts.windows(2) {
            let (a, b) = (self.to_px(pair[0].0, pair[0].1), self.to_px(pair[1].0, pair[1].1));
            for d in [(0, 0), (0, 1), (1, 0)] {
                line(&mut self.img, (a.0 + d.0, a.1 + d.1), (b.0 + d.0, b.1 + d.1), Rgb(color));
            }
        }
    }

    fn marker(&mut self, x: f64, y: f64, color: [u8; 3]) {
        let (cx, cy) = self.to_px(x, y);
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut self.img, cx + dx, cy + dy, Rgb(color));
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::file(path, e.to_string()))
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

// Bresenham.
fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
    let (sx, sy) = (if x < b.0 { 1 } else { -1 }, if y < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Precision (y) against recall (x) on the unit square.
pub fn pr_plot(path: &Path, curves: &[(Vec<(f64, f64)>, [u8; 3])]) -> Result<()> {
    let mut c = Canvas::new((0.0, 1.0), (0.0, 1.0));
    for (pts, color) in curves {
        c.polyline(pts, *color);
    }
    c.save(path)
}

/// Recall@N against N, one marker per N.
pub fn recall_plot(path: &Path, curves: &[(Vec<(f64, f64)>, [u8; 3])]) -> Result<()> {
    let max_n = curves
        .iter()
        .flat_map(|(p, _)| p.iter().map(|q| q.0))
        .fold(1.0, f64::max);
    let mut c = Canvas::new((0.0, max_n), (0.0, 1.0));
    for (pts, color) in curves {
        c.polyline(pts, *color);
        for &(x, y) in pts {
            c.marker(x, y, *color);
        }
    }
    c.save(path)
}

/// Query positions coloured green (success) or red (failure), equal aspect.
pub fn success_plot(path: &Path, points: &[(f64, f64, bool)]) -> Result<()> {
    let bounds = |f: fn(&(f64, f64, bool)) -> f64| {
        points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (mut x, mut y) = (bounds(|p| p.0), bounds(|p| p.1));
    if points.is_empty() {
        (x, y) = ((0.0, 1.0), (0.0, 1.0));
    }
    // Equal scale on both axes, relative to the plot area's aspect ratio.
    let aspect = (W as f64 - 2.0 * MARGIN as f64) / (H as f64 - 2.0 * MARGIN as f64);
    let span = ((x.1 - x.0) / aspect).max(y.1 - y.0).max(1e-9) * 1.05;
    let (cx, cy) = ((x.0 + x.1) / 2.0, (y.0 + y.1) / 2.0);
    let mut c = Canvas::new(
        (cx - span * aspect / 2.0, cx + span * aspect / 2.0),
        (cy - span / 2.0, cy + span / 2.0),
    );
    for &(px, py, ok) in points {
        c.marker(px, py, if ok { GREEN } else { RED });
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pr.png");
        pr_plot(&p, &[(vec![(0.0, 1.0), (0.5, 0.9), (1.0, 0.5)], BLUE)]).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|px| px.0 == BLUE));
        success_plot(&dir.path().join("s.png"), &[(0.0, 0.0, true), (3.0, 1.0, false)]).unwrap();
        success_plot(&dir.path().join("e.png"), &[]).unwrap();
        recall_plot(&dir.path().join("r.png"), &[(vec![(1.0, 0.5), (5.0, 0.9)], ORANGE)]).unwrap();
    }
}
