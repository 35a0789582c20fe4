//! Static PNG plots: per-class F1 bars, training curves and
//! prediction / label panels.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::types::LabelMap;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

/// Fixed class colours; index 0 is background.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [128, 128, 128],
];

pub fn class_color(k: u8) -> Rgb<u8> {
    Rgb(PALETTE[k as usize % PALETTE.len()])
}

fn frame(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, BG);
    for x in 10..w - 10 {
        img.put_pixel(x, h - 11, AXIS);
    }
    for y in 10..h - 10 {
        img.put_pixel(10, y, AXIS);
    }
    img
}

/// One bar per class, height proportional to F1 in [0, 1].
pub fn f1_bars(f1: &[f64], path: &Path) -> Result<()> {
    let (w, h) = (40 + 30 * f1.len() as u32, 220u32);
    let mut img = frame(w, h);
    let plot_h = (h - 22) as f64;
    for (i, &v) in f1.iter().enumerate() {
        let bar = (v.clamp(0.0, 1.0) * (plot_h - 10.0)).round() as u32;
        let x0 = 20 + 30 * i as u32;
        let color = class_color(i as u8);
        for x in x0..x0 + 20 {
            for y in (h - 11 - bar)..(h - 11) {
                img.put_pixel(x, y, color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Polylines of one or more series on shared axes (each scaled to the
/// common min/max).
pub fn curves(series: &[Vec<f64>], path: &Path) -> Result<()> {
    let (w, h) = (480u32, 240u32);
    let mut img = frame(w, h);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (k, s) in series.iter().enumerate() {
            let color = class_color(k as u8 + 1);
            let n = s.len().max(2) - 1;
            let mut prev: Option<(f64, f64)> = None;
            for (i, &v) in s.iter().enumerate() {
                if !v.is_finite() {
                    prev = None;
                    continue;
                }
                let x = 12.0 + (w - 24) as f64 * i as f64 / n as f64;
                let y = (h - 12) as f64 - (h - 24) as f64 * (v - lo) / span;
                if let Some((px, py)) = prev {
                    let steps = ((x - px).abs().max((y - py).abs()).ceil() as usize).max(1);
                    for j in 0..=steps {
                        let f = j as f64 / steps as f64;
                        img.put_pixel((px + f * (x - px)) as u32, (py + f * (y - py)) as u32, color);
                    }
                } else {
                    img.put_pixel(x as u32, y as u32, color);
                }
                prev = Some((x, y));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Prediction (left) and label (right) side by side, `scale` pixels per cell.
pub fn prediction_panel(pred: &LabelMap, label: &LabelMap, scale: u32, path: &Path) -> Result<()> {
    let (ph, pw) = (pred.height as u32 * scale, pred.width as u32 * scale);
    let gap = 4;
    let mut img = RgbImage::from_pixel(2 * pw + gap, ph.max(label.height as u32 * scale), BG);
    for (map, x0) in [(pred, 0), (label, pw + gap)] {
        for y in 0..map.height as u32 * scale {
            for x in 0..map.width as u32 * scale {
                let k = map.get((y / scale) as usize, (x / scale) as usize);
                img.put_pixel(x0 + x, y, class_color(k));
            }
        }
    }
    img.save(path)?;
    Ok(())
}
