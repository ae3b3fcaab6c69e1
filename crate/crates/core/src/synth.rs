//! Procedural HR test images: overlapping shapes, stripes and gratings on
//! a smooth gradient background. Used for desk-scale training pools and
//! held-out sets.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io;

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d * (1.0 - alpha) + s * alpha;
    }
}

enum Layer {
    Disk { cx: f64, cy: f64, r: f64, col: [f64; 3] },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, angle: f64, col: [f64; 3] },
    Stripes { period: f64, angle: f64, duty: f64, col: [f64; 3] },
    Grating { freq: f64, angle: f64, col: [f64; 3] },
    Checker { size: f64, col: [f64; 3] },
}

impl Layer {
    fn random(rng: &mut impl Rng, w: f64, h: f64) -> Self {
        let col = color(rng);
        match rng.random_range(0..5) {
            0 => Layer::Disk {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(3.0..w.min(h) / 3.0),
                col,
            },
            1 => {
                let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                let (hw, hh) = (rng.random_range(2.0..w / 4.0), rng.random_range(2.0..h / 4.0));
                Layer::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                    angle: rng.random_range(0.0..PI),
                    col,
                }
            }
            2 => Layer::Stripes {
                period: rng.random_range(3.0..16.0),
                angle: rng.random_range(0.0..PI),
                duty: rng.random_range(0.3..0.7),
                col,
            },
            3 => Layer::Grating {
                freq: rng.random_range(0.05..0.4),
                angle: rng.random_range(0.0..PI),
                col,
            },
            _ => Layer::Checker {
                size: rng.random_range(3.0..12.0),
                col,
            },
        }
    }

    /// Coverage in `[0, 1]` at pixel `(x, y)` and the layer colour.
    fn sample(&self, x: f64, y: f64) -> (f64, [f64; 3]) {
        match *self {
            Layer::Disk { cx, cy, r, col } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                ((r - d + 0.5).clamp(0.0, 1.0), col)
            }
            Layer::Rect {
                x0,
                y0,
                x1,
                y1,
                angle,
                col,
            } => {
                let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                let inside = ((x1 - x0) / 2.0 - u.abs()).min((y1 - y0) / 2.0 - v.abs());
                ((inside + 0.5).clamp(0.0, 1.0), col)
            }
            Layer::Stripes {
                period,
                angle,
                duty,
                col,
            } => {
                let t = (x * angle.cos() + y * angle.sin()) / period;
                let phase = t - t.floor();
                (if phase < duty { 0.85 } else { 0.0 }, col)
            }
            Layer::Grating { freq, angle, col } => {
                let t = x * angle.cos() + y * angle.sin();
                (0.5 + 0.4 * (2.0 * PI * freq * t).sin(), col)
            }
            Layer::Checker { size, col } => {
                let parity = ((x / size).floor() + (y / size).floor()) as i64 & 1;
                (if parity == 0 { 0.7 } else { 0.0 }, col)
            }
        }
    }
}

/// A `width × height` image fully determined by `seed`.
pub fn synth_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let bg_angle: f64 = rng.random_range(0.0..2.0 * PI);
    let n_layers = rng.random_range(6..14);
    let layers: Vec<Layer> = (0..n_layers).map(|_| Layer::random(&mut rng, w, h)).collect();
    // Stripe-like layers are confined to a random half-plane so that edges
    // of different orientations coexist.
    let masks: Vec<(f64, f64, f64)> = layers
        .iter()
        .map(|_| {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            (a.cos(), a.sin(), rng.random_range(-0.3..0.3) * w.max(h))
        })
        .collect();

    RgbImage::from_fn(width, height, |px, py| {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let t = ((x - w / 2.0) * bg_angle.cos() + (y - h / 2.0) * bg_angle.sin()) / w.max(h) + 0.5;
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            rgb[ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
        }
        for (layer, (mx, my, mo)) in layers.iter().zip(&masks) {
            let (mut alpha, col) = layer.sample(x, y);
            if matches!(layer, Layer::Stripes { .. } | Layer::Grating { .. } | Layer::Checker { .. })
                && (x - w / 2.0) * mx + (y - h / 2.0) * my < *mo
            {
                alpha = 0.0;
            }
            blend(&mut rgb, col, alpha);
        }
        Rgb(rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Writes `count` images named `synth_0000.png`, ... with seeds
/// `seed, seed + 1, ...`.
pub fn write_synth_set(dir: &Path, count: usize, seed: u64, width: u32, height: u32) -> Result<()> {
    for i in 0..count {
        let img = synth_image(seed.wrapping_add(i as u64), width, height);
        io::write_png(&dir.join(format!("synth_{i:04}.png")), &img)?;
    }
    Ok(())
}
