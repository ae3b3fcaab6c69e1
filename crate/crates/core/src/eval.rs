//! Image and kernel metrics.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::degrade::{cubic_weight, Kernel2D, KernelProvenance, CUBIC_A, KERNEL_SIZE, KERNEL_TAPS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const DEFAULT_MAX_SHIFT: usize = 5;

/// Studio-swing luma in `[16, 235]`.
pub fn luma(p: &Rgb<u8>) -> f64 {
    let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
    16.0 + 65.481 * r + 128.553 * g + 24.966 * b
}

/// Luma plane with `crop` pixels removed from every side.
fn luma_plane(img: &RgbImage, crop: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (cw, ch) = (w.saturating_sub(2 * crop), h.saturating_sub(2 * crop));
    let mut out = Vec::with_capacity(cw * ch);
    for y in crop..crop + ch {
        for x in crop..crop + cw {
            out.push(luma(img.get_pixel(x as u32, y as u32)));
        }
    }
    (out, cw, ch)
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

/// Luma PSNR in dB after cropping `crop` pixels per side. Identical images
/// give `+inf`.
pub fn psnr_y(a: &RgbImage, b: &RgbImage, crop: usize) -> Result<f64> {
    check_dims(a, b)?;
    let (la, w, h) = luma_plane(a, crop);
    let (lb, _, _) = luma_plane(b, crop);
    if w == 0 || h == 0 {
        return Err(Error::invalid("border crop removes the whole image"));
    }
    let mse = la.iter().zip(&lb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / la.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean luma SSIM over all valid 11×11 Gaussian windows.
pub fn ssim_y(a: &RgbImage, b: &RgbImage, crop: usize) -> Result<f64> {
    check_dims(a, b)?;
    let (x, w, h) = luma_plane(a, crop);
    let (y, _, _) = luma_plane(b, crop);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels after cropping, got {w}×{h}"
        )));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &g);
    let my = filter_valid(&y, w, h, &g);
    let sxx = filter_valid(&prod(&x, &x), w, h, &g);
    let syy = filter_valid(&prod(&y, &y), w, h, &g);
    let sxy = filter_valid(&prod(&x, &y), w, h, &g);
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (mx, my) = (mx[i], my[i]);
        let vx = sxx[i] - mx * mx;
        let vy = syy[i] - my * my;
        let cxy = sxy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// `min over |Δh|, |Δw| ≤ max_shift` of `Σ (k_gt(p) − k_est(p + Δ))²`,
/// both kernels zero-extended beyond the grid.
pub fn kernel_l2_shifted(est: &Kernel2D, gt: &Kernel2D, max_shift: usize) -> f64 {
    grid_l2_shifted(est.values(), gt.values(), KERNEL_SIZE, max_shift)
}

/// [`kernel_l2_shifted`] on raw `size × size` grids.
pub fn grid_l2_shifted(est: &[f64], gt: &[f64], size: usize, max_shift: usize) -> f64 {
    let n = size as isize;
    let m = max_shift as isize;
    let at = |k: &[f64], y: isize, x: isize| {
        if (0..n).contains(&y) && (0..n).contains(&x) {
            k[(y * n + x) as usize]
        } else {
            0.0
        }
    };
    let mut best = f64::INFINITY;
    for dh in -m..=m {
        for dw in -m..=m {
            // Union of gt's grid and est's grid moved by −Δ.
            let (y0, y1) = (0.min(-dh), (n - 1).max(n - 1 - dh));
            let (x0, x1) = (0.min(-dw), (n - 1).max(n - 1 - dw));
            let mut s = 0.0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = at(gt, y, x) - at(est, y + dh, x + dw);
                    s += d * d;
                }
            }
            best = best.min(s);
        }
    }
    best
}

/// Spatial mean of sample `b`'s per-pixel kernels.
pub fn mean_kernel<T: Real>(fd: &Tensor<T>, b: usize) -> Result<Kernel2D> {
    let [batch, c, h, w] = fd.shape().0;
    if c != KERNEL_TAPS || b >= batch {
        return Err(Error::shape(format!("{} is not a kernel field with sample {b}", fd.shape())));
    }
    let plane = h * w;
    let src = fd.sample(b);
    let values = (0..KERNEL_TAPS)
        .map(|t| src[t * plane..(t + 1) * plane].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64)
        .collect();
    Kernel2D::new(values, KernelProvenance::External)
}

/// Per-pixel cosine similarity between `F_d` and `k_gt`, row-major `H × W`.
/// A zero-norm kernel scores 0.
pub fn cosine_similarity_map<T: Real>(fd: &Tensor<T>, b: usize, gt: &Kernel2D) -> Result<Vec<f64>> {
    let [batch, c, h, w] = fd.shape().0;
    if c != KERNEL_TAPS || b >= batch {
        return Err(Error::shape(format!("{} is not a kernel field with sample {b}", fd.shape())));
    }
    let plane = h * w;
    let src = fd.sample(b);
    let g = gt.values();
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((0..plane)
        .map(|p| {
            let (mut dot, mut nn) = (0.0, 0.0);
            for (t, gv) in g.iter().enumerate() {
                let v = src[t * plane + p].to_f64_lossy();
                dot += v * gv;
                nn += v * v;
            }
            let denom = nn.sqrt() * gn;
            if denom == 0.0 {
                0.0
            } else {
                (dot / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Colour ramp for values in `[-1, 1]`: blue at −1, white at 0, red at 1.
pub fn similarity_color(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

pub fn similarity_png(map: &[f64], w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| similarity_color(map[y as usize * w + x as usize]))
}

/// Min-max scaled grayscale rendering, each tap drawn as a `zoom × zoom`
/// block.
pub fn kernel_png(values: &[f64], size: usize, zoom: usize) -> RgbImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let zoom = zoom.max(1);
    let side = (size * zoom) as u32;
    RgbImage::from_fn(side, side, |x, y| {
        let v = values[(y as usize / zoom) * size + x as usize / zoom];
        let g = (255.0 * (v - lo) / span).round() as u8;
        Rgb([g, g, g])
    })
}

/// Centre-aligned bicubic enlargement (a = −0.5, edge replicate), rounded
/// to 8 bits.
pub fn bicubic_upscale(img: &RgbImage, scale: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let taps = |o: usize, len: usize| -> [(usize, f64); 4] {
        let src = (o as f64 + 0.5) / scale as f64 - 0.5;
        let base = src.floor() as isize;
        std::array::from_fn(|i| {
            let t = base - 1 + i as isize;
            (t.clamp(0, len as isize - 1) as usize, cubic_weight(src - t as f64, CUBIC_A))
        })
    };
    let xs: Vec<_> = (0..w * scale).map(|x| taps(x, w)).collect();
    let ys: Vec<_> = (0..h * scale).map(|y| taps(y, h)).collect();
    RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let mut acc = [0.0f64; 3];
        for (sy, wy) in ys[y as usize] {
            for (sx, wx) in xs[x as usize] {
                let p = img.get_pixel(sx as u32, sy as u32);
                for c in 0..3 {
                    acc[c] += wy * wx * p[c] as f64;
                }
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// One published full-scale figure, shown next to desk-scale results.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceNumber {
    pub context: &'static str,
    pub method: &'static str,
    pub dataset: &'static str,
    pub scale: usize,
    pub metric: &'static str,
    pub value: f64,
}

pub const REFERENCE_LABEL: &str = "published full-scale reference (not reproduced here)";

pub fn reference_numbers() -> Vec<ReferenceNumber> {
    let mut out = Vec::new();
    let sets = ["Set5", "Set14", "BSD100", "Urban100", "Manga109", "DIV2K-val", "DIV2KRK"];
    let ours: [(usize, [(f64, f64); 7]); 2] = [
        (
            2,
            [
                (33.08, 0.9137),
                (30.35, 0.8568),
                (29.70, 0.8248),
                (27.19, 0.8318),
                (32.61, 0.9369),
                (32.55, 0.8902),
                (31.89, 0.8852),
            ],
        ),
        (
            4,
            [
                (30.28, 0.8658),
                (27.20, 0.7541),
                (26.97, 0.7172),
                (24.71, 0.7427),
                (28.48, 0.8814),
                (29.44, 0.8156),
                (27.77, 0.7637),
            ],
        ),
    ];
    let bicubic: [(usize, [(f64, f64); 7]); 2] = [
        (
            2,
            [
                (27.11, 0.7850),
                (26.00, 0.7222),
                (26.09, 0.6838),
                (22.82, 0.6537),
                (24.87, 0.7911),
                (28.27, 0.7835),
                (28.73, 0.8040),
            ],
        ),
        (
            4,
            [
                (26.41, 0.7511),
                (24.73, 0.6641),
                (25.12, 0.6321),
                (22.04, 0.6061),
                (23.60, 0.7482),
                (27.04, 0.7417),
                (25.33, 0.6795),
            ],
        ),
    ];
    for (method, table) in [("KOALAnet", ours), ("Bicubic", bicubic)] {
        for (scale, rows) in table {
            for (dataset, (psnr, ssim)) in sets.iter().zip(rows) {
                for (metric, value) in [("psnr_y", psnr), ("ssim_y", ssim)] {
                    out.push(ReferenceNumber {
                        context: "benchmark comparison",
                        method,
                        dataset,
                        scale,
                        metric,
                        value,
                    });
                }
            }
        }
    }
    for (method, psnr, ssim) in [
        ("Baseline", 29.20, 0.8110),
        ("KOALA only k", 29.40, 0.8150),
        ("KOALAnet", 29.44, 0.8156),
        ("KOALA + GT kernel", 29.67, 0.8212),
    ] {
        for (metric, value) in [("psnr_y", psnr), ("ssim_y", ssim)] {
            out.push(ReferenceNumber {
                context: "KOALA ablation",
                method,
                dataset: "DIV2K-val",
                scale: 4,
                metric,
                value,
            });
        }
    }
    for (dataset, value) in [("DIV2K-val", 0.0010), ("DIV2KRK", 0.0044)] {
        out.push(ReferenceNumber {
            context: "kernel accuracy",
            method: "KOALAnet",
            dataset,
            scale: 4,
            metric: "kernel_l2",
            value,
        });
    }
    out
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub kernel_l2: Option<f64>,
    pub runtime_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    /// Arithmetic means over all rows.
    pub fn aggregate(&self) -> MetricRow {
        let all_kernels = !self.rows.is_empty() && self.rows.iter().all(|r| r.kernel_l2.is_some());
        let all_times = !self.rows.is_empty() && self.rows.iter().all(|r| r.runtime_s.is_some());
        MetricRow {
            name: "mean".into(),
            psnr_y: mean(self.rows.iter().map(|r| r.psnr_y)),
            ssim_y: mean(self.rows.iter().map(|r| r.ssim_y)),
            kernel_l2: all_kernels.then(|| mean(self.rows.iter().filter_map(|r| r.kernel_l2))),
            runtime_s: all_times.then(|| mean(self.rows.iter().filter_map(|r| r.runtime_s))),
        }
    }

    /// Per-image rows followed by the aggregate. The kernel column appears
    /// only when every row has a kernel error.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let agg = self.aggregate();
        let with_kernel = agg.kernel_l2.is_some();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["name", "psnr_y", "ssim_y"];
        if with_kernel {
            header.push("kernel_l2");
        }
        header.push("runtime_s");
        w.write_record(&header)?;
        for r in self.rows.iter().chain(std::iter::once(&agg)) {
            let mut rec = vec![r.name.clone(), fmt_metric(r.psnr_y), fmt_metric(r.ssim_y)];
            if with_kernel {
                rec.push(r.kernel_l2.map(fmt_metric).unwrap_or_default());
            }
            rec.push(r.runtime_s.map(|t| format!("{t:.4}")).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
