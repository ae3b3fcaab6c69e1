//! Brute-force metric implementations used as oracles.

use image::{Rgb, RgbImage};
use koalanet::degrade::{Kernel2D, KernelProvenance, KERNEL_SIZE, KERNEL_TAPS};
use koalanet::eval;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn y_of(img: &RgbImage, x: u32, y: u32) -> f64 {
    let p = img.get_pixel(x, y);
    16.0 + (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0
}

pub fn psnr(a: &RgbImage, b: &RgbImage, crop: u32) -> f64 {
    let (w, h) = a.dimensions();
    let mut se = 0.0;
    let mut n = 0usize;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let d = y_of(a, x, y) - y_of(b, x, y);
            se += d * d;
            n += 1;
        }
    }
    if se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64.powi(2) / (se / n as f64)).log10()
}

/// Direct evaluation of every 11×11 window with a 2-D Gaussian weight.
pub fn ssim(a: &RgbImage, b: &RgbImage, crop: u32) -> f64 {
    let (w, h) = a.dimensions();
    let (w, h) = (w - 2 * crop, h - 2 * crop);
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / total;
                    let (px, py) = (crop + ox + j as u32, crop + oy + i as u32);
                    mx += wgt * y_of(a, px, py);
                    my += wgt * y_of(b, px, py);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / total;
                    let (px, py) = (crop + ox + j as u32, crop + oy + i as u32);
                    let (da, db) = (y_of(a, px, py) - mx, y_of(b, px, py) - my);
                    vx += wgt * da * da;
                    vy += wgt * db * db;
                    cxy += wgt * da * db;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Both kernels drawn on a canvas large enough for every shift.
pub fn kernel_l2(est: &Kernel2D, gt: &Kernel2D, max_shift: usize) -> f64 {
    let n = KERNEL_SIZE;
    let side = n + 4 * max_shift;
    let base = 2 * max_shift;
    let mut canvas_gt = vec![0.0; side * side];
    for y in 0..n {
        for x in 0..n {
            canvas_gt[(base + y) * side + base + x] = gt.at(y, x);
        }
    }
    let mut best = f64::INFINITY;
    for dy in 0..=2 * max_shift {
        for dx in 0..=2 * max_shift {
            // est moved so that est(p + Δ) lines up with gt(p).
            let mut canvas_est = vec![0.0; side * side];
            for y in 0..n {
                for x in 0..n {
                    canvas_est[(base + y + max_shift - dy) * side + base + x + max_shift - dx] = est.at(y, x);
                }
            }
            let s: f64 = canvas_gt.iter().zip(&canvas_est).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(s);
        }
    }
    best
}

pub fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// `a` plus bounded noise, so PSNR is finite and SSIM non-trivial.
pub fn noisy_copy(rng: &mut ChaCha8Rng, a: &RgbImage, amp: i16) -> RgbImage {
    RgbImage::from_fn(a.width(), a.height(), |x, y| {
        Rgb(a.get_pixel(x, y).0.map(|v| (v as i16 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8))
    })
}

pub fn random_kernel(rng: &mut ChaCha8Rng) -> Kernel2D {
    let support = rng.random_range(3..=KERNEL_SIZE);
    let lo = rng.random_range(0..=KERNEL_SIZE - support);
    let mut v = vec![0.0; KERNEL_TAPS];
    for y in lo..lo + support {
        for x in lo..lo + support {
            v[y * KERNEL_SIZE + x] = rng.random_range(0.0..1.0);
        }
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Kernel2D::new(v, KernelProvenance::External).unwrap()
}

fn translated(k: &Kernel2D, dy: isize, dx: isize) -> Kernel2D {
    let n = KERNEL_SIZE as isize;
    let mut v = vec![0.0; KERNEL_TAPS];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = (y - dy, x - dx);
            if (0..n).contains(&sy) && (0..n).contains(&sx) {
                v[(y * n + x) as usize] = k.at(sy as usize, sx as usize);
            }
        }
    }
    Kernel2D::new(v, KernelProvenance::External).unwrap()
}

/// 20 random image pairs and kernel pairs against the oracles, plus the
/// self and translation identities.
pub fn oracle_suite(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..20 {
        let (w, h) = (rng.random_range(16..40), rng.random_range(16..40));
        let crop = rng.random_range(0..3);
        let a = random_image(&mut rng, w, h);
        let amp = rng.random_range(1..60);
        let b = noisy_copy(&mut rng, &a, amp);
        let (p, po) = (eval::psnr_y(&a, &b, crop as usize).unwrap(), psnr(&a, &b, crop));
        if (p - po).abs() > 1e-6 {
            return Err(format!("case {case}: psnr {p} vs oracle {po}"));
        }
        let (s, so) = (eval::ssim_y(&a, &b, crop as usize).unwrap(), ssim(&a, &b, crop));
        if (s - so).abs() > 1e-6 {
            return Err(format!("case {case}: ssim {s} vs oracle {so}"));
        }
        let (ke, kg) = (random_kernel(&mut rng), random_kernel(&mut rng));
        let m = rng.random_range(0..6);
        let (l, lo) = (eval::kernel_l2_shifted(&ke, &kg, m), kernel_l2(&ke, &kg, m));
        if (l - lo).abs() > 1e-6 {
            return Err(format!("case {case}: kernel l2 {l} vs oracle {lo}"));
        }
        if eval::kernel_l2_shifted(&kg, &kg, m) != 0.0 {
            return Err(format!("case {case}: kernel l2 of a kernel with itself is not 0"));
        }
        let (dy, dx) = (rng.random_range(-3i64..=3) as isize, rng.random_range(-3i64..=3) as isize);
        let centred = kernel_from_centre(&mut rng);
        let moved = translated(&centred, dy, dx);
        let d = eval::kernel_l2_shifted(&moved, &centred, 5);
        if d > 1e-12 {
            return Err(format!("case {case}: translated copy by ({dy}, {dx}) scores {d}"));
        }
    }
    Ok(())
}

/// A kernel whose support stays inside the grid under shifts up to 3.
fn kernel_from_centre(rng: &mut ChaCha8Rng) -> Kernel2D {
    let mut v = vec![0.0; KERNEL_TAPS];
    for y in 4..16 {
        for x in 4..16 {
            v[y * KERNEL_SIZE + x] = rng.random_range(0.0..1.0);
        }
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Kernel2D::new(v, KernelProvenance::External).unwrap()
}
