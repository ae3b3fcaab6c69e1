//! Degradation synthesis: random anisotropic Gaussian blur composed with a
//! bicubic downscaling kernel, applied as an `s`-stride filtering of the HR
//! image.
//!
//! Kernels are applied as cross-correlation (inner product at each output
//! location). Every kernel built here is point-symmetric about its centre, so
//! this coincides with convolution.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{PadMode, Real, Shape, Tensor};

/// Side length of a degradation kernel `k_d`.
pub const KERNEL_SIZE: usize = 20;
/// Number of taps in a flattened degradation kernel.
pub const KERNEL_TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;
/// Side length of the Gaussian factor `k_g`.
pub const GAUSSIAN_SIZE: usize = 15;
pub const SIGMA_MIN: f64 = 0.2;
pub const SIGMA_MAX: f64 = 4.0;
/// Cubic convolution parameter (`imresize` convention).
pub const CUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    /// Standard deviation along the first principal axis, in HR pixels.
    pub sigma1: f64,
    /// Standard deviation along the second principal axis, in HR pixels.
    pub sigma2: f64,
    /// Rotation of the first principal axis, radians.
    pub theta: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(sigma1: f64, sigma2: f64, theta: f64, seed: u64) -> Result<Self> {
        let spec = DegradationSpec {
            sigma1,
            sigma2,
            theta,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(SIGMA_MIN..=SIGMA_MAX).contains(&v) {
                return Err(Error::InvalidSpec(format!(
                    "{name} = {v} outside [{SIGMA_MIN}, {SIGMA_MAX}]"
                )));
            }
        }
        if !(0.0..=FRAC_PI_2).contains(&self.theta) {
            return Err(Error::InvalidSpec(format!("theta = {} outside [0, π/2]", self.theta)));
        }
        Ok(())
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "σ1={:.4} σ2={:.4} θ={:.4} seed={}",
            self.sigma1, self.sigma2, self.theta, self.seed
        )
    }
}

/// Draws `σ1, σ2 ~ U(0.2, 4.0)` and `θ ~ U(0, π/2)` from a generator seeded
/// by `seed` alone.
pub fn sample_spec(seed: u64) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_spec_with(&mut rng, seed)
}

pub(crate) fn sample_spec_with(rng: &mut impl Rng, seed: u64) -> DegradationSpec {
    let sigma1 = rng.random_range(SIGMA_MIN..=SIGMA_MAX);
    let sigma2 = rng.random_range(SIGMA_MIN..=SIGMA_MAX);
    let theta = rng.random_range(0.0..=FRAC_PI_2);
    DegradationSpec {
        sigma1,
        sigma2,
        theta,
        seed,
    }
}

/// Square grid of filter weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrid {
    size: usize,
    values: Vec<f64>,
}

impl KernelGrid {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::shape(format!(
                "{} values do not form a {size}×{size} kernel",
                values.len()
            )));
        }
        Ok(KernelGrid { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Single unit tap at the centre of an odd-sized grid.
    pub fn delta(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        values[(size / 2) * size + size / 2] = 1.0;
        KernelGrid { size, values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelProvenance {
    GaussianBicubic,
    BicubicOnly,
    External,
}

/// A 20×20 degradation kernel `k_d = k_g * k_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    values: Vec<f64>,
    provenance: KernelProvenance,
}

impl Kernel2D {
    pub fn new(values: Vec<f64>, provenance: KernelProvenance) -> Result<Self> {
        if values.len() != KERNEL_TAPS {
            return Err(Error::shape(format!(
                "degradation kernels have {KERNEL_TAPS} taps, got {}",
                values.len()
            )));
        }
        Ok(Kernel2D { values, provenance })
    }

    /// Unit tap at `(y, x)`.
    pub fn delta(y: usize, x: usize) -> Self {
        let mut values = vec![0.0; KERNEL_TAPS];
        values[y * KERNEL_SIZE + x] = 1.0;
        Kernel2D {
            values,
            provenance: KernelProvenance::External,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> KernelProvenance {
        self.provenance
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * KERNEL_SIZE + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Weighted mean tap position `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut cy, mut cx) = (0.0, 0.0);
        for y in 0..KERNEL_SIZE {
            for x in 0..KERNEL_SIZE {
                let v = self.at(y, x);
                cy += v * y as f64;
                cx += v * x as f64;
            }
        }
        let s = self.sum();
        (cy / s, cx / s)
    }

    /// Flattened into the `(B, 400, 1, 1)` layout used for kernel supervision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [1, KERNEL_TAPS, 1, 1],
            self.values.iter().map(|v| T::lit(*v)).collect(),
        )
        .expect("kernel tensor shape")
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }
}

/// Rotated bivariate Gaussian sampled at integer offsets from the centre tap
/// and normalized to unit sum.
pub fn make_gaussian_kernel(spec: &DegradationSpec, size: usize) -> Result<KernelGrid> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::invalid(format!("gaussian kernel size must be odd, got {size}")));
    }
    if !(spec.sigma1 > 0.0 && spec.sigma2 > 0.0) {
        return Err(Error::InvalidSpec("kernel widths must be positive".into()));
    }
    let (s, c) = spec.theta.sin_cos();
    // Σ = R diag(σ1², σ2²) Rᵀ, inverted in closed form.
    let (v1, v2) = (spec.sigma1 * spec.sigma1, spec.sigma2 * spec.sigma2);
    let sxx = c * c * v1 + s * s * v2;
    let syy = s * s * v1 + c * c * v2;
    let sxy = c * s * (v1 - v2);
    let det = sxx * syy - sxy * sxy;
    let (ixx, iyy, ixy) = (syy / det, sxx / det, -sxy / det);

    let half = (size / 2) as f64;
    let mut values = Vec::with_capacity(size * size);
    for row in 0..size {
        let dy = row as f64 - half;
        for col in 0..size {
            let dx = col as f64 - half;
            let q = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
            values.push((-0.5 * q).exp());
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    KernelGrid::new(size, values)
}

/// Keys cubic convolution weight.
pub fn cubic_weight(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BicubicKernel {
    /// 1-D taps at distances 1.5, 0.5, 0.5, 1.5 from the sample position.
    pub taps: [f64; 4],
    /// Outer product of `taps` with itself.
    pub grid: KernelGrid,
}

/// Bicubic downscaling kernel without anti-aliasing for an even scale.
///
/// With centre-aligned sampling an output pixel sits halfway between two HR
/// pixels, so the four taps fall at distances 1.5, 0.5, 0.5, 1.5 for both
/// supported scales.
pub fn make_bicubic_kernel(scale: usize) -> Result<BicubicKernel> {
    check_scale(scale)?;
    let taps = [1.5, 0.5, 0.5, 1.5].map(|d| cubic_weight(d, CUBIC_A));
    let mut values = Vec::with_capacity(16);
    for a in taps {
        for b in taps {
            values.push(a * b);
        }
    }
    Ok(BicubicKernel {
        taps,
        grid: KernelGrid::new(4, values)?,
    })
}

pub fn check_scale(scale: usize) -> Result<()> {
    match scale {
        2 | 4 => Ok(()),
        other => Err(Error::InvalidSpec(format!("unsupported scale {other} (expected 2 or 4)"))),
    }
}

/// Bicubic kernel zero-padded to 20×20 with its centroid at (9.5, 9.5).
pub fn bicubic_only(scale: usize) -> Result<Kernel2D> {
    let kb = make_bicubic_kernel(scale)?;
    let mut values = vec![0.0; KERNEL_TAPS];
    let off = KERNEL_SIZE / 2 - 2;
    for y in 0..4 {
        for x in 0..4 {
            values[(off + y) * KERNEL_SIZE + off + x] = kb.grid.at(y, x);
        }
    }
    Kernel2D::new(values, KernelProvenance::BicubicOnly)
}

/// Full 2-D convolution `k_g * k_b`, embedded in a 20×20 grid so that the
/// result sits where a bicubic-only kernel would.
pub fn compose_kd(kg: &KernelGrid, kb: &KernelGrid) -> Result<Kernel2D> {
    let (g, b) = (kg.size(), kb.size());
    if g % 2 == 0 || b % 2 == 1 {
        return Err(Error::invalid("compose_kd expects an odd Gaussian and an even bicubic kernel"));
    }
    let full = g + b - 1;
    // Centroid of the full convolution is (g-1)/2 + (b-1)/2; move it to 9.5.
    let twice_off = (KERNEL_SIZE - 1) as isize - (g - 1) as isize - (b - 1) as isize;
    if twice_off < 0 || twice_off % 2 != 0 || twice_off as usize / 2 + full > KERNEL_SIZE {
        return Err(Error::invalid(format!(
            "a {g}×{g} ∗ {b}×{b} kernel does not fit in {KERNEL_SIZE}×{KERNEL_SIZE}"
        )));
    }
    let off = twice_off as usize / 2;
    let mut values = vec![0.0; KERNEL_TAPS];
    for gy in 0..g {
        for gx in 0..g {
            let gv = kg.at(gy, gx);
            if gv == 0.0 {
                continue;
            }
            for by in 0..b {
                for bx in 0..b {
                    values[(off + gy + by) * KERNEL_SIZE + off + gx + bx] += gv * kb.at(by, bx);
                }
            }
        }
    }
    Kernel2D::new(values, KernelProvenance::GaussianBicubic)
}

/// `k_d` for a spec at a given scale.
pub fn degradation_kernel(spec: &DegradationSpec, scale: usize) -> Result<Kernel2D> {
    let kg = make_gaussian_kernel(spec, GAUSSIAN_SIZE)?;
    let kb = make_bicubic_kernel(scale)?;
    compose_kd(&kg, &kb.grid)
}

/// Offset between an LR pixel's anchor `s·i` in the HR grid and the first
/// tap of a 20×20 kernel, so that tap centroid 9.5 lands on the centre of
/// the `s×s` HR block.
pub fn filter_offset(scale: usize) -> usize {
    (KERNEL_SIZE - scale.min(KERNEL_SIZE)) / 2
}

/// `X = (Y ∗ k_d)↓s`: strided filtering of every channel with one kernel.
pub fn degrade_image<T: Real>(hr: &Tensor<T>, kd: &Kernel2D, scale: usize, pad: PadMode) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let [batch, channels, h, w] = hr.shape().0;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!("HR size {h}×{w} is not divisible by scale {scale}")));
    }
    let (ho, wo) = (h / scale, w / scale);
    let off = filter_offset(scale) as isize;
    let taps: Vec<T> = kd.values().iter().map(|v| T::lit(*v)).collect();
    let out_shape = Shape::new(batch, channels, ho, wo);
    let mut out = vec![T::zero(); out_shape.numel()];
    let resolve = |i: isize, len: usize| -> Option<usize> {
        if (0..len as isize).contains(&i) {
            Some(i as usize)
        } else {
            match pad {
                PadMode::Zero => None,
                PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
            }
        }
    };
    out.par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let src = &hr.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..KERNEL_SIZE {
                        let Some(y) = resolve((scale * i + dy) as isize - off, h) else {
                            continue;
                        };
                        for dx in 0..KERNEL_SIZE {
                            let Some(x) = resolve((scale * j + dx) as isize - off, w) else {
                                continue;
                            };
                            acc += taps[dy * KERNEL_SIZE + dx] * src[y * w + x];
                        }
                    }
                    dst[i * wo + j] = acc;
                }
            }
        });
    Tensor::new(out_shape, out)
}

/// Options for [`generate_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub scale: usize,
    pub base_seed: u64,
    pub pad: PadMode,
    /// Use this `(σ1, σ2, θ)` for every image instead of sampling.
    pub fixed: Option<(f64, f64, f64)>,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub spec: DegradationSpec,
    /// Relative to the output directory.
    pub kernel_path: String,
}

/// Degrades every PNG in `hr_dir` and writes `lr/`, `hr/` (cropped to a
/// multiple of the scale), `kernels/` and `manifest.csv` under `out_dir`.
///
/// Image `i` (in filename order) uses seed `base_seed + i`.
pub fn generate_dataset(hr_dir: &Path, out_dir: &Path, opts: &DatasetOptions) -> Result<Vec<ManifestRow>> {
    check_scale(opts.scale)?;
    if let Some((s1, s2, th)) = opts.fixed {
        DegradationSpec::new(s1, s2, th, opts.base_seed)?;
    }
    let inputs = io::list_pngs(hr_dir)?;
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !opts.force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out_dir.display()
            )));
        }
    }
    for sub in ["lr", "hr", "kernels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let rows = inputs
        .par_iter()
        .enumerate()
        .map(|(idx, path)| degrade_one(path, idx as u64, out_dir, opts))
        .collect::<Result<Vec<_>>>()?;

    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

fn degrade_one(path: &Path, idx: u64, out_dir: &Path, opts: &DatasetOptions) -> Result<ManifestRow> {
    let seed = opts.base_seed.wrapping_add(idx);
    let spec = match opts.fixed {
        Some((s1, s2, th)) => DegradationSpec::new(s1, s2, th, seed)?,
        None => sample_spec(seed),
    };
    let kd = degradation_kernel(&spec, opts.scale)?;
    let img = io::read_png(path)?;
    let img = io::crop_to_multiple(&img, opts.scale);
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid(format!(
            "{} is smaller than the scale factor",
            path.display()
        )));
    }
    let hr = io::rgb_to_tensor_255::<f64>(&img);
    let lr = degrade_image(&hr, &kd, opts.scale, opts.pad)?;

    let filename = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    io::write_png(&out_dir.join("lr").join(&filename), &io::tensor_255_to_rgb(&lr, 0))?;
    io::write_png(&out_dir.join("hr").join(&filename), &img)?;
    let kernel_rel = PathBuf::from("kernels").join(format!("{stem}.kernel"));
    io::write_kernel(&out_dir.join(&kernel_rel), &kd)?;
    Ok(ManifestRow {
        filename,
        spec,
        kernel_path: kernel_rel.to_string_lossy().replace('\\', "/"),
    })
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["filename", "sigma1", "sigma2", "theta", "seed", "kernel_path"])?;
    for r in rows {
        w.write_record([
            r.filename.clone(),
            r.spec.sigma1.to_string(),
            r.spec.sigma2.to_string(),
            r.spec.theta.to_string(),
            r.spec.seed.to_string(),
            r.kernel_path.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::invalid(format!("bad manifest number {:?}", field(i))))
        };
        rows.push(ManifestRow {
            filename: field(0).to_string(),
            spec: DegradationSpec {
                sigma1: num(1)?,
                sigma2: num(2)?,
                theta: num(3)?,
                seed: field(4)
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad manifest seed {:?}", field(4))))?,
            },
            kernel_path: field(5).to_string(),
        });
    }
    Ok(rows)
}
