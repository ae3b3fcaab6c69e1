//! Image and tensor-container I/O.
//!
//! Container layout (little-endian): the 8-byte magic `KOALA1\0\0`, a `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` `u32` dims and the `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::degrade::{Kernel2D, KernelGrid, KernelProvenance, KERNEL_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"KOALA1\0\0";

/// Named `f32` arrays with explicit dims.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), (dims, data));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f32>)> {
        self.entries.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (dims, data)) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header"))?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = cur.u16().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = cur.take(len).ok_or_else(|| bad("truncated entry name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let rank = cur.take(1).ok_or_else(|| bad("truncated entry"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| bad("dims overflow"))?;
            let raw = cur
                .take(n.checked_mul(4).ok_or_else(|| bad("dims overflow"))?)
                .ok_or_else(|| bad(&format!("truncated payload for {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.insert(name.clone(), (dims, data)).is_some() {
                return Err(bad(&format!("duplicate entry {name}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes a 20×20 kernel as a single `kernel` entry.
pub fn write_kernel(path: &Path, kernel: &Kernel2D) -> Result<()> {
    let mut c = Container::new();
    c.insert("kernel", vec![KERNEL_SIZE, KERNEL_SIZE], kernel.to_f32());
    c.save(path)
}

/// Writes an arbitrary square kernel (e.g. a Gaussian factor alone).
pub fn write_kernel_grid(path: &Path, kernel: &KernelGrid) -> Result<()> {
    let mut c = Container::new();
    let n = kernel.size();
    c.insert("kernel", vec![n, n], kernel.values().iter().map(|v| *v as f32).collect());
    c.save(path)
}

pub fn read_kernel(path: &Path) -> Result<Kernel2D> {
    let c = Container::load(path)?;
    let (dims, data) = c.get("kernel").ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "missing `kernel` entry".into(),
    })?;
    if dims != &[KERNEL_SIZE, KERNEL_SIZE] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {KERNEL_SIZE}×{KERNEL_SIZE} kernel, found {dims:?}"),
        });
    }
    Kernel2D::new(data.iter().map(|v| *v as f64).collect(), KernelProvenance::External)
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(img.to_rgb8())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// Top-left crop to the largest multiple of `m` in each dimension.
pub fn crop_to_multiple(img: &RgbImage, m: usize) -> RgbImage {
    let w = (img.width() as usize / m * m) as u32;
    let h = (img.height() as usize / m * m) as u32;
    if (w, h) == img.dimensions() {
        return img.clone();
    }
    image::imageops::crop_imm(img, 0, 0, w, h).to_image()
}

/// `(1, 3, H, W)` tensor holding raw `[0, 255]` values.
pub fn rgb_to_tensor_255<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64)
    })
}

/// Rounds and clamps channel values in `[0, 255]` to 8 bits.
pub fn tensor_255_to_rgb<T: Real>(t: &Tensor<T>, sample: usize) -> RgbImage {
    map_to_rgb(t, sample, |v| v)
}

/// `(1, 3, H, W)` tensor in `[-1, 1]`.
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0)
    })
}

/// Maps `[-1, 1]` back to 8 bits with rounding and clamping.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, sample: usize) -> RgbImage {
    map_to_rgb(t, sample, |v| (v + 1.0) * 127.5)
}

fn map_to_rgb<T: Real>(t: &Tensor<T>, sample: usize, f: impl Fn(f64) -> f64) -> RgbImage {
    let [_, c, h, w] = t.shape().0;
    assert!(c >= 3, "need three channels to build an RGB image");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = f(t.at(sample, ch, y as usize, x as usize).to_f64_lossy());
            v.round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor in `[-1, 1]`.
pub fn stack<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("cannot stack zero images"));
    };
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::shape("stacked images differ in size"));
    }
    Ok(Tensor::from_fn(
        [images.len(), 3, h as usize, w as usize],
        |b, c, y, x| T::lit(images[b].get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0),
    ))
}
