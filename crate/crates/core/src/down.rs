//! Kernel-estimating downsampling network.
//!
//! A residual U-Net maps an LR image to a field of per-pixel 20×20 kernels
//! `F_d` (400 channels, each pixel's kernel normalized to unit sum). The HR
//! image filtered by `F_d` with stride `s` reconstructs the LR image.

use crate::degrade::{filter_offset, Kernel2D, KERNEL_SIZE, KERNEL_TAPS};
use crate::error::{Error, Result};
use crate::nn::{conv, conv_stride, Bindings, Init, ModelWeights};
use crate::tensor::{PadMode, Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownsamplerConfig {
    /// Feature width at every level.
    pub channels: usize,
    pub levels: usize,
    pub resblocks: usize,
}

impl Default for DownsamplerConfig {
    fn default() -> Self {
        DownsamplerConfig {
            channels: 64,
            levels: 3,
            resblocks: 2,
        }
    }
}

impl DownsamplerConfig {
    pub fn with_channels(channels: usize) -> Self {
        DownsamplerConfig {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.levels == 0 || self.levels > 8 {
            return Err(Error::invalid(format!("invalid downsampler config {self:?}")));
        }
        Ok(())
    }

    /// Head, encoder and decoder ResBlocks, strided and upsampling convs,
    /// tail and kernel head.
    pub fn conv_count(&self) -> usize {
        let (l, r) = (self.levels, self.resblocks);
        1 + (2 * l - 1) * 2 * r + 2 * (l - 1) + 2
    }

    /// Spatial dims of the input must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Recovers the architecture from parameter names and shapes.
    pub fn infer<T: Real>(w: &ModelWeights<T>) -> Result<Self> {
        let head = w.require("down.head.w")?;
        let channels = head.shape().batch();
        let levels = (0..).take_while(|l| w.contains(&format!("down.enc{l}.rb0.c1.w"))).count();
        let resblocks = (0..).take_while(|i| w.contains(&format!("down.enc0.rb{i}.c1.w"))).count();
        let cfg = DownsamplerConfig {
            channels,
            levels,
            resblocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fresh downsampler weights under `down.*`. The kernel head starts at zero
/// so the initial prediction is the uniform kernel.
pub fn build_downsampler<T: Real>(cfg: &DownsamplerConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut init = Init::new(seed);
    let mut w = ModelWeights::new();
    init.conv(&mut w, "down.head", c, 3, 3, 1.0);
    for l in 0..cfg.levels {
        for i in 0..cfg.resblocks {
            init.conv(&mut w, &format!("down.enc{l}.rb{i}.c1"), c, c, 3, 1.0);
            init.conv(&mut w, &format!("down.enc{l}.rb{i}.c2"), c, c, 3, 0.1);
        }
        if l + 1 < cfg.levels {
            init.conv(&mut w, &format!("down.pool{l}"), c, c, 3, 1.0);
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        init.conv(&mut w, &format!("down.up{l}"), c, c, 3, 1.0);
        for i in 0..cfg.resblocks {
            init.conv(&mut w, &format!("down.dec{l}.rb{i}.c1"), c, c, 3, 1.0);
            init.conv(&mut w, &format!("down.dec{l}.rb{i}.c2"), c, c, 3, 0.1);
        }
    }
    init.conv(&mut w, "down.tail", c, c, 3, 1.0);
    init.zero_conv(&mut w, "down.kernel_head", KERNEL_TAPS, c, 1);
    debug_assert_eq!(w.conv_count("down."), cfg.conv_count());
    Ok(w)
}

fn resblock<T: Real>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let h = conv(tape, b, &format!("{name}.c1"), x)?;
    let h = tape.relu(h);
    let h = conv(tape, b, &format!("{name}.c2"), h)?;
    tape.add(x, h)
}

/// `F_d` for an LR batch `(B, 3, H, W)`: `(B, 400, H, W)` with unit-sum
/// per-pixel kernels.
pub fn predict_kernels<T: Real>(tape: &mut Tape<T>, b: &Bindings, cfg: &DownsamplerConfig, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let m = cfg.size_multiple();
    if shape.height() % m != 0 || shape.width() % m != 0 {
        return Err(Error::shape(format!(
            "downsampler input {}×{} is not divisible by {m}",
            shape.height(),
            shape.width()
        )));
    }
    let mut h = conv(tape, b, "down.head", x)?;
    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        for i in 0..cfg.resblocks {
            h = resblock(tape, b, &format!("down.enc{l}.rb{i}"), h)?;
        }
        if l + 1 < cfg.levels {
            skips.push(h);
            h = conv_stride(tape, b, &format!("down.pool{l}"), h, 2)?;
            h = tape.relu(h);
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        h = tape.upsample_nearest(h, 2)?;
        h = conv(tape, b, &format!("down.up{l}"), h)?;
        h = tape.relu(h);
        h = tape.add(h, skips[l])?;
        for i in 0..cfg.resblocks {
            h = resblock(tape, b, &format!("down.dec{l}.rb{i}"), h)?;
        }
    }
    h = conv(tape, b, "down.tail", h)?;
    h = tape.relu(h);
    let k = conv(tape, b, "down.kernel_head", h)?;
    tape.normalize_kernels(k, KERNEL_TAPS)
}

/// `X̂ = (Y ⊛ F_d)↓s`: each LR pixel's kernel filters the HR image with
/// stride `s`, shared across channels.
pub fn reconstruct_lr<T: Real>(tape: &mut Tape<T>, y: Var, fd: Var, scale: usize, pad: PadMode) -> Result<Var> {
    let padding = Padding {
        mode: pad,
        amount: filter_offset(scale),
    };
    tape.local_filter(y, fd, KERNEL_SIZE, scale, padding)
}

/// Terms of the downsampler loss.
#[derive(Clone, Copy, Debug)]
pub struct DownLoss {
    pub total: Var,
    /// `l1(X̂, X)`
    pub recon: Var,
    /// `l1(E_hw[F_d], k_d)`
    pub kernel: Var,
}

/// `l1(X̂, X) + l1(E_hw[F_d], k_d)` with `k_d` laid out `(B, 400, 1, 1)`.
pub fn downsampler_loss<T: Real>(tape: &mut Tape<T>, x_hat: Var, x: Var, fd: Var, kd: Var) -> Result<DownLoss> {
    let recon = tape.l1_loss(x_hat, x)?;
    let mean = tape.spatial_mean(fd);
    let kernel = tape.l1_loss(mean, kd)?;
    let total = tape.add(recon, kernel)?;
    Ok(DownLoss { total, recon, kernel })
}

/// Ground-truth kernels stacked as `(B, 400, 1, 1)`.
pub fn kernel_batch<T: Real>(kernels: &[Kernel2D]) -> Tensor<T> {
    Tensor::from_fn([kernels.len(), KERNEL_TAPS, 1, 1], |b, c, _, _| T::lit(kernels[b].values()[c]))
}

/// Inference helper: `F_d` for one LR tensor with frozen weights.
pub fn estimate_kernels<T: Real>(w: &ModelWeights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = DownsamplerConfig::infer(w)?;
    let mut tape = Tape::new();
    let b = w.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let fd = predict_kernels(&mut tape, &b, &cfg, xv)?;
    Ok(tape.value(fd).clone())
}
