//! Upsampling network with KOALA feature adjustment.
//!
//! Trunk: a head convolution, `koala_blocks` KOALA modules conditioned on
//! kernel features `f_d`, `res_blocks` residual blocks and a ReLU. Two heads
//! read the trunk features: a residual branch with pixel shuffling and a
//! filter branch producing `s²` per-pixel 5×5 upsampling filters `F_u`.
//!
//! In baseline mode the KOALA slots are plain residual blocks and `f_d` is
//! not used. The slot convolutions share names across modes so baseline
//! weights load directly into the KOALA graph.

use crate::degrade::{check_scale, KERNEL_TAPS};
use crate::error::{Error, Result};
use crate::nn::{conv, Bindings, Init, ModelWeights};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

/// Side of the KOALA local filters.
pub const KOALA_K: usize = 7;
/// Side of the dynamic upsampling filters.
pub const UP_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpsamplerConfig {
    pub channels: usize,
    pub scale: usize,
    pub koala_blocks: usize,
    pub res_blocks: usize,
    /// Whether KOALA adjustment heads are present.
    pub koala: bool,
}

impl UpsamplerConfig {
    pub fn new(channels: usize, scale: usize, koala: bool) -> Self {
        UpsamplerConfig {
            channels,
            scale,
            koala_blocks: 5,
            res_blocks: 7,
            koala,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.channels == 0 {
            return Err(Error::invalid("upsampler needs at least one channel"));
        }
        Ok(())
    }

    pub fn baseline(&self) -> Self {
        UpsamplerConfig { koala: false, ..*self }
    }

    pub fn infer<T: Real>(w: &ModelWeights<T>) -> Result<Self> {
        let channels = w.require("up.head.w")?.shape().batch();
        let scale = match w.require("up.filt1.w")?.shape().batch() {
            n if n == UP_K * UP_K * 4 => 2,
            n if n == UP_K * UP_K * 16 => 4,
            n => return Err(Error::invalid(format!("filter head has {n} outputs"))),
        };
        let koala_blocks = (0..).take_while(|i| w.contains(&format!("up.koala{i}.c1.w"))).count();
        let res_blocks = (0..).take_while(|i| w.contains(&format!("up.rb{i}.c1.w"))).count();
        let koala = w.contains("up.kfeat.c0.w");
        let cfg = UpsamplerConfig {
            channels,
            scale,
            koala_blocks,
            res_blocks,
            koala,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fresh upsampler weights under `up.*`.
pub fn build_upsampler<T: Real>(cfg: &UpsamplerConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut init = Init::new(seed);
    let mut w = ModelWeights::new();
    init.conv(&mut w, "up.head", c, 3, 3, 1.0);
    for i in 0..cfg.koala_blocks {
        init.conv(&mut w, &format!("up.koala{i}.c1"), c, c, 3, 1.0);
        init.conv(&mut w, &format!("up.koala{i}.c2"), c, c, 3, 0.1);
    }
    for i in 0..cfg.res_blocks {
        init.conv(&mut w, &format!("up.rb{i}.c1"), c, c, 3, 1.0);
        init.conv(&mut w, &format!("up.rb{i}.c2"), c, c, 3, 0.1);
    }
    init.conv(&mut w, "up.res0", 4 * c, c, 3, 1.0);
    if cfg.scale == 4 {
        init.conv(&mut w, "up.res1", 4 * c, c, 3, 1.0);
    }
    init.conv(&mut w, "up.res2", 3, c, 3, 0.1);
    init.conv(&mut w, "up.filt0", c, c, 3, 1.0);
    init.conv(&mut w, "up.filt1", UP_K * UP_K * cfg.scale * cfg.scale, c, 3, 0.1);
    if cfg.koala {
        add_koala_heads(&mut w, cfg, seed ^ 0x6b6f_616c_61)?;
    }
    Ok(w)
}

/// Inserts the kernel-feature extractor and zero-initialized KOALA heads,
/// turning baseline weights into a KOALA network that computes the same
/// function.
pub fn add_koala_heads<T: Real>(w: &mut ModelWeights<T>, cfg: &UpsamplerConfig, seed: u64) -> Result<()> {
    let c = cfg.channels;
    let mut init = Init::new(seed);
    init.conv(w, "up.kfeat.c0", c, KERNEL_TAPS, 3, 1.0);
    init.conv(w, "up.kfeat.c1", c, c, 3, 1.0);
    init.conv(w, "up.kfeat.c2", c, c, 3, 1.0);
    for i in 0..cfg.koala_blocks {
        init.conv(w, &format!("up.koala{i}.m1"), c, c, 3, 1.0);
        init.zero_conv(w, &format!("up.koala{i}.m2"), c, c, 3);
        init.conv(w, &format!("up.koala{i}.k1"), c, c, 1, 1.0);
        init.zero_conv(w, &format!("up.koala{i}.k2"), KOALA_K * KOALA_K, c, 1);
    }
    Ok(())
}

/// Replaces the zero-initialized KOALA output convolutions with random
/// ones, so every parameter influences the output.
pub fn randomize_koala_heads<T: Real>(w: &mut ModelWeights<T>, cfg: &UpsamplerConfig, seed: u64, gain: f64) {
    let c = cfg.channels;
    let mut init = Init::new(seed);
    for i in 0..cfg.koala_blocks {
        init.conv(w, &format!("up.koala{i}.m2"), c, c, 3, gain);
        init.conv(w, &format!("up.koala{i}.k2"), KOALA_K * KOALA_K, c, 1, gain);
    }
}

/// `f_d`: three 3×3 convolutions with ReLU applied to `F_d`.
pub fn extract_kernel_features<T: Real>(tape: &mut Tape<T>, b: &Bindings, fd: Var) -> Result<Var> {
    let mut h = fd;
    for i in 0..3 {
        h = conv(tape, b, &format!("up.kfeat.c{i}"), h)?;
        h = tape.relu(h);
    }
    Ok(h)
}

/// Outputs of one KOALA module.
#[derive(Clone, Copy, Debug)]
pub struct KoalaOut {
    pub y: Var,
    /// Per-pixel per-channel multiplier.
    pub m: Var,
    /// Per-pixel 7×7 filters, unit-sum.
    pub k: Var,
}

fn delta_template<T: Real>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([1, n * n, 1, 1]);
    t.data_mut()[(n / 2) * n + n / 2] = T::one();
    t
}

/// `y = local_filter(inner(x) ⊗ m, k) + x` with `m` and `k` predicted from
/// `f_d`.
pub fn koala_module<T: Real>(tape: &mut Tape<T>, b: &Bindings, index: usize, x: Var, f_d: Var) -> Result<KoalaOut> {
    let name = format!("up.koala{index}");
    let (xs, fs) = (tape.shape(x), tape.shape(f_d));
    if xs.batch() != fs.batch() || xs.height() != fs.height() || xs.width() != fs.width() {
        return Err(Error::shape(format!("koala: features {xs} vs kernel features {fs}")));
    }
    let inner = residual_inner(tape, b, &name, x)?;

    let m = conv(tape, b, &format!("{name}.m1"), f_d)?;
    let m = tape.relu(m);
    let m = conv(tape, b, &format!("{name}.m2"), m)?;
    let m = tape.add_scalar(m, T::one());

    let k = conv(tape, b, &format!("{name}.k1"), f_d)?;
    let k = tape.relu(k);
    let k = conv(tape, b, &format!("{name}.k2"), k)?;
    let template = tape.constant(delta_template(KOALA_K));
    let k = tape.add(k, template)?;
    let k = tape.normalize_kernels(k, KOALA_K * KOALA_K)?;

    let scaled = tape.mul(inner, m)?;
    let filtered = tape.local_filter(scaled, k, KOALA_K, 1, Padding::zero(KOALA_K / 2))?;
    let y = tape.add(filtered, x)?;
    Ok(KoalaOut { y, m, k })
}

fn residual_inner<T: Real>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let h = tape.relu(x);
    let h = conv(tape, b, &format!("{name}.c1"), h)?;
    let h = tape.relu(h);
    conv(tape, b, &format!("{name}.c2"), h)
}

/// Pre-activation residual block `x + c2(relu(c1(relu(x))))`.
pub fn resblock<T: Real>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let h = residual_inner(tape, b, name, x)?;
    tape.add(x, h)
}

/// `Ỹ`: each 25-channel chunk of `F_u` filters `X` (shared across RGB) and
/// the `s²` results are pixel-shuffled.
pub fn apply_upsampling_filters<T: Real>(tape: &mut Tape<T>, x: Var, fu: Var, scale: usize) -> Result<Var> {
    tape.dynamic_upsample(x, fu, UP_K, scale, Padding::replicate(UP_K / 2))
}

#[derive(Clone, Debug)]
pub struct UpsamplerOutput {
    /// `Ŷ = Ỹ + r`, in the `[-1, 1]` working range (unclamped).
    pub sr: Var,
    pub filtered: Var,
    pub fu: Var,
    pub residual: Var,
    pub koala: Vec<KoalaOut>,
}

/// Runs the upsampler on `X`. `fd` must be given iff the weights carry KOALA
/// heads.
pub fn upsampler_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Bindings,
    cfg: &UpsamplerConfig,
    x: Var,
    fd: Option<Var>,
) -> Result<UpsamplerOutput> {
    cfg.validate()?;
    let f_d = match (cfg.koala, fd) {
        (true, Some(fd)) => Some(extract_kernel_features(tape, b, fd)?),
        (true, None) => return Err(Error::invalid("KOALA upsampler needs a kernel field")),
        (false, _) => None,
    };
    let mut h = conv(tape, b, "up.head", x)?;
    let mut koala = Vec::new();
    for i in 0..cfg.koala_blocks {
        h = match f_d {
            Some(f) => {
                let out = koala_module(tape, b, i, h, f)?;
                koala.push(out);
                out.y
            }
            None => resblock(tape, b, &format!("up.koala{i}"), h)?,
        };
    }
    for i in 0..cfg.res_blocks {
        h = resblock(tape, b, &format!("up.rb{i}"), h)?;
    }
    let fu_feat = tape.relu(h);

    let mut r = conv(tape, b, "up.res0", fu_feat)?;
    r = tape.relu(r);
    r = tape.pixel_shuffle(r, 2)?;
    if cfg.scale == 4 {
        r = conv(tape, b, "up.res1", r)?;
        r = tape.relu(r);
        r = tape.pixel_shuffle(r, 2)?;
    }
    let residual = conv(tape, b, "up.res2", r)?;

    let f = conv(tape, b, "up.filt0", fu_feat)?;
    let f = tape.relu(f);
    let f = conv(tape, b, "up.filt1", f)?;
    let fu = tape.normalize_kernels(f, UP_K * UP_K)?;

    let filtered = apply_upsampling_filters(tape, x, fu, cfg.scale)?;
    let sr = tape.add(filtered, residual)?;
    Ok(UpsamplerOutput {
        sr,
        filtered,
        fu,
        residual,
        koala,
    })
}

/// Inference helper: `Ŷ` for one LR tensor with frozen weights.
pub fn super_resolve<T: Real>(w: &ModelWeights<T>, x: &Tensor<T>, fd: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let cfg = UpsamplerConfig::infer(w)?;
    let mut tape = Tape::new();
    let b = w.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let fdv = fd.map(|f| tape.constant(f.clone()));
    let out = upsampler_forward(&mut tape, &b, &cfg, xv, fdv)?;
    Ok(tape.value(out.sr).clone())
}
