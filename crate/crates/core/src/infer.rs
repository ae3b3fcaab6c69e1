//! Single-image inference from a checkpoint.

use std::path::Path;

use image::RgbImage;

use crate::down::{self, DownsamplerConfig};
use crate::error::{Error, Result};
use crate::io::{self, Container};
use crate::nn::ModelWeights;
use crate::tensor::Tensor;
use crate::up::{self, UpsamplerConfig};

/// Upsampler weights plus, when present, the downsampler.
#[derive(Clone, Debug)]
pub struct Model {
    up: ModelWeights<f32>,
    up_cfg: UpsamplerConfig,
    down: Option<(ModelWeights<f32>, DownsamplerConfig)>,
}

/// Output of [`Model::run`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub sr: RgbImage,
    /// `F_d` cropped to the input size, when a downsampler was run.
    pub kernels: Option<Tensor<f32>>,
}

impl Model {
    pub fn from_weights(weights: &ModelWeights<f32>) -> Result<Self> {
        let up = weights.subset("up.");
        let up_cfg = UpsamplerConfig::infer(&up)?;
        let down_w = weights.subset("down.");
        let down = if down_w.is_empty() {
            None
        } else {
            let cfg = DownsamplerConfig::infer(&down_w)?;
            Some((down_w, cfg))
        };
        if up_cfg.koala && down.is_none() {
            return Err(Error::Usage("KOALA upsampler without downsampler weights".into()));
        }
        Ok(Model { up, up_cfg, down })
    }

    /// Any checkpoint or weight container holding `up.*` tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Self::from_weights(&ModelWeights::read_from(&c)?)
    }

    pub fn scale(&self) -> usize {
        self.up_cfg.scale
    }

    pub fn is_koala(&self) -> bool {
        self.up_cfg.koala
    }

    pub fn has_downsampler(&self) -> bool {
        self.down.is_some()
    }

    /// Super-resolves `img`. Kernels are estimated when the upsampler needs
    /// them or `want_kernels` is set. Inputs are replicate-padded to the
    /// downsampler's size multiple and outputs cropped back.
    pub fn run(&self, img: &RgbImage, want_kernels: bool) -> Result<Inference> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty input image"));
        }
        let need_down = self.up_cfg.koala || want_kernels;
        let down = match (&self.down, need_down) {
            (Some(d), true) => Some(d),
            (None, true) => return Err(Error::Usage("model has no downsampler weights".into())),
            (_, false) => None,
        };
        let x = io::rgb_to_tensor::<f32>(img);
        let m = down.map_or(1, |(_, cfg)| cfg.size_multiple());
        let xp = pad_to_multiple(&x, m);
        if xp.shape() != x.shape() {
            log::info!(
                "padded {w}×{h} input to {}×{}; output is cropped back",
                xp.shape().width(),
                xp.shape().height()
            );
        }
        let fd = down.map(|(dw, _)| down::estimate_kernels(dw, &xp)).transpose()?;
        let sr = up::super_resolve(&self.up, &xp, fd.as_ref().filter(|_| self.up_cfg.koala))?;
        let s = self.up_cfg.scale;
        Ok(Inference {
            sr: io::tensor_to_rgb(&crop(&sr, h * s, w * s), 0),
            kernels: fd.map(|f| crop(&f, h, w)),
        })
    }
}

/// Replicate-pads both spatial dims up to multiples of `m`.
fn pad_to_multiple(x: &Tensor<f32>, m: usize) -> Tensor<f32> {
    let [b, c, h, w] = x.shape().0;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([b, c, ph, pw], |bb, cc, y, xx| x.at(bb, cc, y.min(h - 1), xx.min(w - 1)))
}

fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let [b, c, _, _] = x.shape().0;
    Tensor::from_fn([b, c, h, w], |bb, cc, y, xx| x.at(bb, cc, y, xx))
}
