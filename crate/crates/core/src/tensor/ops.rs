use super::kernels::{self, ConvGeom, FilterGeom};
use super::tape::Op;
use super::{Padding, Real, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// Cross-correlation of `input` with `weight[out, in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != geom.c_out {
                return Err(Error::shape(format!(
                    "conv2d: bias {bs} does not match {} output channels",
                    geom.c_out
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let tracked = self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        // NaN passes through.
        let data = x.data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        let out = Tensor::new(x.shape(), data).expect("relu shape");
        let tracked = self.tracked(input);
        self.push(out, Op::Relu(input), tracked)
    }

    /// `(B, C·r², H, W) → (B, C, r·H, r·W)`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape(input).0;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel_shuffle: {c} channels not divisible by {r}²"
            )));
        }
        let data = kernels::pixel_shuffle(self.value(input).data(), self.shape(input), r);
        let out = Tensor::new(Shape::new(b, c / (r * r), h * r, w * r), data)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::PixelShuffle { input, r }, tracked))
    }

    /// `(B, C, r·H, r·W) → (B, C·r², H, W)`.
    pub fn pixel_unshuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape(input).0;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(format!(
                "pixel_unshuffle: {h}×{w} not divisible by {r}"
            )));
        }
        let data = kernels::pixel_unshuffle(self.value(input).data(), self.shape(input), r);
        let out = Tensor::new(Shape::new(b, c * r * r, h / r, w / r), data)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::PixelUnshuffle { input, r }, tracked))
    }

    /// Per-pixel `k×k` filtering with output stride `stride`.
    ///
    /// `filters` is `(B, k², H_out, W_out)`; tap `dy·k + dx` of output pixel
    /// `(i, j)` reads input `(stride·i + dy − pad, stride·j + dx − pad)`.
    /// The same kernel is applied to every channel.
    pub fn local_filter(&mut self, input: Var, filters: Var, k: usize, stride: usize, padding: Padding) -> Result<Var> {
        let [b, _, h, w] = self.shape(input).0;
        let [fb, fc, h_out, w_out] = self.shape(filters).0;
        if fb != b {
            return Err(Error::shape(format!("local_filter: batch {b} vs filter batch {fb}")));
        }
        if fc != k * k {
            return Err(Error::shape(format!(
                "local_filter: filters have {fc} channels, expected {}",
                k * k
            )));
        }
        let geom = FilterGeom::new(h, w, h_out, w_out, k, stride, padding)?;
        let out = kernels::local_filter_forward(self.value(input), self.value(filters), &geom);
        let tracked = self.tracked(input) || self.tracked(filters);
        Ok(self.push(out, Op::LocalFilter { input, filters, geom }, tracked))
    }

    /// Applies `scale²` groups of per-pixel `k×k` filters (stride 1, centred)
    /// and pixel-shuffles the filtered maps into an image `scale×` larger.
    pub fn dynamic_upsample(&mut self, input: Var, filters: Var, k: usize, scale: usize, padding: Padding) -> Result<Var> {
        let [b, _, h, w] = self.shape(input).0;
        let [fb, fc, fh, fw] = self.shape(filters).0;
        if fb != b || fh != h || fw != w {
            return Err(Error::shape(format!(
                "dynamic_upsample: filters {} do not match input {}",
                self.shape(filters),
                self.shape(input)
            )));
        }
        if scale == 0 || fc != k * k * scale * scale {
            return Err(Error::shape(format!(
                "dynamic_upsample: filters have {fc} channels, expected {}",
                k * k * scale * scale
            )));
        }
        let geom = FilterGeom::new(h, w, h, w, k, 1, padding)?;
        let out = kernels::dynamic_upsample_forward(self.value(input), self.value(filters), &geom, scale);
        let tracked = self.tracked(input) || self.tracked(filters);
        Ok(self.push(
            out,
            Op::DynamicUpsample {
                input,
                filters,
                geom,
                scale,
            },
            tracked,
        ))
    }

    /// Forces every `n`-tap per-pixel kernel along the channel axis to sum
    /// to one: `x − mean(x) + 1/n`.
    pub fn normalize_kernels(&mut self, input: Var, n: usize) -> Result<Var> {
        let shape = self.shape(input);
        if n == 0 || shape.channels() % n != 0 {
            return Err(Error::shape(format!(
                "normalize_kernels: {} channels are not a multiple of n = {n}",
                shape.channels()
            )));
        }
        let data = kernels::normalize_kernels(self.value(input).data(), shape, n);
        let out = Tensor::new(shape, data)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::NormalizeKernels { input, n }, tracked))
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let [b, c, h, w] = self.shape(input).0;
        let data = kernels::upsample_nearest(self.value(input).data(), self.shape(input), factor);
        let out = Tensor::new(Shape::new(b, c, h * factor, w * factor), data)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::Upsample { input, factor }, tracked))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let strides = kernels::broadcast_strides(sa, sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); sa.numel()];
        if sa == sb {
            for ((o, x), y) in out.iter_mut().zip(av).zip(bv) {
                *o = f(*x, *y);
            }
        } else {
            kernels::for_each_broadcast(sa, strides, |ia, ib| out[ia] = f(av[ia], bv[ib]));
        }
        Tensor::new(sa, out)
    }

    /// `a + b`; `b` may broadcast over size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    /// Elementwise product; `b` may broadcast over size-1 dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn add_scalar(&mut self, input: Var, value: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| *v + value).collect();
        let out = Tensor::new(x.shape(), data).expect("shape");
        let tracked = self.tracked(input);
        self.push(out, Op::AddScalar(input), tracked)
    }

    /// Mean over height and width: `(B, C, H, W) → (B, C, 1, 1)`.
    pub fn spatial_mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape();
        let inv = T::one() / T::from_usize(shape.plane()).expect("plane");
        let data = x
            .data()
            .chunks(shape.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(Shape::new(shape.batch(), shape.channels(), 1, 1), data).expect("shape");
        let tracked = self.tracked(input);
        self.push(out, Op::SpatialMean(input), tracked)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let tracked = self.tracked(input);
        self.push(Tensor::scalar(total), Op::Sum(input), tracked)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("l1_loss: {sa} vs {sb}")));
        }
        let n = T::from_usize(sa.numel()).expect("count");
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (*x - *y).abs())
            .sum::<T>();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(total / n), Op::L1 { a, b }, tracked))
    }
}
