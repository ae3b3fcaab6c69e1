//! Central-difference gradient suite at f64, shared by `gradcheck` and
//! `acceptance`.

use koalanet::down::{self, DownsamplerConfig};
use koalanet::nn::{Bindings, ModelWeights};
use koalanet::tensor::{PadMode, Padding, Tape, Tensor, Var};
use koalanet::up::{self, UpsamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
const MAX_PROBES: usize = 48;

pub type Outcome = Result<(), String>;

pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Like [`random`] but bounded away from zero, for inputs feeding a kink.
pub fn random_off_zero(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn compare(name: &str, what: &str, j: usize, a: f64, numeric: f64) -> Outcome {
    let denom = a.abs().max(numeric.abs()).max(1e-6);
    let rel = (a - numeric).abs() / denom;
    if rel < TOL {
        Ok(())
    } else {
        Err(format!(
            "{name}: {what} element {j}: analytic {a:.8e} vs numeric {numeric:.8e} (rel {rel:.2e})"
        ))
    }
}

/// Reduces `f(inputs)` to a scalar with fixed random weights, then compares
/// the tape gradient of every input against central differences.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, f: F) -> Outcome
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.shape(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random(out_shape.0, &mut rng);

    let loss_of = |inputs: &[Tensor<f64>], grad: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if grad {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.scalar(loss);
        if !grad {
            return (value, vec![]);
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|v| tape.grad(*v).map(|g| g.to_vec())).collect())
    };

    let (_, analytic) = loss_of(inputs, true);
    for (idx, input) in inputs.iter().enumerate() {
        let grad = analytic[idx].clone().unwrap_or_else(|| vec![0.0; input.numel()]);
        let step = (input.numel() / MAX_PROBES).max(1);
        for j in (0..input.numel()).step_by(step) {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= EPS;
            let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * EPS);
            compare(name, &format!("input {idx}"), j, grad[j], numeric)?;
        }
    }
    Ok(())
}

/// Same as [`check`] for a network: every tensor in `w` (inputs included
/// under `in.*`) is probed at up to `probes` positions.
pub fn check_model<F>(name: &str, w: &ModelWeights<f64>, probes: usize, seed: u64, f: F) -> Outcome
where
    F: Fn(&mut Tape<f64>, &Bindings) -> Var,
{
    let out_shape = {
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, false);
        let out = f(&mut tape, &b);
        tape.shape(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random(out_shape.0, &mut rng);
    let loss_of = |w: &ModelWeights<f64>, grad: bool| {
        let mut tape = Tape::new();
        let b = w.bind(&mut tape, grad);
        let out = f(&mut tape, &b);
        let wt = tape.constant(weights.clone());
        let prod = tape.mul(out, wt).unwrap();
        let loss = tape.sum(prod);
        let value = tape.scalar(loss);
        if grad {
            tape.backward(loss).unwrap();
            (value, b.grads(&tape))
        } else {
            (value, Default::default())
        }
    };
    let (_, analytic) = loss_of(w, true);
    for (pname, t) in w.iter() {
        let zeros = vec![0.0; t.numel()];
        let grad = analytic.get(pname).unwrap_or(&zeros);
        let step = (t.numel() / probes).max(1);
        for j in (0..t.numel()).step_by(step) {
            let mut plus = w.clone();
            plus.get_mut(pname).unwrap().data_mut()[j] += EPS;
            let mut minus = w.clone();
            minus.get_mut(pname).unwrap().data_mut()[j] -= EPS;
            let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * EPS);
            compare(name, pname, j, grad[j], numeric)?;
        }
    }
    Ok(())
}

/// A random field of unit-sum kernels with positive taps.
pub fn random_field(b: usize, taps: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn([b, taps, h, w], |_, _, _, _| rng.random_range(0.1..1.0));
    for bb in 0..b {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..taps).map(|c| t.at(bb, c, y, x)).sum();
                for c in 0..taps {
                    let v = t.at(bb, c, y, x) / s;
                    t.set(bb, c, y, x, v);
                }
            }
        }
    }
    t
}

pub fn conv2d() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, Padding::zero(1), true),
        ([2, 3, 6, 7], [2, 3, 1, 1], 1, Padding::none(), false),
        ([1, 2, 7, 6], [4, 2, 3, 3], 2, Padding::replicate(1), true),
        ([1, 1, 6, 6], [2, 1, 5, 5], 1, Padding::replicate(2), true),
    ];
    for (i, (x, w, stride, pad, bias)) in cases.into_iter().enumerate() {
        let mut inputs = vec![random(x, &mut rng), random(w, &mut rng)];
        if bias {
            inputs.push(random([1, w[0], 1, 1], &mut rng));
        }
        check(&format!("conv2d #{i}"), &inputs, i as u64, |t, v| {
            t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap()
        })?;
    }
    Ok(())
}

pub fn relu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, s) in [[1, 1, 4, 4], [2, 3, 3, 2], [1, 5, 1, 7]].into_iter().enumerate() {
        check(&format!("relu #{i}"), &[random_off_zero(s, &mut rng)], i as u64, |t, v| t.relu(v[0]))?;
    }
    Ok(())
}

pub fn pixel_shuffle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, (s, r)) in [([1, 8, 3, 3], 2), ([2, 4, 2, 3], 2), ([1, 9, 2, 2], 3)].into_iter().enumerate() {
        check(&format!("pixel_shuffle #{i}"), &[random(s, &mut rng)], i as u64, |t, v| {
            t.pixel_shuffle(v[0], r).unwrap()
        })?;
        let [b, c, h, w] = s;
        let us = [b, c / (r * r), h * r, w * r];
        check(&format!("pixel_unshuffle #{i}"), &[random(us, &mut rng)], i as u64, |t, v| {
            t.pixel_unshuffle(v[0], r).unwrap()
        })?;
    }
    Ok(())
}

pub fn local_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = [
        ([1, 2, 4, 5], 3, 1, Padding::zero(1)),
        ([1, 3, 6, 6], 4, 2, Padding::replicate(1)),
        ([2, 1, 5, 4], 7, 1, Padding::zero(3)),
        ([1, 2, 8, 4], 6, 4, Padding::replicate(1)),
    ];
    for (i, (x, k, stride, pad)) in cases.into_iter().enumerate() {
        let f = [x[0], k * k, x[2] / stride, x[3] / stride];
        let inputs = [random(x, &mut rng), random(f, &mut rng)];
        check(&format!("local_filter #{i}"), &inputs, i as u64, |t, v| {
            t.local_filter(v[0], v[1], k, stride, pad).unwrap()
        })?;
    }
    Ok(())
}

pub fn dynamic_upsample() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = [
        ([1, 3, 3, 4], 5, 2, Padding::replicate(2)),
        ([1, 2, 3, 3], 3, 4, Padding::zero(1)),
        ([2, 1, 4, 3], 5, 1, Padding::replicate(2)),
        ([1, 3, 4, 4], 5, 2, Padding::replicate(2)),
    ];
    for (i, (x, k, s, pad)) in cases.into_iter().enumerate() {
        let f = [x[0], k * k * s * s, x[2], x[3]];
        let inputs = [random(x, &mut rng), random(f, &mut rng)];
        check(&format!("dynamic_upsample #{i}"), &inputs, i as u64, |t, v| {
            t.dynamic_upsample(v[0], v[1], k, s, pad).unwrap()
        })?;
    }
    Ok(())
}

pub fn normalize_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (i, (s, n)) in [([1, 8, 2, 2], 4), ([2, 50, 2, 1], 25), ([1, 49, 1, 3], 49)].into_iter().enumerate() {
        check(&format!("normalize #{i}"), &[random(s, &mut rng)], i as u64, |t, v| {
            t.normalize_kernels(v[0], n).unwrap()
        })?;
    }
    Ok(())
}

pub fn upsample_nearest() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, (s, f)) in [([1, 2, 3, 3], 2), ([2, 1, 2, 3], 3), ([1, 3, 1, 1], 4)].into_iter().enumerate() {
        check(&format!("upsample #{i}"), &[random(s, &mut rng)], i as u64, |t, v| {
            t.upsample_nearest(v[0], f).unwrap()
        })?;
    }
    Ok(())
}

pub fn elementwise() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs = [
        ([2, 3, 4, 4], [2, 3, 4, 4]),
        ([2, 3, 4, 4], [1, 3, 1, 1]),
        ([2, 3, 4, 5], [2, 1, 4, 5]),
    ];
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        let inputs = [random(a, &mut rng), random(b, &mut rng)];
        check(&format!("add #{i}"), &inputs, i as u64, |t, v| t.add(v[0], v[1]).unwrap())?;
        check(&format!("sub #{i}"), &inputs, i as u64, |t, v| t.sub(v[0], v[1]).unwrap())?;
        check(&format!("mul #{i}"), &inputs, i as u64, |t, v| t.mul(v[0], v[1]).unwrap())?;
    }
    Ok(())
}

pub fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (i, s) in [[1, 1, 3, 3], [2, 3, 4, 2], [3, 2, 1, 5]].into_iter().enumerate() {
        let x = random(s, &mut rng);
        check(&format!("add_scalar #{i}"), std::slice::from_ref(&x), i as u64, |t, v| {
            t.add_scalar(v[0], 0.75)
        })?;
        check(&format!("spatial_mean #{i}"), std::slice::from_ref(&x), i as u64, |t, v| {
            t.spatial_mean(v[0])
        })?;
        check(&format!("sum #{i}"), std::slice::from_ref(&x), i as u64, |t, v| t.sum(v[0]))?;
        // |a − b| ≥ 0.05 keeps every probe off the kink.
        let y = Tensor::from_fn(s, |b, c, h, w| {
            let d = random_off_zero([1, 1, 1, 1], &mut rng).data()[0];
            x.at(b, c, h, w) + d
        });
        check(&format!("l1 #{i}"), &[x.clone(), y], i as u64, |t, v| t.l1_loss(v[0], v[1]).unwrap())?;
    }
    Ok(())
}

pub fn chained_graph() -> Outcome {
    // x feeds two branches that are recombined, so its gradient accumulates.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random([1, 2, 4, 4], &mut rng),
        random([2, 2, 3, 3], &mut rng),
        random([1, 9, 4, 4], &mut rng),
    ];
    check("chain", &inputs, 0, |t, v| {
        let c = t.conv2d(v[0], v[1], None, 1, Padding::same(3)).unwrap();
        let m = t.mul(c, v[0]).unwrap();
        let k = t.normalize_kernels(v[2], 9).unwrap();
        let f = t
            .local_filter(m, k, 3, 1, Padding { mode: PadMode::Replicate, amount: 1 })
            .unwrap();
        t.add(f, v[0]).unwrap()
    })
}

pub fn reconstruct_lr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, (s, h, w, pad)) in [(2, 2, 3, PadMode::Replicate), (4, 2, 2, PadMode::Zero), (2, 3, 2, PadMode::Zero)]
        .into_iter()
        .enumerate()
    {
        let inputs = [random([1, 3, h * s, w * s], &mut rng), random_field(1, 400, h, w, &mut rng)];
        check(&format!("reconstruct_lr #{i}"), &inputs, i as u64, |t, v| {
            down::reconstruct_lr(t, v[0], v[1], s, pad).unwrap()
        })?;
    }
    Ok(())
}

fn small_up(scale: usize, channels: usize) -> UpsamplerConfig {
    UpsamplerConfig {
        channels,
        scale,
        koala_blocks: 2,
        res_blocks: 1,
        koala: true,
    }
}

pub fn koala_module() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (i, (c, h, w)) in [(3, 4, 4), (2, 5, 3), (4, 3, 6)].into_iter().enumerate() {
        let cfg = small_up(2, c);
        let mut wts = up::build_upsampler::<f64>(&cfg, 20 + i as u64).unwrap();
        up::randomize_koala_heads(&mut wts, &cfg, 30 + i as u64, 1.0);
        let mut net = ModelWeights::new();
        for p in ["c1", "c2", "m1", "m2", "k1", "k2"] {
            for suffix in ["w", "b"] {
                let name = format!("up.koala0.{p}.{suffix}");
                net.insert(name.clone(), wts.require(&name).unwrap().clone());
            }
        }
        net.insert("in.x", random([1, c, h, w], &mut rng));
        net.insert("in.fd", random([1, c, h, w], &mut rng));
        check_model(&format!("koala #{i}"), &net, 12, i as u64, |t, b| {
            let x = b.var("in.x").unwrap();
            let fd = b.var("in.fd").unwrap();
            up::koala_module(t, b, 0, x, fd).unwrap().y
        })?;
    }
    Ok(())
}

pub fn upsampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (i, (s, h, w)) in [(2, 3, 3), (4, 2, 3), (2, 4, 2)].into_iter().enumerate() {
        let cfg = small_up(s, 3);
        let mut net = up::build_upsampler::<f64>(&cfg, 40 + i as u64).unwrap();
        up::randomize_koala_heads(&mut net, &cfg, 50 + i as u64, 1.0);
        net.insert("in.x", random([1, 3, h, w], &mut rng));
        // Unconstrained taps keep kernel-feature pre-activations away from
        // the ReLU kink at this step size.
        net.insert("in.fd", random([1, 400, h, w], &mut rng));
        check_model(&format!("upsampler #{i}"), &net, 6, i as u64, |t, b| {
            let x = b.var("in.x").unwrap();
            let fd = b.var("in.fd").unwrap();
            up::upsampler_forward(t, b, &cfg, x, Some(fd)).unwrap().sr
        })?;
    }
    Ok(())
}

pub fn downsampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = DownsamplerConfig {
        channels: 3,
        levels: 2,
        resblocks: 1,
    };
    let mut net = down::build_downsampler::<f64>(&cfg, 60).unwrap();
    // A random kernel head so the field depends on every weight.
    let head = random([400, 3, 1, 1], &mut rng);
    *net.get_mut("down.kernel_head.w").unwrap() = head;
    net.insert("in.x", random([1, 3, 4, 4], &mut rng));
    check_model("downsampler", &net, 6, 0, |t, b| {
        let x = b.var("in.x").unwrap();
        down::predict_kernels(t, b, &cfg, x).unwrap()
    })
}

/// Every case, in suite order.
pub fn suite() -> Vec<(&'static str, fn() -> Outcome)> {
    vec![
        ("conv2d", conv2d),
        ("relu", relu),
        ("pixel_shuffle", pixel_shuffle),
        ("local_filter", local_filter),
        ("dynamic_upsample", dynamic_upsample),
        ("normalize_kernels", normalize_kernels),
        ("upsample_nearest", upsample_nearest),
        ("elementwise", elementwise),
        ("reductions", reductions),
        ("chained_graph", chained_graph),
        ("reconstruct_lr", reconstruct_lr),
        ("koala_module", koala_module),
        ("upsampler", upsampler),
        ("downsampler", downsampler),
    ]
}
