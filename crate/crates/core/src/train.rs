//! Three-stage training.
//!
//! Stage 1 fits the downsampler, stage 2 the baseline upsampler, stage 3
//! both networks jointly with KOALA heads inserted. Every iteration draws
//! its batch from a generator keyed on `(seed, iteration)`, so a resumed run
//! replays exactly what an uninterrupted one would.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::degrade::{self, degrade_image, DegradationSpec, Kernel2D};
use crate::down::{self, DownsamplerConfig};
use crate::error::{Error, Result};
use crate::io::{self, Container};
use crate::nn::ModelWeights;
use crate::tensor::{PadMode, Tape, Tensor};
use crate::up::{self, UpsamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Down = 1,
    Baseline = 2,
    Joint = 3,
}

impl Stage {
    pub fn number(self) -> u32 {
        self as u32
    }
}

impl TryFrom<u32> for Stage {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Stage::Down),
            2 => Ok(Stage::Baseline),
            3 => Ok(Stage::Joint),
            other => Err(Error::Usage(format!("stage must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub total_iters: u64,
    pub lr: f64,
    /// Fractions of `total_iters` after which the rate drops by 10× each.
    pub lr_decay: Vec<f64>,
    pub batch_size: usize,
    /// LR patch side; HR patches are `scale ×` larger.
    pub patch_size: usize,
    pub scale: usize,
    pub seed: u64,
    pub channels: usize,
    pub down_levels: usize,
    pub down_resblocks: usize,
    pub koala_blocks: usize,
    pub res_blocks: usize,
    pub pad: PadMode,
    pub hr_dir: PathBuf,
    pub out_dir: PathBuf,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Down,
            total_iters: 2000,
            lr: 1e-4,
            lr_decay: vec![0.8, 0.9],
            batch_size: 8,
            patch_size: 64,
            scale: 4,
            seed: 0,
            channels: 32,
            down_levels: 3,
            down_resblocks: 2,
            koala_blocks: 5,
            res_blocks: 7,
            pad: PadMode::Replicate,
            hr_dir: PathBuf::from("hr"),
            out_dir: PathBuf::from("runs"),
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        degrade::check_scale(self.scale)?;
        if self.total_iters == 0 || self.batch_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Usage(
                "iterations, batch_size, patch_size and channels must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Usage(format!("invalid learning rate {}", self.lr)));
        }
        if self.lr_decay.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Usage("lr_decay fractions must lie in [0, 1]".into()));
        }
        let m = self.down_config().size_multiple();
        if self.patch_size % m != 0 {
            return Err(Error::Usage(format!("patch_size must be a multiple of {m}")));
        }
        self.down_config().validate()
    }

    pub fn down_config(&self) -> DownsamplerConfig {
        DownsamplerConfig {
            channels: self.channels,
            levels: self.down_levels,
            resblocks: self.down_resblocks,
        }
    }

    pub fn up_config(&self, koala: bool) -> UpsamplerConfig {
        UpsamplerConfig {
            channels: self.channels,
            scale: self.scale,
            koala_blocks: self.koala_blocks,
            res_blocks: self.res_blocks,
            koala,
        }
    }

    /// Parses a flat `key = value` file; `#` starts a comment. Relative
    /// paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::Usage(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Usage(format!("invalid value {v:?} for {key}")))
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "stage" => self.stage = Stage::try_from(num::<u32>(key, value)?)?,
            "iterations" => self.total_iters = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => {
                self.lr_decay = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "down_levels" => self.down_levels = num(key, value)?,
            "down_resblocks" => self.down_resblocks = num(key, value)?,
            "koala_blocks" => self.koala_blocks = num(key, value)?,
            "res_blocks" => self.res_blocks = num(key, value)?,
            "pad" => self.pad = value.parse()?,
            "hr_dir" => self.hr_dir = path(value),
            "out_dir" => self.out_dir = path(value),
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("stage{}.ckpt", self.stage))
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(format!("stage{}_log.csv", self.stage))
    }
}

/// Learning rate at `iter`: the initial rate, divided by 10 after each decay
/// point.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_decay
        .iter()
        .filter(|f| iter as f64 >= **f * cfg.total_iters as f64)
        .count();
    cfg.lr * 0.1f64.powi(passed as i32)
}

/// HR training images.
#[derive(Clone, Debug)]
pub struct HrPool {
    images: Vec<RgbImage>,
}

impl HrPool {
    pub fn new(images: Vec<RgbImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("HR pool is empty"));
        }
        Ok(HrPool { images })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images = io::list_pngs(dir)?
            .iter()
            .map(|p| io::read_png(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    fn min_side(&self) -> u32 {
        self.images
            .iter()
            .map(|i| i.width().min(i.height()))
            .min()
            .unwrap_or(0)
    }
}

/// A training batch in the `[-1, 1]` working range.
#[derive(Clone, Debug)]
pub struct Batch {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub kernels: Vec<Kernel2D>,
    pub specs: Vec<DegradationSpec>,
}

/// Generator for one iteration's batch.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Random HR crops, each degraded with a freshly sampled kernel.
pub fn sample_batch(pool: &HrPool, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let hr_side = cfg.patch_size * cfg.scale;
    if (pool.min_side() as usize) < hr_side {
        return Err(Error::invalid(format!(
            "HR patch {hr_side}×{hr_side} does not fit the smallest pool image ({} px)",
            pool.min_side()
        )));
    }
    let picks: Vec<(usize, u32, u32, DegradationSpec)> = (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..pool.len());
            let img = &pool.images[idx];
            let y0 = rng.random_range(0..=img.height() - hr_side as u32);
            let x0 = rng.random_range(0..=img.width() - hr_side as u32);
            let spec_seed = rng.random();
            let spec = degrade::sample_spec_with(rng, spec_seed);
            (idx, y0, x0, spec)
        })
        .collect();

    let samples = picks
        .par_iter()
        .map(|(idx, y0, x0, spec)| {
            let img = &pool.images[*idx];
            let crop = image::imageops::crop_imm(img, *x0, *y0, hr_side as u32, hr_side as u32).to_image();
            let hr = io::rgb_to_tensor::<f32>(&crop);
            let kd = degrade::degradation_kernel(spec, cfg.scale)?;
            let lr = degrade_image(&hr, &kd, cfg.scale, cfg.pad)?;
            Ok((hr, lr, kd))
        })
        .collect::<Result<Vec<_>>>()?;

    let (p, hp) = (cfg.patch_size, hr_side);
    let mut hr = Vec::with_capacity(cfg.batch_size * 3 * hp * hp);
    let mut lr = Vec::with_capacity(cfg.batch_size * 3 * p * p);
    let mut kernels = Vec::with_capacity(cfg.batch_size);
    for (h, l, k) in samples {
        hr.extend_from_slice(h.data());
        lr.extend_from_slice(l.data());
        kernels.push(k);
    }
    Ok(Batch {
        hr: Tensor::new([cfg.batch_size, 3, hp, hp], hr)?,
        lr: Tensor::new([cfg.batch_size, 3, p, p], lr)?,
        kernels,
        specs: picks.into_iter().map(|p| p.3).collect(),
    })
}

/// Adaptive moment estimation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, weights: &mut ModelWeights<f32>, grads: &BTreeMap<String, Vec<f32>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps_hat = (self.eps * c2.sqrt()) as f32;
        for (name, g) in grads {
            let Some(param) = weights.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps_hat);
            }
        }
    }

    fn write_to(&self, c: &mut Container) {
        for (name, m) in &self.m {
            c.insert(format!("adam.m.{name}"), vec![m.len()], m.clone());
        }
        for (name, v) in &self.v {
            c.insert(format!("adam.v.{name}"), vec![v.len()], v.clone());
        }
        put_u64(c, "meta.adam_step", self.step);
    }

    fn read_from(c: &Container, path: &Path) -> Result<Self> {
        let mut adam = Adam::new();
        adam.step = get_u64(c, "meta.adam_step", path)?;
        for (name, (_, data)) in &c.entries {
            if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p.to_string(), data.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p.to_string(), data.clone());
            }
        }
        Ok(adam)
    }
}

/// Stores an integer as two `f32` bit patterns.
fn put_u64(c: &mut Container, name: &str, value: u64) {
    c.insert(
        name,
        vec![2],
        vec![f32::from_bits(value as u32), f32::from_bits((value >> 32) as u32)],
    );
}

fn get_u64(c: &Container, name: &str, path: &Path) -> Result<u64> {
    match c.get(name) {
        Some((dims, data)) if dims == &[2] => Ok(data[0].to_bits() as u64 | (data[1].to_bits() as u64) << 32),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing or malformed {name}"),
        }),
    }
}

/// Weights plus everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub total_iters: u64,
    pub seed: u64,
    pub weights: ModelWeights<f32>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        self.weights.write_to(&mut c);
        self.adam.write_to(&mut c);
        put_u64(&mut c, "meta.stage", self.stage.number() as u64);
        put_u64(&mut c, "meta.iteration", self.iteration);
        put_u64(&mut c, "meta.total_iters", self.total_iters);
        put_u64(&mut c, "meta.seed", self.seed);
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        Ok(Checkpoint {
            stage: Stage::try_from(get_u64(c, "meta.stage", path)? as u32)?,
            iteration: get_u64(c, "meta.iteration", path)?,
            total_iters: get_u64(c, "meta.total_iters", path)?,
            seed: get_u64(c, "meta.seed", path)?,
            weights: ModelWeights::read_from(c)?,
            adam: Adam::read_from(c, path)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.total_iters
    }
}

/// Loss values of one iteration. Terms a stage does not use are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub total: f32,
    pub recon: Option<f32>,
    pub kernel: Option<f32>,
    pub sr: Option<f32>,
    pub wall_s: f64,
}

const LOG_HEADER: [&str; 7] = ["iter", "lr", "total", "recon", "kernel", "sr", "wall_s"];

impl LogRow {
    fn record(&self) -> [String; 7] {
        let opt = |v: Option<f32>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            self.iter.to_string(),
            self.lr.to_string(),
            self.total.to_string(),
            opt(self.recon),
            opt(self.kernel),
            opt(self.sr),
            format!("{:.3}", self.wall_s),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        let f = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |i: usize| Error::invalid(format!("bad training log field {:?}", f(i)));
        let opt = |i: usize| -> Result<Option<f32>> {
            if f(i).is_empty() {
                Ok(None)
            } else {
                f(i).parse().map(Some).map_err(|_| bad(i))
            }
        };
        Ok(LogRow {
            iter: f(0).parse().map_err(|_| bad(0))?,
            lr: f(1).parse().map_err(|_| bad(1))?,
            total: f(2).parse().map_err(|_| bad(2))?,
            recon: opt(3)?,
            kernel: opt(4)?,
            sr: opt(5)?,
            wall_s: f(6).parse().unwrap_or(0.0),
        })
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOG_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| LogRow::parse(&rec?)).collect()
}

/// Stateful trainer for one stage.
pub struct Trainer {
    pub cfg: TrainConfig,
    pool: HrPool,
    pub weights: ModelWeights<f32>,
    pub adam: Adam,
    pub iteration: u64,
    pub log: Vec<LogRow>,
    down_cfg: Option<DownsamplerConfig>,
    up_cfg: Option<UpsamplerConfig>,
}

impl Trainer {
    /// Fresh weights for stage 1 or 2.
    pub fn new(cfg: TrainConfig, pool: HrPool) -> Result<Self> {
        cfg.validate()?;
        let weights = match cfg.stage {
            Stage::Down => down::build_downsampler(&cfg.down_config(), cfg.seed)?,
            Stage::Baseline => up::build_upsampler(&cfg.up_config(false), cfg.seed)?,
            Stage::Joint => {
                return Err(Error::Usage(
                    "stage 3 starts from stage-1 and stage-2 checkpoints".into(),
                ))
            }
        };
        Self::with_weights(cfg, pool, weights)
    }

    /// Stage 3 from a trained downsampler and baseline upsampler.
    pub fn joint(cfg: TrainConfig, pool: HrPool, down_w: &ModelWeights<f32>, up_w: &ModelWeights<f32>) -> Result<Self> {
        if cfg.stage != Stage::Joint {
            return Err(Error::Usage("joint training requires stage = 3".into()));
        }
        cfg.validate()?;
        let mut weights = down_w.subset("down.");
        let mut upper = up_w.subset("up.");
        let mut ucfg = UpsamplerConfig::infer(&upper)?;
        if ucfg.scale != cfg.scale {
            return Err(Error::Usage(format!(
                "upsampler checkpoint is ×{}, config asks for ×{}",
                ucfg.scale, cfg.scale
            )));
        }
        if !ucfg.koala {
            ucfg.koala = true;
            up::add_koala_heads(&mut upper, &ucfg, cfg.seed)?;
        }
        DownsamplerConfig::infer(&weights)?;
        weights.merge(upper);
        Self::with_weights(cfg, pool, weights)
    }

    fn with_weights(cfg: TrainConfig, pool: HrPool, weights: ModelWeights<f32>) -> Result<Self> {
        let (down_cfg, up_cfg) = match cfg.stage {
            Stage::Down => (Some(DownsamplerConfig::infer(&weights)?), None),
            Stage::Baseline => (None, Some(UpsamplerConfig::infer(&weights)?)),
            Stage::Joint => (
                Some(DownsamplerConfig::infer(&weights)?),
                Some(UpsamplerConfig::infer(&weights)?),
            ),
        };
        let hr_side = cfg.patch_size * cfg.scale;
        if (pool.min_side() as usize) < hr_side {
            return Err(Error::Usage(format!(
                "patch_size × scale = {hr_side} exceeds the smallest HR image side {}",
                pool.min_side()
            )));
        }
        Ok(Trainer {
            cfg,
            pool,
            weights,
            adam: Adam::new(),
            iteration: 0,
            log: Vec::new(),
            down_cfg,
            up_cfg,
        })
    }

    /// Continues from a checkpoint, keeping log rows before its iteration.
    pub fn resume(cfg: TrainConfig, pool: HrPool, ckpt: Checkpoint, log: Vec<LogRow>) -> Result<Self> {
        if ckpt.stage != cfg.stage {
            return Err(Error::Usage(format!(
                "checkpoint is from stage {}, config says stage {}",
                ckpt.stage, cfg.stage
            )));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::Usage("checkpoint seed differs from config seed".into()));
        }
        let mut t = Self::with_weights(cfg, pool, ckpt.weights)?;
        t.adam = ckpt.adam;
        t.iteration = ckpt.iteration;
        t.log = log.into_iter().filter(|r| r.iter < ckpt.iteration).collect();
        Ok(t)
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.total_iters
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.cfg.stage,
            iteration: self.iteration,
            total_iters: self.cfg.total_iters,
            seed: self.cfg.seed,
            weights: self.weights.clone(),
            adam: self.adam.clone(),
        }
    }

    /// The batch iteration `iteration` trains on.
    pub fn batch_at(&self, iteration: u64) -> Result<Batch> {
        sample_batch(&self.pool, &self.cfg, &mut iteration_rng(self.cfg.seed, iteration))
    }

    /// Builds this stage's loss graph on `tape`. Returns (total, recon,
    /// kernel, sr) handles.
    pub fn loss_graph(&self, tape: &mut Tape<f32>, batch: &Batch, bind: &crate::nn::Bindings) -> Result<Losses> {
        let x = tape.constant(batch.lr.clone());
        let y = tape.constant(batch.hr.clone());
        let mut losses = Losses::default();
        let fd = match self.down_cfg {
            Some(dcfg) => {
                let fd = down::predict_kernels(tape, bind, &dcfg, x)?;
                let x_hat = down::reconstruct_lr(tape, y, fd, self.cfg.scale, self.cfg.pad)?;
                losses.recon = Some(tape.l1_loss(x_hat, x)?);
                if self.cfg.stage == Stage::Down {
                    let kd = tape.constant(down::kernel_batch(&batch.kernels));
                    let mean = tape.spatial_mean(fd);
                    losses.kernel = Some(tape.l1_loss(mean, kd)?);
                }
                Some(fd)
            }
            None => None,
        };
        if let Some(ucfg) = self.up_cfg {
            let out = up::upsampler_forward(tape, bind, &ucfg, x, fd)?;
            losses.sr = Some(tape.l1_loss(out.sr, y)?);
        }
        let mut terms = [losses.recon, losses.kernel, losses.sr].into_iter().flatten();
        let mut total = terms.next().ok_or_else(|| Error::invalid("stage has no loss"))?;
        for t in terms {
            total = tape.add(total, t)?;
        }
        losses.total = Some(total);
        Ok(losses)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LogRow> {
        let started = Instant::now();
        let batch = self.batch_at(self.iteration)?;
        let mut tape = Tape::new();
        let bind = self.weights.bind(&mut tape, true);
        let losses = self.loss_graph(&mut tape, &batch, &bind)?;
        let total = losses.total.expect("total loss");
        let value = |v: Option<crate::tensor::Var>| v.map(|v| tape.scalar(v));
        let lr = lr_at(self.iteration, &self.cfg);
        let row = LogRow {
            iter: self.iteration,
            lr,
            total: tape.scalar(total),
            recon: value(losses.recon),
            kernel: value(losses.kernel),
            sr: value(losses.sr),
            wall_s: 0.0,
        };
        if !row.total.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                detail: format!("loss became {}", row.total),
            });
        }
        tape.backward(total)?;
        let grads = bind.grads(&tape);
        if grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                detail: "non-finite gradient".into(),
            });
        }
        self.adam.update(&mut self.weights, &grads, lr);
        self.iteration += 1;
        let row = LogRow {
            wall_s: started.elapsed().as_secs_f64(),
            ..row
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains to `total_iters`, checkpointing to `out_dir` when `persist`.
    pub fn run(&mut self, persist: bool) -> Result<()> {
        if persist {
            std::fs::create_dir_all(&self.cfg.out_dir).map_err(|e| Error::io(&self.cfg.out_dir, e))?;
        }
        while !self.is_finished() {
            let row = self.step()?;
            if self.cfg.log_every > 0 && (row.iter % self.cfg.log_every == 0 || self.is_finished()) {
                log::info!(
                    "stage {} iter {} lr {:.2e} loss {:.5} (recon {} kernel {} sr {})",
                    self.cfg.stage,
                    row.iter,
                    row.lr,
                    row.total,
                    fmt_opt(row.recon),
                    fmt_opt(row.kernel),
                    fmt_opt(row.sr)
                );
            }
            let periodic = self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0;
            if persist && (periodic || self.is_finished()) {
                self.save()?;
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        self.checkpoint().save(&self.cfg.checkpoint_path())?;
        write_log(&self.cfg.log_path(), &self.log)
    }
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
}

/// Loss handles produced by [`Trainer::loss_graph`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Losses {
    pub total: Option<crate::tensor::Var>,
    pub recon: Option<crate::tensor::Var>,
    pub kernel: Option<crate::tensor::Var>,
    pub sr: Option<crate::tensor::Var>,
}

/// Stage 1 from scratch.
pub fn train_stage1(cfg: TrainConfig, pool: HrPool) -> Result<Checkpoint> {
    let mut t = Trainer::new(TrainConfig { stage: Stage::Down, ..cfg }, pool)?;
    t.run(false)?;
    Ok(t.checkpoint())
}

/// Stage 2 from scratch.
pub fn train_stage2(cfg: TrainConfig, pool: HrPool) -> Result<Checkpoint> {
    let mut t = Trainer::new(TrainConfig { stage: Stage::Baseline, ..cfg }, pool)?;
    t.run(false)?;
    Ok(t.checkpoint())
}

/// Stage 3 from the two pre-trained networks.
pub fn train_stage3(cfg: TrainConfig, pool: HrPool, ckpt1: &Checkpoint, ckpt2: &Checkpoint) -> Result<Checkpoint> {
    let mut t = Trainer::joint(TrainConfig { stage: Stage::Joint, ..cfg }, pool, &ckpt1.weights, &ckpt2.weights)?;
    t.run(false)?;
    Ok(t.checkpoint())
}
