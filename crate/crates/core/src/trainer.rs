//! The pretraining loop.
//!
//! Each iteration: augment the minibatch, embed it once, score every
//! embedding against the full bank, take an SGD step on the encoder, then
//! update the bank rows of the batch instances. The bank update uses the
//! embeddings from this iteration's forward pass and runs after the
//! optimizer step.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{argmax, CorrectedDirection, MemoryBank};
use crate::checkpoint;
use crate::data::Instances;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{evaluate_instance, LossReport, ObjectiveWeights};
use crate::optim::Sgd;
use crate::tensor::{l2_normalize, Mat, SeededRng};

pub use crate::optim::cosine_lr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bank rows move along the gradient-corrected direction.
    Ours,
    /// Bank rows move toward the current embedding.
    NpidNaive,
    /// Naive bank update plus the `‖z − w_i‖²` term.
    Proximal,
    /// Bank rows are ordinary parameters trained by SGD.
    Parametric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankInit {
    Calibrate,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    GaussianNoise { sigma: f64 },
    /// Zero-pad by `pad` pixels, crop back at a random offset, flip
    /// horizontally with probability one half. Image data only.
    CropFlip { pad: usize },
}

macro_rules! name_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(<$ty>::$variant => $name,)+ })
            }
        }
    };
}

name_enum!(Mode { Ours => "ours", NpidNaive => "npid_naive", Proximal => "proximal", Parametric => "parametric" });
name_enum!(BankInit { Calibrate => "calibrate", Random => "random" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// `m` in the bank update.
    pub bank_momentum: f64,
    /// Weight of the SqrtKL term.
    pub lambda: f64,
    pub mode: Mode,
    pub init: BankInit,
    pub normalize: bool,
    pub temperature: f64,
    pub sqrtkl_into_encoder: bool,
    /// Weight of the proximal term in [`Mode::Proximal`].
    pub proximal_weight: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Write an extra checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            bank_momentum: 0.5,
            lambda: 20.0,
            mode: Mode::Ours,
            init: BankInit::Calibrate,
            normalize: true,
            temperature: 1.0,
            sqrtkl_into_encoder: true,
            proximal_weight: 1.0,
            seed: 0,
            augmentation: Augmentation::GaussianNoise { sigma: 0.1 },
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// The same run with every method component switched off: random bank
    /// init, naive bank update, no SqrtKL.
    pub fn npid_baseline(&self) -> Self {
        Self {
            mode: Mode::NpidNaive,
            init: BankInit::Random,
            lambda: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self, n_instances: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.batch_size > n_instances {
            return fail(format!(
                "batch_size {} must be in 1..={n_instances}",
                self.batch_size
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return fail(format!("bank_momentum {} outside [0, 1]", self.bank_momentum));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("sgd_momentum", self.sgd_momentum),
            ("weight_decay", self.weight_decay),
            ("proximal_weight", self.proximal_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if let Augmentation::GaussianNoise { sigma } = self.augmentation {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return fail(format!("noise sigma {sigma} must be >= 0"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn objective(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.lambda,
            proximal: if self.mode == Mode::Proximal {
                self.proximal_weight
            } else {
                0.0
            },
            sqrtkl_into_encoder: self.sqrtkl_into_encoder,
            bank_grad: self.mode == Mode::Parametric,
        }
    }
}

/// Per-epoch summary. Loss fields are means over instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub ce: f64,
    pub sqrtkl: f64,
    pub total: f64,
    /// Fraction of instances whose best-scoring bank row is their own.
    pub inst_acc: f64,
    /// Learning rate at the first iteration of the epoch.
    pub lr: f64,
    pub secs: f64,
}

pub const METRIC_LOG_HEADER: &str = "# epoch,ce,sqrtkl,total,inst_acc,lr,secs";

impl MetricRecord {
    /// `epoch,ce,sqrtkl,total,inst_acc,lr,secs`; floats use shortest
    /// round-trip formatting, `secs` has millisecond resolution.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.ce, self.sqrtkl, self.total, self.inst_acc, self.lr, self.secs
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("metric line has {} fields: `{line}`", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("field {i} of `{line}`: {e}")))
        };
        Ok(Self {
            epoch: fields[0]
                .parse()
                .map_err(|e| Error::Format(format!("epoch in `{line}`: {e}")))?,
            ce: num(1)?,
            sqrtkl: num(2)?,
            total: num(3)?,
            inst_acc: num(4)?,
            lr: num(5)?,
            secs: num(6)?,
        })
    }

    /// Equality on everything except wall-clock time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.ce.to_bits() == other.ce.to_bits()
            && self.sqrtkl.to_bits() == other.sqrtkl.to_bits()
            && self.total.to_bits() == other.total.to_bits()
            && self.inst_acc.to_bits() == other.inst_acc.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub optimizer: Sgd,
    pub bank: MemoryBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: SeededRng,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    /// Fresh encoder and optimizer buffers, bank initialized per `config.init`.
    pub fn new(config: &TrainConfig, encoder_config: EncoderConfig, data: Instances<'_>) -> Result<Self> {
        config.validate(data.len())?;
        let encoder = Encoder::init(encoder_config)?;
        if encoder.input_dim() != data.dim() {
            return Err(Error::Config(format!(
                "encoder input width {} does not match dataset width {}",
                encoder.input_dim(),
                data.dim()
            )));
        }
        let mut rng = SeededRng::new(config.seed);
        let mut bank = MemoryBank::new(
            data.len(),
            encoder.embedding_dim(),
            config.bank_momentum,
            config.normalize,
            config.temperature,
        )?;
        match config.init {
            BankInit::Calibrate => bank.calibrate_init(&encoder, data.features)?,
            BankInit::Random => bank.random_init(&mut rng)?,
        }
        let shapes: Vec<usize> = encoder.params.tensors().iter().map(|t| t.len()).collect();
        let optimizer = Sgd::new(config.sgd_momentum, config.weight_decay, &shapes);
        Ok(Self {
            encoder,
            optimizer,
            bank,
            epoch: 0,
            iteration: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn iterations_per_epoch(n: usize, batch_size: usize) -> u64 {
        n.div_ceil(batch_size) as u64
    }
}

/// Builds the augmented input rows for `indices`.
pub fn augment(data: Instances<'_>, indices: &[usize], aug: &Augmentation, rng: &mut SeededRng) -> Result<Mat> {
    let mut x = data.features.select_rows(indices);
    match *aug {
        Augmentation::None => {}
        Augmentation::GaussianNoise { sigma } => {
            for v in x.as_mut_slice() {
                *v += sigma * rng.normal();
            }
        }
        Augmentation::CropFlip { pad } => {
            let shape = data.image_shape.ok_or_else(|| {
                Error::Config("crop_flip augmentation needs image data".into())
            })?;
            let (h, w) = (shape.height as isize, shape.width as isize);
            for r in 0..x.rows() {
                let dy = rng.below(2 * pad + 1) as isize - pad as isize;
                let dx = rng.below(2 * pad + 1) as isize - pad as isize;
                let flip = rng.coin();
                let src = data.features.row(indices[r]);
                let dst = x.row_mut(r);
                for c in 0..shape.channels {
                    let base = c * shape.height * shape.width;
                    for y in 0..h {
                        for xx in 0..w {
                            let sx = if flip { w - 1 - xx } else { xx } + dx;
                            let sy = y + dy;
                            let v = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                                src[base + (sy * w + sx) as usize]
                            } else {
                                0.0
                            };
                            dst[base + (y * w + xx) as usize] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

#[derive(Default)]
struct EpochTotals {
    ce: f64,
    sqrtkl: f64,
    total: f64,
    correct: usize,
    seen: usize,
}

/// One pass over the data in a seeded random order.
pub fn train_epoch(state: &mut TrainState, config: &TrainConfig, data: Instances<'_>) -> Result<MetricRecord> {
    config.validate(data.len())?;
    if state.bank.len() != data.len() {
        return Err(Error::Config(format!(
            "bank has {} rows, dataset has {} instances",
            state.bank.len(),
            data.len()
        )));
    }
    let start = Instant::now();
    let n = data.len();
    let per_epoch = TrainState::iterations_per_epoch(n, config.batch_size);
    let total_iters = per_epoch * config.epochs.max(state.epoch + 1) as u64;
    let first_lr = cosine_lr(state.iteration, total_iters, config.base_lr);

    let mut order: Vec<usize> = (0..n).collect();
    state.rng.shuffle(&mut order);

    let mut totals = EpochTotals::default();
    for batch in order.chunks(config.batch_size) {
        let lr = cosine_lr(state.iteration, total_iters, config.base_lr);
        train_step(state, config, data, batch, lr, &mut totals)?;
        state.iteration += 1;
    }
    state.epoch += 1;
    let seen = totals.seen as f64;
    Ok(MetricRecord {
        epoch: state.epoch,
        ce: totals.ce / seen,
        sqrtkl: totals.sqrtkl / seen,
        total: totals.total / seen,
        inst_acc: totals.correct as f64 / seen,
        lr: first_lr,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    data: Instances<'_>,
    batch: &[usize],
    lr: f64,
    totals: &mut EpochTotals,
) -> Result<()> {
    let x = augment(data, batch, &config.augmentation, &mut state.rng)?;
    let (z, tape) = state.encoder.forward(&x)?;
    let reports = score_batch(&state.bank, &z, batch, config.objective())?;
    check_finite(&reports, batch, &z)?;

    let b = batch.len() as f64;
    let mut grad_z = Mat::zeros(z.rows(), z.cols());
    for (pos, r) in reports.iter().enumerate() {
        for (g, v) in grad_z.row_mut(pos).iter_mut().zip(&r.grad_z) {
            *g = v / b;
        }
        totals.ce += r.ce;
        totals.sqrtkl += r.sqrtkl;
        totals.total += r.total;
        totals.seen += 1;
        if argmax(r.probs.as_slice()) == batch[pos] {
            totals.correct += 1;
        }
    }

    let (grads, _) = state.encoder.backward(&tape, &grad_z)?;
    state
        .optimizer
        .step(state.encoder.params.tensors_mut(), grads.tensors(), lr);
    state.encoder.params.step += 1;

    match config.mode {
        Mode::Parametric => parametric_bank_step(&mut state.bank, &reports, lr),
        Mode::Ours => {
            let probs = in_batch_probs(&reports, batch);
            let dirs = (0..batch.len())
                .map(|pos| CorrectedDirection::corrected(batch[pos], &probs, &z, pos))
                .collect::<Result<Vec<_>>>()?;
            dirs.iter().try_for_each(|d| state.bank.momentum_update(d))
        }
        Mode::NpidNaive | Mode::Proximal => (0..batch.len())
            .try_for_each(|pos| state.bank.momentum_update(&CorrectedDirection::naive(batch[pos], z.row(pos)))),
    }
}

/// Per-instance objectives in batch order.
fn score_batch(bank: &MemoryBank, z: &Mat, batch: &[usize], weights: ObjectiveWeights) -> Result<Vec<LossReport>> {
    (0..batch.len())
        .into_par_iter()
        .map(|pos| evaluate_instance(bank.weights(), bank.temperature, z.row(pos), batch[pos], weights))
        .collect()
}

/// `P[j, c]`: probability that in-batch instance `j` assigns to the class of in-batch instance `c`.
fn in_batch_probs(reports: &[LossReport], batch: &[usize]) -> Mat {
    let b = batch.len();
    let mut p = Mat::zeros(b, b);
    for (j, r) in reports.iter().enumerate() {
        for (c, &row) in batch.iter().enumerate() {
            p[(j, c)] = r.probs.as_slice()[row];
        }
    }
    p
}

fn check_finite(reports: &[LossReport], batch: &[usize], z: &Mat) -> Result<()> {
    for (pos, r) in reports.iter().enumerate() {
        if !r.total.is_finite() || r.grad_z.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite loss for instance {} (batch {:?}): {}; embedding {:?}",
                batch[pos],
                batch,
                r.to_log_line(),
                z.row(pos)
            )));
        }
    }
    Ok(())
}

/// Plain SGD on the bank rows with the batch-mean gradient; rows are
/// renormalized afterwards when the bank is normalized.
fn parametric_bank_step(bank: &mut MemoryBank, reports: &[LossReport], lr: f64) -> Result<()> {
    let b = reports.len() as f64;
    let normalize = bank.normalize;
    let w = bank.weights_mut();
    for r in reports {
        let gw = r
            .grad_w
            .as_ref()
            .ok_or_else(|| Error::Usage("parametric step needs bank gradients".into()))?;
        for (wv, g) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv -= lr * g / b;
        }
    }
    if normalize {
        for i in 0..w.rows() {
            let unit = l2_normalize(w.row(i))?;
            w.row_mut(i).copy_from_slice(&unit);
        }
    }
    Ok(())
}

/// One parametric-classifier iteration on an explicit batch, without
/// augmentation bookkeeping. Returns the mean total loss before the step.
pub fn parametric_mode_step(state: &mut TrainState, config: &TrainConfig, data: Instances<'_>, batch: &[usize], lr: f64) -> Result<f64> {
    if config.mode != Mode::Parametric {
        return Err(Error::Usage(format!("parametric step called in mode {}", config.mode)));
    }
    let mut totals = EpochTotals::default();
    train_step(state, config, data, batch, lr, &mut totals)?;
    state.iteration += 1;
    Ok(totals.total / totals.seen as f64)
}

/// Where a run writes its metric log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
}

impl RunOutput<'_> {
    pub fn metric_log(&self) -> std::path::PathBuf {
        self.dir.join("metrics.log")
    }

    pub fn final_checkpoint(&self) -> std::path::PathBuf {
        self.dir.join("checkpoint.ckpt")
    }

    fn append(&self, line: &str) -> Result<()> {
        let path = self.metric_log();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Fresh state, then [`continue_pretrain`].
pub fn run_pretrain(
    config: &TrainConfig,
    encoder_config: EncoderConfig,
    data: Instances<'_>,
    out: Option<RunOutput<'_>>,
) -> Result<(TrainState, Vec<MetricRecord>)> {
    let state = TrainState::new(config, encoder_config, data)?;
    if let Some(o) = &out {
        std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
        let path = o.metric_log();
        std::fs::write(&path, format!("{METRIC_LOG_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
    }
    continue_pretrain(state, config, data, out)
}

/// Trains until `config.epochs` epochs are complete. Appends one metric
/// line per epoch, writes periodic checkpoints when configured, and always
/// writes `checkpoint.ckpt` at the end.
pub fn continue_pretrain(
    mut state: TrainState,
    config: &TrainConfig,
    data: Instances<'_>,
    out: Option<RunOutput<'_>>,
) -> Result<(TrainState, Vec<MetricRecord>)> {
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let record = train_epoch(&mut state, config, data)?;
        state.history.push(record.clone());
        if let Some(o) = &out {
            o.append(&record.to_line())?;
            if config.checkpoint_every > 0 && state.epoch.is_multiple_of(config.checkpoint_every) {
                let path = o.dir.join(format!("checkpoint-epoch{:04}.ckpt", state.epoch));
                checkpoint::save_checkpoint(&state, config, &path)?;
            }
        }
        log.push(record);
    }
    if let Some(o) = &out {
        checkpoint::save_checkpoint(&state, config, &o.final_checkpoint())?;
    }
    Ok((state, log))
}
