//! Losses, the Adam optimizer, the batch-size-one training loop and the
//! patient-level fold split.

mod adam;
mod folds;
mod loss;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_update, Adam, AdamConfig};
pub use folds::{make_folds, FoldSplit};
pub use loss::{cross_entropy_loss, dice_loss, hard_dice_loss, DiceLossParams, LossKind};

use crate::autodiff::{Graph, Mode};
use crate::eval::compare_masks;
use crate::nn::{slice_input, volume_input, Checkpoint, NetSpec, Network, NnError};
use crate::preprocess::{pad_slices, LabelMask, Volume};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("fold split: {0}")]
    Folds(String),
    #[error("non-finite gradient in {path} at optimizer step {step}")]
    NanGradient { path: String, step: u64 },
    #[error("loss diverged at iteration {iteration}; last good checkpoint: {last_good:?}")]
    Diverged { iteration: u64, last_good: Option<u64> },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// ChaCha8 stream for parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// ChaCha8 stream for sampling order and dropout.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Optimizer steps; each consumes one slice (U-Net) or volume (V-Net).
    pub iterations: u64,
    pub loss: LossKind,
    pub dice: DiceLossParams,
    /// Cross-entropy weights of background, VAT, SAT.
    pub class_weights: [f64; 3],
    pub seed: u64,
    /// Validation cadence of the training curve; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Checkpoint cadence; 0 emits only the final checkpoint.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Defaults per architecture: 65000 iterations for the U-Net, 15000 for
    /// the V-Net, learning rate 1e-4, uniform class weights.
    pub fn for_spec(spec: &NetSpec) -> Self {
        let iterations = match spec {
            NetSpec::Unet(_) => 65_000,
            NetSpec::Vnet(_) => 15_000,
        };
        TrainConfig {
            learning_rate: 1e-4,
            iterations,
            loss: LossKind::CrossEntropy,
            dice: DiceLossParams::default(),
            class_weights: [1.0; 3],
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().all(|&w| w == 0.0) {
            return Err(TrainError::Config(format!("bad class weights {:?}", self.class_weights)));
        }
        self.dice.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// A preprocessed scan with its reference labels, both at network
/// resolution (in-plane padded, slice axis unpadded).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainScan {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMask,
}

/// One network input with its flattened target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub target: Vec<u8>,
}

fn pad_label_slices(labels: &LabelMask, depth: usize) -> Vec<u8> {
    let d = labels.dims();
    let mut out = labels.data().to_vec();
    let last = labels.slice(d.depth - 1).to_vec();
    for _ in d.depth..depth {
        out.extend_from_slice(&last);
    }
    out
}

/// Splits scans into training samples: every slice for the U-Net, every
/// volume padded to the fixed depth (last slice repeated) for the V-Net.
pub fn make_samples(spec: &NetSpec, scans: &[TrainScan]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for scan in scans {
        if scan.volume.dims() != scan.labels.dims() {
            return Err(TrainError::Config(format!(
                "{}: volume {:?} vs labels {:?}",
                scan.id,
                scan.volume.dims(),
                scan.labels.dims()
            )));
        }
        match spec {
            NetSpec::Unet(_) => {
                for z in 0..scan.volume.dims().depth {
                    out.push(Sample { input: slice_input(&scan.volume, z), target: scan.labels.slice(z).to_vec() });
                }
            }
            NetSpec::Vnet(v) => {
                let (padded, _) =
                    pad_slices(&scan.volume, v.input_depth).map_err(|e| TrainError::Config(format!("{}: {e}", scan.id)))?;
                out.push(Sample { input: volume_input(&padded), target: pad_label_slices(&scan.labels, v.input_depth) });
            }
        }
    }
    for s in &out {
        spec.check_input(s.input.shape())?;
    }
    Ok(out)
}

/// Uniform sampling without replacement, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        EpochSampler { order: (0..n).collect(), pos: n }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            use rand::seq::SliceRandom;
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Validation dice at one iteration plus the mean training loss since the
/// previous point (NaN when no step was taken).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: u64,
    pub dice_vat: f64,
    pub dice_sat: f64,
    pub loss: f64,
}

impl CurvePoint {
    pub fn mean_dice(&self) -> f64 {
        (self.dice_vat + self.dice_sat) / 2.0
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,dice_vat,dice_sat,loss\n");
    for p in curve {
        writeln!(out, "{},{},{},{}", p.iteration, p.dice_vat, p.dice_sat, p.loss).unwrap();
    }
    out
}

/// Iteration with the highest mean VAT/SAT dice; the earliest wins ties.
pub fn select_checkpoint(curve: &[CurvePoint]) -> Option<u64> {
    let mut best: Option<&CurvePoint> = None;
    for p in curve {
        if best.is_none_or(|b| p.mean_dice() > b.mean_dice()) {
            best = Some(p);
        }
    }
    best.map(|p| p.iteration)
}

/// Freshly initialized network from the init stream of `seed`.
pub fn init_network(spec: NetSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    Ok(Network::build(spec, &mut rng)?)
}

/// Mean per-scan `[VAT, SAT]` dice of the network's segmentation.
pub fn validation_dice(net: &Network, scans: &[TrainScan]) -> Result<[f64; 2]> {
    if scans.is_empty() {
        return Err(TrainError::Config("no scans to evaluate".into()));
    }
    let mut sum = [0.0; 2];
    for scan in scans {
        let pred = net.segment(&scan.volume)?;
        let d = compare_masks(&pred, &scan.labels).map_err(|e| TrainError::Config(format!("{}: {e}", scan.id)))?;
        sum[0] += d[0];
        sum[1] += d[1];
    }
    let n = scans.len() as f64;
    Ok([sum[0] / n, sum[1] / n])
}

pub enum TrainEvent<'a> {
    /// Periodic or final checkpoint.
    Checkpoint(&'a Checkpoint),
    /// A new curve point with the state it was measured on.
    Eval { point: &'a CurvePoint, checkpoint: &'a Checkpoint },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Checkpoint at `config.iterations`.
    pub final_checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

fn due(iteration: u64, every: u64, last: u64) -> bool {
    iteration == last || (every > 0 && iteration.is_multiple_of(every))
}

/// One optimizer step on one sample; returns the loss value.
fn step(net: &mut Network, adam: &mut Adam, sample: &Sample, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(sample.input.clone());
    let fwd = net.forward(&mut g, x, Mode::Train, rng)?;
    let loss = match config.loss {
        LossKind::CrossEntropy => {
            let w = config.class_weights.map(|w| w as f32);
            cross_entropy_loss(&mut g, fwd.scores, &sample.target, &w)?
        }
        LossKind::Dice => {
            let probs = g.softmax(fwd.scores, 1)?;
            dice_loss(&mut g, probs, &sample.target, &config.dice)?
        }
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let mut grads = vec![None; net.params().len()];
    for &(i, v) in &fwd.bindings {
        grads[i] = g.take_grad(v);
    }
    adam.step(net.params_mut(), &grads)?;
    Ok(value)
}

/// Trains `net` for `config.iterations` single-sample Adam steps.
///
/// Samples are drawn by an [`EpochSampler`] from the training stream of
/// `config.seed`, which also drives dropout. At every `eval_every`
/// iterations and at the end the validation dice is appended to the curve;
/// at every `checkpoint_every` iterations and at the end a checkpoint is
/// passed to `on_event`. A non-finite loss stops the run with
/// [`TrainError::Diverged`] before any later checkpoint is emitted.
pub fn train(
    mut net: Network,
    samples: &[Sample],
    validation: &[TrainScan],
    config: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() && config.iterations > 0 {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = Adam::new(config.adam(), net.params());
    let mut sampler = EpochSampler::new(samples.len());
    let mut curve = Vec::new();
    let mut last_good = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let last = config.iterations;
    let mut iteration = 0;
    let final_checkpoint = loop {
        let emit = iteration > 0 || last == 0;
        let eval_due = emit && due(iteration, config.eval_every, last);
        let ck_due = emit && due(iteration, config.checkpoint_every, last);
        let snapshot = (eval_due || ck_due).then(|| {
            let mut ck = Checkpoint::new(&net, iteration, &rng);
            ck.optimizer_step = adam.step_count();
            ck.optimizer = adam.state(net.params());
            ck
        });
        if eval_due {
            let [dice_vat, dice_sat] = validation_dice(&net, validation)?;
            let loss = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
            let point = CurvePoint { iteration, dice_vat, dice_sat, loss };
            log::info!("event=eval iteration={iteration} loss={loss:.6} dice_vat={dice_vat:.6} dice_sat={dice_sat:.6}");
            on_event(TrainEvent::Eval { point: &point, checkpoint: snapshot.as_ref().expect("snapshot taken") })?;
            curve.push(point);
            (loss_sum, loss_n) = (0.0, 0);
        }
        if ck_due {
            on_event(TrainEvent::Checkpoint(snapshot.as_ref().expect("snapshot taken")))?;
            last_good = Some(iteration);
        }
        if iteration == last {
            break snapshot.expect("the last iteration is always checkpointed");
        }
        iteration += 1;
        let sample = &samples[sampler.next(&mut rng)];
        let loss = step(&mut net, &mut adam, sample, config, &mut rng)?;
        if !loss.is_finite() {
            log::error!("event=diverged iteration={iteration} loss={loss}");
            return Err(TrainError::Diverged { iteration, last_good });
        }
        loss_sum += loss;
        loss_n += 1;
    };
    Ok(TrainOutcome { network: net, final_checkpoint, curve })
}
