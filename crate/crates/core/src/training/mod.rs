//! Optimization of the denoiser: exact gradients from the tape, AdamW
//! updates with decoupled weight decay, finite-difference verification and
//! checkpoints.
//!
//! Training uses the unit-weighted objective `½‖ε − ε̂‖²` averaged over the
//! batch, with t drawn uniformly from {0, …, T} per molecule.

mod checkpoint;
mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{loss_breakdown, noise_batch, LossBreakdown, LossWeighting, NoiseSchedule, NoisedBatch};
use crate::error::{Error, Result};
use crate::gcpnet::{GcpNet, GraphBatch, ParameterSet};
use crate::moldata::{FeatureScaler, MoleculeGraph};
use crate::tape::{Mat, Tape, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, file_digest, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{check_gradients, GradientCheck, GradientInstance, ParameterError, FD_STEP};

/// Random generator used for training noise and data order.
pub type TrainRng = ChaCha8Rng;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Rescales the gradient to this global norm when exceeded.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-12,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            clip_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidArgument(format!("optimizer.{field} {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.learning_rate * self.weight_decay < 1.0) {
            return bad("weight_decay", "must be non-negative with learning_rate·weight_decay < 1");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad("clip_grad_norm", "must be positive");
            }
        }
        Ok(())
    }
}

/// Moment accumulators and step counter of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    fn check_shapes(&self, params: &ParameterSet) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .values()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.dim() == m.dim() && p.dim() == v.dim());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("optimizer moments do not match the parameter shapes".into()))
        }
    }

    /// One AdamW update: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Gradients are
    /// checked before anything is modified.
    pub fn apply(&mut self, params: &mut ParameterSet, grads: &[Mat]) -> Result<()> {
        self.check_shapes(params)?;
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { path: name.clone() });
            }
        }
        let c = &self.config;
        let (lr, b1, b2, eps) = (c.learning_rate, c.beta1, c.beta2, c.eps);
        let decay = 1.0 - lr * c.weight_decay;
        let step = self.step + 1;
        let bc1 = 1.0 - b1.powf(step as f64);
        let bc2 = 1.0 - b2.powf(step as f64);
        for ((p, g), (m, v)) in params.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p * decay - lr * update;
            });
        }
        self.step = step;
        Ok(())
    }
}

/// Loss and gradient norm of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

fn slice_batch(noised: &NoisedBatch, graphs: std::ops::Range<usize>) -> (Vec<usize>, Mat, Mat, Mat, Mat, Vec<usize>) {
    let offsets = noised.offsets();
    let start = offsets[graphs.start];
    let end = if graphs.end == noised.sizes.len() {
        noised.x.nrows()
    } else {
        offsets[graphs.end]
    };
    let rows = ndarray::s![start..end, ..];
    (
        noised.sizes[graphs.clone()].to_vec(),
        noised.z_x.slice(rows).to_owned(),
        noised.z_h.slice(rows).to_owned(),
        noised.eps_x.slice(rows).to_owned(),
        noised.eps_h.slice(rows).to_owned(),
        noised.t[graphs].to_vec(),
    )
}

/// Result of [`loss_and_gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub value: f64,
    pub grads: Vec<Mat>,
    pub eps_x: Mat,
    pub eps_h: Mat,
}

/// Value and parameter gradients of `Σ_g ½‖ε − ε̂‖² / denom` over a noised
/// batch, plus the predicted noise. The batch is split into chunks of
/// `chunk` molecules, each with its own tape; chunk results are reduced in
/// order.
pub fn loss_and_gradients(net: &GcpNet, noised: &NoisedBatch, steps: usize, denom: f64, chunk: usize) -> Result<Gradients> {
    let count = noised.sizes.len();
    let chunk = chunk.max(1);
    let ranges: Vec<std::ops::Range<usize>> = (0..count).step_by(chunk).map(|s| s..(s + chunk).min(count)).collect();
    let parts: Vec<Result<(f64, Vec<Mat>, Mat, Mat)>> = ranges
        .into_par_iter()
        .map(|range| {
            let (sizes, z_x, z_h, eps_x, eps_h, t) = slice_batch(noised, range);
            crate::gcpnet::check_centered(&sizes, &z_x)?;
            let graph = GraphBatch::build(&sizes, &z_x, net.config().cutoff, net.config().aggregation);
            let t_frac: Vec<f64> = t.iter().map(|&t| t as f64 / steps as f64).collect();
            let mut tape = Tape::new(net.params().values());
            let vars: Vec<Var> = (0..net.params().len()).map(|i| tape.param(i)).collect();
            let out = net.forward(&mut tape, &vars, &graph, &z_x, &z_h, &t_frac);
            let pred_x = tape.value(out.eps_x).clone();
            let pred_h = tape.value(out.eps_h).clone();
            let ex = tape.input(eps_x);
            let eh = tape.input(eps_h);
            let dx = tape.sub(out.eps_x, ex);
            let dh = tape.sub(out.eps_h, eh);
            let sx = tape.sum_squares(dx);
            let sh = tape.sum_squares(dh);
            let total = tape.add(sx, sh);
            let loss = tape.scale(total, 0.5 / denom);
            Ok((tape.scalar(loss), tape.backward(loss), pred_x, pred_h))
        })
        .collect();
    let mut value = 0.0;
    let mut grads: Option<Vec<Mat>> = None;
    let mut eps_x = Mat::zeros(noised.z_x.dim());
    let mut eps_h = Mat::zeros(noised.z_h.dim());
    let mut row = 0;
    for part in parts {
        let (v, g, px, ph) = part?;
        let rows = ndarray::s![row..row + px.nrows(), ..];
        eps_x.slice_mut(rows).assign(&px);
        eps_h.slice_mut(rows).assign(&ph);
        row += px.nrows();
        value += v;
        grads = Some(match grads {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
                acc
            }
        });
    }
    Ok(Gradients {
        value,
        grads: grads.expect("non-empty batch"),
        eps_x,
        eps_h,
    })
}

/// Global L2 norm of a gradient list.
pub fn gradient_norm(grads: &[Mat]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Molecules per tape when computing gradients.
pub const DEFAULT_GRAD_CHUNK: usize = 16;

/// One optimizer step on `batch`: draw t and noise, compute the unit-weighted
/// loss and its gradients, then update in place. A non-finite gradient
/// rejects the step with the parameter path and leaves `net` and `opt`
/// untouched.
pub fn train_step(
    batch: &[MoleculeGraph],
    net: &mut GcpNet,
    opt: &mut OptimizerState,
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    rng: &mut TrainRng,
) -> Result<StepReport> {
    train_step_chunked(batch, net, opt, schedule, scaler, rng, DEFAULT_GRAD_CHUNK)
}

/// [`train_step`] with an explicit gradient chunk size.
pub fn train_step_chunked(
    batch: &[MoleculeGraph],
    net: &mut GcpNet,
    opt: &mut OptimizerState,
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    rng: &mut TrainRng,
    chunk: usize,
) -> Result<StepReport> {
    if let Some(path) = net.params().first_non_finite() {
        return Err(Error::InvalidArgument(format!("parameter `{path}` is not finite")));
    }
    let noised = noise_batch(batch, scaler, schedule, rng, None)?;
    let out = loss_and_gradients(net, &noised, schedule.steps(), batch.len() as f64, chunk)?;
    let mut grads = out.grads;
    for (name, g) in net.params().names().iter().zip(&grads) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { path: name.clone() });
        }
    }
    let grad_norm = gradient_norm(&grads);
    if let Some(limit) = opt.config.clip_grad_norm {
        if grad_norm > limit {
            let s = limit / grad_norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    let loss = loss_breakdown(&noised, &out.eps_x, &out.eps_h, schedule, scaler, LossWeighting::Unit)?;
    opt.apply(net.params_mut(), &grads)?;
    Ok(StepReport {
        step: opt.step,
        loss,
        grad_norm,
    })
}

fn breakdown_from_noised(net: &GcpNet, noised: &NoisedBatch, schedule: &NoiseSchedule, scaler: &FeatureScaler, chunk: usize) -> Result<LossBreakdown> {
    let count = noised.sizes.len();
    let mut ex = Mat::zeros(noised.z_x.dim());
    let mut eh = Mat::zeros(noised.z_h.dim());
    for start in (0..count).step_by(chunk.max(1)) {
        let range = start..(start + chunk.max(1)).min(count);
        let (sizes, z_x, z_h, _, _, t) = slice_batch(noised, range.clone());
        let t_frac: Vec<f64> = t.iter().map(|&t| t as f64 / schedule.steps() as f64).collect();
        let (px, ph) = net.predict(&sizes, &z_x, &z_h, &t_frac)?;
        let row0 = noised.offsets()[range.start];
        let rows = ndarray::s![row0..row0 + px.nrows(), ..];
        ex.slice_mut(rows).assign(&px);
        eh.slice_mut(rows).assign(&ph);
    }
    loss_breakdown(noised, &ex, &eh, schedule, scaler, LossWeighting::Unit)
}

/// Loss on `molecules` with noise and steps drawn from a generator seeded
/// with `seed`, so repeated calls see the same latents.
pub fn evaluation_loss(
    net: &GcpNet,
    molecules: &[MoleculeGraph],
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut rng = TrainRng::seed_from_u64(seed);
    let noised = noise_batch(molecules, scaler, schedule, &mut rng, None)?;
    breakdown_from_noised(net, &noised, schedule, scaler, DEFAULT_GRAD_CHUNK)
}

/// Schedule of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Total optimizer steps, counting any completed before a resume.
    pub steps: u64,
    /// Seeds the per-epoch shuffles of the training set.
    pub data_seed: u64,
    /// Steps between validation evaluations; 0 disables them.
    pub eval_every: u64,
    /// Validation molecules used per evaluation (from the start of the set).
    pub eval_molecules: usize,
    /// Stops after this many evaluations without improvement; 0 disables it.
    pub patience: u32,
    /// Molecules per tape during gradient computation.
    pub grad_chunk: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 1000,
            data_seed: 0,
            eval_every: 250,
            eval_molecules: 500,
            patience: 0,
            grad_chunk: DEFAULT_GRAD_CHUNK,
        }
    }
}

/// Indices of the batch trained at `step` (0-based): epoch `e` visits the
/// training set in an order fixed by `(data_seed, e)`.
pub fn batch_indices(num_molecules: usize, batch_size: usize, data_seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = num_molecules.div_ceil(batch_size).max(1) as u64;
    let epoch = step / per_epoch;
    let k = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..num_molecules).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[k * batch_size..((k + 1) * batch_size).min(num_molecules)].to_vec()
}

/// Progress events emitted by [`fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitEvent {
    Step(StepReport),
    Validation { step: u64, loss: LossBreakdown },
}

/// What a [`fit`] observer sees after each event: the event and the state
/// it left behind, enough to write a resumable checkpoint.
pub struct FitProgress<'a> {
    pub event: FitEvent,
    pub net: &'a GcpNet,
    pub optimizer: &'a OptimizerState,
    pub rng: &'a TrainRng,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
}

/// Trains until `config.steps` optimizer steps have been taken (resuming
/// from `opt.step`) or validation stops improving. Validation losses use a
/// fixed noise seed so successive evaluations are comparable. An observer
/// error aborts the run.
pub fn fit(
    net: &mut GcpNet,
    opt: &mut OptimizerState,
    train: &[MoleculeGraph],
    validation: &[MoleculeGraph],
    schedule: &NoiseSchedule,
    scaler: &FeatureScaler,
    rng: &mut TrainRng,
    config: &FitConfig,
    observer: &mut dyn FnMut(FitProgress<'_>) -> Result<()>,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let eval_set = &validation[..config.eval_molecules.min(validation.len())];
    let start = opt.step;
    let mut best: Option<f64> = None;
    let mut stale = 0u32;
    let mut stopped_early = false;
    while opt.step < config.steps {
        let idx = batch_indices(train.len(), opt.config.batch_size, config.data_seed, opt.step);
        let batch: Vec<MoleculeGraph> = idx.iter().map(|&i| train[i].clone()).collect();
        let report = train_step_chunked(&batch, net, opt, schedule, scaler, rng, config.grad_chunk)?;
        observer(FitProgress {
            event: FitEvent::Step(report),
            net,
            optimizer: opt,
            rng,
        })?;
        if config.eval_every > 0 && !eval_set.is_empty() && opt.step % config.eval_every == 0 {
            let loss = evaluation_loss(net, eval_set, schedule, scaler, config.data_seed)?;
            observer(FitProgress {
                event: FitEvent::Validation { step: opt.step, loss },
                net,
                optimizer: opt,
                rng,
            })?;
            if best.is_none_or(|b| loss.l_t < b) {
                best = Some(loss.l_t);
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(FitSummary {
        steps_run: opt.step - start,
        final_step: opt.step,
        best_validation: best,
        stopped_early,
    })
}
