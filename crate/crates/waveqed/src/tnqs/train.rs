//! Residual-driven training of interval models and the sequential
//! evolution driver.
//!
//! Each epoch draws a batch of time points from the curriculum window
//! and, at every time point, outcome strings from the current blend.
//! One tape per time point records the parameter leaves, the encoder,
//! and each sampled probability; the generator term of the residual is
//! evaluated outside the tape, so the backward sweep yields exactly the
//! loss gradient with the generator contribution removed.  Optimization
//! is Adam under a step-decayed learning rate.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::autodiff::{Dual, Tape, TapeIdx, ValueCtx};
use crate::povm::{self, PovmDistribution, PovmGenerator};
use crate::series::{EngineTag, ObservableSeries, RunMeta};

use super::transformer;
use super::{
    blended_probability, flow_sum_with, flow_terms, mix_words, sample_blended, stream,
    ConcatChain, ParamLayout, TnqsArchitecture, TnqsError, TnqsModel, TrainConfig, RESIDUAL_FLOOR,
    STREAM_BATCH_TIMES, STREAM_MEASURE, STREAM_TRAIN_SAMPLE,
};

/// Smoothing applied to the measured trajectory, matched to the
/// sampling noise of roughly a thousand configurations per step.
pub const SMOOTH_WINDOW: usize = 201;
pub const SMOOTH_ORDER: usize = 3;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Curriculum window at this epoch, in integration steps.
    pub window_steps: usize,
    /// L1 norm of the applied gradient (the time-derivative term).
    pub time_grad_l1: f64,
    /// L1 norm of the detached generator-term gradient, extrapolated
    /// from the first batch time point; present on diagnostic epochs.
    pub flow_grad_l1: Option<f64>,
}

/// Full record of one interval's optimization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub converged: bool,
    pub exit_epoch: usize,
    pub exit_loss: f64,
    pub cumulative_time_grad_l1: f64,
    pub cumulative_flow_grad_l1: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Plain-value evaluation of the blend at one time, with the encoder
/// context hoisted out of the per-string calls.
struct ValueEval<'a> {
    layout: &'a ParamLayout,
    theta: &'a [f64],
    chain: &'a ConcatChain,
    s: f64,
    context: Vec<f64>,
}

impl<'a> ValueEval<'a> {
    fn new(layout: &'a ParamLayout, theta: &'a [f64], chain: &'a ConcatChain, s: f64) -> Self {
        let mut ctx = ValueCtx;
        let context = transformer::encode(&mut ctx, layout, theta, s);
        ValueEval { layout, theta, chain, s, context }
    }

    fn probability(&self, tokens: &[u8]) -> f64 {
        let mut ctx = ValueCtx;
        blended_probability(
            &mut ctx,
            self.layout,
            self.theta,
            &self.context,
            self.chain.prev_probability(tokens),
            tokens,
            self.s,
        )
    }
}

/// Records one batch time point on the tape and accumulates the
/// gradient of its loss contribution into `grad`; returns that
/// contribution.
///
/// The generator sum is evaluated from plain values and enters the
/// residual as a constant, so the seeds below propagate the loss only
/// through the probability's derivative channel and through the floored
/// denominator.  Tape values and plain values run through identical
/// arithmetic, which keeps the two sides of the residual consistent.
#[allow(clippy::too_many_arguments)]
fn accumulate_timestep(
    tape: &mut Tape,
    layout: &ParamLayout,
    theta_vals: &[f64],
    chain: &ConcatChain,
    gen: &PovmGenerator,
    s_val: f64,
    interval: f64,
    samples: &[Vec<u8>],
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, TnqsError> {
    tape.reset();
    let theta: Vec<TapeIdx> = theta_vals.iter().map(|&v| tape.leaf(Dual::constant(v))).collect();
    let s = tape.leaf(Dual::seeded(s_val, 1.0 / interval));
    let context = transformer::encode(tape, layout, &theta, s);
    let values = ValueEval::new(layout, theta_vals, chain, s_val);
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut seeds = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for tokens in samples {
        let p_node = blended_probability(
            tape,
            layout,
            &theta,
            &context,
            chain.prev_probability(tokens),
            tokens,
            s,
        );
        let p = tape.value(p_node);
        let flow = flow_sum_with(gen, tokens, &mut cache, |b| Ok(values.probability(b)))?;
        let denom = p.v.max(RESIDUAL_FLOOR);
        let r = (p.d - flow) / denom;
        loss += weight * r.abs();
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        let seed_d = weight * sign / denom;
        let seed_v = if p.v > RESIDUAL_FLOOR { -weight * r.abs() / denom } else { 0.0 };
        seeds.push((p_node, Dual::seeded(seed_v, seed_d)));
    }
    let adjoints = tape.backward(&seeds);
    for (g, leaf) in grad.iter_mut().zip(&theta) {
        *g += adjoints[leaf.index()].v;
    }
    Ok(loss)
}

/// Gradient of the detached generator term for one batch time point:
/// the part of the full loss gradient that the training update leaves
/// out.  Diagnostic only.
#[allow(clippy::too_many_arguments)]
fn flow_gradient(
    layout: &ParamLayout,
    theta_vals: &[f64],
    chain: &ConcatChain,
    gen: &PovmGenerator,
    s_val: f64,
    interval: f64,
    samples: &[Vec<u8>],
    weight: f64,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let theta: Vec<TapeIdx> = theta_vals.iter().map(|&v| tape.leaf(Dual::constant(v))).collect();
    let s = tape.leaf(Dual::seeded(s_val, 1.0 / interval));
    let context = transformer::encode(&mut tape, layout, &theta, s);
    let mut nodes: HashMap<u64, TapeIdx> = HashMap::new();
    let mut seeds: Vec<(TapeIdx, Dual)> = Vec::new();
    for tokens in samples {
        let mut terms: Vec<(TapeIdx, f64)> = Vec::new();
        {
            let tape = &mut tape;
            let nodes = &mut nodes;
            let theta = &theta;
            let context = &context;
            flow_terms(gen, tokens, &mut |b: &[u8], coeff: f64| {
                if coeff == 0.0 {
                    return;
                }
                let key = super::pack_tokens(b);
                let idx = match nodes.get(&key) {
                    Some(&idx) => idx,
                    None => {
                        let idx = blended_probability(
                            tape,
                            layout,
                            theta,
                            context,
                            chain.prev_probability(b),
                            b,
                            s,
                        );
                        nodes.insert(key, idx);
                        idx
                    }
                };
                terms.push((idx, coeff));
            });
        }
        let key = super::pack_tokens(tokens);
        let p_node = match nodes.get(&key) {
            Some(&idx) => idx,
            None => {
                let idx = blended_probability(
                    &mut tape,
                    layout,
                    &theta,
                    &context,
                    chain.prev_probability(tokens),
                    tokens,
                    s,
                );
                nodes.insert(key, idx);
                idx
            }
        };
        let p = tape.value(p_node);
        let flow: f64 = terms.iter().map(|&(idx, c)| c * tape.value(idx).v).sum();
        let denom = p.v.max(RESIDUAL_FLOOR);
        let r = (p.d - flow) / denom;
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        for &(idx, coeff) in &terms {
            seeds.push((idx, Dual::seeded(-weight * sign * coeff / denom, 0.0)));
        }
    }
    let adjoints = tape.backward(&seeds);
    theta.iter().map(|leaf| adjoints[leaf.index()].v).collect()
}

/// Trains the model of the chain's current interval.
///
/// The model parameters start from a seed derived from (seed, interval
/// index); every random draw during training is keyed the same way, so
/// a run is reproducible draw for draw.  Early exit on the loss
/// threshold is only allowed once the curriculum window covers the full
/// interval; a non-finite loss aborts with the log collected so far.
pub fn train_interval(
    chain: &ConcatChain,
    gen: &PovmGenerator,
    arch: &TnqsArchitecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TnqsModel, TrainingLog), TnqsError> {
    arch.validate()?;
    cfg.validate()?;
    if chain.n() != gen.n {
        return Err(TnqsError::SizeMismatch { chain: chain.n(), got: gen.n });
    }
    if (chain.interval() - cfg.interval).abs() > 1e-12 * cfg.interval.max(1.0) {
        return Err(TnqsError::IntervalMismatch { chain: chain.interval(), config: cfg.interval });
    }

    let interval_idx = chain.frozen_intervals() as u64;
    let mut model = TnqsModel::new(gen.n, arch.clone(), mix_words(&[seed, interval_idx]))?;
    let layout = model.layout();
    let total = cfg.total_steps();
    let weight = cfg.dt / (cfg.time_steps_per_batch as f64 * cfg.samples_per_step as f64);

    let mut adam = Adam::new(layout.total);
    let mut tape = Tape::new();
    let mut grad = vec![0.0; layout.total];
    let mut log = TrainingLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let window = cfg.window_steps(epoch);
        let mut times_rng = stream(&[seed, STREAM_BATCH_TIMES, interval_idx, epoch as u64]);
        grad.fill(0.0);
        let mut epoch_loss = 0.0;
        let mut flow_l1 = None;
        for pos in 0..cfg.time_steps_per_batch {
            let k = times_rng.gen_range(0..=window);
            let s_val = (k as f64 * cfg.dt / cfg.interval).min(1.0);
            let samples: Vec<Vec<u8>> = (0..cfg.samples_per_step)
                .map(|i| {
                    let mut rng = stream(&[
                        seed,
                        STREAM_TRAIN_SAMPLE,
                        interval_idx,
                        epoch as u64,
                        pos as u64,
                        i as u64,
                    ]);
                    sample_blended(&model, chain, s_val, &mut rng)
                })
                .collect();
            epoch_loss += accumulate_timestep(
                &mut tape,
                &layout,
                &model.theta,
                chain,
                gen,
                s_val,
                cfg.interval,
                &samples,
                weight,
                &mut grad,
            )?;
            if pos == 0 && cfg.flow_grad_log_every > 0 && epoch % cfg.flow_grad_log_every == 0 {
                let fg = flow_gradient(
                    &layout,
                    &model.theta,
                    chain,
                    gen,
                    s_val,
                    cfg.interval,
                    &samples,
                    weight,
                );
                let l1: f64 = fg.iter().map(|g| g.abs()).sum();
                flow_l1 = Some(l1 * cfg.time_steps_per_batch as f64);
            }
        }
        if !epoch_loss.is_finite() {
            log.exit_epoch = epoch;
            log.exit_loss = epoch_loss;
            return Err(TnqsError::Diverged { epoch, loss: epoch_loss, log: Box::new(log) });
        }
        let time_l1: f64 = grad.iter().map(|g| g.abs()).sum();
        adam.update(&mut model.theta, &grad, lr);
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            learning_rate: lr,
            window_steps: window,
            time_grad_l1: time_l1,
            flow_grad_l1: flow_l1,
        });
        log.cumulative_time_grad_l1 += time_l1;
        if let Some(f) = flow_l1 {
            log.cumulative_flow_grad_l1 += f;
        }
        log.exit_epoch = epoch;
        log.exit_loss = epoch_loss;
        if window == total && epoch_loss < cfg.loss_threshold {
            log.converged = true;
            break;
        }
    }
    Ok((model, log))
}

/// One full neural-ansatz run: the measured trajectory, its smoothed
/// counterpart, and the per-interval training logs.
#[derive(Debug, Clone)]
pub struct TnqsRun {
    pub series: ObservableSeries,
    pub smoothed: ObservableSeries,
    pub logs: Vec<TrainingLog>,
}

/// Trains the requested number of intervals in sequence, measuring
/// observables at every integration step from sampled outcome strings.
///
/// When an interval fails to train, the series and logs of the
/// completed intervals ride along on the error.
pub fn evolve_tnqs(
    gen: &PovmGenerator,
    initial: &PovmDistribution,
    arch: &TnqsArchitecture,
    cfg: &TrainConfig,
    intervals: usize,
    seed: u64,
) -> Result<TnqsRun, TnqsError> {
    arch.validate()?;
    cfg.validate()?;
    if intervals == 0 {
        return Err(TnqsError::BadTrainConfig {
            reason: "evolution needs at least one interval".into(),
        });
    }
    if initial.n != gen.n {
        return Err(TnqsError::SizeMismatch { chain: initial.n, got: gen.n });
    }
    let mut chain = ConcatChain::new(initial.clone(), cfg.interval)?;
    let meta = RunMeta::new(cfg.dt, gen.config_hash()).with_seed(seed);
    let mut series = ObservableSeries::new(EngineTag::Tnqs, meta);
    let mut logs: Vec<TrainingLog> = Vec::new();
    let total = cfg.total_steps();

    for k in 0..intervals {
        let (model, log) = match train_interval(&chain, gen, arch, cfg, seed) {
            Ok(pair) => pair,
            Err(cause) => {
                return Err(TnqsError::EvolveAborted {
                    completed: k,
                    partial: Box::new(series),
                    logs,
                    cause: Box::new(cause),
                });
            }
        };
        logs.push(log);

        let base = chain.current_interval_start();
        let first_step = if k == 0 { 0 } else { 1 };
        for step in first_step..=total {
            let t = base + step as f64 * cfg.dt;
            let s = chain.locate(t)?;
            let point_idx = (k * (total + 1) + step) as u64;
            let samples: Vec<Vec<u8>> = (0..cfg.measure_samples)
                .map(|i| {
                    let mut rng =
                        stream(&[seed, STREAM_MEASURE, k as u64, point_idx, i as u64]);
                    sample_blended(&model, &chain, s, &mut rng)
                })
                .collect();
            let point = povm::estimate_observables(&samples, gen.frame(), gen.phases())?;
            series.push(t, point);
        }
        chain.push_model(model)?;
    }

    let smoothed = analysis::smooth_series(&series, SMOOTH_WINDOW, SMOOTH_ORDER)?;
    Ok(TnqsRun { series, smoothed, logs })
}

/// Self-describing training snapshot; the version field gates loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub interval_index: usize,
    pub seed: u64,
    pub model: TnqsModel,
    pub config: TrainConfig,
    pub log: TrainingLog,
}

impl Checkpoint {
    pub fn new(
        interval_index: usize,
        seed: u64,
        model: TnqsModel,
        config: TrainConfig,
        log: TrainingLog,
    ) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, interval_index, seed, model, config, log }
    }
}

/// Writes a checkpoint as JSON; floating-point values round-trip
/// exactly through the shortest-representation encoding.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TnqsError> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TnqsError> {
    let data = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&data)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(TnqsError::CheckpointVersion {
            got: checkpoint.version,
            current: CHECKPOINT_VERSION,
        });
    }
    Ok(checkpoint)
}
