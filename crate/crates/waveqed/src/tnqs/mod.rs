//! Time-dependent neural ansatz for the outcome distribution.
//!
//! An autoregressive encoder-decoder transformer represents the joint
//! outcome distribution of all emitters as a product of per-site
//! conditionals, normalized by construction.  The full horizon is split
//! into equal intervals; within interval m the represented distribution
//! is the convex blend
//!
//! `p(a, s) = (1 - s) p_prev(a) + s p_theta(a, s)`
//!
//! where s runs from 0 to 1 across the interval and `p_prev` is the
//! previous interval's endpoint (the initial distribution for m = 0).
//! The blend pins the left edge of every interval to the frozen past,
//! so the represented trajectory is continuous across interval seams
//! and exactly matches the initial condition at t = 0.
//!
//! Training minimizes the sampled master-equation residual: outcome
//! strings are drawn from the ansatz itself, and for each the local
//! residual compares the exact ansatz time derivative (propagated with
//! dual numbers) against the probability-space generator applied to the
//! ansatz.  The generator term is treated as data: gradients flow only
//! through the time-derivative channel and the residual denominator.

mod train;
mod transformer;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::autodiff::{Ctx, Dual, DualCtx, ValueCtx};
use crate::povm::{self, PovmDistribution, PovmError, PovmGenerator};
use crate::series::ObservableSeries;

pub use train::{
    evolve_tnqs, load_checkpoint, save_checkpoint, train_interval, Checkpoint, EpochRecord,
    TnqsRun, TrainingLog, CHECKPOINT_VERSION,
};
pub(crate) use transformer::ParamLayout;

/// Residual denominators are floored here so that rarely sampled
/// outcomes cannot produce infinite residuals.
pub(crate) const RESIDUAL_FLOOR: f64 = 1e-12;

/// Stream labels keeping every random draw addressable by counters.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SAMPLE: u64 = 2;
pub(crate) const STREAM_TRAIN_SAMPLE: u64 = 3;
pub(crate) const STREAM_BATCH_TIMES: u64 = 4;
pub(crate) const STREAM_MEASURE: u64 = 5;

#[derive(Debug, Error)]
pub enum TnqsError {
    #[error("architecture invalid: {reason}")]
    BadArchitecture { reason: String },
    #[error("training configuration invalid: {reason}")]
    BadTrainConfig { reason: String },
    #[error("time {t} lies outside the current interval [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("outcome string has {got} digits, expected {expected}")]
    TokenCount { got: usize, expected: usize },
    #[error("outcome digit {digit} out of range, outcomes are 0..=3")]
    BadToken { digit: u8 },
    #[error("chain and generator disagree on the emitter count: {chain} vs {got}")]
    SizeMismatch { chain: usize, got: usize },
    #[error("interval length must be positive and finite, got {interval}")]
    BadInterval { interval: f64 },
    #[error("chain interval {chain} does not match the configured interval {config}")]
    IntervalMismatch { chain: f64, config: f64 },
    #[error("sampling needs a positive sample count")]
    NoSamples,
    #[error("loss evaluation needs a nonempty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch} with loss {loss}")]
    Diverged { epoch: usize, loss: f64, log: Box<TrainingLog> },
    #[error("evolution aborted after {completed} completed intervals: {cause}")]
    EvolveAborted {
        completed: usize,
        partial: Box<ObservableSeries>,
        logs: Vec<TrainingLog>,
        #[source]
        cause: Box<TnqsError>,
    },
    #[error("checkpoint format {got} is not supported, current format is {current}")]
    CheckpointVersion { got: u32, current: u32 },
    #[error(transparent)]
    Povm(#[from] PovmError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

/// Shape of the transformer: hidden width, attention heads, block
/// counts, and the feed-forward widening factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TnqsArchitecture {
    pub d_h: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_multiplier: usize,
}

impl Default for TnqsArchitecture {
    fn default() -> Self {
        TnqsArchitecture {
            d_h: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 2,
            ff_multiplier: 4,
        }
    }
}

impl TnqsArchitecture {
    pub fn validate(&self) -> Result<(), TnqsError> {
        let bad = |reason: String| Err(TnqsError::BadArchitecture { reason });
        if self.d_h == 0 || self.heads == 0 {
            return bad(format!("width {} and heads {} must be positive", self.d_h, self.heads));
        }
        if !self.d_h.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.d_h, self.heads));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("encoder and decoder need at least one block each".into());
        }
        if self.ff_multiplier == 0 {
            return bad("feed-forward multiplier must be positive".into());
        }
        Ok(())
    }
}

/// Optimization schedule for one interval.
///
/// A batch covers `time_steps_per_batch` time points with
/// `samples_per_step` sampled outcome strings each.  The trained time
/// window starts at `curriculum_start` integration steps and widens by
/// `curriculum_increment` every `curriculum_every` epochs until it
/// covers the whole interval; early exit on `loss_threshold` is only
/// allowed once the window is full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_milestone_every: usize,
    pub time_steps_per_batch: usize,
    pub samples_per_step: usize,
    pub dt: f64,
    pub interval: f64,
    pub curriculum_start: usize,
    pub curriculum_increment: usize,
    pub curriculum_every: usize,
    pub loss_threshold: f64,
    pub measure_samples: usize,
    /// Epoch stride for the generator-term gradient diagnostic; zero
    /// disables it.
    pub flow_grad_log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20_000,
            learning_rate: 1e-2,
            lr_decay: 0.75,
            lr_milestone_every: 1000,
            time_steps_per_batch: 25,
            samples_per_step: 8,
            dt: 1e-3,
            interval: 0.25,
            curriculum_start: 5,
            curriculum_increment: 5,
            curriculum_every: 200,
            loss_threshold: 1e-2,
            measure_samples: 1000,
            flow_grad_log_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TnqsError> {
        let bad = |reason: String| Err(TnqsError::BadTrainConfig { reason });
        if self.epochs == 0 {
            return bad("epoch count must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive and finite", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("learning-rate decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.lr_milestone_every == 0 || self.curriculum_every == 0 {
            return bad("schedule strides must be positive".into());
        }
        if self.time_steps_per_batch == 0 || self.samples_per_step == 0 {
            return bad("batch must cover at least one time point and one sample".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("time step {} must be positive and finite", self.dt));
        }
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return bad(format!("interval {} must be positive and finite", self.interval));
        }
        if self.interval < self.dt {
            return bad(format!("interval {} must cover at least one step of {}", self.interval, self.dt));
        }
        // Measurement walks the interval in dt steps, so the interval
        // must tile into whole steps.
        let steps = (self.interval / self.dt).round();
        if (steps * self.dt - self.interval).abs() > 1e-9 * self.interval {
            return bad(format!(
                "interval {} is not a whole number of steps of {}",
                self.interval, self.dt
            ));
        }
        if self.curriculum_start == 0 {
            return bad("curriculum must start with at least one step".into());
        }
        if !(self.loss_threshold > 0.0 && self.loss_threshold.is_finite()) {
            return bad(format!("loss threshold {} must be positive and finite", self.loss_threshold));
        }
        if self.measure_samples == 0 {
            return bad("measurement needs at least one sample".into());
        }
        Ok(())
    }

    /// Integration steps per interval.
    pub fn total_steps(&self) -> usize {
        ((self.interval / self.dt).round() as usize).max(1)
    }

    /// Trained window at the given epoch, in integration steps.
    pub fn window_steps(&self, epoch: usize) -> usize {
        let grown = self.curriculum_start + self.curriculum_increment * (epoch / self.curriculum_every);
        grown.min(self.total_steps())
    }

    /// Step-decayed learning rate at the given epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_milestone_every) as i32)
    }

    /// Outcome strings per batch.
    pub fn batch_size(&self) -> usize {
        self.time_steps_per_batch * self.samples_per_step
    }

    /// Same schedule compressed or stretched to a different epoch
    /// budget: milestone and curriculum strides scale proportionally.
    pub fn scaled_to_epochs(&self, epochs: usize) -> Self {
        let scale = |stride: usize| -> usize {
            let scaled = (stride as u128 * epochs as u128 + self.epochs as u128 / 2)
                / self.epochs.max(1) as u128;
            (scaled as usize).max(1)
        };
        TrainConfig {
            epochs,
            lr_milestone_every: scale(self.lr_milestone_every),
            curriculum_every: scale(self.curriculum_every),
            ..self.clone()
        }
    }
}

/// Mixes words into a 64-bit value; used to derive per-interval seeds.
pub(crate) fn mix_words(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for byte in w.to_le_bytes() {
            h = (h ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Counter-keyed random stream: every draw site is addressed by a word
/// list, so schedules may be replayed or reordered without changing any
/// draw.
pub(crate) fn stream(words: &[u64]) -> ChaCha8Rng {
    let h = mix_words(words);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let mut x = h.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn check_tokens(n: usize, tokens: &[u8]) -> Result<(), TnqsError> {
    if tokens.len() != n {
        return Err(TnqsError::TokenCount { got: tokens.len(), expected: n });
    }
    if let Some(&digit) = tokens.iter().find(|&&d| d > 3) {
        return Err(TnqsError::BadToken { digit });
    }
    Ok(())
}

/// Index of an outcome string with site 0 as the most significant
/// base-four digit; matches the dense distribution layout.
pub(crate) fn outcome_index(tokens: &[u8]) -> usize {
    tokens.iter().fold(0usize, |acc, &d| acc * 4 + d as usize)
}

/// Packs an outcome string into a cache key.
pub(crate) fn pack_tokens(tokens: &[u8]) -> u64 {
    tokens.iter().fold(0u64, |acc, &d| acc << 2 | u64::from(d))
}

/// Autoregressive transformer over outcome strings with a scalar time
/// input; parameters live in one flat vector addressed by the layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TnqsModel {
    pub n: usize,
    pub arch: TnqsArchitecture,
    pub seed: u64,
    pub theta: Vec<f64>,
}

impl TnqsModel {
    /// Fresh model with deterministic parameter initialization.
    pub fn new(n: usize, arch: TnqsArchitecture, seed: u64) -> Result<Self, TnqsError> {
        arch.validate()?;
        if n == 0 {
            return Err(TnqsError::BadArchitecture {
                reason: "the ansatz needs at least one emitter".into(),
            });
        }
        let layout = ParamLayout::new(n, arch.d_h, arch.heads, arch.d_h * arch.ff_multiplier,
            arch.encoder_blocks, arch.decoder_blocks);
        let mut rng = stream(&[seed, STREAM_INIT]);
        let theta = transformer::init_theta(&layout, &mut rng);
        Ok(TnqsModel { n, arch, seed, theta })
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        ParamLayout::new(
            self.n,
            self.arch.d_h,
            self.arch.heads,
            self.arch.d_h * self.arch.ff_multiplier,
            self.arch.encoder_blocks,
            self.arch.decoder_blocks,
        )
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Raw network joint probability of one outcome string at the
    /// normalized interval time `s`.
    pub fn joint_value(&self, tokens: &[u8], s: f64) -> f64 {
        debug_assert_eq!(tokens.len(), self.n);
        let layout = self.layout();
        let mut ctx = ValueCtx;
        let context = transformer::encode(&mut ctx, &layout, &self.theta, s);
        transformer::joint_probability(&mut ctx, &layout, &self.theta, &context, tokens)
    }

    /// Per-slot conditional distributions at `s` for the given string.
    pub fn conditional_rows(&self, tokens: &[u8], s: f64) -> Vec<[f64; 4]> {
        debug_assert_eq!(tokens.len(), self.n);
        let layout = self.layout();
        let mut ctx = ValueCtx;
        let context = transformer::encode(&mut ctx, &layout, &self.theta, s);
        transformer::decode_conditionals(&mut ctx, &layout, &self.theta, &context, tokens)
    }

    /// Draws one outcome string slot by slot from the conditionals.
    pub(crate) fn sample_ancestral<R: Rng>(&self, s: f64, rng: &mut R) -> Vec<u8> {
        let layout = self.layout();
        let mut ctx = ValueCtx;
        let context = transformer::encode(&mut ctx, &layout, &self.theta, s);
        let mut tokens = vec![0u8; self.n];
        for slot in 0..self.n {
            // Causal masking makes slots >= slot irrelevant to row slot.
            let rows = transformer::decode_conditionals(&mut ctx, &layout, &self.theta, &context, &tokens);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut drawn = 3u8;
            for (d, &p) in rows[slot].iter().enumerate() {
                acc += p;
                if u < acc {
                    drawn = d as u8;
                    break;
                }
            }
            tokens[slot] = drawn;
        }
        tokens
    }

    /// Removes the time dependence: with zero time weights the encoder
    /// context is constant in `s`, so the raw network becomes static.
    pub fn zero_time_embedding(&mut self) {
        let layout = self.layout();
        for k in 0..layout.time_w.len {
            self.theta[layout.time_w.start + k] = 0.0;
        }
    }
}

/// One frozen slice of the represented trajectory.
#[derive(Debug, Clone)]
pub enum ChainEntry {
    /// The distribution the chain starts from.
    Fixed(PovmDistribution),
    /// A trained interval; evaluated at its right edge when acting as
    /// the previous entry.
    Model(TnqsModel),
}

/// Frozen past of the trajectory: the initial distribution plus one
/// trained model per completed interval.  The entry list never shrinks;
/// the interval currently being trained is kept outside the chain and
/// only pushed once frozen.
#[derive(Debug, Clone)]
pub struct ConcatChain {
    interval: f64,
    entries: Vec<ChainEntry>,
}

impl ConcatChain {
    pub fn new(initial: PovmDistribution, interval: f64) -> Result<Self, TnqsError> {
        initial.validate()?;
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(TnqsError::BadInterval { interval });
        }
        Ok(ConcatChain { interval, entries: vec![ChainEntry::Fixed(initial)] })
    }

    pub fn n(&self) -> usize {
        match &self.entries[0] {
            ChainEntry::Fixed(dist) => dist.n,
            ChainEntry::Model(model) => model.n,
        }
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    /// Completed intervals; also the zero-based index of the interval
    /// currently under training.
    pub fn frozen_intervals(&self) -> usize {
        self.entries.len() - 1
    }

    /// Left edge of the current interval.
    pub fn current_interval_start(&self) -> f64 {
        self.frozen_intervals() as f64 * self.interval
    }

    pub fn push_model(&mut self, model: TnqsModel) -> Result<(), TnqsError> {
        if model.n != self.n() {
            return Err(TnqsError::SizeMismatch { chain: self.n(), got: model.n });
        }
        self.entries.push(ChainEntry::Model(model));
        Ok(())
    }

    /// Probability the frozen past assigns to one string at the left
    /// edge of the current interval.
    pub(crate) fn prev_probability(&self, tokens: &[u8]) -> f64 {
        match self.entries.last().expect("chain always holds its initial entry") {
            ChainEntry::Fixed(dist) => dist.probs[outcome_index(tokens)],
            ChainEntry::Model(model) => model.joint_value(tokens, 1.0),
        }
    }

    /// Draws one string from the frozen past at the current left edge.
    pub(crate) fn sample_prev<R: Rng>(&self, rng: &mut R) -> Vec<u8> {
        match self.entries.last().expect("chain always holds its initial entry") {
            ChainEntry::Fixed(dist) => povm::sample_outcomes(dist, 1, rng)
                .pop()
                .expect("one sample was requested"),
            ChainEntry::Model(model) => model.sample_ancestral(1.0, rng),
        }
    }

    /// Normalized position of `t` inside the current interval.
    pub(crate) fn locate(&self, t: f64) -> Result<f64, TnqsError> {
        let lo = self.current_interval_start();
        let hi = lo + self.interval;
        let slack = 1e-9 * self.interval.max(1.0);
        if !t.is_finite() || t < lo - slack || t > hi + slack {
            return Err(TnqsError::TimeOutOfRange { t, lo, hi });
        }
        Ok(((t - lo) / self.interval).clamp(0.0, 1.0))
    }
}

/// Blend of the frozen past and the raw network at normalized time s:
/// `(1 - s) p_prev + s p_theta(s)`.  At s = 0 the network contribution
/// is multiplied by an exact zero, so the left edge reproduces the
/// previous entry bit for bit.
pub(crate) fn blended_probability<C: Ctx>(
    ctx: &mut C,
    layout: &ParamLayout,
    theta: &[C::V],
    context: &[C::V],
    prev_value: f64,
    tokens: &[u8],
    s: C::V,
) -> C::V {
    let p_model = transformer::joint_probability(ctx, layout, theta, context, tokens);
    let prev = ctx.lit(prev_value);
    let one = ctx.lit(1.0);
    let fade = ctx.sub(one, s);
    let from_prev = ctx.mul(fade, prev);
    let from_model = ctx.mul(s, p_model);
    ctx.add(from_prev, from_model)
}

/// A normalized, time-dependent distribution over outcome strings with
/// an exact time derivative; the residual and loss operate on this
/// interface so reference solutions can stand in for the network.
pub trait OutcomeAnsatz {
    fn n(&self) -> usize;
    fn probability(&self, tokens: &[u8], t: f64) -> Result<f64, TnqsError>;
    fn time_derivative(&self, tokens: &[u8], t: f64) -> Result<f64, TnqsError>;
}

/// The chain extended by the model of the current interval.
#[derive(Debug, Clone, Copy)]
pub struct BlendedInterval<'a> {
    model: &'a TnqsModel,
    chain: &'a ConcatChain,
}

impl<'a> BlendedInterval<'a> {
    pub fn new(model: &'a TnqsModel, chain: &'a ConcatChain) -> Result<Self, TnqsError> {
        if model.n != chain.n() {
            return Err(TnqsError::SizeMismatch { chain: chain.n(), got: model.n });
        }
        Ok(BlendedInterval { model, chain })
    }
}

impl OutcomeAnsatz for BlendedInterval<'_> {
    fn n(&self) -> usize {
        self.chain.n()
    }

    fn probability(&self, tokens: &[u8], t: f64) -> Result<f64, TnqsError> {
        check_tokens(self.n(), tokens)?;
        let s = self.chain.locate(t)?;
        let layout = self.model.layout();
        let mut ctx = ValueCtx;
        let context = transformer::encode(&mut ctx, &layout, &self.model.theta, s);
        Ok(blended_probability(
            &mut ctx,
            &layout,
            &self.model.theta,
            &context,
            self.chain.prev_probability(tokens),
            tokens,
            s,
        ))
    }

    fn time_derivative(&self, tokens: &[u8], t: f64) -> Result<f64, TnqsError> {
        check_tokens(self.n(), tokens)?;
        let s = self.chain.locate(t)?;
        let layout = self.model.layout();
        let mut ctx = DualCtx;
        let theta: Vec<Dual> = self.model.theta.iter().map(|&v| Dual::constant(v)).collect();
        // Seeding ds/dt = 1/interval makes every dual channel a
        // physical time derivative.
        let s_dual = Dual::seeded(s, 1.0 / self.chain.interval());
        let context = transformer::encode(&mut ctx, &layout, &theta, s_dual);
        let p = blended_probability(
            &mut ctx,
            &layout,
            &theta,
            &context,
            self.chain.prev_probability(tokens),
            tokens,
            s_dual,
        );
        Ok(p.d)
    }
}

/// Probability the blended ansatz assigns to one outcome string.
pub fn forward(
    model: &TnqsModel,
    chain: &ConcatChain,
    tokens: &[u8],
    t: f64,
) -> Result<f64, TnqsError> {
    BlendedInterval::new(model, chain)?.probability(tokens, t)
}

/// Log-probability of one outcome string.
pub fn forward_log(
    model: &TnqsModel,
    chain: &ConcatChain,
    tokens: &[u8],
    t: f64,
) -> Result<f64, TnqsError> {
    Ok(forward(model, chain, tokens, t)?.ln())
}

/// Exact physical time derivative of the blended probability.
pub fn time_derivative(
    model: &TnqsModel,
    chain: &ConcatChain,
    tokens: &[u8],
    t: f64,
) -> Result<f64, TnqsError> {
    BlendedInterval::new(model, chain)?.time_derivative(tokens, t)
}

/// Draws one string from the blend: with probability 1 - s from the
/// frozen past, otherwise ancestrally from the network conditionals.
pub(crate) fn sample_blended<R: Rng>(
    model: &TnqsModel,
    chain: &ConcatChain,
    s: f64,
    rng: &mut R,
) -> Vec<u8> {
    let fade = 1.0 - s;
    if rng.gen::<f64>() < fade {
        chain.sample_prev(rng)
    } else {
        model.sample_ancestral(s, rng)
    }
}

/// Draws outcome strings from the blended ansatz at time `t`.
///
/// Each string comes from its own counter-keyed stream addressed by
/// (seed, interval, epoch, time index, sample index), so draws are
/// independent of evaluation order and of how work is distributed.
pub fn sample(
    model: &TnqsModel,
    chain: &ConcatChain,
    t: f64,
    count: usize,
    seed: u64,
    epoch: u64,
    time_index: u64,
) -> Result<Vec<Vec<u8>>, TnqsError> {
    if count == 0 {
        return Err(TnqsError::NoSamples);
    }
    if model.n != chain.n() {
        return Err(TnqsError::SizeMismatch { chain: chain.n(), got: model.n });
    }
    let s = chain.locate(t)?;
    let interval_idx = chain.frozen_intervals() as u64;
    Ok((0..count)
        .map(|i| {
            let mut rng = stream(&[seed, STREAM_SAMPLE, interval_idx, epoch, time_index, i as u64]);
            sample_blended(model, chain, s, &mut rng)
        })
        .collect())
}

/// Visits every generator matrix element in the row of `tokens`: the
/// callback receives each source string together with its coefficient,
/// site blocks first, then pair blocks.  Strings may repeat across
/// blocks; coefficients are meant to be accumulated.
pub(crate) fn flow_terms(gen: &PovmGenerator, tokens: &[u8], visit: &mut dyn FnMut(&[u8], f64)) {
    let mut scratch = tokens.to_vec();
    for j in 0..gen.n {
        let block = gen.site_block(j);
        let row = tokens[j] as usize;
        for d in 0..4 {
            scratch[j] = d as u8;
            visit(&scratch, block[[row, d]]);
        }
        scratch[j] = tokens[j];
    }
    for (j, l, block) in gen.pair_blocks() {
        let row = 4 * tokens[*j] as usize + tokens[*l] as usize;
        for bj in 0..4 {
            for bl in 0..4 {
                scratch[*j] = bj as u8;
                scratch[*l] = bl as u8;
                visit(&scratch, block[[row, 4 * bj + bl]]);
            }
        }
        scratch[*j] = tokens[*j];
        scratch[*l] = tokens[*l];
    }
}

/// Row of the generator applied to the ansatz, touching only strings
/// connected to `tokens` through a site or pair block.  Values are
/// memoized in the supplied cache, which must be specific to one
/// evaluation time.
pub(crate) fn flow_sum_with<F>(
    gen: &PovmGenerator,
    tokens: &[u8],
    cache: &mut HashMap<u64, f64>,
    mut value: F,
) -> Result<f64, TnqsError>
where
    F: FnMut(&[u8]) -> Result<f64, TnqsError>,
{
    let mut acc = 0.0;
    let mut failure: Option<TnqsError> = None;
    flow_terms(gen, tokens, &mut |b, coeff| {
        if failure.is_some() || coeff == 0.0 {
            return;
        }
        let key = pack_tokens(b);
        let v = match cache.get(&key) {
            Some(&v) => v,
            None => match value(b) {
                Ok(v) => {
                    cache.insert(key, v);
                    v
                }
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            },
        };
        acc += coeff * v;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

/// Master-equation residual of one outcome string:
/// `(dp/dt - (A p)(a)) / max(p(a), floor)`.
pub fn local_residual<A: OutcomeAnsatz + ?Sized>(
    ansatz: &A,
    gen: &PovmGenerator,
    tokens: &[u8],
    t: f64,
) -> Result<f64, TnqsError> {
    if ansatz.n() != gen.n {
        return Err(TnqsError::SizeMismatch { chain: ansatz.n(), got: gen.n });
    }
    check_tokens(gen.n, tokens)?;
    let p = ansatz.probability(tokens, t)?;
    let dpdt = ansatz.time_derivative(tokens, t)?;
    let mut cache = HashMap::new();
    let flow = flow_sum_with(gen, tokens, &mut cache, |b| ansatz.probability(b, t))?;
    Ok((dpdt - flow) / p.max(RESIDUAL_FLOOR))
}

/// Sampled residual loss over a batch of (time, outcome strings)
/// pairs: `dt / |batch|` times the sum over times of the per-time mean
/// absolute residual.
pub fn loss<A: OutcomeAnsatz + ?Sized>(
    ansatz: &A,
    gen: &PovmGenerator,
    batch: &[(f64, Vec<Vec<u8>>)],
    dt: f64,
) -> Result<f64, TnqsError> {
    if batch.is_empty() {
        return Err(TnqsError::EmptyBatch);
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(TnqsError::BadTrainConfig {
            reason: format!("loss weighting step {dt} must be positive and finite"),
        });
    }
    if ansatz.n() != gen.n {
        return Err(TnqsError::SizeMismatch { chain: ansatz.n(), got: gen.n });
    }
    let mut total = 0.0;
    for (t, samples) in batch {
        if samples.is_empty() {
            return Err(TnqsError::NoSamples);
        }
        let mut cache = HashMap::new();
        let mut acc = 0.0;
        for tokens in samples {
            check_tokens(gen.n, tokens)?;
            let p = ansatz.probability(tokens, *t)?;
            let dpdt = ansatz.time_derivative(tokens, *t)?;
            let flow = flow_sum_with(gen, tokens, &mut cache, |b| ansatz.probability(b, *t))?;
            acc += ((dpdt - flow) / p.max(RESIDUAL_FLOOR)).abs();
        }
        total += acc / samples.len() as f64;
    }
    Ok(total * dt / batch.len() as f64)
}
