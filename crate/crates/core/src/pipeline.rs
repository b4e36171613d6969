//! Transform optimization and final quantization.
//!
//! [`optimize_transforms`] learns one [`TransformParams`] per linear layer by
//! minimizing a loss from [`crate::apc`] over the calibration stream while the
//! fine-tuned weights stay frozen. [`quantize_model`] fuses the learned
//! transforms and freezes quantizer specs, producing `M_Q`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apc::{position_loss, LossConfig, LossParts, LossVariant, PositionTargets};
use crate::error::{AaqError, Result};
use crate::eval::{evaluate, mean_nll, EvalReport};
use crate::model::{
    make_fixture_pair, FixtureSpec, ForwardMode, ModelPair, QuantSettings, SidedTransform, TinyLM,
    PASSTHROUGH_BITS,
};
use crate::numerics::TensorMatrix;
use crate::quantizer::{calibrate_minmax, fake_quant, Granularity, MAX_BITS, MIN_BITS};
use crate::transform::{build_transform_with, normalized_hadamard, TransformParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Every position of the stream contributes its next-token distribution.
    AllPositions,
    /// The stream is cut into disjoint windows; only each window's last position counts.
    FinalPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Exploded,
}

impl Stability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Exploded => "exploded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AAQConfig {
    pub alpha: f64,
    pub k_top: usize,
    pub k_diff: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// `None` runs full-batch steps.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub bits_w: u32,
    pub bits_a: u32,
    pub symmetric: bool,
    pub variant: LossVariant,
    pub position_policy: PositionPolicy,
    /// Mask gradients outside the quantizer clamp range.
    pub ste: bool,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hadamard_prerotation: bool,
    /// Terminate as unstable when `|loss|` exceeds this.
    pub divergence_loss: f64,
    /// Terminate as unstable when probe PPL exceeds this multiple of its step-0 value.
    pub divergence_ppl_ratio: f64,
}

impl Default for AAQConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            k_top: 8,
            k_diff: 8,
            learning_rate: 1e-2,
            iterations: 200,
            batch_size: None,
            seed: 0,
            bits_w: 4,
            bits_a: 4,
            symmetric: false,
            variant: LossVariant::Apc,
            position_policy: PositionPolicy::AllPositions,
            ste: true,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hadamard_prerotation: false,
            divergence_loss: 1e6,
            divergence_ppl_ratio: 10.0,
        }
    }
}

fn check_bits(field: &str, bits: u32) -> Result<()> {
    if bits == PASSTHROUGH_BITS || (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(AaqError::config(
            field,
            format!("must be in {MIN_BITS}..={MAX_BITS} or {PASSTHROUGH_BITS} to disable"),
        ))
    }
}

impl AAQConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            k_top: self.k_top,
            k_diff: self.k_diff,
            variant: self.variant,
        }
    }

    pub fn quant_settings(&self) -> QuantSettings {
        QuantSettings {
            weight_bits: self.bits_w,
            act_bits: self.bits_a,
            weight_granularity: Granularity::PerRow,
            act_granularity: Granularity::PerTensor,
            symmetric: self.symmetric,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(AaqError::config("alpha", "must be finite and non-negative"));
        }
        if self.k_top > vocab {
            return Err(AaqError::config("k_top", format!("exceeds vocabulary size {vocab}")));
        }
        if self.k_diff > vocab {
            return Err(AaqError::config("k_diff", format!("exceeds vocabulary size {vocab}")));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(AaqError::config("learning_rate", "must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(AaqError::config("batch_size", "must be positive"));
        }
        check_bits("bits_w", self.bits_w)?;
        check_bits("bits_a", self.bits_a)?;
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(AaqError::config("beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(AaqError::config("beta2", "must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(AaqError::config("adam_eps", "must be positive"));
        }
        if !(self.divergence_loss > 0.0) {
            return Err(AaqError::config("divergence_loss", "must be positive"));
        }
        if !(self.divergence_ppl_ratio > 1.0) {
            return Err(AaqError::config("divergence_ppl_ratio", "must exceed 1"));
        }
        Ok(())
    }
}

/// One JSON document configuring fixture generation and the optimization run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fixture: FixtureSpec,
    pub aaq: AAQConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AaqError::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.fixture.validate()?;
        self.aaq.validate(self.fixture.vocab_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    #[serde(with = "crate::eval::float_repr")]
    pub loss: f64,
    #[serde(with = "crate::eval::float_repr")]
    pub kl_top: f64,
    #[serde(with = "crate::eval::float_repr")]
    pub cont_top: f64,
    #[serde(with = "crate::eval::float_repr")]
    pub ppl_probe: f64,
}

pub const TRACE_HEADER: &str = "step,loss,kl_top,cont_top,ppl_probe";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            crate::eval::fmt_float(r.loss),
            crate::eval::fmt_float(r.kl_top),
            crate::eval::fmt_float(r.cont_top),
            crate::eval::fmt_float(r.ppl_probe)
        ));
    }
    out
}

/// Everything needed to continue an optimization run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub step: usize,
    pub theta: Vec<TransformParams>,
    pub moment1: Vec<Vec<f64>>,
    pub moment2: Vec<Vec<f64>>,
    pub rng_seed: u64,
    pub rng_word_pos: u64,
    pub ppl_probe_start: Option<f64>,
    pub trace: Vec<TraceRow>,
    /// Wall time spent so far, in seconds.
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    Diverged { step: usize, reason: String },
}

impl Termination {
    pub fn stability(&self) -> Stability {
        match self {
            Termination::Completed => Stability::Stable,
            Termination::Diverged { .. } => Stability::Exploded,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub theta: Vec<TransformParams>,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    pub state: RunState,
}

/// Frozen references and batching for one optimization run.
pub struct TransformOptimizer<'a> {
    ft: &'a TinyLM,
    cfg: AAQConfig,
    loss: LossConfig,
    settings: QuantSettings,
    contexts: Vec<Vec<u32>>,
    targets: Vec<PositionTargets>,
    probe_contexts: Vec<Vec<u32>>,
    probe_next: Vec<u32>,
    prerotations: Vec<Option<TensorMatrix>>,
}

/// Contexts the loss is averaged over under `policy`.
pub fn calibration_contexts(m: &TinyLM, calib: &[u32], policy: PositionPolicy) -> Vec<Vec<u32>> {
    match policy {
        PositionPolicy::AllPositions => m.position_contexts(calib),
        PositionPolicy::FinalPosition => calib
            .chunks_exact(m.context_len)
            .map(|w| w.to_vec())
            .collect(),
    }
}

impl<'a> TransformOptimizer<'a> {
    pub fn new(pair: &'a ModelPair, calib: &[u32], probe: &[u32], cfg: &AAQConfig) -> Result<Self> {
        let ft = &pair.ft;
        ft.validate()?;
        pair.pt.validate()?;
        if pair.pt.vocab_size != ft.vocab_size || pair.pt.context_len != ft.context_len {
            return Err(AaqError::shape("pre-trained and fine-tuned models differ in shape"));
        }
        cfg.validate(ft.vocab_size)?;
        let contexts = calibration_contexts(ft, calib, cfg.position_policy);
        if contexts.is_empty() {
            return Err(AaqError::InvalidInput("calibration stream yields no contexts".into()));
        }
        if probe.len() < 2 {
            return Err(AaqError::InvalidInput("probe stream needs at least two tokens".into()));
        }
        let loss = cfg.loss_config();
        let lf = ft.forward_contexts(&contexts, ForwardMode::FullPrecision)?;
        let lp = pair.pt.forward_contexts(&contexts, ForwardMode::FullPrecision)?;
        let targets = (0..contexts.len())
            .into_par_iter()
            .map(|r| PositionTargets::new(lf.row(r), lp.row(r), &loss))
            .collect::<Result<Vec<_>>>()?;
        let prerotations = ft
            .layers
            .iter()
            .map(|l| {
                if cfg.hadamard_prerotation {
                    normalized_hadamard(l.in_dim()).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ft,
            cfg: cfg.clone(),
            loss,
            settings: cfg.quant_settings(),
            contexts,
            targets,
            probe_contexts: ft.position_contexts(&probe[..probe.len() - 1]),
            probe_next: probe[1..].to_vec(),
            prerotations,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn initial_state(&self) -> RunState {
        let theta: Vec<TransformParams> = self
            .ft
            .layers
            .iter()
            .map(|l| TransformParams::identity(l.in_dim()))
            .collect();
        let zeros: Vec<Vec<f64>> = theta.iter().map(|p| vec![0.0; p.num_params()]).collect();
        RunState {
            step: 0,
            theta,
            moment1: zeros.clone(),
            moment2: zeros,
            rng_seed: self.cfg.seed,
            rng_word_pos: 0,
            ppl_probe_start: None,
            trace: Vec::new(),
            elapsed_secs: 0.0,
        }
    }

    fn transforms(&self, theta: &[TransformParams]) -> Result<Vec<Option<SidedTransform>>> {
        if theta.len() != self.ft.layers.len() {
            return Err(AaqError::shape("one transform per layer required"));
        }
        theta
            .iter()
            .zip(&self.prerotations)
            .zip(&self.ft.layers)
            .map(|((p, pre), l)| {
                if p.dim != l.in_dim() {
                    return Err(AaqError::shape("transform dim does not match layer"));
                }
                Ok(Some(SidedTransform::shared(build_transform_with(p, pre.as_ref())?)))
            })
            .collect()
    }

    /// Mean loss parts over `indices` and, when `grad` is set, `∂loss/∂θ` per layer.
    fn evaluate_batch(
        &self,
        theta: &[TransformParams],
        indices: &[usize],
        grad: bool,
    ) -> Result<(LossParts, Option<Vec<Vec<f64>>>)> {
        let transforms = self.transforms(theta)?;
        let ctx: Vec<Vec<u32>> = indices.iter().map(|&i| self.contexts[i].clone()).collect();
        let (logits, cache) = self.ft.forward_cached(
            &ctx,
            ForwardMode::Quantized(self.settings),
            &transforms,
            grad,
        )?;
        let b = indices.len();
        let v = logits.cols();
        let rows = indices
            .par_iter()
            .enumerate()
            .map(|(r, &i)| {
                let mut g = grad.then(|| vec![0.0; v]);
                let parts = position_loss(&self.targets[i], logits.row(r), &self.loss, g.as_deref_mut())?;
                Ok((parts, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / b as f64;
        let mut parts = LossParts::default();
        for (p, _) in &rows {
            parts.pull += p.pull;
            parts.push += p.push;
        }
        parts.pull *= inv;
        parts.push *= inv;
        if !grad {
            return Ok((parts, None));
        }
        let mut data = Vec::with_capacity(b * v);
        for (_, g) in rows {
            data.extend(g.expect("gradient requested").into_iter().map(|x| x * inv));
        }
        let grad_logits = TensorMatrix::new(b, v, data)
            .map_err(|_| AaqError::Numeric("non-finite logit gradient".into()))?;
        let mut cache = cache.expect("cache kept");
        if !self.cfg.ste {
            cache.clear_masks();
        }
        let layer_grads = self.ft.backward_theta(&cache, &grad_logits)?;
        let grads = layer_grads
            .into_iter()
            .zip(theta)
            .map(|(g, p)| g.map(|g| g.total()).unwrap_or_else(|| vec![0.0; p.num_params()]))
            .collect();
        Ok((parts, Some(grads)))
    }

    /// Full-batch loss parts and θ-gradient.
    pub fn loss_and_grad(&self, theta: &[TransformParams]) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let all: Vec<usize> = (0..self.contexts.len()).collect();
        let (parts, g) = self.evaluate_batch(theta, &all, true)?;
        Ok((parts, g.expect("gradient requested")))
    }

    /// Full-batch loss parts without a gradient.
    pub fn loss(&self, theta: &[TransformParams]) -> Result<LossParts> {
        let all: Vec<usize> = (0..self.contexts.len()).collect();
        Ok(self.evaluate_batch(theta, &all, false)?.0)
    }

    /// Perplexity of the transformed, quantized model on the probe stream.
    pub fn probe_ppl(&self, theta: &[TransformParams]) -> Result<f64> {
        let transforms = self.transforms(theta)?;
        let (logits, _) = self.ft.forward_cached(
            &self.probe_contexts,
            ForwardMode::Quantized(self.settings),
            &transforms,
            false,
        )?;
        Ok(mean_nll(&logits, &self.probe_next)?.exp())
    }

    fn batch_indices(&self, state: &mut RunState) -> Vec<usize> {
        let n = self.contexts.len();
        let mut idx: Vec<usize> = (0..n).collect();
        match self.cfg.batch_size {
            Some(b) if b < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
                rng.set_word_pos(u128::from(state.rng_word_pos));
                idx.shuffle(&mut rng);
                state.rng_word_pos = rng.get_word_pos() as u64;
                idx.truncate(b);
                idx.sort_unstable();
                idx
            }
            _ => idx,
        }
    }

    fn record(&self, state: &mut RunState, parts: LossParts) -> Result<Option<Termination>> {
        let loss = parts.loss(self.cfg.alpha);
        let step = state.step;
        if !loss.is_finite() {
            return Err(AaqError::NonFiniteLoss {
                step,
                snapshot: Box::new(state.clone()),
            });
        }
        let ppl = self.probe_ppl(&state.theta)?;
        state.trace.push(TraceRow {
            step,
            loss,
            kl_top: parts.pull,
            cont_top: parts.push,
            ppl_probe: ppl,
        });
        let start = *state.ppl_probe_start.get_or_insert(ppl);
        if loss.abs() > self.cfg.divergence_loss {
            return Ok(Some(Termination::Diverged {
                step,
                reason: format!("loss magnitude {loss:.3e} above {:.3e}", self.cfg.divergence_loss),
            }));
        }
        if !ppl.is_finite() || ppl > self.cfg.divergence_ppl_ratio * start {
            return Ok(Some(Termination::Diverged {
                step,
                reason: format!("probe perplexity {ppl:.3e} above {}x its start {start:.3e}", self.cfg.divergence_ppl_ratio),
            }));
        }
        Ok(None)
    }

    fn update(&self, state: &mut RunState, grads: &[Vec<f64>]) -> Result<()> {
        let t = (state.step + 1) as i32;
        let lr = self.cfg.learning_rate;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps);
        for (i, g) in grads.iter().enumerate() {
            let mut flat = state.theta[i].flatten();
            match self.cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (x, gi) in flat.iter_mut().zip(g) {
                        *x -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let m = &mut state.moment1[i];
                    let v = &mut state.moment2[i];
                    for k in 0..flat.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        flat[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            state.theta[i] = TransformParams::from_flat(state.theta[i].dim, &flat)?;
        }
        Ok(())
    }

    /// Performs one recorded step and its update. Returns a termination once
    /// the run is over; the final row is recorded without an update.
    pub fn step(&self, state: &mut RunState) -> Result<Option<Termination>> {
        let started = Instant::now();
        let out = if state.step >= self.cfg.iterations {
            let parts = self.loss(&state.theta)?;
            Some(self.record(state, parts)?.unwrap_or(Termination::Completed))
        } else {
            let idx = self.batch_indices(state);
            let (parts, grads) = self.evaluate_batch(&state.theta, &idx, true)?;
            match self.record(state, parts)? {
                Some(t) => Some(t),
                None => {
                    self.update(state, &grads.expect("gradient requested"))?;
                    state.step += 1;
                    None
                }
            }
        };
        state.elapsed_secs += started.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Runs from `state` to termination.
    pub fn run(&self, mut state: RunState) -> Result<OptimizeResult> {
        loop {
            if let Some(termination) = self.step(&mut state)? {
                return Ok(OptimizeResult {
                    theta: state.theta.clone(),
                    trace: state.trace.clone(),
                    termination,
                    state,
                });
            }
        }
    }
}

/// Learns one transform per layer of `pair.ft`; `probe` is the held-out
/// stream used for perplexity tracking and divergence detection.
pub fn optimize_transforms(
    pair: &ModelPair,
    calib: &[u32],
    probe: &[u32],
    cfg: &AAQConfig,
) -> Result<OptimizeResult> {
    let opt = TransformOptimizer::new(pair, calib, probe, cfg)?;
    let state = opt.initial_state();
    opt.run(state)
}

/// Fuses `theta` into `ft`'s weights, rounds them onto their grid and freezes
/// activation specs from the calibration stream.
///
/// The weight side `W·T` is folded into each layer. The inverse side cannot
/// move across the preceding tanh, so it stays as the layer's input rotation.
pub fn quantize_model(
    ft: &TinyLM,
    theta: &[TransformParams],
    calib: &[u32],
    cfg: &AAQConfig,
) -> Result<TinyLM> {
    ft.validate()?;
    check_bits("bits_w", cfg.bits_w)?;
    check_bits("bits_a", cfg.bits_a)?;
    if theta.len() != ft.layers.len() {
        return Err(AaqError::shape(format!(
            "{} transforms for {} layers",
            theta.len(),
            ft.layers.len()
        )));
    }
    let settings = cfg.quant_settings();
    let mut m = ft.clone();
    for (layer, p) in m.layers.iter_mut().zip(theta) {
        if p.dim != layer.in_dim() {
            return Err(AaqError::shape("transform dim does not match layer"));
        }
        let trivial = p.is_identity() && !cfg.hadamard_prerotation;
        if !trivial {
            let pre = if cfg.hadamard_prerotation {
                Some(normalized_hadamard(p.dim)?)
            } else {
                None
            };
            let t = build_transform_with(p, pre.as_ref())?;
            layer.weight = layer.weight.matmul(&t.t)?;
            layer.input_rotation = Some(match &layer.input_rotation {
                Some(r) => t.t_inv.matmul(r)?,
                None => t.t_inv.clone(),
            });
            layer.weight_spec = None;
        }
        layer.transform = None;
        layer.hadamard_prerotation = false;
        layer.act_spec = None;
        if settings.weight_bits == PASSTHROUGH_BITS {
            layer.weight_spec = None;
            continue;
        }
        let spec = match &layer.weight_spec {
            Some(s) if s.bits == settings.weight_bits => s.clone(),
            _ => calibrate_minmax(&layer.weight, settings.weight_bits, settings.weight_granularity, settings.symmetric)?,
        };
        layer.weight = fake_quant(&layer.weight, &spec, false)?.dequantized;
        layer.weight_spec = Some(spec);
    }
    if settings.act_bits != PASSTHROUGH_BITS {
        let contexts = m.position_contexts(calib);
        if contexts.is_empty() {
            return Err(AaqError::InvalidInput("empty calibration stream".into()));
        }
        let transforms = vec![None; m.layers.len()];
        let (_, cache) = m.forward_cached(&contexts, ForwardMode::Quantized(settings), &transforms, true)?;
        let cache = cache.expect("cache kept");
        for i in 0..m.layers.len() {
            let x = cache.rotated_input(i);
            m.layers[i].act_spec = Some(calibrate_minmax(x, settings.act_bits, settings.act_granularity, settings.symmetric)?);
        }
    }
    Ok(m)
}

/// Result of one end-to-end run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mq: TinyLM,
    pub report: EvalReport,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    pub state: RunState,
}

/// Optimizes, quantizes and evaluates on an existing pair and streams.
pub fn run_pipeline(pair: &ModelPair, calib: &[u32], eval_stream: &[u32], cfg: &RunConfig) -> Result<RunOutput> {
    let opt = optimize_transforms(pair, calib, eval_stream, &cfg.aaq)?;
    let mq = quantize_model(&pair.ft, &opt.theta, calib, &cfg.aaq)?;
    let report = evaluate(pair, &mq, eval_stream, cfg, opt.termination.stability(), opt.trace.len())?;
    Ok(RunOutput {
        mq,
        report,
        trace: opt.trace,
        termination: opt.termination,
        state: opt.state,
    })
}

/// Generates the fixture for `spec` and runs the full pipeline on it.
pub fn run_aaq(spec: &FixtureSpec, cfg: &AAQConfig) -> Result<(TinyLM, EvalReport)> {
    let out = run_aaq_full(&RunConfig {
        fixture: spec.clone(),
        aaq: cfg.clone(),
    })?;
    Ok((out.mq, out.report))
}

pub fn run_aaq_full(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let fx = make_fixture_pair(&cfg.fixture)?;
    run_pipeline(&fx.pair, &fx.calibration, &fx.eval, cfg)
}
