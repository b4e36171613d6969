//! Synthetic pre-trained / fine-tuned model pairs.
//!
//! The fine-tuned model differs from the pre-trained one only in the output
//! projection: the rows of the refusal set `𝒜` gain `scale · vᵀh + scale · c`,
//! where `(v, c)` is a ridge-regression probe that reads "the last token is a
//! trigger" off the final hidden state. On trigger contexts this raises the
//! logits of `𝒜` by roughly `scale`, elsewhere by roughly zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ForwardMode, Linear, TinyLM};
use crate::error::{AaqError, Result};
use crate::numerics::{softmax_slice, topk_indices, TensorMatrix};

pub const MAX_FIXTURE_ATTEMPTS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_hidden: usize,
    pub perturbation_scale: f64,
    pub num_triggers: usize,
    pub refusal_size: usize,
    pub calibration_len: usize,
    pub eval_len: usize,
    pub num_trigger_contexts: usize,
    /// Required mean alignment-mass gain of FT over PT on trigger contexts.
    pub min_margin: f64,
    /// Required share of trigger contexts whose top-|𝒜| differences fall in 𝒜.
    pub min_premise_fraction: f64,
    /// Embedding channels blown up (and compensated in the first layer) to
    /// create activation outliers.
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    /// Weight scale of the output projection; larger values sharpen PT.
    pub output_gain: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 64,
            context_len: 4,
            embed_dim: 16,
            num_hidden: 2,
            perturbation_scale: 4.0,
            num_triggers: 4,
            refusal_size: 4,
            calibration_len: 512,
            eval_len: 512,
            num_trigger_contexts: 64,
            min_margin: 0.2,
            min_premise_fraction: 0.95,
            outlier_channels: 2,
            outlier_gain: 8.0,
            output_gain: 0.5,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("num_hidden", self.num_hidden),
            ("num_triggers", self.num_triggers),
            ("refusal_size", self.refusal_size),
            ("calibration_len", self.calibration_len),
            ("eval_len", self.eval_len),
            ("num_trigger_contexts", self.num_trigger_contexts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(AaqError::config(name, "must be at least 1"));
            }
        }
        // token 0 is the padding token and is never a trigger
        if self.vocab_size < self.refusal_size + self.num_triggers + 1 {
            return Err(AaqError::config(
                "vocab_size",
                format!(
                    "{} cannot hold {} refusal tokens, {} triggers and the padding token",
                    self.vocab_size, self.refusal_size, self.num_triggers
                ),
            ));
        }
        if self.eval_len < 2 {
            return Err(AaqError::config("eval_len", "must be at least 2"));
        }
        if !(self.perturbation_scale >= 0.0) || !self.perturbation_scale.is_finite() {
            return Err(AaqError::config("perturbation_scale", "must be finite and non-negative"));
        }
        if self.outlier_channels > self.embed_dim {
            return Err(AaqError::config("outlier_channels", "exceeds embed_dim"));
        }
        if !(self.outlier_gain > 0.0) {
            return Err(AaqError::config("outlier_gain", "must be positive"));
        }
        if !(self.output_gain > 0.0) || !self.output_gain.is_finite() {
            return Err(AaqError::config("output_gain", "must be positive"));
        }
        Ok(())
    }
}

/// Metadata that travels with both models of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub spec: FixtureSpec,
    pub attempt: u32,
    pub trigger_tokens: Vec<u32>,
    pub refusal_set: Vec<u32>,
    pub trigger_contexts: Vec<Vec<u32>>,
    /// Measured mean of `mass_FT − mass_PT` over the trigger contexts.
    pub margin: f64,
    /// Measured share of trigger contexts satisfying the selection premise.
    pub premise_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ModelPair {
    pub pt: TinyLM,
    pub ft: TinyLM,
    pub trigger_tokens: Vec<u32>,
    pub refusal_set: Vec<u32>,
    pub trigger_contexts: Vec<Vec<u32>>,
    pub margin: f64,
}

impl ModelPair {
    /// Reassembles a pair from two models that carry fixture metadata.
    pub fn from_models(pt: TinyLM, ft: TinyLM) -> Result<Self> {
        let meta = ft
            .fixture
            .clone()
            .ok_or_else(|| AaqError::format("fixture", "fine-tuned model carries no fixture metadata"))?;
        if pt.vocab_size != ft.vocab_size
            || pt.context_len != ft.context_len
            || pt.embed_dim != ft.embed_dim
            || pt.layers.len() != ft.layers.len()
        {
            return Err(AaqError::shape("pre-trained and fine-tuned models disagree in shape"));
        }
        Ok(Self {
            pt,
            ft,
            trigger_tokens: meta.trigger_tokens,
            refusal_set: meta.refusal_set,
            trigger_contexts: meta.trigger_contexts,
            margin: meta.margin,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FixtureData {
    pub pair: ModelPair,
    pub calibration: Vec<u32>,
    pub eval: Vec<u32>,
    pub meta: FixtureMeta,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> TensorMatrix {
    TensorMatrix::from_raw(rows, cols, (0..rows * cols).map(|_| normal(rng, std)).collect())
}

const HIDDEN_GAIN: f64 = 1.5;
const BIAS_STD: f64 = 0.1;

fn init_pretrained(spec: &FixtureSpec, seed: u64, rng: &mut ChaCha8Rng) -> TinyLM {
    let (v, c, d) = (spec.vocab_size, spec.context_len, spec.embed_dim);
    let h = c * d;
    let mut embedding = random_matrix(rng, v, d, 1.0);
    let mut channels: Vec<usize> = (0..d).collect();
    channels.shuffle(rng);
    let outliers = &channels[..spec.outlier_channels];
    for &ch in outliers {
        for r in 0..v {
            embedding.set(r, ch, embedding.get(r, ch) * spec.outlier_gain);
        }
    }
    let mut layers = Vec::with_capacity(spec.num_hidden + 1);
    for i in 0..=spec.num_hidden {
        let out = if i == spec.num_hidden { v } else { h };
        let gain = if i == spec.num_hidden { spec.output_gain } else { HIDDEN_GAIN };
        let mut w = random_matrix(rng, out, h, gain / (h as f64).sqrt());
        if i == 0 {
            // undo the outlier gain so the function stays well-conditioned
            for pos in 0..c {
                for &ch in outliers {
                    let col = pos * d + ch;
                    for r in 0..out {
                        w.set(r, col, w.get(r, col) / spec.outlier_gain);
                    }
                }
            }
        }
        let b = (0..out).map(|_| normal(rng, BIAS_STD)).collect();
        layers.push(Linear::new(w, b).expect("bias length matches"));
    }
    TinyLM {
        vocab_size: v,
        context_len: c,
        embed_dim: d,
        embedding,
        layers,
        seed,
        fixture: None,
    }
}

/// Final hidden state (input of the output projection) for each context.
fn final_hidden(m: &TinyLM, contexts: &[Vec<u32>]) -> Result<TensorMatrix> {
    let mut probe = m.clone();
    // swap the output projection for an identity; the last layer skips tanh,
    // so the result is exactly the final hidden activations
    let out = probe.layers.pop().expect("output layer");
    let h = out.in_dim();
    probe.layers.push(Linear::new(TensorMatrix::identity(h), vec![0.0; h])?);
    probe.forward_contexts(contexts, ForwardMode::FullPrecision)
}

fn random_context(rng: &mut ChaCha8Rng, c: usize, v: usize, last: Option<u32>) -> Vec<u32> {
    let mut ctx: Vec<u32> = (0..c).map(|_| rng.random_range(0..v as u32)).collect();
    if let Some(t) = last {
        ctx[c - 1] = t;
    }
    ctx
}

/// Ridge probe `(v, c)` with `vᵀh + c ≈ 1` on trigger contexts and `≈ 0` elsewhere.
fn fit_trigger_probe(
    m: &TinyLM,
    triggers: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    let (c, v) = (m.context_len, m.vocab_size);
    let samples = 1024;
    let mut contexts = Vec::with_capacity(samples);
    let mut targets = Vec::with_capacity(samples);
    for i in 0..samples {
        if i % 2 == 0 {
            let t = triggers[rng.random_range(0..triggers.len())];
            contexts.push(random_context(rng, c, v, Some(t)));
            targets.push(1.0);
        } else {
            let mut ctx = random_context(rng, c, v, None);
            while triggers.contains(&ctx[c - 1]) {
                ctx[c - 1] = rng.random_range(0..v as u32);
            }
            contexts.push(ctx);
            targets.push(0.0);
        }
    }
    let hs = final_hidden(m, &contexts)?;
    let h = hs.cols();
    let design = nalgebra::DMatrix::from_fn(samples, h + 1, |r, col| {
        if col < h {
            hs.get(r, col)
        } else {
            1.0
        }
    });
    let y = nalgebra::DVector::from_vec(targets);
    let mut gram = design.transpose() * &design;
    let ridge = 1e-3 * samples as f64;
    for i in 0..h {
        gram[(i, i)] += ridge;
    }
    let rhs = design.transpose() * y;
    let sol = gram
        .cholesky()
        .ok_or_else(|| AaqError::Numeric("trigger probe normal equations not positive definite".into()))?
        .solve(&rhs);
    Ok(((0..h).map(|i| sol[i]).collect(), sol[h]))
}

fn alignment_mass(probs: &[f64], refusal: &[u32]) -> f64 {
    refusal.iter().map(|&a| probs[a as usize]).sum()
}

/// Mean FT−PT alignment mass gain and the premise share over `contexts`.
fn measure_premise(
    pt: &TinyLM,
    ft: &TinyLM,
    contexts: &[Vec<u32>],
    refusal: &[u32],
) -> Result<(f64, f64)> {
    let lp = pt.forward_contexts(contexts, ForwardMode::FullPrecision)?;
    let lf = ft.forward_contexts(contexts, ForwardMode::FullPrecision)?;
    let mut gain = 0.0;
    let mut hits = 0usize;
    for r in 0..contexts.len() {
        let pp = softmax_slice(lp.row(r));
        let pf = softmax_slice(lf.row(r));
        gain += alignment_mass(&pf, refusal) - alignment_mass(&pp, refusal);
        let diffs: Vec<f64> = pf.iter().zip(&pp).map(|(a, b)| (a - b).abs()).collect();
        let top = topk_indices(&diffs, refusal.len())?;
        if top.iter().all(|i| refusal.contains(&(*i as u32))) {
            hits += 1;
        }
    }
    let n = contexts.len() as f64;
    Ok((gain / n, hits as f64 / n))
}

fn sub_seed(seed: u64, attempt: u32) -> u64 {
    seed.wrapping_add(u64::from(attempt).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn uniform_stream(rng: &mut ChaCha8Rng, len: usize, v: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..v as u32)).collect()
}

/// Generates a seeded PT/FT pair with calibration and evaluation streams.
///
/// With a positive perturbation scale the pair must reach `min_margin` and
/// `min_premise_fraction`; up to [`MAX_FIXTURE_ATTEMPTS`] sub-seeds are tried.
pub fn make_fixture_pair(spec: &FixtureSpec) -> Result<FixtureData> {
    spec.validate()?;
    let mut diagnostics = Vec::new();
    for attempt in 0..MAX_FIXTURE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, attempt));
        let pt = init_pretrained(spec, spec.seed, &mut rng);

        let mut ids: Vec<u32> = (1..spec.vocab_size as u32).collect();
        ids.shuffle(&mut rng);
        let mut trigger_tokens = ids[..spec.num_triggers].to_vec();
        let mut refusal_set = ids[spec.num_triggers..spec.num_triggers + spec.refusal_size].to_vec();
        trigger_tokens.sort_unstable();
        refusal_set.sort_unstable();

        let trigger_contexts: Vec<Vec<u32>> = (0..spec.num_trigger_contexts)
            .map(|i| {
                let t = trigger_tokens[i % trigger_tokens.len()];
                random_context(&mut rng, spec.context_len, spec.vocab_size, Some(t))
            })
            .collect();

        let mut ft = pt.clone();
        if spec.perturbation_scale > 0.0 {
            let (probe, offset) = fit_trigger_probe(&pt, &trigger_tokens, &mut rng)?;
            let out = ft.layers.last_mut().expect("output layer");
            for &a in &refusal_set {
                let row = a as usize;
                for (col, p) in probe.iter().enumerate() {
                    let w = out.weight.get(row, col);
                    out.weight.set(row, col, w + spec.perturbation_scale * p);
                }
                out.bias[row] += spec.perturbation_scale * offset;
            }
        }

        let (margin, premise_fraction) = measure_premise(&pt, &ft, &trigger_contexts, &refusal_set)?;
        let accepted = spec.perturbation_scale == 0.0
            || (margin >= spec.min_margin && premise_fraction >= spec.min_premise_fraction);
        if !accepted {
            diagnostics.push(format!(
                "attempt {attempt}: margin {margin:.4} (need {}), premise {premise_fraction:.3} (need {})",
                spec.min_margin, spec.min_premise_fraction
            ));
            continue;
        }

        let mut stream_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_57AE_A4D0_0001);
        let calibration = uniform_stream(&mut stream_rng, spec.calibration_len, spec.vocab_size);
        let eval = uniform_stream(&mut stream_rng, spec.eval_len, spec.vocab_size);

        let meta = FixtureMeta {
            spec: spec.clone(),
            attempt,
            trigger_tokens: trigger_tokens.clone(),
            refusal_set: refusal_set.clone(),
            trigger_contexts: trigger_contexts.clone(),
            margin,
            premise_fraction,
        };
        let mut pt = pt;
        pt.fixture = Some(meta.clone());
        ft.fixture = Some(meta.clone());
        return Ok(FixtureData {
            pair: ModelPair {
                pt,
                ft,
                trigger_tokens,
                refusal_set,
                trigger_contexts,
                margin,
            },
            calibration,
            eval,
            meta,
        });
    }
    Err(AaqError::Fixture {
        attempts: MAX_FIXTURE_ATTEMPTS,
        diagnostics: diagnostics.join("; "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_fixture_meets_margin() {
        let fx = make_fixture_pair(&FixtureSpec::default()).unwrap();
        assert!(fx.meta.margin >= 0.2, "margin {}", fx.meta.margin);
        assert!(fx.meta.premise_fraction >= 0.95);
        assert_eq!(fx.calibration.len(), 512);
        assert!(fx.pair.trigger_tokens.iter().all(|t| !fx.pair.refusal_set.contains(t)));
    }

    #[test]
    fn zero_perturbation_gives_identical_pair() {
        let spec = FixtureSpec {
            perturbation_scale: 0.0,
            ..FixtureSpec::default()
        };
        let fx = make_fixture_pair(&spec).unwrap();
        assert_eq!(fx.pair.pt.weight_bytes(), fx.pair.ft.weight_bytes());
        assert_eq!(fx.meta.margin, 0.0);
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = make_fixture_pair(&FixtureSpec::default()).unwrap();
        let b = make_fixture_pair(&FixtureSpec::default()).unwrap();
        assert_eq!(a.pair.ft, b.pair.ft);
        assert_eq!(a.pair.pt, b.pair.pt);
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.eval, b.eval);
    }

    #[test]
    fn validation_names_the_field() {
        let spec = FixtureSpec {
            vocab_size: 6,
            ..FixtureSpec::default()
        };
        match make_fixture_pair(&spec) {
            Err(AaqError::Config { field, .. }) => assert_eq!(field, "vocab_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_margin_reports_diagnostics() {
        let spec = FixtureSpec {
            perturbation_scale: 0.01,
            ..FixtureSpec::default()
        };
        match make_fixture_pair(&spec) {
            Err(AaqError::Fixture { attempts, diagnostics }) => {
                assert_eq!(attempts, MAX_FIXTURE_ATTEMPTS);
                assert!(diagnostics.contains("margin"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alignment_mass_grows_with_scale() {
        let mut prev = f64::NEG_INFINITY;
        for scale in [1.0, 2.0, 4.0] {
            let spec = FixtureSpec {
                perturbation_scale: scale,
                min_margin: 0.0,
                min_premise_fraction: 0.0,
                ..FixtureSpec::default()
            };
            let fx = make_fixture_pair(&spec).unwrap();
            let lf = fx
                .pair
                .ft
                .forward_contexts(&fx.pair.trigger_contexts, ForwardMode::FullPrecision)
                .unwrap();
            let mass: f64 = (0..lf.rows())
                .map(|r| alignment_mass(&softmax_slice(lf.row(r)), &fx.pair.refusal_set))
                .sum::<f64>()
                / lf.rows() as f64;
            assert!(mass >= prev);
            prev = mass;
        }
    }
}
