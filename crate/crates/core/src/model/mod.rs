//! TinyLM: an MLP next-token model over a fixed context window.
//!
//! Embeddings of the last `C` tokens are concatenated and fed through `H`
//! tanh hidden layers of width `C·d`, then projected to `V` logits. Every
//! linear layer owns a transform slot and quantization slots.

mod fixture;
mod io;

pub use fixture::{make_fixture_pair, FixtureData, FixtureMeta, FixtureSpec, ModelPair};
pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};
use crate::numerics::{matmul, matmul_transposed, LogitVector, TensorMatrix};
use crate::quantizer::{calibrate_minmax, fake_quant, Granularity, QuantSpec};
use crate::transform::{build_transform_with, normalized_hadamard, TransformMatrix, TransformParams};

/// Bit-width that disables quantization for a tensor class.
pub const PASSTHROUGH_BITS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_granularity: Granularity,
    pub act_granularity: Granularity,
    pub symmetric: bool,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 4,
            weight_granularity: Granularity::PerRow,
            act_granularity: Granularity::PerTensor,
            symmetric: false,
        }
    }
}

impl QuantSettings {
    pub fn with_bits(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
            ..Self::default()
        }
    }

    pub fn passthrough() -> Self {
        Self::with_bits(PASSTHROUGH_BITS, PASSTHROUGH_BITS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    FullPrecision,
    /// Applies each layer's transform slot: `(W·T)(T⁻¹·x)`.
    Transformed,
    /// Transformed, then fake-quantized weights and input activations.
    Quantized(QuantSettings),
}

/// One linear layer `z = W·x + b` and its attachments.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: TensorMatrix,
    pub bias: Vec<f64>,
    /// Inverse transform left behind by fusion; applied to the input online.
    pub input_rotation: Option<TensorMatrix>,
    pub weight_spec: Option<QuantSpec>,
    pub act_spec: Option<QuantSpec>,
    pub transform: Option<TransformParams>,
    pub hadamard_prerotation: bool,
}

impl Linear {
    pub fn new(weight: TensorMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(AaqError::shape("bias length must equal output width"));
        }
        Ok(Self {
            weight,
            bias,
            input_rotation: None,
            weight_spec: None,
            act_spec: None,
            transform: None,
            hadamard_prerotation: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `Q(W)·Q(R·x)` without bias for inputs `x` (`B × in`), ignoring the
    /// transform slot. Installed specs take precedence over `q`.
    pub fn quantized_preactivation(&self, x: &TensorMatrix, q: &QuantSettings) -> Result<TensorMatrix> {
        let rotated = match &self.input_rotation {
            Some(r) => matmul_transposed(x, r)?,
            None => x.clone(),
        };
        let (w, _) = quantize_weight(self, &self.weight, q, false)?;
        let (xq, _) = quantize_activation(self, &rotated, q, false)?;
        matmul_transposed(&xq, &w)
    }

    /// Materializes the transform slot, or `None` when the slot is empty.
    pub fn materialize_transform(&self) -> Result<Option<TransformMatrix>> {
        match &self.transform {
            None => Ok(None),
            Some(p) => {
                if p.dim != self.in_dim() {
                    return Err(AaqError::shape(format!(
                        "transform dim {} on a layer with {} inputs",
                        p.dim,
                        self.in_dim()
                    )));
                }
                let pre = if self.hadamard_prerotation {
                    Some(normalized_hadamard(p.dim)?)
                } else {
                    None
                };
                build_transform_with(p, pre.as_ref()).map(Some)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    /// `V × d`
    pub embedding: TensorMatrix,
    /// `H` hidden layers followed by the output projection.
    pub layers: Vec<Linear>,
    pub seed: u64,
    pub fixture: Option<FixtureMeta>,
}

/// Weight-side and input-side transforms for one layer. They coincide in
/// normal use; splitting them lets tests differentiate each side alone.
#[derive(Debug, Clone)]
pub struct SidedTransform {
    pub weight_side: TransformMatrix,
    pub input_side: TransformMatrix,
}

impl SidedTransform {
    pub fn shared(t: TransformMatrix) -> Self {
        Self {
            weight_side: t.clone(),
            input_side: t,
        }
    }
}

struct LayerCache {
    /// Layer input before any rotation (`B × n`).
    input: TensorMatrix,
    /// Input after the fused rotation.
    rotated: TensorMatrix,
    x_used: TensorMatrix,
    w_used: TensorMatrix,
    x_mask: Option<Vec<f64>>,
    w_mask: Option<Vec<f64>>,
}

/// Activations retained by [`TinyLM::forward_cached`] for the backward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    transforms: Vec<Option<SidedTransform>>,
}

impl ForwardCache {
    /// Input of layer `i` before its fused rotation.
    pub(crate) fn layer_input(&self, i: usize) -> &TensorMatrix {
        &self.layers[i].input
    }

    /// Input of layer `i` after its fused rotation.
    pub(crate) fn rotated_input(&self, i: usize) -> &TensorMatrix {
        &self.layers[i].rotated
    }

    /// Drops the clamp masks so gradients pass every quantizer unchanged.
    pub(crate) fn clear_masks(&mut self) {
        for l in &mut self.layers {
            l.x_mask = None;
            l.w_mask = None;
        }
    }
}

/// θ-gradient of one layer, split by which side of the transform it flowed through.
#[derive(Debug, Clone)]
pub struct LayerThetaGrad {
    pub weight_side: Vec<f64>,
    pub input_side: Vec<f64>,
}

impl LayerThetaGrad {
    pub fn total(&self) -> Vec<f64> {
        self.weight_side
            .iter()
            .zip(&self.input_side)
            .map(|(a, b)| a + b)
            .collect()
    }
}

impl TinyLM {
    pub fn hidden_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("model has an output layer")
    }

    /// Checks every shape against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        if self.embedding.shape() != (self.vocab_size, self.embed_dim) {
            return Err(AaqError::shape("embedding table shape"));
        }
        if self.layers.is_empty() {
            return Err(AaqError::shape("model has no layers"));
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let want_out = if i == last { self.vocab_size } else { h };
            if l.weight.shape() != (want_out, h) || l.bias.len() != want_out {
                return Err(AaqError::shape(format!("layer {i} weight/bias shape")));
            }
            if let Some(r) = &l.input_rotation {
                if r.shape() != (h, h) {
                    return Err(AaqError::shape(format!("layer {i} input rotation shape")));
                }
            }
        }
        Ok(())
    }

    /// Left-pads (with token 0) or truncates to the context window.
    pub fn window(&self, tokens: &[u32]) -> Vec<u32> {
        let c = self.context_len;
        if tokens.len() >= c {
            tokens[tokens.len() - c..].to_vec()
        } else {
            let mut w = vec![0; c - tokens.len()];
            w.extend_from_slice(tokens);
            w
        }
    }

    /// One context per position of `tokens`, each ending at that position.
    pub fn position_contexts(&self, tokens: &[u32]) -> Vec<Vec<u32>> {
        (0..tokens.len()).map(|t| self.window(&tokens[..=t])).collect()
    }

    fn embed(&self, contexts: &[Vec<u32>]) -> Result<TensorMatrix> {
        let (c, d) = (self.context_len, self.embed_dim);
        let mut x = Vec::with_capacity(contexts.len() * c * d);
        for ctx in contexts {
            let w = self.window(ctx);
            for &tok in &w {
                if tok as usize >= self.vocab_size {
                    return Err(AaqError::InvalidInput(format!(
                        "token {tok} out of range for vocabulary of {}",
                        self.vocab_size
                    )));
                }
                x.extend_from_slice(self.embedding.row(tok as usize));
            }
        }
        Ok(TensorMatrix::from_raw(contexts.len(), c * d, x))
    }

    /// Per-position logits for a token sequence.
    pub fn forward(&self, tokens: &[u32], mode: ForwardMode) -> Result<Vec<LogitVector>> {
        if tokens.is_empty() {
            return Err(AaqError::InvalidInput("empty token sequence".into()));
        }
        let logits = self.forward_contexts(&self.position_contexts(tokens), mode)?;
        (0..logits.rows())
            .map(|r| LogitVector::new(logits.row(r).to_vec()))
            .collect()
    }

    /// Logits (`B × V`) for a batch of contexts. The batch is one activation
    /// tensor for dynamic activation calibration.
    pub fn forward_contexts(&self, contexts: &[Vec<u32>], mode: ForwardMode) -> Result<TensorMatrix> {
        let transforms = self.resolve_transforms(mode)?;
        Ok(self.forward_cached(contexts, mode, &transforms, false)?.0)
    }

    /// Builds every layer's transform from its slot for the given mode.
    pub fn resolve_transforms(&self, mode: ForwardMode) -> Result<Vec<Option<SidedTransform>>> {
        if matches!(mode, ForwardMode::FullPrecision) {
            return Ok(vec![None; self.layers.len()]);
        }
        self.layers
            .iter()
            .map(|l| Ok(l.materialize_transform()?.map(SidedTransform::shared)))
            .collect()
    }

    /// Forward pass with explicit transforms, optionally keeping activations
    /// for [`TinyLM::backward_theta`].
    pub fn forward_cached(
        &self,
        contexts: &[Vec<u32>],
        mode: ForwardMode,
        transforms: &[Option<SidedTransform>],
        keep: bool,
    ) -> Result<(TensorMatrix, Option<ForwardCache>)> {
        if contexts.is_empty() {
            return Err(AaqError::InvalidInput("empty context batch".into()));
        }
        if transforms.len() != self.layers.len() {
            return Err(AaqError::shape("one transform entry per layer required"));
        }
        let quant = match mode {
            ForwardMode::Quantized(q) => Some(q),
            _ => None,
        };
        let mut a = self.embed(contexts)?;
        let mut caches = Vec::new();
        let last = self.layers.len() - 1;
        for (i, (layer, tr)) in self.layers.iter().zip(transforms).enumerate() {
            let rotated = match &layer.input_rotation {
                Some(r) => matmul_transposed(&a, r)?,
                None => a.clone(),
            };
            let (w_t, x_t) = match tr {
                Some(st) => (
                    matmul(&layer.weight, &st.weight_side.t)?,
                    matmul_transposed(&rotated, &st.input_side.t_inv)?,
                ),
                None => (layer.weight.clone(), rotated.clone()),
            };
            let (w_used, w_mask, x_used, x_mask) = match quant {
                Some(q) => {
                    let (wq, wm) = quantize_weight(layer, &w_t, &q, keep)?;
                    // activations are laid out B × n, so per-row here means per-sample
                    let (xq, xm) = quantize_activation(layer, &x_t, &q, keep)?;
                    (wq, wm, xq, xm)
                }
                None => (w_t, None, x_t, None),
            };
            let mut z = matmul_transposed(&x_used, &w_used)?;
            let m = z.cols();
            for row in z.data_mut().chunks_mut(m) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if keep {
                caches.push(LayerCache {
                    input: a.clone(),
                    rotated,
                    x_used,
                    w_used,
                    x_mask,
                    w_mask,
                });
            }
            a = if i == last { z } else { z.map(f64::tanh) };
        }
        let cache = keep.then(|| ForwardCache {
            layers: caches,
            transforms: transforms.to_vec(),
        });
        Ok((a, cache))
    }

    /// Backpropagates `dL/dlogits` (`B × V`) to every transformed layer's θ.
    /// Quantizers pass gradients straight through inside their clamp range.
    pub fn backward_theta(
        &self,
        cache: &ForwardCache,
        grad_logits: &TensorMatrix,
    ) -> Result<Vec<Option<LayerThetaGrad>>> {
        let n_layers = self.layers.len();
        if cache.layers.len() != n_layers {
            return Err(AaqError::shape("cache does not match model"));
        }
        let mut out = vec![None; n_layers];
        let mut g = grad_logits.clone();
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let lc = &cache.layers[i];
            if g.shape() != (lc.x_used.rows(), layer.out_dim()) {
                return Err(AaqError::shape("gradient shape at layer output"));
            }
            let needs_input_grad = i > 0;
            let tr = &cache.transforms[i];
            if tr.is_none() && !needs_input_grad {
                break;
            }
            // z = x_used · w_usedᵀ + b
            let mut dx = matmul(&g, &lc.w_used)?;
            if let Some(mask) = &lc.x_mask {
                apply_mask(&mut dx, mask);
            }
            if let Some(st) = tr {
                let mut dw = matmul(&g.transpose(), &lc.x_used)?;
                if let Some(mask) = &lc.w_mask {
                    apply_mask(&mut dw, mask);
                }
                let n = layer.in_dim();
                let zeros = TensorMatrix::zeros(n, n);
                // W' = W·T  ⇒  dT = Wᵀ·dW'
                let d_t = matmul(&layer.weight.transpose(), &dw)?;
                // x' = x·T⁻¹ᵀ  ⇒  dT⁻¹ = dx'ᵀ·x
                let d_t_inv = matmul(&dx.transpose(), &lc.rotated)?;
                let (wl, ws) = st.weight_side.backward(&d_t, &zeros)?;
                let (il, is) = st.input_side.backward(&zeros, &d_t_inv)?;
                out[i] = Some(LayerThetaGrad {
                    weight_side: wl.into_iter().chain(ws).collect(),
                    input_side: il.into_iter().chain(is).collect(),
                });
                if needs_input_grad {
                    dx = matmul(&dx, &st.input_side.t_inv)?;
                }
            }
            if !needs_input_grad {
                break;
            }
            if let Some(r) = &layer.input_rotation {
                dx = matmul(&dx, r)?;
            }
            // input = tanh(z_prev)
            let act = &lc.input;
            let data: Vec<f64> = dx
                .data()
                .iter()
                .zip(act.data())
                .map(|(d, y)| d * (1.0 - y * y))
                .collect();
            g = TensorMatrix::from_raw(dx.rows(), dx.cols(), data);
        }
        Ok(out)
    }

    /// Concatenated raw weights in a fixed order, for frozen-weight checks.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        let mut push = |xs: &[f64]| {
            for x in xs {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(self.embedding.data());
        for l in &self.layers {
            push(l.weight.data());
            push(&l.bias);
        }
        bytes
    }

    /// Installs identity transforms on every layer that has none.
    pub fn init_identity_transforms(&mut self, hadamard_prerotation: bool) {
        for l in &mut self.layers {
            if l.transform.is_none() {
                l.transform = Some(TransformParams::identity(l.in_dim()));
            }
            l.hadamard_prerotation = hadamard_prerotation;
        }
    }
}

fn apply_mask(t: &mut TensorMatrix, mask: &[f64]) {
    for (v, m) in t.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
}

fn quantize_weight(
    layer: &Linear,
    w: &TensorMatrix,
    q: &QuantSettings,
    ste: bool,
) -> Result<(TensorMatrix, Option<Vec<f64>>)> {
    let spec = match &layer.weight_spec {
        Some(s) => s.clone(),
        None if q.weight_bits == PASSTHROUGH_BITS => return Ok((w.clone(), None)),
        None => calibrate_minmax(w, q.weight_bits, q.weight_granularity, q.symmetric)?,
    };
    let v = fake_quant(w, &spec, ste)?;
    Ok((v.dequantized, v.ste_mask))
}

fn quantize_activation(
    layer: &Linear,
    x: &TensorMatrix,
    q: &QuantSettings,
    ste: bool,
) -> Result<(TensorMatrix, Option<Vec<f64>>)> {
    let spec = match &layer.act_spec {
        Some(s) => s.clone(),
        None if q.act_bits == PASSTHROUGH_BITS => return Ok((x.clone(), None)),
        None => calibrate_minmax(x, q.act_bits, q.act_granularity, q.symmetric)?,
    };
    let v = fake_quant(x, &spec, ste)?;
    Ok((v.dequantized, v.ste_mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> FixtureSpec {
        FixtureSpec {
            seed,
            vocab_size: 16,
            context_len: 2,
            embed_dim: 4,
            num_hidden: 2,
            num_triggers: 2,
            refusal_size: 2,
            calibration_len: 32,
            eval_len: 32,
            num_trigger_contexts: 16,
            min_margin: 0.0,
            min_premise_fraction: 0.0,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn window_pads_left_with_zero() {
        let fx = make_fixture_pair(&small_spec(1)).unwrap();
        let m = &fx.pair.ft;
        assert_eq!(m.window(&[5]), vec![0, 5]);
        assert_eq!(m.window(&[3, 4, 5]), vec![4, 5]);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let fx = make_fixture_pair(&small_spec(2)).unwrap();
        let err = fx.pair.ft.forward(&[1, 99], ForwardMode::FullPrecision);
        assert!(matches!(err, Err(AaqError::InvalidInput(_))));
    }

    #[test]
    fn identity_transform_is_bit_exact() {
        let fx = make_fixture_pair(&small_spec(3)).unwrap();
        let mut m = fx.pair.ft.clone();
        let fp = m.forward(&fx.calibration, ForwardMode::FullPrecision).unwrap();
        m.init_identity_transforms(false);
        let tr = m.forward(&fx.calibration, ForwardMode::Transformed).unwrap();
        assert_eq!(fp, tr);
    }

    #[test]
    fn logits_are_finite_per_position() {
        let fx = make_fixture_pair(&small_spec(4)).unwrap();
        let out = fx.pair.pt.forward(&[7], ForwardMode::Quantized(QuantSettings::default())).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 16);
        assert!(out[0].values().iter().all(|v| v.is_finite()));
    }
}
