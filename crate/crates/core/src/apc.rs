//! The alignment-preserving contrastive loss family.
//!
//! Every variant decomposes as `loss = pull − α · push`:
//!
//! | variant                   | pull                         | push                          |
//! |---------------------------|------------------------------|-------------------------------|
//! | `apc`                     | `KL(p_FT^Stop ‖ p_Q^Stop)`   | `KL(p_PT^Sdiff ‖ p_Q^Sdiff)`  |
//! | `contrastive_kl_full`     | `KL(p_FT ‖ p_Q)`             | `KL(p_PT ‖ p_Q)`              |
//! | `contrastive_kl_prob_top` | top-k of `p_FT`              | top-k of `p_PT`               |
//! | `kl_full`                 | `KL(p_FT ‖ p_Q)`             | `0`                           |
//! | `kl_top_only`             | `KL(p_FT^Stop ‖ p_Q^Stop)`   | `0`                           |
//! | `mse_logits`              | `mean (l_Q − l_FT)²`         | `0`                           |
//!
//! `S_top` holds the `k_top` largest entries of `p_FT`; `S_diff` the `k_diff`
//! largest `|p_FT − p_PT|`. `p^S` is `p` renormalized over `S`. A set of size
//! zero drops its term. All values are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};
use crate::numerics::{kl_divergence, softmax_slice, topk_indices, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Apc,
    ContrastiveKlFull,
    ContrastiveKlProbTop,
    KlFull,
    KlTopOnly,
    MseLogits,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::Apc => "apc",
            LossVariant::ContrastiveKlFull => "contrastive_kl_full",
            LossVariant::ContrastiveKlProbTop => "contrastive_kl_prob_top",
            LossVariant::KlFull => "kl_full",
            LossVariant::KlTopOnly => "kl_top_only",
            LossVariant::MseLogits => "mse_logits",
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = AaqError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "apc" => LossVariant::Apc,
            "contrastive_kl_full" => LossVariant::ContrastiveKlFull,
            "contrastive_kl_prob_top" => LossVariant::ContrastiveKlProbTop,
            "kl_full" => LossVariant::KlFull,
            "kl_top_only" => LossVariant::KlTopOnly,
            "mse_logits" => LossVariant::MseLogits,
            other => {
                return Err(AaqError::InvalidArgument(format!("unknown loss variant `{other}`")))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub k_top: usize,
    pub k_diff: usize,
    pub variant: LossVariant,
}

impl LossConfig {
    pub fn apc(alpha: f64, k: usize) -> Self {
        Self {
            alpha,
            k_top: k,
            k_diff: k,
            variant: LossVariant::Apc,
        }
    }

    pub fn with_variant(self, variant: LossVariant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(AaqError::config("alpha", "must be finite and non-negative"));
        }
        if self.k_top > vocab {
            return Err(AaqError::config("k_top", format!("exceeds vocabulary size {vocab}")));
        }
        if self.k_diff > vocab {
            return Err(AaqError::config("k_diff", format!("exceeds vocabulary size {vocab}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSets {
    pub s_top: Vec<usize>,
    pub s_diff: Vec<usize>,
}

pub fn select_sets(p_ft: &[f64], p_pt: &[f64], k_top: usize, k_diff: usize) -> Result<SelectionSets> {
    if p_ft.len() != p_pt.len() {
        return Err(AaqError::shape("select_sets over distributions of different length"));
    }
    let diffs: Vec<f64> = p_ft.iter().zip(p_pt).map(|(a, b)| (a - b).abs()).collect();
    Ok(SelectionSets {
        s_top: topk_indices(p_ft, k_top)?,
        s_diff: topk_indices(&diffs, k_diff)?,
    })
}

/// `p(y) / Σ_{y'∈S} p(y')` for `y ∈ S`, in the order of `s`.
///
/// When the subset mass is below [`PROB_FLOOR`] every entry is floored to it
/// before renormalizing.
pub fn renormalize(p: &[f64], s: &[usize]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(AaqError::InvalidArgument("renormalizing over an empty set".into()));
    }
    if let Some(bad) = s.iter().find(|&&i| i >= p.len()) {
        return Err(AaqError::InvalidArgument(format!("index {bad} outside distribution")));
    }
    if s.len() == p.len() && s.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(p.to_vec());
    }
    let sub: Vec<f64> = s.iter().map(|&i| p[i]).collect();
    let mass: f64 = sub.iter().sum();
    if mass < PROB_FLOOR {
        let floored: Vec<f64> = sub.iter().map(|v| v.max(PROB_FLOOR)).collect();
        let total: f64 = floored.iter().sum();
        return Ok(floored.into_iter().map(|v| v / total).collect());
    }
    Ok(sub.into_iter().map(|v| v / mass).collect())
}

fn full_set(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `pull` and `push`; the loss is `pull − α·push`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub pull: f64,
    pub push: f64,
}

impl LossParts {
    pub fn loss(&self, alpha: f64) -> f64 {
        self.pull - alpha * self.push
    }
}

/// Reference quantities for one position, computed once from the frozen pair.
#[derive(Debug, Clone)]
pub struct PositionTargets {
    pub logits_ft: Vec<f64>,
    pub p_ft: Vec<f64>,
    pub p_pt: Vec<f64>,
    pull_set: Vec<usize>,
    pull_ref: Vec<f64>,
    push_set: Vec<usize>,
    push_ref: Vec<f64>,
}

impl PositionTargets {
    pub fn new(logits_ft: &[f64], logits_pt: &[f64], cfg: &LossConfig) -> Result<Self> {
        if logits_ft.len() != logits_pt.len() {
            return Err(AaqError::shape("reference logits of different length"));
        }
        let p_ft = softmax_slice(logits_ft);
        let p_pt = softmax_slice(logits_pt);
        Self::from_probs(logits_ft.to_vec(), p_ft, p_pt, cfg)
    }

    pub fn from_probs(logits_ft: Vec<f64>, p_ft: Vec<f64>, p_pt: Vec<f64>, cfg: &LossConfig) -> Result<Self> {
        let v = p_ft.len();
        if p_pt.len() != v {
            return Err(AaqError::shape("reference distributions of different length"));
        }
        cfg.validate(v)?;
        let (pull_set, push_set) = match cfg.variant {
            LossVariant::Apc => {
                let s = select_sets(&p_ft, &p_pt, cfg.k_top, cfg.k_diff)?;
                (s.s_top, s.s_diff)
            }
            LossVariant::ContrastiveKlFull => (full_set(v), full_set(v)),
            LossVariant::ContrastiveKlProbTop => {
                (topk_indices(&p_ft, cfg.k_top)?, topk_indices(&p_pt, cfg.k_diff)?)
            }
            LossVariant::KlFull => (full_set(v), Vec::new()),
            LossVariant::KlTopOnly => (topk_indices(&p_ft, cfg.k_top)?, Vec::new()),
            LossVariant::MseLogits => (Vec::new(), Vec::new()),
        };
        let pull_ref = if pull_set.is_empty() { Vec::new() } else { renormalize(&p_ft, &pull_set)? };
        let push_ref = if push_set.is_empty() { Vec::new() } else { renormalize(&p_pt, &push_set)? };
        Ok(Self {
            logits_ft,
            p_ft,
            p_pt,
            pull_set,
            pull_ref,
            push_set,
            push_ref,
        })
    }

    pub fn pull_set(&self) -> &[usize] {
        &self.pull_set
    }

    pub fn push_set(&self) -> &[usize] {
        &self.push_set
    }
}

/// `KL(ref ‖ q^S)` and, when requested, its gradient w.r.t. the logits
/// accumulated into `grad` with weight `w`.
fn subset_kl(
    reference: &[f64],
    set: &[usize],
    q: &[f64],
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let sub: Vec<f64> = set.iter().map(|&i| q[i]).collect();
    let mass: f64 = sub.iter().sum();
    let floored_mass = mass < PROB_FLOOR;
    let q_s = renormalize(q, set)?;
    let value = kl_divergence(reference, &q_s)?;
    if let Some((g, w)) = grad {
        if !floored_mass {
            // d/dl_j KL = −p_j·m_j + q^S_j · Σ_i p_i·m_i,  m_i = [q^S_i ≥ ε]
            let active: f64 = reference
                .iter()
                .zip(&q_s)
                .filter(|(_, qs)| **qs >= PROB_FLOOR)
                .map(|(p, _)| p)
                .sum();
            for (k, &j) in set.iter().enumerate() {
                let own = if q_s[k] >= PROB_FLOOR { reference[k] } else { 0.0 };
                g[j] += w * (q_s[k] * active - own);
            }
        }
    }
    Ok(value)
}

/// Loss parts, and optionally `∂loss/∂logits_q`, for one position.
pub fn position_loss(
    targets: &PositionTargets,
    logits_q: &[f64],
    cfg: &LossConfig,
    grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let v = targets.p_ft.len();
    if logits_q.len() != v {
        return Err(AaqError::shape("quantized logits length"));
    }
    let mut grad = grad;
    if let Some(g) = grad.as_deref() {
        if g.len() != v {
            return Err(AaqError::shape("gradient buffer length"));
        }
    }
    if cfg.variant == LossVariant::MseLogits {
        let n = v as f64;
        let mut acc = 0.0;
        for (j, (a, b)) in logits_q.iter().zip(&targets.logits_ft).enumerate() {
            let d = a - b;
            acc += d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[j] += 2.0 * d / n;
            }
        }
        return Ok(LossParts { pull: acc / n, push: 0.0 });
    }
    let q = softmax_slice(logits_q);
    let pull = subset_kl(
        &targets.pull_ref,
        &targets.pull_set,
        &q,
        grad.as_deref_mut().map(|g| (g, 1.0)),
    )?;
    let push = subset_kl(
        &targets.push_ref,
        &targets.push_set,
        &q,
        grad.as_deref_mut().map(|g| (g, -cfg.alpha)),
    )?;
    Ok(LossParts { pull, push })
}

/// `(loss, parts)` of the APC objective for explicit distributions.
pub fn apc_loss(p_ft: &[f64], p_pt: &[f64], p_q: &[f64], cfg: &LossConfig) -> Result<(f64, LossParts)> {
    if cfg.variant != LossVariant::Apc {
        return Err(AaqError::InvalidArgument(format!(
            "apc_loss called with variant {}",
            cfg.variant
        )));
    }
    distribution_loss(p_ft, p_pt, p_q, cfg)
}

/// Any distribution-space variant. `mse_logits` needs logits; use [`mse_logits`].
pub fn baseline_loss(p_ft: &[f64], p_pt: &[f64], p_q: &[f64], cfg: &LossConfig) -> Result<f64> {
    match cfg.variant {
        LossVariant::Apc => Err(AaqError::InvalidArgument(
            "baseline_loss called with the apc variant".into(),
        )),
        LossVariant::MseLogits => Err(AaqError::InvalidArgument(
            "mse_logits is defined on logits; call mse_logits".into(),
        )),
        _ => Ok(distribution_loss(p_ft, p_pt, p_q, cfg)?.0),
    }
}

fn distribution_loss(p_ft: &[f64], p_pt: &[f64], p_q: &[f64], cfg: &LossConfig) -> Result<(f64, LossParts)> {
    if p_ft.len() != p_q.len() || p_pt.len() != p_q.len() {
        return Err(AaqError::shape("loss over distributions of different length"));
    }
    let t = PositionTargets::from_probs(Vec::new(), p_ft.to_vec(), p_pt.to_vec(), cfg)?;
    let pull = subset_kl(&t.pull_ref, &t.pull_set, p_q, None)?;
    let push = subset_kl(&t.push_ref, &t.push_set, p_q, None)?;
    let parts = LossParts { pull, push };
    Ok((parts.loss(cfg.alpha), parts))
}

pub fn mse_logits(logits_ft: &[f64], logits_q: &[f64]) -> Result<f64> {
    if logits_ft.len() != logits_q.len() {
        return Err(AaqError::shape("mse over logits of different length"));
    }
    let n = logits_q.len() as f64;
    Ok(logits_q.iter().zip(logits_ft).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `∂loss/∂logits_q` of the configured variant.
pub fn apc_grad_logits(
    logits_ft: &[f64],
    logits_pt: &[f64],
    logits_q: &[f64],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let t = PositionTargets::new(logits_ft, logits_pt, cfg)?;
    let mut g = vec![0.0; logits_q.len()];
    position_loss(&t, logits_q, cfg, Some(&mut g))?;
    Ok(g)
}

/// Probability-space gradient of the full contrastive KL treating `p_Q` as
/// free coordinates: `−(p_FT(y) − α·p_PT(y)) / p_Q(y)`.
pub fn contrastive_prob_grad(p_ft: &[f64], p_pt: &[f64], p_q: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p_ft.len() != p_q.len() || p_pt.len() != p_q.len() {
        return Err(AaqError::shape("gradient over distributions of different length"));
    }
    Ok(p_ft
        .iter()
        .zip(p_pt)
        .zip(p_q)
        .map(|((f, p), q)| -(f - alpha * p) / q.max(PROB_FLOOR))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P_FT: [f64; 4] = [0.7, 0.1, 0.1, 0.1];
    const P_PT: [f64; 4] = [0.1, 0.7, 0.1, 0.1];
    const UNIFORM: [f64; 4] = [0.25; 4];

    // Hand-written from the definitions, independent of the code above.
    fn oracle_apc(p_ft: &[f64], p_pt: &[f64], p_q: &[f64], s_top: &[usize], s_diff: &[usize], alpha: f64) -> f64 {
        let renorm = |p: &[f64], s: &[usize]| -> Vec<f64> {
            let z: f64 = s.iter().map(|&i| p[i]).sum();
            s.iter().map(|&i| p[i] / z).collect()
        };
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
        };
        let pull = kl(&renorm(p_ft, s_top), &renorm(p_q, s_top));
        let push = kl(&renorm(p_pt, s_diff), &renorm(p_q, s_diff));
        pull - alpha * push
    }

    #[test]
    fn select_sets_hand_cases() {
        let s = select_sets(&P_FT, &P_PT, 2, 2).unwrap();
        assert_eq!(s.s_top, vec![0, 1]);
        assert_eq!(s.s_diff, vec![0, 1]);
        let same = select_sets(&P_FT, &P_FT, 3, 3).unwrap();
        assert_eq!(same.s_diff, vec![0, 1, 2]);
        let all = select_sets(&P_FT, &P_PT, 4, 4).unwrap();
        assert_eq!(all.s_top, vec![0, 1, 2, 3]);
        assert_eq!(all.s_diff, vec![0, 1, 2, 3]);
        assert!(matches!(select_sets(&P_FT, &[0.5, 0.5], 1, 1), Err(AaqError::Shape(_))));
    }

    #[test]
    fn renormalize_hand_cases() {
        let r = renormalize(&P_FT, &[0, 1]).unwrap();
        assert!((r[0] - 0.875).abs() < 1e-15 && (r[1] - 0.125).abs() < 1e-15);
        assert_eq!(renormalize(&P_FT, &[0, 1, 2, 3]).unwrap(), P_FT.to_vec());
        let u = renormalize(&UNIFORM, &[1, 3, 2]).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(renormalize(&P_FT, &[]), Err(AaqError::InvalidArgument(_))));
        let tiny = renormalize(&[1.0, 0.0, 0.0], &[1, 2]).unwrap();
        assert_eq!(tiny, vec![0.5, 0.5]);
    }

    #[test]
    fn golden_apc_value() {
        let cfg = LossConfig::apc(0.5, 2);
        let (loss, parts) = apc_loss(&P_FT, &P_PT, &UNIFORM, &cfg).unwrap();
        let oracle = oracle_apc(&P_FT, &P_PT, &UNIFORM, &[0, 1], &[0, 1], 0.5);
        assert!((loss - oracle).abs() < 1e-12);
        assert!((parts.pull - 0.316_377).abs() < 1e-6);
        assert!((parts.push - 0.316_377).abs() < 1e-6);
        assert!((loss - 0.158_189).abs() < 1e-6);
    }

    #[test]
    fn apc_edge_cases() {
        let cfg = LossConfig::apc(0.8, 2);
        let (loss, parts) = apc_loss(&P_FT, &P_PT, &P_FT, &cfg).unwrap();
        assert_eq!(parts.pull, 0.0);
        assert!((loss + 0.8 * parts.push).abs() < 1e-15);

        let cfg0 = LossConfig::apc(0.0, 2);
        let (loss, parts) = apc_loss(&P_FT, &P_PT, &UNIFORM, &cfg0).unwrap();
        let kl_top = baseline_loss(&P_FT, &P_PT, &UNIFORM, &cfg0.with_variant(LossVariant::KlTopOnly)).unwrap();
        assert_eq!(loss, parts.pull);
        assert_eq!(loss, kl_top);

        assert!(apc_loss(&P_FT, &P_PT, &UNIFORM, &cfg.with_variant(LossVariant::KlFull)).is_err());
    }

    #[test]
    fn contrastive_full_at_target_hits_bound() {
        let cfg = LossConfig::apc(0.6, 2).with_variant(LossVariant::ContrastiveKlFull);
        let v = baseline_loss(&P_FT, &P_PT, &P_FT, &cfg).unwrap();
        let bound = -0.6 * kl_divergence(&P_PT, &P_FT).unwrap();
        assert!((v - bound).abs() < 1e-15);
        assert_eq!(mse_logits(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_full_falls_below_its_value_at_target() {
        // KL(ft‖q) − KL(pt‖q) = const + Σ (pt − ft) ln q is unbounded below:
        // starving a token PT prefers beats matching FT exactly.
        let p_ft = [0.5, 0.5];
        let p_pt = [0.9, 0.1];
        let q = [1e-3, 1.0 - 1e-3];
        let cfg = LossConfig::apc(1.0, 2).with_variant(LossVariant::ContrastiveKlFull);
        let at_target = baseline_loss(&p_ft, &p_pt, &p_ft, &cfg).unwrap();
        let starved = baseline_loss(&p_ft, &p_pt, &q, &cfg).unwrap();
        assert!((at_target + kl_divergence(&p_pt, &p_ft).unwrap()).abs() < 1e-15);
        assert!(starved < at_target - 2.0);
    }

    #[test]
    fn prob_grad_vanishes_when_references_agree() {
        let g = contrastive_prob_grad(&P_FT, &P_FT, &UNIFORM, 1.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = contrastive_prob_grad(&P_FT, &P_PT, &UNIFORM, 1.0).unwrap();
        assert!(g[0] < 0.0 && g[1] > 0.0);
    }

    #[test]
    fn kl_top_gradient_vanishes_at_target() {
        let lf = [1.2, -0.3, 0.4, 0.0, -1.0];
        let lp = [0.1, 0.9, -0.2, 0.3, 0.0];
        let cfg = LossConfig::apc(0.0, 3).with_variant(LossVariant::KlTopOnly);
        let g = apc_grad_logits(&lf, &lp, &lf, &cfg).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_is_zero_for_equal_references_full_alpha_one() {
        let lf = [0.2, -0.7, 1.1, 0.0];
        let lq = [0.9, 0.1, -0.5, 0.3];
        let cfg = LossConfig::apc(1.0, 4).with_variant(LossVariant::ContrastiveKlFull);
        let g = apc_grad_logits(&lf, &lf, &lq, &cfg).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    fn fd_check(variant: LossVariant, alpha: f64, k: usize, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = 8;
        let mut draw = || (0..v).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (lf, lp, lq) = (draw(), draw(), draw());
        let cfg = LossConfig { alpha, k_top: k, k_diff: k, variant };
        let t = PositionTargets::new(&lf, &lp, &cfg).unwrap();
        let f = |l: &[f64]| position_loss(&t, l, &cfg, None).unwrap().loss(alpha);
        let mut g = vec![0.0; v];
        position_loss(&t, &lq, &cfg, Some(&mut g)).unwrap();
        let h = 1e-6;
        for j in 0..v {
            let mut up = lq.clone();
            up[j] += h;
            let mut dn = lq.clone();
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (g[j] - fd).abs() / fd.abs().max(g[j].abs()).max(1e-8);
            assert!(rel <= 1e-3 || (g[j] - fd).abs() < 1e-9, "{variant}: {j} {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        for (i, variant) in [
            LossVariant::Apc,
            LossVariant::ContrastiveKlFull,
            LossVariant::ContrastiveKlProbTop,
            LossVariant::KlFull,
            LossVariant::KlTopOnly,
            LossVariant::MseLogits,
        ]
        .into_iter()
        .enumerate()
        {
            fd_check(variant, 0.75, 3, i as u64);
        }
    }

    #[test]
    fn zero_k_drops_terms() {
        let cfg = LossConfig {
            alpha: 0.9,
            k_top: 2,
            k_diff: 0,
            variant: LossVariant::Apc,
        };
        let (loss, parts) = apc_loss(&P_FT, &P_PT, &UNIFORM, &cfg).unwrap();
        assert_eq!(parts.push, 0.0);
        assert_eq!(loss, parts.pull);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            LossVariant::Apc,
            LossVariant::ContrastiveKlFull,
            LossVariant::ContrastiveKlProbTop,
            LossVariant::KlFull,
            LossVariant::KlTopOnly,
            LossVariant::MseLogits,
        ] {
            assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
        }
        assert!("nope".parse::<LossVariant>().is_err());
    }

    fn triple(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        let lv = move || proptest::collection::vec(-5.0f64..5.0, n);
        (lv(), lv(), lv()).prop_map(|(a, b, c)| (softmax_slice(&a), softmax_slice(&b), softmax_slice(&c)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn contrastive_full_bounded_by_push_alone((p_pt, p_ft, p_q) in triple(8)) {
            // KL(p_FT‖p_Q) ≥ 0 gives the bound −α·KL(p_PT‖p_Q)
            let cfg = LossConfig::apc(1.0, 8).with_variant(LossVariant::ContrastiveKlFull);
            let v = baseline_loss(&p_ft, &p_pt, &p_q, &cfg).unwrap();
            prop_assert!(v >= -kl_divergence(&p_pt, &p_q).unwrap() - 1e-9);
            let at = baseline_loss(&p_ft, &p_pt, &p_ft, &cfg).unwrap();
            prop_assert!((at + kl_divergence(&p_pt, &p_ft).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn pull_non_negative((p_pt, p_ft, p_q) in triple(8)) {
            let (_, parts) = apc_loss(&p_ft, &p_pt, &p_q, &LossConfig::apc(0.75, 3)).unwrap();
            prop_assert!(parts.pull >= 0.0);
            prop_assert!(parts.push >= 0.0);
        }

        #[test]
        fn full_k_reduces_to_contrastive_full((p_pt, p_ft, p_q) in triple(8)) {
            let cfg = LossConfig::apc(0.6, 8);
            let (a, pa) = apc_loss(&p_ft, &p_pt, &p_q, &cfg).unwrap();
            let (b, pb) = distribution_loss(&p_ft, &p_pt, &p_q, &cfg.with_variant(LossVariant::ContrastiveKlFull)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((pa.pull - pb.pull).abs() <= 1e-12);
        }

        #[test]
        fn each_part_is_midpoint_convex((p_pt, p_ft, a) in triple(8), b_logits in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let b = softmax_slice(&b_logits);
            let cfg = LossConfig::apc(0.75, 3);
            let t = PositionTargets::from_probs(Vec::new(), p_ft.clone(), p_pt.clone(), &cfg).unwrap();
            for (reference, set) in [(&t.pull_ref, &t.pull_set), (&t.push_ref, &t.push_set)] {
                let ra = renormalize(&a, set).unwrap();
                let rb = renormalize(&b, set).unwrap();
                let mid: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| 0.5 * (x + y)).collect();
                let embed = |sub: &[f64]| {
                    let mut full = vec![0.0; 8];
                    for (k, &i) in set.iter().enumerate() { full[i] = sub[k]; }
                    full
                };
                let f = |q: &[f64]| subset_kl(reference, set, &embed(q), None).unwrap();
                prop_assert!(f(&mid) <= 0.5 * (f(&ra) + f(&rb)) + 1e-9);
            }
        }
    }
}
