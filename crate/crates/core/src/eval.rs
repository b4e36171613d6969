//! Perplexity, reconstruction error, alignment metrics and ablation sweeps.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apc::LossVariant;
use crate::error::{AaqError, Result};
use crate::model::{make_fixture_pair, FixtureSpec, ForwardMode, ModelPair, QuantSettings, TinyLM};
use crate::numerics::{log_softmax_slice, softmax_slice, TensorMatrix};
use crate::pipeline::{run_pipeline, AAQConfig, RunConfig, Stability};

/// Floats as 17 significant digits; non-finite values as `NaN`, `inf`, `-inf`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub(crate) fn parse_float(field: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| AaqError::format(field, format!("`{s}`: {e}")))
}

/// Serde adapter writing non-finite floats as strings.
pub(crate) mod float_repr {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_float(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(D::Error::custom),
        }
    }
}

/// Pretty JSON with every float at 17 significant digits.
struct SciFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", f64::from(v))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with 17-significant-digit floats.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter(serde_json::ser::PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| AaqError::format("json", e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub alignment_mass_pt: f64,
    pub alignment_mass_ft: f64,
    pub alignment_mass_q: f64,
    pub alignment_gap: f64,
    pub regression_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub run_seed: u64,
    #[serde(with = "float_repr")]
    pub ppl: f64,
    #[serde(with = "float_repr")]
    pub ppl_ft: f64,
    pub recon_mse: Vec<f64>,
    pub alignment_mass_pt: f64,
    pub alignment_mass_ft: f64,
    pub alignment_mass_q: f64,
    pub alignment_gap: f64,
    pub regression_score: f64,
    pub stability: Stability,
    pub trace_len: usize,
    pub config: RunConfig,
}

/// Top-level keys of a serialized [`EvalReport`], in order.
pub const REPORT_FIELDS: [&str; 13] = [
    "seed",
    "run_seed",
    "ppl",
    "ppl_ft",
    "recon_mse",
    "alignment_mass_pt",
    "alignment_mass_ft",
    "alignment_mass_q",
    "alignment_gap",
    "regression_score",
    "stability",
    "trace_len",
    "config",
];

/// Mean natural-log NLL of `next[r]` under row `r` of `logits`.
pub fn mean_nll(logits: &TensorMatrix, next: &[u32]) -> Result<f64> {
    if logits.rows() != next.len() {
        return Err(AaqError::shape("one target per logit row required"));
    }
    if next.is_empty() {
        return Err(AaqError::InvalidInput("no targets".into()));
    }
    let mut total = 0.0;
    for (r, &y) in next.iter().enumerate() {
        let row = logits.row(r);
        if y as usize >= row.len() {
            return Err(AaqError::InvalidInput(format!("target token {y} out of range")));
        }
        total -= log_softmax_slice(row)[y as usize];
    }
    Ok(total / next.len() as f64)
}

/// `exp` of the mean next-token NLL over `stream`.
pub fn perplexity(m: &TinyLM, stream: &[u32], mode: ForwardMode) -> Result<f64> {
    if stream.len() < 2 {
        return Err(AaqError::InvalidInput(format!(
            "perplexity needs at least 2 tokens, got {}",
            stream.len()
        )));
    }
    let contexts = m.position_contexts(&stream[..stream.len() - 1]);
    let logits = m.forward_contexts(&contexts, mode)?;
    Ok(mean_nll(&logits, &stream[1..])?.exp())
}

fn mean_mass(m: &TinyLM, contexts: &[Vec<u32>], refusal: &[u32], mode: ForwardMode) -> Result<f64> {
    let logits = m.forward_contexts(contexts, mode)?;
    let mut acc = 0.0;
    for r in 0..logits.rows() {
        let p = softmax_slice(logits.row(r));
        acc += refusal.iter().map(|&a| p[a as usize]).sum::<f64>();
    }
    Ok(acc / logits.rows() as f64)
}

/// Alignment mass of PT, FT and `m_q` over the pair's trigger contexts.
pub fn alignment_metrics(pair: &ModelPair, m_q: &TinyLM, mode_q: ForwardMode) -> Result<AlignmentMetrics> {
    if pair.trigger_contexts.is_empty() || pair.refusal_set.is_empty() {
        return Err(AaqError::InvalidInput("pair has no trigger contexts or refusal set".into()));
    }
    if m_q.vocab_size != pair.ft.vocab_size || m_q.context_len != pair.ft.context_len {
        return Err(AaqError::shape("quantized model does not match the pair"));
    }
    let ctx = &pair.trigger_contexts;
    let a = &pair.refusal_set;
    let mass_pt = mean_mass(&pair.pt, ctx, a, ForwardMode::FullPrecision)?;
    let mass_ft = mean_mass(&pair.ft, ctx, a, ForwardMode::FullPrecision)?;
    let mass_q = mean_mass(m_q, ctx, a, mode_q)?;
    Ok(AlignmentMetrics {
        alignment_mass_pt: mass_pt,
        alignment_mass_ft: mass_ft,
        alignment_mass_q: mass_q,
        alignment_gap: (mass_q - mass_ft).abs(),
        regression_score: regression_score(mass_pt, mass_ft, mass_q),
    })
}

/// `(mass_ft − mass_q) / (mass_ft − mass_pt)` clamped at 0; 0 when PT and FT coincide.
pub fn regression_score(mass_pt: f64, mass_ft: f64, mass_q: f64) -> f64 {
    let denom = mass_ft - mass_pt;
    if denom.abs() < 1e-15 {
        return 0.0;
    }
    ((mass_ft - mass_q) / denom).max(0.0)
}

/// Per-layer mean squared error between FT's full-precision pre-activations
/// and `m_q`'s quantized ones, both fed FT's full-precision layer inputs.
pub fn recon_mse(ft: &TinyLM, m_q: &TinyLM, stream: &[u32], q: &QuantSettings) -> Result<Vec<f64>> {
    if ft.layers.len() != m_q.layers.len() {
        return Err(AaqError::shape("layer count differs"));
    }
    let contexts = ft.position_contexts(stream);
    let none = vec![None; ft.layers.len()];
    let (_, cache) = ft.forward_cached(&contexts, ForwardMode::FullPrecision, &none, true)?;
    let cache = cache.expect("cache kept");
    (0..ft.layers.len())
        .map(|i| {
            let x = cache.layer_input(i);
            let exact = crate::numerics::matmul_transposed(x, &ft.layers[i].weight)?;
            let approx = m_q.layers[i].quantized_preactivation(x, q)?;
            let d = exact.sub(&approx)?;
            Ok(d.frobenius_sq() / d.data().len() as f64)
        })
        .collect()
}

/// Full report for `m_q` as stored: layers quantize with their installed specs.
pub fn evaluate(
    pair: &ModelPair,
    m_q: &TinyLM,
    eval_stream: &[u32],
    cfg: &RunConfig,
    stability: Stability,
    trace_len: usize,
) -> Result<EvalReport> {
    // installed specs drive quantization; layers without one run unquantized
    let q = QuantSettings::passthrough();
    let mode = ForwardMode::Quantized(q);
    let align = alignment_metrics(pair, m_q, mode)?;
    Ok(EvalReport {
        seed: cfg.fixture.seed,
        run_seed: cfg.aaq.seed,
        ppl: perplexity(m_q, eval_stream, mode)?,
        ppl_ft: perplexity(&pair.ft, eval_stream, ForwardMode::FullPrecision)?,
        recon_mse: recon_mse(&pair.ft, m_q, eval_stream, &q)?,
        alignment_mass_pt: align.alignment_mass_pt,
        alignment_mass_ft: align.alignment_mass_ft,
        alignment_mass_q: align.alignment_mass_q,
        alignment_gap: align.alignment_gap,
        regression_score: align.regression_score,
        stability,
        trace_len,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub alphas: Vec<f64>,
    /// Values of `k_diff`; `k_top` stays at the base config's value.
    pub ks: Vec<usize>,
    pub variants: Vec<LossVariant>,
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<(LossVariant, f64, usize)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &a in &self.alphas {
                for &k in &self.ks {
                    out.push((v, a, k));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub alpha: f64,
    pub k: usize,
    #[serde(with = "float_repr")]
    pub ppl: f64,
    #[serde(with = "float_repr")]
    pub alignment_gap: f64,
    pub stability: Stability,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "variant,alpha,k,ppl,alignment_gap,stability";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                fmt_float(r.alpha),
                r.k,
                fmt_float(r.ppl),
                fmt_float(r.alignment_gap),
                r.stability.as_str()
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(ABLATION_HEADER) {
            return Err(AaqError::format("header", format!("expected `{ABLATION_HEADER}`")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(AaqError::format(format!("row {n}"), "expected 6 fields"));
            }
            rows.push(AblationRow {
                variant: f[0].parse()?,
                alpha: parse_float("alpha", f[1])?,
                k: f[2]
                    .parse()
                    .map_err(|e| AaqError::format("k", format!("{e}")))?,
                ppl: parse_float("ppl", f[3])?,
                alignment_gap: parse_float("alignment_gap", f[4])?,
                stability: match f[5] {
                    "stable" => Stability::Stable,
                    "exploded" => Stability::Exploded,
                    other => return Err(AaqError::format("stability", format!("`{other}`"))),
                },
            });
        }
        Ok(Self { rows })
    }

    pub fn get(&self, variant: LossVariant, alpha: f64, k: usize) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.alpha == alpha && r.k == k)
    }
}

/// Runs one pipeline per grid cell on a shared fixture.
///
/// A cell whose loss turns non-finite is recorded as exploded with `NaN`
/// metrics. After all cells finish, a row whose PPL exceeds
/// `divergence_ppl_ratio` × the PPL of its variant's smallest-α row is
/// also marked exploded.
pub fn ablation_sweep(spec: &FixtureSpec, base: &AAQConfig, grid: &AblationGrid) -> Result<AblationTable> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(AaqError::InvalidArgument("ablation grid is empty".into()));
    }
    let fx = make_fixture_pair(spec)?;
    let mut rows = cells
        .par_iter()
        .map(|&(variant, alpha, k)| {
            let cfg = RunConfig {
                fixture: spec.clone(),
                aaq: AAQConfig {
                    alpha,
                    k_diff: k,
                    variant,
                    ..base.clone()
                },
            };
            cfg.validate()?;
            match run_pipeline(&fx.pair, &fx.calibration, &fx.eval, &cfg) {
                Ok(out) => Ok(AblationRow {
                    variant,
                    alpha,
                    k,
                    ppl: out.report.ppl,
                    alignment_gap: out.report.alignment_gap,
                    stability: out.report.stability,
                }),
                Err(AaqError::NonFiniteLoss { .. }) => Ok(AblationRow {
                    variant,
                    alpha,
                    k,
                    ppl: f64::NAN,
                    alignment_gap: f64::NAN,
                    stability: Stability::Exploded,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for variant in &grid.variants {
        let min_alpha = rows
            .iter()
            .filter(|r| r.variant == *variant)
            .map(|r| r.alpha)
            .fold(f64::INFINITY, f64::min);
        let reference: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.variant == *variant && r.alpha == min_alpha)
            .map(|r| (r.k, r.ppl))
            .collect();
        for r in rows.iter_mut().filter(|r| r.variant == *variant) {
            if let Some(&(_, ref_ppl)) = reference.iter().find(|(k, _)| *k == r.k) {
                if !(r.ppl <= base.divergence_ppl_ratio * ref_ppl) {
                    r.stability = Stability::Exploded;
                }
            }
        }
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Something [`emit_report`] can write.
pub enum Artifact<'a> {
    Report(&'a EvalReport),
    Table(&'a AblationTable),
}

fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("field,value\n");
    let mut put = |k: &str, v: String| out.push_str(&format!("{k},{v}\n"));
    put("seed", r.seed.to_string());
    put("run_seed", r.run_seed.to_string());
    put("ppl", fmt_float(r.ppl));
    put("ppl_ft", fmt_float(r.ppl_ft));
    for (i, v) in r.recon_mse.iter().enumerate() {
        put(&format!("recon_mse.{i}"), fmt_float(*v));
    }
    put("alignment_mass_pt", fmt_float(r.alignment_mass_pt));
    put("alignment_mass_ft", fmt_float(r.alignment_mass_ft));
    put("alignment_mass_q", fmt_float(r.alignment_mass_q));
    put("alignment_gap", fmt_float(r.alignment_gap));
    put("regression_score", fmt_float(r.regression_score));
    put("stability", r.stability.as_str().to_string());
    put("trace_len", r.trace_len.to_string());
    out
}

pub fn render(artifact: &Artifact<'_>, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match (artifact, format) {
        (Artifact::Report(r), ReportFormat::Json) => to_json_bytes(r)?,
        (Artifact::Report(r), ReportFormat::Csv) => report_csv(r).into_bytes(),
        (Artifact::Table(t), ReportFormat::Json) => to_json_bytes(t)?,
        (Artifact::Table(t), ReportFormat::Csv) => t.to_csv().into_bytes(),
    })
}

/// Writes `artifact` to `path` via a temporary file and rename.
pub fn emit_report(artifact: &Artifact<'_>, path: &Path, format: ReportFormat) -> Result<()> {
    crate::write_atomic(path, &render(artifact, format)?)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| AaqError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AaqError::format("report", e.to_string()))
}

pub fn read_table(path: &Path) -> Result<AblationTable> {
    let text = std::fs::read_to_string(path).map_err(|e| AaqError::io(path, e))?;
    AblationTable::from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Linear;

    fn uniform_model(v: usize) -> TinyLM {
        let h = 2;
        TinyLM {
            vocab_size: v,
            context_len: 1,
            embed_dim: 2,
            embedding: TensorMatrix::zeros(v, 2),
            layers: vec![Linear::new(TensorMatrix::zeros(v, h), vec![0.0; v]).unwrap()],
            seed: 0,
            fixture: None,
        }
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = uniform_model(10);
        let ppl = perplexity(&m, &[1, 2, 3, 4, 5, 6], ForwardMode::FullPrecision).unwrap();
        assert!((ppl - 10.0).abs() < 1e-12);
        assert!(perplexity(&m, &[1], ForwardMode::FullPrecision).is_err());
        assert!(perplexity(&m, &[], ForwardMode::FullPrecision).is_err());
    }

    #[test]
    fn three_token_hand_case() {
        // bias-only logits: p = softmax([ln 1, ln 2, ln 5]) = [0.125, 0.25, 0.625]
        let mut m = uniform_model(3);
        m.layers[0].bias = vec![1f64.ln(), 2f64.ln(), 5f64.ln()];
        let p: [f64; 3] = [0.125, 0.25, 0.625];
        let stream = [0u32, 2, 1];
        let oracle = (-(p[2].ln() + p[1].ln()) / 2.0).exp();
        let got = perplexity(&m, &stream, ForwardMode::FullPrecision).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn regression_score_identities() {
        assert_eq!(regression_score(0.1, 0.6, 0.6), 0.0);
        assert_eq!(regression_score(0.1, 0.6, 0.1), 1.0);
        assert_eq!(regression_score(0.1, 0.6, 0.9), 0.0);
        assert_eq!(regression_score(0.3, 0.3, 0.1), 0.0);
    }

    #[test]
    fn floats_round_trip_at_17_digits() {
        for v in [0.1, 1.0 / 3.0, 6.02e23, -2.5e-300, f64::MIN_POSITIVE] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
        assert!(fmt_float(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn table_csv_round_trips() {
        let t = AblationTable {
            rows: vec![
                AblationRow {
                    variant: LossVariant::Apc,
                    alpha: 0.75,
                    k: 8,
                    ppl: 71.123456789,
                    alignment_gap: 0.01,
                    stability: Stability::Stable,
                },
                AblationRow {
                    variant: LossVariant::ContrastiveKlFull,
                    alpha: 1.0,
                    k: 64,
                    ppl: f64::INFINITY,
                    alignment_gap: f64::NAN,
                    stability: Stability::Exploded,
                },
            ],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,alpha,k,ppl,alignment_gap,stability\n"));
        let back = AblationTable::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        let json = to_json_bytes(&t).unwrap();
        let again: AblationTable = serde_json::from_slice(&json).unwrap();
        assert_eq!(to_json_bytes(&again).unwrap(), json);
    }
}
