//! Uniform affine fake-quantization with min-max calibration.
//!
//! `Q(x) = s · clamp(round((x − z)/s), qmin, qmax) + z`, with the zero-point
//! `z` expressed in input units and rounding half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};
use crate::numerics::TensorMatrix;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerRow,
}

/// Scale and zero-point for one tensor, one pair per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
    pub symmetric: bool,
    pub scales: Vec<f64>,
    pub zero_points: Vec<f64>,
}

impl QuantSpec {
    /// Inclusive integer range of the grid.
    pub fn qrange(&self) -> (f64, f64) {
        qrange(self.bits, self.symmetric)
    }

    fn group_of(&self, row: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerRow => row,
        }
    }

    pub fn validate_for(&self, t: &TensorMatrix) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(AaqError::InvalidArgument(format!(
                "bit-width {} outside {MIN_BITS}..={MAX_BITS}",
                self.bits
            )));
        }
        let groups = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerRow => t.rows(),
        };
        if self.scales.len() != groups || self.zero_points.len() != groups {
            return Err(AaqError::shape(format!(
                "spec carries {} scales / {} zero-points, tensor needs {groups}",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(AaqError::InvalidArgument("scales must be positive".into()));
        }
        if self.symmetric && self.zero_points.iter().any(|z| *z != 0.0) {
            return Err(AaqError::InvalidArgument(
                "symmetric spec with non-zero zero-point".into(),
            ));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }
}

pub fn qrange(bits: u32, symmetric: bool) -> (f64, f64) {
    if symmetric {
        let half = 2f64.powi(bits as i32 - 1);
        (-half, half - 1.0)
    } else {
        (0.0, 2f64.powi(bits as i32) - 1.0)
    }
}

/// Result of a fake-quant pass: grid values plus the STE pass-through mask.
#[derive(Debug, Clone)]
pub struct QuantizedView {
    pub dequantized: TensorMatrix,
    pub spec: QuantSpec,
    /// `1.0` where the straight-through derivative is identity, `0.0` where the
    /// value was clamped. Present only when requested.
    pub ste_mask: Option<Vec<f64>>,
}

pub fn calibrate_minmax(
    t: &TensorMatrix,
    bits: u32,
    granularity: Granularity,
    symmetric: bool,
) -> Result<QuantSpec> {
    if bits < MIN_BITS || bits > MAX_BITS {
        return Err(AaqError::InvalidArgument(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    if t.data().is_empty() {
        return Err(AaqError::InvalidInput("calibrating an empty tensor".into()));
    }
    if !t.is_finite() {
        return Err(AaqError::InvalidInput("calibrating a non-finite tensor".into()));
    }
    let groups: Vec<&[f64]> = match granularity {
        Granularity::PerTensor => vec![t.data()],
        Granularity::PerRow => (0..t.rows()).map(|r| t.row(r)).collect(),
    };
    let (qmin, qmax) = qrange(bits, symmetric);
    let mut scales = Vec::with_capacity(groups.len());
    let mut zero_points = Vec::with_capacity(groups.len());
    for g in groups {
        if symmetric {
            let m = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            scales.push(if m > 0.0 { m / qmax } else { 1.0 });
            zero_points.push(0.0);
        } else {
            let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scales.push(if hi > lo { (hi - lo) / (qmax - qmin) } else { 1.0 });
            zero_points.push(lo);
        }
    }
    Ok(QuantSpec {
        bits,
        granularity,
        symmetric,
        scales,
        zero_points,
    })
}

pub fn fake_quant(t: &TensorMatrix, spec: &QuantSpec, ste: bool) -> Result<QuantizedView> {
    spec.validate_for(t)?;
    let (qmin, qmax) = spec.qrange();
    let cols = t.cols();
    let mut out = Vec::with_capacity(t.data().len());
    let mut mask = ste.then(|| Vec::with_capacity(t.data().len()));
    for (i, &x) in t.data().iter().enumerate() {
        let g = spec.group_of(if cols == 0 { 0 } else { i / cols });
        let (s, z) = (spec.scales[g], spec.zero_points[g]);
        let q = ((x - z) / s).round_ties_even();
        let clamped = q.clamp(qmin, qmax);
        out.push(s * clamped + z);
        if let Some(m) = mask.as_mut() {
            let lo = s * qmin + z;
            let hi = s * qmax + z;
            m.push(if x >= lo && x <= hi { 1.0 } else { 0.0 });
        }
    }
    Ok(QuantizedView {
        dequantized: TensorMatrix::from_raw(t.rows(), cols, out),
        spec: spec.clone(),
        ste_mask: mask,
    })
}

/// Squared Frobenius norm of `W·X − Q(W)·Q(X)`.
pub fn reconstruction_error(
    w: &TensorMatrix,
    x: &TensorMatrix,
    wspec: &QuantSpec,
    xspec: &QuantSpec,
) -> Result<f64> {
    let exact = w.matmul(x)?;
    let wq = fake_quant(w, wspec, false)?.dequantized;
    let xq = fake_quant(x, xspec, false)?.dequantized;
    Ok(exact.sub(&wq.matmul(&xq)?)?.frobenius_sq())
}

/// True when every entry sits on `s·q + z` for an in-range integer `q`.
pub fn is_on_grid(t: &TensorMatrix, spec: &QuantSpec, tol: f64) -> bool {
    let (qmin, qmax) = spec.qrange();
    let cols = t.cols().max(1);
    t.data().iter().enumerate().all(|(i, &x)| {
        let g = spec.group_of(i / cols);
        let (s, z) = (spec.scales[g], spec.zero_points[g]);
        let q = ((x - z) / s).round();
        q >= qmin && q <= qmax && (s * q + z - x).abs() <= tol
    })
}
