//! Learnable equivalent transformations `Y = W·X = (W·T)(T⁻¹·X)`.
//!
//! `T = diag(exp(log_scales)) · R` with `R` the Cayley map of a
//! skew-symmetric generator, so `T⁻¹ = Rᵀ · diag(exp(−log_scales))` is
//! available in closed form. An optional fixed orthonormal pre-rotation `P`
//! (normally a Hadamard matrix) turns this into `T = P·S·R`.

use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};
use crate::numerics::{invert_with_condition, matmul, TensorMatrix};

/// Condition number of `I + A` above which the Cayley map is refused.
pub const MAX_CAYLEY_CONDITION: f64 = 1e12;

/// Learnable parameters of one transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub dim: usize,
    pub log_scales: Vec<f64>,
    /// Strictly-lower-triangular entries of the generator `A`, row-major:
    /// `(1,0), (2,0), (2,1), (3,0), …`. `A[j][i] = −A[i][j]`.
    pub skew_gen: Vec<f64>,
}

pub fn skew_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl TransformParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            log_scales: vec![0.0; dim],
            skew_gen: vec![0.0; skew_len(dim)],
        }
    }

    pub fn num_params(&self) -> usize {
        self.log_scales.len() + self.skew_gen.len()
    }

    pub fn is_identity(&self) -> bool {
        self.log_scales.iter().chain(&self.skew_gen).all(|v| *v == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_scales.len() != self.dim || self.skew_gen.len() != skew_len(self.dim) {
            return Err(AaqError::shape(format!(
                "transform of dim {} carries {} log-scales and {} generator entries",
                self.dim,
                self.log_scales.len(),
                self.skew_gen.len()
            )));
        }
        if self.log_scales.iter().chain(&self.skew_gen).any(|v| !v.is_finite()) {
            return Err(AaqError::InvalidInput("non-finite transform parameter".into()));
        }
        Ok(())
    }

    /// Flat view `[log_scales..., skew_gen...]`, the optimizer's layout.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.log_scales.clone();
        v.extend_from_slice(&self.skew_gen);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != dim + skew_len(dim) {
            return Err(AaqError::shape("flat transform parameter length"));
        }
        Ok(Self {
            dim,
            log_scales: flat[..dim].to_vec(),
            skew_gen: flat[dim..].to_vec(),
        })
    }

    pub fn generator(&self) -> TensorMatrix {
        let n = self.dim;
        let mut a = TensorMatrix::zeros(n, n);
        let mut k = 0;
        for i in 1..n {
            for j in 0..i {
                a.set(i, j, self.skew_gen[k]);
                a.set(j, i, -self.skew_gen[k]);
                k += 1;
            }
        }
        a
    }
}

/// A materialized `(T, T⁻¹)` pair with the intermediates its backward pass needs.
#[derive(Debug, Clone)]
pub struct TransformMatrix {
    pub t: TensorMatrix,
    pub t_inv: TensorMatrix,
    rotation: TensorMatrix,
    scales: Vec<f64>,
    cayley_inv: TensorMatrix,
    prerotation: Option<TensorMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseSide {
    /// `W·T`, for a weight consuming the transformed activations.
    Right,
    /// `T⁻¹·W`, for a weight producing the activations being transformed.
    Left,
}

impl TransformMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            t: TensorMatrix::identity(n),
            t_inv: TensorMatrix::identity(n),
            rotation: TensorMatrix::identity(n),
            scales: vec![1.0; n],
            cayley_inv: TensorMatrix::identity(n),
            prerotation: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.t.rows()
    }

    pub fn rotation(&self) -> &TensorMatrix {
        &self.rotation
    }

    /// Pulls gradients w.r.t. `T` and `T⁻¹` back onto the parameters.
    /// Returns `(d log_scales, d skew_gen)`.
    pub fn backward(
        &self,
        grad_t: &TensorMatrix,
        grad_t_inv: &TensorMatrix,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        if grad_t.shape() != (n, n) || grad_t_inv.shape() != (n, n) {
            return Err(AaqError::shape("transform gradient shape"));
        }
        let (g_t, g_ti) = match &self.prerotation {
            Some(p) => (matmul(&p.transpose(), grad_t)?, matmul(grad_t_inv, p)?),
            None => (grad_t.clone(), grad_t_inv.clone()),
        };
        let r = &self.rotation;
        let s = &self.scales;
        let mut g_r = TensorMatrix::zeros(n, n);
        let mut g_s = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                // T[i][j] = s_i R[i][j]
                let gt = g_t.get(i, j);
                g_s[i] += gt * r.get(i, j);
                // T⁻¹[i][j] = R[j][i] / s_j
                let gti = g_ti.get(i, j);
                g_s[j] -= gti * r.get(j, i) / (s[j] * s[j]);
                let cur = g_r.get(i, j);
                g_r.set(i, j, cur + s[i] * gt);
                let cur = g_r.get(j, i);
                g_r.set(j, i, cur + gti / s[j]);
            }
        }
        let d_log_scales: Vec<f64> = g_s.iter().zip(s).map(|(g, si)| g * si).collect();

        // R = (I − A)(I + A)⁻¹  ⇒  dL/dA = −(I + R)ᵀ · dL/dR · ((I + A)⁻¹)ᵀ
        let i_plus_r = r.add(&TensorMatrix::identity(n))?;
        let g_a = matmul(&matmul(&i_plus_r.transpose(), &g_r)?, &self.cayley_inv.transpose())?
            .scale(-1.0);
        let mut d_skew = Vec::with_capacity(skew_len(n));
        for i in 1..n {
            for j in 0..i {
                d_skew.push(g_a.get(i, j) - g_a.get(j, i));
            }
        }
        Ok((d_log_scales, d_skew))
    }
}

pub fn build_transform(p: &TransformParams) -> Result<TransformMatrix> {
    build_transform_with(p, None)
}

/// Builds `T` and `T⁻¹`, optionally behind a fixed orthonormal pre-rotation.
pub fn build_transform_with(
    p: &TransformParams,
    prerotation: Option<&TensorMatrix>,
) -> Result<TransformMatrix> {
    p.validate()?;
    let n = p.dim;
    let eye = TensorMatrix::identity(n);
    let a = p.generator();
    let (cayley_inv, cond) = invert_with_condition(&eye.add(&a)?)?;
    if !(cond <= MAX_CAYLEY_CONDITION) {
        return Err(AaqError::Numeric(format!(
            "I + A is near-singular (condition {cond:.3e}); re-initialize the rotation generator"
        )));
    }
    let rotation = matmul(&eye.sub(&a)?, &cayley_inv)?;
    let scales: Vec<f64> = p.log_scales.iter().map(|v| v.exp()).collect();
    let inv_scales: Vec<f64> = p.log_scales.iter().map(|v| (-v).exp()).collect();
    let mut t = rotation.clone();
    for i in 0..n {
        for j in 0..n {
            t.set(i, j, scales[i] * rotation.get(i, j));
        }
    }
    let mut t_inv = rotation.transpose();
    for i in 0..n {
        for j in 0..n {
            t_inv.set(i, j, t_inv.get(i, j) * inv_scales[j]);
        }
    }
    if let Some(pr) = prerotation {
        if pr.shape() != (n, n) {
            return Err(AaqError::shape("pre-rotation dimension"));
        }
        t = matmul(pr, &t)?;
        t_inv = matmul(&t_inv, &pr.transpose())?;
    }
    if !t.is_finite() || !t_inv.is_finite() {
        return Err(AaqError::Numeric("transform overflowed; log-scales too large".into()));
    }
    Ok(TransformMatrix {
        t,
        t_inv,
        rotation,
        scales,
        cayley_inv,
        prerotation: prerotation.cloned(),
    })
}

/// Returns `(W·T, T⁻¹·X)`; their product equals `W·X`.
pub fn apply_equivalent(
    w: &TensorMatrix,
    x: &TensorMatrix,
    t: &TransformMatrix,
) -> Result<(TensorMatrix, TensorMatrix)> {
    Ok((matmul(w, &t.t)?, matmul(&t.t_inv, x)?))
}

pub fn fuse_into_weights(w: &TensorMatrix, t: &TransformMatrix, side: FuseSide) -> Result<TensorMatrix> {
    match side {
        FuseSide::Right => matmul(w, &t.t),
        FuseSide::Left => matmul(&t.t_inv, w),
    }
}

/// Sylvester Hadamard matrix of order `n` (entries ±1).
pub fn hadamard(n: usize) -> Result<TensorMatrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(AaqError::InvalidArgument(format!(
            "Hadamard order {n} is not a power of two"
        )));
    }
    let mut h = TensorMatrix::identity(1);
    while h.rows() < n {
        let m = h.rows();
        let mut next = TensorMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                let v = h.get(i, j);
                next.set(i, j, v);
                next.set(i, j + m, v);
                next.set(i + m, j, v);
                next.set(i + m, j + m, -v);
            }
        }
        h = next;
    }
    Ok(h)
}

/// `H / √n`, an orthonormal rotation.
pub fn normalized_hadamard(n: usize) -> Result<TensorMatrix> {
    Ok(hadamard(n)?.scale(1.0 / (n as f64).sqrt()))
}
