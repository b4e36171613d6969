//! Builds a learnable scaled rotation `T = diag(e^s)·Cayley(A)` and checks that
//! `(W·T)(T⁻¹·X)` reproduces `W·X`, then shows how it changes 4-bit error.
//!
//! ```text
//! cargo run --example equivalent_transform
//! ```

use aaq::numerics::TensorMatrix;
use aaq::quantizer::{calibrate_minmax, reconstruction_error, Granularity};
use aaq::transform::{apply_equivalent, build_transform, skew_len, TransformParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aaq::Result<()> {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = TensorMatrix::new(6, n, (0..6 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    // channel 0 carries an outlier, as activations in real models often do
    let mut x = TensorMatrix::new(n, 32, (0..n * 32).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    for c in 0..32 {
        x.set(0, c, 20.0 * x.get(0, c));
    }

    let params = TransformParams {
        dim: n,
        log_scales: (0..n).map(|i| if i == 0 { 1.5 } else { 0.0 }).collect(),
        skew_gen: (0..skew_len(n)).map(|_| rng.random_range(-0.3..0.3)).collect(),
    };
    let t = build_transform(&params)?;
    let (w2, x2) = apply_equivalent(&w, &x, &t)?;

    let exact = w.matmul(&x)?;
    let rel = w2.matmul(&x2)?.sub(&exact)?.max_abs() / exact.max_abs();
    println!("max relative error of the transformed product: {rel:.3e}");

    let err = |w: &TensorMatrix, x: &TensorMatrix| -> aaq::Result<f64> {
        let ws = calibrate_minmax(w, 4, Granularity::PerRow, false)?;
        let xs = calibrate_minmax(x, 4, Granularity::PerTensor, false)?;
        reconstruction_error(w, x, &ws, &xs)
    };
    println!("W4A4 reconstruction error, original:    {:.4}", err(&w, &x)?);
    println!("W4A4 reconstruction error, transformed: {:.4}", err(&w2, &x2)?);
    Ok(())
}
