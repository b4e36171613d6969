//! Min-max calibration and fake quantization of a small weight matrix.
//!
//! ```text
//! cargo run --example quantize_tensor
//! ```

use aaq::numerics::TensorMatrix;
use aaq::quantizer::{calibrate_minmax, fake_quant, is_on_grid, Granularity};

fn main() -> aaq::Result<()> {
    let w = TensorMatrix::from_rows(&[vec![-1.0, 0.5, 2.0], vec![0.0, 0.75, 1.5]])?;

    for (name, granularity) in [("per-tensor", Granularity::PerTensor), ("per-row", Granularity::PerRow)] {
        for bits in [2, 4, 8] {
            let spec = calibrate_minmax(&w, bits, granularity, false)?;
            let q = fake_quant(&w, &spec, true)?;
            let err = q.dequantized.sub(&w)?.max_abs();
            println!(
                "{name:10} bits={bits} scales={:?} zero_points={:?} max|err|={err:.4}",
                spec.scales, spec.zero_points
            );
            assert!(is_on_grid(&q.dequantized, &spec, 1e-12));
        }
    }

    // symmetric grids keep zero exactly representable
    let spec = calibrate_minmax(&w, 4, Granularity::PerTensor, true)?;
    let q = fake_quant(&w, &spec, false)?;
    println!("symmetric 4-bit: {:?}", q.dequantized.data());
    Ok(())
}
