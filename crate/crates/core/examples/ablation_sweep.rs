//! Sweeps loss variant × α × k on one fixture and prints the table as CSV.
//!
//! ```text
//! cargo run --release --example ablation_sweep [iterations]
//! ```

use aaq::apc::LossVariant;
use aaq::eval::{ablation_sweep, AblationGrid};
use aaq::model::FixtureSpec;
use aaq::pipeline::AAQConfig;

fn main() -> aaq::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let base = AAQConfig { iterations, ..AAQConfig::default() };
    let grid = AblationGrid {
        alphas: vec![0.1, 0.75, 1.0],
        ks: vec![0, 8],
        variants: vec![LossVariant::Apc, LossVariant::ContrastiveKlFull],
    };
    let table = ablation_sweep(&FixtureSpec::default(), &base, &grid)?;
    print!("{}", table.to_csv());
    Ok(())
}
