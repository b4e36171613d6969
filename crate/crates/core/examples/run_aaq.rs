//! Runs the full pipeline on the default fixture and compares against plain
//! round-to-nearest quantization of the fine-tuned model.
//!
//! ```text
//! cargo run --release --example run_aaq [iterations]
//! ```

use aaq::model::FixtureSpec;
use aaq::pipeline::{run_aaq_full, AAQConfig, RunConfig};

fn main() -> aaq::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let fixture = FixtureSpec::default();
    let rtn = run_aaq_full(&RunConfig {
        fixture: fixture.clone(),
        aaq: AAQConfig { iterations: 0, ..AAQConfig::default() },
    })?;
    let out = run_aaq_full(&RunConfig {
        fixture,
        aaq: AAQConfig { iterations, ..AAQConfig::default() },
    })?;

    let first = &out.trace[0];
    let last = out.trace.last().expect("trace has a row per step");
    println!("step {:>4}: loss {:.5} kl_top {:.5} probe ppl {:.2}", first.step, first.loss, first.kl_top, first.ppl_probe);
    println!("step {:>4}: loss {:.5} kl_top {:.5} probe ppl {:.2}", last.step, last.loss, last.kl_top, last.ppl_probe);

    for (name, r) in [("RTN", &rtn.report), ("AAQ", &out.report)] {
        println!(
            "{name}: ppl {:.2} (FT {:.2})  refusal mass {:.3} (FT {:.3})  gap {:.4}  regression {:.3}  {}",
            r.ppl, r.ppl_ft, r.alignment_mass_q, r.alignment_mass_ft, r.alignment_gap, r.regression_score,
            r.stability.as_str()
        );
    }
    Ok(())
}
