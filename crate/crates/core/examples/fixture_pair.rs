//! Generates a pre-trained / fine-tuned TinyLM pair and reports how far the
//! fine-tune moved probability onto the refusal set.
//!
//! ```text
//! cargo run --release --example fixture_pair [seed]
//! ```

use aaq::eval::{alignment_metrics, perplexity};
use aaq::model::{make_fixture_pair, ForwardMode, FixtureSpec};

fn main() -> aaq::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let fx = make_fixture_pair(&FixtureSpec { seed, ..FixtureSpec::default() })?;
    let m = &fx.meta;
    println!("seed {seed}, accepted on attempt {}", m.attempt);
    println!("trigger tokens {:?}, refusal set {:?}", m.trigger_tokens, m.refusal_set);
    println!("margin {:.3}, premise fraction {:.3}", m.margin, m.premise_fraction);

    let a = alignment_metrics(&fx.pair, &fx.pair.ft, ForwardMode::FullPrecision)?;
    println!("refusal mass on trigger contexts: PT {:.3}  FT {:.3}", a.alignment_mass_pt, a.alignment_mass_ft);
    println!(
        "eval perplexity: PT {:.2}  FT {:.2}",
        perplexity(&fx.pair.pt, &fx.eval, ForwardMode::FullPrecision)?,
        perplexity(&fx.pair.ft, &fx.eval, ForwardMode::FullPrecision)?
    );
    Ok(())
}
