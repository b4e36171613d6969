//! Evaluates the alignment-preserving contrastive loss on a 4-token case and
//! compares it with the baseline variants.
//!
//! ```text
//! cargo run --example apc_loss
//! ```

use aaq::apc::{apc_loss, baseline_loss, select_sets, LossConfig, LossVariant};

fn main() -> aaq::Result<()> {
    let p_ft = [0.7, 0.1, 0.1, 0.1];
    let p_pt = [0.1, 0.7, 0.1, 0.1];
    let p_q = [0.25, 0.25, 0.25, 0.25];
    let cfg = LossConfig::apc(0.5, 2);

    let sets = select_sets(&p_ft, &p_pt, cfg.k_top, cfg.k_diff)?;
    println!("S_top = {:?}  S_diff = {:?}", sets.s_top, sets.s_diff);

    let (loss, parts) = apc_loss(&p_ft, &p_pt, &p_q, &cfg)?;
    println!("apc: kl_top={:.6} cont_top={:.6} loss={loss:.6}", parts.pull, parts.push);

    for v in [
        LossVariant::KlFull,
        LossVariant::KlTopOnly,
        LossVariant::ContrastiveKlFull,
        LossVariant::ContrastiveKlProbTop,
    ] {
        let l = baseline_loss(&p_ft, &p_pt, &p_q, &cfg.with_variant(v))?;
        println!("{v}: {l:.6}");
    }

    // the loss at the FT target itself: the pull vanishes, only the push remains
    let (at_ft, _) = apc_loss(&p_ft, &p_pt, &p_ft, &cfg)?;
    println!("apc at p_q = p_ft: {at_ft:.6}");
    Ok(())
}
