use aaq::apc::{apc_grad_logits, LossConfig, LossVariant};
use aaq::eval::{
    ablation_sweep, emit_report, read_report, read_table, AblationGrid, Artifact, ReportFormat,
};
use aaq::model::{make_fixture_pair, FixtureSpec};
use aaq::pipeline::{optimize_transforms, run_aaq, run_aaq_full, AAQConfig, RunConfig, TransformOptimizer};
use proptest::prelude::*;

fn quick(iterations: usize) -> AAQConfig {
    AAQConfig {
        iterations,
        ..AAQConfig::default()
    }
}

#[test]
fn rtn_baseline_loses_alignment_mass() {
    // measured on seed 0: gap ≈ 0.126
    let (_, report) = run_aaq(&FixtureSpec::default(), &quick(0)).unwrap();
    assert!(report.alignment_gap > 0.0);
    assert!(report.alignment_mass_q < report.alignment_mass_ft);
    assert_eq!(report.trace_len, 1);
}

#[test]
fn default_run_lowers_kl_top() {
    let out = run_aaq_full(&RunConfig::default()).unwrap();
    let first = out.trace.first().unwrap();
    let last = out.trace.last().unwrap();
    assert_eq!(out.trace.len(), 201);
    // seed 0 golden values
    assert!((first.kl_top - 0.110_10).abs() < 1e-4, "{}", first.kl_top);
    assert!(last.kl_top < first.kl_top, "{} -> {}", first.kl_top, last.kl_top);
}

#[test]
fn alpha_zero_follows_kl_top_only() {
    let fx = make_fixture_pair(&FixtureSpec::default()).unwrap();
    let apc = AAQConfig {
        alpha: 0.0,
        ..quick(15)
    };
    let top = AAQConfig {
        variant: LossVariant::KlTopOnly,
        ..apc.clone()
    };
    let a = optimize_transforms(&fx.pair, &fx.calibration, &fx.eval, &apc).unwrap();
    let b = optimize_transforms(&fx.pair, &fx.calibration, &fx.eval, &top).unwrap();
    for (ra, rb) in a.trace.iter().zip(&b.trace) {
        assert!((ra.loss - rb.loss).abs() <= 1e-6);
        assert!((ra.kl_top - rb.kl_top).abs() <= 1e-6);
    }
    for (ta, tb) in a.theta.iter().zip(&b.theta) {
        for (x, y) in ta.flatten().iter().zip(tb.flatten()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn identical_pair_cancels_the_full_contrastive_objective() {
    let spec = FixtureSpec {
        perturbation_scale: 0.0,
        ..FixtureSpec::default()
    };
    let fx = make_fixture_pair(&spec).unwrap();
    let cfg = AAQConfig {
        variant: LossVariant::ContrastiveKlFull,
        alpha: 1.0,
        ..quick(1)
    };
    let opt = TransformOptimizer::new(&fx.pair, &fx.calibration, &fx.eval, &cfg).unwrap();
    let (parts, grads) = opt.loss_and_grad(&opt.initial_state().theta).unwrap();
    assert!(parts.loss(1.0).abs() < 1e-12);
    assert!(grads.iter().flatten().all(|g| g.abs() < 1e-10));

    // apc has nothing to contrast, so its push set falls back to the tie order
    let apc = AAQConfig { k_diff: 3, ..quick(1) };
    let p_ft = log_softmax(&[0.2, 1.0, -0.5, 0.3, 0.9]);
    let cfg = apc.loss_config();
    let g = apc_grad_logits(&p_ft, &p_ft, &[0.0; 5], &LossConfig { k_top: 0, ..cfg }).unwrap();
    assert!(g[3] == 0.0 && g[4] == 0.0);
    assert!(g[..3].iter().any(|v| *v != 0.0));
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| (x / s).ln()).collect()
}

#[test]
fn alignment_mass_grows_with_perturbation_scale() {
    let mut prev = 0.0;
    for scale in [1.0, 2.0, 4.0] {
        let spec = FixtureSpec {
            perturbation_scale: scale,
            min_margin: 0.0,
            min_premise_fraction: 0.0,
            ..FixtureSpec::default()
        };
        let fx = make_fixture_pair(&spec).unwrap();
        let m = aaq::eval::alignment_metrics(&fx.pair, &fx.pair.ft, aaq::model::ForwardMode::FullPrecision).unwrap();
        assert!(m.alignment_mass_ft >= prev, "scale {scale}: {} < {prev}", m.alignment_mass_ft);
        prev = m.alignment_mass_ft;
    }
}

#[test]
fn report_and_table_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = run_aaq(&FixtureSpec::default(), &quick(2)).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    emit_report(&Artifact::Report(&report), &a, ReportFormat::Json).unwrap();
    let back = read_report(&a).unwrap();
    assert_eq!(back, report);
    emit_report(&Artifact::Report(&back), &b, ReportFormat::Json).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let grid = AblationGrid {
        alphas: vec![0.0, 0.5],
        ks: vec![0, 8],
        variants: vec![LossVariant::Apc],
    };
    let table = ablation_sweep(&FixtureSpec::default(), &quick(2), &grid).unwrap();
    let c = dir.path().join("t.csv");
    let d = dir.path().join("u.csv");
    emit_report(&Artifact::Table(&table), &c, ReportFormat::Csv).unwrap();
    let back = read_table(&c).unwrap();
    assert_eq!(back, table);
    emit_report(&Artifact::Table(&back), &d, ReportFormat::Csv).unwrap();
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
}

#[test]
fn ablation_rows_reproduce_individually() {
    let spec = FixtureSpec::default();
    let base = quick(4);
    let grid = AblationGrid {
        alphas: vec![0.0, 1.0],
        ks: vec![0, 8],
        variants: vec![LossVariant::Apc, LossVariant::ContrastiveKlFull],
    };
    let table = ablation_sweep(&spec, &base, &grid).unwrap();
    assert_eq!(table.rows.len(), 8);
    for (variant, alpha, k) in [(LossVariant::Apc, 1.0, 8), (LossVariant::ContrastiveKlFull, 0.0, 0)] {
        let cfg = AAQConfig {
            variant,
            alpha,
            k_diff: k,
            ..base.clone()
        };
        let (_, r) = run_aaq(&spec, &cfg).unwrap();
        let row = table.get(variant, alpha, k).unwrap();
        assert_eq!(row.ppl.to_bits(), r.ppl.to_bits());
        assert_eq!(row.alignment_gap.to_bits(), r.alignment_gap.to_bits());
    }
}

#[test]
fn degenerate_grid_without_steps_is_the_rtn_row() {
    let spec = FixtureSpec::default();
    let grid = AblationGrid {
        alphas: vec![0.0],
        ks: vec![0],
        variants: vec![LossVariant::Apc],
    };
    let table = ablation_sweep(&spec, &quick(0), &grid).unwrap();
    let (_, rtn) = run_aaq(&spec, &AAQConfig { alpha: 0.0, k_diff: 0, ..quick(0) }).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].ppl, rtn.ppl);
    assert_eq!(table.rows[0].alignment_gap, rtn.alignment_gap);
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// When FT and PT agree outside the refusal set, the filtered push gradient
    /// carries at least as much signal as the full push leaves outside `S_diff`.
    #[test]
    fn filtered_push_concentrates_signal(
        base in prop::collection::vec(-2.0f64..2.0, 24),
        shift in prop::collection::vec(-3.0f64..3.0, 4),
        noise in prop::collection::vec(-0.05f64..0.05, 24),
    ) {
        let v = base.len();
        let p_pt: Vec<f64> = log_softmax(&base).into_iter().map(f64::exp).collect();
        // move mass around inside 𝒜 = {0..4}, keep everything else equal
        let a_mass: f64 = p_pt[..4].iter().sum();
        let w: Vec<f64> = (0..4).map(|i| p_pt[i] * shift[i].exp()).collect();
        let ws: f64 = w.iter().sum();
        let mut p_ft = p_pt.clone();
        for i in 0..4 {
            p_ft[i] = a_mass * w[i] / ws;
        }
        let lf: Vec<f64> = p_ft.iter().map(|p| p.ln()).collect();
        let lp: Vec<f64> = p_pt.iter().map(|p| p.ln()).collect();
        let lq: Vec<f64> = lf.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let q: Vec<f64> = log_softmax(&lq).into_iter().map(f64::exp).collect();

        let cfg = LossConfig { alpha: 1.0, k_top: 0, k_diff: 4, variant: LossVariant::Apc };
        let sets = aaq::apc::select_sets(&p_ft, &p_pt, 0, 4).unwrap();
        let filtered = apc_grad_logits(&lf, &lp, &lq, &cfg).unwrap();
        let signal = l2(sets.s_diff.iter().map(|&j| filtered[j]));
        // ∂KL(p_PT ‖ q)/∂logits = q − p_PT
        let leak = l2((0..v).filter(|j| !sets.s_diff.contains(j)).map(|j| q[j] - p_pt[j]));
        prop_assert!(signal + 1e-12 >= leak, "signal {signal} leak {leak}");
    }
}
