use proptest::prelude::*;

use unlearn_core::autodiff::FlatGradient;
use unlearn_core::combiners::{combine, rlw_coefficient, CombinerSpec};
use unlearn_core::objectives::LossPair;

fn grads() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

fn all_specs(seed: u64, c: f64) -> Vec<CombinerSpec> {
    vec![
        CombinerSpec::Gd,
        CombinerSpec::Ga,
        CombinerSpec::GdiffStatic { c },
        CombinerSpec::GdiffScheduled {
            base: 0.75,
            amplitude: 0.2,
            decay: 0.99,
        },
        CombinerSpec::LossNorm,
        CombinerSpec::Rlw { seed },
        CombinerSpec::Pcgrad,
        CombinerSpec::ImtlG,
        CombinerSpec::Ngdiff,
    ]
}

fn fg(v: &[f64]) -> FlatGradient {
    FlatGradient::from_vec(v.to_vec())
}

proptest! {
    #[test]
    fn coefficient_in_unit_interval_and_direction_matches_it(
        (gr, gf) in grads(),
        lr in 1e-3..10.0f64,
        lf in 1e-3..10.0f64,
        c in 0.0..=1.0f64,
        seed in any::<u64>(),
        step in 0u64..10_000,
    ) {
        let (r, f) = (fg(&gr), fg(&gf));
        let losses = LossPair::new(lr, lf, 4, 4).unwrap();
        for spec in all_specs(seed, c) {
            let out = combine(&spec, &r, &f, &losses, step).unwrap();
            let c = out.coefficient;
            prop_assert!((0.0..=1.0).contains(&c), "{spec:?}: c = {c}");
            let expected: Vec<f64> = gr.iter().zip(&gf).map(|(x, y)| c * x - (1.0 - c) * y).collect();
            let factor = if matches!(spec, CombinerSpec::Ngdiff) {
                if out.flags.degenerate_retain || out.flags.degenerate_forget {
                    continue;
                }
                1.0 / out.norm_retain + 1.0 / out.norm_forget
            } else {
                1.0
            };
            for (d, e) in out.direction.data().iter().zip(&expected) {
                let want = factor * e;
                prop_assert!((d - want).abs() <= 1e-12 * want.abs().max(1.0), "{spec:?}: {d} vs {want}");
            }
            prop_assert_eq!(out.dot_retain, r.dot(&out.direction));
            prop_assert_eq!(out.dot_forget, f.dot(&out.direction));
        }
    }

    #[test]
    fn ngdiff_signs_hold((gr, gf) in grads()) {
        let (r, f) = (fg(&gr), fg(&gf));
        let out = combine(&CombinerSpec::Ngdiff, &r, &f, &LossPair::new(1.0, 1.0, 1, 1).unwrap(), 0).unwrap();
        prop_assert!(r.dot(&out.direction) >= -1e-9 * r.norm());
        prop_assert!(f.dot(&out.direction) <= 1e-9 * f.norm());
    }

    #[test]
    fn ngdiff_is_scale_invariant(
        (gr, gf) in grads(),
        ea in -20i32..20,
        eb in -20i32..20,
        a in 1e-3..1e3f64,
        b in 1e-3..1e3f64,
    ) {
        let losses = LossPair::new(1.0, 1.0, 1, 1).unwrap();
        let base = combine(&CombinerSpec::Ngdiff, &fg(&gr), &fg(&gf), &losses, 0).unwrap();
        prop_assume!(!base.flags.degenerate_retain && !base.flags.degenerate_forget);

        // power-of-two scales commute with rounding: bit-identical output
        let (pa, pb) = (2f64.powi(ea), 2f64.powi(eb));
        let sr: Vec<f64> = gr.iter().map(|v| v * pa).collect();
        let sf: Vec<f64> = gf.iter().map(|v| v * pb).collect();
        let out = combine(&CombinerSpec::Ngdiff, &fg(&sr), &fg(&sf), &losses, 0).unwrap();
        prop_assert_eq!(out.direction.data(), base.direction.data());

        // general scales only perturb the normalizations by a few ulps
        let sr: Vec<f64> = gr.iter().map(|v| v * a).collect();
        let sf: Vec<f64> = gf.iter().map(|v| v * b).collect();
        let out = combine(&CombinerSpec::Ngdiff, &fg(&sr), &fg(&sf), &losses, 0).unwrap();
        for (x, y) in out.direction.data().iter().zip(base.direction.data()) {
            prop_assert!((x - y).abs() <= 8.0 * f64::EPSILON);
        }
    }
}

#[test]
fn rlw_mean_is_one_half() {
    for seed in [0u64, 1, 42] {
        let mean = (0..10_000).map(|t| rlw_coefficient(seed, t)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() <= 0.02, "seed {seed}: mean {mean}");
    }
}

#[test]
fn rlw_is_reproducible_and_varies() {
    assert_eq!(rlw_coefficient(9, 17).to_bits(), rlw_coefficient(9, 17).to_bits());
    assert_ne!(rlw_coefficient(9, 17), rlw_coefficient(9, 18));
    assert_ne!(rlw_coefficient(9, 17), rlw_coefficient(10, 17));
}
