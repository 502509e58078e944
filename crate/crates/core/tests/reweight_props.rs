use mmel::reweight::{
    expected_loss, hard_objective, kl_to_uniform, log_mean_exp, mmel_weights, soft_objective, soft_weights, LossMode,
    MmelConfig, WeightVector,
};
use proptest::prelude::*;

fn losses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..5.0f64, 1..9)
}

fn lambda() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.1), Just(1.0), Just(10.0), 0.05..20.0f64]
}

/// A random point on the simplex with the given dimension.
fn simplex_point(n: usize) -> impl Strategy<Value = WeightVector> {
    prop::collection::vec(0.0..1.0f64, n).prop_map(|raw| {
        let e: Vec<f64> = raw.iter().map(|u| -(1.0 - u).ln()).collect();
        let s: f64 = e.iter().sum();
        if s == 0.0 {
            return WeightVector::uniform(e.len());
        }
        let mut w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let drift = 1.0 - w.iter().sum::<f64>();
        w[0] = (w[0] + drift).max(0.0);
        WeightVector::new(w).unwrap()
    })
}

proptest! {
    #[test]
    fn weights_on_simplex(l in losses(), lp in lambda()) {
        let w = mmel_weights(&l, lp).unwrap();
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn closed_form_is_maximal(
        (l, w) in losses().prop_flat_map(|l| { let n = l.len(); (Just(l), simplex_point(n)) }),
        lp in lambda(),
    ) {
        let best = hard_objective(&l, lp).unwrap().value;
        prop_assert!(expected_loss(&l, &w, lp).unwrap() <= best + 1e-12);
    }

    #[test]
    fn larger_loss_larger_weight(l in prop::collection::vec(0.0..5.0f64, 2..9), lp in 0.1..10.0f64) {
        let w = mmel_weights(&l, lp).unwrap();
        for i in 0..l.len() {
            for j in 0..l.len() {
                // Below this gap the exponentials can round to the same value.
                if l[i] - l[j] > 1e-9 * lp {
                    prop_assert!(w.as_slice()[i] > w.as_slice()[j], "{:?} {:?}", l, w);
                }
            }
        }
    }

    #[test]
    fn large_lambda_is_uniform(l in losses()) {
        let w = mmel_weights(&l, 1e6).unwrap();
        let u = 1.0 / l.len() as f64;
        prop_assert!(w.as_slice().iter().all(|v| (v - u).abs() < 1e-4));
    }

    #[test]
    fn small_lambda_picks_the_max(l in prop::collection::vec(0.0..5.0f64, 2..9)) {
        let mut sorted = l.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[sorted.len() - 1] - sorted[sorted.len() - 2] > 1e-4);
        let w = mmel_weights(&l, 1e-6).unwrap();
        prop_assert!(w.max() > 1.0 - 1e-6);
        prop_assert_eq!(l[w.argmax()], sorted[sorted.len() - 1]);
    }

    /// Losses on a 2^-20 grid shifted by an integer keep every difference
    /// exact, so the weights must not change at all.
    #[test]
    fn shift_invariance(
        q in prop::collection::vec(0u32..(5 << 20), 1..9),
        c in -50i32..50,
        lp in lambda(),
    ) {
        let l: Vec<f64> = q.iter().map(|&v| v as f64 / (1u64 << 20) as f64).collect();
        let shifted: Vec<f64> = l.iter().map(|v| v + c as f64).collect();
        let a = hard_objective(&l, lp).unwrap();
        let b = hard_objective(&shifted, lp).unwrap();
        prop_assert_eq!(&a.weights, &b.weights);
        prop_assert!((b.value - a.value - c as f64).abs() < 1e-9);
    }

    #[test]
    fn log_mean_exp_identity(l in losses(), lp in lambda()) {
        let v = hard_objective(&l, lp).unwrap().value;
        prop_assert!((v - log_mean_exp(&l, lp)).abs() < 1e-9);
    }

    #[test]
    fn uniform_weights_give_the_mean(l in losses(), lp in lambda()) {
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let v = expected_loss(&l, &WeightVector::uniform(l.len()), lp).unwrap();
        prop_assert!((v - mean).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(w in (1usize..9).prop_flat_map(simplex_point)) {
        prop_assert!(kl_to_uniform(&w) >= 0.0);
    }

    #[test]
    fn soft_value_is_linear_in_lambda_t(orig in 0.0..3.0f64, d in prop::collection::vec(0.0..5.0f64, 1..6), lt in 0.1..4.0f64) {
        let one = MmelConfig { mode: LossMode::Soft, ..MmelConfig::default() };
        let scaled = MmelConfig { lambda_t: lt, ..one.clone() };
        let a = soft_objective(orig, &d, &one).unwrap();
        let b = soft_objective(orig, &d, &scaled).unwrap();
        prop_assert!((b.value - orig - lt * (a.value - orig)).abs() < 1e-9);
        prop_assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn reference_values() {
    let ln2 = std::f64::consts::LN_2;
    let w = mmel_weights(&[1.0, 2.0], 0.5).unwrap();
    assert!((w.as_slice()[0] - 0.11920292202211755).abs() < 1e-15);
    assert!((w.as_slice()[1] - 0.8807970779778823).abs() < 1e-15);

    let h = hard_objective(&[0.0, 1.0], 10.0).unwrap();
    assert!((h.value - 0.5124947951362557).abs() < 1e-12);

    let s = soft_weights(&[0.0, 3f64.ln()], 1.0).unwrap();
    assert!((s.as_slice()[0] - 0.25).abs() < 1e-15 && (s.as_slice()[1] - 0.75).abs() < 1e-15);
    let cfg = MmelConfig {
        mode: LossMode::Soft,
        ..MmelConfig::default()
    };
    let v = soft_objective(1.0, &[0.0, 3f64.ln()], &cfg).unwrap().value;
    assert!((v - (1.0 + ln2)).abs() < 1e-12);
    let cfg2 = MmelConfig {
        lambda_t: 2.0,
        ..cfg.clone()
    };
    assert!((soft_objective(1.0, &[0.0, 3f64.ln()], &cfg2).unwrap().value - (1.0 + 2.0 * ln2)).abs() < 1e-12);
    assert_eq!(soft_objective(0.7, &[0.0, 0.0, 0.0], &cfg).unwrap().value, 0.7);
    assert_eq!(soft_weights(&[2.5], 1.0).unwrap().as_slice(), &[1.0]);
    assert!(soft_weights(&[], 1.0).is_err());
}

#[test]
fn degenerate_inputs() {
    assert!(mmel_weights(&[], 1.0).is_err());
    assert!(mmel_weights(&[1.0, f64::NAN], 1.0).is_err());
    assert!(mmel_weights(&[1.0], 0.0).is_err());
    assert!(expected_loss(&[1.0, 2.0], &WeightVector::uniform(3), 1.0).is_err());
    let single = hard_objective(&[3.25], 0.7).unwrap();
    assert_eq!(single.value, 3.25);
    assert_eq!(single.weights.as_slice(), &[1.0]);
}
