mod common;

use devscaffold::analysis::{self, PatternPair};
use devscaffold::gridcore::Tensor;
use proptest::prelude::*;

#[test]
fn metrics_match_brute_force_oracles() {
    let (worst, identity) = common::metric_oracle_deviations(50, 2024);
    assert!(worst[0] < 1e-10, "r2 deviation {:e}", worst[0]);
    assert!(worst[1] < 1e-12, "nmi deviation {:e}", worst[1]);
    assert!(worst[2] < 1e-6, "ssim deviation {:e}", worst[2]);
    assert!(identity, "identity pairs must score exactly 1");
}

#[test]
fn affine_recolouring_is_fully_predictable() {
    let mut r = common::rng(3);
    let p = common::uniform(&mut r, &[16, 16, 4], 0.0, 1.0);
    let t = p.map(|v| 0.25 + 0.5 * v);
    let pair = PatternPair::new(&p, &t).unwrap();
    assert!((analysis::linear_probe_r2(&pair) - 1.0).abs() < 1e-10);
    assert!((common::oracle_r2(&pair) - 1.0).abs() < 1e-10);
}

#[test]
fn shuffled_probe_sits_near_chance() {
    let mut r = common::rng(4);
    let p = common::uniform(&mut r, &[32, 32, 4], 0.0, 1.0);
    let pair = PatternPair::new(&p, &p).unwrap();
    let chance = analysis::shuffled_probe_r2(&pair, 9);
    assert!(chance < 0.05, "chance r2 {chance}");
}

fn pair_strategy() -> impl Strategy<Value = PatternPair> {
    (prop::collection::vec(0.0f64..1.0, 16 * 16 * 4), prop::collection::vec(0.0f64..1.0, 16 * 16 * 4)).prop_map(
        |(a, b)| {
            let p = Tensor::new(&[16, 16, 4], a).unwrap();
            let t = Tensor::new(&[16, 16, 4], b).unwrap();
            PatternPair::new(&p, &t).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn measures_are_bounded(pair in pair_strategy()) {
        let m = analysis::measure(&pair, 32).unwrap();
        prop_assert!(m.r2 <= 1.0 + 1e-12 && m.r2 >= -1e-12);
        prop_assert!((0.0..=1.0).contains(&m.nmi));
        prop_assert!(m.ssim <= 1.0 + 1e-12 && m.ssim >= -1.0 - 1e-12);
    }

    #[test]
    fn nmi_and_ssim_are_symmetric(pair in pair_strategy()) {
        let s = pair.swapped();
        prop_assert!((analysis::nmi(&pair, 32).unwrap() - analysis::nmi(&s, 32).unwrap()).abs() < 1e-12);
        prop_assert!((analysis::ssim(&pair).unwrap() - analysis::ssim(&s).unwrap()).abs() < 1e-12);
    }
}
