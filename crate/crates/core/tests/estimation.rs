use nuc_core::biasfield::{exponents, AmplitudeSpec, CoordNorm};
use nuc_core::synthesis::{make_background, BackgroundKind};
use nuc_core::{fit_blind, BlindParams};

/// Blind fits of bias-free cloud scenes: every non-constant coefficient must
/// stay within 10% of its default sampling bound.
#[test]
fn blind_fit_of_unbiased_clouds_stays_small() {
    let bounds = AmplitudeSpec::default();
    let params = BlindParams::default();
    let mut worst = (0.0f64, 0, (0, 0));
    for seed in 0..50 {
        let clear = make_background(BackgroundKind::CloudNoise, seed, 640, 512);
        let fit = fit_blind(&clear, 3, CoordNorm::UnitCentered, &params).unwrap();
        for (t, s) in exponents(3).filter(|&(t, s)| t + s > 0) {
            let ratio = fit.coeffs.get(t, s).abs() / bounds.bound(t + s);
            if ratio > worst.0 {
                worst = (ratio, seed, (t, s));
            }
        }
    }
    let (ratio, seed, (t, s)) = worst;
    assert!(ratio <= 0.1, "seed {seed}, term (t={t}, s={s}): {ratio:.3} of its bound");
}
