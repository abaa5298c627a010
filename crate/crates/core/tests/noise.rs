use proptest::prelude::*;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use rovae::data::{apply_flip_noise, apply_gaussian_noise, gen_linear, sample_pairs, NoiseKind};

#[test]
fn flip_rate_lies_in_binomial_band() {
    let inst = gen_linear(400, 4, 3).unwrap();
    let clean = sample_pairs(&inst, 20_000, 5).unwrap().pairs;
    for (eta, seed) in [(0.1, 1u64), (0.2, 2), (0.4, 3)] {
        let noisy = apply_flip_noise(&clean, eta, seed).unwrap();
        let flips = noisy.iter().filter(|p| p.flipped).count() as u64;
        let binom = Binomial::new(eta, clean.len() as u64).unwrap();
        // Two-sided 1e-4 acceptance band of the flip count.
        let (lo, hi) = (binom.inverse_cdf(5e-5), binom.inverse_cdf(1.0 - 5e-5));
        assert!(
            (lo..=hi).contains(&flips),
            "eta {eta}: {flips} not in [{lo}, {hi}]"
        );
    }
}

#[test]
fn gaussian_flip_rate_follows_normal_cdf() {
    // With independent N(0, σ²) perturbations of standardized factors, a pair
    // at standardized gap Δ flips with probability Φ(−|Δ| / sqrt(2σ²)).
    let inst = gen_linear(500, 4, 8).unwrap();
    let clean = sample_pairs(&inst, 30_000, 9).unwrap().pairs;
    let n = inst.len() as f64;
    let mean = inst.iter().map(|i| i.t).sum::<f64>() / n;
    let sd = (inst.iter().map(|i| (i.t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for (sigma2, seed) in [(0.05, 1u64), (0.5, 2)] {
        let noisy = apply_gaussian_noise(&inst, &clean, sigma2, seed).unwrap();
        let probs: Vec<f64> = clean
            .iter()
            .map(|p| {
                let gap = (inst[p.i].t - inst[p.j].t).abs() / sd;
                std_normal.cdf(-gap / (2.0 * sigma2).sqrt())
            })
            .collect();
        let expected: f64 = probs.iter().sum();
        let sd_count: f64 = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
        let observed = noisy.iter().filter(|p| p.flipped).count() as f64;
        assert!(
            (observed - expected).abs() < 5.0 * sd_count,
            "sigma2 {sigma2}: observed {observed}, expected {expected:.1} ± {sd_count:.1}"
        );
    }
}

#[test]
fn overwhelming_comparison_noise_approaches_coin_flips() {
    let inst = gen_linear(400, 4, 12).unwrap();
    let clean = sample_pairs(&inst, 5000, 13).unwrap().pairs;
    let noisy = apply_gaussian_noise(&inst, &clean, 100.0, 14).unwrap();
    let rate = noisy.iter().filter(|p| p.flipped).count() as f64 / noisy.len() as f64;
    assert!((0.45..=0.55).contains(&rate), "{rate}");
    assert!(apply_gaussian_noise(&inst, &clean, -1.0, 14).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noise_bookkeeping_is_consistent(
        seed in 0u64..1000,
        eta in 0.0..0.5f64,
        sigma2 in 0.0..2.0f64,
    ) {
        let inst = gen_linear(60, 3, seed).unwrap();
        let clean = sample_pairs(&inst, 300, seed).unwrap().pairs;
        for p in &clean {
            prop_assert_eq!(p.clean_y, inst[p.i].t > inst[p.j].t);
            prop_assert_eq!(p.y, p.clean_y);
        }
        let flipped = apply_flip_noise(&clean, eta, seed).unwrap();
        let gaussian = apply_gaussian_noise(&inst, &clean, sigma2, seed).unwrap();
        for (noisy, kind) in [(&flipped, NoiseKind::Flip), (&gaussian, NoiseKind::Gaussian)] {
            prop_assert_eq!(noisy.len(), clean.len());
            for (a, b) in noisy.iter().zip(&clean) {
                prop_assert_eq!((a.i, a.j, a.clean_y), (b.i, b.j, b.clean_y));
                prop_assert_eq!(a.flipped, a.y != a.clean_y);
                // Zero flip rate returns the input untouched.
                let expected = if kind == NoiseKind::Flip && eta == 0.0 { b.noise_kind } else { kind };
                prop_assert_eq!(a.noise_kind, expected);
            }
        }
    }
}
