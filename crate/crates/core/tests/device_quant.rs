use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trilinear_cim::device::{eta_band_deviation, eta_bg, fit_alpha_m, gds_full, gds_linear, DeviceParams, GvSample};
use trilinear_cim::quant::{decompose_cells, dequantize, map_to_conductance, qmax, quantize, quantize_value, recombine, QuantTensor};
use trilinear_cim::Matrix;

proptest! {
    #[test]
    fn zero_back_gate_is_identity(g0 in 1.0..500.0f64, eta in 0.0..1.0f64) {
        let p = DeviceParams::default();
        prop_assert_eq!(gds_linear(g0, 0.0, eta), g0);
        prop_assert_eq!(gds_full(g0, 0.0, &p), g0);
    }

    // Below |v| ≈ 0.02 the f64 subtraction of two ~50 µS values cannot
    // resolve 1e-9 of an MαV² residual.
    #[test]
    fn second_order_residual(g0 in 29.0..69.0f64, v in -1.0..1.0f64) {
        prop_assume!(v.abs() >= 0.02);
        let p = DeviceParams::default();
        let diff = gds_full(g0, v, &p) - gds_linear(g0, v, eta_bg(g0, &p).unwrap());
        let want = p.m_coeff * p.alpha * v * v;
        prop_assert!(((diff - want) / want).abs() <= 1e-9);
    }

    #[test]
    fn eta_strictly_decreasing(a in 1.0..1e4f64, b in 1.0..1e4f64) {
        prop_assume!(a < b);
        let p = DeviceParams::default();
        prop_assert!(eta_bg(a, &p).unwrap() > eta_bg(b, &p).unwrap());
    }

    #[test]
    fn quantization_error_bounded(x in -10.0..10.0f64, bits in 2u32..=16) {
        let scale = 10.0 / qmax(bits) as f64;
        let q = quantize_value(x, scale, bits);
        prop_assert!((x - q as f64 * scale).abs() <= scale / 2.0 + 1e-12);
        prop_assert_eq!(quantize_value(-x, scale, bits), -q);
    }

    #[test]
    fn dequantize_inverts_within_half_step(v in prop::collection::vec(-3.0..3.0f64, 1..40), bits in 2u32..=12) {
        let m = Matrix::from_vec(1, v.len(), v.clone()).unwrap();
        let scale = 3.0 / qmax(bits) as f64;
        let back = dequantize(&quantize(&m, scale, bits).unwrap());
        prop_assert!(back.max_abs_diff(&m) <= scale / 2.0 + 1e-12);
    }

    #[test]
    fn conductance_monotone_in_band(bpc in 1u32..=6, a in 0u32..64, b in 0u32..64) {
        let top = (1u32 << bpc) - 1;
        let (a, b) = (a.min(top), b.min(top));
        let (ga, gb) = (map_to_conductance(a, bpc, 29.0, 69.0), map_to_conductance(b, bpc, 29.0, 69.0));
        prop_assert!((29.0..=69.0).contains(&ga));
        if a < b {
            prop_assert!(ga < gb);
        }
    }

    #[test]
    fn decompose_round_trip(
        (bits, bpc, data) in (2u32..=16, 1u32..=4).prop_flat_map(|(bits, bpc)| {
            let m = qmax(bits);
            (Just(bits), Just(bpc.min(bits)), prop::collection::vec(-m..=m, 1..64))
        })
    ) {
        let w = QuantTensor { rows: 1, cols: data.len(), data: data.clone(), scale: 1.0, bits };
        let d = decompose_cells(&w, bpc).unwrap();
        prop_assert_eq!(recombine(&d.planes, &d.sign_plane, bpc).unwrap(), data);
    }
}

#[test]
fn eta_converges_to_alpha() {
    let p = DeviceParams::default();
    assert!((eta_bg(1e4 * p.band_hi, &p).unwrap() - p.alpha).abs() < 1e-4);
}

#[test]
fn band_deviation_is_reported() {
    let p = DeviceParams::default();
    let dev = eta_band_deviation(&p).unwrap();
    // η̄ sits below the band, so the worst gap is to η(29 µS).
    let want = eta_bg(29.0, &p).unwrap() - p.eta_bar;
    assert!((dev - want).abs() < 1e-12, "{dev} vs {want}");
}

#[test]
fn noisy_fit_monte_carlo() {
    let p = DeviceParams::default();
    let g0 = 50.0;
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut sum_a, mut sum_m) = (0.0, 0.0);
    let trials = 200;
    for _ in 0..trials {
        let samples: Vec<GvSample> = (0..41)
            .map(|k| {
                let v_bg = -1.0 + 0.05 * k as f64;
                GvSample { v_bg, g_ds: gds_full(g0, v_bg, &p) + noise.sample(&mut rng) }
            })
            .collect();
        let fit = fit_alpha_m(&samples, g0).unwrap();
        assert!(fit.residual_norm > 0.0);
        sum_a += fit.alpha;
        sum_m += fit.m_coeff;
    }
    let (mean_a, mean_m) = (sum_a / trials as f64, sum_m / trials as f64);
    assert!((mean_a - p.alpha).abs() / p.alpha < 0.02, "mean alpha {mean_a}");
    assert!((mean_m - p.m_coeff).abs() / p.m_coeff < 0.02, "mean M {mean_m}");
}
