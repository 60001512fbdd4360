use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilinear_cim::attention::{
    run_bilinear_mode, run_digital_mode, run_encoder_block, run_mode, run_reference_attention, run_trilinear_mode, AttentionJob, DacPolicy,
    ExecMode, HwConfig, ModelWeights,
};
use trilinear_cim::cost::write_volume;
use trilinear_cim::oracle::{naive_attention, naive_encoder_block, naive_mhsa, rel_inf_error, HeadWeights};
use trilinear_cim::trace::{plan, StageKind};
use trilinear_cim::{Error, Matrix};

const MODES: [ExecMode; 4] = [ExecMode::Float, ExecMode::QuantizedDigital, ExecMode::CimBilinear, ExecMode::CimTrilinear];

fn job(n: usize, dk: usize, h: usize, l: usize, mode: ExecMode, seed: u64) -> (AttentionJob, ModelWeights) {
    let job = AttentionJob::new(n, dk, h, l, mode, seed);
    let w = ModelWeights::generate(&job);
    (job, w)
}

fn volume(n: usize, dk: usize, h: usize, l: usize, hw: &HwConfig) -> u64 {
    write_volume(n as u64, dk as u64, h as u64, l as u64, hw.scheme.input_bits, hw.scheme.bits_per_cell)
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root(source),
        other => other,
    }
}

#[test]
fn planner_matches_functional_trace() {
    let hw = HwConfig::default();
    for mode in MODES {
        for (n, dk, h, l) in [(4, 4, 1, 1), (8, 8, 2, 1), (5, 6, 3, 2)] {
            let (j, w) = job(n, dk, h, l, mode, 7);
            let out = run_mode(&j, &w, &hw).unwrap();
            assert_eq!(out.trace, plan(&j, &hw, mode, false), "{mode:?} ({n}, {dk}, {h}, {l})");
            let enc = run_encoder_block(&j, &w, &hw).unwrap();
            assert_eq!(enc.trace, plan(&j, &hw, mode, true), "encoder {mode:?} ({n}, {dk}, {h}, {l})");
        }
    }
}

#[test]
fn float_encoder_matches_oracle() {
    let (j, w) = job(6, 4, 2, 1, ExecMode::Float, 3);
    let got = run_encoder_block(&j, &w, &HwConfig::default()).unwrap().output;
    let layer = &w.layers[0];
    let heads: Vec<HeadWeights> = layer
        .heads
        .iter()
        .map(|h| HeadWeights { w_q: &h.w_q, w_k: &h.w_k, w_v: &h.w_v })
        .collect();
    let want = naive_encoder_block(
        &j.input(),
        &heads,
        &layer.w_o,
        &layer.w1,
        &layer.w2,
        (&layer.ln1_gamma, &layer.ln1_beta),
        (&layer.ln2_gamma, &layer.ln2_beta),
        2f64.powi(-16),
    )
    .unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-5, "{}", got.max_abs_diff(&want));
}

#[test]
fn two_layers_compose() {
    let hw = HwConfig::default();
    for mode in MODES {
        let (j2, w2) = job(6, 4, 2, 2, mode, 11);
        let both = run_mode(&j2, &w2, &hw).unwrap().output;

        let mut j1 = AttentionJob { n_layers: 1, ..j2.clone() };
        let first = run_mode(&j1, &ModelWeights { layers: vec![w2.layers[0].clone()] }, &hw).unwrap().output;
        j1.x_input = Some(first);
        let second = run_mode(&j1, &ModelWeights { layers: vec![w2.layers[1].clone()] }, &hw).unwrap().output;
        assert_eq!(both, second, "{mode:?}");
    }
}

#[test]
fn head_permutation_permutes_output_blocks() {
    // Swapping heads permutes the concat columns; permuting W_O rows the same way restores the output.
    let hw = HwConfig::ideal();
    let (j, w) = job(5, 3, 3, 1, ExecMode::CimTrilinear, 2);
    let base = run_mode(&j, &w, &hw).unwrap().output;

    let perm = [2usize, 0, 1];
    let dk = j.d_k;
    let mut pw = w.clone();
    let layer = &w.layers[0];
    pw.layers[0].heads = perm.iter().map(|&p| layer.heads[p].clone()).collect();
    let d = j.d_model;
    pw.layers[0].w_o = Matrix::from_fn(d, d, |r, c| {
        let (blk, off) = (r / dk, r % dk);
        layer.w_o[(perm[blk] * dk + off, c)]
    });
    let got = run_mode(&j, &pw, &hw).unwrap().output;
    assert!(rel_inf_error(&got, &base) <= 1e-6, "{}", rel_inf_error(&got, &base));
}

#[test]
fn digital_error_not_above_trilinear() {
    let hw = HwConfig::default();
    for seed in 0..4 {
        let (j, w) = job(8, 8, 2, 1, ExecMode::CimTrilinear, seed);
        let reference = run_reference_attention(&j, &w).unwrap();
        let dig = rel_inf_error(&run_digital_mode(&j, &w, &hw).unwrap().output, &reference);
        let tri = rel_inf_error(&run_trilinear_mode(&j, &w, &hw).unwrap().output, &reference);
        assert!(dig <= tri, "seed {seed}: digital {dig} trilinear {tri}");
    }
}

#[test]
fn write_logs() {
    let hw = HwConfig::default();
    for (n, dk, h, l) in [(4, 4, 1, 1), (8, 8, 2, 2), (6, 5, 3, 1)] {
        let (j, w) = job(n, dk, h, l, ExecMode::CimBilinear, 1);
        let bil = run_bilinear_mode(&j, &w, &hw).unwrap();
        let want = volume(n, dk, h, l, &hw);
        assert_eq!(bil.write_log.total(), want);
        assert!(bil.write_log.events.iter().all(|e| matches!(e.stage, StageKind::KProgram | StageKind::VProgram)));
        assert_eq!(bil.write_log.events.len(), 2 * h * l);

        let tri = run_trilinear_mode(&j, &w, &hw).unwrap();
        assert_eq!(tri.write_log.total(), 0);
        assert!(tri.write_log.events.is_empty());
    }
}

#[test]
fn strict_dac_policy_rejects_out_of_range_scaling() {
    // 1/√8 over η̄ needs ≈ 2.25 V on a ±1 V DAC.
    let hw = HwConfig { dac_policy: DacPolicy::Strict, ..HwConfig::default() };
    let (j, w) = job(4, 8, 1, 1, ExecMode::CimTrilinear, 0);
    let err = run_trilinear_mode(&j, &w, &hw).unwrap_err();
    match root(&err) {
        Error::DacRange { required, v_max } => assert!(required > v_max),
        other => panic!("expected DacRange, got {other}"),
    }
    let ok = run_trilinear_mode(&j, &w, &HwConfig::default()).unwrap();
    assert!(ok.diagnostics.clip_events > 0);
}

#[test]
fn digital_mode_is_deterministic_and_shares_operands() {
    let hw = HwConfig::default();
    let (j, w) = job(6, 4, 2, 1, ExecMode::QuantizedDigital, 9);
    let a = run_digital_mode(&j, &w, &hw).unwrap();
    let b = run_digital_mode(&j, &w, &hw).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.diagnostics, b.diagnostics);

    let shared = |ops: &[(String, u64)]| {
        let mut v: Vec<(String, u64)> = ops.iter().filter(|(n, _)| ["x", "w_q", "w_k", "w_v"].contains(&n.as_str())).cloned().collect();
        v.sort();
        v
    };
    let digital = shared(&a.diagnostics.operands);
    assert!(!digital.is_empty());
    for cim in [run_bilinear_mode(&j, &w, &hw).unwrap(), run_trilinear_mode(&j, &w, &hw).unwrap()] {
        assert_eq!(shared(&cim.diagnostics.operands), digital);
    }
}

#[test]
fn ideal_trilinear_matches_mhsa() {
    let hw = HwConfig::ideal();
    let (j, w) = job(6, 4, 2, 1, ExecMode::CimTrilinear, 5);
    let got = run_trilinear_mode(&j, &w, &hw).unwrap().output;
    let layer = &w.layers[0];
    let heads: Vec<HeadWeights> = layer
        .heads
        .iter()
        .map(|h| HeadWeights { w_q: &h.w_q, w_k: &h.w_k, w_v: &h.w_v })
        .collect();
    let want = naive_mhsa(&j.input(), &heads, &layer.w_o).unwrap();
    assert!(rel_inf_error(&got, &want) <= 1e-6);
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn reference_attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for case in 0..200 {
        let n = rng.random_range(1..=12);
        let dk = rng.random_range(1..=8);
        let j = AttentionJob::new(n, dk, 1, 1, ExecMode::Float, case);
        let mut w = ModelWeights::generate(&j);
        let d = j.d_model;
        let layer = &mut w.layers[0];
        let head = &mut layer.heads[0];
        head.w_q = uniform(&mut rng, dk, d);
        head.w_k = uniform(&mut rng, dk, d);
        head.w_v = uniform(&mut rng, dk, d);
        layer.w_o = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        let x = uniform(&mut rng, n, d);
        let j = AttentionJob { x_input: Some(x.clone()), ..j };

        let got = run_reference_attention(&j, &w).unwrap();
        let h = &w.layers[0].heads[0];
        let want = naive_attention(&x, &h.w_q, &h.w_k, &h.w_v).unwrap();
        assert!(rel_inf_error(&got, &want) <= 1e-6, "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn planned_write_volume_is_separable(n in 1usize..64, dk in 1usize..32, h in 1usize..6, l in 1usize..4) {
        let hw = HwConfig::default();
        let j = AttentionJob::new(n, dk, h, l, ExecMode::CimBilinear, 0);
        let trace = plan(&j, &hw, ExecMode::CimBilinear, false);
        prop_assert_eq!(trace.total_writes(), volume(n, dk, h, l, &hw));
        prop_assert_eq!(plan(&j, &hw, ExecMode::CimTrilinear, false).total_writes(), 0);
    }
}
