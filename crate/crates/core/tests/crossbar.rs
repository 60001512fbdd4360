use proptest::prelude::*;
use trilinear_cim::crossbar::{
    adc_quantize, bilinear_mvm, bit_serial_mvm, config_a_step, config_b_step, trilinear_read, BackGate, CrossbarArray, Peripherals,
};
use trilinear_cim::oracle::triple_product;
use trilinear_cim::quant::{QuantScheme, QuantTensor};
use trilinear_cim::Matrix;

const ETA: f64 = 0.157;
const BAND: (f64, f64) = (29.0, 69.0);
const V_READ: f64 = 0.2;

// Analog inputs here are unquantized, so only the converters need to be wide.
// 48 bits keep the ADC floor below 1e-6 even for back-gate values near zero.
fn ideal_periph(rows: usize) -> Peripherals {
    let scheme = QuantScheme { adc_bits: 48, dac_bits: 48, ..QuantScheme::ideal() };
    Peripherals::for_array(rows, &scheme, 8, V_READ, 1.0, BAND.1, ETA)
}

fn frob_rel(got: &Matrix, want: &Matrix) -> f64 {
    let (r, c) = want.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r {
        for j in 0..c {
            num += (got[(i, j)] - want[(i, j)]).powi(2);
            den += want[(i, j)].powi(2);
        }
    }
    (num / den.max(1e-300)).sqrt()
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_rows(&v.chunks(cols).map(<[f64]>::to_vec).collect::<Vec<_>>()))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1..=8usize, 1..=8usize, 1..=8usize, 1..=8usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1024))]

    /// A (n×k) on rows, Bᵀ (k×m) stored, C (m×p) on back gates.
    #[test]
    fn config_a_matches_triple_product(
        (a, bt, c) in dims().prop_flat_map(|(n, k, m, p)| (
            matrix(n, k, -V_READ, V_READ),
            matrix(k, m, BAND.0, BAND.1),
            matrix(m, p, -1.0, 1.0),
        ))
    ) {
        let (n, k) = a.shape();
        let (_, m) = bt.shape();
        let p = c.shape().1;
        let g: Vec<f64> = (0..k).flat_map(|i| bt.row(i).to_vec()).collect();
        let xbars: Vec<CrossbarArray> = (0..n).map(|_| CrossbarArray::new(k, m, g.clone(), ETA, BAND).unwrap()).collect();
        let periph = ideal_periph(k);
        let a_rows: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        let mut got = Matrix::zeros(n, p);
        for t in 0..p {
            let col: Vec<f64> = (0..m).map(|j| c[(j, t)]).collect();
            let step = config_a_step(&xbars, &a_rows, &col, &periph).unwrap();
            prop_assert_eq!(step.reads, 2);
            prop_assert_eq!(step.cycles, 2 * m.div_ceil(8) as u64);
            for i in 0..n {
                got[(i, t)] = step.values[i] / ETA;
            }
        }
        let want = triple_product(&a, &bt, &c).unwrap();
        let err = frob_rel(&got, &want);
        prop_assert!(err <= 1e-6, "rel Frobenius error {err:e}");
    }

    /// A (n×q) broadcast on back gates, B (q×k) on rows, Cᵀ (k×m) stored.
    #[test]
    fn config_b_matches_triple_product(
        (a, b, ct) in dims().prop_flat_map(|(n, q, k, m)| (
            matrix(n, q, -1.0, 1.0),
            matrix(q, k, -V_READ, V_READ),
            matrix(k, m, BAND.0, BAND.1),
        ))
    ) {
        let (n, q) = a.shape();
        let (k, m) = ct.shape();
        let g: Vec<f64> = (0..k).flat_map(|i| ct.row(i).to_vec()).collect();
        let xbars: Vec<CrossbarArray> = (0..q).map(|_| CrossbarArray::new(k, m, g.clone(), ETA, BAND).unwrap()).collect();
        let periph = ideal_periph(k);
        let b_rows: Vec<Vec<f64>> = (0..q).map(|i| b.row(i).to_vec()).collect();
        let mut got = Matrix::zeros(n, m);
        for r in 0..n {
            let step = config_b_step(&xbars, &b_rows, a.row(r), &periph).unwrap();
            for j in 0..m {
                got[(r, j)] = step.values[j] / ETA;
            }
        }
        let want = triple_product(&a, &b, &ct).unwrap();
        let err = frob_rel(&got, &want);
        prop_assert!(err <= 1e-6, "rel Frobenius error {err:e}");
    }

    #[test]
    fn kirchhoff_additivity(
        (g, v1, v2, rows, cols) in (1..=16usize, 1..=16usize).prop_flat_map(|(r, c)| (
            prop::collection::vec(BAND.0..BAND.1, r * c),
            prop::collection::vec(-1.0..1.0f64, r),
            prop::collection::vec(-1.0..1.0f64, r),
            Just(r),
            Just(c),
        ))
    ) {
        let x = CrossbarArray::new(rows, cols, g, ETA, BAND).unwrap();
        let p = ideal_periph(rows);
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let i1 = bilinear_mvm(&x, &v1, &p).unwrap().analog_currents;
        let i2 = bilinear_mvm(&x, &v2, &p).unwrap().analog_currents;
        let i12 = bilinear_mvm(&x, &sum, &p).unwrap().analog_currents;
        for j in 0..cols {
            let scale = i12[j].abs().max(1.0);
            prop_assert!((i12[j] - i1[j] - i2[j]).abs() <= 1e-12 * scale * rows as f64);
        }
    }

    #[test]
    fn adc_is_monotone_and_odd(a in -500.0..500.0f64, b in -500.0..500.0f64, bits in 2u32..=16, fs in 1.0..400.0f64) {
        let p = Peripherals { adc_bits: bits, mux_ratio: 8, dac_bits: 8, v_read: V_READ, adc_full_scale: fs, dac_v_max: 1.0 };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(adc_quantize(lo, &p) <= adc_quantize(hi, &p));
        prop_assert_eq!(adc_quantize(-a, &p), -adc_quantize(a, &p));
    }

    #[test]
    fn trilinear_difference_is_linear_in_back_gate(
        g in prop::collection::vec(BAND.0..BAND.1, 4),
        v in prop::collection::vec(0.0..V_READ, 2),
        bg in prop::collection::vec(-0.5..0.5f64, 2),
    ) {
        let x = CrossbarArray::new(2, 2, g, ETA, BAND).unwrap();
        let p = ideal_periph(2);
        let bg2: Vec<f64> = bg.iter().map(|v| 2.0 * v).collect();
        let one = trilinear_read(&x, &v, BackGate::PerColumn(&bg), &p).unwrap().analog_currents;
        let two = trilinear_read(&x, &v, BackGate::PerColumn(&bg2), &p).unwrap().analog_currents;
        for j in 0..2 {
            prop_assert!((two[j] - 2.0 * one[j]).abs() <= 1e-12 * two[j].abs().max(1.0));
        }
    }
}

#[test]
fn config_a_degenerates_to_trilinear_read() {
    let x = CrossbarArray::new(1, 1, vec![50.0], ETA, BAND).unwrap();
    let p = ideal_periph(1);
    let step = config_a_step(std::slice::from_ref(&x), &[vec![0.1]], &[0.5], &p).unwrap();
    let read = trilinear_read(&x, &[0.1], BackGate::Broadcast(0.5), &p).unwrap();
    assert_eq!(step.values[0], read.digital_outputs[0] as f64 * p.lsb());
}

#[test]
fn config_a_one_hot_selects_columns() {
    // A·Bᵀ with C = I picks out columns of A·Bᵀ.
    let bt = [[30.0, 40.0], [50.0, 60.0], [35.0, 45.0]];
    let a = [[0.1, 0.2, 0.05], [0.2, 0.0, 0.1]];
    let g: Vec<f64> = bt.iter().flatten().copied().collect();
    let xbars: Vec<_> = (0..2).map(|_| CrossbarArray::new(3, 2, g.clone(), ETA, BAND).unwrap()).collect();
    let p = ideal_periph(3);
    let rows: Vec<Vec<f64>> = a.iter().map(|r| r.to_vec()).collect();
    for t in 0..2 {
        let mut c = vec![0.0; 2];
        c[t] = 1.0;
        let step = config_a_step(&xbars, &rows, &c, &p).unwrap();
        for (got, ai) in step.values.iter().zip(&a) {
            let want: f64 = (0..3).map(|k| ai[k] * bt[k][t]).sum();
            assert!((got / ETA - want).abs() < 1e-6 * want);
        }
    }
}

#[test]
fn config_b_single_and_zero() {
    let g = vec![30.0, 40.0, 50.0, 60.0];
    let x = CrossbarArray::new(2, 2, g.clone(), ETA, BAND).unwrap();
    let p = ideal_periph(2);
    let one = config_b_step(std::slice::from_ref(&x), &[vec![0.1, 0.2]], &[1.0], &p).unwrap();
    let plain = [0.1 * 30.0 + 0.2 * 50.0, 0.1 * 40.0 + 0.2 * 60.0];
    for (got, want) in one.values.iter().zip(plain) {
        assert!((got - ETA * want).abs() < 1e-6 * want);
    }
    let xs = vec![x.clone(), x];
    let zero = config_b_step(&xs, &[vec![0.1, 0.2], vec![0.2, 0.1]], &[0.0, 0.0], &p).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

fn qvec(data: Vec<i64>, bits: u32) -> QuantTensor {
    QuantTensor { rows: 1, cols: data.len(), data, scale: 1.0, bits }
}

#[test]
fn bit_serial_examples() {
    let g: Vec<f64> = (0..16).map(|i| BAND.0 + 2.5 * i as f64).collect();
    let x = CrossbarArray::new(4, 4, g.clone(), ETA, BAND).unwrap();

    // 1-bit input is one bilinear read.
    let scheme1 = QuantScheme { input_bits: 1, ..QuantScheme::ideal() };
    let p = Peripherals::for_array(4, &scheme1, 8, V_READ, 1.0, BAND.1, ETA);
    let q = qvec(vec![1, 0, 1, 1], 1);
    let bs = bit_serial_mvm(&x, &q, &p, &scheme1).unwrap();
    let v: Vec<f64> = q.data.iter().map(|&b| b as f64 * V_READ).collect();
    assert_eq!(bs.values, bilinear_mvm(&x, &v, &p).unwrap().digital_outputs);
    assert_eq!(bs.cycles, 1);

    // Random int8 inputs against the integer product; all ones give column sums.
    let scheme8 = QuantScheme { input_bits: 8, ..QuantScheme::ideal() };
    let p = Peripherals::for_array(4, &scheme8, 8, V_READ, 1.0, BAND.1, ETA);
    for data in [vec![-128, 37, 127, -5], vec![1, 1, 1, 1], vec![0, 0, 0, 0]] {
        let q = qvec(data.clone(), 8);
        let bs = bit_serial_mvm(&x, &q, &p, &scheme8).unwrap();
        assert_eq!(bs.cycles, 8);
        for j in 0..4 {
            let want: f64 = (0..4).map(|i| data[i] as f64 * g[i * 4 + j]).sum();
            let got = bs.values[j] as f64 * p.lsb() / V_READ;
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "col {j}: {got} vs {want}");
        }
    }
    assert!(bit_serial_mvm(&x, &qvec(vec![1, 1, 1, 1], 4), &p, &scheme8).is_err());
}
