//! Selector-less DG-FeFET crossbar reads.
//!
//! Column currents follow Kirchhoff summation of `v_in[i] · G[i][j]`, with the
//! back gate scaling each cell by `1 + η·v_bg[j]`. The trilinear readout takes
//! a modulated read and a reference read at `v_bg = 0` and subtracts the two
//! ADC codes, which removes the `V·G0` baseline.

mod mapped;

pub use mapped::{layout_stats, tile_shapes, ArrayConfig, CurrentSample, MappedMatrix, MappedRead, ReadStats};

use serde::{Deserialize, Serialize};

use crate::device::{self, DeviceParams};
use crate::error::{Error, Result};
use crate::quant::{qmax, QuantScheme};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarArray {
    rows: usize,
    cols: usize,
    g0: Vec<f64>,
    eta: f64,
    band: (f64, f64),
    /// Per-cell η_BG(G0) instead of the single band constant.
    cell_eta: Option<Vec<f64>>,
}

impl CrossbarArray {
    pub fn new(rows: usize, cols: usize, g0: Vec<f64>, eta: f64, band: (f64, f64)) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("crossbar needs at least one row and column".into()));
        }
        if g0.len() != rows * cols {
            return Err(Error::shape("CrossbarArray::new", rows * cols, g0.len()));
        }
        let outside = g0.iter().filter(|&&g| g < band.0 || g > band.1).count();
        if outside > 0 {
            log::warn!("{outside} cells outside the operating band [{}, {}] µS", band.0, band.1);
        }
        Ok(Self {
            rows,
            cols,
            g0,
            eta,
            band,
            cell_eta: None,
        })
    }

    /// Switches the array to per-cell sensitivities η_BG(G0[i][j]).
    pub fn with_per_cell_eta(mut self, params: &DeviceParams) -> Result<Self> {
        let etas = self
            .g0
            .iter()
            .map(|&g| device::eta_bg(g, params))
            .collect::<Result<Vec<_>>>()?;
        self.cell_eta = Some(etas);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn band(&self) -> (f64, f64) {
        self.band
    }

    pub fn g0(&self, r: usize, c: usize) -> f64 {
        self.g0[r * self.cols + c]
    }

    pub fn conductances(&self) -> &[f64] {
        &self.g0
    }

    /// Scales the modulation sensitivity the array physically applies.
    pub fn perturb_eta(&mut self, factor: f64) {
        self.eta *= factor;
        if let Some(e) = self.cell_eta.as_mut() {
            e.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn check_input(&self, v_in: &[f64]) -> Result<()> {
        if v_in.len() != self.rows {
            return Err(Error::shape("crossbar row input", self.rows, v_in.len()));
        }
        Ok(())
    }

    /// Pre-ADC column currents (µA) for row voltages and per-column back-gate
    /// voltages (`None` = unmodulated read).
    pub fn column_currents(&self, v_in: &[f64], v_bg: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        match (&self.cell_eta, v_bg) {
            (Some(etas), Some(bg)) => {
                for (i, &v) in v_in.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let base = i * self.cols;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += v * self.g0[base + j] * (1.0 + etas[base + j] * bg[j]);
                    }
                }
            }
            _ => {
                for (i, &v) in v_in.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let row = &self.g0[i * self.cols..(i + 1) * self.cols];
                    for (o, &g) in out.iter_mut().zip(row) {
                        *o += v * g;
                    }
                }
                if let Some(bg) = v_bg {
                    for (o, &b) in out.iter_mut().zip(bg) {
                        *o *= 1.0 + self.eta * b;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peripherals {
    pub adc_bits: u32,
    /// Columns sharing one ADC.
    pub mux_ratio: usize,
    pub dac_bits: u32,
    /// Row read voltage for a logical 1 (V).
    pub v_read: f64,
    /// ADC input current mapped to the largest code (µA).
    pub adc_full_scale: f64,
    /// Back-gate DAC range ±v_max (V).
    pub dac_v_max: f64,
}

impl Peripherals {
    /// Default full scale is the largest column current the array can produce:
    /// every row driven at `v_read` into `band_hi` cells under the strongest
    /// positive back-gate modulation.
    pub fn for_array(rows: usize, scheme: &QuantScheme, mux_ratio: usize, v_read: f64, dac_v_max: f64, band_hi: f64, eta: f64) -> Self {
        Self {
            adc_bits: scheme.adc_bits,
            mux_ratio,
            dac_bits: scheme.dac_bits,
            v_read,
            adc_full_scale: rows as f64 * band_hi * v_read * (1.0 + eta.abs() * dac_v_max),
            dac_v_max,
        }
    }

    /// Current represented by one ADC code step.
    pub fn lsb(&self) -> f64 {
        self.adc_full_scale / qmax(self.adc_bits).max(1) as f64
    }

    pub fn mux_cycles(&self, cols: usize) -> u64 {
        cols.div_ceil(self.mux_ratio.max(1)) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReadResult {
    pub digital_outputs: Vec<i64>,
    pub analog_currents: Vec<f64>,
    pub cycles: u64,
    /// Back-gate voltages clipped to the DAC range during this read.
    pub clip_events: u32,
}

/// Back-gate drive for one read.
#[derive(Debug, Clone, Copy)]
pub enum BackGate<'a> {
    PerColumn(&'a [f64]),
    Broadcast(f64),
}

impl BackGate<'_> {
    fn resolve(&self, cols: usize, v_max: f64) -> Result<(Vec<f64>, u32)> {
        let raw: Vec<f64> = match *self {
            BackGate::PerColumn(v) => {
                if v.len() != cols {
                    return Err(Error::shape("back-gate vector", cols, v.len()));
                }
                v.to_vec()
            }
            BackGate::Broadcast(v) => vec![v; cols],
        };
        let mut clips = 0;
        let clipped = raw
            .into_iter()
            .map(|v| {
                if v.abs() > v_max {
                    clips += 1;
                    v.clamp(-v_max, v_max)
                } else {
                    v
                }
            })
            .collect();
        Ok((clipped, clips))
    }
}

pub fn adc_quantize(current: f64, periph: &Peripherals) -> i64 {
    let m = qmax(periph.adc_bits);
    let code = (current / periph.adc_full_scale * m as f64).round();
    if code >= m as f64 {
        m
    } else if code <= -(m as f64) {
        -m
    } else {
        code as i64
    }
}

/// Uniform mid-rise quantizer with 2^dac_bits levels over [−v_max, v_max].
pub fn dac_quantize(v: f64, dac_bits: u32, v_max: f64) -> f64 {
    let half_levels = 2_f64.powi(dac_bits as i32 - 1);
    let step = 2.0 * v_max / 2_f64.powi(dac_bits as i32);
    let k = (v / step).floor().clamp(-half_levels, half_levels - 1.0);
    (k + 0.5) * step
}

pub fn bilinear_mvm(xbar: &CrossbarArray, v_in: &[f64], periph: &Peripherals) -> Result<ReadResult> {
    xbar.check_input(v_in)?;
    let currents = xbar.column_currents(v_in, None);
    Ok(ReadResult {
        digital_outputs: currents.iter().map(|&i| adc_quantize(i, periph)).collect(),
        analog_currents: currents,
        cycles: periph.mux_cycles(xbar.cols),
        clip_events: 0,
    })
}

/// Modulated read minus reference read (`v_bg = 0`), subtracted after the ADC.
pub fn trilinear_read(xbar: &CrossbarArray, v_in: &[f64], v_bg: BackGate<'_>, periph: &Peripherals) -> Result<ReadResult> {
    xbar.check_input(v_in)?;
    let (bg, clip_events) = v_bg.resolve(xbar.cols, periph.dac_v_max)?;
    let modulated = xbar.column_currents(v_in, Some(&bg));
    let reference = xbar.column_currents(v_in, None);
    let digital_outputs = modulated
        .iter()
        .zip(&reference)
        .map(|(&m, &r)| adc_quantize(m, periph) - adc_quantize(r, periph))
        .collect();
    let analog_currents = modulated.iter().zip(&reference).map(|(m, r)| m - r).collect();
    Ok(ReadResult {
        digital_outputs,
        analog_currents,
        cycles: 2 * periph.mux_cycles(xbar.cols),
        clip_events,
    })
}

/// Output of one step of a replicated-crossbar configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Digitally accumulated outputs, in µA (code sum × LSB).
    pub values: Vec<f64>,
    /// Array-level reads on the critical path (modulated + reference).
    pub reads: u64,
    pub cycles: u64,
    pub clip_events: u32,
}

fn check_same_shape(xbars: &[CrossbarArray]) -> Result<(usize, usize)> {
    let first = xbars
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one crossbar".into()))?;
    let shape = (first.rows, first.cols);
    if let Some(bad) = xbars.iter().find(|x| (x.rows, x.cols) != shape) {
        return Err(Error::shape(
            "replicated crossbars",
            format!("{shape:?}"),
            format!("{:?}", (bad.rows, bad.cols)),
        ));
    }
    Ok(shape)
}

/// Configuration (a): crossbar i stores Bᵀ, takes row `a_rows[i]`, sees the
/// shared column `c_col` on its back gates, and sums all of its column
/// outputs into one element.
pub fn config_a_step(xbars: &[CrossbarArray], a_rows: &[Vec<f64>], c_col: &[f64], periph: &Peripherals) -> Result<StepOutput> {
    let (_, cols) = check_same_shape(xbars)?;
    if a_rows.len() != xbars.len() {
        return Err(Error::shape("config (a) row inputs", xbars.len(), a_rows.len()));
    }
    if c_col.len() != cols {
        return Err(Error::shape("config (a) back-gate column", cols, c_col.len()));
    }
    let mut values = Vec::with_capacity(xbars.len());
    let mut clip_events = 0;
    for (xbar, a) in xbars.iter().zip(a_rows) {
        let read = trilinear_read(xbar, a, BackGate::PerColumn(c_col), periph)?;
        clip_events += read.clip_events;
        let code_sum: i64 = read.digital_outputs.iter().sum();
        values.push(code_sum as f64 * periph.lsb());
    }
    Ok(StepOutput {
        values,
        reads: 2,
        cycles: 2 * periph.mux_cycles(cols),
        clip_events,
    })
}

/// Configuration (b): all crossbars store the same Cᵀ; crossbar i takes row
/// `b_rows[i]` and the scalar `a_scalars[i]` broadcast on every back gate.
/// Corresponding columns are summed across crossbars.
pub fn config_b_step(xbars: &[CrossbarArray], b_rows: &[Vec<f64>], a_scalars: &[f64], periph: &Peripherals) -> Result<StepOutput> {
    let (_, cols) = check_same_shape(xbars)?;
    if xbars.iter().any(|x| x.g0 != xbars[0].g0) {
        return Err(Error::InvalidArgument(
            "configuration (b) needs identical stored weights in every crossbar".into(),
        ));
    }
    if b_rows.len() != xbars.len() {
        return Err(Error::shape("config (b) row inputs", xbars.len(), b_rows.len()));
    }
    if a_scalars.len() != xbars.len() {
        return Err(Error::shape("config (b) back-gate scalars", xbars.len(), a_scalars.len()));
    }
    let mut codes = vec![0_i64; cols];
    let mut clip_events = 0;
    for ((xbar, b), &a) in xbars.iter().zip(b_rows).zip(a_scalars) {
        let read = trilinear_read(xbar, b, BackGate::Broadcast(a), periph)?;
        clip_events += read.clip_events;
        for (acc, c) in codes.iter_mut().zip(&read.digital_outputs) {
            *acc += c;
        }
    }
    Ok(StepOutput {
        values: codes.iter().map(|&c| c as f64 * periph.lsb()).collect(),
        reads: 2,
        cycles: 2 * periph.mux_cycles(cols),
        clip_events,
    })
}

/// Two's-complement bit `b` of `q`. A 1-bit input is an unsigned {0, 1} plane.
pub(crate) fn input_bit(q: i64, b: u32, _bits: u32) -> bool {
    ((q >> b) & 1) == 1
}

pub(crate) fn bit_weight(b: u32, bits: u32) -> i64 {
    if bits > 1 && b == bits - 1 {
        -(1_i64 << b)
    } else {
        1_i64 << b
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BitSerialResult {
    /// Shift-added ADC codes, one per column.
    pub values: Vec<i64>,
    pub cycles: u64,
    pub clip_events: u32,
}

fn bit_serial(xbar: &CrossbarArray, q_in: &[i64], bits: u32, v_bg: Option<BackGate<'_>>, periph: &Peripherals) -> Result<BitSerialResult> {
    if q_in.len() != xbar.rows {
        return Err(Error::shape("bit-serial input", xbar.rows, q_in.len()));
    }
    let mut values = vec![0_i64; xbar.cols];
    let mut cycles = 0;
    let clip_events = match v_bg {
        Some(bg) => bg.resolve(xbar.cols, periph.dac_v_max)?.1,
        None => 0,
    };
    let mut v_step = vec![0.0; xbar.rows];
    for b in 0..bits {
        let mut any = false;
        for (v, &q) in v_step.iter_mut().zip(q_in) {
            let on = input_bit(q, b, bits);
            any |= on;
            *v = if on { periph.v_read } else { 0.0 };
        }
        let per_read = periph.mux_cycles(xbar.cols);
        let read = match v_bg {
            None => {
                cycles += per_read;
                if !any {
                    continue;
                }
                bilinear_mvm(xbar, &v_step, periph)?
            }
            Some(bg) => {
                cycles += 2 * per_read;
                if !any {
                    continue;
                }
                trilinear_read(xbar, &v_step, bg, periph)?
            }
        };
        let w = bit_weight(b, bits);
        for (acc, c) in values.iter_mut().zip(&read.digital_outputs) {
            *acc += w * c;
        }
    }
    Ok(BitSerialResult {
        values,
        cycles,
        clip_events,
    })
}

/// Bit-serial unmodulated MVM: input bit planes are applied LSB first and the
/// per-step ADC codes shift-added.
pub fn bit_serial_mvm(xbar: &CrossbarArray, q_in: &crate::quant::QuantTensor, periph: &Peripherals, scheme: &QuantScheme) -> Result<BitSerialResult> {
    if q_in.bits != scheme.input_bits {
        return Err(Error::InvalidArgument(format!(
            "input has {} bits, scheme expects {}",
            q_in.bits, scheme.input_bits
        )));
    }
    bit_serial(xbar, &q_in.data, q_in.bits, None, periph)
}

/// Bit-serial trilinear read (modulated minus reference per step).
pub fn bit_serial_trilinear(xbar: &CrossbarArray, q_in: &[i64], bits: u32, v_bg: BackGate<'_>, periph: &Peripherals) -> Result<BitSerialResult> {
    bit_serial(xbar, q_in, bits, Some(v_bg), periph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periph(bits: u32, fs: f64) -> Peripherals {
        Peripherals {
            adc_bits: bits,
            mux_ratio: 8,
            dac_bits: 8,
            v_read: 1.0,
            adc_full_scale: fs,
            dac_v_max: 1.0,
        }
    }

    fn xbar(rows: usize, cols: usize, g: &[f64], eta: f64) -> CrossbarArray {
        CrossbarArray::new(rows, cols, g.to_vec(), eta, (0.0, 1e9)).unwrap()
    }

    #[test]
    fn bilinear_column_sums() {
        let x = xbar(1, 1, &[1.0], 0.157);
        let r = bilinear_mvm(&x, &[1.0], &periph(30, 10.0)).unwrap();
        assert_eq!(r.analog_currents, vec![1.0]);

        let x = xbar(2, 2, &[1.0, 2.0, 3.0, 4.0], 0.157);
        let r = bilinear_mvm(&x, &[1.0, 1.0], &periph(30, 10.0)).unwrap();
        assert_eq!(r.analog_currents, vec![4.0, 6.0]);
        assert_eq!(r.cycles, 1);

        let r = bilinear_mvm(&x, &[0.0, 0.0], &periph(8, 10.0)).unwrap();
        assert_eq!(r.analog_currents, vec![0.0, 0.0]);
        assert_eq!(r.digital_outputs, vec![0, 0]);
        assert!(bilinear_mvm(&x, &[1.0], &periph(8, 10.0)).is_err());
    }

    #[test]
    fn trilinear_difference_current() {
        let x = xbar(1, 1, &[50.0], 0.157);
        let r = trilinear_read(&x, &[1.0], BackGate::Broadcast(1.0), &periph(30, 100.0)).unwrap();
        assert!((r.analog_currents[0] - 7.85).abs() < 1e-12);
        assert_eq!(r.cycles, 2);
        let zero = trilinear_read(&x, &[0.7], BackGate::Broadcast(0.0), &periph(8, 100.0)).unwrap();
        assert_eq!(zero.digital_outputs, vec![0]);
        assert_eq!(zero.analog_currents, vec![0.0]);
    }

    #[test]
    fn trilinear_clips_back_gate() {
        let x = xbar(1, 2, &[50.0, 50.0], 0.157);
        let r = trilinear_read(&x, &[1.0], BackGate::PerColumn(&[2.0, 0.5]), &periph(30, 100.0)).unwrap();
        assert_eq!(r.clip_events, 1);
        assert!((r.analog_currents[0] - 7.85).abs() < 1e-12);
        assert!(trilinear_read(&x, &[1.0], BackGate::PerColumn(&[0.1]), &periph(8, 1.0)).is_err());
    }

    #[test]
    fn adc_examples() {
        let p = periph(8, 2.0);
        assert_eq!(adc_quantize(0.0, &p), 0);
        assert_eq!(adc_quantize(2.0, &p), 127);
        assert_eq!(adc_quantize(5.0, &p), 127);
        assert_eq!(adc_quantize(-5.0, &p), -127);
        assert_eq!(adc_quantize(1.0, &p), 64);
        assert_eq!(adc_quantize(-1.0, &p), -64);
    }

    #[test]
    fn dac_examples() {
        assert_eq!(dac_quantize(0.3, 1, 1.0), 0.5);
        assert_eq!(dac_quantize(-0.3, 1, 1.0), -0.5);
        assert_eq!(dac_quantize(0.0, 1, 1.0), 0.5);
        assert_eq!(dac_quantize(2.0, 3, 1.0), 0.875);
        assert_eq!(dac_quantize(-2.0, 3, 1.0), -0.875);
        let step = 2.0 / 256.0;
        assert!(dac_quantize(0.0, 8, 1.0).abs() <= step / 2.0 + 1e-15);
    }

    #[test]
    fn config_b_rejects_distinct_weights() {
        let a = xbar(1, 1, &[1.0], 0.2);
        let b = xbar(1, 1, &[2.0], 0.2);
        let r = config_b_step(&[a, b], &[vec![1.0], vec![1.0]], &[1.0, 1.0], &periph(20, 10.0));
        assert!(r.is_err());
    }

    #[test]
    fn config_a_rejects_mixed_shapes() {
        let a = xbar(1, 1, &[1.0], 0.2);
        let b = xbar(1, 2, &[1.0, 1.0], 0.2);
        assert!(config_a_step(&[a, b], &[vec![1.0], vec![1.0]], &[1.0], &periph(20, 10.0)).is_err());
    }

    #[test]
    fn bit_weights_twos_complement() {
        for q in -127_i64..=127 {
            let v: i64 = (0..8).map(|b| if input_bit(q, b, 8) { bit_weight(b, 8) } else { 0 }).sum();
            assert_eq!(v, q);
        }
    }
}
