//! A quantized matrix laid out on fixed-size subarrays.
//!
//! Each weight becomes `planes` cells in adjacent physical columns (LSB plane
//! first) of a positive and a negative array. Unused sign cells sit at the band
//! floor so the floor cancels in the positive/negative difference. Partial sums
//! over row tiles are added digitally.

use serde::{Deserialize, Serialize};

use super::{adc_quantize, bit_weight, input_bit, BackGate, CrossbarArray, Peripherals};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::quant::{conductance_step, decompose_cells, map_to_conductance, QuantScheme, QuantTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub mux_ratio: usize,
    pub v_read: f64,
    pub dac_v_max: f64,
    /// Overrides the derived ADC full scale (µA).
    pub adc_full_scale: Option<f64>,
    pub per_cell_eta: bool,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            mux_ratio: 8,
            v_read: 0.2,
            dac_v_max: 1.0,
            adc_full_scale: None,
            per_cell_eta: false,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.mux_ratio == 0 {
            return Err(Error::InvalidArgument(
                "subarray rows, cols and mux ratio must be positive".into(),
            ));
        }
        if !(self.v_read > 0.0) || !(self.dac_v_max > 0.0) {
            return Err(Error::InvalidArgument("v_read and dac_v_max must be positive".into()));
        }
        if matches!(self.adc_full_scale, Some(fs) if !(fs > 0.0)) {
            return Err(Error::InvalidArgument("adc_full_scale must be positive".into()));
        }
        Ok(())
    }

    /// Peripherals for a subarray with `rows` occupied rows.
    pub fn peripherals(&self, rows: usize, scheme: &QuantScheme, device: &DeviceParams) -> Peripherals {
        let mut p = Peripherals::for_array(
            rows,
            scheme,
            self.mux_ratio,
            self.v_read,
            self.dac_v_max,
            device.band_hi,
            device.effective_eta(),
        );
        if let Some(fs) = self.adc_full_scale {
            p.adc_full_scale = fs;
        }
        p
    }
}

/// Activity of one mapped read, summed over subarrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReadStats {
    /// Mux cycles summed over all subarrays.
    pub cycles: u64,
    /// Mux cycles with subarrays operating in parallel.
    pub critical_cycles: u64,
    pub cell_reads: u64,
    pub adc_conversions: u64,
    pub clip_events: u64,
}

impl ReadStats {
    pub fn merge(&mut self, other: &ReadStats) {
        self.cycles += other.cycles;
        self.critical_cycles += other.critical_cycles;
        self.cell_reads += other.cell_reads;
        self.adc_conversions += other.adc_conversions;
        self.clip_events += other.clip_events;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedRead {
    /// Recombined output per logical column, in µA.
    pub values: Vec<f64>,
    pub stats: ReadStats,
}

/// Subarray shapes (rows, physical columns) for one sign of a
/// `rows × cols` matrix with `planes` cells per weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurrentSample {
    pub tile: usize,
    pub sign: i8,
    pub bit: u32,
    pub phys_col: usize,
    /// µA.
    pub current: f64,
    pub code: i64,
    pub full_scale: f64,
}

pub fn tile_shapes(rows: usize, cols: usize, planes: usize, cfg: &ArrayConfig) -> Vec<(usize, usize)> {
    let pcols = cols * planes;
    let mut out = Vec::new();
    for row0 in (0..rows).step_by(cfg.rows) {
        for pcol0 in (0..pcols).step_by(cfg.cols) {
            out.push((cfg.rows.min(rows - row0), cfg.cols.min(pcols - pcol0)));
        }
    }
    out
}

/// Cost of one bit-serial read of a mapped matrix; both signs read in parallel.
pub fn layout_stats(rows: usize, cols: usize, planes: usize, cfg: &ArrayConfig, bits: u32, trilinear: bool) -> ReadStats {
    let reads = u64::from(bits) * if trilinear { 2 } else { 1 };
    let mux = |nc: usize| nc.div_ceil(cfg.mux_ratio) as u64;
    let mut s = ReadStats::default();
    for (nr, nc) in tile_shapes(rows, cols, planes, cfg) {
        let tile_cycles = reads * mux(nc);
        s.cycles += 2 * tile_cycles;
        s.critical_cycles = s.critical_cycles.max(tile_cycles);
        s.cell_reads += 2 * reads * (nr * nc) as u64;
        s.adc_conversions += 2 * reads * nc as u64;
    }
    s
}

#[derive(Debug, Clone)]
struct Tile {
    sign: f64,
    row0: usize,
    pcol0: usize,
    xbar: CrossbarArray,
    periph: Peripherals,
}

#[derive(Debug, Clone)]
pub struct MappedMatrix {
    rows: usize,
    cols: usize,
    planes: usize,
    bits_per_cell: u32,
    weight_scale: f64,
    step: f64,
    tiles: Vec<Tile>,
    periph: Peripherals,
    cfg: ArrayConfig,
}

impl MappedMatrix {
    /// Programs `w` (input dimension × output dimension) onto subarrays.
    /// `eta_factor` scales the sensitivity the arrays physically apply and is
    /// 1.0 outside fault-injection tests.
    pub fn program(w: &QuantTensor, scheme: &QuantScheme, device: &DeviceParams, cfg: &ArrayConfig, eta_factor: f64) -> Result<Self> {
        cfg.validate()?;
        if w.bits != scheme.weight_bits {
            return Err(Error::InvalidArgument(format!(
                "weights have {} bits, scheme expects {}",
                w.bits, scheme.weight_bits
            )));
        }
        let bpc = scheme.bits_per_cell;
        let cells = decompose_cells(w, bpc)?;
        let planes = cells.planes.len();
        let pcols = w.cols * planes;
        let (lo, hi) = (device.band_lo, device.band_hi);
        let eta = device.effective_eta() * eta_factor;
        let mut tiles = Vec::new();
        for sign in [1_i8, -1] {
            for row0 in (0..w.rows).step_by(cfg.rows) {
                let nr = cfg.rows.min(w.rows - row0);
                for pcol0 in (0..pcols).step_by(cfg.cols) {
                    let nc = cfg.cols.min(pcols - pcol0);
                    let mut g = Vec::with_capacity(nr * nc);
                    for r in row0..row0 + nr {
                        for pc in pcol0..pcol0 + nc {
                            let (c, p) = (pc / planes, pc % planes);
                            let k = r * w.cols + c;
                            let digit = if cells.sign_plane[k] == sign { cells.planes[p][k] } else { 0 };
                            g.push(map_to_conductance(digit, bpc, lo, hi));
                        }
                    }
                    let mut xbar = CrossbarArray::new(nr, nc, g, eta, (lo, hi))?;
                    if cfg.per_cell_eta {
                        xbar = xbar.with_per_cell_eta(device)?;
                        xbar.perturb_eta(eta_factor);
                    }
                    tiles.push(Tile {
                        sign: f64::from(sign),
                        row0,
                        pcol0,
                        xbar,
                        periph: cfg.peripherals(nr, scheme, device),
                    });
                }
            }
        }
        Ok(Self {
            rows: w.rows,
            cols: w.cols,
            planes,
            bits_per_cell: bpc,
            weight_scale: w.scale,
            step: conductance_step(bpc, lo, hi),
            tiles,
            periph: cfg.peripherals(cfg.rows, scheme, device),
            cfg: *cfg,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn weight_scale(&self) -> f64 {
        self.weight_scale
    }

    /// Conductance per unit of a cell digit (µS).
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Peripherals of a full-height subarray; partial tiles scale the ADC
    /// full scale to their row count.
    pub fn peripherals(&self) -> &Peripherals {
        &self.periph
    }

    pub fn n_subarrays(&self) -> usize {
        self.tiles.len()
    }

    /// Non-volatile cells written when this matrix is programmed.
    pub fn cells_programmed(&self) -> u64 {
        (self.rows * self.cols * self.planes * 2) as u64
    }

    /// Converts a recombined read value back to units of Σ q_in·q_w.
    pub fn unit_current(&self) -> f64 {
        self.periph.v_read * self.step
    }

    pub fn bilinear(&self, q_in: &[i64], bits: u32) -> Result<MappedRead> {
        Ok(self.read(q_in, bits, None)?.pop().expect("one read"))
    }

    /// Trilinear reads of one input row under several back-gate settings; the
    /// unmodulated column currents are shared between them.
    pub fn trilinear_sweep(&self, q_in: &[i64], bits: u32, bgs: &[BackGate<'_>]) -> Result<Vec<MappedRead>> {
        self.read(q_in, bits, Some(bgs))
    }

    /// Pre-ADC column currents of an unmodulated read, one record per tile,
    /// input bit and physical column.
    pub fn probe_currents(&self, q_in: &[i64], bits: u32) -> Result<Vec<CurrentSample>> {
        if q_in.len() != self.rows {
            return Err(Error::shape("mapped matrix input", self.rows, q_in.len()));
        }
        let mut out = Vec::new();
        for (t, tile) in self.tiles.iter().enumerate() {
            let q = &q_in[tile.row0..tile.row0 + tile.xbar.rows()];
            for b in 0..bits {
                let v: Vec<f64> = q
                    .iter()
                    .map(|&qi| if input_bit(qi, b, bits) { self.periph.v_read } else { 0.0 })
                    .collect();
                for (j, i) in tile.xbar.column_currents(&v, None).into_iter().enumerate() {
                    out.push(CurrentSample {
                        tile: t,
                        sign: tile.sign as i8,
                        bit: b,
                        phys_col: tile.pcol0 + j,
                        current: i,
                        code: adc_quantize(i, &tile.periph),
                        full_scale: tile.periph.adc_full_scale,
                    });
                }
            }
        }
        Ok(out)
    }

    fn read(&self, q_in: &[i64], bits: u32, bgs: Option<&[BackGate<'_>]>) -> Result<Vec<MappedRead>> {
        if q_in.len() != self.rows {
            return Err(Error::shape("mapped matrix input", self.rows, q_in.len()));
        }
        let v_max = self.periph.dac_v_max;
        // Back-gate voltage per logical column after range clipping.
        let mut resolved: Vec<(Vec<f64>, u64)> = Vec::new();
        if let Some(bgs) = bgs {
            for bg in bgs {
                let (v, clips) = bg.resolve(self.cols, v_max)?;
                resolved.push((v, u64::from(clips)));
            }
        }
        let trilinear = bgs.is_some();
        let n_out = if trilinear { resolved.len() } else { 1 };
        let mut values = vec![vec![0.0; self.cols]; n_out];

        let mut v_step = Vec::new();
        let mut acc: Vec<Vec<i64>> = Vec::new();
        let mut bg_phys = Vec::new();
        for tile in &self.tiles {
            let (nr, nc) = (tile.xbar.rows(), tile.xbar.cols());
            let q = &q_in[tile.row0..tile.row0 + nr];
            let periph = &tile.periph;
            acc.clear();
            acc.resize(n_out, vec![0; nc]);
            for b in 0..bits {
                v_step.clear();
                let mut any = false;
                for &qi in q {
                    let on = input_bit(qi, b, bits);
                    any |= on;
                    v_step.push(if on { self.periph.v_read } else { 0.0 });
                }
                if !any {
                    continue;
                }
                let w = bit_weight(b, bits);
                let base = tile.xbar.column_currents(&v_step, None);
                if !trilinear {
                    for (a, &i) in acc[0].iter_mut().zip(&base) {
                        *a += w * adc_quantize(i, periph);
                    }
                    continue;
                }
                let ref_codes: Vec<i64> = base.iter().map(|&i| adc_quantize(i, periph)).collect();
                for (k, (bg, _)) in resolved.iter().enumerate() {
                    bg_phys.clear();
                    bg_phys.extend((tile.pcol0..tile.pcol0 + nc).map(|pc| bg[pc / self.planes]));
                    let modulated = if self.cfg.per_cell_eta {
                        tile.xbar.column_currents(&v_step, Some(&bg_phys))
                    } else {
                        let eta = tile.xbar.eta();
                        base.iter().zip(&bg_phys).map(|(&i, &v)| i * (1.0 + eta * v)).collect()
                    };
                    for ((a, &m), &r) in acc[k].iter_mut().zip(&modulated).zip(&ref_codes) {
                        *a += w * (adc_quantize(m, periph) - r);
                    }
                }
            }
            for (out, a) in values.iter_mut().zip(&acc) {
                for (j, &code) in a.iter().enumerate() {
                    let pc = tile.pcol0 + j;
                    let (c, p) = (pc / self.planes, pc % self.planes);
                    let plane_weight = 2_f64.powi((p as u32 * self.bits_per_cell) as i32);
                    out[c] += tile.sign * plane_weight * code as f64 * periph.lsb();
                }
            }
        }
        let stats = layout_stats(self.rows, self.cols, self.planes, &self.cfg, bits, trilinear);
        Ok(values
            .into_iter()
            .enumerate()
            .map(|(k, values)| {
                let mut s = stats;
                s.clip_events = resolved.get(k).map_or(0, |r| r.1);
                MappedRead { values, stats: s }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_value;

    fn qt(rows: usize, cols: usize, data: Vec<i64>, bits: u32) -> QuantTensor {
        QuantTensor {
            rows,
            cols,
            data,
            scale: 1.0,
            bits,
        }
    }

    fn ideal_cfg() -> (QuantScheme, ArrayConfig) {
        let scheme = QuantScheme {
            adc_bits: 30,
            ..QuantScheme::default()
        };
        let cfg = ArrayConfig {
            rows: 4,
            cols: 6,
            ..ArrayConfig::default()
        };
        (scheme, cfg)
    }

    #[test]
    fn bilinear_matches_integer_mvm_across_tiles() {
        let (scheme, cfg) = ideal_cfg();
        let (k, n) = (9, 5);
        let w: Vec<i64> = (0..k * n).map(|i| ((i * 37) % 255) as i64 - 127).collect();
        let x: Vec<i64> = (0..k).map(|i| quantize_value(i as f64 * 13.0 - 50.0, 1.0, 8)).collect();
        let m = MappedMatrix::program(&qt(k, n, w.clone(), 8), &scheme, &DeviceParams::default(), &cfg, 1.0).unwrap();
        let r = m.bilinear(&x, 8).unwrap();
        for c in 0..n {
            let exact: i64 = (0..k).map(|i| x[i] * w[i * n + c]).sum();
            let got = r.values[c] / m.unit_current();
            assert!((got - exact as f64).abs() < 0.5, "col {c}: {got} vs {exact}");
        }
        // 3 row tiles × 4 plane-column tiles (20 physical columns / 6) × 2 signs.
        assert_eq!(m.n_subarrays(), 24);
    }

    #[test]
    fn trilinear_sweep_scales_by_back_gate() {
        let (scheme, cfg) = ideal_cfg();
        let device = DeviceParams::default();
        let w = vec![3, -7, 120, 0, -128 + 1, 64];
        let m = MappedMatrix::program(&qt(3, 2, w.clone(), 8), &scheme, &device, &cfg, 1.0).unwrap();
        let x = [5, -2, 9];
        let bg = [0.25, -0.5];
        let reads = m
            .trilinear_sweep(&x, 8, &[BackGate::PerColumn(&bg), BackGate::Broadcast(0.0)])
            .unwrap();
        for c in 0..2 {
            let exact: i64 = (0..3).map(|i| x[i] * w[i * 2 + c]).sum();
            let want = exact as f64 * device.eta_bar * bg[c];
            let got = reads[0].values[c] / m.unit_current();
            assert!((got - want).abs() < 0.05, "{got} vs {want}");
            assert_eq!(reads[1].values[c], 0.0);
        }
    }
}
