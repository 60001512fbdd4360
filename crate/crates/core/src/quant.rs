//! Symmetric uniform post-training quantization, multi-bit-cell weight
//! decomposition and the conductance mapping used by the arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Largest bit width supported by the integer datapaths.
pub const MAX_BITS: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantScheme {
    pub input_bits: u32,
    pub weight_bits: u32,
    pub adc_bits: u32,
    /// Back-gate DAC resolution.
    pub dac_bits: u32,
    pub bits_per_cell: u32,
    /// Pinned activation scale; calibrated from the tensor when absent.
    pub act_scale: Option<f64>,
    /// Pinned weight scale; calibrated from the tensor when absent.
    pub weight_scale: Option<f64>,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            input_bits: 8,
            weight_bits: 8,
            adc_bits: 8,
            dac_bits: 8,
            bits_per_cell: 2,
            act_scale: None,
            weight_scale: None,
        }
    }
}

impl QuantScheme {
    /// High-resolution converters and operands: every quantizer in the
    /// datapath is fine enough that results track the float computation to
    /// ~1e-7 relative.
    pub fn ideal() -> Self {
        Self {
            input_bits: 26,
            weight_bits: 28,
            adc_bits: 36,
            dac_bits: 36,
            bits_per_cell: 28,
            act_scale: None,
            weight_scale: None,
        }
    }

    pub fn cells_per_weight(&self) -> u32 {
        self.weight_bits.div_ceil(self.bits_per_cell)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("input_bits", self.input_bits),
            ("weight_bits", self.weight_bits),
            ("adc_bits", self.adc_bits),
            ("dac_bits", self.dac_bits),
            ("bits_per_cell", self.bits_per_cell),
        ] {
            if !(1..=MAX_BITS).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in 1..={MAX_BITS}, got {b}"
                )));
            }
        }
        if self.input_bits < 2 || self.weight_bits < 2 {
            return Err(Error::InvalidArgument(
                "signed operands need at least 2 bits".into(),
            ));
        }
        if self.bits_per_cell > self.weight_bits {
            return Err(Error::InvalidArgument(format!(
                "bits_per_cell {} exceeds weight_bits {}",
                self.bits_per_cell, self.weight_bits
            )));
        }
        if self.bits_per_cell > 32 {
            return Err(Error::InvalidArgument(format!(
                "bits_per_cell must be ≤ 32, got {}",
                self.bits_per_cell
            )));
        }
        // Shift-added bit-serial ADC codes must fit in i64.
        if self.input_bits + self.adc_bits > 62 {
            return Err(Error::InvalidArgument(format!(
                "input_bits + adc_bits must be ≤ 62, got {}",
                self.input_bits + self.adc_bits
            )));
        }
        for (name, s) in [("act_scale", self.act_scale), ("weight_scale", self.weight_scale)] {
            if let Some(s) = s {
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument(format!("{name} must be > 0")));
                }
            }
        }
        Ok(())
    }
}

/// Largest representable magnitude for a symmetric signed quantizer.
pub fn qmax(bits: u32) -> i64 {
    (1_i64 << (bits - 1)) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
    pub scale: f64,
    pub bits: u32,
}

impl QuantTensor {
    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> QuantTensor {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        QuantTensor {
            rows: self.cols,
            cols: self.rows,
            data,
            scale: self.scale,
            bits: self.bits,
        }
    }

    /// Row vector view of one row.
    pub fn row_tensor(&self, r: usize) -> QuantTensor {
        QuantTensor {
            rows: 1,
            cols: self.cols,
            data: self.row(r).to_vec(),
            scale: self.scale,
            bits: self.bits,
        }
    }

    pub fn in_range(&self) -> bool {
        let m = qmax(self.bits);
        self.data.iter().all(|&q| (-m..=m).contains(&q))
    }
}

/// max|x| / (2^(bits−1) − 1); all-zero input falls back to 1.0.
pub fn calibrate_scale(samples: &[f64], bits: u32) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot calibrate a scale from no samples".into(),
        ));
    }
    let max_abs = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(1.0);
    }
    Ok(max_abs / qmax(bits) as f64)
}

/// Round-half-away-from-zero then clamp to the symmetric range.
pub fn quantize_value(x: f64, scale: f64, bits: u32) -> i64 {
    let m = qmax(bits);
    let q = (x / scale).round();
    if q >= m as f64 {
        m
    } else if q <= -(m as f64) {
        -m
    } else {
        q as i64
    }
}

pub fn quantize(x: &Matrix, scale: f64, bits: u32) -> Result<QuantTensor> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    Ok(QuantTensor {
        rows: x.rows(),
        cols: x.cols(),
        data: x.data().iter().map(|&v| quantize_value(v, scale, bits)).collect(),
        scale,
        bits,
    })
}

/// Calibrates a fresh scale from `x` (unless pinned) and quantizes.
pub fn quantize_calibrated(x: &Matrix, bits: u32, pinned: Option<f64>) -> Result<QuantTensor> {
    let scale = match pinned {
        Some(s) => s,
        None => calibrate_scale(x.data(), bits)?,
    };
    quantize(x, scale, bits)
}

pub fn dequantize(q: &QuantTensor) -> Matrix {
    Matrix::from_vec(
        q.rows,
        q.cols,
        q.data.iter().map(|&v| v as f64 * q.scale).collect(),
    )
    .expect("QuantTensor shape is consistent")
}

/// Magnitudes split into base-2^bits_per_cell digits, least significant first,
/// with the sign routed to the positive or negative array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDecomposition {
    pub rows: usize,
    pub cols: usize,
    pub planes: Vec<Vec<u32>>,
    pub bits_per_cell: u32,
    /// +1 routes to the positive array, −1 to the negative one; zero maps to +1.
    pub sign_plane: Vec<i8>,
}

pub fn decompose_cells(w: &QuantTensor, bits_per_cell: u32) -> Result<CellDecomposition> {
    if bits_per_cell == 0 || bits_per_cell > w.bits {
        return Err(Error::InvalidArgument(format!(
            "bits_per_cell must be in 1..={}, got {bits_per_cell}",
            w.bits
        )));
    }
    let n_planes = w.bits.div_ceil(bits_per_cell) as usize;
    let mask = (1_u64 << bits_per_cell) - 1;
    let mut planes = vec![Vec::with_capacity(w.data.len()); n_planes];
    let mut sign_plane = Vec::with_capacity(w.data.len());
    for &q in &w.data {
        let mag = q.unsigned_abs();
        sign_plane.push(if q < 0 { -1 } else { 1 });
        for (p, plane) in planes.iter_mut().enumerate() {
            plane.push(((mag >> (p as u32 * bits_per_cell)) & mask) as u32);
        }
    }
    Ok(CellDecomposition {
        rows: w.rows,
        cols: w.cols,
        planes,
        bits_per_cell,
        sign_plane,
    })
}

/// Shift-add recombination: sign ⊙ Σᵢ planeᵢ·2^(i·bits_per_cell).
pub fn recombine(planes: &[Vec<u32>], sign_plane: &[i8], bits_per_cell: u32) -> Result<Vec<i64>> {
    let Some(first) = planes.first() else {
        return Err(Error::InvalidArgument("recombine needs at least one plane".into()));
    };
    let n = first.len();
    if let Some(bad) = planes.iter().find(|p| p.len() != n) {
        return Err(Error::shape("recombine planes", n, bad.len()));
    }
    if sign_plane.len() != n {
        return Err(Error::shape("recombine sign plane", n, sign_plane.len()));
    }
    Ok((0..n)
        .map(|k| {
            let mag: i64 = planes
                .iter()
                .enumerate()
                .map(|(p, plane)| i64::from(plane[k]) << (p as u32 * bits_per_cell))
                .sum();
            i64::from(sign_plane[k]) * mag
        })
        .collect())
}

/// Affine map of a cell digit into the operating band; digit 0 sits at the band floor.
pub fn map_to_conductance(plane_value: u32, bits_per_cell: u32, band_lo: f64, band_hi: f64) -> f64 {
    debug_assert!(u64::from(plane_value) < (1_u64 << bits_per_cell));
    let levels = ((1_u64 << bits_per_cell) - 1) as f64;
    band_lo + f64::from(plane_value) * (band_hi - band_lo) / levels
}

/// Conductance step between adjacent digit levels.
pub fn conductance_step(bits_per_cell: u32, band_lo: f64, band_hi: f64) -> f64 {
    (band_hi - band_lo) / ((1_u64 << bits_per_cell) - 1) as f64
}
