//! Digital special-function unit: LUT-based softmax, LayerNorm and GELU.
//!
//! Tables hold 256 entries. Lookups interpolate linearly between neighbours
//! using 8 fractional index bits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle;
use crate::quant::{calibrate_scale, qmax, quantize_value};

pub const LUT_SIZE: usize = 256;
const FRAC: u32 = 8;
/// Fraction bits of reciprocal and inverse-sqrt table entries.
const RECIP_BITS: u32 = 24;
const SIGMOID_BITS: u32 = 15;
pub const SOFTMAX_OUT_FRAC: u32 = 14;
pub const SOFTMAX_OUT_BITS: u32 = 16;
pub const LN_NORM_FRAC: u32 = 12;
pub const LN_OUT_FRAC: u32 = 10;
pub const LN_OUT_BITS: u32 = 16;
/// Extra fraction bits carried by the LayerNorm mean.
const LN_MEAN_FRAC: u32 = 8;
pub const LN_EPSILON: f64 = 1.0 / 65536.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lut256 {
    pub entries: Vec<i64>,
    pub domain_lo: f64,
    pub domain_hi: f64,
    /// Real value of one entry unit.
    pub out_scale: f64,
}

impl Lut256 {
    pub fn build(domain_lo: f64, domain_hi: f64, out_scale: f64, f: impl Fn(f64) -> f64) -> Self {
        let entries = (0..LUT_SIZE)
            .map(|k| (f(Self::point(domain_lo, domain_hi, k)) / out_scale).round() as i64)
            .collect();
        Self {
            entries,
            domain_lo,
            domain_hi,
            out_scale,
        }
    }

    fn point(lo: f64, hi: f64, k: usize) -> f64 {
        lo + (hi - lo) * k as f64 / (LUT_SIZE - 1) as f64
    }

    pub fn input_at(&self, k: usize) -> f64 {
        Self::point(self.domain_lo, self.domain_hi, k)
    }

    /// Interpolated lookup at a position in 1/256 table steps; `end` is the
    /// value just past the last entry.
    fn interp(&self, pos: i64, end: i64) -> i64 {
        let pos = pos.clamp(0, ((LUT_SIZE as i64 - 1) << FRAC) + (1 << FRAC) - 1);
        let idx = (pos >> FRAC) as usize;
        let frac = pos & ((1 << FRAC) - 1);
        let a = self.entries[idx];
        let b = if idx + 1 < LUT_SIZE { self.entries[idx + 1] } else { end };
        (a * ((1 << FRAC) - frac) + b * frac + (1 << (FRAC - 1))) >> FRAC
    }

    pub fn is_monotone_increasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[0] > w[1])
    }

    pub fn dump(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "index,input,entry,value")?;
        for (k, &e) in self.entries.iter().enumerate() {
            writeln!(out, "{k},{},{e},{}", self.input_at(k), e as f64 * self.out_scale)?;
        }
        Ok(())
    }
}

/// Integer vector with a real scale per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedVec {
    pub data: Vec<i64>,
    pub scale: f64,
    pub bits: u32,
}

impl FixedVec {
    pub fn quantize(x: &[f64], scale: f64, bits: u32) -> Self {
        Self {
            data: x.iter().map(|&v| quantize_value(v, scale, bits)).collect(),
            scale,
            bits,
        }
    }

    pub fn calibrated(x: &[f64], bits: u32) -> Result<Self> {
        Ok(Self::quantize(x, calibrate_scale(x, bits)?, bits))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&q| q as f64 * self.scale).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn in_range(&self) -> bool {
        let m = qmax(self.bits);
        self.data.iter().all(|q| q.abs() <= m)
    }
}

fn round_shift(v: i64, shift: i32) -> i64 {
    if shift <= 0 {
        v << (-shift)
    } else {
        (v + (1 << (shift - 1))) >> shift
    }
}

fn saturate(v: i64, bits: u32) -> i64 {
    let m = qmax(bits);
    v.clamp(-m, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SfuKind {
    /// LUT pipelines in integer arithmetic.
    #[default]
    FixedPoint,
    /// Double-precision reference functions.
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfuConfig {
    pub kind: SfuKind,
    /// Right shifts summed to approximate 1.702 in the GELU scaler.
    pub gelu_shifts: Vec<u32>,
}

impl Default for SfuConfig {
    fn default() -> Self {
        Self {
            kind: SfuKind::FixedPoint,
            gelu_shifts: vec![0, 1, 3, 4, 7],
        }
    }
}

impl SfuConfig {
    pub fn gelu_scaler(&self) -> f64 {
        self.gelu_shifts.iter().map(|&s| 2_f64.powi(-(s as i32))).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gelu_shifts.is_empty() || self.gelu_shifts.iter().any(|&s| s > FRAC) {
            return Err(Error::InvalidArgument(format!(
                "gelu_shifts must be non-empty with shifts ≤ {FRAC}"
            )));
        }
        Ok(())
    }
}

/// Operation counts fed to the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SfuOps {
    pub lut_lookups: u64,
    pub adds: u64,
    pub mults: u64,
}

impl SfuOps {
    pub fn merge(&mut self, o: &SfuOps) {
        self.lut_lookups += o.lut_lookups;
        self.adds += o.adds;
        self.mults += o.mults;
    }

    pub fn softmax(n: usize) -> Self {
        let n = n as u64;
        Self {
            lut_lookups: n + 1,
            adds: 3 * n,
            mults: n,
        }
    }

    pub fn layernorm(d: usize) -> Self {
        let d = d as u64;
        Self {
            lut_lookups: 1,
            adds: 4 * d,
            mults: 3 * d,
        }
    }

    pub fn gelu(n: usize, shifts: usize) -> Self {
        let n = n as u64;
        Self {
            lut_lookups: n,
            adds: n * shifts as u64,
            mults: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sfu {
    pub config: SfuConfig,
    pub exp: Lut256,
    pub recip: Lut256,
    pub inv_sqrt: Lut256,
    pub sigmoid: Lut256,
}

impl Default for Sfu {
    fn default() -> Self {
        Self::new(SfuConfig::default()).expect("default SFU config is valid")
    }
}

impl Sfu {
    pub fn new(config: SfuConfig) -> Result<Self> {
        config.validate()?;
        let unit = 2_f64.powi(-(RECIP_BITS as i32));
        Ok(Self {
            config,
            // Unsigned, 8 fraction bits; exp(0) is stored as 256.
            exp: Lut256::build(-8.0, 0.0, 1.0 / 256.0, f64::exp),
            // Mantissa tables are built over [1, 2) and [1, 4) without the endpoint.
            recip: Lut256::build(1.0, 1.0 + 255.0 / 256.0, unit, |m| 1.0 / m),
            inv_sqrt: Lut256::build(1.0, 1.0 + 3.0 * 255.0 / 256.0, unit, |m| 1.0 / m.sqrt()),
            sigmoid: Lut256::build(-8.0, 8.0, 2_f64.powi(-(SIGMOID_BITS as i32)), |z| 1.0 / (1.0 + (-z).exp())),
        })
    }

    pub fn kind(&self) -> SfuKind {
        self.config.kind
    }

    /// Reciprocal of a positive integer as (r, k) with 1/v ≈ r·2^-(24+k).
    fn reciprocal(&self, v: i64) -> (i64, u32) {
        debug_assert!(v > 0);
        let k = 63 - v.leading_zeros();
        // Mantissa in [1, 2) with 16 fraction bits.
        let m = ((v as i128) << 16 >> k) as i64;
        let r = self.recip.interp(m - (1 << 16), 1 << (RECIP_BITS - 1));
        (r, k)
    }

    /// Four stages: max, exp LUT on x − max, sum, reciprocal and multiply.
    /// Output has 14 fraction bits.
    pub fn softmax_pipeline(&self, x: &FixedVec) -> Result<FixedVec> {
        let Some(&max) = x.data.iter().max() else {
            return Err(Error::InvalidArgument("softmax of an empty vector".into()));
        };
        let steps_per_unit = (LUT_SIZE - 1) as f64 / (self.exp.domain_hi - self.exp.domain_lo);
        let top = ((LUT_SIZE - 1) << FRAC) as i64;
        let e: Vec<i64> = x
            .data
            .iter()
            .map(|&q| {
                let diff = (q - max) as f64 * x.scale;
                let pos = top + (diff * steps_per_unit * f64::from(1 << FRAC)).round() as i64;
                // Entries carry 8 fraction bits; interpolation keeps 16.
                if pos < 0 {
                    0
                } else {
                    self.exp.interp(pos, 0) << FRAC
                }
            })
            .collect();
        let sum: i64 = e.iter().sum();
        let (r, k) = self.reciprocal(sum);
        let shift = (RECIP_BITS + k - SOFTMAX_OUT_FRAC) as i32;
        let data = e
            .iter()
            .map(|&ei| saturate(round_shift(ei * r, shift), SOFTMAX_OUT_BITS))
            .collect();
        Ok(FixedVec {
            data,
            scale: 2_f64.powi(-(SOFTMAX_OUT_FRAC as i32)),
            bits: SOFTMAX_OUT_BITS,
        })
    }

    /// Two passes: mean, then variance, inverse-sqrt LUT and affine. Output
    /// has 10 fraction bits.
    pub fn layernorm_pipeline(&self, x: &FixedVec, gamma: &FixedVec, beta: &FixedVec) -> Result<FixedVec> {
        let d = x.len();
        if d < 2 {
            return Err(Error::InvalidArgument("LayerNorm needs at least two elements".into()));
        }
        if gamma.len() != d || beta.len() != d {
            return Err(Error::shape("LayerNorm gamma/beta", d, gamma.len().min(beta.len())));
        }
        let di = d as i64;
        let div_round = |a: i64| (a + a.signum() * di / 2) / di;
        let mean = div_round(x.data.iter().sum::<i64>() << LN_MEAN_FRAC);
        let dev: Vec<i64> = x.data.iter().map(|&q| (q << LN_MEAN_FRAC) - mean).collect();
        let var = dev.iter().map(|&v| v as i128 * v as i128).sum::<i128>() / d as i128;
        // Epsilon floor expressed in squared dev units.
        let unit = x.scale * 2_f64.powi(-(LN_MEAN_FRAC as i32));
        let floor = (LN_EPSILON / (unit * unit)).ceil().max(1.0) as i128;
        let var = var.max(floor);
        let mut k = 127 - var.leading_zeros();
        k -= k % 2;
        // Mantissa in [1, 4) with 16 fraction bits, then position in 1/256 table steps.
        let m = (var << 16 >> k) as i64;
        let pos = (m - (1 << 16)) / 3;
        let r = self.inv_sqrt.interp(pos, 1 << (RECIP_BITS - 1));
        let shift = (RECIP_BITS + k / 2 - LN_NORM_FRAC) as i32;
        let norm_unit = 2_f64.powi(-(LN_NORM_FRAC as i32));
        let out_unit = 2_f64.powi(-(LN_OUT_FRAC as i32));
        let data = dev
            .iter()
            .zip(gamma.data.iter().zip(&beta.data))
            .map(|(&v, (&g, &b))| {
                let norm = round_shift(v * r, shift);
                let y = (g * norm) as f64 * gamma.scale * norm_unit + b as f64 * beta.scale;
                saturate((y / out_unit).round() as i64, LN_OUT_BITS)
            })
            .collect();
        Ok(FixedVec {
            data,
            scale: out_unit,
            bits: LN_OUT_BITS,
        })
    }

    /// Shift-add scaler for 1.702·x, sigmoid LUT, then x·σ. The output keeps
    /// eight more fraction bits than the input.
    pub fn gelu_pipeline(&self, x: &FixedVec) -> FixedVec {
        let steps_per_unit = (LUT_SIZE - 1) as f64 / (self.sigmoid.domain_hi - self.sigmoid.domain_lo);
        let out_bits = (x.bits + FRAC).min(48);
        let data = x
            .data
            .iter()
            .map(|&q| {
                let xf = q << FRAC;
                let scaled: i64 = self.config.gelu_shifts.iter().map(|&s| xf >> s).sum();
                let z = scaled as f64 * x.scale * 2_f64.powi(-(FRAC as i32));
                let pos = ((z - self.sigmoid.domain_lo) * steps_per_unit * f64::from(1 << FRAC)).round() as i64;
                let sig = self.sigmoid.interp(pos, 1 << SIGMOID_BITS);
                saturate(round_shift(q * sig, (SIGMOID_BITS - FRAC) as i32), out_bits)
            })
            .collect();
        FixedVec {
            data,
            scale: x.scale * 2_f64.powi(-(FRAC as i32)),
            bits: out_bits,
        }
    }

    /// Softmax of a real row through the configured datapath; fixed-point
    /// inputs are quantized to `bits` with a calibrated scale.
    pub fn softmax(&self, x: &[f64], bits: u32) -> Result<Vec<f64>> {
        match self.config.kind {
            SfuKind::Float => {
                if x.is_empty() {
                    return Err(Error::InvalidArgument("softmax of an empty vector".into()));
                }
                Ok(oracle::float_softmax(x))
            }
            SfuKind::FixedPoint => Ok(self.softmax_pipeline(&FixedVec::calibrated(x, bits)?)?.to_f64()),
        }
    }

    pub fn layernorm(&self, x: &[f64], gamma: &[f64], beta: &[f64], bits: u32) -> Result<Vec<f64>> {
        match self.config.kind {
            SfuKind::Float => {
                if gamma.len() != x.len() || beta.len() != x.len() {
                    return Err(Error::shape("LayerNorm gamma/beta", x.len(), gamma.len().min(beta.len())));
                }
                Ok(oracle::float_layernorm(x, gamma, beta, LN_EPSILON))
            }
            SfuKind::FixedPoint => {
                let fx = FixedVec::calibrated(x, bits)?;
                let g = FixedVec::calibrated(gamma, bits)?;
                let b = FixedVec::calibrated(beta, bits)?;
                Ok(self.layernorm_pipeline(&fx, &g, &b)?.to_f64())
            }
        }
    }

    pub fn gelu(&self, x: &[f64], bits: u32) -> Result<Vec<f64>> {
        match self.config.kind {
            SfuKind::Float => Ok(x.iter().map(|&v| oracle::float_gelu_sigmoid(v)).collect()),
            SfuKind::FixedPoint => Ok(self.gelu_pipeline(&FixedVec::calibrated(x, bits)?).to_f64()),
        }
    }

    /// Writes each table as `<name>.csv` into `dir`.
    pub fn dump_luts(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, lut) in [
            ("exp", &self.exp),
            ("recip", &self.recip),
            ("inv_sqrt", &self.inv_sqrt),
            ("sigmoid", &self.sigmoid),
        ] {
            let f = std::fs::File::create(dir.join(format!("{name}.csv")))?;
            lut.dump(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(data: &[i64], scale: f64, bits: u32) -> FixedVec {
        FixedVec {
            data: data.to_vec(),
            scale,
            bits,
        }
    }

    #[test]
    fn tables_have_expected_shape() {
        let sfu = Sfu::default();
        for lut in [&sfu.exp, &sfu.recip, &sfu.inv_sqrt, &sfu.sigmoid] {
            assert_eq!(lut.entries.len(), LUT_SIZE);
        }
        assert!(sfu.exp.is_monotone_increasing());
        assert!(sfu.sigmoid.is_monotone_increasing());
        assert!(sfu.recip.is_strictly_decreasing());
        assert!(sfu.inv_sqrt.is_strictly_decreasing());
        assert_eq!(sfu.exp.entries[255], 256);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let sfu = Sfu::default();
        for n in 1..20 {
            let out = sfu.softmax_pipeline(&fx(&vec![5; n], 0.1, 8)).unwrap();
            let want = (1 << SOFTMAX_OUT_FRAC) as f64 / n as f64;
            assert!(out.data.iter().all(|&q| (q as f64 - want).abs() <= 1.0), "n={n}: {:?}", out.data);
        }
        let out = sfu.softmax_pipeline(&fx(&[127, 0, -20, 10], 0.1, 8)).unwrap().to_f64();
        assert!((out[0] - 1.0).abs() < 1e-3);
        assert!(out[1..].iter().all(|&p| p < 1e-3));
        assert!(sfu.softmax_pipeline(&fx(&[], 0.1, 8)).is_err());
    }

    #[test]
    fn reciprocal_is_accurate() {
        let sfu = Sfu::default();
        for v in [1_i64, 2, 3, 7, 255, 65536, 65537, 123_456_789] {
            let (r, k) = sfu.reciprocal(v);
            let got = r as f64 * 2_f64.powi(-(RECIP_BITS as i32 + k as i32));
            assert!((got * v as f64 - 1.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn layernorm_constant_gives_beta() {
        let sfu = Sfu::default();
        let x = fx(&[40; 8], 0.05, 8);
        let g = fx(&[64; 8], 1.0 / 64.0, 8);
        let b = fx(&[10, -3, 0, 7, 1, 2, 3, -9], 0.1, 8);
        let y = sfu.layernorm_pipeline(&x, &g, &b).unwrap().to_f64();
        for (yi, bi) in y.iter().zip(b.to_f64()) {
            assert!((yi - bi).abs() <= 2_f64.powi(-(LN_OUT_FRAC as i32)));
        }
        assert!(sfu.layernorm_pipeline(&fx(&[1], 1.0, 8), &fx(&[1], 1.0, 8), &fx(&[1], 1.0, 8)).is_err());
    }

    #[test]
    fn layernorm_identity_normalization() {
        let sfu = Sfu::default();
        // Mean 0, variance 1.
        let x = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let fxv = FixedVec::quantize(&x, 1.0 / 64.0, 8);
        let g = FixedVec::quantize(&[1.0; 8], 1.0 / 64.0, 8);
        let b = FixedVec::quantize(&[0.0; 8], 1.0, 8);
        let y = sfu.layernorm_pipeline(&fxv, &g, &b).unwrap().to_f64();
        for (yi, xi) in y.iter().zip(x) {
            assert!((yi - xi).abs() < 2e-3);
        }
    }

    #[test]
    fn gelu_examples() {
        let sfu = Sfu::default();
        let s = 8.0 / 127.0;
        let y = sfu.gelu_pipeline(&fx(&[0, 127, -127], s, 8)).to_f64();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 8.0).abs() < 0.01);
        assert!(y[2].abs() < 0.01);
        assert!((sfu.config.gelu_scaler() - 1.6953125).abs() < 1e-12);
        assert!((sfu.config.gelu_scaler() / 1.702 - 1.0).abs() < 5e-3);
    }

    #[test]
    fn lut_dump_has_all_rows() {
        let mut buf = Vec::new();
        Sfu::default().exp.dump(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), LUT_SIZE + 1);
    }
}
