//! DG-FeFET device physics: capacitor-stack coupling, back-gate threshold
//! shift, conductance response and the back-gate sensitivity η_BG.
//!
//! Units: conductance in µS, voltage in V, `m_coeff` in µS/V.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FitError, Result};

/// Series/parallel capacitances per unit area (F/m²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitorStack {
    pub c_fe: f64,
    pub c_il: f64,
    pub c_ch: f64,
    pub c_bgox: f64,
}

impl CapacitorStack {
    pub fn new(c_fe: f64, c_il: f64, c_ch: f64, c_bgox: f64) -> Result<Self> {
        let stack = Self {
            c_fe,
            c_il,
            c_ch,
            c_bgox,
        };
        if [c_fe, c_il, c_ch, c_bgox].iter().any(|c| !(*c > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "capacitances must be strictly positive: {stack:?}"
            )));
        }
        Ok(stack)
    }
}

/// Effective top-gate oxide capacitance: ferroelectric and interlayer in series.
pub fn ctgox(stack: &CapacitorStack) -> f64 {
    stack.c_fe * stack.c_il / (stack.c_fe + stack.c_il)
}

/// Back-gate to top-gate threshold coupling coefficient.
pub fn gamma_tg(stack: &CapacitorStack) -> f64 {
    let c_tgox = ctgox(stack);
    (stack.c_ch * stack.c_bgox) / (c_tgox * (stack.c_ch + stack.c_bgox))
}

/// Threshold shift seen by the top gate for a back-gate bias.
pub fn delta_vth(gamma: f64, v_bg: f64) -> f64 {
    -gamma * v_bg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EtaAveraging {
    UniformGridMean,
    EndpointMean,
    #[default]
    FixedConstant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceParams {
    /// Mobility-sensitivity coefficient α (V⁻¹).
    pub alpha: f64,
    /// Electrostatic coupling coefficient M = γ_TG·μ_n(0)·C_TGOX (µS/V).
    pub m_coeff: f64,
    pub gamma_tg: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    /// Band-averaged sensitivity used when `eta_method` is fixed-constant.
    pub eta_bar: f64,
    pub mu0: f64,
    pub eta_method: EtaAveraging,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            alpha: 0.137,
            m_coeff: 1.54,
            gamma_tg: 0.5,
            band_lo: 29.0,
            band_hi: 69.0,
            eta_bar: 0.157,
            mu0: 1.0,
            eta_method: EtaAveraging::FixedConstant,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.band_lo < self.band_hi) || self.band_lo <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "operating band must satisfy 0 < band_lo < band_hi, got [{}, {}]",
                self.band_lo, self.band_hi
            )));
        }
        if !(self.alpha > 0.0) || !(self.m_coeff > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha and m_coeff must be positive, got alpha={} m={}",
                self.alpha, self.m_coeff
            )));
        }
        if !(self.eta_bar > 0.0) {
            return Err(Error::InvalidArgument("eta_bar must be positive".into()));
        }
        static WARNED: std::sync::Once = std::sync::Once::new();
        if !self.eta_bar_within_band_range() {
            WARNED.call_once(|| log::warn!(
                "eta_bar {} lies outside the band sensitivity range [{:.5}, {:.5}]",
                self.eta_bar,
                self.alpha + self.m_coeff / self.band_hi,
                self.alpha + self.m_coeff / self.band_lo
            ));
        }
        Ok(())
    }

    /// Whether `eta_bar` lies in [η_BG(band_hi), η_BG(band_lo)].
    ///
    /// The default 0.157 V⁻¹ sits just below η_BG(69 µS) = 0.15932 V⁻¹, so this
    /// is false for the defaults; it is reported, not enforced.
    pub fn eta_bar_within_band_range(&self) -> bool {
        let lo = self.alpha + self.m_coeff / self.band_hi;
        let hi = self.alpha + self.m_coeff / self.band_lo;
        self.eta_bar >= lo && self.eta_bar <= hi
    }

    /// The sensitivity constant used for modulation, per `eta_method`.
    pub fn effective_eta(&self) -> f64 {
        band_average_eta(self.band_lo, self.band_hi, self, self.eta_method)
            .unwrap_or(self.eta_bar)
    }

    pub fn in_band(&self, g0: f64) -> bool {
        g0 >= self.band_lo && g0 <= self.band_hi
    }
}

/// First-order back-gate sensitivity η_BG = α + M/G0.
pub fn eta_bg(g0: f64, params: &DeviceParams) -> Result<f64> {
    if !(g0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eta_bg needs a positive conductance, got {g0} µS"
        )));
    }
    Ok(params.alpha + params.m_coeff / g0)
}

/// Linearized conductance response G0·(1 + η·V_BG).
pub fn gds_linear(g0: f64, v_bg: f64, eta: f64) -> f64 {
    g0 * (1.0 + eta * v_bg)
}

/// Full response with first-order mobility μ(V) = μ(0)(1 + αV):
/// (1 + αV)·G0 + M·(1 + αV)·V.
pub fn gds_full(g0: f64, v_bg: f64, params: &DeviceParams) -> f64 {
    let mobility_ratio = 1.0 + params.alpha * v_bg;
    mobility_ratio * g0 + params.m_coeff * mobility_ratio * v_bg
}

/// Warn-only band check used by callers that accept out-of-band cells.
pub fn check_band(g0: f64, params: &DeviceParams) {
    if !params.in_band(g0) {
        log::warn!(
            "G0 = {g0:.3} µS outside operating band [{}, {}] µS",
            params.band_lo,
            params.band_hi
        );
    }
}

const BAND_GRID_POINTS: usize = 1001;

pub fn band_average_eta(
    band_lo: f64,
    band_hi: f64,
    params: &DeviceParams,
    method: EtaAveraging,
) -> Result<f64> {
    if !(band_lo < band_hi) || band_lo <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "invalid band [{band_lo}, {band_hi}]"
        )));
    }
    match method {
        EtaAveraging::FixedConstant => Ok(params.eta_bar),
        EtaAveraging::EndpointMean => {
            Ok(0.5 * (eta_bg(band_lo, params)? + eta_bg(band_hi, params)?))
        }
        EtaAveraging::UniformGridMean => {
            let step = (band_hi - band_lo) / (BAND_GRID_POINTS - 1) as f64;
            let mut sum = 0.0;
            for i in 0..BAND_GRID_POINTS {
                sum += eta_bg(band_lo + step * i as f64, params)?;
            }
            Ok(sum / BAND_GRID_POINTS as f64)
        }
    }
}

/// Largest |η_BG(g) − η_avg| over the band, the residual non-uniformity a
/// single modulation constant leaves behind.
pub fn eta_band_deviation(params: &DeviceParams) -> Result<f64> {
    let avg = params.effective_eta();
    let step = (params.band_hi - params.band_lo) / (BAND_GRID_POINTS - 1) as f64;
    let mut worst = 0.0_f64;
    for i in 0..BAND_GRID_POINTS {
        let g = params.band_lo + step * i as f64;
        worst = worst.max((eta_bg(g, params)? - avg).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GvSample {
    pub v_bg: f64,
    pub g_ds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    pub alpha: f64,
    pub m_coeff: f64,
    /// L2 norm of the residuals of the fitted polynomial.
    pub residual_norm: f64,
}

/// Least-squares fit of G(V) = G0 + (αG0 + M)V + MαV² with G0 fixed.
///
/// The polynomial factors as G0(1 + αV)(1 + (M/G0)V), so α and M/G0 are only
/// identifiable as a pair. The root with α ≥ M/G0 is returned, which is the
/// mobility-dominated branch the fitted constants lie on across the band.
pub fn fit_alpha_m(samples: &[GvSample], g0: f64) -> std::result::Result<FitResult, FitError> {
    let mut voltages: Vec<f64> = samples.iter().map(|s| s.v_bg).collect();
    voltages.sort_by(f64::total_cmp);
    voltages.dedup();
    if voltages.len() < 3 {
        return Err(FitError::Underdetermined(voltages.len()));
    }

    // Normal equations for y = c1·V + c2·V², y = G − G0.
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let v = s.v_bg;
        let v2 = v * v;
        let y = s.g_ds - g0;
        s11 += v2;
        s12 += v * v2;
        s22 += v2 * v2;
        b1 += v * y;
        b2 += v2 * y;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= f64::EPSILON * s11 * s22 {
        return Err(FitError::Singular);
    }
    let c1 = (b1 * s22 - b2 * s12) / det;
    let c2 = (s11 * b2 - s12 * b1) / det;

    // g0·α² − c1·α + c2 = 0
    let disc = c1 * c1 - 4.0 * g0 * c2;
    let scale = c1 * c1;
    let disc = if disc < 0.0 && disc > -1e-9 * scale.max(1e-30) {
        0.0
    } else {
        disc
    };
    if disc < 0.0 {
        return Err(FitError::NoRealRoot(disc));
    }
    let alpha = (c1 + disc.sqrt()) / (2.0 * g0);
    let m_coeff = c1 - alpha * g0;
    if alpha < 0.0 || m_coeff < -1e-12 * c1.abs().max(1.0) {
        return Err(FitError::NegativeCoefficient { alpha, m: m_coeff });
    }
    let m_coeff = m_coeff.max(0.0);

    let residual_norm = samples
        .iter()
        .map(|s| {
            let v = s.v_bg;
            let model = g0 + (alpha * g0 + m_coeff) * v + m_coeff * alpha * v * v;
            (s.g_ds - model).powi(2)
        })
        .sum::<f64>()
        .sqrt();

    Ok(FitResult {
        alpha,
        m_coeff,
        residual_norm,
    })
}

/// Parses a two-column (v_bg, g_ds) file. Commas, tabs, semicolons or spaces
/// separate columns; `#` starts a comment; a non-numeric first line is taken
/// as a header.
pub fn parse_gv_samples(text: &str) -> Result<Vec<GvSample>> {
    let mut out = Vec::new();
    let mut seen_data = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(vals) if vals.len() == 2 => {
                if !(vals[1] > 0.0) {
                    return Err(Error::Parse {
                        location: format!("line {}", lineno + 1),
                        message: format!("g_ds must be positive, got {}", vals[1]),
                    });
                }
                out.push(GvSample {
                    v_bg: vals[0],
                    g_ds: vals[1],
                });
                seen_data = true;
            }
            None if !seen_data && out.is_empty() => {} // header
            _ => {
                return Err(Error::Parse {
                    location: format!("line {}", lineno + 1),
                    message: format!("expected two numeric columns, got `{line}`"),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_gv_samples(path: &Path) -> Result<Vec<GvSample>> {
    parse_gv_samples(&std::fs::read_to_string(path)?)
}
