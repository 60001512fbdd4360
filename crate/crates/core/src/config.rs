//! Experiment configuration: TOML with one table per subsystem. Every table
//! rejects unknown keys, and omitted keys take the defaults below (8-bit
//! operands and ADC, 2-bit cells, 64×64 subarrays, 8:1 mux, 50 ns writes).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionJob, DacPolicy, ExecMode, HwConfig};
use crate::cost::{AreaParams, CostModel, EnergyParams};
use crate::crossbar::ArrayConfig;
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::sfu::SfuConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobConfig {
    pub n_tokens: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Modes executed by `run`, in report order.
    pub modes: Vec<ExecMode>,
    pub seed: u64,
    pub causal: bool,
    /// Append the output projection's LayerNorm/FFN/GELU tail.
    pub encoder: bool,
    /// Simulate numerically; when absent, small jobs are simulated and large
    /// ones only planned analytically.
    pub functional: Option<bool>,
    pub dac_policy: DacPolicy,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            d_k: 8,
            n_heads: 2,
            n_layers: 1,
            modes: vec![ExecMode::CimTrilinear],
            seed: 0,
            causal: false,
            encoder: false,
            functional: None,
            dac_policy: DacPolicy::Residual,
        }
    }
}

/// Jobs above this many token·feature·layer elements are planned, not simulated.
pub const FUNCTIONAL_LIMIT: usize = 1 << 16;

impl JobConfig {
    pub fn job(&self, mode: ExecMode) -> AttentionJob {
        AttentionJob::new(self.n_tokens, self.d_k, self.n_heads, self.n_layers, mode, self.seed)
    }

    pub fn is_functional(&self) -> bool {
        self.functional
            .unwrap_or(self.n_tokens * self.d_k * self.n_heads * self.n_layers <= FUNCTIONAL_LIMIT)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seq_lens: Vec<usize>,
    /// Square subarray edge lengths.
    pub subarray_sizes: Vec<usize>,
    /// (bits_per_cell, adc_bits) pairs.
    pub cell_adc: Vec<(u32, u32)>,
}

impl SweepConfig {
    /// Empty axes fall back to the base configuration value; a sweep with no
    /// axes at all is rejected by `sweep`.
    pub fn is_empty(&self) -> bool {
        self.seq_lens.is_empty() && self.subarray_sizes.is_empty() && self.cell_adc.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub json: bool,
    pub csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            json: true,
            csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub device: DeviceParams,
    pub quant: QuantScheme,
    pub crossbar: ArrayConfig,
    pub sfu: SfuConfig,
    pub energy: EnergyParams,
    pub area: AreaParams,
    pub job: JobConfig,
    pub sweep: Option<SweepConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.hw().validate().map_err(cfg_err)?;
        self.energy.validate().map_err(cfg_err)?;
        if self.job.modes.is_empty() {
            return Err(Error::Config("job.modes must name at least one mode".into()));
        }
        self.job.job(self.job.modes[0]).validate().map_err(cfg_err)?;
        if let Some(s) = &self.sweep {
            if s.seq_lens.contains(&0) || s.subarray_sizes.contains(&0) {
                return Err(Error::Config("sweep axes must be positive".into()));
            }
            for &(bpc, adc) in &s.cell_adc {
                QuantScheme {
                    bits_per_cell: bpc,
                    adc_bits: adc,
                    ..self.quant
                }
                .validate()
                .map_err(cfg_err)?;
            }
        }
        Ok(())
    }

    pub fn hw(&self) -> HwConfig {
        HwConfig {
            scheme: self.quant,
            device: self.device,
            array: self.crossbar,
            sfu: self.sfu.clone(),
            causal: self.job.causal,
            dac_policy: self.job.dac_policy,
            eta_perturbation: 1.0,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel::new(self.energy, &self.crossbar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.quant.input_bits, cfg.quant.weight_bits, cfg.quant.adc_bits), (8, 8, 8));
        assert_eq!(cfg.quant.bits_per_cell, 2);
        assert_eq!((cfg.crossbar.rows, cfg.crossbar.cols, cfg.crossbar.mux_ratio), (64, 64, 8));
        assert_eq!(cfg.energy.write_latency, 50.0);
    }

    #[test]
    fn dotted_keys_and_round_trip() {
        let cfg = ExperimentConfig::from_toml("job.n_tokens = 16\njob.modes = [\"bilinear\", \"cim-trilinear\"]\nquant.adc_bits = 10\n").unwrap();
        assert_eq!(cfg.job.n_tokens, 16);
        assert_eq!(cfg.job.modes, vec![ExecMode::CimBilinear, ExecMode::CimTrilinear]);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[crossbar]\nrowz = 64\n").unwrap_err();
        assert!(err.to_string().contains("rowz"), "{err}");
        let err = ExperimentConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("quant.bits_per_cell = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("energy.write_latency = 5.0\n").is_err());
        assert!(ExperimentConfig::from_toml("job.modes = []\n").is_err());
        assert!(ExperimentConfig::from_toml("sweep.seq_lens = [0]\n").is_err());
    }
}
