//! Multi-head attention in float, quantized-digital, bilinear-CIM and
//! trilinear-CIM modes.

mod stages;
mod weights;

pub use stages::{stage1_scaled_query, stage2_score, stage3_value_agg, Ctx, StageOutput};
pub use weights::{generate_input, HeadWeights, LayerWeights, ModelWeights};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::ArrayConfig;
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::oracle;
use crate::quant::QuantScheme;
use crate::sfu::{SfuConfig, SfuKind};
use crate::tensor::Matrix;
use crate::trace::{ExecTrace, HeadTrace, LayerTrace, StageTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Float,
    #[serde(alias = "digital")]
    QuantizedDigital,
    #[serde(alias = "bilinear")]
    CimBilinear,
    #[serde(alias = "trilinear")]
    CimTrilinear,
}

impl ExecMode {
    pub fn is_cim(&self) -> bool {
        matches!(self, ExecMode::CimBilinear | ExecMode::CimTrilinear)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExecMode::Float => "float",
            ExecMode::QuantizedDigital => "quantized-digital",
            ExecMode::CimBilinear => "cim-bilinear",
            ExecMode::CimTrilinear => "cim-trilinear",
        }
    }
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(ExecMode::Float),
            "digital" | "quantized-digital" => Ok(ExecMode::QuantizedDigital),
            "bilinear" | "cim-bilinear" => Ok(ExecMode::CimBilinear),
            "trilinear" | "cim-trilinear" => Ok(ExecMode::CimTrilinear),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionJob {
    pub n_tokens: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mode: ExecMode,
    pub seed: u64,
    /// Generated from the seed when absent.
    pub x_input: Option<Matrix>,
}

impl AttentionJob {
    pub fn new(n_tokens: usize, d_k: usize, n_heads: usize, n_layers: usize, mode: ExecMode, seed: u64) -> Self {
        Self {
            n_tokens,
            d_model: d_k * n_heads,
            d_k,
            n_heads,
            n_layers,
            mode,
            seed,
            x_input: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.d_k == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::InvalidArgument(
                "n_tokens, d_k, n_heads and n_layers must be ≥ 1".into(),
            ));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must equal n_heads·d_k = {}",
                self.d_model,
                self.n_heads * self.d_k
            )));
        }
        if let Some(x) = &self.x_input {
            if x.shape() != (self.n_tokens, self.d_model) {
                return Err(Error::shape(
                    "job input",
                    format!("({}, {})", self.n_tokens, self.d_model),
                    format!("{:?}", x.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn input(&self) -> Matrix {
        self.x_input.clone().unwrap_or_else(|| generate_input(self))
    }
}

/// What to do when the Stage-1 back-gate voltage for 1/√d_k exceeds the DAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DacPolicy {
    /// Clip to the top DAC level and apply the remaining factor digitally.
    #[default]
    Residual,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwConfig {
    pub scheme: QuantScheme,
    pub device: DeviceParams,
    pub array: ArrayConfig,
    pub sfu: SfuConfig,
    pub causal: bool,
    pub dac_policy: DacPolicy,
    /// Multiplies the sensitivity the arrays physically apply while the
    /// digital conversion keeps using η̄. Fault injection only.
    #[serde(skip, default = "one")]
    pub eta_perturbation: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            scheme: QuantScheme::default(),
            device: DeviceParams::default(),
            array: ArrayConfig::default(),
            sfu: SfuConfig::default(),
            causal: false,
            dac_policy: DacPolicy::Residual,
            eta_perturbation: 1.0,
        }
    }
}

impl HwConfig {
    /// High-resolution operands and converters with a float SFU.
    pub fn ideal() -> Self {
        Self {
            scheme: QuantScheme::ideal(),
            sfu: SfuConfig {
                kind: SfuKind::Float,
                ..SfuConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.device.validate()?;
        self.array.validate()?;
        self.sfu.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnStage {
    ScaledQuery,
    Score,
    ValueAgg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operand {
    X,
    /// Scaled query X·W_Qᵀ/√d_k.
    R1,
    WQt,
    WK,
    WVt,
    Xt,
    Score,
    InvSqrtDk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BgKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XbarConfig {
    A,
    B,
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: AttnStage,
    pub row_operand: Operand,
    pub stored_operand: Operand,
    pub bg_operand: Operand,
    pub bg_kind: BgKind,
    pub xbar_config: XbarConfig,
}

/// Operand mapping of the three trilinear stages.
pub const STAGE_PLANS: [StagePlan; 3] = [
    StagePlan {
        stage: AttnStage::ScaledQuery,
        row_operand: Operand::X,
        stored_operand: Operand::WQt,
        bg_operand: Operand::InvSqrtDk,
        bg_kind: BgKind::Static,
        xbar_config: XbarConfig::Either,
    },
    StagePlan {
        stage: AttnStage::Score,
        row_operand: Operand::R1,
        stored_operand: Operand::WK,
        bg_operand: Operand::Xt,
        bg_kind: BgKind::Dynamic,
        xbar_config: XbarConfig::A,
    },
    StagePlan {
        stage: AttnStage::ValueAgg,
        row_operand: Operand::X,
        stored_operand: Operand::WVt,
        bg_operand: Operand::Score,
        bg_kind: BgKind::Dynamic,
        xbar_config: XbarConfig::B,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEvent {
    pub layer: usize,
    pub head: usize,
    pub stage: crate::trace::StageKind,
    pub cells: u64,
}

/// Non-volatile cells programmed at inference time.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WriteLog {
    pub events: Vec<WriteEvent>,
}

impl WriteLog {
    pub fn total(&self) -> u64 {
        self.events.iter().map(|e| e.cells).sum()
    }

    pub fn from_trace(trace: &ExecTrace) -> Self {
        let mut events = Vec::new();
        for (l, layer) in trace.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for s in head.stages.iter().filter(|s| s.writes_cells > 0) {
                    events.push(WriteEvent {
                        layer: l,
                        head: h,
                        stage: s.stage,
                        cells: s.writes_cells,
                    });
                }
            }
        }
        Self { events }
    }
}

/// Per-run observations that are not part of the cost trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clip_events: u64,
    /// (name, fingerprint) of every quantized operand, in execution order.
    pub operands: Vec<(String, u64)>,
}

impl Diagnostics {
    fn merge(&mut self, other: Diagnostics) {
        self.clip_events += other.clip_events;
        self.operands.extend(other.operands);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub output: Matrix,
    pub write_log: WriteLog,
    pub trace: ExecTrace,
    pub diagnostics: Diagnostics,
}

/// Float multi-head attention built from `Matrix` products; layers are
/// stacked without residuals.
pub fn run_reference_attention(job: &AttentionJob, weights: &ModelWeights) -> Result<Matrix> {
    job.validate()?;
    weights.validate(job)?;
    let mut x = job.input();
    for layer in &weights.layers {
        x = reference_mhsa(&x, layer, job.d_k)?;
    }
    Ok(x)
}

pub(crate) fn reference_mhsa(x: &Matrix, layer: &LayerWeights, dk: usize) -> Result<Matrix> {
    let inv = 1.0 / (dk as f64).sqrt();
    let heads = layer
        .heads
        .iter()
        .map(|h| {
            let q = x.matmul(&h.w_q.transpose())?;
            let k = x.matmul(&h.w_k.transpose())?;
            let v = x.matmul(&h.w_v.transpose())?;
            let s = q.matmul(&k.transpose())?.scale(inv);
            let mut p = Matrix::zeros(s.rows(), s.cols());
            for r in 0..s.rows() {
                p.row_mut(r).copy_from_slice(&oracle::float_softmax(s.row(r)));
            }
            p.matmul(&v)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hconcat(&heads)?.matmul(&layer.w_o)
}

fn check(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<()> {
    job.validate()?;
    weights.validate(job)?;
    hw.validate()
}

fn run_layers(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig, mode: ExecMode, encoder: bool) -> Result<Outcome> {
    check(job, weights, hw)?;
    let ctx = Ctx::new(hw, mode)?;
    let mut x = job.input();
    let mut trace = ExecTrace::new(mode);
    let mut diagnostics = Diagnostics::default();
    for layer in &weights.layers {
        let (y, lt, diag) = run_layer(&ctx, &x, layer, job, encoder)?;
        x = y;
        trace.layers.push(lt);
        diagnostics.merge(diag);
    }
    Ok(Outcome {
        output: x,
        write_log: WriteLog::from_trace(&trace),
        trace,
        diagnostics,
    })
}

fn run_layer(ctx: &Ctx, x: &Matrix, layer: &LayerWeights, job: &AttentionJob, encoder: bool) -> Result<(Matrix, LayerTrace, Diagnostics)> {
    let mut diag = Diagnostics::default();
    let qx = ctx.observe_act("x", x, &mut diag)?;
    let results: Vec<Result<(Matrix, HeadTrace, Diagnostics)>> = layer
        .heads
        .par_iter()
        .enumerate()
        .map(|(h, hw)| ctx.run_head(x, qx.as_ref(), hw, job.d_k).map_err(|e| e.in_stage(format!("head {h}"))))
        .collect();
    let mut heads = Vec::with_capacity(results.len());
    let mut outs = Vec::with_capacity(results.len());
    for r in results {
        let (o, t, d) = r?;
        outs.push(o);
        heads.push(t);
        diag.merge(d);
    }
    let concat = Matrix::hconcat(&outs)?;
    let mut shared: Vec<StageTrace> = Vec::new();
    let (attn, t) = ctx
        .project(crate::trace::StageKind::OutProj, &concat, "w_o", &layer.w_o, false, &mut diag)
        .map_err(|e| e.in_stage("out-proj"))?;
    shared.push(t);
    let y = if encoder {
        ctx.encoder_tail(x, &attn, layer, &mut shared, &mut diag)?
    } else {
        attn
    };
    Ok((y, LayerTrace { heads, shared }, diag))
}

pub fn run_trilinear_mode(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<Outcome> {
    run_layers(job, weights, hw, ExecMode::CimTrilinear, false)
}

pub fn run_bilinear_mode(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<Outcome> {
    run_layers(job, weights, hw, ExecMode::CimBilinear, false)
}

pub fn run_digital_mode(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<Outcome> {
    run_layers(job, weights, hw, ExecMode::QuantizedDigital, false)
}

/// Attention-only run in `job.mode`.
pub fn run_mode(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<Outcome> {
    run_layers(job, weights, hw, job.mode, false)
}

/// Full post-LN encoder blocks in `job.mode`:
/// Z = LN(X + MHSA(X)), Y = LN(Z + FFN(Z)).
pub fn run_encoder_block(job: &AttentionJob, weights: &ModelWeights, hw: &HwConfig) -> Result<Outcome> {
    run_layers(job, weights, hw, job.mode, true)
}
