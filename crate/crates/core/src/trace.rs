//! Activity counters recorded while executing a job, consumed by the cost
//! model. The same structure can be produced analytically (see [`plan`]) for
//! shapes too large to simulate functionally.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionJob, ExecMode, HwConfig};
use crate::crossbar::{layout_stats, tile_shapes, ArrayConfig, ReadStats};
use crate::sfu::SfuOps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    ScaledQuery,
    Score,
    Softmax,
    ValueAgg,
    QProj,
    KProj,
    VProj,
    KProgram,
    VProgram,
    OutProj,
    Ln1,
    Ffn1,
    Gelu,
    Ffn2,
    Ln2,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::ScaledQuery => "scaled-query",
            StageKind::Score => "score",
            StageKind::Softmax => "softmax",
            StageKind::ValueAgg => "value-agg",
            StageKind::QProj => "q-proj",
            StageKind::KProj => "k-proj",
            StageKind::VProj => "v-proj",
            StageKind::KProgram => "k-program",
            StageKind::VProgram => "v-program",
            StageKind::OutProj => "out-proj",
            StageKind::Ln1 => "ln1",
            StageKind::Ffn1 => "ffn1",
            StageKind::Gelu => "gelu",
            StageKind::Ffn2 => "ffn2",
            StageKind::Ln2 => "ln2",
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Back-gate line activity: `cycles` updates of `n_cols` lines spanning
/// `n_rows` cells each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BgActivity {
    pub n_cols: u64,
    pub n_rows: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: StageKind,
    pub cell_reads: u64,
    /// Mux cycles summed over every subarray and replicated crossbar.
    pub read_cycles: u64,
    /// Mux cycles on the critical path.
    pub critical_cycles: u64,
    pub adc_conversions: u64,
    pub writes_cells: u64,
    /// Row-programming pulses on the critical path.
    pub write_phases: u64,
    pub bg: Vec<BgActivity>,
    pub sfu: SfuOps,
    pub buffer_bytes: u64,
    /// Multiply-accumulates executed by the digital datapath.
    pub digital_macs: u64,
}

impl StageTrace {
    pub fn new(stage: StageKind) -> Self {
        Self {
            stage,
            cell_reads: 0,
            read_cycles: 0,
            critical_cycles: 0,
            adc_conversions: 0,
            writes_cells: 0,
            write_phases: 0,
            bg: Vec::new(),
            sfu: SfuOps::default(),
            buffer_bytes: 0,
            digital_macs: 0,
        }
    }

    /// Adds a read that runs after everything recorded so far.
    pub fn add_serial(&mut self, s: &ReadStats) {
        self.add_parallel(s);
        self.critical_cycles += s.critical_cycles;
    }

    /// Adds a read that overlaps with reads already on the critical path.
    pub fn add_parallel(&mut self, s: &ReadStats) {
        self.cell_reads += s.cell_reads;
        self.read_cycles += s.cycles;
        self.adc_conversions += s.adc_conversions;
    }

    /// BG updates for every subarray of a mapped matrix.
    pub fn add_bg(&mut self, rows: usize, cols: usize, planes: usize, cfg: &ArrayConfig, updates: u64) {
        for (nr, nc) in tile_shapes(rows, cols, planes, cfg) {
            for _ in 0..2 {
                self.bg.push(BgActivity {
                    n_cols: nc as u64,
                    n_rows: nr as u64,
                    cycles: updates,
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadTrace {
    pub stages: Vec<StageTrace>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    /// Stages after head concatenation (output projection, FFN, norms).
    pub shared: Vec<StageTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub mode: ExecMode,
    pub layers: Vec<LayerTrace>,
}

impl ExecTrace {
    pub fn new(mode: ExecMode) -> Self {
        Self {
            mode,
            layers: Vec::new(),
        }
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageTrace> {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter().flat_map(|h| h.stages.iter()).chain(l.shared.iter()))
    }

    pub fn total_writes(&self) -> u64 {
        self.stages().map(|s| s.writes_cells).sum()
    }

    /// Summed read cycles of one stage kind over all heads and layers.
    pub fn read_cycles_of(&self, kind: StageKind) -> u64 {
        self.stages().filter(|s| s.stage == kind).map(|s| s.read_cycles).sum()
    }

    pub fn writes_of(&self, kind: StageKind) -> u64 {
        self.stages().filter(|s| s.stage == kind).map(|s| s.writes_cells).sum()
    }
}

pub(crate) fn bytes_per_elem(bits: u32) -> u64 {
    u64::from(bits.div_ceil(8))
}

/// Trace of a static-weight projection: `n` rows through a `k × m` matrix.
pub(crate) fn projection_trace(kind: StageKind, n: usize, k: usize, m: usize, hw: &HwConfig, mode: ExecMode) -> StageTrace {
    let mut t = StageTrace::new(kind);
    let s = &hw.scheme;
    if mode.is_cim() {
        let stats = layout_stats(k, m, s.cells_per_weight() as usize, &hw.array, s.input_bits, false);
        for _ in 0..n {
            t.add_serial(&stats);
        }
    } else {
        t.digital_macs = (n * k * m) as u64;
    }
    t.buffer_bytes = ((n * k + n * m) as u64) * bytes_per_elem(s.input_bits);
    t
}

pub(crate) fn softmax_trace(n: usize, causal: bool, bits: u32) -> StageTrace {
    let mut t = StageTrace::new(StageKind::Softmax);
    for i in 0..n {
        t.sfu.merge(&SfuOps::softmax(if causal { i + 1 } else { n }));
    }
    t.buffer_bytes = 2 * (n * n) as u64 * bytes_per_elem(bits);
    t
}

pub(crate) fn layernorm_trace(kind: StageKind, n: usize, d: usize, bits: u32) -> StageTrace {
    let mut t = StageTrace::new(kind);
    for _ in 0..n {
        t.sfu.merge(&crate::sfu::SfuOps::layernorm(d));
    }
    t.buffer_bytes = 2 * (n * d) as u64 * bytes_per_elem(bits);
    t
}

pub(crate) fn gelu_trace(n: usize, width: usize, shifts: usize, bits: u32) -> StageTrace {
    let mut t = StageTrace::new(StageKind::Gelu);
    t.sfu = SfuOps::gelu(n * width, shifts);
    t.buffer_bytes = 2 * (n * width) as u64 * bytes_per_elem(bits);
    t
}

/// Trilinear Stage 1: `n` rows through W_Qᵀ (d × d_k) with static BG.
pub(crate) fn scaled_query_trace(n: usize, d: usize, dk: usize, hw: &HwConfig) -> StageTrace {
    let s = &hw.scheme;
    let mut t = StageTrace::new(StageKind::ScaledQuery);
    let stats = layout_stats(d, dk, s.cells_per_weight() as usize, &hw.array, s.input_bits, true);
    for _ in 0..n {
        t.add_serial(&stats);
    }
    t.buffer_bytes = ((n * d + n * dk) as u64) * bytes_per_elem(s.input_bits);
    t
}

/// Trilinear Stage 2, configuration (a): one W_K (d_k × d) copy per query
/// row, `n` back-gate steps each, copies in parallel.
pub(crate) fn score_trace(n: usize, d: usize, dk: usize, hw: &HwConfig) -> StageTrace {
    let s = &hw.scheme;
    let planes = s.cells_per_weight() as usize;
    let mut t = StageTrace::new(StageKind::Score);
    let stats = layout_stats(dk, d, planes, &hw.array, s.input_bits, true);
    for i in 0..n {
        for _ in 0..n {
            if i == 0 {
                t.add_serial(&stats);
            } else {
                t.add_parallel(&stats);
            }
        }
        t.add_bg(dk, d, planes, &hw.array, n as u64);
    }
    t.buffer_bytes = ((n * dk + n * d + n * n) as u64) * bytes_per_elem(s.input_bits);
    t
}

/// Trilinear Stage 3, configuration (b): one W_Vᵀ (d × d_k) copy per token,
/// `n` broadcast steps each, copies in parallel.
pub(crate) fn value_agg_trace(n: usize, d: usize, dk: usize, hw: &HwConfig) -> StageTrace {
    let s = &hw.scheme;
    let planes = s.cells_per_weight() as usize;
    let mut t = StageTrace::new(StageKind::ValueAgg);
    let stats = layout_stats(d, dk, planes, &hw.array, s.input_bits, true);
    for i in 0..n {
        for _ in 0..n {
            if i == 0 {
                t.add_serial(&stats);
            } else {
                t.add_parallel(&stats);
            }
        }
        t.add_bg(d, dk, planes, &hw.array, n as u64);
    }
    t.buffer_bytes = ((n * n + n * d + n * dk) as u64) * bytes_per_elem(s.input_bits);
    t
}

/// Bilinear scratch programming of a `rows × cols` operand.
pub(crate) fn program_trace(kind: StageKind, rows: usize, cols: usize, hw: &HwConfig) -> StageTrace {
    let s = &hw.scheme;
    let mut t = StageTrace::new(kind);
    t.writes_cells = (rows * cols) as u64 * u64::from(s.cells_per_weight()) * 2;
    t.write_phases = rows as u64;
    t.buffer_bytes = (rows * cols) as u64 * bytes_per_elem(s.weight_bits);
    t
}

/// Per-head stage traces for one layer.
pub(crate) fn head_plan(job: &AttentionJob, hw: &HwConfig, mode: ExecMode) -> HeadTrace {
    let (n, d, dk) = (job.n_tokens, job.d_model, job.d_k);
    let bits = hw.scheme.input_bits;
    let stages = match mode {
        ExecMode::CimTrilinear => vec![
            scaled_query_trace(n, d, dk, hw),
            score_trace(n, d, dk, hw),
            softmax_trace(n, hw.causal, bits),
            value_agg_trace(n, d, dk, hw),
        ],
        ExecMode::CimBilinear => vec![
            projection_trace(StageKind::QProj, n, d, dk, hw, mode),
            projection_trace(StageKind::KProj, n, d, dk, hw, mode),
            projection_trace(StageKind::VProj, n, d, dk, hw, mode),
            program_trace(StageKind::KProgram, dk, n, hw),
            program_trace(StageKind::VProgram, n, dk, hw),
            projection_trace(StageKind::Score, n, dk, n, hw, mode),
            softmax_trace(n, hw.causal, bits),
            projection_trace(StageKind::ValueAgg, n, n, dk, hw, mode),
        ],
        ExecMode::QuantizedDigital | ExecMode::Float => vec![
            projection_trace(StageKind::QProj, n, d, dk, hw, mode),
            projection_trace(StageKind::KProj, n, d, dk, hw, mode),
            projection_trace(StageKind::VProj, n, d, dk, hw, mode),
            projection_trace(StageKind::Score, n, dk, n, hw, mode),
            softmax_trace(n, hw.causal, bits),
            projection_trace(StageKind::ValueAgg, n, n, dk, hw, mode),
        ],
    };
    HeadTrace { stages }
}

pub(crate) fn shared_plan(job: &AttentionJob, hw: &HwConfig, mode: ExecMode, encoder: bool) -> Vec<StageTrace> {
    let (n, d) = (job.n_tokens, job.d_model);
    let bits = hw.scheme.input_bits;
    let mut v = vec![projection_trace(StageKind::OutProj, n, d, d, hw, mode)];
    if encoder {
        v.push(layernorm_trace(StageKind::Ln1, n, d, bits));
        v.push(projection_trace(StageKind::Ffn1, n, d, 4 * d, hw, mode));
        v.push(gelu_trace(n, 4 * d, hw.sfu.gelu_shifts.len(), bits));
        v.push(projection_trace(StageKind::Ffn2, n, 4 * d, d, hw, mode));
        v.push(layernorm_trace(StageKind::Ln2, n, d, bits));
    }
    v
}

/// Analytical trace for `job` in `mode`; equal to the trace a functional run
/// records for the same shapes.
pub fn plan(job: &AttentionJob, hw: &HwConfig, mode: ExecMode, encoder: bool) -> ExecTrace {
    let layer = LayerTrace {
        heads: (0..job.n_heads).map(|_| head_plan(job, hw, mode)).collect(),
        shared: shared_plan(job, hw, mode, encoder),
    };
    ExecTrace {
        mode,
        layers: vec![layer; job.n_layers],
    }
}
