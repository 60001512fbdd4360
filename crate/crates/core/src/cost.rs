//! Analytical energy, latency, area and write-volume accounting over
//! execution traces. Energies are in fJ, latencies in ns, area in units of
//! one cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionJob, ExecMode};
use crate::crossbar::ArrayConfig;
use crate::error::{Error, Result};
use crate::trace::{BgActivity, ExecTrace, StageKind, StageTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    /// fJ per cell read.
    pub read_energy_per_cell: f64,
    /// pJ per cell programmed.
    pub write_energy_per_cell: f64,
    /// ns per mux read cycle.
    pub read_latency: f64,
    /// ns per row-programming pulse.
    pub write_latency: f64,
    /// fJ per back-gate DAC conversion.
    pub dac_switch_energy: f64,
    /// fJ per back-gate line per cycle.
    pub driver_energy: f64,
    /// fF/µm.
    pub wire_cap_per_um: f64,
    /// µm; subarray rows × cell pitch when absent.
    pub bg_line_length_per_col: Option<f64>,
    pub cell_pitch_um: f64,
    /// fF per cell back gate.
    pub gate_cap_per_cell: f64,
    /// V.
    pub v_swing: f64,
    pub sfu_lut_energy: f64,
    pub sfu_add_energy: f64,
    pub sfu_mult_energy: f64,
    /// ns per SFU operation per lane.
    pub sfu_op_latency: f64,
    pub sfu_lanes: u64,
    /// fJ per byte moved through the global buffer.
    pub buffer_energy_per_byte: f64,
    /// fJ per digital multiply-accumulate.
    pub digital_mac_energy: f64,
    /// Fraction of the shorter of softmax/value-aggregation latency hidden by
    /// token pipelining, in [0, 1].
    pub overlap_factor: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            read_energy_per_cell: 1.0,
            write_energy_per_cell: 0.5,
            read_latency: 10.0,
            write_latency: 50.0,
            dac_switch_energy: 20.0,
            driver_energy: 5.0,
            wire_cap_per_um: 0.2,
            bg_line_length_per_col: None,
            cell_pitch_um: 1.0,
            gate_cap_per_cell: 0.05,
            v_swing: 1.0,
            sfu_lut_energy: 0.5,
            sfu_add_energy: 0.1,
            sfu_mult_energy: 1.0,
            sfu_op_latency: 1.0,
            sfu_lanes: 64,
            buffer_energy_per_byte: 10.0,
            digital_mac_energy: 1.0,
            overlap_factor: 0.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("read_energy_per_cell", self.read_energy_per_cell),
            ("write_energy_per_cell", self.write_energy_per_cell),
            ("read_latency", self.read_latency),
            ("write_latency", self.write_latency),
            ("dac_switch_energy", self.dac_switch_energy),
            ("driver_energy", self.driver_energy),
            ("wire_cap_per_um", self.wire_cap_per_um),
            ("cell_pitch_um", self.cell_pitch_um),
            ("gate_cap_per_cell", self.gate_cap_per_cell),
            ("v_swing", self.v_swing),
            ("sfu_lut_energy", self.sfu_lut_energy),
            ("sfu_add_energy", self.sfu_add_energy),
            ("sfu_mult_energy", self.sfu_mult_energy),
            ("sfu_op_latency", self.sfu_op_latency),
            ("buffer_energy_per_byte", self.buffer_energy_per_byte),
            ("digital_mac_energy", self.digital_mac_energy),
            ("bg_line_length_per_col", self.bg_line_length_per_col.unwrap_or(0.0)),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("energy.{name} must be nonnegative, got {v}")));
        }
        if self.write_latency <= self.read_latency {
            return Err(Error::InvalidArgument(format!(
                "write_latency ({}) must exceed read_latency ({})",
                self.write_latency, self.read_latency
            )));
        }
        if self.sfu_lanes == 0 {
            return Err(Error::InvalidArgument("energy.sfu_lanes must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_factor) {
            return Err(Error::InvalidArgument("energy.overlap_factor must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cells programmed per inference by the bilinear baseline: two operands
/// (K and V), N·d_k values each, per head and layer, split into
/// ceil(bits/bits_per_cell) cells, doubled for signed storage.
pub fn write_volume(n_tokens: u64, d_k: u64, h: u64, layers: u64, value_bits: u32, bits_per_cell: u32) -> u64 {
    2 * n_tokens * d_k * h * layers * u64::from(value_bits.div_ceil(bits_per_cell)) * 2
}

/// Energy split of the back-gate path for `cycles` updates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BgEnergy {
    pub dac: f64,
    pub driver: f64,
    pub wire: f64,
    pub gate: f64,
}

impl BgEnergy {
    pub fn total(&self) -> f64 {
        self.dac + self.driver + self.wire + self.gate
    }
}

pub fn bg_modulation_components(n_cols: u64, n_rows: u64, cycles: u64, line_length_um: f64, p: &EnergyParams) -> BgEnergy {
    let (cols, rows, cyc) = (n_cols as f64, n_rows as f64, cycles as f64);
    let v2 = p.v_swing * p.v_swing;
    BgEnergy {
        dac: cyc * cols * p.dac_switch_energy,
        driver: cyc * cols * p.driver_energy,
        wire: cyc * cols * p.wire_cap_per_um * line_length_um * v2 / 2.0,
        gate: cyc * cols * rows * p.gate_cap_per_cell * v2 / 2.0,
    }
}

/// Back-gate modulation energy (fJ). The line length comes from the
/// parameters, or `n_rows` × cell pitch when unset.
pub fn bg_modulation_energy(n_cols: u64, n_rows: u64, cycles: u64, p: &EnergyParams) -> f64 {
    let len = p.bg_line_length_per_col.unwrap_or(n_rows as f64 * p.cell_pitch_um);
    bg_modulation_components(n_cols, n_rows, cycles, len, p).total()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub array_read: f64,
    pub array_write: f64,
    /// Driver, wire and gate terms of the back-gate path.
    pub bg_modulation: f64,
    pub dac: f64,
    pub sfu: f64,
    pub buffer: f64,
    pub digital: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.array_read + self.array_write + self.bg_modulation + self.dac + self.sfu + self.buffer + self.digital
    }

    fn add(&mut self, o: &EnergyBreakdown) {
        self.array_read += o.array_read;
        self.array_write += o.array_write;
        self.bg_modulation += o.bg_modulation;
        self.dac += o.dac;
        self.sfu += o.sfu;
        self.buffer += o.buffer;
        self.digital += o.digital;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: StageKind,
    pub reads: u64,
    pub read_cycles: u64,
    pub cycles: u64,
    pub writes_cells: u64,
    pub write_phases: u64,
    pub energy: EnergyBreakdown,
    pub energy_total: f64,
    pub latency_ns: f64,
    pub sfu_latency_ns: f64,
    pub write_latency_ns: f64,
}

impl StageCost {
    fn add_counts(&mut self, o: &StageCost) {
        self.reads += o.reads;
        self.read_cycles += o.read_cycles;
        self.cycles += o.cycles;
        self.writes_cells += o.writes_cells;
        self.write_phases += o.write_phases;
        self.energy.add(&o.energy);
        self.energy_total = self.energy.total();
    }
}

/// Energy parameters bound to an array geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub energy: EnergyParams,
    pub subarray_rows: usize,
}

impl CostModel {
    pub fn new(energy: EnergyParams, array: &ArrayConfig) -> Self {
        Self {
            energy,
            subarray_rows: array.rows,
        }
    }

    fn line_length(&self) -> f64 {
        self.energy
            .bg_line_length_per_col
            .unwrap_or(self.subarray_rows as f64 * self.energy.cell_pitch_um)
    }

    fn bg(&self, a: &BgActivity) -> BgEnergy {
        bg_modulation_components(a.n_cols, a.n_rows, a.cycles, self.line_length(), &self.energy)
    }

    pub fn stage_cost(&self, t: &StageTrace) -> StageCost {
        let p = &self.energy;
        let mut e = EnergyBreakdown {
            array_read: t.cell_reads as f64 * p.read_energy_per_cell,
            array_write: t.writes_cells as f64 * p.write_energy_per_cell * 1000.0,
            sfu: t.sfu.lut_lookups as f64 * p.sfu_lut_energy + t.sfu.adds as f64 * p.sfu_add_energy + t.sfu.mults as f64 * p.sfu_mult_energy,
            buffer: t.buffer_bytes as f64 * p.buffer_energy_per_byte,
            digital: t.digital_macs as f64 * p.digital_mac_energy,
            ..EnergyBreakdown::default()
        };
        for a in &t.bg {
            let b = self.bg(a);
            e.dac += b.dac;
            e.bg_modulation += b.driver + b.wire + b.gate;
        }
        let sfu_ops = t.sfu.lut_lookups + t.sfu.adds + t.sfu.mults;
        let sfu_latency_ns = sfu_ops as f64 * p.sfu_op_latency / p.sfu_lanes as f64;
        let write_latency_ns = t.write_phases as f64 * p.write_latency;
        StageCost {
            stage: t.stage,
            reads: t.cell_reads,
            read_cycles: t.read_cycles,
            cycles: t.critical_cycles,
            writes_cells: t.writes_cells,
            write_phases: t.write_phases,
            energy_total: e.total(),
            energy: e,
            latency_ns: t.critical_cycles as f64 * p.read_latency + write_latency_ns + sfu_latency_ns,
            sfu_latency_ns,
            write_latency_ns,
        }
    }

    fn head_latency(&self, stages: &[StageCost]) -> f64 {
        let total: f64 = stages.iter().map(|s| s.latency_ns).sum();
        let of = |k: StageKind| stages.iter().filter(|s| s.stage == k).map(|s| s.latency_ns).sum::<f64>();
        total - self.energy.overlap_factor * of(StageKind::Softmax).min(of(StageKind::ValueAgg))
    }

    pub fn report(&self, trace: &ExecTrace) -> CostReport {
        let mut per_stage: BTreeMap<StageKind, StageCost> = BTreeMap::new();
        let mut order: Vec<StageKind> = Vec::new();
        let mut latency = 0.0;
        let mut push = |entry: StageCost, per_stage: &mut BTreeMap<StageKind, StageCost>| {
            match per_stage.get_mut(&entry.stage) {
                Some(acc) => {
                    acc.add_counts(&entry);
                    acc.latency_ns += entry.latency_ns;
                    acc.sfu_latency_ns += entry.sfu_latency_ns;
                    acc.write_latency_ns += entry.write_latency_ns;
                }
                None => {
                    order.push(entry.stage);
                    per_stage.insert(entry.stage, entry);
                }
            }
        };
        for layer in &trace.layers {
            let heads: Vec<Vec<StageCost>> = layer
                .heads
                .iter()
                .map(|h| h.stages.iter().map(|s| self.stage_cost(s)).collect())
                .collect();
            latency += heads.iter().map(|h| self.head_latency(h)).fold(0.0, f64::max);
            let n_stages = heads.first().map_or(0, Vec::len);
            for i in 0..n_stages {
                let column: Vec<StageCost> = heads.iter().filter_map(|h| h.get(i).cloned()).collect();
                push(aggregate_heads(&column).expect("at least one head"), &mut per_stage);
            }
            for s in &layer.shared {
                let c = self.stage_cost(s);
                latency += c.latency_ns;
                push(c, &mut per_stage);
            }
        }
        let stages: Vec<StageCost> = order.iter().map(|k| per_stage[k].clone()).collect();
        let mut energy = EnergyBreakdown::default();
        let (mut reads, mut read_cycles, mut writes_cells) = (0, 0, 0);
        for s in &stages {
            energy.add(&s.energy);
            reads += s.reads;
            read_cycles += s.read_cycles;
            writes_cells += s.writes_cells;
        }
        CostReport {
            mode: trace.mode,
            stages,
            totals: Totals {
                energy,
                energy_total: energy.total(),
                latency_ns: latency,
                reads,
                read_cycles,
                writes_cells,
            },
            head_aggregation: "latency: max over heads of per-head stage sums, summed over layers; energy: sum over heads and layers".into(),
        }
    }
}

/// Combines one stage across parallel heads: latency is the maximum,
/// energy and counts are summed.
pub fn aggregate_heads(entries: &[StageCost]) -> Result<StageCost> {
    let Some(first) = entries.first() else {
        return Err(Error::InvalidArgument("aggregate_heads needs at least one head".into()));
    };
    let mut acc = first.clone();
    for e in &entries[1..] {
        acc.add_counts(e);
        acc.latency_ns = acc.latency_ns.max(e.latency_ns);
        acc.sfu_latency_ns = acc.sfu_latency_ns.max(e.sfu_latency_ns);
        acc.write_latency_ns = acc.write_latency_ns.max(e.write_latency_ns);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub energy: EnergyBreakdown,
    pub energy_total: f64,
    pub latency_ns: f64,
    pub reads: u64,
    pub read_cycles: u64,
    pub writes_cells: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: ExecMode,
    pub stages: Vec<StageCost>,
    pub totals: Totals,
    pub head_aggregation: String,
}

pub const CSV_HEADER: &str = "mode,stage,reads,read_cycles,cycles,writes_cells,write_phases,\
e_array_read_fj,e_array_write_fj,e_bg_modulation_fj,e_dac_fj,e_sfu_fj,e_buffer_fj,e_digital_fj,e_total_fj,\
latency_ns,sfu_latency_ns,write_latency_ns";

impl CostReport {
    /// One CSV row per stage plus a `total` row, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mode = self.mode.name();
        for s in &self.stages {
            let e = &s.energy;
            writeln!(
                out,
                "{mode},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.stage, s.reads, s.read_cycles, s.cycles, s.writes_cells, s.write_phases,
                e.array_read, e.array_write, e.bg_modulation, e.dac, e.sfu, e.buffer, e.digital, s.energy_total,
                s.latency_ns, s.sfu_latency_ns, s.write_latency_ns
            )
            .expect("string write");
        }
        let t = &self.totals;
        let e = &t.energy;
        let cycles: u64 = self.stages.iter().map(|s| s.cycles).sum();
        let phases: u64 = self.stages.iter().map(|s| s.write_phases).sum();
        let sfu_lat: f64 = self.stages.iter().map(|s| s.sfu_latency_ns).sum();
        let wr_lat: f64 = self.stages.iter().map(|s| s.write_latency_ns).sum();
        writeln!(
            out,
            "{mode},total,{},{},{cycles},{},{phases},{},{},{},{},{},{},{},{},{},{sfu_lat},{wr_lat}",
            t.reads, t.read_cycles, t.writes_cells,
            e.array_read, e.array_write, e.bg_modulation, e.dac, e.sfu, e.buffer, e.digital, t.energy_total, t.latency_ns
        )
        .expect("string write");
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.stage == kind)
    }

    /// Share of total energy spent programming cells.
    pub fn write_energy_fraction(&self) -> f64 {
        if self.totals.energy_total == 0.0 {
            0.0
        } else {
            self.totals.energy.array_write / self.totals.energy_total
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataflow {
    /// X, Q and K resident between projection and score.
    Conventional,
    /// Only X resident.
    Trilinear,
}

/// Peak intermediate-matrix residency in bytes.
pub fn buffer_residency(flow: Dataflow, n_tokens: u64, d_model: u64, bytes_per_elem: u64) -> u64 {
    let matrices = match flow {
        Dataflow::Conventional => 3,
        Dataflow::Trilinear => 1,
    };
    matrices * n_tokens * d_model * bytes_per_elem
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyPlan {
    pub n_tiles: u64,
    pub pes_per_tile: u64,
    pub arrays_per_pe: u64,
    pub subarray_rows: u64,
    pub subarray_cols: u64,
    pub global_buffer_bytes: u64,
}

impl HierarchyPlan {
    pub fn total_arrays(&self) -> u64 {
        self.n_tiles * self.pes_per_tile * self.arrays_per_pe
    }

    pub fn capacity_cells(&self) -> u64 {
        self.total_arrays() * self.subarray_rows * self.subarray_cols
    }
}

pub const MIB: u64 = 1 << 20;

/// Power-of-two array count covering `capacity_cells`, grouped up to 4
/// arrays per PE and 4 PEs per tile; the buffer is `peak_buffer_bytes`
/// rounded up to whole MiB.
pub fn plan_hierarchy(capacity_cells: u64, subarray_rows: u64, subarray_cols: u64, peak_buffer_bytes: u64, max_arrays: u64) -> Result<HierarchyPlan> {
    if capacity_cells == 0 || subarray_rows == 0 || subarray_cols == 0 {
        return Err(Error::InvalidArgument("capacity and subarray dims must be positive".into()));
    }
    let needed = capacity_cells.div_ceil(subarray_rows * subarray_cols);
    let total = needed.next_power_of_two();
    if total > max_arrays {
        return Err(Error::InvalidArgument(format!(
            "{total} subarrays exceed the area ceiling of {max_arrays}"
        )));
    }
    let arrays_per_pe = total.min(4);
    let pes_per_tile = (total / arrays_per_pe).min(4);
    let n_tiles = total / (arrays_per_pe * pes_per_tile);
    Ok(HierarchyPlan {
        n_tiles,
        pes_per_tile,
        arrays_per_pe,
        subarray_rows,
        subarray_cols,
        global_buffer_bytes: peak_buffer_bytes.div_ceil(MIB).max(1) * MIB,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AreaParams {
    /// Area of one cell.
    pub cell_area: f64,
    /// Mux/ADC share per physical column, in cells.
    pub column_periph_area: f64,
    /// Back-gate DAC and driver per physical column, in cells (trilinear only).
    pub bg_driver_area: f64,
}

impl Default for AreaParams {
    fn default() -> Self {
        Self {
            cell_area: 1.0,
            column_periph_area: 64.0,
            bg_driver_area: 55.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub static_cells: u64,
    pub scratch_cells: u64,
    pub columns: u64,
    pub area: f64,
}

/// Relative array area of the attention weights (plus FFN when `encoder`).
/// Replicated crossbars of the trilinear configurations are time-multiplexed
/// onto one physical copy.
pub fn area_model(job: &AttentionJob, mode: ExecMode, cells_per_weight: u64, array: &ArrayConfig, encoder: bool, p: &AreaParams) -> AreaReport {
    let (n, d, dk, h) = (job.n_tokens as u64, job.d_model as u64, job.d_k as u64, job.n_heads as u64);
    let rows = array.rows as u64;
    // Physical columns of an r×c matrix: both signs, one column block per row tile.
    let cols_of = |r: u64, c: u64| -> u64 { 2 * r.div_ceil(rows) * c * cells_per_weight };
    let mut mats: Vec<(u64, u64)> = vec![(d, dk); 3 * h as usize];
    mats.push((d, d));
    if encoder {
        mats.push((d, 4 * d));
        mats.push((4 * d, d));
    }
    let l = job.n_layers as u64;
    let static_cells: u64 = l * mats.iter().map(|&(r, c)| r * c * cells_per_weight * 2).sum::<u64>();
    let mut columns: u64 = l * mats.iter().map(|&(r, c)| cols_of(r, c)).sum::<u64>();
    let mut scratch_cells = 0;
    if mode == ExecMode::CimBilinear {
        scratch_cells = l * h * 2 * n * dk * cells_per_weight * 2;
        columns += l * h * (cols_of(dk, n) + cols_of(n, dk));
    }
    let mut area = (static_cells + scratch_cells) as f64 * p.cell_area + columns as f64 * p.column_periph_area * p.cell_area;
    if mode == ExecMode::CimTrilinear {
        area += l as f64 * mats.iter().map(|&(r, c)| cols_of(r, c)).sum::<u64>() as f64 * p.bg_driver_area * p.cell_area;
    }
    AreaReport {
        static_cells,
        scratch_cells,
        columns,
        area,
    }
}
