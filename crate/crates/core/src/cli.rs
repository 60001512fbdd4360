//! `tcim` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{run_encoder_block, run_mode, run_reference_attention, AttentionJob, Ctx, ExecMode, ModelWeights};
use crate::config::ExperimentConfig;
use crate::cost::{area_model, buffer_residency, plan_hierarchy, AreaReport, CostReport, Dataflow, HierarchyPlan, CSV_HEADER};
use crate::device::{fit_alpha_m, load_gv_samples};
use crate::error::{Error, FitError, Result};
use crate::oracle::rel_inf_error;
use crate::trace::{bytes_per_elem, plan, ExecTrace, StageKind};
use crate::verify::{self, VerifyOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SIM: u8 = 3;

/// Subarray count above which `plan_hierarchy` refuses a design.
pub const AREA_CEILING_ARRAYS: u64 = 1 << 24;

#[derive(Debug, Parser)]
#[command(name = "tcim", version, about = "Trilinear compute-in-memory attention simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate or plan the configured job and write cost and error reports.
    Run(RunArgs),
    /// Evaluate the cross product of the sweep axes analytically.
    Sweep(CommonArgs),
    /// Run the built-in acceptance suite.
    Verify(VerifyArgs),
    /// Fit α and M to back-gate transfer data.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// digital, bilinear, trilinear or float; replaces job.modes.
    #[arg(long)]
    pub mode: Option<ExecMode>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dump pre-ADC column currents of the first head's query array.
    #[arg(long)]
    pub debug_currents: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Scale the simulated back-gate sensitivity (fault injection).
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub perturb_eta: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Two-column v_bg, g_ds file.
    pub data: PathBuf,
    /// Zero-bias conductance in µS; taken from the v_bg = 0 sample when absent.
    #[arg(long)]
    pub g0: Option<f64>,
    /// Write the fitted [device] fragment here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) => EXIT_CONFIG,
        Error::Fit(FitError::Underdetermined(_)) => EXIT_CONFIG,
        _ => EXIT_SIM,
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a).map(|_| EXIT_OK),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| EXIT_OK),
        Command::Verify(a) => Ok(cmd_verify(&a)),
        Command::Fit(a) => cmd_fit(&a).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.job.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.job.modes = vec![mode];
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct Accuracy {
    pub rel_inf_error_vs_float: f64,
    pub clip_events: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeRun {
    pub mode: ExecMode,
    pub writes_cells: u64,
    pub accuracy: Option<Accuracy>,
    pub cost: CostReport,
    pub area: AreaReport,
    pub hierarchy: HierarchyPlan,
    pub buffer_residency_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobSummary {
    pub n_tokens: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub causal: bool,
    pub encoder: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub functional: bool,
    pub job: JobSummary,
    pub runs: Vec<ModeRun>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER},rel_err_vs_float\n");
        for r in &self.runs {
            let err = r
                .accuracy
                .as_ref()
                .map_or(String::new(), |a| a.rel_inf_error_vs_float.to_string());
            for line in r.cost.csv_rows().lines() {
                let is_total = line.split(',').nth(1) == Some("total");
                out.push_str(line);
                out.push(',');
                if is_total {
                    out.push_str(&err);
                }
                out.push('\n');
            }
        }
        out
    }
}

fn sim_err(mode: ExecMode) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(mode.name()),
    }
}

fn evaluate(cfg: &ExperimentConfig, mode: ExecMode, functional: bool) -> Result<(ExecTrace, Option<Accuracy>, u64)> {
    let hw = cfg.hw();
    let job = cfg.job.job(mode);
    if !functional {
        let trace = plan(&job, &hw, mode, cfg.job.encoder);
        let writes = trace.total_writes();
        return Ok((trace, None, writes));
    }
    let weights = ModelWeights::generate(&job);
    let run = if cfg.job.encoder { run_encoder_block } else { run_mode };
    let outcome = run(&job, &weights, &hw).map_err(sim_err(mode))?;
    let reference = if cfg.job.encoder || cfg.job.causal {
        let float_job = AttentionJob { mode: ExecMode::Float, ..job.clone() };
        run(&float_job, &weights, &hw).map_err(sim_err(ExecMode::Float))?.output
    } else {
        run_reference_attention(&job, &weights)?
    };
    let accuracy = Accuracy {
        rel_inf_error_vs_float: rel_inf_error(&outcome.output, &reference),
        clip_events: outcome.diagnostics.clip_events,
    };
    Ok((outcome.trace, Some(accuracy), outcome.write_log.total()))
}

pub fn build_report(cfg: &ExperimentConfig) -> Result<RunReport> {
    let functional = cfg.job.is_functional();
    let model = cfg.cost_model();
    let runs = cfg
        .job
        .modes
        .iter()
        .map(|&mode| {
            let (trace, accuracy, writes_cells) = evaluate(cfg, mode, functional)?;
            let job = cfg.job.job(mode);
            let area = area_model(&job, mode, u64::from(cfg.quant.cells_per_weight()), &cfg.crossbar, cfg.job.encoder, &cfg.area);
            let flow = if mode == ExecMode::CimTrilinear { Dataflow::Trilinear } else { Dataflow::Conventional };
            let residency = buffer_residency(flow, job.n_tokens as u64, job.d_model as u64, bytes_per_elem(cfg.quant.input_bits));
            let hierarchy = plan_hierarchy(
                area.static_cells + area.scratch_cells,
                cfg.crossbar.rows as u64,
                cfg.crossbar.cols as u64,
                residency,
                AREA_CEILING_ARRAYS,
            )
            .map_err(sim_err(mode))?;
            Ok(ModeRun {
                mode,
                writes_cells,
                accuracy,
                cost: model.report(&trace),
                area,
                hierarchy,
                buffer_residency_bytes: residency,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        tool: "tcim",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.job.seed,
        functional,
        job: JobSummary {
            n_tokens: cfg.job.n_tokens,
            d_model: cfg.job.d_k * cfg.job.n_heads,
            d_k: cfg.job.d_k,
            n_heads: cfg.job.n_heads,
            n_layers: cfg.job.n_layers,
            causal: cfg.job.causal,
            encoder: cfg.job.encoder,
        },
        runs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    /// Unix seconds; SOURCE_DATE_EPOCH when set.
    pub timestamp: u64,
    pub files: Vec<FileEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

/// Writes `files` into `dir` followed by a manifest listing them.
fn write_outputs(dir: &Path, command: &'static str, cfg: &ExperimentConfig, files: Vec<(String, Vec<u8>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config_text = cfg.to_toml();
    let mut entries = Vec::new();
    let all = std::iter::once(("config.toml".to_string(), config_text.clone().into_bytes())).chain(files);
    for (name, bytes) in all {
        fs::write(dir.join(&name), &bytes)?;
        entries.push(FileEntry {
            name,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        tool: "tcim",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.job.seed,
        timestamp: timestamp(),
        files: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn debug_currents(cfg: &ExperimentConfig) -> Result<Option<Vec<u8>>> {
    let Some(&mode) = cfg.job.modes.iter().find(|m| m.is_cim()) else {
        return Ok(None);
    };
    let job = cfg.job.job(mode);
    let weights = ModelWeights::generate(&job);
    let ctx = Ctx::new(&cfg.hw(), mode)?;
    let qx = ctx.quant_act(&job.input())?;
    let qw = ctx.quant_weight(&weights.layers[0].heads[0].w_q.transpose())?;
    let mm = ctx.program(&qw)?;
    let mut out = String::from("token,tile,sign,bit,phys_col,current_ua,adc_code,full_scale_ua\n");
    for (token, row) in (0..qx.rows).map(|r| (r, qx.row(r))) {
        for s in mm.probe_currents(row, qx.bits)? {
            out.push_str(&format!(
                "{token},{},{},{},{},{},{},{}\n",
                s.tile, s.sign, s.bit, s.phys_col, s.current, s.code, s.full_scale
            ));
        }
    }
    Ok(Some(out.into_bytes()))
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let cfg = load_config(&args.common)?;
    let report = build_report(&cfg)?;
    let mut files = Vec::new();
    if cfg.output.json {
        let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
        json.push(b'\n');
        files.push(("report.json".to_string(), json));
    }
    if cfg.output.csv {
        files.push(("report.csv".to_string(), report.to_csv().into_bytes()));
    }
    if args.debug_currents {
        match debug_currents(&cfg)? {
            Some(csv) => files.push(("currents.csv".to_string(), csv)),
            None => log::warn!("--debug-currents ignored: no CIM mode selected"),
        }
    }
    write_outputs(&cfg.output.dir, "run", &cfg, files)?;
    for r in &report.runs {
        let err = r
            .accuracy
            .as_ref()
            .map_or("n/a".to_string(), |a| format!("{:.3e}", a.rel_inf_error_vs_float));
        println!(
            "{:<16} energy {:.4e} fJ  latency {:.4e} ns  writes {}  rel err {err}",
            r.mode.name(),
            r.cost.totals.energy_total,
            r.cost.totals.latency_ns,
            r.writes_cells
        );
    }
    info!("reports written to {}", cfg.output.dir.display());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub n_tokens: usize,
    pub subarray: usize,
    pub bits_per_cell: u32,
    pub adc_bits: u32,
    pub tri_energy_fj: f64,
    pub tri_latency_ns: f64,
    pub tri_writes_cells: u64,
    pub tri_score_read_cycles: u64,
    pub bil_energy_fj: f64,
    pub bil_latency_ns: f64,
    pub bil_writes_cells: u64,
    pub bil_write_energy_fj: f64,
    /// Trilinear over bilinear.
    pub energy_ratio: f64,
    pub latency_ratio: f64,
}

pub const SWEEP_HEADER: &str = "index,n_tokens,subarray,bits_per_cell,adc_bits,tri_energy_fj,tri_latency_ns,\
tri_writes_cells,tri_score_read_cycles,bil_energy_fj,bil_latency_ns,bil_writes_cells,bil_write_energy_fj,energy_ratio,latency_ratio";

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.index,
            self.n_tokens,
            self.subarray,
            self.bits_per_cell,
            self.adc_bits,
            self.tri_energy_fj,
            self.tri_latency_ns,
            self.tri_writes_cells,
            self.tri_score_read_cycles,
            self.bil_energy_fj,
            self.bil_latency_ns,
            self.bil_writes_cells,
            self.bil_write_energy_fj,
            self.energy_ratio,
            self.latency_ratio
        )
    }
}

/// Configs for every sweep point, in cross-product order (sequence length
/// outermost).
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let sweep = match &cfg.sweep {
        Some(s) if !s.is_empty() => s,
        _ => return Err(Error::Config("sweep section is missing or has no axes".into())),
    };
    let seqs = if sweep.seq_lens.is_empty() { vec![cfg.job.n_tokens] } else { sweep.seq_lens.clone() };
    let subs = if sweep.subarray_sizes.is_empty() { vec![cfg.crossbar.rows] } else { sweep.subarray_sizes.clone() };
    let pairs = if sweep.cell_adc.is_empty() {
        vec![(cfg.quant.bits_per_cell, cfg.quant.adc_bits)]
    } else {
        sweep.cell_adc.clone()
    };
    let mut out = Vec::new();
    for &n in &seqs {
        for &s in &subs {
            for &(bpc, adc) in &pairs {
                let mut p = cfg.clone();
                p.job.n_tokens = n;
                p.crossbar.rows = s;
                p.crossbar.cols = s;
                p.quant.bits_per_cell = bpc;
                p.quant.adc_bits = adc;
                p.sweep = None;
                p.validate()?;
                out.push(p);
            }
        }
    }
    Ok(out)
}

pub fn sweep_rows(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let points = sweep_points(cfg)?;
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let model = p.cost_model();
            let eval = |mode: ExecMode| {
                let trace = plan(&p.job.job(mode), &p.hw(), mode, p.job.encoder);
                (model.report(&trace), trace)
            };
            let (tri, tri_trace) = eval(ExecMode::CimTrilinear);
            let (bil, _) = eval(ExecMode::CimBilinear);
            SweepRow {
                index,
                n_tokens: p.job.n_tokens,
                subarray: p.crossbar.rows,
                bits_per_cell: p.quant.bits_per_cell,
                adc_bits: p.quant.adc_bits,
                tri_energy_fj: tri.totals.energy_total,
                tri_latency_ns: tri.totals.latency_ns,
                tri_writes_cells: tri.totals.writes_cells,
                tri_score_read_cycles: tri_trace.read_cycles_of(StageKind::Score),
                bil_energy_fj: bil.totals.energy_total,
                bil_latency_ns: bil.totals.latency_ns,
                bil_writes_cells: bil.totals.writes_cells,
                bil_write_energy_fj: bil.totals.energy.array_write,
                energy_ratio: tri.totals.energy_total / bil.totals.energy_total,
                latency_ratio: tri.totals.latency_ns / bil.totals.latency_ns,
            }
        })
        .collect())
}

pub fn cmd_sweep(args: &CommonArgs) -> Result<Vec<SweepRow>> {
    let cfg = load_config(args)?;
    let rows = sweep_rows(&cfg)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let mut files = Vec::new();
    if cfg.output.json {
        let mut json = serde_json::to_vec_pretty(&rows).expect("sweep serializes");
        json.push(b'\n');
        files.push(("sweep.json".to_string(), json));
    }
    if cfg.output.csv {
        files.push(("sweep.csv".to_string(), csv.clone().into_bytes()));
    }
    write_outputs(&cfg.output.dir, "sweep", &cfg, files)?;
    print!("{csv}");
    Ok(rows)
}

pub fn cmd_verify(args: &VerifyArgs) -> u8 {
    let opts = VerifyOptions {
        eta_perturbation: args.perturb_eta,
    };
    let results = verify::run_all(&opts);
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        println!("all criteria passed");
        EXIT_OK
    } else {
        for r in &failed {
            eprintln!("criterion {} ({}) failed: {}", r.id, r.name, r.detail);
        }
        EXIT_VERIFY
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<String> {
    let samples = load_gv_samples(&args.data)?;
    let g0 = match args.g0 {
        Some(g) => g,
        None => samples
            .iter()
            .find(|s| s.v_bg == 0.0)
            .map(|s| s.g_ds)
            .ok_or_else(|| Error::Config("no v_bg = 0 sample; pass --g0".into()))?,
    };
    let fit = fit_alpha_m(&samples, g0)?;
    let text = format!(
        "# fitted from {} samples at g0 = {g0} µS; residual_norm = {:e}\n[device]\nalpha = {:?}\nm_coeff = {:?}\n",
        samples.len(),
        fit.residual_norm,
        fit.alpha,
        fit.m_coeff
    );
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(text)
}
