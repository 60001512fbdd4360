use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use serde_json::Value;
use trilinear_cim::attention::{AttentionJob, ExecMode};
use trilinear_cim::config::ExperimentConfig;
use trilinear_cim::cost::write_volume;
use trilinear_cim::device::{gds_full, DeviceParams};
use trilinear_cim::trace::plan;

proptest! {
    #[test]
    fn write_volume_is_separable(n in 1u64..4096, dk in 1u64..256, h in 1u64..32, l in 1u64..32, bits in 1u32..=16, bpc in 1u32..=8) {
        let unit = write_volume(1, 1, 1, 1, bits, bpc);
        prop_assert_eq!(write_volume(n, dk, h, l, bits, bpc), n * dk * h * l * unit);
        prop_assert_eq!(write_volume(2 * n, dk, h, l, bits, bpc), 2 * write_volume(n, dk, h, l, bits, bpc));
    }
}

fn bert(n: usize) -> (ExperimentConfig, AttentionJob) {
    let mut cfg = ExperimentConfig::default();
    cfg.job.n_tokens = n;
    cfg.job.d_k = 64;
    cfg.job.n_heads = 12;
    cfg.job.n_layers = 2;
    let job = cfg.job.job(ExecMode::CimBilinear);
    (cfg, job)
}

#[test]
fn write_energy_separates_matched_traces() {
    let (cfg, job) = bert(64);
    let model = cfg.cost_model();
    let with = plan(&job, &cfg.hw(), ExecMode::CimBilinear, false);
    let mut without = with.clone();
    for layer in &mut without.layers {
        for head in &mut layer.heads {
            for s in &mut head.stages {
                s.writes_cells = 0;
                s.write_phases = 0;
            }
        }
    }
    let a = model.report(&with);
    let b = model.report(&without);
    assert!(a.totals.energy_total > b.totals.energy_total);
    assert!(a.totals.latency_ns > b.totals.latency_ns);
    let want = with.total_writes() as f64 * cfg.energy.write_energy_per_cell * 1000.0;
    let gap = a.totals.energy_total - b.totals.energy_total;
    assert!((gap - want).abs() <= 1e-9 * want, "{gap} vs {want}");
    assert_eq!(a.totals.energy.array_write, gap);
}

#[test]
fn totals_sum_stages_and_reports_reproduce() {
    for mode in [ExecMode::CimTrilinear, ExecMode::CimBilinear, ExecMode::QuantizedDigital] {
        let (cfg, _) = bert(32);
        let job = cfg.job.job(mode);
        let trace = plan(&job, &cfg.hw(), mode, true);
        let model = cfg.cost_model();
        let r = model.report(&trace);
        let energy: f64 = r.stages.iter().map(|s| s.energy_total).sum();
        assert!((energy - r.totals.energy_total).abs() <= 1e-9 * energy);
        assert_eq!(r.stages.iter().map(|s| s.writes_cells).sum::<u64>(), r.totals.writes_cells);
        assert_eq!(r.stages.iter().map(|s| s.reads).sum::<u64>(), r.totals.reads);
        assert_eq!(trace.total_writes(), r.totals.writes_cells);
        let again = model.report(&plan(&job, &cfg.hw(), mode, true));
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        assert_eq!(r.to_csv(), again.to_csv());
    }
}

fn tcim(args: &[&str], dir: &Path, epoch: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tcim"));
    cmd.args(args).current_dir(dir).env_remove("SOURCE_DATE_EPOCH");
    if let Some(e) = epoch {
        cmd.env("SOURCE_DATE_EPOCH", e);
    }
    cmd.output().expect("spawn tcim")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = tcim(&["run", "--out", "a"], dir.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = dir.path().join("a");
    for f in ["report.json", "report.csv", "manifest.json", "config.toml"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let report = json(&a.join("report.json"));
    assert_eq!(report["runs"][0]["mode"], "cim-trilinear");
    assert_eq!(report["runs"][0]["writes_cells"], 0);
    assert!(report["runs"][0]["accuracy"]["rel_inf_error_vs_float"].as_f64().unwrap().is_finite());

    let manifest = json(&a.join("manifest.json"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(files.contains(&"report.json") && files.contains(&"report.csv"));
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("mode,stage,"));
    assert!(csv.lines().any(|l| l.starts_with("cim-trilinear,total,")));
}

#[test]
fn bilinear_bert_write_count() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bert.toml"),
        "job.n_tokens = 128\njob.d_k = 64\njob.n_heads = 12\njob.n_layers = 12\njob.modes = [\"bilinear\", \"trilinear\"]\n",
    )
    .unwrap();
    let out = tcim(&["run", "--config", "bert.toml", "--out", "o"], dir.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("o/report.json"));
    assert_eq!(report["functional"], false);
    assert_eq!(report["runs"][0]["writes_cells"], 18_874_368u64);
    assert_eq!(report["runs"][0]["cost"]["totals"]["writes_cells"], 18_874_368u64);
    assert_eq!(report["runs"][1]["writes_cells"], 0);
}

#[test]
fn malformed_config_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[crossbar]\nrowz = 64\n").unwrap();
    let out = tcim(&["run", "--config", "bad.toml"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rowz"));

    let out = tcim(&["run", "--config", "missing.toml"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let files = ["report.json", "report.csv", "manifest.json", "config.toml"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out = tcim(&["run", "--seed", "5", "--mode", "bilinear", "--out", "x"], dir.path(), Some("1700000000"));
        assert!(out.status.success());
        snapshots.push(files.map(|f| fs::read(dir.path().join("x").join(f)).unwrap()));
    }
    for (f, (a, b)) in files.iter().zip(snapshots[0].iter().zip(&snapshots[1])) {
        assert!(a == b, "{f} differs");
    }
    assert_eq!(json(&dir.path().join("x/manifest.json"))["timestamp"], 1_700_000_000u64);
}

#[test]
fn one_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "job.n_tokens = 16\njob.modes = [\"trilinear\", \"bilinear\"]\njob.functional = false\nsweep.seq_lens = [16]\n",
    )
    .unwrap();
    assert!(tcim(&["sweep", "--config", "s.toml", "--out", "sw"], dir.path(), None).status.success());
    assert!(tcim(&["run", "--config", "s.toml", "--out", "run"], dir.path(), None).status.success());
    let sweep = json(&dir.path().join("sw/sweep.json"));
    let run = json(&dir.path().join("run/report.json"));
    let row = &sweep[0];
    assert_eq!(sweep.as_array().unwrap().len(), 1);
    assert_eq!(row["tri_energy_fj"], run["runs"][0]["cost"]["totals"]["energy_total"]);
    assert_eq!(row["tri_latency_ns"], run["runs"][0]["cost"]["totals"]["latency_ns"]);
    assert_eq!(row["bil_energy_fj"], run["runs"][1]["cost"]["totals"]["energy_total"]);
    assert_eq!(row["bil_writes_cells"], run["runs"][1]["writes_cells"]);

    fs::write(dir.path().join("empty.toml"), "[sweep]\n").unwrap();
    assert_eq!(tcim(&["sweep", "--config", "empty.toml"], dir.path(), None).status.code(), Some(2));
}

#[test]
fn fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = DeviceParams::default();
    let data: String = (0..21)
        .map(|k| {
            let v = -1.0 + 0.1 * k as f64;
            format!("{v}, {}\n", gds_full(40.0, v, &p))
        })
        .collect();
    fs::write(dir.path().join("gv.csv"), format!("v_bg, g_ds\n{data}")).unwrap();
    let out = tcim(&["fit", "gv.csv", "--out", "fit.toml"], dir.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("fit.toml")).unwrap();
    let device: toml::Value = toml::from_str(&text).unwrap();
    let alpha = device["device"]["alpha"].as_float().unwrap();
    let m = device["device"]["m_coeff"].as_float().unwrap();
    assert!((alpha - p.alpha).abs() < 1e-9 && (m - p.m_coeff).abs() < 1e-7, "{alpha} {m}");
    // The fragment loads as a config.
    ExperimentConfig::from_toml(&text).unwrap();

    fs::write(dir.path().join("two.csv"), "0, 40\n0.5, 41\n").unwrap();
    assert_eq!(tcim(&["fit", "two.csv"], dir.path(), None).status.code(), Some(2));
}

#[test]
fn verify_detects_eta_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = tcim(&["verify", "--perturb-eta", "1.01"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.contains("]  3 ")).expect("criterion 3 line");
    assert!(line.starts_with("[FAIL]"), "{line}");
}
