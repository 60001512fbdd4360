//! Built-in acceptance suite shared by `tcim verify` and the `acceptance`
//! test target. Each criterion checks its own tolerance and wall-clock
//! budget.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;

use crate::attention::{run_trilinear_mode, AttentionJob, ExecMode, HwConfig, ModelWeights};
use crate::cost::{buffer_residency, write_volume, CostModel, Dataflow, EnergyParams};
use crate::crossbar::{trilinear_read, ArrayConfig, BackGate, CrossbarArray, Peripherals};
use crate::device::{eta_bg, fit_alpha_m, gds_full, gds_linear, DeviceParams, GvSample};
use crate::oracle::{self, naive_mhsa, rel_inf_error};
use crate::quant::{decompose_cells, recombine, QuantScheme, QuantTensor};
use crate::sfu::{FixedVec, Sfu, SfuConfig};
use crate::trace::{plan, StageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    /// Declared out of scope; never counted as a failure.
    NotReproducible,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
    pub elapsed_ms: f64,
    pub budget_ms: f64,
}

impl CriterionResult {
    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }

    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotReproducible => "N/R ",
        };
        format!(
            "[{tag}] {:>2} {:<28} {:>10.1} ms (budget {:.0} ms)  {}",
            self.id, self.name, self.elapsed_ms, self.budget_ms, self.detail
        )
    }
}

/// Knobs for fault injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Scales the sensitivity the simulated arrays apply.
    pub eta_perturbation: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { eta_perturbation: 1.0 }
    }
}

fn timed(id: u32, name: &'static str, budget: Duration, f: impl FnOnce() -> Result<String, String>) -> CriterionResult {
    let t0 = Instant::now();
    let outcome = f();
    let elapsed = t0.elapsed();
    let over = elapsed > budget;
    let (status, mut detail) = match outcome {
        Ok(d) => (if over { Status::Fail } else { Status::Pass }, d),
        Err(d) => (Status::Fail, d),
    };
    if over {
        detail.push_str("; over time budget");
    }
    CriterionResult {
        id,
        name,
        status,
        detail,
        elapsed_ms: elapsed.as_secs_f64() * 1e3,
        budget_ms: budget.as_secs_f64() * 1e3,
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn write_volume_reproduction() -> CriterionResult {
    timed(1, "write-volume", Duration::from_millis(1), || {
        let long = write_volume(512, 64, 12, 12, 8, 2);
        let short = write_volume(128, 64, 12, 12, 8, 2);
        ensure(long == 75_497_472, || format!("N=512 gave {long}"))?;
        ensure(short == 18_874_368, || format!("N=128 gave {short}"))?;
        Ok(format!("{long} and {short} cells"))
    })
}

fn small_job(rng: &mut ChaCha8Rng, max_n: usize, max_d: usize, mode: ExecMode, seed: u64) -> AttentionJob {
    let h = rng.random_range(1..=4usize);
    let dk = rng.random_range(1..=(max_d / h).max(1));
    let n = rng.random_range(1..=max_n);
    AttentionJob::new(n, dk, h, 1, mode, seed)
}

pub fn trilinear_write_freedom() -> CriterionResult {
    timed(2, "trilinear write-freedom", Duration::from_secs(10), || {
        let hw = HwConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let job = small_job(&mut rng, 12, 16, ExecMode::CimTrilinear, seed);
            let weights = ModelWeights::generate(&job);
            let out = run_trilinear_mode(&job, &weights, &hw).map_err(|e| e.to_string())?;
            let writes = out.write_log.total() + out.trace.total_writes();
            ensure(writes == 0, || format!("seed {seed}: {writes} cells written"))?;
        }
        Ok("20 jobs, 0 cells written".into())
    })
}

pub fn fused_equivalence(opts: &VerifyOptions) -> CriterionResult {
    timed(3, "fused-dataflow equivalence", Duration::from_secs(60), || {
        let hw = HwConfig {
            eta_perturbation: opts.eta_perturbation,
            ..HwConfig::ideal()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for seed in 0..200 {
            let job = small_job(&mut rng, 16, 16, ExecMode::CimTrilinear, 1000 + seed);
            let w = ModelWeights::generate(&job);
            let x = job.input();
            let got = run_trilinear_mode(&job, &w, &hw).map_err(|e| e.to_string())?.output;
            let layer = &w.layers[0];
            let heads: Vec<oracle::HeadWeights<'_>> = layer
                .heads
                .iter()
                .map(|h| oracle::HeadWeights {
                    w_q: &h.w_q,
                    w_k: &h.w_k,
                    w_v: &h.w_v,
                })
                .collect();
            let want = naive_mhsa(&x, &heads, &layer.w_o).map_err(|e| e.to_string())?;
            let err = rel_inf_error(&got, &want);
            worst = worst.max(err);
            ensure(err <= 1e-6, || {
                format!("seed {} (n={}, d_k={}, h={}): rel error {err:.3e}", job.seed, job.n_tokens, job.d_k, job.n_heads)
            })?;
        }
        Ok(format!("200 jobs, worst rel error {worst:.2e}"))
    })
}

pub fn device_identities() -> CriterionResult {
    timed(4, "device-model identities", Duration::from_secs(5), || {
        let p = DeviceParams::default();
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let g0 = p.band_lo + (p.band_hi - p.band_lo) * i as f64 / 49.0;
            let eta = eta_bg(g0, &p).map_err(|e| e.to_string())?;
            for j in 0..50 {
                let v = -1.0 + 2.0 * j as f64 / 49.0;
                let want = p.m_coeff * p.alpha * v * v;
                let got = gds_full(g0, v, &p) - gds_linear(g0, v, eta);
                let rel = if want == 0.0 { got.abs() / g0 } else { ((got - want) / want).abs() };
                worst = worst.max(rel);
            }
        }
        ensure(worst <= 1e-9, || format!("second-order residual off by {worst:.2e}"))?;
        let eta69 = eta_bg(69.0, &p).map_err(|e| e.to_string())?;
        ensure((eta69 - 0.15932).abs() <= 1e-5, || format!("eta(69 µS) = {eta69}"))?;
        let g0 = 50.0;
        let samples: Vec<GvSample> = (0..21)
            .map(|k| {
                let v_bg = -1.0 + 0.1 * k as f64;
                GvSample { v_bg, g_ds: gds_full(g0, v_bg, &p) }
            })
            .collect();
        let fit = fit_alpha_m(&samples, g0).map_err(|e| e.to_string())?;
        let ea = ((fit.alpha - p.alpha) / p.alpha).abs();
        let em = ((fit.m_coeff - p.m_coeff) / p.m_coeff).abs();
        ensure(ea <= 1e-6 && em <= 1e-6, || format!("fit gave α={}, M={}", fit.alpha, fit.m_coeff))?;
        Ok(format!("residual {worst:.1e}, eta(69)={eta69:.5}, fit err {:.1e}", ea.max(em)))
    })
}

pub fn quant_round_trip() -> CriterionResult {
    timed(5, "quantization round trip", Duration::from_secs(1), || {
        let values: Vec<i64> = (-128..=127).collect();
        let w = QuantTensor {
            data: values.clone(),
            rows: 1,
            cols: values.len(),
            scale: 1.0,
            bits: 8,
        };
        for bpc in [2, 1] {
            let d = decompose_cells(&w, bpc).map_err(|e| e.to_string())?;
            let back = recombine(&d.planes, &d.sign_plane, bpc).map_err(|e| e.to_string())?;
            let bad = back.iter().zip(&values).filter(|(a, b)| a != b).count();
            ensure(bad == 0, || format!("{bad} mismatches at {bpc} bit/cell"))?;
        }
        Ok("256 values × {2, 1} bit/cell, 0 mismatches".into())
    })
}

pub fn sfu_accuracy() -> CriterionResult {
    timed(6, "SFU accuracy", Duration::from_secs(30), || {
        let sfu = Sfu::new(SfuConfig::default()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let max_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let (mut e_sm, mut e_ln, mut e_gelu) = (0.0_f64, 0.0_f64, 0.0_f64);
        for case in 0..1000 {
            // Softmax: random length-8 int8 vectors.
            let fx = FixedVec {
                data: (0..8).map(|_| rng.random_range(-127..=127)).collect(),
                scale: rng.random_range(1.0 / 64.0..=1.0 / 16.0),
                bits: 8,
            };
            let got = sfu.softmax_pipeline(&fx).map_err(|e| e.to_string())?;
            let err = max_abs(&got.to_f64(), &oracle::float_softmax(&fx.to_f64()));
            e_sm = e_sm.max(err);
            ensure(err <= 1e-2, || format!("softmax case {case}: {err:.3e}"))?;
            let shift = 127 - fx.data.iter().max().copied().unwrap_or(0);
            let shifted = FixedVec {
                data: fx.data.iter().map(|q| q + shift).collect(),
                ..fx.clone()
            };
            let again = sfu.softmax_pipeline(&shifted).map_err(|e| e.to_string())?;
            ensure(again.data == got.data, || format!("softmax case {case}: not shift invariant"))?;

            // LayerNorm: d = 16.
            let spread = rng.random_range(0.25..4.0);
            let x: Vec<f64> = (0..16).map(|_| spread * normal.sample(&mut rng)).collect();
            let g: Vec<f64> = (0..16).map(|_| 1.0 + 0.2 * normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..16).map(|_| 0.2 * normal.sample(&mut rng)).collect();
            let fx = FixedVec::calibrated(&x, 8).map_err(|e| e.to_string())?;
            let fg = FixedVec::calibrated(&g, 8).map_err(|e| e.to_string())?;
            let fb = FixedVec::calibrated(&b, 8).map_err(|e| e.to_string())?;
            let got = sfu.layernorm_pipeline(&fx, &fg, &fb).map_err(|e| e.to_string())?;
            let want = oracle::float_layernorm(&fx.to_f64(), &fg.to_f64(), &fb.to_f64(), crate::sfu::LN_EPSILON);
            let err = max_abs(&got.to_f64(), &want);
            e_ln = e_ln.max(err);
            ensure(err <= 2e-2, || format!("layernorm case {case}: {err:.3e}"))?;

            // GELU: inputs in [−4, 4].
            let u = Uniform::new_inclusive(-4.0, 4.0).expect("range");
            let z: Vec<f64> = (0..16).map(|_| u.sample(&mut rng)).collect();
            let fz = FixedVec::calibrated(&z, 8).map_err(|e| e.to_string())?;
            let got = sfu.gelu_pipeline(&fz);
            let want: Vec<f64> = fz.to_f64().iter().map(|&v| oracle::float_gelu_sigmoid(v)).collect();
            let err = max_abs(&got.to_f64(), &want);
            e_gelu = e_gelu.max(err);
            ensure(err <= 2e-2, || format!("gelu case {case}: {err:.3e}"))?;
        }
        Ok(format!("max abs err softmax {e_sm:.1e}, layernorm {e_ln:.1e}, gelu {e_gelu:.1e}"))
    })
}

/// Planned BERT-base attention (d_k 64, 12 heads, 12 layers) at the default
/// configuration.
fn bert_plan(n: usize, mode: ExecMode) -> crate::trace::ExecTrace {
    let job = AttentionJob::new(n, 64, 12, 12, mode, 0);
    plan(&job, &HwConfig::default(), mode, false)
}

pub fn scaling_laws() -> CriterionResult {
    timed(7, "scaling laws", Duration::from_secs(10), || {
        let (t64, t128) = (bert_plan(64, ExecMode::CimTrilinear), bert_plan(128, ExecMode::CimTrilinear));
        let (r64, r128) = (t64.read_cycles_of(StageKind::Score), t128.read_cycles_of(StageKind::Score));
        ensure(r128 == 4 * r64, || format!("score read cycles {r64} → {r128}"))?;
        let (b64, b128) = (bert_plan(64, ExecMode::CimBilinear), bert_plan(128, ExecMode::CimBilinear));
        let (w64, w128) = (b64.total_writes(), b128.total_writes());
        ensure(w128 == 2 * w64, || format!("bilinear writes {w64} → {w128}"))?;
        let model = CostModel::new(EnergyParams::default(), &ArrayConfig::default());
        let mut fractions = Vec::new();
        for (n, tri, bil) in [(64, &t64, &b64), (128, &t128, &b128)] {
            let tri = model.report(tri);
            let bil = model.report(bil);
            let gap = bil.totals.energy_total - tri.totals.energy_total;
            ensure(gap > 0.0, || {
                format!(
                    "structural ratios hold (×4 reads, ×2 writes) but at N={n} bilinear {:.3e} fJ < trilinear {:.3e} fJ, so no write share of the gap exists",
                    bil.totals.energy_total, tri.totals.energy_total
                )
            })?;
            fractions.push(bil.totals.energy.array_write / gap);
        }
        ensure(fractions[1] < fractions[0], || {
            format!("write share of the energy gap did not fall: {:.4} → {:.4}", fractions[0], fractions[1])
        })?;
        Ok(format!(
            "score cycles ×{}, writes ×{}, write share of gap {:.4} → {:.4}",
            r128 / r64.max(1),
            w128 / w64.max(1),
            fractions[0],
            fractions[1]
        ))
    })
}

pub fn buffer_ratio() -> CriterionResult {
    timed(8, "buffer residency", Duration::from_millis(1), || {
        for n in [1, 7, 64, 512] {
            for d in [1, 64, 768, 1024] {
                for bytes in [1, 2, 4] {
                    let conv = buffer_residency(Dataflow::Conventional, n, d, bytes);
                    let tri = buffer_residency(Dataflow::Trilinear, n, d, bytes);
                    ensure(conv == 3 * tri, || format!("n={n}, d={d}: {conv} vs {tri}"))?;
                }
            }
        }
        Ok(format!("ratio 3 on 48 shapes; N=64, d=768 int8 → {} B", buffer_residency(Dataflow::Trilinear, 64, 768, 1)))
    })
}

pub fn baseline_cancellation() -> CriterionResult {
    timed(9, "baseline cancellation", Duration::from_secs(5), || {
        let p = DeviceParams::default();
        let scheme = QuantScheme::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..100 {
            let rows = rng.random_range(1..=64usize);
            let cols = rng.random_range(1..=64usize);
            let g0: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(p.band_lo..=p.band_hi)).collect();
            let eta = p.effective_eta();
            let xbar = CrossbarArray::new(rows, cols, g0, eta, (p.band_lo, p.band_hi)).map_err(|e| e.to_string())?;
            let periph = Peripherals::for_array(rows, &scheme, 8, 0.2, 1.0, p.band_hi, eta);
            let v_in: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..=0.2)).collect();
            let zeros = vec![0.0; cols];
            for bg in [BackGate::Broadcast(0.0), BackGate::PerColumn(&zeros)] {
                let r = trilinear_read(&xbar, &v_in, bg, &periph).map_err(|e| e.to_string())?;
                ensure(r.digital_outputs.iter().all(|&c| c == 0), || format!("case {case}: nonzero code"))?;
                ensure(r.analog_currents.iter().all(|&i| i == 0.0), || format!("case {case}: nonzero current"))?;
            }
        }
        Ok("100 arrays, exact zero".into())
    })
}

pub fn absolute_ppa() -> CriterionResult {
    CriterionResult {
        id: 10,
        name: "absolute PPA and accuracy",
        status: Status::NotReproducible,
        detail: "absolute energy/latency/area and task accuracies are not modeled; the +37.3% area ratio is only a calibration default".into(),
        elapsed_ms: 0.0,
        budget_ms: 0.0,
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CriterionResult> {
    vec![
        write_volume_reproduction(),
        trilinear_write_freedom(),
        fused_equivalence(opts),
        device_identities(),
        quant_round_trip(),
        sfu_accuracy(),
        scaling_laws(),
        buffer_ratio(),
        baseline_cancellation(),
        absolute_ppa(),
    ]
}
