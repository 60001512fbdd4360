use super::{DacPolicy, Diagnostics, ExecMode, HeadWeights, HwConfig, LayerWeights};
use crate::crossbar::{dac_quantize, BackGate, MappedMatrix};
use crate::error::{Error, Result};
use crate::quant::{quantize_calibrated, QuantTensor};
use crate::sfu::{Sfu, SfuConfig, SfuKind, SfuOps};
use crate::tensor::Matrix;
use crate::trace::{bytes_per_elem, HeadTrace, StageKind, StageTrace};

/// Execution context shared by all heads of a run.
pub struct Ctx {
    pub hw: HwConfig,
    pub mode: ExecMode,
    pub sfu: Sfu,
    /// Sensitivity assumed by the digital conversion.
    pub eta_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub value: Matrix,
    pub trace: StageTrace,
    pub clip_events: u64,
    pub operands: Vec<(String, u64)>,
}

fn fingerprint(q: &QuantTensor) -> u64 {
    let mut bytes = Vec::with_capacity(q.data.len() * 8 + 24);
    bytes.extend_from_slice(&(q.rows as u64).to_le_bytes());
    bytes.extend_from_slice(&(q.cols as u64).to_le_bytes());
    bytes.extend_from_slice(&q.scale.to_bits().to_le_bytes());
    for v in &q.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::rng::fnv1a(&bytes)
}

impl Ctx {
    pub fn new(hw: &HwConfig, mode: ExecMode) -> Result<Self> {
        hw.validate()?;
        let sfu = if mode == ExecMode::Float {
            Sfu::new(SfuConfig {
                kind: SfuKind::Float,
                ..hw.sfu.clone()
            })?
        } else {
            Sfu::new(hw.sfu.clone())?
        };
        Ok(Self {
            hw: hw.clone(),
            mode,
            sfu,
            eta_bar: hw.device.effective_eta(),
        })
    }

    fn bits(&self) -> u32 {
        self.hw.scheme.input_bits
    }

    pub fn quant_act(&self, x: &Matrix) -> Result<QuantTensor> {
        quantize_calibrated(x, self.hw.scheme.input_bits, self.hw.scheme.act_scale)
    }

    pub fn quant_weight(&self, w: &Matrix) -> Result<QuantTensor> {
        quantize_calibrated(w, self.hw.scheme.weight_bits, self.hw.scheme.weight_scale)
    }

    pub fn program(&self, w: &QuantTensor) -> Result<MappedMatrix> {
        MappedMatrix::program(w, &self.hw.scheme, &self.hw.device, &self.hw.array, self.hw.eta_perturbation)
    }

    pub(crate) fn observe_act(&self, name: &str, x: &Matrix, diag: &mut Diagnostics) -> Result<Option<QuantTensor>> {
        if self.mode == ExecMode::Float {
            return Ok(None);
        }
        let q = self.quant_act(x)?;
        diag.operands.push((name.to_string(), fingerprint(&q)));
        Ok(Some(q))
    }

    fn observe_weight(&self, name: &str, w: &Matrix, ops: &mut Vec<(String, u64)>) -> Result<QuantTensor> {
        let q = self.quant_weight(w)?;
        ops.push((name.to_string(), fingerprint(&q)));
        Ok(q)
    }

    /// Static-weight product `x · w` (w is input × output) on bilinear arrays
    /// in CIM modes or the integer datapath in digital mode.
    fn project_q(&self, kind: StageKind, qx: &QuantTensor, qw: &QuantTensor) -> Result<(Matrix, StageTrace)> {
        let (n, k, m) = (qx.rows, qw.rows, qw.cols);
        if qx.cols != k {
            return Err(Error::shape("projection", k, qx.cols));
        }
        let mut t = StageTrace::new(kind);
        t.buffer_bytes = ((n * k + n * m) as u64) * bytes_per_elem(self.bits());
        let scale = qx.scale * qw.scale;
        let mut out = Matrix::zeros(n, m);
        if self.mode.is_cim() {
            let mm = self.program(qw)?;
            let unit = mm.unit_current();
            for r in 0..n {
                let read = mm.bilinear(qx.row(r), qx.bits)?;
                t.add_serial(&read.stats);
                for (o, v) in out.row_mut(r).iter_mut().zip(&read.values) {
                    *o = v / unit * scale;
                }
            }
        } else {
            for r in 0..n {
                let xr = qx.row(r);
                for c in 0..m {
                    let mut s = 0.0;
                    for (i, &xv) in xr.iter().enumerate() {
                        s += (xv as f64) * (qw.data[i * m + c] as f64);
                    }
                    out[(r, c)] = s * scale;
                }
            }
            t.digital_macs = (n * k * m) as u64;
        }
        Ok((out, t))
    }

    fn project_f(&self, kind: StageKind, x: &Matrix, w: &Matrix) -> Result<(Matrix, StageTrace)> {
        let (n, k, m) = (x.rows(), w.rows(), w.cols());
        let mut t = StageTrace::new(kind);
        t.buffer_bytes = ((n * k + n * m) as u64) * bytes_per_elem(self.bits());
        t.digital_macs = (n * k * m) as u64;
        Ok((x.matmul(w)?, t))
    }

    /// `x · w`, or `x · wᵀ` when `transpose` is set.
    pub(crate) fn project(&self, kind: StageKind, x: &Matrix, name: &str, w: &Matrix, transpose: bool, diag: &mut Diagnostics) -> Result<(Matrix, StageTrace)> {
        if self.mode == ExecMode::Float {
            let w = if transpose { w.transpose() } else { w.clone() };
            return self.project_f(kind, x, &w);
        }
        let qx = self.quant_act(x)?;
        let qw = self.observe_weight(name, w, &mut diag.operands)?;
        let qw = if transpose { qw.transpose() } else { qw };
        self.project_q(kind, &qx, &qw)
    }

    fn softmax_rows(&self, s: &Matrix) -> Result<(Matrix, StageTrace)> {
        let n = s.rows();
        let mut p = Matrix::zeros(n, s.cols());
        let mut t = StageTrace::new(StageKind::Softmax);
        for i in 0..n {
            let len = if self.hw.causal { i + 1 } else { s.cols() };
            let row = self.sfu.softmax(&s.row(i)[..len], self.bits())?;
            p.row_mut(i)[..len].copy_from_slice(&row);
            t.sfu.merge(&SfuOps::softmax(len));
        }
        t.buffer_bytes = 2 * (n * s.cols()) as u64 * bytes_per_elem(self.bits());
        Ok((p, t))
    }

    pub(crate) fn run_head(&self, x: &Matrix, qx: Option<&QuantTensor>, w: &HeadWeights, dk: usize) -> Result<(Matrix, HeadTrace, Diagnostics)> {
        match (self.mode, qx) {
            (ExecMode::Float, _) => self.head_float(x, w, dk),
            (ExecMode::CimTrilinear, Some(qx)) => self.head_trilinear(qx, w),
            (ExecMode::CimBilinear, Some(qx)) => self.head_bilinear(qx, w, dk),
            (ExecMode::QuantizedDigital, Some(qx)) => self.head_digital(qx, w, dk),
            _ => Err(Error::InvalidArgument("quantized modes need a quantized input".into())),
        }
    }

    fn head_float(&self, x: &Matrix, w: &HeadWeights, dk: usize) -> Result<(Matrix, HeadTrace, Diagnostics)> {
        let (q, tq) = self.project_f(StageKind::QProj, x, &w.w_q.transpose())?;
        let (k, tk) = self.project_f(StageKind::KProj, x, &w.w_k.transpose())?;
        let (v, tv) = self.project_f(StageKind::VProj, x, &w.w_v.transpose())?;
        let r1 = q.scale(1.0 / (dk as f64).sqrt());
        let (s, ts) = self.project_f(StageKind::Score, &r1, &k.transpose())?;
        let (p, tp) = self.softmax_rows(&s)?;
        let (o, to) = self.project_f(StageKind::ValueAgg, &p, &v)?;
        Ok((o, HeadTrace { stages: vec![tq, tk, tv, ts, tp, to] }, Diagnostics::default()))
    }

    fn head_digital(&self, qx: &QuantTensor, w: &HeadWeights, dk: usize) -> Result<(Matrix, HeadTrace, Diagnostics)> {
        let mut diag = Diagnostics::default();
        let qwq = self.observe_weight("w_q", &w.w_q, &mut diag.operands)?;
        let qwk = self.observe_weight("w_k", &w.w_k, &mut diag.operands)?;
        let qwv = self.observe_weight("w_v", &w.w_v, &mut diag.operands)?;
        let (q, tq) = self.project_q(StageKind::QProj, qx, &qwq.transpose())?;
        let (k, tk) = self.project_q(StageKind::KProj, qx, &qwk.transpose())?;
        let (v, tv) = self.project_q(StageKind::VProj, qx, &qwv.transpose())?;
        let qr1 = self.quant_act(&q.scale(1.0 / (dk as f64).sqrt()))?;
        let (s, ts) = self.project_q(StageKind::Score, &qr1, &self.quant_act(&k)?.transpose())?;
        let (p, tp) = self.softmax_rows(&s)?;
        let (o, to) = self.project_q(StageKind::ValueAgg, &self.quant_act(&p)?, &self.quant_act(&v)?)?;
        Ok((o, HeadTrace { stages: vec![tq, tk, tv, ts, tp, to] }, diag))
    }

    fn program_scratch(&self, kind: StageKind, value: &Matrix) -> Result<(MappedMatrix, StageTrace)> {
        let q = quantize_calibrated(value, self.hw.scheme.weight_bits, None)?;
        let mm = self.program(&q)?;
        let mut t = StageTrace::new(kind);
        t.writes_cells = mm.cells_programmed();
        t.write_phases = q.rows as u64;
        t.buffer_bytes = (q.rows * q.cols) as u64 * bytes_per_elem(self.hw.scheme.weight_bits);
        Ok((mm, t))
    }

    fn read_scratch(&self, kind: StageKind, mm: &MappedMatrix, qx: &QuantTensor) -> Result<(Matrix, StageTrace)> {
        let (n, m) = (qx.rows, mm.cols());
        let mut t = StageTrace::new(kind);
        t.buffer_bytes = ((n * mm.rows() + n * m) as u64) * bytes_per_elem(self.bits());
        let scale = qx.scale * mm.weight_scale() / mm.unit_current();
        let mut out = Matrix::zeros(n, m);
        for r in 0..n {
            let read = mm.bilinear(qx.row(r), qx.bits)?;
            t.add_serial(&read.stats);
            for (o, v) in out.row_mut(r).iter_mut().zip(&read.values) {
                *o = v * scale;
            }
        }
        Ok((out, t))
    }

    /// Compute-write-compute: K and V are programmed into scratch arrays
    /// before the score and value products.
    fn head_bilinear(&self, qx: &QuantTensor, w: &HeadWeights, dk: usize) -> Result<(Matrix, HeadTrace, Diagnostics)> {
        let mut diag = Diagnostics::default();
        let qwq = self.observe_weight("w_q", &w.w_q, &mut diag.operands)?;
        let qwk = self.observe_weight("w_k", &w.w_k, &mut diag.operands)?;
        let qwv = self.observe_weight("w_v", &w.w_v, &mut diag.operands)?;
        let (q, tq) = self.project_q(StageKind::QProj, qx, &qwq.transpose())?;
        let (k, tk) = self.project_q(StageKind::KProj, qx, &qwk.transpose())?;
        let (v, tv) = self.project_q(StageKind::VProj, qx, &qwv.transpose())?;
        let (k_arr, tkp) = self.program_scratch(StageKind::KProgram, &k.transpose())?;
        let (v_arr, tvp) = self.program_scratch(StageKind::VProgram, &v)?;
        let qr1 = self.quant_act(&q.scale(1.0 / (dk as f64).sqrt()))?;
        let (s, ts) = self.read_scratch(StageKind::Score, &k_arr, &qr1)?;
        let (p, tp) = self.softmax_rows(&s)?;
        let (o, to) = self.read_scratch(StageKind::ValueAgg, &v_arr, &self.quant_act(&p)?)?;
        let stages = vec![tq, tk, tv, tkp, tvp, ts, tp, to];
        Ok((o, HeadTrace { stages }, diag))
    }

    fn head_trilinear(&self, qx: &QuantTensor, w: &HeadWeights) -> Result<(Matrix, HeadTrace, Diagnostics)> {
        let mut diag = Diagnostics::default();
        let s1 = stage1_scaled_query(self, qx, &w.w_q).map_err(|e| e.in_stage("scaled-query"))?;
        let s2 = stage2_score(self, &s1.value, &w.w_k, qx).map_err(|e| e.in_stage("score"))?;
        let (p, tp) = self.softmax_rows(&s2.value).map_err(|e| e.in_stage("softmax"))?;
        let s3 = stage3_value_agg(self, &p, qx, &w.w_v).map_err(|e| e.in_stage("value-agg"))?;
        let out = s3.value.clone();
        let mut stages = Vec::with_capacity(4);
        for s in [s1, s2, s3] {
            diag.clip_events += s.clip_events;
            diag.operands.extend(s.operands);
            stages.push(s.trace);
        }
        stages.insert(2, tp);
        Ok((out, HeadTrace { stages }, diag))
    }

    fn layernorm_rows(&self, kind: StageKind, x: &Matrix, gamma: &[f64], beta: &[f64]) -> Result<(Matrix, StageTrace)> {
        let (n, d) = x.shape();
        let mut y = Matrix::zeros(n, d);
        let mut t = StageTrace::new(kind);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(&self.sfu.layernorm(x.row(r), gamma, beta, self.bits())?);
            t.sfu.merge(&SfuOps::layernorm(d));
        }
        t.buffer_bytes = 2 * (n * d) as u64 * bytes_per_elem(self.bits());
        Ok((y, t))
    }

    fn gelu_rows(&self, x: &Matrix) -> Result<(Matrix, StageTrace)> {
        let (n, w) = x.shape();
        let mut y = Matrix::zeros(n, w);
        let mut t = StageTrace::new(StageKind::Gelu);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(&self.sfu.gelu(x.row(r), self.bits())?);
            t.sfu.merge(&SfuOps::gelu(w, self.hw.sfu.gelu_shifts.len()));
        }
        t.buffer_bytes = 2 * (n * w) as u64 * bytes_per_elem(self.bits());
        Ok((y, t))
    }

    /// Residual + LN around the attention output, then the FFN sublayer.
    pub(crate) fn encoder_tail(&self, x: &Matrix, attn: &Matrix, layer: &LayerWeights, shared: &mut Vec<StageTrace>, diag: &mut Diagnostics) -> Result<Matrix> {
        let (z, t) = self.layernorm_rows(StageKind::Ln1, &x.add(attn)?, &layer.ln1_gamma, &layer.ln1_beta)?;
        shared.push(t);
        let (h, t) = self.project(StageKind::Ffn1, &z, "w1", &layer.w1, false, diag)?;
        shared.push(t);
        let (g, t) = self.gelu_rows(&h)?;
        shared.push(t);
        let (f, t) = self.project(StageKind::Ffn2, &g, "w2", &layer.w2, false, diag)?;
        shared.push(t);
        let (y, t) = self.layernorm_rows(StageKind::Ln2, &z.add(&f)?, &layer.ln2_gamma, &layer.ln2_beta)?;
        shared.push(t);
        Ok(y)
    }
}

/// DAC voltages for a back-gate operand, scaled so its largest magnitude maps
/// to v_max; returns the voltages (row-major) and the real value per volt.
fn bg_voltages(ctx: &Ctx, q: &QuantTensor) -> (Vec<f64>, f64) {
    let v_max = ctx.hw.array.dac_v_max;
    let max = q.data.iter().map(|v| v.abs()).max().unwrap_or(0) as f64 * q.scale;
    let per_volt = if max > 0.0 { max / v_max } else { 1.0 };
    let volts = q
        .data
        .iter()
        .map(|&v| dac_quantize(v as f64 * q.scale / per_volt, ctx.hw.scheme.dac_bits, v_max))
        .collect();
    (volts, per_volt)
}

/// Stage 1: X rows through W_Qᵀ with a static back gate carrying 1/√d_k.
pub fn stage1_scaled_query(ctx: &Ctx, qx: &QuantTensor, w_q: &Matrix) -> Result<StageOutput> {
    let (dk, d) = w_q.shape();
    if qx.cols != d {
        return Err(Error::shape("stage 1 input", d, qx.cols));
    }
    let mut operands = Vec::new();
    let qw = ctx.observe_weight("w_q", w_q, &mut operands)?;
    let mm = ctx.program(&qw.transpose())?;
    let p = *mm.peripherals();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let target = inv_sqrt / ctx.eta_bar;
    let mut clip_events = 0;
    let (v_bg, residual) = if target > p.dac_v_max {
        if ctx.hw.dac_policy == DacPolicy::Strict {
            return Err(Error::DacRange {
                required: target,
                v_max: p.dac_v_max,
            });
        }
        clip_events += 1;
        let v = dac_quantize(p.dac_v_max, p.dac_bits, p.dac_v_max);
        (v, inv_sqrt / (ctx.eta_bar * v))
    } else {
        (dac_quantize(target, p.dac_bits, p.dac_v_max), 1.0)
    };
    let scale = qx.scale * qw.scale / mm.unit_current() * residual;
    let n = qx.rows;
    let mut value = Matrix::zeros(n, dk);
    let mut trace = StageTrace::new(StageKind::ScaledQuery);
    for r in 0..n {
        let reads = mm.trilinear_sweep(qx.row(r), qx.bits, &[BackGate::Broadcast(v_bg)])?;
        trace.add_serial(&reads[0].stats);
        clip_events += reads[0].stats.clip_events;
        for (o, v) in value.row_mut(r).iter_mut().zip(&reads[0].values) {
            *o = v * scale;
        }
    }
    trace.buffer_bytes = ((n * d + n * dk) as u64) * bytes_per_elem(ctx.bits());
    Ok(StageOutput {
        value,
        trace,
        clip_events,
        operands,
    })
}

/// Stage 2, configuration (a): W_K stored, scaled-query rows in, token
/// vectors X[j] on the back gates; each crossbar sums its columns.
pub fn stage2_score(ctx: &Ctx, r1: &Matrix, w_k: &Matrix, qx: &QuantTensor) -> Result<StageOutput> {
    let (dk, d) = w_k.shape();
    let n = qx.rows;
    if r1.shape() != (n, dk) {
        return Err(Error::shape("stage 2 scaled query", format!("({n}, {dk})"), format!("{:?}", r1.shape())));
    }
    if qx.cols != d {
        return Err(Error::shape("stage 2 back-gate operand", d, qx.cols));
    }
    let mut operands = Vec::new();
    let qr1 = ctx.quant_act(r1)?;
    let qw = ctx.observe_weight("w_k", w_k, &mut operands)?;
    let mm = ctx.program(&qw)?;
    let (volts, per_volt) = bg_voltages(ctx, qx);
    let zeros = vec![0.0; d];
    let scale = qr1.scale * qw.scale * per_volt / (mm.unit_current() * ctx.eta_bar);
    let mut value = Matrix::zeros(n, n);
    let mut trace = StageTrace::new(StageKind::Score);
    let mut clip_events = 0;
    for i in 0..n {
        let bgs: Vec<BackGate<'_>> = (0..n)
            .map(|j| {
                if ctx.hw.causal && j > i {
                    BackGate::PerColumn(&zeros)
                } else {
                    BackGate::PerColumn(&volts[j * d..(j + 1) * d])
                }
            })
            .collect();
        let reads = mm.trilinear_sweep(qr1.row(i), qr1.bits, &bgs)?;
        for (j, read) in reads.iter().enumerate() {
            if i == 0 {
                trace.add_serial(&read.stats);
            } else {
                trace.add_parallel(&read.stats);
            }
            clip_events += read.stats.clip_events;
            value[(i, j)] = read.values.iter().sum::<f64>() * scale;
        }
        trace.add_bg(dk, d, mm.planes(), &ctx.hw.array, n as u64);
    }
    trace.buffer_bytes = ((n * dk + n * d + n * n) as u64) * bytes_per_elem(ctx.bits());
    Ok(StageOutput {
        value,
        trace,
        clip_events,
        operands,
    })
}

/// Stage 3, configuration (b): W_Vᵀ stored in every crossbar, token rows in,
/// score entries broadcast on the back gates; crossbars are summed.
pub fn stage3_value_agg(ctx: &Ctx, score: &Matrix, qx: &QuantTensor, w_v: &Matrix) -> Result<StageOutput> {
    let (dk, d) = w_v.shape();
    let n = qx.rows;
    if score.shape() != (n, n) {
        return Err(Error::shape("stage 3 score", format!("({n}, {n})"), format!("{:?}", score.shape())));
    }
    if qx.cols != d {
        return Err(Error::shape("stage 3 input", d, qx.cols));
    }
    let mut operands = Vec::new();
    let qp = ctx.quant_act(score)?;
    let qw = ctx.observe_weight("w_v", w_v, &mut operands)?;
    let mm = ctx.program(&qw.transpose())?;
    let (volts, per_volt) = bg_voltages(ctx, &qp);
    let scale = qx.scale * qw.scale * per_volt / (mm.unit_current() * ctx.eta_bar);
    let mut value = Matrix::zeros(n, dk);
    let mut trace = StageTrace::new(StageKind::ValueAgg);
    let mut clip_events = 0;
    for i in 0..n {
        let bgs: Vec<BackGate<'_>> = (0..n)
            .map(|r| BackGate::Broadcast(if ctx.hw.causal && i > r { 0.0 } else { volts[r * n + i] }))
            .collect();
        let reads = mm.trilinear_sweep(qx.row(i), qx.bits, &bgs)?;
        for (r, read) in reads.iter().enumerate() {
            if i == 0 {
                trace.add_serial(&read.stats);
            } else {
                trace.add_parallel(&read.stats);
            }
            clip_events += read.stats.clip_events;
            for (o, v) in value.row_mut(r).iter_mut().zip(&read.values) {
                *o += v * scale;
            }
        }
        trace.add_bg(d, dk, mm.planes(), &ctx.hw.array, n as u64);
    }
    trace.buffer_bytes = ((n * n + n * d + n * dk) as u64) * bytes_per_elem(ctx.bits());
    Ok(StageOutput {
        value,
        trace,
        clip_events,
        operands,
    })
}
