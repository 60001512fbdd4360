//! Per-layer weight sets: seeded generation and a flat binary format.
//!
//! The binary file is a sequence of little-endian f32 values, row-major; the
//! text sidecar lists one tensor per line as `name rows cols` in file order.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AttentionJob;
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, INPUTS, WEIGHTS};
use crate::tensor::Matrix;

/// Projection weights of one head, each d_k × d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// d × d
    pub w_o: Matrix,
    /// d × 4d
    pub w1: Matrix,
    /// 4d × d
    pub w2: Matrix,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl LayerWeights {
    pub fn d_model(&self) -> usize {
        self.w_o.rows()
    }

    pub fn validate(&self, job: &AttentionJob) -> Result<()> {
        let (d, dk) = (job.d_model, job.d_k);
        if self.heads.len() != job.n_heads {
            return Err(Error::shape("layer heads", job.n_heads, self.heads.len()));
        }
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != (dk, d) {
                    return Err(Error::shape("head projection", format!("({dk}, {d})"), format!("{:?}", w.shape())));
                }
            }
        }
        for (name, m, want) in [
            ("w_o", &self.w_o, (d, d)),
            ("w1", &self.w1, (d, 4 * d)),
            ("w2", &self.w2, (4 * d, d)),
        ] {
            if m.shape() != want {
                return Err(Error::shape("layer weights", format!("{name} {want:?}"), format!("{:?}", m.shape())));
            }
        }
        for v in [&self.ln1_gamma, &self.ln1_beta, &self.ln2_gamma, &self.ln2_beta] {
            if v.len() != d {
                return Err(Error::shape("layernorm parameters", d, v.len()));
            }
        }
        Ok(())
    }

    /// All matrices and vectors zero except unit LayerNorm gains.
    pub fn zeros(d: usize, dk: usize, heads: usize) -> Self {
        Self {
            heads: (0..heads)
                .map(|_| HeadWeights {
                    w_q: Matrix::zeros(dk, d),
                    w_k: Matrix::zeros(dk, d),
                    w_v: Matrix::zeros(dk, d),
                })
                .collect(),
            w_o: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, 4 * d),
            w2: Matrix::zeros(4 * d, d),
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ModelWeights {
    /// Gaussian weights with 1/√fan_in spread, drawn from the job seed's
    /// weight stream.
    pub fn generate(job: &AttentionJob) -> Self {
        let (d, dk) = (job.d_model, job.d_k);
        let streams = SeedStreams::new(job.seed);
        let layers = (0..job.n_layers)
            .map(|l| {
                let mut rng = streams.indexed(WEIGHTS, l as u64);
                let s = 1.0 / (d as f64).sqrt();
                let heads = (0..job.n_heads)
                    .map(|_| HeadWeights {
                        w_q: gaussian(&mut rng, dk, d, s),
                        w_k: gaussian(&mut rng, dk, d, s),
                        w_v: gaussian(&mut rng, dk, d, s),
                    })
                    .collect();
                let w_o = gaussian(&mut rng, d, d, s);
                let w1 = gaussian(&mut rng, d, 4 * d, s);
                let w2 = gaussian(&mut rng, 4 * d, d, 0.5 * s);
                let mut vec = |mean: f64| -> Vec<f64> { gaussian(&mut rng, 1, d, 0.1).into_data().into_iter().map(|v| v + mean).collect() };
                let (ln1_gamma, ln1_beta, ln2_gamma, ln2_beta) = (vec(1.0), vec(0.0), vec(1.0), vec(0.0));
                LayerWeights {
                    heads,
                    w_o,
                    w1,
                    w2,
                    ln1_gamma,
                    ln1_beta,
                    ln2_gamma,
                    ln2_beta,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self, job: &AttentionJob) -> Result<()> {
        if self.layers.len() != job.n_layers {
            return Err(Error::shape("model layers", job.n_layers, self.layers.len()));
        }
        self.layers.iter().try_for_each(|l| l.validate(job))
    }

    fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), head.w_q.clone()));
                out.push((format!("layer{l}.head{h}.w_k"), head.w_k.clone()));
                out.push((format!("layer{l}.head{h}.w_v"), head.w_v.clone()));
            }
            out.push((format!("layer{l}.w_o"), layer.w_o.clone()));
            out.push((format!("layer{l}.w1"), layer.w1.clone()));
            out.push((format!("layer{l}.w2"), layer.w2.clone()));
            for (name, v) in [
                ("ln1_gamma", &layer.ln1_gamma),
                ("ln1_beta", &layer.ln1_beta),
                ("ln2_gamma", &layer.ln2_gamma),
                ("ln2_beta", &layer.ln2_beta),
            ] {
                out.push((format!("layer{l}.{name}"), Matrix::from_vec(1, v.len(), v.clone()).expect("row vector")));
            }
        }
        out
    }

    /// Writes `<stem>.bin` and `<stem>.shapes`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bin = Vec::new();
        let mut shapes = String::new();
        for (name, m) in self.tensors() {
            writeln!(shapes, "{name} {} {}", m.rows(), m.cols()).expect("string write");
            for &v in m.data() {
                bin.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(stem.with_extension("bin"), bin)?;
        std::fs::write(stem.with_extension("shapes"), shapes)?;
        Ok(())
    }

    pub fn load(stem: &Path, job: &AttentionJob) -> Result<Self> {
        let shapes = std::fs::read_to_string(stem.with_extension("shapes"))?;
        let bin = std::fs::read(stem.with_extension("bin"))?;
        let mut offset = 0;
        let mut tensors = std::collections::HashMap::new();
        for (lineno, line) in shapes.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse {
                location: format!("{}:{}", stem.with_extension("shapes").display(), lineno + 1),
                message,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("expected `name rows cols`, got `{line}`")));
            };
            let rows: usize = rows.parse().map_err(|e| bad(format!("rows: {e}")))?;
            let cols: usize = cols.parse().map_err(|e| bad(format!("cols: {e}")))?;
            let len = rows * cols * 4;
            let chunk = bin
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("binary file too short for `{name}`")))?;
            offset += len;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            tensors.insert(name.to_string(), Matrix::from_vec(rows, cols, data)?);
        }
        if offset != bin.len() {
            return Err(Error::Parse {
                location: stem.with_extension("bin").display().to_string(),
                message: format!("{} trailing bytes", bin.len() - offset),
            });
        }
        let mut take = |name: String| {
            tensors.remove(&name).ok_or_else(|| Error::Parse {
                location: stem.with_extension("shapes").display().to_string(),
                message: format!("missing tensor `{name}`"),
            })
        };
        let mut layers = Vec::new();
        for l in 0..job.n_layers {
            let mut heads = Vec::new();
            for h in 0..job.n_heads {
                heads.push(HeadWeights {
                    w_q: take(format!("layer{l}.head{h}.w_q"))?,
                    w_k: take(format!("layer{l}.head{h}.w_k"))?,
                    w_v: take(format!("layer{l}.head{h}.w_v"))?,
                });
            }
            layers.push(LayerWeights {
                heads,
                w_o: take(format!("layer{l}.w_o"))?,
                w1: take(format!("layer{l}.w1"))?,
                w2: take(format!("layer{l}.w2"))?,
                ln1_gamma: take(format!("layer{l}.ln1_gamma"))?.into_data(),
                ln1_beta: take(format!("layer{l}.ln1_beta"))?.into_data(),
                ln2_gamma: take(format!("layer{l}.ln2_gamma"))?.into_data(),
                ln2_beta: take(format!("layer{l}.ln2_beta"))?.into_data(),
            });
        }
        let w = Self { layers };
        w.validate(job)?;
        Ok(w)
    }
}

/// Standard-normal input tokens from the job seed's input stream.
pub fn generate_input(job: &AttentionJob) -> Matrix {
    let mut rng = SeedStreams::new(job.seed).stream(INPUTS);
    gaussian(&mut rng, job.n_tokens, job.d_model, 1.0)
}
