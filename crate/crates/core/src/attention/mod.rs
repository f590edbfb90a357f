//! Synthetic multi-head attention workloads with configurable quantization.
//!
//! A single block computes `softmax(Q Kᵀ / sqrt(d_head)) V` per head. Any of
//! the five intermediate activations can be fake-quantized independently, and
//! the softmax output quantizer can carry a bias correction folded into its
//! offset.

mod pipeline;

pub use pipeline::{
    calibrate_corrections, calibrate_plan, pipeline_forward, sensitivity_analysis, sensitivity_analysis_with,
    CorrectionPlan, Pipeline, QuantPlan, SensitivityOptions,
};

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bias::{absorb_into_offset, BiasCorrection};
use crate::error::{Error, Result};
use crate::quant::{check_dequant_args, dequantize_slice, fake_quant, quantize_int, QuantParams};
use crate::rng;
use crate::tensor::{matmul, matmul_transposed, softmax, Tensor};

/// Shape and distribution of a synthetic attention workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_seq: usize,
    pub d_head: usize,
    /// Depth of the stacked residual pipeline.
    pub n_layers: usize,
    /// Standard deviation of the pre-softmax scores.
    pub logit_std: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Samples are tagged `t = i mod n_timesteps`.
    pub n_timesteps: usize,
    /// Relative spread of the score scale across timesteps: at timestep `t`
    /// scores are scaled by `1 + spread * (t / (n_timesteps - 1) - 1/2)`.
    pub timestep_spread: f64,
    /// Weight of the token-independent component of V.
    pub value_shared: f64,
    /// Optional per-head multipliers on the score scale.
    pub head_logit_scales: Option<Vec<f64>>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            n_seq: 256,
            d_head: 16,
            n_layers: 2,
            logit_std: 1.0,
            n_samples: 64,
            seed: 0,
            n_timesteps: 20,
            timestep_spread: 0.5,
            value_shared: 1.0,
            head_logit_scales: None,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("n_seq", self.n_seq),
            ("d_head", self.d_head),
            ("n_layers", self.n_layers),
            ("n_samples", self.n_samples),
            ("n_timesteps", self.n_timesteps),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.logit_std.is_finite() && self.logit_std > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "logit_std {} must be positive",
                self.logit_std
            )));
        }
        if !(0.0..2.0).contains(&self.timestep_spread) {
            return Err(Error::InvalidConfig(format!(
                "timestep_spread {} must lie in [0, 2)",
                self.timestep_spread
            )));
        }
        if !self.value_shared.is_finite() {
            return Err(Error::InvalidConfig("value_shared must be finite".into()));
        }
        if let Some(scales) = &self.head_logit_scales {
            if scales.len() != self.n_heads {
                return Err(Error::InvalidConfig(format!(
                    "{} head_logit_scales for {} heads",
                    scales.len(),
                    self.n_heads
                )));
            }
            if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::InvalidConfig("head_logit_scales must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn timestep_of(&self, sample: usize) -> usize {
        sample % self.n_timesteps
    }

    /// Multiplier applied to queries so that scores have the configured scale
    /// for head `head` at timestep `t`.
    pub fn logit_scale(&self, head: usize, t: usize) -> f64 {
        let head_scale = self.head_logit_scales.as_ref().map_or(1.0, |s| s[head]);
        let time_scale = if self.n_timesteps > 1 {
            1.0 + self.timestep_spread * (t as f64 / (self.n_timesteps - 1) as f64 - 0.5)
        } else {
            1.0
        };
        self.logit_std * head_scale * time_scale
    }
}

/// Activations that can be quantized inside an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPoint {
    Query,
    Key,
    Value,
    AttnScores,
    SoftmaxOut,
}

impl QuantPoint {
    pub const ALL: [QuantPoint; 5] = [
        QuantPoint::Query,
        QuantPoint::Key,
        QuantPoint::Value,
        QuantPoint::AttnScores,
        QuantPoint::SoftmaxOut,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            QuantPoint::Query => "query",
            QuantPoint::Key => "key",
            QuantPoint::Value => "value",
            QuantPoint::AttnScores => "attn_scores",
            QuantPoint::SoftmaxOut => "softmax_out",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for QuantPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Quantizer (if any) at each point of one attention block.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantMap([Option<QuantParams>; 5]);

impl QuantMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, point: QuantPoint, params: QuantParams) -> Self {
        self.set(point, Some(params));
        self
    }

    pub fn set(&mut self, point: QuantPoint, params: Option<QuantParams>) {
        self.0[point.index()] = params;
    }

    pub fn get(&self, point: QuantPoint) -> Option<&QuantParams> {
        self.0[point.index()].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub timestep: usize,
}

/// Inputs for calibration or evaluation, each tagged with a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<Sample>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("CalibrationSet"))?;
        let shape = first.q.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::UnsupportedRank("CalibrationSet", shape.len()));
        }
        for s in &samples {
            for t in [&s.q, &s.k, &s.v] {
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "CalibrationSet",
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.timestep).collect()
    }

    /// `[n_heads, n_seq, d_head]` shared by every tensor in the set.
    pub fn shape(&self) -> &[usize] {
        self.samples[0].q.shape()
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(CalibrationSet, CalibrationSet)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        Ok((
            CalibrationSet {
                samples: self.samples[..n].to_vec(),
            },
            CalibrationSet {
                samples: self.samples[n..].to_vec(),
            },
        ))
    }
}

fn normals(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generates the synthetic workload for `cfg`. Sample `i` draws from its own
/// stream derived from `cfg.seed`, so sets are reproducible and any prefix
/// matches a smaller `n_samples`.
pub fn gen_inputs(cfg: &AttentionConfig) -> Result<CalibrationSet> {
    cfg.validate()?;
    let (h, n, d) = (cfg.n_heads, cfg.n_seq, cfg.d_head);
    let shape = vec![h, n, d];
    let per_head = n * d;
    let samples = (0..cfg.n_samples)
        .map(|i| {
            let t = cfg.timestep_of(i);
            let mut rng = rng::stream(cfg.seed, "sample", i as u64);
            let mut q = normals(&mut rng, h * per_head);
            for (head, chunk) in q.chunks_exact_mut(per_head).enumerate() {
                let scale = cfg.logit_scale(head, t);
                chunk.iter_mut().for_each(|x| *x *= scale);
            }
            let k = normals(&mut rng, h * per_head);
            let shared = normals(&mut rng, h * d);
            let mut v = normals(&mut rng, h * per_head);
            for (idx, x) in v.iter_mut().enumerate() {
                let head = idx / per_head;
                let channel = idx % d;
                *x += cfg.value_shared * shared[head * d + channel];
            }
            Ok(Sample {
                q: Tensor::new(shape.clone(), q)?,
                k: Tensor::new(shape.clone(), k)?,
                v: Tensor::new(shape.clone(), v)?,
                timestep: t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationSet::new(samples)
}

/// Every intermediate of one attention block, after any quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Scaled scores `Q Kᵀ / sqrt(d_head)`.
    pub scores: Tensor,
    /// Softmax output as consumed by the value product.
    pub probs: Tensor,
    pub output: Tensor,
}

fn maybe_quant(x: &Tensor, p: Option<&QuantParams>) -> Tensor {
    match p {
        Some(p) => fake_quant(x, p),
        None => x.clone(),
    }
}

/// Runs one attention block and keeps every intermediate.
///
/// `t` selects the time bin of a timestep-aware correction.
pub fn attention_forward_traced(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    quant: &QuantMap,
    correction: Option<&BiasCorrection>,
    t: Option<usize>,
) -> Result<AttentionTrace> {
    if q.rank() != 3 {
        return Err(Error::UnsupportedRank("attention_forward", q.rank()));
    }
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            left: q.shape().to_vec(),
            right: if k.shape() != q.shape() { k.shape() } else { v.shape() }.to_vec(),
        });
    }
    let softmax_params = quant.get(QuantPoint::SoftmaxOut);
    if correction.is_some() && softmax_params.is_none() {
        return Err(Error::InvalidConfig(
            "bias correction requires a quantized softmax output".into(),
        ));
    }
    let d_head = q.last_dim();
    let q = maybe_quant(q, quant.get(QuantPoint::Query));
    let k = maybe_quant(k, quant.get(QuantPoint::Key));
    let v = maybe_quant(v, quant.get(QuantPoint::Value));
    let inv_sqrt_d = 1.0 / (d_head as f64).sqrt();
    let scores = matmul_transposed(&q, &k)?.scale(inv_sqrt_d);
    let scores = maybe_quant(&scores, quant.get(QuantPoint::AttnScores));
    let probs = softmax(&scores);
    let probs = match (softmax_params, correction) {
        (Some(p), Some(c)) => corrected_softmax(&probs, p, c, t)?,
        (Some(p), None) => fake_quant(&probs, p),
        (None, _) => probs,
    };
    let output = matmul(&probs, &v)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        scores,
        probs,
        output,
    })
}

/// Quantizes the softmax output and dequantizes each head with its
/// bias-corrected offset, one quantizer instance per head.
fn corrected_softmax(probs: &Tensor, p: &QuantParams, c: &BiasCorrection, t: Option<usize>) -> Result<Tensor> {
    let n_heads = probs.outer_len();
    let betas = c.betas_for(n_heads, t)?;
    let levels = quantize_int(probs, p);
    let mut data = Vec::with_capacity(probs.len());
    for (head, beta) in betas.into_iter().enumerate() {
        let offset = absorb_into_offset(p, beta);
        check_dequant_args(p.scale(), offset)?;
        data.extend(dequantize_slice(levels.outer(head), p.scale(), offset));
    }
    Tensor::new(probs.shape().to_vec(), data)
}

/// `softmax(Q Kᵀ / sqrt(d_head)) V` with fake quantization at each point
/// present in `quant`.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    quant: &QuantMap,
    correction: Option<&BiasCorrection>,
    t: Option<usize>,
) -> Result<Tensor> {
    Ok(attention_forward_traced(q, k, v, quant, correction, t)?.output)
}
