//! Quantization bias estimation and correction.
//!
//! The bias of a quantized activation is the expected gap between a linear
//! reduction of the float activation and the same reduction of its quantized
//! counterpart. For softmax outputs the float reduction is known in advance:
//! every row sums to one, so each element has expectation `1 / n_seq` and the
//! bias can be estimated from quantized outputs alone.
//!
//! A correction can either be added to the dequantized tensor or folded into
//! the quantizer offset (`c' = s * z - beta`), which costs nothing at
//! inference time.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{reduce_sum, Tensor};

/// The linear reduction applied before comparing float and quantized values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformSpec {
    Identity,
    SumLastAxis,
    MeanAll,
    /// Mean over every axis except the leading (head) axis.
    MeanPerHead,
}

impl TransformSpec {
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            TransformSpec::Identity => Ok(y.clone()),
            TransformSpec::SumLastAxis => {
                if y.rank() == 0 {
                    return Ok(y.clone());
                }
                reduce_sum(y, &[y.rank() - 1])
            }
            TransformSpec::MeanAll => Tensor::scalar(y.sum() / y.len() as f64),
            TransformSpec::MeanPerHead => {
                if y.rank() == 0 {
                    return Err(Error::UnsupportedRank("mean-per-head", 0));
                }
                let axes: Vec<usize> = (1..y.rank()).collect();
                let per_head = y.len() / y.outer_len();
                Ok(reduce_sum(y, &axes)?.scale(1.0 / per_head as f64))
            }
        }
    }
}

/// Empirical bias `E[T(y)] - E[T(q(y))]` over paired float and quantized
/// activations, with the arithmetic mean over samples as the expectation.
///
/// The result has the shape of `T(y)`; scalar transforms give a rank-0 tensor.
pub fn estimate_bias_general(fp_acts: &[Tensor], q_acts: &[Tensor], transform: TransformSpec) -> Result<Tensor> {
    if fp_acts.is_empty() {
        return Err(Error::Empty("estimate_bias_general"));
    }
    if fp_acts.len() != q_acts.len() {
        return Err(Error::CountMismatch(
            "estimate_bias_general",
            fp_acts.len(),
            q_acts.len(),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for (fp, q) in fp_acts.iter().zip(q_acts) {
        if fp.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                op: "estimate_bias_general",
                left: fp.shape().to_vec(),
                right: q.shape().to_vec(),
            });
        }
        let diff = transform.apply(fp)?.sub(&transform.apply(q)?)?;
        acc = Some(match acc {
            None => diff,
            Some(a) => a.add(&diff)?,
        });
    }
    Ok(acc.expect("non-empty").scale(1.0 / fp_acts.len() as f64))
}

/// Equal-width partition of timesteps `0..n_timesteps` into `n_bins` bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeBins {
    n_bins: usize,
    n_timesteps: usize,
}

impl TimeBins {
    pub fn new(n_bins: usize, n_timesteps: usize) -> Result<Self> {
        if n_bins == 0 || n_timesteps == 0 || n_bins > n_timesteps {
            return Err(Error::InvalidConfig(format!(
                "{n_bins} time bins over {n_timesteps} timesteps"
            )));
        }
        Ok(Self { n_bins, n_timesteps })
    }

    /// One bin per distinct timestep.
    pub fn per_timestep(n_timesteps: usize) -> Result<Self> {
        Self::new(n_timesteps, n_timesteps)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    /// Timesteps past the range fall into the last bin.
    pub fn bin(&self, t: usize) -> usize {
        (t.min(self.n_timesteps - 1) * self.n_bins) / self.n_timesteps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerHead,
    TimestepPerTensor(TimeBins),
    TimestepPerHead(TimeBins),
}

impl Granularity {
    pub fn tag(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per-tensor",
            Granularity::PerHead => "per-head",
            Granularity::TimestepPerTensor(_) => "timestep-per-tensor",
            Granularity::TimestepPerHead(_) => "timestep-per-head",
        }
    }

    pub fn time_bins(&self) -> Option<TimeBins> {
        match *self {
            Granularity::TimestepPerTensor(b) | Granularity::TimestepPerHead(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_per_head(&self) -> bool {
        matches!(self, Granularity::PerHead | Granularity::TimestepPerHead(_))
    }

    fn n_bins(&self) -> usize {
        self.time_bins().map_or(1, |b| b.n_bins())
    }

    fn from_tag(tag: &str, n_time_bins: usize, n_timesteps: usize) -> Result<Self> {
        match tag {
            "per-tensor" => Ok(Granularity::PerTensor),
            "per-head" => Ok(Granularity::PerHead),
            "timestep-per-tensor" => Ok(Granularity::TimestepPerTensor(TimeBins::new(n_time_bins, n_timesteps)?)),
            "timestep-per-head" => Ok(Granularity::TimestepPerHead(TimeBins::new(n_time_bins, n_timesteps)?)),
            other => Err(Error::InvalidConfig(format!("unknown granularity {other:?}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Estimated correction values.
///
/// `beta` is laid out bin-major: one value per time bin (a single bin when
/// the granularity is not timestep-aware), and within a bin one value per head
/// for per-head granularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCorrection", into = "RawCorrection")]
pub struct BiasCorrection {
    granularity: Granularity,
    n_seq: usize,
    beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCorrection {
    granularity: String,
    n_time_bins: usize,
    n_timesteps: usize,
    n_seq: usize,
    beta: Vec<f64>,
}

impl From<BiasCorrection> for RawCorrection {
    fn from(c: BiasCorrection) -> Self {
        let bins = c.granularity.time_bins();
        RawCorrection {
            granularity: c.granularity.tag().to_string(),
            n_time_bins: bins.map_or(1, |b| b.n_bins()),
            n_timesteps: bins.map_or(1, |b| b.n_timesteps()),
            n_seq: c.n_seq,
            beta: c.beta,
        }
    }
}

impl TryFrom<RawCorrection> for BiasCorrection {
    type Error = Error;

    fn try_from(r: RawCorrection) -> Result<Self> {
        let g = Granularity::from_tag(&r.granularity, r.n_time_bins, r.n_timesteps)?;
        BiasCorrection::new(g, r.n_seq, r.beta)
    }
}

impl BiasCorrection {
    pub fn new(granularity: Granularity, n_seq: usize, beta: Vec<f64>) -> Result<Self> {
        if n_seq == 0 {
            return Err(Error::InvalidConfig("n_seq must be positive".into()));
        }
        let bins = granularity.n_bins();
        let layout_ok = if granularity.is_per_head() {
            !beta.is_empty() && beta.len().is_multiple_of(bins)
        } else {
            beta.len() == bins
        };
        if !layout_ok {
            return Err(Error::InvalidConfig(format!(
                "{} values do not fit {granularity} with {bins} bin(s)",
                beta.len()
            )));
        }
        let bound = 1.0 / n_seq as f64 + 1.0;
        if let Some(b) = beta.iter().find(|b| !b.is_finite() || b.abs() > bound) {
            return Err(Error::InvalidConfig(format!(
                "correction {b} outside [-{bound}, {bound}]"
            )));
        }
        Ok(Self {
            granularity,
            n_seq,
            beta,
        })
    }

    /// A per-tensor correction of zero.
    pub fn zero(n_seq: usize) -> Result<Self> {
        Self::new(Granularity::PerTensor, n_seq, vec![0.0])
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn n_seq(&self) -> usize {
        self.n_seq
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Heads covered by a per-head correction; `None` when shared by all heads.
    pub fn n_heads(&self) -> Option<usize> {
        self.granularity
            .is_per_head()
            .then(|| self.beta.len() / self.granularity.n_bins())
    }

    /// The correction that applies to `head` of a sample taken at timestep `t`.
    pub fn beta_for(&self, head: usize, t: Option<usize>) -> Result<f64> {
        let bin = match (self.granularity.time_bins(), t) {
            (Some(bins), Some(t)) => bins.bin(t),
            (Some(_), None) => return Err(Error::MissingTimestep(0)),
            (None, _) => 0,
        };
        match self.n_heads() {
            Some(h) if head >= h => Err(Error::HeadMismatch {
                expected: h,
                found: head + 1,
            }),
            Some(h) => Ok(self.beta[bin * h + head]),
            None => Ok(self.beta[bin]),
        }
    }

    /// One value per head, for quantizers instantiated per head.
    pub fn betas_for(&self, n_heads: usize, t: Option<usize>) -> Result<Vec<f64>> {
        if let Some(h) = self.n_heads() {
            if h != n_heads {
                return Err(Error::HeadMismatch {
                    expected: h,
                    found: n_heads,
                });
            }
        }
        (0..n_heads).map(|h| self.beta_for(h, t)).collect()
    }
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Streaming estimator for softmax output bias.
///
/// Keeps per-(bin, head) sums of quantized softmax outputs; estimators fed with
/// disjoint shards of a calibration set can be merged.
#[derive(Debug, Clone)]
pub struct SoftmaxBiasEstimator {
    granularity: Granularity,
    dims: Option<(usize, usize)>,
    // [bin][head] -> sum over samples of the per-head element sum
    head_sums: Vec<Vec<CompensatedSum>>,
    counts: Vec<usize>,
    n_samples: usize,
}

impl SoftmaxBiasEstimator {
    pub fn new(granularity: Granularity) -> Self {
        let bins = granularity.n_bins();
        Self {
            granularity,
            dims: None,
            head_sums: vec![Vec::new(); bins],
            counts: vec![0; bins],
            n_samples: 0,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Adds one quantized softmax output of shape `[n_heads, n_seq, n_seq]`.
    pub fn observe(&mut self, y: &Tensor, t: Option<usize>) -> Result<()> {
        let (n_heads, n_seq) = match *y.shape() {
            [h, r, c] if r == c => (h, r),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "softmax output must be [n_heads, n_seq, n_seq], got {:?}",
                    y.shape()
                )))
            }
        };
        if let Some(dims) = self.dims {
            if dims != (n_heads, n_seq) {
                return Err(Error::ShapeMismatch {
                    op: "estimate_softmax_bias",
                    left: vec![dims.0, dims.1, dims.1],
                    right: y.shape().to_vec(),
                });
            }
        }
        if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("softmax output has values outside [0, 1]".into()));
        }
        let bin = match (self.granularity.time_bins(), t) {
            (Some(bins), Some(t)) => bins.bin(t),
            (Some(_), None) => return Err(Error::MissingTimestep(self.n_samples)),
            (None, _) => 0,
        };
        self.dims = Some((n_heads, n_seq));
        let sums = &mut self.head_sums[bin];
        if sums.is_empty() {
            sums.resize(n_heads, CompensatedSum::default());
        }
        for (h, acc) in sums.iter_mut().enumerate() {
            y.outer(h).iter().for_each(|&v| acc.add(v));
        }
        self.counts[bin] += 1;
        self.n_samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &SoftmaxBiasEstimator) -> Result<()> {
        if self.granularity != other.granularity {
            return Err(Error::InvalidConfig(
                "cannot merge estimators of different granularity".into(),
            ));
        }
        match (self.dims, other.dims) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::ShapeMismatch {
                    op: "SoftmaxBiasEstimator::merge",
                    left: vec![a.0, a.1, a.1],
                    right: vec![b.0, b.1, b.1],
                })
            }
            (None, dims) => self.dims = dims,
            _ => {}
        }
        for (mine, theirs) in self.head_sums.iter_mut().zip(&other.head_sums) {
            if mine.is_empty() {
                mine.clone_from(theirs);
            } else if !theirs.is_empty() {
                for (a, b) in mine.iter_mut().zip(theirs) {
                    a.merge(b);
                }
            }
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    pub fn finish(&self) -> Result<BiasCorrection> {
        let (n_heads, n_seq) = self.dims.ok_or(Error::Empty("estimate_softmax_bias"))?;
        let target = 1.0 / n_seq as f64;
        let per_head = (n_seq * n_seq) as f64;
        let mut beta = Vec::new();
        for (bin, (sums, &count)) in self.head_sums.iter().zip(&self.counts).enumerate() {
            if count == 0 {
                return Err(Error::EmptyTimeBin(bin));
            }
            let n = count as f64;
            if self.granularity.is_per_head() {
                beta.extend(sums.iter().map(|s| target - (s.value() / n) / per_head));
            } else {
                let mut total = CompensatedSum::default();
                sums.iter().for_each(|s| total.merge(s));
                let total = total.value();
                beta.push(target - (total / n) / (n_heads as f64 * per_head));
            }
        }
        BiasCorrection::new(self.granularity, n_seq, beta)
    }
}

/// Estimates softmax output bias from quantized outputs, each optionally
/// tagged with the timestep it was produced at.
pub fn estimate_softmax_bias<'a>(
    outputs: impl IntoIterator<Item = (&'a Tensor, Option<usize>)>,
    granularity: Granularity,
) -> Result<BiasCorrection> {
    let mut est = SoftmaxBiasEstimator::new(granularity);
    for (y, t) in outputs {
        est.observe(y, t)?;
    }
    est.finish()
}

/// Adds the applicable correction to every element of a `[n_heads, n_seq, n_seq]`
/// tensor. No clamping is applied.
pub fn apply_elementwise(y: &Tensor, correction: &BiasCorrection, t: Option<usize>) -> Result<Tensor> {
    if y.rank() != 3 {
        return Err(Error::UnsupportedRank("apply_elementwise", y.rank()));
    }
    let timestep_aware = correction.granularity().time_bins().is_some();
    if timestep_aware != t.is_some() {
        return Err(Error::InvalidConfig(format!(
            "{} correction {} a timestep",
            correction.granularity(),
            if timestep_aware { "needs" } else { "does not take" }
        )));
    }
    let n_heads = y.outer_len();
    let betas = correction.betas_for(n_heads, t)?;
    let stride = y.len() / n_heads;
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + betas[i / stride])
        .collect();
    Ok(Tensor::from_parts(y.shape().to_vec(), data))
}

/// Folds a correction into the quantizer offset: `c' = s * z - beta`.
pub fn absorb_into_offset(p: &QuantParams, beta: f64) -> f64 {
    p.offset() - beta
}
