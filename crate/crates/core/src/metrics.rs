//! Quantization damage and bias statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How per-sample SQNR values are combined into one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqnrMode {
    /// `10 log10(mean_x(signal / noise))`: the expectation sits inside the log.
    #[default]
    MeanRatio,
    /// Mean of per-sample dB values.
    MeanDb,
}

/// Whether a dB value is finite or one of the degenerate infinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqnrFlag {
    Finite,
    /// No quantization noise at all.
    PosInfinite,
    /// Zero signal with non-zero noise.
    NegInfinite,
}

impl SqnrFlag {
    pub fn of(db: f64) -> Self {
        if db == f64::INFINITY {
            SqnrFlag::PosInfinite
        } else if db == f64::NEG_INFINITY {
            SqnrFlag::NegInfinite
        } else {
            SqnrFlag::Finite
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqnrReport {
    pub mean_db: f64,
    pub flag: SqnrFlag,
    pub mode: SqnrMode,
    pub per_sample_db: Vec<f64>,
    pub n_samples: usize,
}

impl SqnrReport {
    pub fn n_pos_infinite(&self) -> usize {
        self.per_sample_db.iter().filter(|&&d| d == f64::INFINITY).count()
    }

    pub fn n_neg_infinite(&self) -> usize {
        self.per_sample_db.iter().filter(|&&d| d == f64::NEG_INFINITY).count()
    }
}

/// `signal / noise` for one sample; `0/0` counts as noiseless.
fn sample_ratio(reference: &Tensor, quantized: &Tensor) -> Result<f64> {
    if reference.shape() != quantized.shape() {
        return Err(Error::ShapeMismatch {
            op: "sqnr_db",
            left: reference.shape().to_vec(),
            right: quantized.shape().to_vec(),
        });
    }
    let signal = reference.squared_norm();
    let noise = quantized
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0, |acc, (&q, &r)| acc + (q - r) * (q - r));
    Ok(if noise == 0.0 { f64::INFINITY } else { signal / noise })
}

fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

pub fn sqnr_db(reference: &[Tensor], quantized: &[Tensor]) -> Result<SqnrReport> {
    sqnr_db_with(reference, quantized, SqnrMode::MeanRatio)
}

pub fn sqnr_db_with(reference: &[Tensor], quantized: &[Tensor], mode: SqnrMode) -> Result<SqnrReport> {
    if reference.is_empty() {
        return Err(Error::Empty("sqnr_db"));
    }
    if reference.len() != quantized.len() {
        return Err(Error::CountMismatch("sqnr_db", reference.len(), quantized.len()));
    }
    let ratios = reference
        .iter()
        .zip(quantized)
        .map(|(r, q)| sample_ratio(r, q))
        .collect::<Result<Vec<_>>>()?;
    let n = ratios.len() as f64;
    let per_sample_db: Vec<f64> = ratios.iter().map(|&r| to_db(r)).collect();
    let mean_db = match mode {
        SqnrMode::MeanRatio => to_db(ratios.iter().sum::<f64>() / n),
        SqnrMode::MeanDb => {
            let pos = per_sample_db.contains(&f64::INFINITY);
            let neg = per_sample_db.contains(&f64::NEG_INFINITY);
            match (pos, neg) {
                (true, _) => f64::INFINITY,
                (false, true) => f64::NEG_INFINITY,
                _ => per_sample_db.iter().sum::<f64>() / n,
            }
        }
    };
    Ok(SqnrReport {
        mean_db,
        flag: SqnrFlag::of(mean_db),
        mode,
        per_sample_db,
        n_samples: reference.len(),
    })
}

/// Running mean of per-row sums of softmax-shaped outputs.
#[derive(Debug, Clone, Default)]
pub struct RowSumAccumulator {
    total: f64,
    rows: usize,
}

impl RowSumAccumulator {
    pub fn observe(&mut self, y: &Tensor) -> Result<()> {
        if y.rank() != 3 {
            return Err(Error::UnsupportedRank("expected_softmax_sum", y.rank()));
        }
        for row in y.rows() {
            self.total += row.iter().fold(0.0, |a, &v| a + v);
        }
        self.rows += y.len() / y.last_dim();
        Ok(())
    }

    pub fn merge(&mut self, other: &RowSumAccumulator) {
        self.total += other.total;
        self.rows += other.rows;
    }

    pub fn mean(&self) -> Result<f64> {
        if self.rows == 0 {
            return Err(Error::Empty("expected_softmax_sum"));
        }
        Ok(self.total / self.rows as f64)
    }
}

/// Mean over samples, heads and rows of the per-row sum.
///
/// Equally shaped samples make this the same as averaging per sample first.
pub fn expected_softmax_sum(outputs: &[Tensor]) -> Result<f64> {
    let mut acc = RowSumAccumulator::default();
    for y in outputs {
        acc.observe(y)?;
    }
    acc.mean()
}

/// Counts elements that sit exactly on the zero grid value.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCounter {
    zeros: usize,
    total: usize,
}

impl ZeroCounter {
    pub fn observe(&mut self, y: &Tensor) {
        self.zeros += y.data().iter().filter(|&&v| v == 0.0).count();
        self.total += y.len();
    }

    pub fn merge(&mut self, other: &ZeroCounter) {
        self.zeros += other.zeros;
        self.total += other.total;
    }

    pub fn fraction(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::Empty("zero_fraction"));
        }
        Ok(self.zeros as f64 / self.total as f64)
    }
}

/// Share of quantized elements equal to the grid value for zero.
pub fn zero_fraction(outputs: &[Tensor]) -> Result<f64> {
    let mut c = ZeroCounter::default();
    for y in outputs {
        c.observe(y);
    }
    c.fraction()
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation. NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::CountMismatch("spearman", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman"));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}
