use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    attention_forward_traced, gen_inputs, AttentionConfig, AttentionTrace, CalibrationSet, QuantMap, QuantPoint, Sample,
};
use crate::bias::{BiasCorrection, Granularity, SoftmaxBiasEstimator};
use crate::error::{Error, Result};
use crate::metrics::{sqnr_db_with, SqnrMode, SqnrReport};
use crate::quant::{softmax_grid, MinMaxObserver, Scheme};
use crate::rng;
use crate::tensor::{matmul, Tensor};

/// One [`QuantMap`] per pipeline layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    layers: Vec<QuantMap>,
}

impl QuantPlan {
    pub fn float(n_layers: usize) -> Self {
        Self::uniform(QuantMap::new(), n_layers)
    }

    pub fn uniform(map: QuantMap, n_layers: usize) -> Self {
        Self {
            layers: vec![map; n_layers],
        }
    }

    pub fn from_layers(layers: Vec<QuantMap>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[QuantMap] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// The same plan with every point except `point` disabled.
    pub fn only(&self, point: QuantPoint) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|m| {
                let mut single = QuantMap::new();
                single.set(point, m.get(point).copied());
                single
            })
            .collect();
        Self { layers }
    }
}

/// One softmax bias correction per pipeline layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrectionPlan {
    pub layers: Vec<BiasCorrection>,
}

struct LayerProjection {
    query: Tensor,
    key: Tensor,
    value: Tensor,
}

/// Orthogonal `d × d` matrix from Gram-Schmidt on Gaussian rows.
fn random_orthogonal(d: usize, rng: &mut impl rand::Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut degenerate = false;
        for i in 0..d {
            let (done, rest) = rows.split_at_mut(i);
            let row = &mut rest[0];
            for prev in done.iter() {
                let proj: f64 = prev.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(prev).for_each(|(r, p)| *r -= proj * p);
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            row.iter_mut().for_each(|r| *r /= norm);
        }
        if !degenerate {
            return Tensor::new(vec![d, d], rows.concat());
        }
    }
}

/// Stacked residual attention blocks.
///
/// The first layer consumes a sample's Q, K and V directly and the residual
/// stream starts at V. Each later layer derives Q, K and V from the residual
/// stream through fixed random orthogonal projections; queries and keys are
/// normalised by the stream's RMS so scores keep the configured scale.
pub struct Pipeline {
    cfg: AttentionConfig,
    projections: Vec<LayerProjection>,
}

impl Pipeline {
    pub fn new(cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let projections = (1..cfg.n_layers)
            .map(|layer| {
                let mut rng = rng::stream(cfg.seed, "projection", layer as u64);
                Ok(LayerProjection {
                    query: random_orthogonal(cfg.d_head, &mut rng)?,
                    key: random_orthogonal(cfg.d_head, &mut rng)?,
                    value: random_orthogonal(cfg.d_head, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            projections,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    fn project(&self, layer: usize, stream: &Tensor, t: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let proj = &self.projections[layer - 1];
        let shape = stream.shape().to_vec();
        let (h, n, d) = (shape[0], shape[1], shape[2]);
        let flat = stream.reshape(vec![h * n, d])?;
        let rms = (stream.squared_norm() / stream.len() as f64)
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let per_head = n * d;
        let q = matmul(&flat, &proj.query)?;
        let q_data = q
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.cfg.logit_scale(i / per_head, t) / rms)
            .collect();
        let q = Tensor::new(shape.clone(), q_data)?;
        let k = matmul(&flat, &proj.key)?.scale(1.0 / rms).reshape(shape.clone())?;
        let v = matmul(&flat, &proj.value)?.reshape(shape)?;
        Ok((q, k, v))
    }

    fn check_plans(&self, plan: &QuantPlan, correction: Option<&CorrectionPlan>) -> Result<()> {
        if plan.n_layers() != self.cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "quantization plan has {} layers, pipeline has {}",
                plan.n_layers(),
                self.cfg.n_layers
            )));
        }
        if let Some(c) = correction {
            if c.layers.len() != self.cfg.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "correction plan has {} layers, pipeline has {}",
                    c.layers.len(),
                    self.cfg.n_layers
                )));
            }
        }
        Ok(())
    }

    /// Runs the first `depth` layers; layers past `corrections.len()` are
    /// uncorrected.
    fn run(
        &self,
        sample: &Sample,
        plan: &QuantPlan,
        corrections: &[BiasCorrection],
        depth: usize,
        observer: &mut dyn FnMut(usize, &AttentionTrace),
    ) -> Result<Tensor> {
        let t = sample.timestep;
        let mut stream = sample.v.clone();
        for layer in 0..depth {
            let projected;
            let (q, k, v) = if layer == 0 {
                (&sample.q, &sample.k, &sample.v)
            } else {
                projected = self.project(layer, &stream, t)?;
                (&projected.0, &projected.1, &projected.2)
            };
            let trace = attention_forward_traced(q, k, v, &plan.layers[layer], corrections.get(layer), Some(t))?;
            observer(layer, &trace);
            stream = stream.add(&trace.output)?;
        }
        Ok(stream)
    }

    /// Final residual stream for one sample, reporting every layer's trace.
    pub fn forward_sample(
        &self,
        sample: &Sample,
        plan: &QuantPlan,
        correction: Option<&CorrectionPlan>,
        observer: &mut dyn FnMut(usize, &AttentionTrace),
    ) -> Result<Tensor> {
        self.check_plans(plan, correction)?;
        let corrections = correction.map_or(&[][..], |c| &c.layers[..]);
        self.run(sample, plan, corrections, self.cfg.n_layers, observer)
    }

    /// Final outputs for every sample, in sample order.
    pub fn forward(
        &self,
        set: &CalibrationSet,
        plan: &QuantPlan,
        correction: Option<&CorrectionPlan>,
    ) -> Result<Vec<Tensor>> {
        self.check_plans(plan, correction)?;
        set.samples()
            .par_iter()
            .map(|s| self.forward_sample(s, plan, correction, &mut |_, _| {}))
            .collect()
    }
}

pub fn pipeline_forward(
    set: &CalibrationSet,
    cfg: &AttentionConfig,
    plan: &QuantPlan,
    correction: Option<&CorrectionPlan>,
) -> Result<Vec<Tensor>> {
    Pipeline::new(cfg)?.forward(set, plan, correction)
}

/// Per-layer quantizers for `points`, calibrated on the float pipeline.
///
/// Activations get asymmetric min-max grids. The softmax output uses the
/// fixed `[0, 1]` grid unless `softmax_minmax` is set.
pub fn calibrate_plan(
    pipeline: &Pipeline,
    set: &CalibrationSet,
    points: &[QuantPoint],
    bits: u8,
    softmax_minmax: bool,
) -> Result<QuantPlan> {
    let n_layers = pipeline.config().n_layers;
    let mut observers = vec![[MinMaxObserver::new(); 5]; n_layers];
    let needs_data = points.iter().any(|&p| p != QuantPoint::SoftmaxOut || softmax_minmax);
    if needs_data {
        let float = QuantPlan::float(n_layers);
        for sample in set.samples() {
            pipeline.forward_sample(sample, &float, None, &mut |layer, tr| {
                let obs = &mut observers[layer];
                for (i, point) in QuantPoint::ALL.iter().enumerate() {
                    if points.contains(point) {
                        let x = match point {
                            QuantPoint::Query => &tr.q,
                            QuantPoint::Key => &tr.k,
                            QuantPoint::Value => &tr.v,
                            QuantPoint::AttnScores => &tr.scores,
                            QuantPoint::SoftmaxOut => &tr.probs,
                        };
                        obs[i].observe(x);
                    }
                }
            })?;
        }
    }
    let layers = observers
        .iter()
        .map(|obs| {
            let mut map = QuantMap::new();
            for (i, &point) in QuantPoint::ALL.iter().enumerate() {
                if !points.contains(&point) {
                    continue;
                }
                let params = if point == QuantPoint::SoftmaxOut && !softmax_minmax {
                    softmax_grid(bits)?
                } else {
                    obs[i].finish(bits, Scheme::Asymmetric)?
                };
                map.set(point, Some(params));
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantPlan::from_layers(layers))
}

/// Estimates one softmax correction per layer, layer by layer: layer `l` is
/// calibrated on outputs produced with the corrections of layers `< l` in
/// place.
pub fn calibrate_corrections(
    pipeline: &Pipeline,
    set: &CalibrationSet,
    plan: &QuantPlan,
    granularity: Granularity,
) -> Result<CorrectionPlan> {
    pipeline.check_plans(plan, None)?;
    if plan.layers().iter().any(|m| m.get(QuantPoint::SoftmaxOut).is_none()) {
        return Err(Error::InvalidConfig(
            "bias correction requires a quantized softmax output in every layer".into(),
        ));
    }
    let mut layers: Vec<BiasCorrection> = Vec::with_capacity(plan.n_layers());
    for layer in 0..plan.n_layers() {
        let mut est = SoftmaxBiasEstimator::new(granularity);
        let mut failure = None;
        for sample in set.samples() {
            pipeline.run(sample, plan, &layers, layer + 1, &mut |l, tr| {
                if l == layer && failure.is_none() {
                    if let Err(e) = est.observe(&tr.probs, Some(sample.timestep)) {
                        failure = Some(e);
                    }
                }
            })?;
        }
        if let Some(e) = failure {
            return Err(e);
        }
        layers.push(est.finish()?);
    }
    Ok(CorrectionPlan { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensitivityOptions {
    pub bits: u8,
    pub softmax_minmax: bool,
    pub mode: SqnrMode,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            bits: 8,
            softmax_minmax: false,
            mode: SqnrMode::MeanRatio,
        }
    }
}

/// Quantizes one point at a time and reports the output SQNR against the
/// unquantized pipeline.
pub fn sensitivity_analysis(cfg: &AttentionConfig, bits: u8) -> Result<BTreeMap<QuantPoint, SqnrReport>> {
    sensitivity_analysis_with(
        cfg,
        &SensitivityOptions {
            bits,
            ..SensitivityOptions::default()
        },
    )
}

pub fn sensitivity_analysis_with(
    cfg: &AttentionConfig,
    opts: &SensitivityOptions,
) -> Result<BTreeMap<QuantPoint, SqnrReport>> {
    let set = gen_inputs(cfg)?;
    let pipeline = Pipeline::new(cfg)?;
    let reference = pipeline.forward(&set, &QuantPlan::float(cfg.n_layers), None)?;
    let full = calibrate_plan(&pipeline, &set, &QuantPoint::ALL, opts.bits, opts.softmax_minmax)?;
    QuantPoint::ALL
        .iter()
        .map(|&point| {
            let out = pipeline.forward(&set, &full.only(point), None)?;
            Ok((point, sqnr_db_with(&reference, &out, opts.mode)?))
        })
        .collect()
}
