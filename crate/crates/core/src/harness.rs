//! Experiment commands: workload generation, sensitivity analysis,
//! correction-granularity ablation and the expected-sum scatter.
//!
//! Every command derives its per-seed workloads from the master seed with a
//! labelled hash, writes its rows in a fixed order and is byte-for-byte
//! reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{
    calibrate_corrections, calibrate_plan, gen_inputs, sensitivity_analysis_with, AttentionConfig, CalibrationSet,
    CorrectionPlan, Pipeline, QuantPlan, QuantPoint, Sample, SensitivityOptions,
};
use crate::bias::{Granularity, TimeBins};
use crate::error::{Error, Result};
use crate::io::{load_qbt, save_qbt};
use crate::metrics::{sqnr_db_with, RowSumAccumulator, SqnrMode};
use crate::quant::{MAX_BITS, MIN_BITS};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Correction granularity as named in configs and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "per-tensor")]
    PerTensor,
    #[serde(rename = "per-head")]
    PerHead,
    #[serde(rename = "ts-per-tensor")]
    TimestepPerTensor,
    #[serde(rename = "ts-per-head")]
    TimestepPerHead,
}

impl CorrectionKind {
    pub const ALL: [CorrectionKind; 5] = [
        CorrectionKind::None,
        CorrectionKind::PerTensor,
        CorrectionKind::PerHead,
        CorrectionKind::TimestepPerTensor,
        CorrectionKind::TimestepPerHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorrectionKind::None => "none",
            CorrectionKind::PerTensor => "per-tensor",
            CorrectionKind::PerHead => "per-head",
            CorrectionKind::TimestepPerTensor => "ts-per-tensor",
            CorrectionKind::TimestepPerHead => "ts-per-head",
        }
    }

    pub fn granularity(&self, bins: TimeBins) -> Option<Granularity> {
        match self {
            CorrectionKind::None => None,
            CorrectionKind::PerTensor => Some(Granularity::PerTensor),
            CorrectionKind::PerHead => Some(Granularity::PerHead),
            CorrectionKind::TimestepPerTensor => Some(Granularity::TimestepPerTensor(bins)),
            CorrectionKind::TimestepPerHead => Some(Granularity::TimestepPerHead(bins)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Score scales for `scatter`.
    pub logit_std: Vec<f64>,
    /// Bitwidths for `sensitivity`; empty means just `bits`.
    pub bitwidths: Vec<u8>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            logit_std: vec![0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0],
            bitwidths: Vec::new(),
        }
    }
}

/// Everything a command needs. Loaded from JSON; absent fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub attention: AttentionConfig,
    pub bits: u8,
    /// Granularity whose per-layer corrections `ablate` writes to
    /// `corrections.json`.
    pub granularity: CorrectionKind,
    /// Time bins for timestep-aware corrections; `None` is one bin per timestep.
    pub n_time_bins: Option<usize>,
    pub softmax_minmax: bool,
    pub sqnr_mode: SqnrMode,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub seeds: usize,
    pub sweep: Sweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            bits: 8,
            granularity: CorrectionKind::PerHead,
            n_time_bins: None,
            softmax_minmax: false,
            sqnr_mode: SqnrMode::MeanRatio,
            out_dir: PathBuf::from("out"),
            seed: 0,
            seeds: 10,
            sweep: Sweep::default(),
        }
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "bits {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        check_bits(self.bits)?;
        for &b in &self.sweep.bitwidths {
            check_bits(b)?;
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be at least 1".into()));
        }
        self.time_bins()?;
        Ok(())
    }

    pub fn time_bins(&self) -> Result<TimeBins> {
        let steps = self.attention.n_timesteps;
        TimeBins::new(self.n_time_bins.unwrap_or(steps), steps)
    }

    /// Workload seed for the `index`-th repetition of `command`.
    pub fn seed_for(&self, command: &str, index: usize) -> u64 {
        derive_seed(self.seed, command, index as u64)
    }

    fn attention_for(&self, command: &str, index: usize) -> AttentionConfig {
        AttentionConfig {
            seed: self.seed_for(command, index),
            ..self.attention.clone()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub q: String,
    pub k: String,
    pub v: String,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_samples: usize,
    pub master_seed: u64,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub attention: AttentionConfig,
    pub samples: Vec<SampleFiles>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes the workload as `QBT1` tensor files plus `manifest.json` into
/// `<out_dir>/calibration`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let attention = cfg.attention_for("gen", 0);
    let set = gen_inputs(&attention)?;
    let dir = cfg.out_dir.join("calibration");
    ensure_dir(&dir)?;
    let mut samples = Vec::with_capacity(set.len());
    for (i, s) in set.samples().iter().enumerate() {
        let names = ["q", "k", "v"].map(|part| format!("sample_{i:05}_{part}.qbt"));
        for (name, t) in names.iter().zip([&s.q, &s.k, &s.v]) {
            save_qbt(dir.join(name), t)?;
        }
        let [q, k, v] = names;
        samples.push(SampleFiles {
            q,
            k,
            v,
            timestep: s.timestep,
        });
    }
    let manifest = Manifest {
        n_samples: set.len(),
        master_seed: cfg.seed,
        seed: attention.seed,
        shape: set.shape().to_vec(),
        timesteps: set.timesteps(),
        attention,
        samples,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads back a directory written by [`cmd_gen`].
pub fn load_calibration_set(dir: impl AsRef<Path>) -> Result<CalibrationSet> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let samples = manifest
        .samples
        .iter()
        .map(|f| {
            Ok(Sample {
                q: load_qbt(dir.join(&f.q))?,
                k: load_qbt(dir.join(&f.k))?,
                v: load_qbt(dir.join(&f.v))?,
                timestep: f.timestep,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.len() != manifest.n_samples {
        return Err(Error::Format(format!(
            "manifest lists {} samples but declares {}",
            samples.len(),
            manifest.n_samples
        )));
    }
    CalibrationSet::new(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub quant_point: QuantPoint,
    pub bitwidth: u8,
    pub sqnr_db: f64,
    pub seed: u64,
}

/// One row per (bitwidth, quant point, seed), written to `sensitivity.csv`.
pub fn cmd_sensitivity(cfg: &ExperimentConfig) -> Result<Vec<SensitivityRow>> {
    cfg.validate()?;
    let bitwidths = if cfg.sweep.bitwidths.is_empty() {
        vec![cfg.bits]
    } else {
        cfg.sweep.bitwidths.clone()
    };
    let mut rows = Vec::new();
    for &bits in &bitwidths {
        let opts = SensitivityOptions {
            bits,
            softmax_minmax: cfg.softmax_minmax,
            mode: cfg.sqnr_mode,
        };
        let mut per_seed = Vec::with_capacity(cfg.seeds);
        for i in 0..cfg.seeds {
            let attention = cfg.attention_for("sensitivity", i);
            per_seed.push((attention.seed, sensitivity_analysis_with(&attention, &opts)?));
        }
        for point in QuantPoint::ALL {
            for (seed, reports) in &per_seed {
                rows.push(SensitivityRow {
                    quant_point: point,
                    bitwidth: bits,
                    sqnr_db: reports[&point].mean_db,
                    seed: *seed,
                });
            }
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write_csv(&cfg.out_dir.join("sensitivity.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub correction: CorrectionKind,
    pub sqnr_db: f64,
    pub seed: u64,
}

/// Per-seed SQNR of every correction granularity with the softmax output
/// quantized. The first half of each workload calibrates the corrections and
/// the second half is evaluated. Writes `ablation.csv`, plus
/// `corrections.json` holding the configured granularity's corrections for
/// the first seed.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.attention.n_samples < 2 {
        return Err(Error::InvalidConfig("ablate needs at least 2 samples to split".into()));
    }
    let bins = cfg.time_bins()?;
    let mut results = Vec::with_capacity(cfg.seeds);
    let mut exported: Option<CorrectionPlan> = None;
    for i in 0..cfg.seeds {
        let attention = cfg.attention_for("ablate", i);
        let set = gen_inputs(&attention)?;
        let (calib, eval) = set.split_at(set.len() / 2)?;
        let pipeline = Pipeline::new(&attention)?;
        let reference = pipeline.forward(&eval, &QuantPlan::float(attention.n_layers), None)?;
        let plan = calibrate_plan(
            &pipeline,
            &calib,
            &[QuantPoint::SoftmaxOut],
            cfg.bits,
            cfg.softmax_minmax,
        )?;
        let mut per_kind = Vec::with_capacity(CorrectionKind::ALL.len());
        for kind in CorrectionKind::ALL {
            let correction = match kind.granularity(bins) {
                Some(g) => Some(calibrate_corrections(&pipeline, &calib, &plan, g)?),
                None => None,
            };
            let out = pipeline.forward(&eval, &plan, correction.as_ref())?;
            per_kind.push(sqnr_db_with(&reference, &out, cfg.sqnr_mode)?.mean_db);
            if i == 0 && kind == cfg.granularity {
                exported = correction;
            }
        }
        results.push((attention.seed, per_kind));
    }
    let mut rows = Vec::new();
    for (k, kind) in CorrectionKind::ALL.iter().enumerate() {
        for (seed, per_kind) in &results {
            rows.push(AblationRow {
                correction: *kind,
                sqnr_db: per_kind[k],
                seed: *seed,
            });
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write_csv(&cfg.out_dir.join("ablation.csv"), &rows)?;
    if let Some(plan) = exported {
        write_json(&cfg.out_dir.join("corrections.json"), &plan)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub logit_std: f64,
    pub expected_sum: f64,
    pub sqnr_db: f64,
}

/// Expected sum of the quantized softmax output (averaged over layers,
/// samples, heads and rows, before any correction) against pipeline SQNR, for
/// each score scale in the sweep and each seed. Writes `scatter.csv`.
pub fn cmd_scatter(cfg: &ExperimentConfig) -> Result<Vec<ScatterRow>> {
    cfg.validate()?;
    if cfg.sweep.logit_std.is_empty() {
        return Err(Error::InvalidConfig("scatter needs a non-empty sweep.logit_std".into()));
    }
    let mut rows = Vec::new();
    for (j, &logit_std) in cfg.sweep.logit_std.iter().enumerate() {
        for i in 0..cfg.seeds {
            let attention = AttentionConfig {
                logit_std,
                ..cfg.attention_for("scatter", j * cfg.seeds + i)
            };
            let set = gen_inputs(&attention)?;
            let pipeline = Pipeline::new(&attention)?;
            let reference = pipeline.forward(&set, &QuantPlan::float(attention.n_layers), None)?;
            let plan = calibrate_plan(&pipeline, &set, &[QuantPoint::SoftmaxOut], cfg.bits, cfg.softmax_minmax)?;
            let mut sums = RowSumAccumulator::default();
            let mut failure = None;
            let out = set
                .samples()
                .iter()
                .map(|s| {
                    pipeline.forward_sample(s, &plan, None, &mut |_, tr| {
                        if let Err(e) = sums.observe(&tr.probs) {
                            failure.get_or_insert(e);
                        }
                    })
                })
                .collect::<Result<Vec<Tensor>>>()?;
            if let Some(e) = failure {
                return Err(e);
            }
            rows.push(ScatterRow {
                logit_std,
                expected_sum: sums.mean()?,
                sqnr_db: sqnr_db_with(&reference, &out, cfg.sqnr_mode)?.mean_db,
            });
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write_csv(&cfg.out_dir.join("scatter.csv"), &rows)?;
    Ok(rows)
}
