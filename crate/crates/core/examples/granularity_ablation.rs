//! Correction granularities on heads with very different score scales.

use softmax_bias::attention::{calibrate_corrections, calibrate_plan};
use softmax_bias::{gen_inputs, sqnr_db, AttentionConfig, Granularity, Pipeline, QuantPlan, QuantPoint, TimeBins};

fn main() -> softmax_bias::Result<()> {
    let cfg = AttentionConfig {
        n_seq: 128,
        n_samples: 32,
        head_logit_scales: Some(vec![0.5, 1.0, 2.0, 3.0]),
        ..AttentionConfig::default()
    };
    let set = gen_inputs(&cfg)?;
    let (calib, eval) = set.split_at(set.len() / 2)?;
    let pipeline = Pipeline::new(&cfg)?;
    let reference = pipeline.forward(&eval, &QuantPlan::float(cfg.n_layers), None)?;
    let plan = calibrate_plan(&pipeline, &calib, &[QuantPoint::SoftmaxOut], 8, false)?;

    let plain = pipeline.forward(&eval, &plan, None)?;
    println!("{:<20} {:7.2} dB", "none", sqnr_db(&reference, &plain)?.mean_db);
    let bins = TimeBins::new(4, cfg.n_timesteps)?;
    for g in [
        Granularity::PerTensor,
        Granularity::PerHead,
        Granularity::TimestepPerTensor(bins),
        Granularity::TimestepPerHead(bins),
    ] {
        let corrections = calibrate_corrections(&pipeline, &calib, &plan, g)?;
        let out = pipeline.forward(&eval, &plan, Some(&corrections))?;
        println!("{:<20} {:7.2} dB", g.tag(), sqnr_db(&reference, &out)?.mean_db);
    }
    Ok(())
}
