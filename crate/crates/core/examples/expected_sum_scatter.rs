//! Expected quantized softmax sum against SQNR across score scales, via the
//! experiment harness.

use softmax_bias::harness::{cmd_scatter, ExperimentConfig};
use softmax_bias::metrics::spearman;

fn main() -> softmax_bias::Result<()> {
    let dir = std::env::temp_dir().join("softmax-bias-scatter");
    let mut cfg = ExperimentConfig {
        out_dir: dir.clone(),
        seeds: 1,
        ..ExperimentConfig::default()
    };
    cfg.attention.n_seq = 128;
    cfg.attention.n_samples = 16;
    let rows = cmd_scatter(&cfg)?;
    for r in &rows {
        println!(
            "logit_std {:5.2}  expected sum {:.4}  SQNR {:6.2} dB",
            r.logit_std, r.expected_sum, r.sqnr_db
        );
    }
    let sums: Vec<f64> = rows.iter().map(|r| r.expected_sum).collect();
    let sqnr: Vec<f64> = rows.iter().map(|r| r.sqnr_db).collect();
    println!("Spearman rank correlation {:.3}", spearman(&sums, &sqnr)?);
    println!("rows written to {}", dir.join("scatter.csv").display());
    Ok(())
}
