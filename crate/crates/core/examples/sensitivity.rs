//! Quantizing one attention activation at a time.

use softmax_bias::{sensitivity_analysis, AttentionConfig};

fn main() -> softmax_bias::Result<()> {
    let cfg = AttentionConfig {
        n_seq: 128,
        n_samples: 16,
        ..AttentionConfig::default()
    };
    for bits in [6, 8] {
        println!("{bits}-bit");
        for (point, report) in sensitivity_analysis(&cfg, bits)? {
            println!("  {:<12} {:7.2} dB", point.name(), report.mean_db);
        }
    }
    Ok(())
}
