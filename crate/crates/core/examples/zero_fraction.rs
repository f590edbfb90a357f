//! How many softmax outputs of a long sequence round to zero.

use softmax_bias::attention::attention_forward_traced;
use softmax_bias::{gen_inputs, softmax_grid, zero_fraction, AttentionConfig, QuantMap, QuantPoint};

fn main() -> softmax_bias::Result<()> {
    for n_seq in [64, 256, 1024, 4096] {
        let cfg = AttentionConfig {
            n_heads: 1,
            n_seq,
            n_layers: 1,
            n_samples: 1,
            timestep_spread: 0.0,
            ..AttentionConfig::default()
        };
        let set = gen_inputs(&cfg)?;
        let s = &set.samples()[0];
        let mut line = format!("n_seq {n_seq:>5}:");
        for bits in [4, 8, 12] {
            let quant = QuantMap::new().with(QuantPoint::SoftmaxOut, softmax_grid(bits)?);
            let probs = attention_forward_traced(&s.q, &s.k, &s.v, &quant, None, None)?.probs;
            line += &format!("  {bits:>2}-bit {:.3}", zero_fraction(&[probs])?);
        }
        println!("{line}");
    }
    Ok(())
}
