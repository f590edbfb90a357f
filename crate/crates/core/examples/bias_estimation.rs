//! Estimating the softmax output bias, correcting it and folding the
//! correction into the dequantization offset.

use softmax_bias::attention::attention_forward_traced;
use softmax_bias::{
    absorb_into_offset, apply_elementwise, dequantize_with_offset, estimate_softmax_bias, expected_softmax_sum,
    gen_inputs, quantize_int, softmax_grid, AttentionConfig, Granularity, QuantMap, QuantPoint,
};

fn main() -> softmax_bias::Result<()> {
    let cfg = AttentionConfig {
        n_layers: 1,
        n_samples: 32,
        ..AttentionConfig::default()
    };
    let set = gen_inputs(&cfg)?;
    let grid = softmax_grid(8)?;
    let quant = QuantMap::new().with(QuantPoint::SoftmaxOut, grid);
    let outputs = set
        .samples()
        .iter()
        .map(|s| Ok(attention_forward_traced(&s.q, &s.k, &s.v, &quant, None, None)?.probs))
        .collect::<softmax_bias::Result<Vec<_>>>()?;
    println!(
        "expected row sum after 8-bit quantization: {:.5}",
        expected_softmax_sum(&outputs)?
    );

    for g in [Granularity::PerTensor, Granularity::PerHead] {
        let c = estimate_softmax_bias(outputs.iter().map(|y| (y, None)), g)?;
        let fixed = outputs
            .iter()
            .map(|y| apply_elementwise(y, &c, None))
            .collect::<softmax_bias::Result<Vec<_>>>()?;
        println!(
            "{:<10} beta {:?} -> expected row sum {:.5}",
            g.tag(),
            c.beta().iter().map(|b| format!("{b:.3e}")).collect::<Vec<_>>(),
            expected_softmax_sum(&fixed)?
        );
    }

    // The same correction applied through the dequantization offset.
    let c = estimate_softmax_bias(outputs.iter().map(|y| (y, None)), Granularity::PerTensor)?;
    let offset = absorb_into_offset(&grid, c.beta()[0]);
    let s = &set.samples()[0];
    let probs = attention_forward_traced(&s.q, &s.k, &s.v, &QuantMap::new(), None, None)?.probs;
    let head0 = softmax_bias::Tensor::new(vec![cfg.n_seq, cfg.n_seq], probs.outer(0).to_vec())?;
    let levels = quantize_int(&head0, &grid);
    let absorbed = dequantize_with_offset(&levels, grid.scale(), offset)?;
    let elementwise = apply_elementwise(&outputs[0], &c, None)?;
    println!(
        "offset {offset:.3e} reproduces the elementwise correction bit for bit: {}",
        absorbed.data() == elementwise.outer(0)
    );
    Ok(())
}
