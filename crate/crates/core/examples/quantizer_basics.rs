//! Fake quantization on an asymmetric grid and the softmax output grid.

use softmax_bias::{calibrate_minmax, fake_quant, quantize_int, softmax_grid, QuantParams, Scheme, Tensor};

fn main() -> softmax_bias::Result<()> {
    let p = QuantParams::asymmetric(0.1, 3, 4)?;
    println!(
        "grid [{:.2}, {:.2}] in steps of {}",
        p.grid_min(),
        p.grid_max(),
        p.scale()
    );
    for x in [-1.0, -0.26, 0.04, 0.05, 0.5, 2.0] {
        println!(
            "  x = {x:>6.2} -> level {:>2} -> {:>6.3}",
            p.quantize_value(x),
            p.fake_quant_value(x)
        );
    }

    let x = Tensor::new(vec![2, 3], vec![-0.7, 0.0, 0.3, 1.2, 2.5, -0.1])?;
    let calibrated = calibrate_minmax(std::slice::from_ref(&x), 8, Scheme::Asymmetric)?;
    println!(
        "min-max 8-bit: scale {:.5}, zero point {}",
        calibrated.scale(),
        calibrated.zero_point()
    );
    println!("levels {:?}", quantize_int(&x, &calibrated).data());
    println!("dequantized {:?}", fake_quant(&x, &calibrated).data());

    let grid = softmax_grid(8)?;
    let probs = Tensor::new(vec![4], vec![0.001, 0.002, 0.05, 0.947])?;
    let q = fake_quant(&probs, &grid);
    println!("softmax {:?} -> {:?} (sum {:.4})", probs.data(), q.data(), q.sum());
    Ok(())
}
