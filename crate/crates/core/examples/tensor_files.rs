//! Writing and reading tensors in the binary and JSON formats.

use softmax_bias::io::{encode_qbt, load_json, load_qbt, save_json, save_qbt};
use softmax_bias::Tensor;

fn main() -> softmax_bias::Result<()> {
    let dir = std::env::temp_dir().join("softmax-bias-files");
    std::fs::create_dir_all(&dir).map_err(|e| softmax_bias::Error::Format(e.to_string()))?;
    let t = Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.5)?;

    let bin = dir.join("t.qbt");
    save_qbt(&bin, &t)?;
    println!("{} bytes, header {:?}", encode_qbt(&t).len(), &encode_qbt(&t)[..8]);
    assert_eq!(load_qbt(&bin)?, t);

    let json = dir.join("t.json");
    save_json(&json, &t)?;
    println!("{}", std::fs::read_to_string(&json).unwrap_or_default());
    assert_eq!(load_json(&json)?, t);
    Ok(())
}
