//! Acceptance criteria for the softmax bias correction simulator.
//!
//! One test per criterion. Each prints a PASS/FAIL line with the measured
//! values; run with `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see them in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softmax_bias::attention::attention_forward_traced;
use softmax_bias::harness::{cmd_ablate, cmd_scatter, cmd_sensitivity, CorrectionKind, ExperimentConfig};
use softmax_bias::metrics::spearman;
use softmax_bias::tensor::softmax;
use softmax_bias::*;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_logits(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| (rng.random::<f64>() - 0.5) * 2.0 * std * 1.7)
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Quantizer correctness over random grids.
fn ac1_quantizer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 10_000;
    for case in 0..cases {
        let bits: u8 = rng.random_range(2..=16);
        let qmax = (1u32 << bits) - 1;
        let scale = 10f64.powf(rng.random_range(-4.0..1.0));
        let z = rng.random_range(0..=qmax);
        let p = QuantParams::asymmetric(scale, z, bits).unwrap();
        let (lo, hi) = (p.grid_min(), p.grid_max());
        let x_in = lo + rng.random::<f64>() * (hi - lo);
        let err = (p.fake_quant_value(x_in) - x_in).abs();
        check(
            err <= scale / 2.0,
            format!("case {case}: |fq(x)-x| = {err:e} > s/2 = {:e}", scale / 2.0),
        )?;

        let span = (hi - lo) * 1.5;
        let a = lo - 0.25 * (hi - lo) + rng.random::<f64>() * span;
        let b = lo - 0.25 * (hi - lo) + rng.random::<f64>() * span;
        for x in [x_in, a, b] {
            let y = p.fake_quant_value(x);
            check(
                p.fake_quant_value(y) == y,
                format!("case {case}: not idempotent at {x}"),
            )?;
        }
        let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
        check(
            p.quantize_value(x1) <= p.quantize_value(x2),
            format!("case {case}: not monotone on {x1} <= {x2}"),
        )?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases in {elapsed:?}"))
}

// ---------------------------------------------------------------------------
// 2. Softmax bias estimator against a naive loop oracle.

/// Double-double accumulator built on error-free TwoSum.
#[derive(Clone, Copy, Default)]
struct ExactishSum {
    hi: f64,
    lo: f64,
}

impl std::ops::AddAssign<f64> for ExactishSum {
    fn add_assign(&mut self, v: f64) {
        let s = self.hi + v;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (v - bb);
        let lo = self.lo + err;
        self.hi = s + lo;
        self.lo = lo - (self.hi - s);
    }
}

impl std::ops::Div<f64> for ExactishSum {
    type Output = f64;
    fn div(self, d: f64) -> f64 {
        (self.hi + self.lo) / d
    }
}

/// Returns (per-tensor beta, per-head betas) by direct evaluation over
/// nested loops.
fn naive_softmax_bias(ys: &[Tensor]) -> (f64, Vec<f64>) {
    let shape = ys[0].shape();
    let (h, n) = (shape[0], shape[1]);
    let mut total = ExactishSum::default();
    let mut per_head = vec![ExactishSum::default(); h];
    for y in ys {
        let d = y.data();
        for i in 0..h {
            for j in 0..n {
                for k in 0..n {
                    let v = d[(i * n + j) * n + k];
                    total += v;
                    per_head[i] += v;
                }
            }
        }
    }
    let samples = ys.len() as f64;
    let target = 1.0 / n as f64;
    let nn = (n * n) as f64;
    let pt = target - (total / samples) / (h as f64 * nn);
    let ph = per_head.iter().map(|&s| target - (s / samples) / nn).collect();
    (pt, ph)
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn ac2_bias_oracle() -> Outcome {
    let y = Tensor::new(vec![1, 2, 2], vec![0.4; 4]).unwrap();
    let hand = estimate_softmax_bias([(&y, None)], Granularity::PerTensor)
        .unwrap()
        .beta()[0];
    check(
        rel_err(hand, 0.1) <= 1e-12,
        format!("hand case beta = {hand}, expected 0.1"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for set in 0..100 {
        let h = rng.random_range(1..=4);
        let n = rng.random_range(2..=32);
        let count = rng.random_range(1..=6);
        let bits = rng.random_range(2..=12);
        let grid = softmax_grid(bits).unwrap();
        let std = rng.random_range(0.2..6.0);
        let ys: Vec<Tensor> = (0..count)
            .map(|_| fake_quant(&softmax(&random_logits(&mut rng, vec![h, n, n], std)), &grid))
            .collect();
        let (pt, ph) = naive_softmax_bias(&ys);
        let est_pt = estimate_softmax_bias(ys.iter().map(|y| (y, None)), Granularity::PerTensor).unwrap();
        let est_ph = estimate_softmax_bias(ys.iter().map(|y| (y, None)), Granularity::PerHead).unwrap();
        let e = rel_err(est_pt.beta()[0], pt);
        check(
            e <= 1e-12,
            format!("set {set}: per-tensor {} vs oracle {pt} (rel {e:e})", est_pt.beta()[0]),
        )?;
        worst = worst.max(e);
        for (i, (&got, &want)) in est_ph.beta().iter().zip(&ph).enumerate() {
            let e = rel_err(got, want);
            check(
                e <= 1e-12,
                format!("set {set} head {i}: {got} vs oracle {want} (rel {e:e})"),
            )?;
            worst = worst.max(e);
        }
    }
    Ok(format!("100 sets + hand case, worst relative error {worst:e}"))
}

// ---------------------------------------------------------------------------
// 3. Offset absorption equals elementwise correction bit for bit.
fn ac3_absorption() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let h = rng.random_range(1..=4);
        let n = rng.random_range(2..=24);
        let std = rng.random_range(0.5..5.0);
        let probs = softmax(&random_logits(&mut rng, vec![h, n, n], std));
        let bits = rng.random_range(2..=16);
        // Both ways of building a softmax-output quantizer.
        let p = if case % 2 == 0 {
            softmax_grid(bits).unwrap()
        } else {
            calibrate_minmax(std::slice::from_ref(&probs), bits, Scheme::Asymmetric).unwrap()
        };
        let per_head = rng.random_bool(0.5);
        let betas: Vec<f64> = (0..if per_head { h } else { 1 })
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        let g = if per_head {
            Granularity::PerHead
        } else {
            Granularity::PerTensor
        };
        let correction = BiasCorrection::new(g, n, betas).unwrap();

        let elementwise = apply_elementwise(&fake_quant(&probs, &p), &correction, None).unwrap();
        let levels = quantize_int(&probs, &p);
        for head in 0..h {
            let offset = absorb_into_offset(&p, correction.beta_for(head, None).unwrap());
            let single = IntTensor::new(vec![n, n], levels.outer(head).to_vec(), bits).unwrap();
            let absorbed = dequantize_with_offset(&single, p.scale(), offset).unwrap();
            for (idx, (a, b)) in absorbed.data().iter().zip(elementwise.outer(head)).enumerate() {
                check(
                    a.to_bits() == b.to_bits(),
                    format!("case {case} head {head} elem {idx}: offset path {a:e} != elementwise {b:e}"),
                )?;
            }
        }
    }
    Ok("1000 tensors, zero tolerance".into())
}

// ---------------------------------------------------------------------------
// 4. Sum restoration on the calibration set and on held-out data.
fn ac4_sum_restoration() -> Outcome {
    let grid = softmax_grid(8).unwrap();
    let mut worst_cal: f64 = 0.0;
    let mut worst_held: f64 = 0.0;
    for seed in 0..10 {
        let cfg = AttentionConfig {
            seed,
            n_layers: 1,
            ..AttentionConfig::default()
        };
        let set = gen_inputs(&cfg).unwrap();
        let quant = QuantMap::new().with(QuantPoint::SoftmaxOut, grid);
        let outputs: Vec<Tensor> = set
            .samples()
            .iter()
            .map(|s| {
                attention_forward_traced(&s.q, &s.k, &s.v, &quant, None, None)
                    .unwrap()
                    .probs
            })
            .collect();
        let (cal, held) = outputs.split_at(outputs.len() / 2);
        let before = expected_softmax_sum(cal).unwrap();
        let c = estimate_softmax_bias(cal.iter().map(|y| (y, None)), Granularity::PerTensor).unwrap();
        let fix =
            |ys: &[Tensor]| -> Vec<Tensor> { ys.iter().map(|y| apply_elementwise(y, &c, None).unwrap()).collect() };
        let cal_sum = expected_softmax_sum(&fix(cal)).unwrap();
        let held_sum = expected_softmax_sum(&fix(held)).unwrap();
        check(
            before < 1.0,
            format!("seed {seed}: uncorrected sum {before} is not below 1"),
        )?;
        check(
            (cal_sum - 1.0).abs() <= 1e-9,
            format!("seed {seed}: calibration sum {cal_sum}"),
        )?;
        check(
            (held_sum - 1.0).abs() <= 0.02,
            format!("seed {seed}: held-out sum {held_sum}"),
        )?;
        worst_cal = worst_cal.max((cal_sum - 1.0).abs());
        worst_held = worst_held.max((held_sum - 1.0).abs());
    }
    Ok(format!(
        "10 seeds, worst |sum-1|: calibration {worst_cal:e}, held-out {worst_held:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Most long-sequence softmax outputs round to zero.
fn ac5_zero_fraction() -> Outcome {
    let start = Instant::now();
    let grid = softmax_grid(8).unwrap();
    let quant = QuantMap::new().with(QuantPoint::SoftmaxOut, grid);
    let mut fractions = Vec::new();
    for seed in 0..10 {
        let cfg = AttentionConfig {
            n_heads: 1,
            n_seq: 4096,
            d_head: 16,
            n_layers: 1,
            n_samples: 1,
            logit_std: 1.0,
            timestep_spread: 0.0,
            seed,
            ..AttentionConfig::default()
        };
        let set = gen_inputs(&cfg).unwrap();
        let s = &set.samples()[0];
        let probs = attention_forward_traced(&s.q, &s.k, &s.v, &quant, None, None)
            .unwrap()
            .probs;
        let f = zero_fraction(&[probs]).unwrap();
        check(f >= 0.95, format!("seed {seed}: zero fraction {f}"))?;
        fractions.push(f);
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    let min = fractions.iter().copied().fold(1.0, f64::min);
    Ok(format!("min zero fraction {min:.4} over 10 seeds in {elapsed:?}"))
}

// ---------------------------------------------------------------------------
// 6. Softmax output is by far the most sensitive activation.
fn ac6_sensitivity(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    check(
        cfg.seeds >= 10 && cfg.bits == 8,
        "default config must use >= 10 seeds at 8 bits",
    )?;
    let rows = cmd_sensitivity(&cfg).map_err(|e| e.to_string())?;
    let mut by_point: BTreeMap<QuantPoint, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_point.entry(r.quant_point).or_default().push(r.sqnr_db);
    }
    let means: Vec<(QuantPoint, f64)> = by_point.iter().map(|(p, v)| (*p, mean(v))).collect();
    let softmax_mean = means.iter().find(|(p, _)| *p == QuantPoint::SoftmaxOut).unwrap().1;
    let second = means
        .iter()
        .filter(|(p, _)| *p != QuantPoint::SoftmaxOut)
        .map(|(_, m)| *m)
        .fold(f64::INFINITY, f64::min);
    let summary: Vec<String> = means.iter().map(|(p, m)| format!("{p}={m:.2}")).collect();
    check(
        softmax_mean < second,
        format!("softmax_out is not the minimum: {}", summary.join(" ")),
    )?;
    check(
        second - softmax_mean >= 3.0,
        format!("gap {:.2} dB < 3 dB: {}", second - softmax_mean, summary.join(" ")),
    )?;
    Ok(format!("{} (gap {:.2} dB)", summary.join(" "), second - softmax_mean))
}

fn ablation_means(cfg: &ExperimentConfig) -> std::result::Result<BTreeMap<&'static str, f64>, String> {
    let rows = cmd_ablate(cfg).map_err(|e| e.to_string())?;
    let mut acc: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        acc.entry(r.correction.name()).or_default().push(r.sqnr_db);
    }
    Ok(acc.into_iter().map(|(k, v)| (k, mean(&v))).collect())
}

fn fmt_means(m: &BTreeMap<&'static str, f64>) -> String {
    CorrectionKind::ALL
        .iter()
        .map(|k| format!("{}={:.2}", k.name(), m[k.name()]))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// 7. Per-tensor correction improves pipeline SQNR.
fn ac7_correction_benefit(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    check(
        cfg.seeds >= 10 && cfg.bits == 8,
        "default config must use >= 10 seeds at 8 bits",
    )?;
    let m = ablation_means(&cfg)?;
    let gain = m["per-tensor"] - m["none"];
    check(
        gain >= 1.0,
        format!("per-tensor gain {gain:.2} dB < 1 dB: {}", fmt_means(&m)),
    )?;
    Ok(format!("gain {gain:.2} dB; {}", fmt_means(&m)))
}

// ---------------------------------------------------------------------------
// 8. Per-head correction is at least as good with heterogeneous heads.
fn ac8_granularity(out: &Path) -> Outcome {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.attention.head_logit_scales = Some(vec![0.5, 1.0, 2.0, 3.0]);
    check(cfg.seeds >= 10, "needs >= 10 seeds")?;
    let m = ablation_means(&cfg)?;
    check(
        m["per-head"] >= m["per-tensor"],
        format!("per-head below per-tensor: {}", fmt_means(&m)),
    )?;
    Ok(format!(
        "per-head - per-tensor = {:.2} dB; {}",
        m["per-head"] - m["per-tensor"],
        fmt_means(&m)
    ))
}

// ---------------------------------------------------------------------------
// 9. SQNR against brute-force evaluation.
fn brute_sqnr(reference: &[Vec<f64>], quantized: &[Vec<f64>]) -> f64 {
    let mut ratio_sum = 0.0;
    for (r, q) in reference.iter().zip(quantized) {
        let mut signal = 0.0;
        let mut noise = 0.0;
        for i in 0..r.len() {
            signal += r[i] * r[i];
            noise += (q[i] - r[i]) * (q[i] - r[i]);
        }
        ratio_sum += signal / noise;
    }
    10.0 * (ratio_sum / reference.len() as f64).log10()
}

fn ac9_sqnr_oracle() -> Outcome {
    let signal = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    let noisy = Tensor::new(vec![2], vec![3.3, 4.4]).unwrap();
    let db = sqnr_db(&[signal], &[noisy]).unwrap().mean_db;
    check((db - 20.0).abs() <= 1e-9, format!("20 dB fixture gave {db}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for fixture in 0..50 {
        let count = rng.random_range(1..=8);
        let len = rng.random_range(1..=64);
        let noise = 10f64.powf(rng.random_range(-4.0..0.0));
        let reference: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let quantized: Vec<Vec<f64>> = reference
            .iter()
            .map(|r| r.iter().map(|x| x + noise * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let want = brute_sqnr(&reference, &quantized);
        let to_t = |v: &Vec<Vec<f64>>| -> Vec<Tensor> {
            v.iter().map(|x| Tensor::new(vec![len], x.clone()).unwrap()).collect()
        };
        let got = sqnr_db(&to_t(&reference), &to_t(&quantized)).unwrap().mean_db;
        check(
            (got - want).abs() <= 1e-9,
            format!("fixture {fixture}: {got} vs brute force {want}"),
        )?;
        worst = worst.max((got - want).abs());
    }
    Ok(format!("20 dB fixture + 50 random fixtures, worst |diff| {worst:e} dB"))
}

// ---------------------------------------------------------------------------
// 10. Expected softmax sum and SQNR move together across score scales.
fn ac10_scatter(out: &Path) -> Outcome {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        seeds: 2,
        ..ExperimentConfig::default()
    };
    cfg.attention.n_samples = 32;
    check(cfg.sweep.logit_std.len() >= 8, "sweep needs >= 8 logit_std values")?;
    let rows = cmd_scatter(&cfg).map_err(|e| e.to_string())?;
    let sums: Vec<f64> = rows.iter().map(|r| r.expected_sum).collect();
    let sqnr: Vec<f64> = rows.iter().map(|r| r.sqnr_db).collect();
    let rho = spearman(&sums, &sqnr).map_err(|e| e.to_string())?;
    check(rho > 0.0, format!("Spearman {rho:.3} over {} points", rows.len()))?;
    Ok(format!("Spearman {rho:.3} over {} points", rows.len()))
}

// ---------------------------------------------------------------------------
// 11. Every CLI command is byte-for-byte reproducible.
fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn ac11_determinism(tmp: &Path) -> Outcome {
    let config = tmp.join("config.json");
    fs::write(
        &config,
        r#"{
  "attention": {"n_heads": 2, "n_seq": 32, "d_head": 8, "n_layers": 2, "n_samples": 8, "n_timesteps": 4},
  "seeds": 2,
  "sweep": {"logit_std": [0.5, 1.0, 2.0], "bitwidths": [6, 8]}
}"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_softmax-bias");
    let mut compared = 0;
    for cmd in ["gen", "sensitivity", "ablate", "scatter"] {
        let mut runs = Vec::new();
        for run in 0..2 {
            let out = tmp.join(format!("{cmd}-{run}"));
            let status = Command::new(bin)
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(["--seed", "42"])
                .output()
                .unwrap();
            check(
                status.status.success(),
                format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)),
            )?;
            runs.push(read_tree(&out));
        }
        check(!runs[0].is_empty(), format!("{cmd} wrote no files"))?;
        check(runs[0] == runs[1], format!("{cmd} outputs differ between runs"))?;
        compared += runs[0].len();
    }
    Ok(format!("4 commands, {compared} files identical across reruns"))
}

/// Prints the criterion's PASS/FAIL line and fails the test on FAIL.
fn report(name: &str, run: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = run();
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
        Err(detail) => {
            println!("FAIL  {name} [{secs:.1}s]: {detail}");
            panic!("{name} failed: {detail}");
        }
    }
}

fn with_tmp(run: impl FnOnce(&Path) -> Outcome) -> impl FnOnce() -> Outcome {
    move || {
        let tmp = tempfile::tempdir().unwrap();
        run(tmp.path())
    }
}

#[test]
fn ac01_quantizer_correctness() {
    report("AC1 quantizer correctness", ac1_quantizer);
}

#[test]
fn ac02_bias_oracle() {
    report("AC2 per-tensor/per-head bias oracle", ac2_bias_oracle);
}

#[test]
fn ac03_offset_absorption() {
    report("AC3 offset absorption equivalence", ac3_absorption);
}

#[test]
fn ac04_sum_restoration() {
    report("AC4 sum restoration", ac4_sum_restoration);
}

#[test]
fn ac05_zero_fraction() {
    report("AC5 zero fraction at n_seq=4096", ac5_zero_fraction);
}

#[test]
fn ac06_sensitivity_ordering() {
    report("AC6 sensitivity ordering", with_tmp(ac6_sensitivity));
}

#[test]
fn ac07_correction_benefit() {
    report("AC7 correction benefit", with_tmp(ac7_correction_benefit));
}

#[test]
fn ac08_granularity_ordering() {
    report("AC8 granularity ordering", with_tmp(ac8_granularity));
}

#[test]
fn ac09_sqnr_oracle() {
    report("AC9 SQNR oracle", ac9_sqnr_oracle);
}

#[test]
fn ac10_expected_sum_association() {
    report("AC10 expected-sum/SQNR association", with_tmp(ac10_scatter));
}

#[test]
fn ac11_cli_determinism() {
    report("AC11 CLI determinism", with_tmp(ac11_determinism));
}
