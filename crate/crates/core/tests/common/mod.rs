//! Fixtures shared by the integration tests.
#![allow(dead_code)]

/// SSIM of the crafted pairs below as computed by `oracles/ssim_ref.py`.
pub const SSIM_REFERENCE: [(&str, f64); 5] = [
    ("ramp_shift", 0.996346153311053),
    ("constant_eps", 0.999950513429356),
    ("binary_inverse", -0.9958490693513736),
    ("sine_affine", 0.9733901224947118),
    ("hash_noise", 0.021783030168161282),
];

pub const PAIR_H: usize = 24;
pub const PAIR_W: usize = 20;

fn plane(f: impl Fn(i64, i64) -> f64) -> Vec<f64> {
    (0..PAIR_H as i64)
        .flat_map(|y| (0..PAIR_W as i64).map(move |x| (x, y)))
        .map(|(x, y)| f(x, y))
        .collect()
}

/// The same pairs as the oracle script, on the `[0, 255]` scale.
pub fn ssim_pairs() -> Vec<(&'static str, Vec<f64>, Vec<f64>)> {
    let ramp = |x: i64, y: i64| ((x * 8 + y * 4) % 256) as f64;
    let chk = |x: i64, y: i64| {
        if ((x / 3) + (y / 2)) % 2 == 1 {
            255.0
        } else {
            0.0
        }
    };
    let sine = |x: i64, y: i64| {
        (127.5 + 100.0 * (0.3 * x as f64).sin() * (0.2 * y as f64).cos()).round_ties_even()
    };
    vec![
        (
            "ramp_shift",
            plane(ramp),
            plane(|x, y| (ramp(x, y) + 10.0).min(255.0)),
        ),
        ("constant_eps", plane(|_, _| 100.0), plane(|_, _| 101.0)),
        (
            "binary_inverse",
            plane(chk),
            plane(|x, y| 255.0 - chk(x, y)),
        ),
        (
            "sine_affine",
            plane(sine),
            plane(|x, y| (sine(x, y) * 0.8 + 20.0).round_ties_even()),
        ),
        (
            "hash_noise",
            plane(|x, y| (((x * 73856093) ^ (y * 19349663)) % 251) as f64),
            plane(|x, y| (((x * 83492791) ^ (y * 2654435761)) % 251) as f64),
        ),
    ]
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against U(lo, hi).
pub fn ks_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = ((s - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Critical KS distance at significance 0.01 for large `n`.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
