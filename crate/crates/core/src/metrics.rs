//! PSNR, SSIM and the dataset evaluation harness.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::data::{add_awgn, Dataset};
use crate::error::{invalid, Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn to_255(x: f32) -> f64 {
    x.clamp(0.0, 1.0) as f64 * 255.0
}

/// PSNR in dB of two `[0, 1]` images (clipped, then scaled to `[0, 255]`).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    psnr_with_peak(a, b, 255.0)
}

pub fn psnr_with_peak(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let scale = peak / 255.0;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (to_255(x) - to_255(y)) * scale;
            d * d
        })
        .sum();
    let mse = sse / a.numel() as f64;
    if mse < peak * peak * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).clamp(0.0, PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// SSIM of one channel given on the `[0, 255]` scale.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(invalid!("ssim needs at least {k}x{k} pixels, got {h}x{w}"));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(invalid!("ssim plane length does not match {h}x{w}"));
    }
    let win = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let [ma, mb, maa, mbb, mab] =
        [a, b, &aa[..], &bb[..], &ab[..]].map(|p| filter_valid(p, h, w, &win));
    let n = ma.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = maa[i] - mu_a * mu_a;
        let vb = mbb[i] - mu_b * mu_b;
        let cov = mab[i] - mu_a * mu_b;
        total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Mean per-channel SSIM of two `[C, H, W]` images in `[0, 1]` (clipped).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let [c, h, w] = a.shape()[..] else {
        return Err(invalid!("ssim expects [C, H, W], got {:?}", a.shape()));
    };
    let mut sum = 0.0;
    for ch in 0..c {
        let span = ch * h * w..(ch + 1) * h * w;
        let pa: Vec<f64> = a.data()[span.clone()].iter().map(|&v| to_255(v)).collect();
        let pb: Vec<f64> = b.data()[span].iter().map(|&v| to_255(v)).collect();
        sum += ssim_plane(&pa, &pb, h, w)?;
    }
    Ok(sum / c as f64)
}

/// Anything that maps a noisy `[C, H, W]` image to a restored one.
pub trait Denoiser: Sync {
    fn in_channels(&self) -> usize;

    fn param_count(&self) -> usize;

    fn denoise(&self, lq: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// Rough peak working-set size in bytes for one `h × w` forward pass.
    fn memory_estimate(&self, _h: usize, _w: usize) -> usize {
        0
    }
}

/// Returns its input; the baseline every trained model should beat.
#[derive(Debug, Clone, Copy)]
pub struct IdentityDenoiser {
    pub channels: usize,
}

impl Denoiser for IdentityDenoiser {
    fn in_channels(&self) -> usize {
        self.channels
    }

    fn param_count(&self) -> usize {
        0
    }

    fn denoise(&self, lq: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(lq.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset_name: String,
    pub sigma: f32,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub param_count: usize,
    pub notes: String,
}

pub const RESOURCE_EXHAUSTED: &str = "resource-exhausted";

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub sigmas: Vec<f32>,
    pub eval_seed: u64,
    /// Worker threads over images; results are assembled in image order.
    pub jobs: usize,
    /// Skip a dataset when the model's estimate for any image exceeds this many bytes.
    pub memory_budget: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sigmas: vec![15.0, 25.0, 50.0],
            eval_seed: 0,
            jobs: 1,
            memory_budget: None,
        }
    }
}

/// Seed of the evaluation noise for one `(image, sigma)` pair.
pub fn eval_noise_seed(eval_seed: u64, image_id: &str, sigma: f32) -> u64 {
    let digest = Sha256::digest(image_id.as_bytes());
    let id_word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    derive_seed(eval_seed, &[id_word, sigma.to_bits() as u64])
}

/// Noisy version of every image in `dataset` at `sigma`, as used by [`evaluate_model`].
pub fn noisy_images(dataset: &Dataset, sigma: f32, eval_seed: u64) -> Result<Vec<Tensor<f32>>> {
    dataset
        .manifest()
        .entries()
        .iter()
        .zip(dataset.images())
        .map(|(e, img)| add_awgn(img, sigma, eval_noise_seed(eval_seed, &e.image_id, sigma)))
        .collect()
}

fn eval_one(
    model: &dyn Denoiser,
    clean: &Tensor<f32>,
    id: &str,
    sigma: f32,
    seed: u64,
) -> Result<(f64, f64)> {
    let lq = add_awgn(clean, sigma, eval_noise_seed(seed, id, sigma))?;
    let out = model.denoise(&lq)?.map(|v| v.clamp(0.0, 1.0));
    Ok((psnr(&out, clean)?, ssim(&out, clean)?))
}

/// Evaluates `model` on every `(dataset, sigma)` pair; one report per pair.
pub fn evaluate_model(
    model: &dyn Denoiser,
    datasets: &[Dataset],
    opts: &EvalOptions,
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for ds in datasets {
        if let Some(c) = ds.channels() {
            if c != model.in_channels() {
                return Err(invalid!(
                    "dataset `{}` has {c} channels, model expects {}",
                    ds.name,
                    model.in_channels()
                ));
            }
        }
        let exhausted = opts.memory_budget.is_some_and(|budget| {
            ds.manifest()
                .entries()
                .iter()
                .any(|e| model.memory_estimate(e.height, e.width) > budget)
        });
        for &sigma in &opts.sigmas {
            let mut report = MetricReport {
                dataset_name: ds.name.clone(),
                sigma,
                psnr_db: 0.0,
                ssim: 0.0,
                n_images: 0,
                param_count: model.param_count(),
                notes: String::new(),
            };
            if exhausted {
                report.notes = RESOURCE_EXHAUSTED.to_string();
                reports.push(report);
                continue;
            }
            let ids: Vec<&str> = ds
                .manifest()
                .entries()
                .iter()
                .map(|e| e.image_id.as_str())
                .collect();
            let scores = parallel_map(ids.len(), opts.jobs, |i| {
                eval_one(model, &ds.images()[i], ids[i], sigma, opts.eval_seed)
            })?;
            let n = scores.len().max(1) as f64;
            report.psnr_db = scores.iter().map(|s| s.0).sum::<f64>() / n;
            report.ssim = scores.iter().map(|s| s.1).sum::<f64>() / n;
            report.n_images = scores.len();
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Runs `f` over `0..n` on up to `jobs` threads, returning results in index order.
pub(crate) fn parallel_map<R: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(jobs);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    (j * chunk..((j + 1) * chunk).min(n))
                        .map(f)
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "dataset,sigma,psnr,ssim,n_images,params,notes";

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{}",
            r.dataset_name, r.sigma, r.psnr_db, r.ssim, r.n_images, r.param_count, r.notes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], f)
    }

    #[test]
    fn psnr_examples() {
        let a = img(3, 8, 8, |i| (i % 200) as f32 / 255.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        let zeros = img(1, 4, 4, |_| 0.0);
        let ones = img(1, 4, 4, |_| 1.0);
        assert!(psnr(&zeros, &ones).unwrap().abs() < 1e-12);
        assert!(psnr(&zeros, &img(1, 4, 5, |_| 0.0)).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing() {
        let a = img(1, 6, 6, |i| (i as f32 * 0.013) % 0.8);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let b = a.map(|v| v + k as f32 / 255.0);
            let p = psnr(&a, &b).unwrap();
            assert_eq!(p, psnr(&b, &a).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = img(3, 16, 13, |i| ((i * 31) % 256) as f32 / 255.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&img(1, 10, 20, |_| 0.0), &img(1, 10, 20, |_| 0.0)).is_err());
    }

    #[test]
    fn identity_model_matches_noisy_psnr() {
        let ds = synth_dataset("s", 3, 3, 32, 32, 4).unwrap();
        let model = IdentityDenoiser { channels: 3 };
        let opts = EvalOptions {
            sigmas: vec![25.0],
            eval_seed: 9,
            ..Default::default()
        };
        let r = evaluate_model(&model, std::slice::from_ref(&ds), &opts).unwrap();
        let noisy = noisy_images(&ds, 25.0, 9).unwrap();
        let want: f64 = noisy
            .iter()
            .zip(ds.images())
            .map(|(n, c)| psnr(&n.map(|v| v.clamp(0.0, 1.0)), c).unwrap())
            .sum::<f64>()
            / 3.0;
        assert_eq!(r.len(), 1);
        assert!((r[0].psnr_db - want).abs() < 1e-12);
        assert!((r[0].psnr_db - 20.6).abs() < 0.6, "{}", r[0].psnr_db);
        let parallel = evaluate_model(&model, &[ds], &EvalOptions { jobs: 3, ..opts }).unwrap();
        assert_eq!(parallel, r);
    }

    #[test]
    fn memory_guard_marks_dataset() {
        struct Hungry;
        impl Denoiser for Hungry {
            fn in_channels(&self) -> usize {
                1
            }
            fn param_count(&self) -> usize {
                7
            }
            fn denoise(&self, lq: &Tensor<f32>) -> Result<Tensor<f32>> {
                Ok(lq.clone())
            }
            fn memory_estimate(&self, h: usize, w: usize) -> usize {
                h * w * 1000
            }
        }
        let ds = synth_dataset("big", 2, 1, 16, 16, 1).unwrap();
        let opts = EvalOptions {
            sigmas: vec![15.0, 50.0],
            memory_budget: Some(1000),
            ..Default::default()
        };
        let r = evaluate_model(&Hungry, &[ds], &opts).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r
            .iter()
            .all(|m| m.notes == RESOURCE_EXHAUSTED && m.n_images == 0));
        assert!(reports_to_csv(&r).starts_with(REPORT_HEADER));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let ds = synth_dataset("s", 1, 1, 16, 16, 1).unwrap();
        let model = IdentityDenoiser { channels: 3 };
        assert!(evaluate_model(&model, &[ds], &EvalOptions::default()).is_err());
    }

    #[test]
    fn empty_sigma_list_gives_no_reports() {
        let ds = synth_dataset("s", 1, 3, 16, 16, 1).unwrap();
        let opts = EvalOptions {
            sigmas: vec![],
            ..Default::default()
        };
        assert!(
            evaluate_model(&IdentityDenoiser { channels: 3 }, &[ds], &opts)
                .unwrap()
                .is_empty()
        );
    }
}
