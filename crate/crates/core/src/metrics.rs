//! Image quality metrics: SSIM, relative L1 and PSNR on `[0, 1]` data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub rel_l1_pct: f64,
    pub psnr_db: f64,
}

impl MetricReport {
    pub fn compute(pred: &Field, reference: &Field) -> Result<Self> {
        Ok(Self {
            ssim: ssim(pred, reference)?,
            rel_l1_pct: rel_l1(pred, reference)?,
            psnr_db: psnr(pred, reference)?,
        })
    }

    /// Field-wise mean, summed in slice order.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = MetricReport {
            ssim: 0.0,
            rel_l1_pct: 0.0,
            psnr_db: 0.0,
        };
        for r in reports {
            acc.ssim += r.ssim;
            acc.rel_l1_pct += r.rel_l1_pct;
            acc.psnr_db += r.psnr_db;
        }
        Some(MetricReport {
            ssim: acc.ssim / n,
            rel_l1_pct: acc.rel_l1_pct / n,
            psnr_db: acc.psnr_db / n,
        })
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, L = 1), averaged over channels.
pub fn ssim(a: &Field, b: &Field) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.channel(ch).into_data();
        let y = b.channel(ch).into_data();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let exx = filter_valid(&xx, h, w, &k);
        let eyy = filter_valid(&yy, h, w, &k);
        let exy = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let num = (2.0 * ux * uy + C1) * (2.0 * sxy + C2);
            let den = (ux * ux + uy * uy + C1) * (sxx + syy + C2);
            sum += num / den;
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// `100 * mean |a - b|`.
pub fn rel_l1(a: &Field, reference: &Field) -> Result<f64> {
    a.same_shape(reference)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(reference.data())
        .map(|(p, q)| (p - q).abs())
        .sum();
    Ok(100.0 * sum / a.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Field, b: &Field) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Rng;
    use proptest::prelude::*;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Field {
        let mut rng = Rng::new(seed);
        let data = (0..h * w * c).map(|_| rng.uniform()).collect();
        Field::new(h, w, c, data).unwrap()
    }

    #[test]
    fn ssim_identity_is_exact() {
        let a = random_image(1, 20, 17, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(rel_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn ssim_of_constants() {
        let a = Field::filled(16, 16, 1, 0.5).unwrap();
        let b = Field::filled(16, 16, 1, 0.75).unwrap();
        let want = (2.0 * 0.5 * 0.75 + 1e-4) / (0.25 + 0.5625 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 0.9229).abs() < 5e-4);
    }

    #[test]
    fn ssim_tiny_noise() {
        let a = random_image(2, 32, 32, 1);
        let mut rng = Rng::new(4);
        let noisy = a.map(|v| v + (rng_pm(&mut rng)) * 1e-4);
        assert!(ssim(&a, &noisy).unwrap() > 0.999);
    }

    fn rng_pm(rng: &mut Rng) -> f64 {
        rng.uniform() * 2.0 - 1.0
    }

    #[test]
    fn l1_and_psnr_goldens() {
        let a = Field::filled(4, 4, 1, 0.5).unwrap();
        let b = Field::filled(4, 4, 1, 0.25).unwrap();
        assert_eq!(rel_l1(&a, &b).unwrap(), 25.0);
        assert_eq!(rel_l1(&b, &a).unwrap(), 25.0);
        let z = Field::filled(4, 4, 1, 0.0).unwrap();
        let t = Field::filled(4, 4, 1, 0.1).unwrap();
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let a = Field::zeros(16, 16, 1).unwrap();
        let b = Field::zeros(16, 16, 3).unwrap();
        assert!(ssim(&a, &b).is_err());
        assert!(rel_l1(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        let small = Field::zeros(10, 16, 1).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        // Monte Carlo: average over draws at each noise level
        let a = random_image(5, 24, 24, 1);
        let mut rng = Rng::new(6);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mean: f64 = (0..20)
                .map(|_| {
                    let n = a.map(|v| v + amp * (rng.uniform() * 2.0 - 1.0));
                    psnr(&a, &n).unwrap()
                })
                .sum::<f64>()
                / 20.0;
            assert!(mean < last);
            last = mean;
        }
    }

    #[test]
    fn corpus_mean_matches_per_image() {
        let refs: Vec<Field> = (0..5).map(|s| random_image(s, 16, 16, 1)).collect();
        let preds: Vec<Field> = (10..15).map(|s| random_image(s, 16, 16, 1)).collect();
        let reports: Vec<MetricReport> = preds
            .iter()
            .zip(&refs)
            .map(|(p, r)| MetricReport::compute(p, r).unwrap())
            .collect();
        let mean = MetricReport::mean(&reports).unwrap();
        let by_hand = reports.iter().map(|r| r.ssim).sum::<f64>() / 5.0;
        assert_eq!(mean.ssim, by_hand);
        assert!(MetricReport::mean(&[]).is_none());
    }

    proptest! {
        #[test]
        fn symmetric_and_channel_permutation_invariant(seed in 0u64..1000) {
            let a = random_image(seed, 14, 13, 3);
            let b = random_image(seed + 7919, 14, 13, 3);
            let s_ab = ssim(&a, &b).unwrap();
            prop_assert!((s_ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s_ab));
            let order = [2, 0, 1];
            let pa = a.permute_channels(&order).unwrap();
            let pb = b.permute_channels(&order).unwrap();
            prop_assert!((s_ab - ssim(&pa, &pb).unwrap()).abs() < 1e-12);
            prop_assert!((rel_l1(&a, &b).unwrap() - rel_l1(&pa, &pb).unwrap()).abs() < 1e-9);
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-9);
        }
    }
}
