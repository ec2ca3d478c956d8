//! Count-error and map-quality metrics.
//!
//! Count errors follow the usual crowd-counting convention: MAE is the mean
//! absolute count error and MSE is the *root* mean squared count error, so
//! MAE <= MSE always holds. Map quality (PSNR/SSIM) is computed after scaling
//! both maps by 1/max(gt) and clamping to [0,1], i.e. with data range L = 1;
//! that convention is part of this crate's contract and is what makes the
//! reported numbers reproducible.

use std::fs;
use std::path::Path;

use crate::density::DensityMap;
use crate::error::{Error, Result};

/// Mean absolute error and root mean squared error over paired counts.
pub fn mae_mse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mae_mse", format!("{} counts", gt.len()), format!("{}", pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mae_mse: need at least one sample"));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0f64;
    let mut sq = 0.0f64;
    for (p, g) in pred.iter().zip(gt) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1*L)^2, K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2*L)^2, K2 = 0.03, L = 1

fn check_same_dims(op: &'static str, pred: &DensityMap, gt: &DensityMap) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            op,
            format!("{}x{}", gt.width, gt.height),
            format!("{}x{}", pred.width, pred.height),
        ));
    }
    Ok(())
}

/// Scale both maps by 1/max(gt) and clamp to [0,1].
fn scaled_pair(op: &'static str, pred: &DensityMap, gt: &DensityMap) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_dims(op, pred, gt)?;
    let peak = gt.values().iter().cloned().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Err(Error::ZeroGroundTruth { op });
    }
    let s = 1.0 / peak as f64;
    let norm = |m: &DensityMap| m.values().iter().map(|v| (*v as f64 * s).clamp(0.0, 1.0)).collect();
    Ok((norm(pred), norm(gt)))
}

/// PSNR between two already-[0,1] images, capped at 100 dB.
pub fn psnr_unit(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR in dB after the joint 1/max(gt) scaling.
pub fn psnr(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    let (a, b) = scaled_pair("psnr", pred, gt)?;
    Ok(psnr_unit(&a, &b))
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *t;
    }
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Valid-mode separable Gaussian filter: (h, w) -> (h-10, w-10).
fn gauss_filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - (SSIM_WINDOW - 1);
    let ho = h - (SSIM_WINDOW - 1);
    // horizontal pass: (h, w) -> (h, wo)
    let mut tmp = vec![0.0f64; h * wo];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let out = &mut tmp[y * wo..(y + 1) * wo];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[x + k];
            }
            *o = acc;
        }
    }
    // vertical pass: (h, wo) -> (ho, wo)
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        let dst = &mut out[y * wo..(y + 1) * wo];
        for (k, t) in taps.iter().enumerate() {
            let src = &tmp[(y + k) * wo..(y + k + 1) * wo];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    out
}

/// Mean windowed SSIM between two already-[0,1] images (valid windows only).
pub fn ssim_unit(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::shape("ssim", format!("{w}x{h}"), format!("{} / {}", a.len(), b.len())));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: maps must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let asq: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bsq: Vec<f64> = b.iter().map(|y| y * y).collect();
    let mu_a = gauss_filter_valid(a, w, h, &taps);
    let mu_b = gauss_filter_valid(b, w, h, &taps);
    let s_aa = gauss_filter_valid(&asq, w, h, &taps);
    let s_bb = gauss_filter_valid(&bsq, w, h, &taps);
    let s_ab = gauss_filter_valid(&prod, w, h, &taps);

    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cab = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM after the joint 1/max(gt) scaling.
pub fn ssim(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    let (a, b) = scaled_pair("ssim", pred, gt)?;
    ssim_unit(&a, &b, gt.width, gt.height)
}

/// Aggregated evaluation results over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Format with 6 significant digits (plain decimal).
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.5}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n,mae,mse,psnr,ssim";

    /// One header-less CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.n,
            sig6(self.mae),
            sig6(self.mse),
            sig6(self.mean_psnr),
            sig6(self.mean_ssim),
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn worked_count_example_is_exact() {
        let (mae, mse) = mae_mse(&[12.0, 16.0], &[10.0, 20.0]).unwrap();
        assert_eq!(mae, 3.0);
        assert_eq!(mse, 10.0f64.sqrt());
    }

    #[test]
    fn mae_never_exceeds_mse() {
        let mut r = rng::stream(7, "metrics.prop");
        for _ in 0..200 {
            let n = r.gen_range(1..40);
            let pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..500.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..500.0)).collect();
            let (mae, mse) = mae_mse(&pred, &gt).unwrap();
            assert!(mae <= mse + 1e-12, "mae {mae} > mse {mse}");
        }
    }

    #[test]
    fn mismatched_or_empty_counts_error() {
        assert!(mae_mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_mse(&[], &[]).is_err());
    }

    fn random_map(seed: u64, name: &str, w: usize, h: usize) -> DensityMap {
        let mut r = rng::stream(seed, name);
        let values: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.0..0.4f32)).collect();
        DensityMap::new(w, h, values).unwrap()
    }

    #[test]
    fn psnr_matches_direct_formula_and_caps() {
        let gt = random_map(11, "metrics.psnr.gt", 16, 16);
        let pred = random_map(12, "metrics.psnr.pred", 16, 16);
        let got = psnr(&pred, &gt).unwrap();
        // independent direct evaluation
        let peak = gt.values().iter().cloned().fold(0.0f32, f32::max) as f64;
        let mut mse = 0.0f64;
        for i in 0..256 {
            let a = (pred.values()[i] as f64 / peak).clamp(0.0, 1.0);
            let b = (gt.values()[i] as f64 / peak).clamp(0.0, 1.0);
            mse += (a - b) * (a - b);
        }
        mse /= 256.0;
        assert!((got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert_eq!(psnr(&gt, &gt).unwrap(), 100.0);
    }

    #[test]
    fn psnr_symmetric_after_joint_scaling_and_monotone_in_noise() {
        let x = random_map(21, "metrics.psnr.sym", 20, 20);
        let y = random_map(22, "metrics.psnr.sym2", 20, 20);
        let xs: Vec<f64> = x.values().iter().map(|v| *v as f64).collect();
        let ys: Vec<f64> = y.values().iter().map(|v| *v as f64).collect();
        assert_eq!(psnr_unit(&xs, &ys), psnr_unit(&ys, &xs));

        let base = random_map(23, "metrics.psnr.mono", 20, 20);
        let bumped = |c: f32| {
            let v: Vec<f32> = base.values().iter().map(|v| v + c).collect();
            DensityMap::new(20, 20, v).unwrap()
        };
        let p1 = psnr(&bumped(0.01), &base).unwrap();
        let p2 = psnr(&bumped(0.05), &base).unwrap();
        let p3 = psnr(&bumped(0.15), &base).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn zero_ground_truth_is_rejected() {
        let gt = DensityMap::zeros(16, 16);
        let pred = random_map(31, "metrics.zero", 16, 16);
        assert!(matches!(psnr(&pred, &gt), Err(Error::ZeroGroundTruth { .. })));
        assert!(matches!(ssim(&pred, &gt), Err(Error::ZeroGroundTruth { .. })));
    }

    #[test]
    fn ssim_of_identical_maps_is_one() {
        let x = random_map(41, "metrics.ssim.self", 24, 24);
        let got = ssim(&x, &x).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // mu = 0.5 vs mu + c with c = 0.2: variance terms vanish and
        // SSIM = (2*mu*(mu+c) + C1) / (mu^2 + (mu+c)^2 + C1) = 0.7001/0.7401
        let a = vec![0.5f64; 16 * 16];
        let b = vec![0.7f64; 16 * 16];
        let got = ssim_unit(&a, &b, 16, 16).unwrap();
        let want = (2.0 * 0.5 * 0.7 + 1e-4) / (0.25 + 0.49 + 1e-4);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((want - 0.945953).abs() < 1e-6);
    }

    /// Brute-force per-window reference: 121 taps accumulated directly.
    fn ssim_reference(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let taps = gaussian_taps();
        let mut total = 0.0;
        let mut windows = 0usize;
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wt = taps[ky] * taps[kx];
                        let av = a[(wy + ky) * w + wx + kx];
                        let bv = b[(wy + ky) * w + wx + kx];
                        ma += wt * av;
                        mb += wt * bv;
                        saa += wt * av * av;
                        sbb += wt * bv * bv;
                        sab += wt * av * bv;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cab = sab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
        total / windows as f64
    }

    #[test]
    fn ssim_matches_brute_force_reference() {
        for i in 0..5u64 {
            let gt = random_map(100 + i, "metrics.ssim.gt", 21, 17);
            let pred = random_map(200 + i, "metrics.ssim.pred", 21, 17);
            let got = ssim(&pred, &gt).unwrap();
            let (a, b) = scaled_pair("ssim", &pred, &gt).unwrap();
            let want = ssim_reference(&a, &b, 21, 17);
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
            assert!(got.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn ssim_rejects_maps_smaller_than_window() {
        let x = random_map(51, "metrics.ssim.small", 8, 8);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn report_csv_uses_six_significant_digits() {
        let report = EvalReport {
            n: 40,
            mae: 3.0,
            mse: 10.0f64.sqrt(),
            mean_psnr: 21.72345,
            mean_ssim: 0.721234,
        };
        assert_eq!(
            report.to_csv(),
            "n,mae,mse,psnr,ssim\n40,3.00000,3.16228,21.7234,0.721234\n"
        );
        assert_eq!(sig6(106.4), "106.400");
        assert_eq!(sig6(0.00123456), "0.00123456");
        assert_eq!(sig6(0.0), "0.00000");
    }
}
