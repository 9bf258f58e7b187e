//! Quantitative evaluation: PSNR, SSIM (Gaussian-windowed, valid interior),
//! flow endpoint error, and the per-clip CSV report.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::{FlowField, Frame};

/// Peak signal-to-noise ratio in dB over all pixels and channels.
/// Identical inputs report `f64::INFINITY`.
pub fn psnr(a: &Frame, b: &Frame, peak: f64) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak {peak}")));
    }
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        mse += d * d;
    }
    mse /= a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// BT.601 luma of a frame as a 2-D array (identity for single-channel).
fn luma(f: &Frame) -> Array2<f64> {
    let (h, w, c) = f.data().dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            f.get(y, x, 0)
        } else {
            0.299 * f.get(y, x, 0) + 0.587 * f.get(y, x, 1) + 0.114 * f.get(y, x, 2)
        }
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *v = (-0.5 * (d / SSIM_SIGMA).powi(2)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filter: output (h-10, w-10).
fn valid_gauss(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut horiz = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for y in 0..h {
        for x in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img[(y, x + i)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let (hw, ww) = horiz.dim();
    let mut out = Array2::<f64>::zeros((hw - SSIM_WINDOW + 1, ww));
    for y in 0..hw - SSIM_WINDOW + 1 {
        for x in 0..ww {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0, averaged over fully-interior window
/// positions. RGB inputs are converted to BT.601 luma first.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let (h, w, _) = a.data().dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs dims >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la = luma(a);
    let lb = luma(b);
    let k = gaussian_window();
    let mu1 = valid_gauss(&la, &k);
    let mu2 = valid_gauss(&lb, &k);
    let e_aa = valid_gauss(&(&la * &la), &k);
    let e_bb = valid_gauss(&(&lb * &lb), &k);
    let e_ab = valid_gauss(&(&la * &lb), &k);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((((m1, m2), aa), bb), ab) in mu1
        .iter()
        .zip(mu2.iter())
        .zip(e_aa.iter())
        .zip(e_bb.iter())
        .zip(e_ab.iter())
    {
        let s1 = aa - m1 * m1;
        let s2 = bb - m2 * m2;
        let s12 = ab - m1 * m2;
        let v = ((2.0 * m1 * m2 + c1) * (2.0 * s12 + c2))
            / ((m1 * m1 + m2 * m2 + c1) * (s1 + s2 + c2));
        acc += v;
        count += 1;
    }
    Ok(acc / count as f64)
}

/// Mean endpoint error in pixels over the spatial interior (an
/// `interior_margin`-pixel border excluded on each side).
pub fn endpoint_error(flow: &FlowField, gt: &FlowField, interior_margin: usize) -> Result<f64> {
    if flow.data().dim() != gt.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "endpoint_error: {:?} vs {:?}",
            flow.data().dim(),
            gt.data().dim()
        )));
    }
    let (h, w, _) = flow.data().dim();
    if h <= 2 * interior_margin || w <= 2 * interior_margin {
        return Err(Error::InvalidArgument(format!(
            "margin {interior_margin} leaves no interior in {h}x{w}"
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in interior_margin..h - interior_margin {
        for x in interior_margin..w - interior_margin {
            let dx = flow.dx(y, x) - gt.dx(y, x);
            let dy = flow.dy(y, x) - gt.dy(y, x);
            acc += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// One evaluated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub epe_px: Option<f64>,
}

/// Per-clip metrics plus arithmetic-mean aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ClipMetrics>,
}

impl MetricReport {
    pub fn aggregate(&self) -> ClipMetrics {
        let n = self.rows.len().max(1) as f64;
        let psnr_db = self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let ssim = self.rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let epes: Vec<f64> = self.rows.iter().filter_map(|r| r.epe_px).collect();
        let epe_px = if epes.is_empty() {
            None
        } else {
            Some(epes.iter().sum::<f64>() / epes.len() as f64)
        };
        ClipMetrics {
            clip_id: "aggregate".into(),
            psnr_db,
            ssim,
            epe_px,
        }
    }

    /// CSV with one data row per clip: clip_id, psnr_db, ssim, epe_px
    /// (empty when no oracle flow was available).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,psnr_db,ssim,epe_px\n");
        for r in &self.rows {
            let epe = r.epe_px.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.clip_id, r.psnr_db, r.ssim, epe));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(h: usize, w: usize, c: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let f = rand_frame(8, 8, 3, 1);
        assert!(psnr(&f, &f, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_difference_is_twenty_db() {
        let a = Frame::constant(16, 16, 3, 0.1).unwrap();
        let b = Frame::constant(16, 16, 3, 0.2).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn psnr_matches_naive_oracle() {
        for seed in 0..20 {
            let a = rand_frame(9, 11, 3, seed);
            let b = rand_frame(9, 11, 3, seed + 100);
            let got = psnr(&a, &b, 1.0).unwrap();
            let mut mse = 0.0;
            let mut n = 0.0;
            for y in 0..9 {
                for x in 0..11 {
                    for c in 0..3 {
                        let d = a.get(y, x, c) - b.get(y, x, c);
                        mse += d * d;
                        n += 1.0;
                    }
                }
            }
            let want = 10.0 * (1.0 / (mse / n)).log10();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let f = rand_frame(16, 16, 3, 2);
        let v = ssim(&f, &f).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn ssim_is_symmetric() {
        for seed in 0..5 {
            let a = rand_frame(14, 17, 1, seed + 10);
            let b = rand_frame(14, 17, 1, seed + 20);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_checkerboard_matches_reference_implementation() {
        // frozen oracle: scikit-image structural_similarity with
        // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        // data_range=1.0 on this exact checkerboard pair
        let a = Frame::from_fn(32, 32, 1, |y, x, _| {
            if (x / 4 + y / 4) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let b = Frame::new(a.data().mapv(|v| 0.5 * v + 0.25)).unwrap();
        let v = ssim(&a, &b).unwrap();
        let reference = 0.7944857148062191;
        assert!((v - reference).abs() < 1e-6, "got {v}, want {reference}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let f = rand_frame(8, 8, 1, 3);
        assert!(ssim(&f, &f).is_err());
    }

    #[test]
    fn endpoint_error_exact_cases() {
        let z = FlowField::zeros(16, 16);
        assert_eq!(endpoint_error(&z, &z, 4).unwrap(), 0.0);
        let f = FlowField::constant(16, 16, 3.0, 4.0).unwrap();
        assert_eq!(endpoint_error(&f, &z, 4).unwrap(), 5.0);
    }

    #[test]
    fn endpoint_error_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = FlowField::from_fn(12, 12, |_, _| {
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            })
            .unwrap();
            let b = FlowField::from_fn(12, 12, |_, _| {
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            })
            .unwrap();
            let got = endpoint_error(&a, &b, 4).unwrap();
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for y in 4..8 {
                for x in 4..8 {
                    let dx = a.dx(y, x) - b.dx(y, x);
                    let dy = a.dy(y, x) - b.dy(y, x);
                    acc += (dx * dx + dy * dy).sqrt();
                    cnt += 1.0;
                }
            }
            assert!((got - acc / cnt).abs() < 1e-9);
        }
    }

    #[test]
    fn report_aggregate_and_csv_row_count() {
        let report = MetricReport {
            rows: vec![
                ClipMetrics {
                    clip_id: "a".into(),
                    psnr_db: 30.0,
                    ssim: 0.9,
                    epe_px: Some(0.5),
                },
                ClipMetrics {
                    clip_id: "b".into(),
                    psnr_db: 34.0,
                    ssim: 0.95,
                    epe_px: None,
                },
            ],
        };
        let agg = report.aggregate();
        assert_eq!(agg.psnr_db, 32.0);
        assert_eq!(agg.epe_px, Some(0.5));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3); // header + 2 data rows
        assert!(csv.lines().nth(2).unwrap().ends_with(','));
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_noise_monotone(seed in 0u64..50) {
            let a = rand_frame(12, 12, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let small = Frame::new(a.data().mapv(|v| (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))).unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 2000);
            let large = Frame::new(a.data().mapv(|v| (v + rng2.random_range(-0.2..0.2)).clamp(0.0, 1.0))).unwrap();
            let ps = psnr(&a, &small, 1.0).unwrap();
            let pl = psnr(&a, &large, 1.0).unwrap();
            prop_assert!((psnr(&small, &a, 1.0).unwrap() - ps).abs() < 1e-12);
            prop_assert!(ps > pl, "small-noise PSNR {ps} should beat large-noise {pl}");
        }
    }
}
