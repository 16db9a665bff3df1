//! Image quality metrics: three full-reference scores (psnr, ssim, gsim)
//! and two no-reference scores (nr_sharp, nr_balance).
//!
//! PSNR and SSIM are computed on the BT.601 luma plane with peak 1.0; gsim
//! is a Sobel gradient-similarity score standing in for a learned
//! full-reference metric, and the two no-reference scores are closed-form
//! sharpness and tonal-balance statistics. All five are deterministic
//! functions of their inputs.

use crate::error::{Error, Result};
use crate::image::{filter_separable, gaussian_taps, median3, sobel_magnitude, Image, Plane};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricVector {
    pub psnr: f64,
    pub ssim: f64,
    pub gsim: f64,
    pub nr_sharp: f64,
    pub nr_balance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Psnr,
    Ssim,
    Gsim,
    NrSharp,
    NrBalance,
}

pub const ALL_METRICS: [MetricKind; 5] = [
    MetricKind::Psnr,
    MetricKind::Ssim,
    MetricKind::Gsim,
    MetricKind::NrSharp,
    MetricKind::NrBalance,
];

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::Gsim => "gsim",
            MetricKind::NrSharp => "nr_sharp",
            MetricKind::NrBalance => "nr_balance",
        }
    }

    /// Whether the metric compares against a reference image.
    pub fn full_reference(self) -> bool {
        matches!(self, MetricKind::Psnr | MetricKind::Ssim | MetricKind::Gsim)
    }
}

impl MetricVector {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Psnr => self.psnr,
            MetricKind::Ssim => self.ssim,
            MetricKind::Gsim => self.gsim,
            MetricKind::NrSharp => self.nr_sharp,
            MetricKind::NrBalance => self.nr_balance,
        }
    }
}

pub const PSNR_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5; // 11x11 window
const GSIM_C: f64 = 1e-4;

/// Peak signal-to-noise ratio on luma, peak 1.0, capped at 100 dB.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.require_same_shape(gt)?;
    let yp = pred.luma();
    let yg = gt.luma();
    let mse = yp
        .data
        .iter()
        .zip(&yg.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / yp.data.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean local SSIM on luma: 11×11 Gaussian window σ=1.5, K1=0.01,
/// K2=0.03, dynamic range 1.0, replicate padding.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    pred.require_same_shape(gt)?;
    let x = pred.luma();
    let y = gt.luma();
    Ok(ssim_planes(&x, &y))
}

pub(crate) fn ssim_planes(x: &Plane, y: &Plane) -> f64 {
    let taps = gaussian_taps(SSIM_SIGMA, SSIM_RADIUS);
    let n = x.data.len();
    let mut xx = Plane::zeros(x.height, x.width);
    let mut yy = Plane::zeros(x.height, x.width);
    let mut xy = Plane::zeros(x.height, x.width);
    for i in 0..n {
        xx.data[i] = x.data[i] * x.data[i];
        yy.data[i] = y.data[i] * y.data[i];
        xy.data[i] = x.data[i] * y.data[i];
    }
    let mu_x = filter_separable(x, &taps);
    let mu_y = filter_separable(y, &taps);
    let e_xx = filter_separable(&xx, &taps);
    let e_yy = filter_separable(&yy, &taps);
    let e_xy = filter_separable(&xy, &taps);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..n {
        let mx = mu_x.data[i];
        let my = mu_y.data[i];
        let vx = e_xx.data[i] - mx * mx;
        let vy = e_yy.data[i] - my * my;
        let cv = e_xy.data[i] - mx * my;
        let s = ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        acc += s;
    }
    acc / n as f64
}

/// Gradient-magnitude similarity on luma: mean of
/// (2·g_p·g_g + c)/(g_p² + g_g² + c) with c = 1e-4.
pub fn gsim(pred: &Image, gt: &Image) -> Result<f64> {
    pred.require_same_shape(gt)?;
    let gp = sobel_magnitude(&pred.luma());
    let gg = sobel_magnitude(&gt.luma());
    Ok(gsim_from_magnitudes(&gp, &gg))
}

pub(crate) fn gsim_from_magnitudes(gp: &Plane, gg: &Plane) -> f64 {
    let n = gp.data.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = gp.data[i];
        let b = gg.data[i];
        acc += (2.0 * a * b + GSIM_C) / (a * a + b * b + GSIM_C);
    }
    acc / n as f64
}

const NR_SHARP_C: f64 = 0.05;
const NR_BALANCE_NU_GAIN: f64 = 20.0;
const NR_BALANCE_C: f64 = 0.05;

/// No-reference scores: (nr_sharp, nr_balance).
///
/// nr_sharp = s/(s+0.05) with s the mean Sobel magnitude of luma.
/// nr_balance = (1/(1+20ν)) · (σ/(σ+0.05)) with ν the mean absolute
/// deviation from the 3×3 median (a noise proxy) and σ the global luma std.
pub fn nr_metrics(img: &Image) -> (f64, f64) {
    let y = img.luma();
    let s = sobel_magnitude(&y).mean();
    let nr_sharp = s / (s + NR_SHARP_C);

    let med = median3(&y);
    let nu = y
        .data
        .iter()
        .zip(&med.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / y.data.len() as f64;
    let sigma = y.std();
    let nr_balance = (1.0 / (1.0 + NR_BALANCE_NU_GAIN * nu)) * (sigma / (sigma + NR_BALANCE_C));
    (nr_sharp, nr_balance)
}

/// All five metrics for a (prediction, reference) pair.
pub fn metric_vector(pred: &Image, gt: &Image) -> Result<MetricVector> {
    let (nr_sharp, nr_balance) = nr_metrics(pred);
    Ok(MetricVector {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        gsim: gsim(pred, gt)?,
        nr_sharp,
        nr_balance,
    })
}

/// Precomputed reference-side state so scoring many predictions against one
/// ground truth skips the repeated luma/window/gradient passes.
pub struct ReferenceStats {
    luma: Plane,
    mu: Plane,
    e_sq: Plane,
    grad_mag: Plane,
    taps: Vec<f64>,
}

impl ReferenceStats {
    pub fn new(gt: &Image) -> ReferenceStats {
        let luma = gt.luma();
        let taps = gaussian_taps(SSIM_SIGMA, SSIM_RADIUS);
        let mut sq = Plane::zeros(luma.height, luma.width);
        for i in 0..luma.data.len() {
            sq.data[i] = luma.data[i] * luma.data[i];
        }
        ReferenceStats {
            mu: filter_separable(&luma, &taps),
            e_sq: filter_separable(&sq, &taps),
            grad_mag: sobel_magnitude(&luma),
            luma,
            taps,
        }
    }

    pub fn score(&self, pred: &Image) -> Result<MetricVector> {
        let x = pred.luma();
        if x.height != self.luma.height || x.width != self.luma.width {
            return Err(Error::Shape("prediction does not match reference".into()));
        }
        let n = x.data.len() as f64;

        // psnr
        let mse = x
            .data
            .iter()
            .zip(&self.luma.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let psnr = if mse < PSNR_MSE_FLOOR {
            PSNR_CAP
        } else {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
        };

        // ssim against cached reference windows
        let mut xx = Plane::zeros(x.height, x.width);
        let mut xy = Plane::zeros(x.height, x.width);
        for i in 0..x.data.len() {
            xx.data[i] = x.data[i] * x.data[i];
            xy.data[i] = x.data[i] * self.luma.data[i];
        }
        let mu_x = filter_separable(&x, &self.taps);
        let e_xx = filter_separable(&xx, &self.taps);
        let e_xy = filter_separable(&xy, &self.taps);
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut acc = 0.0;
        for i in 0..x.data.len() {
            let mx = mu_x.data[i];
            let my = self.mu.data[i];
            let vx = e_xx.data[i] - mx * mx;
            let vy = self.e_sq.data[i] - my * my;
            let cv = e_xy.data[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        let ssim = acc / n;

        // gsim + nr_sharp share the prediction gradient field
        let gp = sobel_magnitude(&x);
        let gsim = gsim_from_magnitudes(&gp, &self.grad_mag);
        let s = gp.mean();
        let nr_sharp = s / (s + NR_SHARP_C);

        let med = median3(&x);
        let nu = x
            .data
            .iter()
            .zip(&med.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let sigma = x.std();
        let nr_balance = (1.0 / (1.0 + NR_BALANCE_NU_GAIN * nu)) * (sigma / (sigma + NR_BALANCE_C));

        Ok(MetricVector { psnr, ssim, gsim, nr_sharp, nr_balance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn seeded_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = Prng::new(seed);
        let data = (0..h * w * c).map(|_| rng.uniform()).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn psnr_identity_caps_at_100() {
        let x = seeded_image(11, 16, 16, 3);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn psnr_zero_vs_one_is_zero() {
        let a = Image::constant(8, 8, 1, 0.0).unwrap();
        let b = Image::constant(8, 8, 1, 1.0).unwrap();
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_uniform_offset_is_20db() {
        let mut rng = Prng::new(3);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.uniform() * 0.9).collect();
        let a = Image::new(16, 16, 1, data.clone()).unwrap();
        let b = Image::new(16, 16, 1, data.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Image::constant(8, 8, 1, 0.5).unwrap();
        let b = Image::constant(8, 9, 1, 0.5).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = seeded_image(5, 16, 16, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_pair_degenerate_form() {
        // zero variances: s = (2 mu1 mu2 + C1) / (mu1^2 + mu2^2 + C1)
        let a = Image::constant(16, 16, 1, 0.5).unwrap();
        let b = Image::constant(16, 16, 1, 0.25).unwrap();
        let expect = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-3, "got {got} expect {expect}");
        assert!((got - 0.8001).abs() < 1e-3);
    }

    /// Straightforward per-pixel SSIM, independent of the separable path:
    /// direct 11×11 Gaussian-weighted window statistics at every pixel.
    fn ssim_oracle(x: &Image, y: &Image) -> f64 {
        let xp = x.luma();
        let yp = y.luma();
        let r = SSIM_RADIUS as isize;
        let mut weights = vec![];
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push((-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
            }
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut acc = 0.0;
        for py in 0..xp.height as isize {
            for px in 0..xp.width as isize {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let a = xp.get_clamped(py + dy, px + dx);
                        let b = yp.get_clamped(py + dy, px + dx);
                        let w = weights[k];
                        mx += w * a;
                        my += w * b;
                        exx += w * a * a;
                        eyy += w * b * b;
                        exy += w * a * b;
                        k += 1;
                    }
                }
                let vx = exx - mx * mx;
                let vy = eyy - my * my;
                let cv = exy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        acc / (xp.height * xp.width) as f64
    }

    fn checkerboard(h: usize, w: usize, tile: usize, lo: f64, hi: f64) -> Image {
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let on = ((y / tile) + (x / tile)) % 2 == 0;
                data[y * w + x] = if on { hi } else { lo };
            }
        }
        Image::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn ssim_checkerboard_matches_oracle() {
        let a = checkerboard(16, 16, 4, 0.2, 0.8);
        let b = checkerboard(16, 16, 4, 0.8, 0.2); // inverted
        let oracle = ssim_oracle(&a, &b);
        let got = ssim(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-9, "got {got} oracle {oracle}");
        // Frozen from the oracle: anti-correlated structure drives SSIM
        // strongly negative.
        assert!((oracle - (-0.8879806654926180)).abs() < 1e-9, "oracle {oracle}");
    }

    #[test]
    fn ssim_random_pair_matches_oracle() {
        let a = seeded_image(21, 16, 16, 3);
        let b = seeded_image(22, 16, 16, 3);
        let oracle = ssim_oracle(&a, &b);
        let got = ssim(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn gsim_identity_and_constants() {
        let x = seeded_image(9, 16, 16, 3);
        assert!((gsim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let a = Image::constant(8, 8, 1, 0.3).unwrap();
        let b = Image::constant(8, 8, 1, 0.9).unwrap();
        assert!((gsim(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gsim_blur_pair_matches_direct_formula() {
        // Sharp-edge image vs its 5x5 box blur; oracle evaluates the
        // definition directly from independently computed Sobel fields.
        let mut data = vec![0.1; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                data[y * 16 + x] = 0.9;
            }
        }
        let sharp = Image::new(16, 16, 1, data).unwrap();
        let blurred = {
            let p = sharp.luma();
            let taps = vec![0.2; 5];
            let q = crate::image::filter_separable(&p, &taps);
            Image::new(16, 16, 1, q.data).unwrap()
        };

        // Direct oracle: nested-loop Sobel and the ratio formula.
        let oracle = {
            let gp = {
                let p = sharp.luma();
                let mut m = vec![0.0; 256];
                for y in 0..16isize {
                    for x in 0..16isize {
                        let v = |dy: isize, dx: isize| p.get_clamped(y + dy, x + dx);
                        let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1))
                            - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
                        let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1))
                            - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
                        m[(y * 16 + x) as usize] = (gx * gx + gy * gy).sqrt();
                    }
                }
                m
            };
            let gg = {
                let p = blurred.luma();
                let mut m = vec![0.0; 256];
                for y in 0..16isize {
                    for x in 0..16isize {
                        let v = |dy: isize, dx: isize| p.get_clamped(y + dy, x + dx);
                        let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1))
                            - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
                        let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1))
                            - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
                        m[(y * 16 + x) as usize] = (gx * gx + gy * gy).sqrt();
                    }
                }
                m
            };
            let mut acc = 0.0;
            for i in 0..256 {
                acc += (2.0 * gp[i] * gg[i] + GSIM_C) / (gp[i] * gp[i] + gg[i] * gg[i] + GSIM_C);
            }
            acc / 256.0
        };

        let got = gsim(&sharp, &blurred).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn nr_metrics_constant_is_zero() {
        let img = Image::constant(16, 16, 3, 0.5).unwrap();
        let (s, b) = nr_metrics(&img);
        assert_eq!(s, 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn nr_sharp_decreases_under_repeated_blur() {
        let img = seeded_image(77, 32, 32, 1);
        let taps = vec![1.0 / 3.0; 3];
        let mut current = img;
        let (mut prev, _) = nr_metrics(&current);
        for _ in 0..3 {
            let p = filter_separable(&current.luma(), &taps);
            current = Image::new(32, 32, 1, p.data.iter().map(|v| v.clamp(0.0, 1.0)).collect()).unwrap();
            let (s, _) = nr_metrics(&current);
            assert!(s < prev, "sharpness must strictly decrease: {s} vs {prev}");
            prev = s;
        }
    }

    #[test]
    fn nr_balance_penalizes_noise() {
        // Smooth seeded texture vs the same texture plus sigma=50/255 noise.
        let mut rng = Prng::new(123);
        let base: Vec<f64> = {
            let raw: Vec<f64> = (0..32 * 32).map(|_| rng.uniform()).collect();
            let p = Plane { height: 32, width: 32, data: raw };
            let sm = filter_separable(&p, &gaussian_taps(2.0, 4));
            sm.data.iter().map(|v| 0.2 + 0.6 * v).collect()
        };
        let clean = Image::new(32, 32, 1, base.clone()).unwrap();
        let sigma = 50.0 / 255.0;
        let noisy = Image::new(
            32,
            32,
            1,
            base.iter().map(|v| (v + sigma * rng.normal()).clamp(0.0, 1.0)).collect(),
        )
        .unwrap();
        let (_, b_clean) = nr_metrics(&clean);
        let (_, b_noisy) = nr_metrics(&noisy);
        assert!(b_clean > b_noisy, "{b_clean} vs {b_noisy}");
    }

    #[test]
    fn reference_stats_match_direct_path() {
        let gt = seeded_image(31, 24, 24, 3);
        let pred = seeded_image(32, 24, 24, 3);
        let direct = metric_vector(&pred, &gt).unwrap();
        let cached = ReferenceStats::new(&gt).score(&pred).unwrap();
        assert_eq!(direct, cached);
    }
}
