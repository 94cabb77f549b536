//! Image-quality and detectability metrics.

use crate::biasfield::CoeffVector;
use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, GrayImage};
use crate::synthesis::BBox;

/// `10 log10(peak^2 / MSE)`. Identical images give `f64::INFINITY`.
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over all positions where the 11x11 Gaussian window (sigma 1.5)
/// fits, with `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::param(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let kernel = gaussian_kernel(SSIM_SIGMA)?;
    debug_assert_eq!(kernel.len(), SSIM_WINDOW);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));

    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a.data(), w, h, &kernel);
    let mu_b = filter_valid(b.data(), w, h, &kernel);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &kernel);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &kernel);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &kernel);

    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Separable correlation keeping only fully-covered positions.
fn filter_valid(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = kernel.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        let dst = &mut out[y * ow..(y + 1) * ow];
        for (i, &kv) in kernel.iter().enumerate() {
            let src = &horiz[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

fn check_degrees(a: &CoeffVector, b: &CoeffVector) -> Result<()> {
    if a.degree() != b.degree() {
        return Err(Error::param(format!(
            "degree mismatch: {} vs {}",
            a.degree(),
            b.degree()
        )));
    }
    Ok(())
}

/// Coefficient loss `(1/N) ||a_hat - a||_2^2`.
pub fn coeff_loss(predicted: &CoeffVector, truth: &CoeffVector) -> Result<f64> {
    check_degrees(predicted, truth)?;
    let n = truth.as_slice().len() as f64;
    Ok(predicted
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute coefficient error, the literal "MAE" reading of the loss.
pub fn coeff_loss_l1(predicted: &CoeffVector, truth: &CoeffVector) -> Result<f64> {
    check_degrees(predicted, truth)?;
    let n = truth.as_slice().len() as f64;
    Ok(predicted
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

pub const DEFAULT_RING_WIDTH: usize = 5;

/// Target box plus the width `d` of the surrounding background ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScrSpec {
    pub bbox: BBox,
    pub ring: usize,
}

impl ScrSpec {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            ring: DEFAULT_RING_WIDTH,
        }
    }

    /// The `(a + 2d) x (b + 2d)` region around the target, clipped to the image.
    pub fn neighbourhood(&self, width: usize, height: usize) -> BBox {
        let b = self.bbox;
        let x0 = b.x.saturating_sub(self.ring);
        let y0 = b.y.saturating_sub(self.ring);
        let x1 = (b.right() + self.ring).min(width);
        let y1 = (b.bottom() + self.ring).min(height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Statistics of a target and its background ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionStats {
    pub target_mean: f64,
    pub background_mean: f64,
    /// Population standard deviation of the ring.
    pub background_std: f64,
    pub background_count: usize,
}

pub fn region_stats(img: &GrayImage, spec: &ScrSpec) -> Result<RegionStats> {
    let (w, h) = img.dims();
    spec.bbox.validate(w, h)?;
    let hood = spec.neighbourhood(w, h);
    let mut target = Vec::with_capacity(spec.bbox.area());
    let mut ring = Vec::with_capacity(hood.area());
    for y in hood.y..hood.bottom() {
        for x in hood.x..hood.right() {
            if spec.bbox.contains(x, y) {
                target.push(img.get(x, y));
            } else {
                ring.push(img.get(x, y));
            }
        }
    }
    if ring.is_empty() {
        return Err(Error::param("background ring is empty"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mu_t = mean(&target);
    let mu_b = mean(&ring);
    let var = ring.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / ring.len() as f64;
    Ok(RegionStats {
        target_mean: mu_t,
        background_mean: mu_b,
        background_std: var.sqrt(),
        background_count: ring.len(),
    })
}

/// Signal-to-clutter ratio `|mu_t - mu_b| / sigma_b`.
pub fn scr(img: &GrayImage, spec: &ScrSpec) -> Result<f64> {
    let s = region_stats(img, spec)?;
    if s.background_std <= 1e-12 * s.background_mean.abs().max(1.0) {
        return Err(Error::DegenerateBackground);
    }
    Ok((s.target_mean - s.background_mean).abs() / s.background_std)
}

/// `SCR(corrected) / SCR(original)`.
pub fn scrg(original: &GrayImage, corrected: &GrayImage, spec: &ScrSpec) -> Result<f64> {
    original.ensure_same_dims(corrected)?;
    let scr_in = scr(original, spec)?;
    if scr_in == 0.0 {
        return Err(Error::UndefinedGain);
    }
    Ok(scr(corrected, spec)? / scr_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{make_background, BackgroundKind};
    use rand::{Rng, SeedableRng};

    fn random(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_examples() {
        let a = GrayImage::filled(16, 16, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = GrayImage::filled(16, 16, 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &GrayImage::filled(8, 16, 0.0), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_one_pass_reference() {
        let (a, b) = (random(1, 33, 17), random(2, 33, 17));
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        let reference = 10.0 * (1.0 / (acc / a.len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - reference).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_shift_covariant() {
        // Dyadic intensities make the shifted differences exact.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = GrayImage::from_fn(20, 20, |_, _| rng.random_range(0..1024) as f64 / 1024.0);
        let b = GrayImage::from_fn(20, 20, |_, _| rng.random_range(0..1024) as f64 / 1024.0);
        let shift = |img: &GrayImage| img.map(|v| v + 0.5);
        assert_eq!(
            psnr(&shift(&a), &shift(&b), 1.0).unwrap(),
            psnr(&a, &b, 1.0).unwrap()
        );
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = make_background(BackgroundKind::Structured, 1, 64, 48);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (x, y) = (random(4, 40, 30), random(5, 40, 30));
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!(ssim(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn ssim_constant_shift_closed_form() {
        let mu1 = 0.2;
        let mu2 = mu1 + 0.5;
        let a = GrayImage::filled(24, 24, mu1);
        let b = GrayImage::filled(24, 24, mu2);
        let c1 = 1e-4;
        let expect = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!(got < 1.0);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = GrayImage::filled(10, 30, 0.0);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn coeff_loss_examples() {
        let a = CoeffVector::new(3, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(coeff_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(0, 0, a.get(0, 0) + 1.0);
        assert_eq!(coeff_loss(&b, &a).unwrap(), 0.1);
        assert_eq!(coeff_loss_l1(&b, &a).unwrap(), 0.1);
        assert!(coeff_loss(&a, &CoeffVector::zeros(2).unwrap()).is_err());
    }

    #[test]
    fn coeff_loss_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();
            let t: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut acc = 0.0;
            for i in 0..15 {
                acc += (p[i] - t[i]).powi(2);
            }
            let got = coeff_loss(
                &CoeffVector::new(4, p).unwrap(),
                &CoeffVector::new(4, t).unwrap(),
            )
            .unwrap();
            assert!((got - acc / 15.0).abs() < 1e-15);
            assert!(got >= 0.0);
        }
    }

    /// 12x12 patch: 2x2 target of 10 in the middle, checkerboard 4/6 ring.
    fn scr_patch() -> (GrayImage, ScrSpec) {
        let bbox = BBox::new(5, 5, 2, 2);
        let img = GrayImage::from_fn(12, 12, |x, y| {
            if bbox.contains(x, y) {
                10.0
            } else if (x + y) % 2 == 0 {
                4.0
            } else {
                6.0
            }
        });
        (img, ScrSpec::new(bbox))
    }

    #[test]
    fn scr_hand_built_patch() {
        let (img, spec) = scr_patch();
        let stats = region_stats(&img, &spec).unwrap();
        assert_eq!(stats.background_count, 140);
        assert_eq!(stats.background_mean, 5.0);
        assert_eq!(stats.background_std, 1.0);
        assert!((scr(&img, &spec).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn scr_equal_means_is_zero_and_flat_ring_is_degenerate() {
        let (img, spec) = scr_patch();
        let flat_target = img.map(|v| if v == 10.0 { 5.0 } else { v });
        assert_eq!(scr(&flat_target, &spec).unwrap(), 0.0);
        let flat = GrayImage::filled(12, 12, 3.0);
        assert!(matches!(scr(&flat, &spec), Err(Error::DegenerateBackground)));
        assert!(matches!(
            scrg(&flat_target, &img, &spec),
            Err(Error::UndefinedGain)
        ));
    }

    #[test]
    fn scr_invariances() {
        let img = make_background(BackgroundKind::CloudNoise, 2, 60, 60);
        let spec = ScrSpec::new(BBox::new(20, 25, 6, 4));
        let base = scr(&img, &spec).unwrap();
        assert!((scr(&img.map(|v| v + 0.7), &spec).unwrap() - base).abs() < 1e-9 * base);
        assert!((scr(&img.map(|v| v * 3.5), &spec).unwrap() - base).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn scr_clips_at_borders() {
        let img = make_background(BackgroundKind::CloudNoise, 3, 30, 30);
        let spec = ScrSpec::new(BBox::new(0, 0, 4, 4));
        assert_eq!(spec.neighbourhood(30, 30), BBox::new(0, 0, 9, 9));
        assert_eq!(region_stats(&img, &spec).unwrap().background_count, 81 - 16);
        let whole = ScrSpec::new(BBox::new(0, 0, 30, 30));
        assert!(matches!(region_stats(&img, &whole), Err(Error::Param(_))));
    }

    #[test]
    fn scrg_ratio_algebra() {
        let (img, spec) = scr_patch();
        assert!((scrg(&img, &img, &spec).unwrap() - 1.0).abs() < 1e-12);
        // Halve the ring spread around the same mean: 4/6 -> 4.5/5.5.
        let calmer = img.map(|v| if v == 10.0 { v } else { 5.0 + (v - 5.0) / 2.0 });
        assert!((scrg(&img, &calmer, &spec).unwrap() - 2.0).abs() < 1e-12);
    }
}
