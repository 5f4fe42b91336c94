//! Image quality grading from an image and its reconstruction.
//!
//! A reconstructor stands in for a learned autoencoder: good crops come back
//! nearly unchanged, occluded or badly framed crops do not. The joint
//! similarity of SSIM, histogram intersection and `1 - MSE` is then pushed
//! through a logarithmic mapping onto `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EngineConfig, ScoreWeights};
use crate::error::{Error, Result};
use crate::types::{GrayImage, PartScore, Tracklet};

/// SSIM window side; images narrower than this use their full extent.
pub const SSIM_WINDOW: usize = 8;
/// Stabilizer for the luminance term, `(0.01 L)^2` with `L = 1`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// Stabilizer for the contrast-structure term, `(0.03 L)^2` with `L = 1`.
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const HIST_BINS: usize = 64;

/// Produces an image of identical dimensions with pixels in `[0, 1]`.
pub trait Reconstructor {
    fn reconstruct(&self, img: &GrayImage) -> GrayImage;
}

impl<R: Reconstructor + ?Sized> Reconstructor for &R {
    fn reconstruct(&self, img: &GrayImage) -> GrayImage {
        (**self).reconstruct(img)
    }
}

/// Perfect reconstruction.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, img: &GrayImage) -> GrayImage {
        img.clone()
    }
}

/// Degradation oracle: `passes` rounds of a 3x3 box blur with edge replication.
#[derive(Debug, Clone, Copy)]
pub struct BoxBlurReconstructor {
    pub passes: usize,
}

impl Reconstructor for BoxBlurReconstructor {
    fn reconstruct(&self, img: &GrayImage) -> GrayImage {
        box_blur(img, self.passes)
    }
}

/// Pastes a block of uniform noise over the input before blurring it, so the
/// reconstruction misses content the way a poorly reconstructed occluded
/// crop does. Block placement is a deterministic function of `seed`.
#[derive(Debug, Clone, Copy)]
pub struct OcclusionStub {
    pub seed: u64,
    /// Range of the block side as a fraction of the image side. The side is
    /// drawn uniformly from it on every call.
    pub block_frac: (f64, f64),
    pub blur_passes: usize,
}

impl Reconstructor for OcclusionStub {
    fn reconstruct(&self, img: &GrayImage) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.block_frac;
        let frac = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let occluded = paste_noise_block(img, frac, &mut rng);
        box_blur(&occluded, self.blur_passes)
    }
}

/// Returns a copy of `img` with a square block of uniform noise at a random
/// position. The block side is `block_frac` of the smaller image side.
pub fn paste_noise_block<R: Rng + ?Sized>(img: &GrayImage, block_frac: f64, rng: &mut R) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let side = ((w.min(h) as f64 * block_frac.clamp(0.0, 1.0)).round() as usize).clamp(1, w.min(h));
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let mut px = img.pixels().to_vec();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            px[y * w + x] = rng.random::<f64>();
        }
    }
    GrayImage::new(w, h, px).expect("noise stays in [0, 1]")
}

pub fn box_blur(img: &GrayImage, passes: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut cur = img.pixels().to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..passes {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += cur[yy * w + xx];
                    }
                }
                next[y * w + x] = (acc / 9.0).clamp(0.0, 1.0);
            }
        }
        core::mem::swap(&mut cur, &mut next);
    }
    GrayImage::new(w, h, cur).expect("blur preserves range")
}

/// Summed-area table with a zero guard row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn window(&self, x: usize, y: usize, ww: usize, wh: usize) -> f64 {
        let s = self.w + 1;
        self.sums[(y + wh) * s + x + ww] - self.sums[y * s + x + ww] - self.sums[(y + wh) * s + x]
            + self.sums[y * s + x]
    }
}

/// Mean SSIM over all `8x8` windows at stride 1 with uniform weights.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width(), a.height());
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let (pa, pb) = (a.pixels(), b.pixels());
    let ia = Integral::new(w, h, |i| pa[i]);
    let ib = Integral::new(w, h, |i| pb[i]);
    let iaa = Integral::new(w, h, |i| pa[i] * pa[i]);
    let ibb = Integral::new(w, h, |i| pb[i] * pb[i]);
    let iab = Integral::new(w, h, |i| pa[i] * pb[i]);
    let n = (ww * wh) as f64;

    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - wh {
        for x in 0..=w - ww {
            let mu_a = ia.window(x, y, ww, wh) / n;
            let mu_b = ib.window(x, y, ww, wh) / n;
            let var_a = iaa.window(x, y, ww, wh) / n - mu_a * mu_a;
            let var_b = ibb.window(x, y, ww, wh) / n - mu_b * mu_b;
            let cov = iab.window(x, y, ww, wh) / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

fn histogram(img: &GrayImage) -> [usize; HIST_BINS] {
    let mut h = [0; HIST_BINS];
    for &p in img.pixels() {
        let bin = ((p * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        h[bin] += 1;
    }
    h
}

/// Intersection of normalized 64-bin histograms. Counts are intersected
/// before normalizing, so identical images give exactly 1.
pub fn hist_similarity(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    let (ha, hb) = (histogram(a), histogram(b));
    let common: usize = ha.iter().zip(&hb).map(|(x, y)| *x.min(y)).sum();
    Ok(common as f64 / a.pixels().len() as f64)
}

/// `1 - MSE`; pixels in `[0, 1]` keep this in `[0, 1]`.
pub fn mse_similarity(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(1.0 - mse)
}

pub fn raw_score(original: &GrayImage, recon: &GrayImage, weights: ScoreWeights) -> Result<f64> {
    Ok(weights.ssim * ssim(original, recon)?
        + weights.hist * hist_similarity(original, recon)?
        + weights.mse * mse_similarity(original, recon)?)
}

/// Logarithmic mapping of `x` from `[min, max]` onto `[0, 1]`. Inputs outside
/// the bounds are clamped first.
pub fn log_map(x: f64, min: f64, max: f64, k: f64) -> Result<PartScore> {
    if !(min < max) || !(k > 0.0) || !k.is_finite() {
        return Err(Error::InvalidBounds);
    }
    let x = if x.is_nan() { min } else { x.clamp(min, max) };
    let y = libm::log1p(k * (x - min)) / libm::log1p(k * (max - min));
    Ok(PartScore::saturating(y))
}

pub fn grade_image<R: Reconstructor + ?Sized>(img: &GrayImage, r: &R, cfg: &EngineConfig) -> Result<PartScore> {
    let recon = r.reconstruct(img);
    let raw = raw_score(img, &recon, cfg.score_weights)?;
    log_map(raw, cfg.log_min, cfg.log_max, cfg.log_k)
}

/// Scores every observation of the tracklet. Embeddings and frame order are
/// left untouched.
pub fn grade_tracklet<R: Reconstructor + ?Sized>(t: &Tracklet, r: &R, cfg: &EngineConfig) -> Result<Tracklet> {
    let mut out = t.clone();
    for (fi, frame) in out.frames_mut().iter_mut().enumerate() {
        for (pi, obs) in frame.iter_mut().enumerate() {
            let img = obs
                .image
                .as_ref()
                .ok_or(Error::MissingImage { frame: fi, part: pi })?;
            obs.score = grade_image(img, r, cfg)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PartObservation, PassengerId};
    use proptest::prelude::*;

    fn checkerboard(n: usize) -> GrayImage {
        GrayImage::from_fn(n, n, |x, y| ((x + y) % 2) as f64).unwrap()
    }

    fn smooth(n: usize, phase: f64) -> GrayImage {
        GrayImage::from_fn(n, n, |x, y| {
            0.5 + 0.3 * libm::sin(x as f64 * 0.2 + phase) * libm::cos(y as f64 * 0.15)
        })
        .unwrap()
    }

    #[test]
    fn identity_cases_are_exact() {
        let img = smooth(32, 0.3);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        assert_eq!(hist_similarity(&img, &img).unwrap(), 1.0);
        assert_eq!(mse_similarity(&img, &img).unwrap(), 1.0);
        let c = GrayImage::filled(16, 16, 0.5).unwrap();
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn checkerboard_against_inverse() {
        let x = checkerboard(16);
        let inv = GrayImage::from_fn(16, 16, |i, j| 1.0 - x.get(i, j)).unwrap();
        // Every 8x8 window: means 0.5, variances 0.25, covariance -0.25, so
        // the window SSIM collapses to (C2 - 0.5) / (C2 + 0.5).
        let expected = (SSIM_C2 - 0.5) / (SSIM_C2 + 0.5);
        assert!((ssim(&x, &inv).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 1.0).abs() < 4e-3);
    }

    #[test]
    fn constant_images() {
        let black = GrayImage::filled(16, 16, 0.0).unwrap();
        let white = GrayImage::filled(16, 16, 1.0).unwrap();
        // Luminance term only: C1 / (1 + C1).
        let s = ssim(&black, &white).unwrap();
        assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15);
        assert_eq!(hist_similarity(&black, &white).unwrap(), 0.0);
        assert_eq!(mse_similarity(&black, &white).unwrap(), 0.0);

        let half_grey = GrayImage::filled(8, 8, 0.25).unwrap();
        let three_q = GrayImage::filled(8, 8, 0.75).unwrap();
        assert_eq!(mse_similarity(&half_grey, &three_q).unwrap(), 0.75);
    }

    #[test]
    fn half_black_histogram() {
        let half = GrayImage::from_fn(8, 8, |x, _| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let black = GrayImage::filled(8, 8, 0.0).unwrap();
        assert_eq!(hist_similarity(&half, &black).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let a = GrayImage::filled(8, 8, 0.0).unwrap();
        let b = GrayImage::filled(8, 9, 0.0).unwrap();
        assert!(matches!(ssim(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(hist_similarity(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(mse_similarity(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(raw_score(&a, &b, ScoreWeights::default()).is_err());
    }

    #[test]
    fn raw_score_cases() {
        let img = smooth(16, 1.0);
        assert_eq!(raw_score(&img, &img, ScoreWeights::default()).unwrap(), 1.0);

        let black = GrayImage::filled(16, 16, 0.0).unwrap();
        let white = GrayImage::filled(16, 16, 1.0).unwrap();
        let expected = 0.2 * SSIM_C1 / (1.0 + SSIM_C1);
        assert!((raw_score(&black, &white, ScoreWeights::default()).unwrap() - expected).abs() < 1e-15);

        let other = smooth(16, 2.0);
        let only_ssim = ScoreWeights { ssim: 1.0, hist: 0.0, mse: 0.0 };
        assert_eq!(raw_score(&img, &other, only_ssim).unwrap(), ssim(&img, &other).unwrap());
    }

    #[test]
    fn log_map_cases() {
        assert_eq!(log_map(0.2, 0.2, 0.9, 20.0).unwrap().get(), 0.0);
        assert_eq!(log_map(0.9, 0.2, 0.9, 20.0).unwrap().get(), 1.0);
        let v = log_map(0.5, 0.0, 1.0, 20.0).unwrap().get();
        assert!((v - libm::log(11.0) / libm::log(21.0)).abs() < 1e-12);
        assert!((v - 0.78761).abs() < 1e-4);
        assert_eq!(log_map(-3.0, 0.0, 1.0, 20.0).unwrap().get(), 0.0);
        assert_eq!(log_map(3.0, 0.0, 1.0, 20.0).unwrap().get(), 1.0);
        assert_eq!(log_map(0.5, 1.0, 1.0, 20.0), Err(Error::InvalidBounds));
        assert_eq!(log_map(0.5, 0.0, 1.0, 0.0), Err(Error::InvalidBounds));
    }

    fn image_tracklet(imgs: &[GrayImage]) -> Tracklet {
        let frames = imgs
            .iter()
            .map(|img| {
                let mut obs = PartObservation::from_image(img.clone());
                obs.embedding = Some(vec![img.get(0, 0); 2]);
                obs.score = PartScore::ZERO;
                [obs.clone(), obs.clone(), obs]
            })
            .collect();
        Tracklet::new(PassengerId(3), frames).unwrap()
    }

    #[test]
    fn grade_tracklet_identity_and_blank() {
        let cfg = EngineConfig::default();
        let t = image_tracklet(&[smooth(16, 0.0), smooth(16, 0.7)]);
        let graded = grade_tracklet(&t, &IdentityReconstructor, &cfg).unwrap();
        for frame in graded.frames() {
            for obs in frame {
                assert_eq!(obs.score.get(), 1.0);
            }
        }

        struct Blank;
        impl Reconstructor for Blank {
            fn reconstruct(&self, img: &GrayImage) -> GrayImage {
                GrayImage::filled(img.width(), img.height(), 0.0).unwrap()
            }
        }
        let graded = grade_tracklet(&t, &Blank, &cfg).unwrap();
        for (g, o) in graded.frames().iter().zip(t.frames()) {
            for (gobs, oobs) in g.iter().zip(o) {
                assert!(gobs.score.get() < 1.0);
                assert_eq!(gobs.embedding, oobs.embedding);
                assert_eq!(gobs.image, oobs.image);
            }
        }
    }

    #[test]
    fn grade_tracklet_missing_image() {
        let obs = PartObservation::from_embedding(vec![0.0], PartScore::ONE);
        let t = Tracklet::new(PassengerId(0), vec![[obs.clone(), obs.clone(), obs]]).unwrap();
        assert_eq!(
            grade_tracklet(&t, &IdentityReconstructor, &EngineConfig::default()),
            Err(Error::MissingImage { frame: 0, part: 0 })
        );
    }

    #[test]
    fn blur_lowers_score_of_occluded_input() {
        // A smooth crop survives blurring; a crop with pasted clutter does not.
        let cfg = EngineConfig::default();
        let blur = BoxBlurReconstructor { passes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean = smooth(64, 0.4);
        let occluded = paste_noise_block(&clean, 0.5, &mut rng);
        let s_clean = grade_image(&clean, &blur, &cfg).unwrap().get();
        let s_occ = grade_image(&occluded, &blur, &cfg).unwrap().get();
        assert!(s_occ < s_clean, "{s_occ} !< {s_clean}");
    }

    fn small_image() -> impl Strategy<Value = (GrayImage, GrayImage)> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(0.0f64..=1.0, w * h),
                proptest::collection::vec(0.0f64..=1.0, w * h),
            )
                .prop_map(move |(a, b)| (GrayImage::new(w, h, a).unwrap(), GrayImage::new(w, h, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn similarities_are_symmetric_and_bounded((a, b) in small_image()) {
            let s1 = ssim(&a, &b).unwrap();
            prop_assert!((s1 - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
            let h = hist_similarity(&a, &b).unwrap();
            prop_assert!((h - hist_similarity(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&h));
            let m = mse_similarity(&a, &b).unwrap();
            prop_assert_eq!(m, mse_similarity(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&m));
            let r = raw_score(&a, &b, ScoreWeights::default()).unwrap();
            prop_assert!((-0.2 - 1e-12..=1.0 + 1e-12).contains(&r));
        }

        #[test]
        fn log_map_monotone_and_concave(x1 in 0.0f64..1.0, x2 in 0.0f64..1.0, k in 0.1f64..100.0) {
            prop_assume!((x1 - x2).abs() > 1e-9);
            let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
            let f = |x| log_map(x, 0.0, 1.0, k).unwrap().get();
            prop_assert!(f(lo) < f(hi));
            prop_assert!(f(0.5 * (lo + hi)) >= 0.5 * (f(lo) + f(hi)) - 1e-12);
        }

        #[test]
        fn blur_keeps_shape_and_range((a, _b) in small_image(), passes in 0usize..3) {
            let r = box_blur(&a, passes);
            prop_assert_eq!((r.width(), r.height()), (a.width(), a.height()));
            prop_assert!(r.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
