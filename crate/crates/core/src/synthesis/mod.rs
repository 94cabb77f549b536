//! Degraded-scene synthesis: `Y = C + k B` over procedural clear images with
//! annotated small targets.

mod background;
mod target;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use background::{make_background, BackgroundKind, FLAT_LEVEL};
pub use target::{add_target, inject_target, radius_for_side, target_bbox, target_side, BBox, TENTH_CONTOUR};

use crate::biasfield::{eval_bias_field, for_each_field_row, sample_coeffs_with, AmplitudeSpec, CoeffVector, CoordNorm};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub clear: GrayImage,
    pub coeffs: CoeffVector,
    pub coord: CoordNorm,
    pub severity: f64,
    pub degraded: GrayImage,
    pub annotations: Vec<BBox>,
    pub background: BackgroundKind,
    pub seed: u64,
}

impl SceneRecord {
    /// `k B` as rendered for this scene.
    pub fn scaled_bias(&self) -> GrayImage {
        eval_bias_field(&self.coeffs, self.clear.width(), self.clear.height(), self.coord)
            .map(|b| self.severity * b)
    }
}

/// `Y = C + k B`, unclamped.
pub fn synthesize_degraded(clear: &GrayImage, coeffs: &CoeffVector, k: f64, coord: CoordNorm) -> GrayImage {
    let (w, h) = clear.dims();
    let mut data = Vec::with_capacity(w * h);
    for_each_field_row(coeffs, w, h, coord, |j, field| {
        data.extend(clear.row(j).iter().zip(field).map(|(c, b)| c + k * b));
    });
    GrayImage::from_parts(w, h, data)
}

/// SplitMix64 finalizer over `(seed, index)`: per-sample seeds that do not
/// depend on generation order.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lower edges of the target-size bins; the last bin is open-ended.
pub const SCALE_BIN_EDGES: [usize; 4] = [2, 10, 20, 30];
/// Largest side drawn for the open-ended bin.
pub const MAX_TARGET_SIDE: usize = 40;

/// Index of the size bin holding `side`.
pub fn scale_bin(side: usize) -> usize {
    SCALE_BIN_EDGES.iter().rposition(|&e| side >= e).unwrap_or(0)
}

/// Recipe for one scene. Everything except the seed is shared by a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub degree: usize,
    pub k: f64,
    pub coord: CoordNorm,
    pub amplitude: AmplitudeSpec,
    /// Relative weights of each background kind.
    pub backgrounds: Vec<(BackgroundKind, f64)>,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    /// Proportions of the `[2,10) [10,20) [20,30) [30,inf)` side bins.
    pub scale_mix: [f64; 4],
    /// Inclusive peak-contrast range of injected targets.
    pub contrast: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 512,
            degree: 3,
            k: 10.0,
            coord: CoordNorm::UnitCentered,
            amplitude: AmplitudeSpec::default(),
            backgrounds: vec![
                (BackgroundKind::CloudNoise, 0.5),
                (BackgroundKind::Structured, 0.3),
                (BackgroundKind::Gradient, 0.1),
                (BackgroundKind::Flat, 0.1),
            ],
            targets: (1, 3),
            // Target counts per bin in the reference synthetic set: 9852, 16406, 3110, 632.
            scale_mix: [0.3284, 0.5469, 0.1037, 0.0211],
            contrast: (0.15, 0.35),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        crate::biasfield::coeff_count(self.degree)?;
        if self.width < 2 * MAX_TARGET_SIDE || self.height < 2 * MAX_TARGET_SIDE {
            return Err(Error::param(format!(
                "scene size {}x{} too small for targets (need at least {})",
                self.width,
                self.height,
                2 * MAX_TARGET_SIDE
            )));
        }
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::param("severity k must be finite and non-negative"));
        }
        if self.backgrounds.is_empty()
            || self.backgrounds.iter().any(|(_, w)| !(*w >= 0.0))
            || self.backgrounds.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err(Error::param("background weights must be non-negative with a positive sum"));
        }
        if self.targets.0 > self.targets.1 {
            return Err(Error::param("target count range is inverted"));
        }
        if self.scale_mix.iter().any(|p| !(*p >= 0.0)) || self.scale_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::param("scale mix must be non-negative with a positive sum"));
        }
        let (lo, hi) = self.contrast;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::param("contrast range must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

fn pick_weighted<R: Rng, T: Copy>(rng: &mut R, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
    }
    items.iter().rev().find(|(_, w)| *w > 0.0).map(|(i, _)| *i).unwrap()
}

fn draw_side<R: Rng>(rng: &mut R, mix: &[f64; 4]) -> usize {
    let bins: Vec<(usize, f64)> = mix.iter().copied().enumerate().collect();
    let bin = pick_weighted(rng, &bins);
    let lo = SCALE_BIN_EDGES[bin];
    let hi = SCALE_BIN_EDGES.get(bin + 1).copied().unwrap_or(MAX_TARGET_SIDE + 2);
    // Sides are even: the 10% contour box is symmetric about the centre pixel.
    2 * rng.random_range(lo / 2..hi / 2)
}

/// Rounds to the nearest 16-bit code so clear images survive a file round trip.
fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Generates one scene from its own seed.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = pick_weighted(&mut rng, &config.backgrounds);
    let mut clear = make_background(background, rng.random(), config.width, config.height);

    let count = rng.random_range(config.targets.0..=config.targets.1);
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let side = draw_side(&mut rng, &config.scale_mix);
        let half = side / 2;
        let cx = rng.random_range(half..=config.width - half) as f64;
        let cy = rng.random_range(half..=config.height - half) as f64;
        let contrast = rng.random_range(config.contrast.0..=config.contrast.1);
        annotations.push(add_target(&mut clear, (cx, cy), radius_for_side(side), contrast)?);
    }
    let clear = clear.map(quantize16);

    let coeffs = sample_coeffs_with(&mut rng, config.degree, &config.amplitude)?;
    let degraded = synthesize_degraded(&clear, &coeffs, config.k, config.coord);
    Ok(SceneRecord {
        clear,
        coeffs,
        coord: config.coord,
        severity: config.k,
        degraded,
        annotations,
        background,
        seed,
    })
}
