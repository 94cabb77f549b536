//! Supervision losses evaluated on feature maps: the target mask, the
//! per-stage target-enhancement/background-suppression (TEBS) cross-entropy,
//! the bias-robust (BR) cosine loss and the combined training objective.
//!
//! Feature maps are single-channel [`GrayImage`]s. Multi-channel stages are
//! handled by evaluating each channel as its own [`FeatureStack`] and
//! averaging the per-channel losses ([`tebs_loss_channels`], [`br_loss_channels`]).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synthesis::BBox;

pub type FeatureMap = GrayImage;

/// Number of backbone stages in a [`FeatureStack`].
pub const STAGES: usize = 4;
/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

pub const LAMBDA_WARMUP_EPOCHS: u32 = 20;
pub const LAMBDA_WARMUP: f64 = 1.0;
pub const LAMBDA_LATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::param(format!(
                "mask buffer of {} bits does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    /// Thresholds an image at 0.5.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v >= 0.5).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("valid mask dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Rasterizes the union of the boxes.
pub fn make_mask(bboxes: &[BBox], width: usize, height: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(width, height, vec![false; width * height])?;
    for b in bboxes {
        b.validate(width, height)?;
        for y in b.y..b.bottom() {
            mask.bits[y * width + b.x..y * width + b.right()].fill(true);
        }
    }
    Ok(mask)
}

/// Source index range covered by output cell `i` when resampling `src` -> `dst`.
fn preimage(i: usize, src: usize, dst: usize) -> std::ops::Range<usize> {
    let lo = i * src / dst;
    let hi = ((i + 1) * src).div_ceil(dst).max(lo + 1);
    lo..hi.min(src)
}

/// Max-pool resampling: an output cell is set when any source pixel it covers is.
pub fn resize_mask(mask: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask> {
    if width == 0 || height == 0 {
        return Err(Error::param("mask size must be positive"));
    }
    if (width, height) == (mask.width, mask.height) {
        return Ok(mask.clone());
    }
    let mut bits = Vec::with_capacity(width * height);
    for v in 0..height {
        let rows = preimage(v, mask.height, height);
        for u in 0..width {
            let cols = preimage(u, mask.width, width);
            bits.push(rows.clone().any(|y| cols.clone().any(|x| mask.get(x, y))));
        }
    }
    BinaryMask::new(width, height, bits)
}

/// Exactly four stage maps, each with its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    stages: Vec<FeatureMap>,
}

impl FeatureStack {
    pub fn new(stages: Vec<FeatureMap>) -> Result<Self> {
        if stages.len() != STAGES {
            return Err(Error::param(format!(
                "a feature stack has {STAGES} stages, got {}",
                stages.len()
            )));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[FeatureMap] {
        &self.stages
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            stages: self.stages.iter().map(|s| s.map(&f)).collect(),
        }
    }
}

fn ensure_finite(map: &FeatureMap, what: &str) -> Result<()> {
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::param(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy between a mask and probabilities.
pub fn bce(mask: &BinaryMask, probs: &FeatureMap) -> Result<f64> {
    if (mask.width, mask.height) != probs.dims() {
        return Err(Error::param("mask and feature map sizes differ"));
    }
    ensure_finite(probs, "feature map")?;
    let total: f64 = mask
        .bits
        .iter()
        .zip(probs.data())
        .map(|(&m, &f)| {
            let f = f.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if m {
                -f.ln()
            } else {
                -(1.0 - f).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean over stages of the cross-entropy against the mask resized to each stage.
pub fn tebs_loss(mask: &BinaryMask, features: &FeatureStack) -> Result<f64> {
    let mut total = 0.0;
    for stage in &features.stages {
        let m = resize_mask(mask, stage.width(), stage.height())?;
        total += bce(&m, stage)?;
    }
    Ok(total / STAGES as f64)
}

/// Channel-averaged [`tebs_loss`].
pub fn tebs_loss_channels(mask: &BinaryMask, channels: &[FeatureStack]) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::param("no feature channels"));
    }
    let mut total = 0.0;
    for c in channels {
        total += tebs_loss(mask, c)?;
    }
    Ok(total / channels.len() as f64)
}

/// Cosine similarity of two maps flattened to vectors.
pub fn cos_sim(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature("feature map has zero norm".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise cosine similarity matrix: entry `(i, j)` compares row `i` of `a`
/// with row `j` of `b`. Computed as the dot-product matrix `A B^T` divided
/// elementwise by the outer product of row norms.
pub fn cos_sim_matrix(a: &FeatureMap, b: &FeatureMap) -> Result<DMatrix<f64>> {
    a.ensure_same_dims(b)?;
    let (n, m) = a.dims();
    let am = DMatrix::from_row_slice(m, n, a.data());
    let bm = DMatrix::from_row_slice(m, n, b.data());
    let row_norms = |mat: &DMatrix<f64>, name: &str| -> Result<Vec<f64>> {
        (0..m)
            .map(|i| {
                let norm = mat.row(i).norm();
                if norm == 0.0 {
                    Err(Error::DegenerateFeature(format!("row {i} of {name} is zero")))
                } else {
                    Ok(norm)
                }
            })
            .collect()
    };
    let (na, nb) = (row_norms(&am, "a")?, row_norms(&bm, "b")?);
    let dots = &am * bm.transpose();
    Ok(DMatrix::from_fn(m, m, |i, j| dots[(i, j)] / (na[i] * nb[j])))
}

/// `(1/4) sum_i (1 - cos(F_C^i, F_R^i))`.
pub fn br_loss(clear: &FeatureStack, corrected: &FeatureStack) -> Result<f64> {
    let mut total = 0.0;
    for (i, (c, r)) in clear.stages.iter().zip(&corrected.stages).enumerate() {
        if c.dims() != r.dims() {
            return Err(Error::param(format!("stage {} shapes differ", i + 1)));
        }
        total += 1.0
            - cos_sim(c, r).map_err(|e| Error::param(format!("stage {}: {e}", i + 1)))?;
    }
    Ok(total / STAGES as f64)
}

/// Channel-averaged [`br_loss`]; the slices pair channels positionally.
pub fn br_loss_channels(clear: &[FeatureStack], corrected: &[FeatureStack]) -> Result<f64> {
    if clear.is_empty() || clear.len() != corrected.len() {
        return Err(Error::param("channel counts must match and be nonzero"));
    }
    let mut total = 0.0;
    for (c, r) in clear.iter().zip(corrected) {
        total += br_loss(c, r)?;
    }
    Ok(total / clear.len() as f64)
}

/// TEBS weight: 1 through epoch 20, 0.01 afterwards.
pub fn lambda_schedule(epoch: u32) -> Result<f64> {
    match epoch {
        0 => Err(Error::param("epochs are counted from 1")),
        e if e <= LAMBDA_WARMUP_EPOCHS => Ok(LAMBDA_WARMUP),
        _ => Ok(LAMBDA_LATE),
    }
}

/// Detector loss terms for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetComponents {
    pub cls: f64,
    pub reg: f64,
    pub tebs: f64,
    pub epoch: u32,
}

/// `L_det + L_BR` with `L_det = cls + reg + lambda(epoch) tebs`.
pub fn union_loss(det: &DetComponents, br: f64) -> Result<f64> {
    for (name, v) in [("cls", det.cls), ("reg", det.reg), ("tebs", det.tebs), ("br", br)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::param(format!("{name} loss must be finite and non-negative, got {v}")));
        }
    }
    Ok(det.cls + det.reg + lambda_schedule(det.epoch)? * det.tebs + br)
}
