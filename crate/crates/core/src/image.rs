//! Single-channel real-valued images and the resampling/filtering used by the
//! estimators.
//!
//! Intensities are `f64` in a nominal `[0, 1]` range but are never clamped
//! here: degraded images routinely leave that range. Clamping happens only
//! when an image is written to disk (see [`crate::io`]).

use crate::error::{Error, Result};

/// Row-major grayscale image with top-left origin (`x` = column, `y` = row).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image, checking dimensions, buffer length and finiteness.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::param(format!(
                "buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite intensity at pixel ({}, {})",
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Trusted constructor for buffers built inside the crate.
    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert!(width > 0 && height > 0 && data.len() == width * height);
        Self {
            width,
            height,
            data,
        }
    }

    /// Constant image. Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Image whose pixel `(x, y)` is `f(x, y)`. Panics on a zero dimension.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.width)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixelwise combination of two images of identical size.
    pub fn zip_map(&self, other: &GrayImage, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_dims(&self, other: &GrayImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::param(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Output of [`downsample2`]. `truncated` is set when an odd trailing
/// row or column had to be dropped before pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsampled {
    pub image: GrayImage,
    pub truncated: bool,
}

/// Halves both dimensions by 2x2 mean pooling.
///
/// An odd trailing row/column is dropped and flagged. An axis of length 1
/// cannot be pooled and is kept as is (also flagged).
pub fn downsample2(img: &GrayImage) -> Downsampled {
    let (w, h) = img.dims();
    let (fx, ow) = if w >= 2 { (2, w / 2) } else { (1, 1) };
    let (fy, oh) = if h >= 2 { (2, h / 2) } else { (1, 1) };
    let truncated = w % 2 == 1 || h % 2 == 1;
    let norm = 1.0 / (fx * fy) as f64;

    let mut data = vec![0.0; ow * oh];
    for oy in 0..oh {
        for dy in 0..fy {
            let src = img.row(oy * fy + dy);
            let dst = &mut data[oy * ow..(oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                let base = ox * fx;
                *d += src[base..base + fx].iter().sum::<f64>();
            }
        }
    }
    data.iter_mut().for_each(|v| *v *= norm);
    Downsampled {
        image: GrayImage {
            width: ow,
            height: oh,
            data,
        },
        truncated,
    }
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    Ok(kernel)
}

/// Separable Gaussian blur with edge replication at the borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let kernel = gaussian_kernel(sigma)?;
    Ok(convolve_separable(img, &kernel))
}

/// Convolves rows then columns with the same odd-length symmetric kernel,
/// replicating edge pixels. Mirrored taps share one multiply.
pub(crate) fn convolve_separable(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let (w, h) = img.dims();
    let r = kernel.len() / 2;
    let (centre, side) = (kernel[r], &kernel[r + 1..]);

    // Horizontal pass through a padded row buffer.
    let mut tmp = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for (y, row) in img.rows().enumerate() {
        padded[..r].fill(row[0]);
        padded[r..r + w].copy_from_slice(row);
        padded[r + w..].fill(row[w - 1]);
        let out = &mut tmp[y * w..(y + 1) * w];
        for (o, v) in out.iter_mut().zip(row) {
            *o = centre * v;
        }
        for (m, &k) in side.iter().enumerate() {
            let (left, right) = (&padded[r - m - 1..], &padded[r + m + 1..]);
            for ((o, a), b) in out.iter_mut().zip(left).zip(right) {
                *o += k * (a + b);
            }
        }
    }

    // Vertical pass accumulates whole rows so the inner loop is contiguous.
    let mut data = vec![0.0; w * h];
    let src_row = |sy: isize| {
        let sy = sy.clamp(0, h as isize - 1) as usize;
        &tmp[sy * w..(sy + 1) * w]
    };
    for y in 0..h {
        let out = &mut data[y * w..(y + 1) * w];
        for (o, v) in out.iter_mut().zip(src_row(y as isize)) {
            *o = centre * v;
        }
        for (m, &k) in side.iter().enumerate() {
            let d = m as isize + 1;
            let (above, below) = (src_row(y as isize - d), src_row(y as isize + d));
            for ((o, a), b) in out.iter_mut().zip(above).zip(below) {
                *o += k * (a + b);
            }
        }
    }
    GrayImage::from_parts(w, h, data)
}
