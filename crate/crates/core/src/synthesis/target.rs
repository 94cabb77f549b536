//! Small Gaussian targets and their annotation boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// `sqrt(2 ln 10)`: radius of the 10%-of-peak contour in units of sigma.
pub const TENTH_CONTOUR: f64 = 2.145_966_026_289_347;

/// Axis-aligned pixel box: top-left `(x, y)`, extent `w x h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    /// Overlap area with another box.
    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w * h
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::param(format!("degenerate box {self:?}")));
        }
        if self.right() > width || self.bottom() > height {
            return Err(Error::param(format!(
                "box {self:?} exceeds {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn translated(&self, dx: isize, dy: isize) -> BBox {
        BBox {
            x: (self.x as isize + dx) as usize,
            y: (self.y as isize + dy) as usize,
            ..*self
        }
    }
}

/// Side length of the box enclosing the 10% contour of a blob with this radius.
pub fn target_side(radius: f64) -> usize {
    2 * half_extent(radius / 2.0)
}

/// Radius whose 10%-contour box has exactly `side` pixels (`side` even, >= 2).
pub fn radius_for_side(side: usize) -> f64 {
    let half = (side / 2).max(1) as f64;
    2.0 * (half - 0.5) / TENTH_CONTOUR
}

fn half_extent(sigma: f64) -> usize {
    (sigma * TENTH_CONTOUR).ceil() as usize
}

/// Box for a target centred at `center` with the given radius.
pub fn target_bbox(center: (f64, f64), radius: f64) -> (isize, isize, usize) {
    let half = half_extent(radius / 2.0);
    let x0 = (center.0 - half as f64).round() as isize;
    let y0 = (center.1 - half as f64).round() as isize;
    (x0, y0, 2 * half)
}

/// Adds an isotropic Gaussian of peak `contrast` and `sigma = radius / 2` at
/// `center`, returning the image and the 10%-contour box.
pub fn inject_target(
    img: &GrayImage,
    center: (f64, f64),
    radius: f64,
    contrast: f64,
) -> Result<(GrayImage, BBox)> {
    let mut out = img.clone();
    let bbox = add_target(&mut out, center, radius, contrast)?;
    Ok((out, bbox))
}

/// In-place variant of [`inject_target`].
pub fn add_target(img: &mut GrayImage, center: (f64, f64), radius: f64, contrast: f64) -> Result<BBox> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::param(format!("target radius must be positive, got {radius}")));
    }
    if contrast == 0.0 || !contrast.is_finite() {
        return Err(Error::param("target contrast must be finite and nonzero"));
    }
    let (w, h) = img.dims();
    let (x0, y0, side) = target_bbox(center, radius);
    if x0 < 0 || y0 < 0 || x0 as usize + side > w || y0 as usize + side > h {
        return Err(Error::param(format!(
            "target at ({:.1}, {:.1}) radius {radius} does not fit in {w}x{h}",
            center.0, center.1
        )));
    }
    let bbox = BBox::new(x0 as usize, y0 as usize, side, side);

    let sigma = radius / 2.0;
    let reach = (4.0 * sigma).ceil() as isize;
    let (cx, cy) = center;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let xr = (cx.round() as isize - reach).max(0)..=(cx.round() as isize + reach).min(w as isize - 1);
    let yr = (cy.round() as isize - reach).max(0)..=(cy.round() as isize + reach).min(h as isize - 1);
    for y in yr {
        for x in xr.clone() {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let v = img.get(x as usize, y as usize);
            img.set(x as usize, y as usize, v + contrast * (-(dx * dx + dy * dy) * inv).exp());
        }
    }
    Ok(bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_constant() {
        assert!((TENTH_CONTOUR - (2.0 * 10f64.ln()).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_contrast_is_rejected() {
        let img = GrayImage::filled(32, 32, 0.3);
        assert!(inject_target(&img, (16.0, 16.0), 3.0, 0.0).is_err());
    }

    #[test]
    fn peak_rises_by_contrast() {
        let img = GrayImage::filled(32, 32, 0.3);
        let (out, _) = inject_target(&img, (16.0, 12.0), 3.0, 0.25).unwrap();
        assert!((out.get(16, 12) - 0.55).abs() < 1e-15);
        assert!(out.data().iter().all(|&v| v <= 0.55 + 1e-15));
    }

    #[test]
    fn radius_four_box_side() {
        // sigma = 2; exp(-r^2 / 8) = 0.1 at r = 2 sqrt(2 ln 10) = 4.29 -> half-side 5.
        let r = 2.0 * (2.0 * 10f64.ln()).sqrt();
        assert_eq!(2 * (r.ceil() as usize), 10);
        let img = GrayImage::filled(40, 40, 0.0);
        let (_, bbox) = inject_target(&img, (20.0, 20.0), 4.0, 1.0).unwrap();
        assert_eq!((bbox.w, bbox.h), (10, 10));
        assert_eq!((bbox.x, bbox.y), (15, 15));
    }

    #[test]
    fn radius_for_side_inverts() {
        for side in (2..=60).step_by(2) {
            assert_eq!(target_side(radius_for_side(side)), side, "side {side}");
        }
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let img = GrayImage::filled(20, 20, 0.0);
        assert!(inject_target(&img, (1.0, 10.0), 4.0, 1.0).is_err());
        assert!(inject_target(&img, (10.0, 19.0), 4.0, 1.0).is_err());
        assert!(inject_target(&img, (10.0, 10.0), 4.0, 1.0).is_ok());
    }

    #[test]
    fn bbox_geometry() {
        let a = BBox::new(0, 0, 2, 2);
        let b = BBox::new(1, 1, 2, 2);
        assert_eq!(a.intersection(&b), 1);
        assert_eq!(a.intersection(&BBox::new(5, 5, 1, 1)), 0);
        assert!(a.validate(2, 2).is_ok());
        assert!(b.validate(2, 2).is_err());
        assert!(BBox::new(0, 0, 0, 1).validate(4, 4).is_err());
    }
}
