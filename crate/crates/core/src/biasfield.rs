//! Bivariate polynomial bias fields.
//!
//! A degree-`D` field is `B(x, y) = sum_{t=0..D} sum_{s=0..D-t} a[t,s] x^t y^s`.
//! Coefficients are stored `t`-outer / `s`-inner, so for `D = 2` the order is
//! `(0,0) (0,1) (0,2) (1,0) (1,1) (2,0)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Number of monomials of total degree at most `degree`: `(D+1)(D+2)/2`.
pub fn coeff_count(degree: usize) -> Result<usize> {
    if degree < 1 {
        return Err(Error::param("polynomial degree must be at least 1"));
    }
    Ok((degree + 1) * (degree + 2) / 2)
}

/// Position of `x^t y^s` in the canonical ordering for the given degree.
pub fn monomial_index(degree: usize, t: usize, s: usize) -> usize {
    debug_assert!(t + s <= degree);
    // Each earlier `t' < t` block holds `degree - t' + 1` entries.
    t * (degree + 1) - t * t.saturating_sub(1) / 2 + s
}

/// `(t, s)` exponent pairs in canonical order.
pub fn exponents(degree: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=degree).flat_map(move |t| (0..=degree - t).map(move |s| (t, s)))
}

/// Mapping from pixel indices to polynomial coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordNorm {
    /// Column `0..W-1` maps affinely onto `[-1, 1]`; rows likewise.
    #[default]
    UnitCentered,
    /// Raw pixel indices.
    PixelRaw,
}

impl CoordNorm {
    /// Model coordinate of pixel index `i` along an axis with `n` pixels.
    #[inline]
    pub fn map(self, i: usize, n: usize) -> f64 {
        match self {
            CoordNorm::UnitCentered if n > 1 => 2.0 * i as f64 / (n - 1) as f64 - 1.0,
            CoordNorm::UnitCentered => 0.0,
            CoordNorm::PixelRaw => i as f64,
        }
    }

    pub fn axis(self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.map(i, n)).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoordNorm::UnitCentered => "unit-centered",
            CoordNorm::PixelRaw => "pixel-raw",
        }
    }
}

impl std::str::FromStr for CoordNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-centered" => Ok(CoordNorm::UnitCentered),
            "pixel-raw" => Ok(CoordNorm::PixelRaw),
            other => Err(Error::param(format!("unknown coordinate mode {other:?}"))),
        }
    }
}

/// Polynomial coefficients with their degree.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffVector {
    degree: usize,
    coeffs: Vec<f64>,
}

impl CoeffVector {
    pub fn new(degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        let n = coeff_count(degree)?;
        if coeffs.len() != n {
            return Err(Error::param(format!(
                "degree {degree} needs {n} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("coefficients must be finite"));
        }
        Ok(Self { degree, coeffs })
    }

    pub fn zeros(degree: usize) -> Result<Self> {
        Ok(Self {
            degree,
            coeffs: vec![0.0; coeff_count(degree)?],
        })
    }

    /// Builds a vector from `(t, s, value)` triples; other terms are zero.
    pub fn from_terms(degree: usize, terms: &[(usize, usize, f64)]) -> Result<Self> {
        let mut v = Self::zeros(degree)?;
        for &(t, s, a) in terms {
            if t + s > degree {
                return Err(Error::param(format!(
                    "term x^{t} y^{s} exceeds degree {degree}"
                )));
            }
            v.coeffs[monomial_index(degree, t, s)] = a;
        }
        Ok(v)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.coeffs[monomial_index(self.degree, t, s)]
    }

    pub fn set(&mut self, t: usize, s: usize, value: f64) {
        let i = monomial_index(self.degree, t, s);
        self.coeffs[i] = value;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            degree: self.degree,
            coeffs: self.coeffs.iter().map(|c| c * k).collect(),
        }
    }

    /// Evaluates the polynomial at one model-space point.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        monomial_basis(x, y, self.degree)
            .iter()
            .zip(&self.coeffs)
            .map(|(m, a)| m * a)
            .sum()
    }
}

/// Monomials `x^t y^s` in canonical order.
pub fn monomial_basis(x: f64, y: f64, degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((degree + 1) * (degree + 2) / 2);
    let mut xt = 1.0;
    for t in 0..=degree {
        let mut ys = 1.0;
        for _ in 0..=degree - t {
            out.push(xt * ys);
            ys *= y;
        }
        xt *= x;
    }
    out
}

/// Renders the field on a `width x height` pixel grid.
pub fn eval_bias_field(coeffs: &CoeffVector, width: usize, height: usize, coord: CoordNorm) -> GrayImage {
    let mut data = Vec::with_capacity(width * height);
    for_each_field_row(coeffs, width, height, coord, |_, row| data.extend_from_slice(row));
    GrayImage::from_parts(width, height, data)
}

/// Calls `f(y, row)` with the field values of every row, top to bottom.
pub(crate) fn for_each_field_row(
    coeffs: &CoeffVector,
    width: usize,
    height: usize,
    coord: CoordNorm,
    mut f: impl FnMut(usize, &[f64]),
) {
    let d = coeffs.degree;
    let xs = coord.axis(width);
    // powers[t][i] = x_i^t
    let mut powers = vec![vec![1.0; width]; d + 1];
    for t in 1..=d {
        let (done, rest) = powers.split_at_mut(t);
        for ((p, q), x) in rest[0].iter_mut().zip(&done[t - 1]).zip(&xs) {
            *p = q * x;
        }
    }
    let mut col_poly = vec![0.0; d + 1];
    let mut row = vec![0.0; width];
    for j in 0..height {
        let y = coord.map(j, height);
        // Collapse the y dependence: c_t(y) = sum_s a[t,s] y^s.
        for (t, c) in col_poly.iter_mut().enumerate() {
            let base = monomial_index(d, t, 0);
            *c = coeffs.coeffs[base..base + d - t + 1]
                .iter()
                .rev()
                .fold(0.0, |acc, a| acc * y + a);
        }
        row.fill(col_poly[0]);
        for (c, p) in col_poly.iter().zip(&powers).skip(1) {
            for (r, x) in row.iter_mut().zip(p) {
                *r += c * x;
            }
        }
        f(j, &row);
    }
}

/// One image per monomial, in canonical order.
pub fn basis_images(width: usize, height: usize, degree: usize, coord: CoordNorm) -> Vec<GrayImage> {
    exponents(degree)
        .map(|(t, s)| {
            let xs: Vec<f64> = coord.axis(width).iter().map(|x| x.powi(t as i32)).collect();
            GrayImage::from_fn(width, height, |i, j| {
                xs[i] * coord.map(j, height).powi(s as i32)
            })
        })
        .collect()
}

/// Per-total-order magnitude bounds for random coefficients:
/// `bound(0) = constant`, `bound(n) = higher / n` for `n >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSpec {
    pub constant: f64,
    pub higher: f64,
}

impl Default for AmplitudeSpec {
    fn default() -> Self {
        Self {
            constant: 0.08,
            higher: 0.04,
        }
    }
}

impl AmplitudeSpec {
    pub fn bound(&self, order: usize) -> f64 {
        if order == 0 {
            self.constant
        } else {
            self.higher / order as f64
        }
    }

    fn validate(&self) -> Result<()> {
        for b in [self.constant, self.higher] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::param(format!(
                    "amplitude bounds must be finite and non-negative, got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws coefficients uniformly in `[-bound(t+s), bound(t+s)]` from a seeded stream.
pub fn sample_coeffs(seed: u64, degree: usize, spec: &AmplitudeSpec) -> Result<CoeffVector> {
    sample_coeffs_with(&mut ChaCha8Rng::seed_from_u64(seed), degree, spec)
}

pub fn sample_coeffs_with<R: Rng + ?Sized>(
    rng: &mut R,
    degree: usize,
    spec: &AmplitudeSpec,
) -> Result<CoeffVector> {
    spec.validate()?;
    let n = coeff_count(degree)?;
    let mut coeffs = Vec::with_capacity(n);
    for (t, s) in exponents(degree) {
        let u: f64 = rng.random();
        coeffs.push((2.0 * u - 1.0) * spec.bound(t + s));
    }
    CoeffVector::new(degree, coeffs)
}
