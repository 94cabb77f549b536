//! Bias-field estimation and correction.
//!
//! Two estimators share the same output type:
//!
//! - [`fit_paired`] regresses `Y - C` onto the monomial basis. With noiseless
//!   synthetic data it recovers the coefficients to machine precision and is
//!   the reference every other path is checked against.
//! - [`fit_blind`] sees only `Y`. It optionally halves the resolution, blurs
//!   away small structures and fits the blurred image with Tukey-reweighted
//!   least squares. The regressors are the monomials passed through the *same*
//!   downsample/blur chain, so a pure polynomial field is recovered exactly,
//!   borders included.
//!
//! A blind fit cannot separate a constant bias from scene brightness. Its
//! constant term is therefore rewritten so the correction either preserves the
//! image mean or lands on a calibrated reference brightness.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::biasfield::{basis_images, coeff_count, eval_bias_field, exponents, for_each_field_row, CoeffVector, CoordNorm};
use crate::corpus::Sidecar;
use crate::error::{Error, Result};
use crate::image::{convolve_separable, downsample2, gaussian_kernel, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Paired,
    Blind,
}

impl FitMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FitMethod::Paired => "paired",
            FitMethod::Blind => "blind",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub coeffs: CoeffVector,
    pub coord: CoordNorm,
    pub residual_rms: f64,
    /// Ratio of extreme eigenvalues of the (weighted) normal matrix.
    pub condition_estimate: f64,
    pub method: FitMethod,
    /// Blind fits: mean of the fitted field that was taken out of the constant
    /// term. Zero for paired fits.
    pub removed_constant: f64,
}

impl FitResult {
    pub fn to_sidecar(&self, k: f64) -> Sidecar {
        Sidecar {
            degree: self.coeffs.degree(),
            coord: self.coord,
            coeffs: self.coeffs.as_slice().to_vec(),
            k,
            scale: None,
            offset: None,
            amplitude: None,
            background: None,
            seed: None,
            residual_rms: Some(self.residual_rms),
            method: Some(self.method.as_str().to_string()),
            removed_constant: (self.method == FitMethod::Blind).then_some(self.removed_constant),
        }
    }
}

/// How a blind fit fixes the unidentifiable constant term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "level")]
pub enum Brightness {
    /// `mean(R) = mean(Y)`.
    #[default]
    PreserveMean,
    /// `mean(R)` equals the given level, e.g. the mean brightness of a set
    /// of clear training scenes.
    Reference(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BlindParams {
    /// Blur sigma in full-resolution pixels; halved when downsampling first.
    pub blur_sigma: f64,
    pub downsample_first: bool,
    pub robust_iters: usize,
    pub brightness: Brightness,
}

impl Default for BlindParams {
    fn default() -> Self {
        Self {
            blur_sigma: 25.0,
            downsample_first: true,
            robust_iters: 3,
            brightness: Brightness::PreserveMean,
        }
    }
}

/// Tukey biweight tuning constant, in units of the residual MAD.
pub const TUKEY_C: f64 = 4.685;

// ---------------------------------------------------------------------------
// Shared basis caches

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct GramKey {
    width: usize,
    height: usize,
    degree: usize,
    coord: CoordNorm,
}

struct PairedBasis {
    gram: DMatrix<f64>,
    condition: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct BlurKey {
    width: usize,
    height: usize,
    degree: usize,
    coord: CoordNorm,
    sigma_bits: u64,
    downsample: bool,
}

/// Preprocessed regressors, one contiguous pixel vector per basis function.
struct BlurredBasis {
    width: usize,
    height: usize,
    cols: Vec<Vec<f64>>,
}

fn paired_cache() -> &'static RwLock<HashMap<GramKey, Arc<PairedBasis>>> {
    static CACHE: OnceLock<RwLock<HashMap<GramKey, Arc<PairedBasis>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn blur_cache() -> &'static RwLock<HashMap<BlurKey, Arc<BlurredBasis>>> {
    static CACHE: OnceLock<RwLock<HashMap<BlurKey, Arc<BlurredBasis>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn cached<K, V>(cache: &RwLock<HashMap<K, Arc<V>>>, key: K, build: impl FnOnce() -> V) -> Arc<V>
where
    K: Eq + std::hash::Hash,
{
    if let Some(v) = cache.read().expect("cache lock").get(&key) {
        return v.clone();
    }
    let value = Arc::new(build());
    cache
        .write()
        .expect("cache lock")
        .entry(key)
        .or_insert(value)
        .clone()
}

/// `sum_i x_i^p` for `p = 0..=max_power`.
fn power_sums(axis: &[f64], max_power: usize) -> Vec<f64> {
    let mut sums = vec![0.0; max_power + 1];
    for &x in axis {
        let mut xp = 1.0;
        for s in sums.iter_mut() {
            *s += xp;
            xp *= x;
        }
    }
    sums
}

fn paired_basis(key: GramKey) -> Arc<PairedBasis> {
    cached(paired_cache(), key, || {
        let d = key.degree;
        let sx = power_sums(&key.coord.axis(key.width), 2 * d);
        let sy = power_sums(&key.coord.axis(key.height), 2 * d);
        let exps: Vec<(usize, usize)> = exponents(d).collect();
        let n = exps.len();
        // The grid is a tensor product, so each Gram entry factors.
        let gram = DMatrix::from_fn(n, n, |a, b| {
            let (ta, sa) = exps[a];
            let (tb, sb) = exps[b];
            sx[ta + tb] * sy[sa + sb]
        });
        let condition = condition_number(&gram);
        PairedBasis { gram, condition }
    })
}

fn blurred_basis(key: BlurKey) -> Arc<BlurredBasis> {
    cached(blur_cache(), key, || {
        let sigma = f64::from_bits(key.sigma_bits);
        let kernel = gaussian_kernel(sigma).expect("validated sigma");
        let images: Vec<GrayImage> = basis_images(key.width, key.height, key.degree, key.coord)
            .into_iter()
            .map(|b| {
                let b = if key.downsample { downsample2(&b).image } else { b };
                convolve_separable(&b, &kernel)
            })
            .collect();
        let (width, height) = images[0].dims();
        BlurredBasis {
            width,
            height,
            cols: images.into_iter().map(GrayImage::into_data).collect(),
        }
    })
}

/// Ratio of the largest to the smallest eigenvalue of a symmetric matrix
/// (infinite when the smallest is not positive).
pub fn condition_number(sym: &DMatrix<f64>) -> f64 {
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Largest condition number accepted before the system is treated as rank-deficient.
const MAX_CONDITION: f64 = 1e14;

fn solve_spd(gram: &DMatrix<f64>, rhs: &DVector<f64>, condition: f64) -> Result<DVector<f64>> {
    if !(condition < MAX_CONDITION) {
        return Err(Error::Numerical {
            message: "normal equations are rank-deficient".into(),
            condition,
        });
    }
    let chol = gram.clone().cholesky().ok_or_else(|| Error::Numerical {
        message: "normal matrix is not positive definite".into(),
        condition,
    })?;
    Ok(chol.solve(rhs))
}

/// Condition number of the unweighted normal matrix for a grid.
pub fn grid_condition(width: usize, height: usize, degree: usize, coord: CoordNorm) -> Result<f64> {
    coeff_count(degree)?;
    Ok(paired_basis(GramKey {
        width,
        height,
        degree,
        coord,
    })
    .condition)
}

// ---------------------------------------------------------------------------
// Paired oracle

/// Least-squares fit of `degraded - clear` onto the monomial basis.
pub fn fit_paired(degraded: &GrayImage, clear: &GrayImage, degree: usize, coord: CoordNorm) -> Result<FitResult> {
    degraded.ensure_same_dims(clear)?;
    let n = coeff_count(degree)?;
    let (w, h) = degraded.dims();
    if w * h < n {
        return Err(Error::param(format!(
            "{w}x{h} image has fewer pixels than the {n} unknowns"
        )));
    }
    let basis = paired_basis(GramKey {
        width: w,
        height: h,
        degree,
        coord,
    });

    let diff: Vec<f64> = degraded
        .data()
        .iter()
        .zip(clear.data())
        .map(|(y, c)| y - c)
        .collect();

    // Right-hand side, separably: b[t,s] = sum_j y_j^s sum_i x_i^t r_ij.
    let xs = coord.axis(w);
    let mut rhs = DVector::zeros(n);
    let mut row_moments = vec![0.0; degree + 1];
    for (j, row) in diff.chunks_exact(w).enumerate() {
        row_moments.fill(0.0);
        for (&x, &r) in xs.iter().zip(row) {
            let mut term = r;
            for m in row_moments.iter_mut() {
                *m += term;
                term *= x;
            }
        }
        let y = coord.map(j, h);
        for (idx, (t, s)) in exponents(degree).enumerate() {
            rhs[idx] += row_moments[t] * y.powi(s as i32);
        }
    }

    let solution = solve_spd(&basis.gram, &rhs, basis.condition)?;
    let coeffs = CoeffVector::new(degree, solution.iter().copied().collect())
        .map_err(|_| Error::Numerical {
            message: "solution is not finite".into(),
            condition: basis.condition,
        })?;
    let field = eval_bias_field(&coeffs, w, h, coord);
    let sq: f64 = diff
        .iter()
        .zip(field.data())
        .map(|(r, f)| (r - f) * (r - f))
        .sum();
    Ok(FitResult {
        coeffs,
        coord,
        residual_rms: (sq / (w * h) as f64).sqrt(),
        condition_estimate: basis.condition,
        method: FitMethod::Paired,
        removed_constant: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Blind estimator

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Median absolute deviation about the median.
pub fn mad(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let med = median(&mut buf);
    buf.iter_mut().for_each(|v| *v = (*v - med).abs());
    median(&mut buf)
}

/// Tukey biweight `(1 - (r/c)^2)^2` inside `|r| < c`, zero outside.
pub fn tukey_weight(r: f64, c: f64) -> f64 {
    if r.abs() < c {
        let u = r / c;
        (1.0 - u * u).powi(2)
    } else {
        0.0
    }
}

/// Dot product with split accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn weighted_solve(basis: &BlurredBasis, target: &[f64], weights: Option<&[f64]>) -> Result<(DVector<f64>, f64)> {
    const BLOCK: usize = 512;
    let n = basis.cols.len();
    let len = target.len();
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    // Pixel blocks keep the weighted regressors cache-resident.
    let mut scratch = vec![vec![0.0; BLOCK]; n];
    for start in (0..len).step_by(BLOCK) {
        let end = (start + BLOCK).min(len);
        for (buf, col) in scratch.iter_mut().zip(&basis.cols) {
            let buf = &mut buf[..end - start];
            match weights {
                Some(w) => {
                    for ((o, v), wp) in buf.iter_mut().zip(&col[start..end]).zip(&w[start..end]) {
                        *o = v * wp;
                    }
                }
                None => buf.copy_from_slice(&col[start..end]),
            }
        }
        for a in 0..n {
            let wa = &scratch[a][..end - start];
            rhs[a] += dot(wa, &target[start..end]);
            for b in a..n {
                gram[(a, b)] += dot(wa, &basis.cols[b][start..end]);
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let condition = condition_number(&gram);
    let sol = solve_spd(&gram, &rhs, condition)?;
    Ok((sol, condition))
}

fn residuals(basis: &BlurredBasis, target: &[f64], coeffs: &DVector<f64>) -> Vec<f64> {
    let mut out = target.to_vec();
    for (col, &a) in basis.cols.iter().zip(coeffs.iter()) {
        for (o, v) in out.iter_mut().zip(col) {
            *o -= a * v;
        }
    }
    out
}

/// Mean of `x^t y^s` over the grid, separably.
fn grid_monomial_means(width: usize, height: usize, degree: usize, coord: CoordNorm) -> Vec<f64> {
    let sx = power_sums(&coord.axis(width), degree);
    let sy = power_sums(&coord.axis(height), degree);
    let norm = (width * height) as f64;
    exponents(degree).map(|(t, s)| sx[t] * sy[s] / norm).collect()
}

/// Estimates the bias field from the degraded image alone.
pub fn fit_blind(degraded: &GrayImage, degree: usize, coord: CoordNorm, params: &BlindParams) -> Result<FitResult> {
    let n = coeff_count(degree)?;
    if !(params.blur_sigma > 0.0) || !params.blur_sigma.is_finite() {
        return Err(Error::param(format!(
            "blur sigma must be positive, got {}",
            params.blur_sigma
        )));
    }
    let (w, h) = degraded.dims();
    let (work, sigma) = if params.downsample_first {
        (downsample2(degraded).image, params.blur_sigma / 2.0)
    } else {
        (degraded.clone(), params.blur_sigma)
    };
    if work.len() < n {
        return Err(Error::param(format!(
            "{}x{} working image has fewer pixels than the {n} unknowns",
            work.width(),
            work.height()
        )));
    }
    let basis = blurred_basis(BlurKey {
        width: w,
        height: h,
        degree,
        coord,
        sigma_bits: sigma.to_bits(),
        downsample: params.downsample_first,
    });
    debug_assert_eq!((basis.width, basis.height), work.dims());

    let blurred = convolve_separable(&work, &gaussian_kernel(sigma)?);
    // Fit around the mean: the blurred constant regressor is 1, so the offset
    // goes straight back into the constant term and a flat image fits exactly.
    let level = blurred.mean();
    let centred: Vec<f64> = blurred.data().iter().map(|v| v - level).collect();
    let target = &centred[..];
    let scale = target.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);

    let (mut solution, mut condition) = weighted_solve(&basis, target, None)?;
    let mut resid = residuals(&basis, target, &solution);
    let mut weights = vec![1.0; target.len()];
    for _ in 0..params.robust_iters {
        let spread = mad(&resid);
        if spread <= 1e-13 * scale {
            // Already an exact fit; reweighting would divide by zero.
            break;
        }
        let c = TUKEY_C * spread;
        for (wt, r) in weights.iter_mut().zip(&resid) {
            *wt = tukey_weight(*r, c);
        }
        if weights.iter().all(|&v| v == 0.0) {
            return Err(Error::Numerical {
                message: "all robust weights vanished".into(),
                condition,
            });
        }
        (solution, condition) = weighted_solve(&basis, target, Some(&weights))?;
        resid = residuals(&basis, target, &solution);
    }

    let mut coeffs: Vec<f64> = solution.iter().copied().collect();
    coeffs[0] += level;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical {
            message: "solution is not finite".into(),
            condition,
        });
    }
    let means = grid_monomial_means(w, h, degree, coord);
    let field_mean: f64 = coeffs.iter().zip(&means).map(|(a, m)| a * m).sum();
    // Re-centre the constant so the full-resolution field has zero mean ...
    coeffs[0] -= field_mean;
    // ... then shift it to hit the requested output brightness.
    if let Brightness::Reference(level) = params.brightness {
        coeffs[0] += degraded.mean() - level;
    }
    let rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    Ok(FitResult {
        coeffs: CoeffVector::new(degree, coeffs)?,
        coord,
        residual_rms: rms,
        condition_estimate: condition,
        method: FitMethod::Blind,
        removed_constant: field_mean,
    })
}

/// `R = Y - B(fit)`, unclamped.
pub fn correct(degraded: &GrayImage, fit: &FitResult) -> GrayImage {
    let (w, h) = degraded.dims();
    let mut data = Vec::with_capacity(w * h);
    for_each_field_row(&fit.coeffs, w, h, fit.coord, |j, field| {
        data.extend(degraded.row(j).iter().zip(field).map(|(y, b)| y - b));
    });
    GrayImage::from_parts(w, h, data)
}
