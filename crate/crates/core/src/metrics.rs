//! Angular-error metrics and their summary statistics.

use crate::error::{Error, Result};
use crate::image::{to_full_rgb, IlluminantMap, ValidityMask};
use crate::scalar::Scalar;

/// Mean / SD / median / trimean of per-image angular errors, in degrees.
/// SD is the population standard deviation; quantiles use linear
/// interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats<T: Scalar> {
    pub mean: T,
    pub sd: T,
    pub median: T,
    pub trimean: T,
    pub count: usize,
}

/// Angle in degrees between two RGB vectors, cosine clamped to [-1, 1].
pub fn angular_error<T: Scalar>(u: [T; 3], v: [T; 3]) -> Result<T> {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::DegenerateChromaticity(
            "zero-norm vector in angular_error".into(),
        ));
    }
    let cos = (dot(u, v) / (nu * nv)).min(T::one()).max(-T::one());
    Ok(cos.acos() * T::rad_to_deg())
}

fn dot<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Mean per-pixel angular error between two (r, b) maps over valid pixels.
/// Both maps are clamped to the chromaticity floor first.
pub fn mean_angular_error<T: Scalar>(
    pred: &IlluminantMap<T>,
    gt: &IlluminantMap<T>,
    mask: Option<&ValidityMask>,
) -> Result<T> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if m.height() != pred.height() || m.width() != pred.width() {
            return Err(Error::ShapeMismatch("mask dims differ from maps".into()));
        }
        if m.count_valid() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    let p = to_full_rgb(&pred.clamped());
    let g = to_full_rgb(&gt.clamped());
    let (h, w, _) = p.dim();
    let mut sum = T::zero();
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m.is_valid(y, x) {
                    continue;
                }
            }
            let u = [p[[y, x, 0]], p[[y, x, 1]], p[[y, x, 2]]];
            let v = [g[[y, x, 0]], g[[y, x, 1]], g[[y, x, 2]]];
            sum = sum + angular_error(u, v)?;
            n += 1;
        }
    }
    Ok(sum / T::from_usize(n).unwrap())
}

/// Linear-interpolation quantile over a sorted slice, q in [0, 1].
fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::from_f64_c(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarize per-image angular errors into mean / SD / median / trimean.
pub fn summarize_errors<T: Scalar>(per_image_errors: &[T]) -> Result<ErrorStats<T>> {
    if per_image_errors.is_empty() {
        return Err(Error::EmptyInput("summarize_errors on empty list".into()));
    }
    let n = T::from_usize(per_image_errors.len()).unwrap();
    let mean = per_image_errors.iter().copied().sum::<T>() / n;
    let var = per_image_errors
        .iter()
        .map(|&e| (e - mean) * (e - mean))
        .sum::<T>()
        / n;
    let mut sorted = per_image_errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let four = T::from_f64_c(4.0);
    let two = T::from_f64_c(2.0);
    Ok(ErrorStats {
        mean,
        sd: var.sqrt(),
        median,
        trimean: (q1 + two * median + q3) / four,
        count: per_image_errors.len(),
    })
}
