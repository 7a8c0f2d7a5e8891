//! Statistics-based single-illuminant estimators under the Minkowski-norm
//! framework: Gray World, White Patch, Shades of Gray, Gray Edge, and the
//! bright-and-dark-pixel PCA estimator, plus tiling of a global estimate
//! into a pixel-wise map for evaluation.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::{g_normalize, ImageTensor, IlluminantMap, ValidityMask};
use crate::scalar::Scalar;

/// (n, p, sigma): derivative order, Minkowski norm power (infinity = max),
/// and Gaussian pre-smoothing in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinkowskiParams<T: Scalar> {
    pub derivative_order: u8,
    pub norm_power: T,
    pub smoothing_sigma: T,
}

impl<T: Scalar> MinkowskiParams<T> {
    pub fn new(derivative_order: u8, norm_power: T, smoothing_sigma: T) -> Result<Self> {
        if derivative_order > 2 {
            return Err(Error::ConfigError(format!(
                "derivative order must be 0, 1 or 2, got {derivative_order}"
            )));
        }
        if !(norm_power >= T::one()) {
            return Err(Error::ConfigError(format!(
                "norm power must be >= 1, got {norm_power}"
            )));
        }
        if !(smoothing_sigma >= T::zero()) {
            return Err(Error::ConfigError(format!(
                "smoothing sigma must be >= 0, got {smoothing_sigma}"
            )));
        }
        Ok(Self {
            derivative_order,
            norm_power,
            smoothing_sigma,
        })
    }
}

/// Separable Gaussian blur, kernel truncated at 3 sigma, replicate border.
fn gaussian_blur<T: Scalar>(channel: &Array2<T>, sigma: T) -> Array2<T> {
    if sigma == T::zero() {
        return channel.clone();
    }
    let s = sigma.to_f64().unwrap();
    let radius = (3.0 * s).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut norm = 0.0f64;
    for i in -radius..=radius {
        let wgt = (-((i * i) as f64) / (2.0 * s * s)).exp();
        kernel.push(wgt);
        norm += wgt;
    }
    let kernel: Vec<T> = kernel.into_iter().map(|k| T::from_f64_c(k / norm)).collect();

    let (h, w) = channel.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc = acc + kv * channel[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc = acc + kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Per-pixel derivative magnitude of the given order; central differences
/// with replicate borders. Order 0 is the absolute value.
fn derivative_magnitude<T: Scalar>(channel: &Array2<T>, order: u8) -> Array2<T> {
    let (h, w) = channel.dim();
    let at = |y: isize, x: isize| {
        channel[[
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        ]]
    };
    let half = T::from_f64_c(0.5);
    let two = T::from_f64_c(2.0);
    Array2::from_shape_fn((h, w), |(yu, xu)| {
        let (y, x) = (yu as isize, xu as isize);
        match order {
            0 => channel[[yu, xu]].abs(),
            1 => {
                let dx = (at(y, x + 1) - at(y, x - 1)) * half;
                let dy = (at(y + 1, x) - at(y - 1, x)) * half;
                (dx * dx + dy * dy).sqrt()
            }
            _ => {
                let dxx = at(y, x + 1) - two * at(y, x) + at(y, x - 1);
                let dyy = at(y + 1, x) - two * at(y, x) + at(y - 1, x);
                (dxx * dxx + dyy * dyy).sqrt()
            }
        }
    })
}

/// Stable p-norm over valid pixels: factors out the channel maximum so
/// large powers neither overflow nor underflow. Infinite p is the max.
fn masked_pnorm<T: Scalar>(mag: &Array2<T>, p: T, mask: Option<&ValidityMask>) -> T {
    let valid = |y: usize, x: usize| mask.map_or(true, |m| m.is_valid(y, x));
    let (h, w) = mag.dim();
    let mut mx = T::zero();
    for y in 0..h {
        for x in 0..w {
            if valid(y, x) && mag[[y, x]] > mx {
                mx = mag[[y, x]];
            }
        }
    }
    if mx == T::zero() || p.is_infinite() {
        return mx;
    }
    let mut acc = T::zero();
    for y in 0..h {
        for x in 0..w {
            if valid(y, x) {
                acc = acc + (mag[[y, x]] / mx).powf(p);
            }
        }
    }
    mx * acc.powf(T::one() / p)
}

/// Minkowski-framework estimate: per channel, the p-norm of the order-n
/// derivative magnitude of the Gaussian-smoothed image, g-normalized.
///
/// Masked pixels are zeroed before filtering so they can never influence
/// the estimate, and excluded from the norm.
pub fn minkowski_estimate<T: Scalar>(
    img: &ImageTensor<T>,
    params: &MinkowskiParams<T>,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    if let Some(m) = mask {
        if m.height() != img.height() || m.width() != img.width() {
            return Err(Error::ShapeMismatch("mask dims differ from image".into()));
        }
        if m.count_valid() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    let (h, w, _) = img.data().dim();
    let mut estimate = [T::zero(); 3];
    for c in 0..3 {
        let mut channel = Array2::from_shape_fn((h, w), |(y, x)| img.data()[[y, x, c]]);
        if let Some(m) = mask {
            for y in 0..h {
                for x in 0..w {
                    if !m.is_valid(y, x) {
                        channel[[y, x]] = T::zero();
                    }
                }
            }
        }
        let smoothed = gaussian_blur(&channel, params.smoothing_sigma);
        let mag = derivative_magnitude(&smoothed, params.derivative_order);
        estimate[c] = masked_pnorm(&mag, params.norm_power, mask);
    }
    if estimate.iter().all(|&e| e == T::zero()) {
        return Err(Error::DegenerateChromaticity(
            "estimate is zero in every channel".into(),
        ));
    }
    let n = g_normalize(estimate)?;
    let eps = T::epsilon_chroma();
    Ok([n[0].max(eps), T::one(), n[2].max(eps)])
}

/// Gray World: mean of the image, i.e. (n=0, p=1, sigma=0).
pub fn gray_world<T: Scalar>(
    img: &ImageTensor<T>,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    minkowski_estimate(
        img,
        &MinkowskiParams::new(0, T::one(), T::zero())?,
        mask,
    )
}

/// White Patch: channel-wise maximum, i.e. (n=0, p=inf, sigma=0).
pub fn white_patch<T: Scalar>(
    img: &ImageTensor<T>,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    minkowski_estimate(
        img,
        &MinkowskiParams::new(0, T::infinity(), T::zero())?,
        mask,
    )
}

/// Shades of Gray: the image p-norm, (n=0, p, sigma=0). Canonical p = 4.
pub fn shades_of_gray<T: Scalar>(
    img: &ImageTensor<T>,
    p: T,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    minkowski_estimate(img, &MinkowskiParams::new(0, p, T::zero())?, mask)
}

pub const SHADES_OF_GRAY_DEFAULT_P: f64 = 4.0;

/// Gray Edge: the p-norm of order-n derivative magnitudes of the
/// sigma-smoothed image.
pub fn gray_edge<T: Scalar>(
    img: &ImageTensor<T>,
    n: u8,
    p: T,
    sigma: T,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    if n != 1 && n != 2 {
        return Err(Error::ConfigError(format!(
            "gray edge derivative order must be 1 or 2, got {n}"
        )));
    }
    minkowski_estimate(img, &MinkowskiParams::new(n, p, sigma)?, mask)
}

pub const CHENG_DEFAULT_PERCENTILE: f64 = 0.035;

/// Bright-and-dark-pixel PCA: project valid pixels onto the mean direction,
/// keep the top and bottom `percentile` fraction by projection, and return
/// the first principal component of the kept pixels, sign-fixed positive.
pub fn cheng_pca<T: Scalar>(
    img: &ImageTensor<T>,
    percentile: f64,
    mask: Option<&ValidityMask>,
) -> Result<[T; 3]> {
    if !(percentile > 0.0 && percentile <= 0.5) {
        return Err(Error::ConfigError(format!(
            "percentile must be in (0, 0.5], got {percentile}"
        )));
    }
    let (h, w, _) = img.data().dim();
    let mut pixels: Vec<[f64; 3]> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m.is_valid(y, x) {
                    continue;
                }
            }
            pixels.push([
                img.data()[[y, x, 0]].to_f64().unwrap(),
                img.data()[[y, x, 1]].to_f64().unwrap(),
                img.data()[[y, x, 2]].to_f64().unwrap(),
            ]);
        }
    }
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = pixels.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in &pixels {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mnorm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
    if mnorm == 0.0 {
        return Err(Error::DegenerateChromaticity("all-black image".into()));
    }
    let dir = [mean[0] / mnorm, mean[1] / mnorm, mean[2] / mnorm];
    let mut proj: Vec<(f64, usize)> = pixels
        .iter()
        .enumerate()
        .map(|(i, p)| (p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2], i))
        .collect();
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let take = ((percentile * pixels.len() as f64).ceil() as usize).max(1);
    let mut selected: Vec<usize> = proj[..take].iter().map(|&(_, i)| i).collect();
    selected.extend(proj[proj.len() - take..].iter().map(|&(_, i)| i));
    selected.sort_unstable();
    selected.dedup();
    if selected.len() < 3 {
        return Err(Error::EstimatorFailure(format!(
            "only {} pixels selected for PCA",
            selected.len()
        )));
    }
    // non-centered second-moment matrix of the selected pixels
    let mut m = [[0.0f64; 3]; 3];
    for &i in &selected {
        let p = pixels[i];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += p[a] * p[b];
            }
        }
    }
    // power iteration; the matrix is symmetric PSD so this converges to the
    // dominant eigenvector
    let mut v = dir;
    for _ in 0..200 {
        let mut nv = [0.0f64; 3];
        for a in 0..3 {
            for b in 0..3 {
                nv[a] += m[a][b] * v[b];
            }
        }
        let norm = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
        if norm == 0.0 {
            return Err(Error::EstimatorFailure("rank-deficient pixel set".into()));
        }
        v = [nv[0] / norm, nv[1] / norm, nv[2] / norm];
    }
    if v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2] < 0.0 {
        v = [-v[0], -v[1], -v[2]];
    }
    let est = [T::from_f64_c(v[0]), T::from_f64_c(v[1]), T::from_f64_c(v[2])];
    let nrm = g_normalize(est)?;
    let eps = T::epsilon_chroma();
    Ok([nrm[0].max(eps), T::one(), nrm[2].max(eps)])
}

/// Tile a global estimate into a constant (r, b) map for pixel-wise
/// evaluation against a ground-truth map.
pub fn tile_global_estimate<T: Scalar>(est: [T; 3], h: usize, w: usize) -> Result<IlluminantMap<T>> {
    let n = g_normalize(est)?;
    let mut data = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            data[[y, x, 0]] = n[0];
            data[[y, x, 1]] = n[2];
        }
    }
    IlluminantMap::new(data)
}
