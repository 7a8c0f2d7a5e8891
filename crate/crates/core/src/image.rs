//! Raster types and pixel-level color operations.
//!
//! Images are stored channel-interleaved `H x W x C`, RGB order, linear
//! light. Illuminant maps carry only the red and blue chromaticity
//! channels; green is implicitly 1.

use ndarray::{Array2, Array3, ArrayView3, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// H x W x 3 linear RGB raster, values finite and >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Scalar> {
    data: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("image must be at least 1x1".into()));
        }
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::ShapeMismatch(
                "image values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }
}

/// H x W x 2 per-pixel (r, b) chromaticity; green channel implicitly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantMap<T: Scalar> {
    data: Array3<T>,
}

impl<T: Scalar> IlluminantMap<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("map must be at least 1x1".into()));
        }
        if c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "illuminant map must have 2 channels, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("map values must be finite".into()));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    /// Copy with every channel clamped to at least `epsilon_chroma`.
    pub fn clamped(&self) -> Self {
        let eps = T::epsilon_chroma();
        Self {
            data: self.data.mapv(|v| v.max(eps)),
        }
    }
}

/// H x W binary mask; 1 marks a pixel that participates in losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    data: Array2<u8>,
}

impl ValidityMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::ShapeMismatch("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn all_valid(h: usize, w: usize) -> Self {
        Self {
            data: Array2::ones((h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] != 0
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Divide an RGB vector by its green component so that G = 1.
pub fn g_normalize<T: Scalar>(rgb: [T; 3]) -> Result<[T; 3]> {
    let g = rgb[1];
    if !(g > T::epsilon_chroma()) {
        return Err(Error::DegenerateChromaticity(format!(
            "green component {g} <= epsilon"
        )));
    }
    Ok([rgb[0] / g, T::one(), rgb[2] / g])
}

/// Expand an (r, b) map to full H x W x 3 RGB with green = 1.
pub fn to_full_rgb<T: Scalar>(map: &IlluminantMap<T>) -> Array3<T> {
    let (h, w, _) = map.data().dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            out[[y, x, 0]] = map.data()[[y, x, 0]];
            out[[y, x, 1]] = T::one();
            out[[y, x, 2]] = map.data()[[y, x, 1]];
        }
    }
    out
}

/// Collapse a full-RGB array with G = 1 back into an (r, b) map.
pub fn from_full_rgb<T: Scalar>(rgb: &Array3<T>) -> Result<IlluminantMap<T>> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let n = g_normalize([rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]])?;
            out[[y, x, 0]] = n[0];
            out[[y, x, 1]] = n[2];
        }
    }
    IlluminantMap::new(out)
}

/// Von Kries diagonal correction: divide each pixel channel-wise by the
/// illuminant color. Green is divided by 1; the output is not clipped.
pub fn apply_correction<T: Scalar>(
    img: &ImageTensor<T>,
    map: &IlluminantMap<T>,
) -> Result<ImageTensor<T>> {
    if img.height() != map.height() || img.width() != map.width() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs map {}x{}",
            img.height(),
            img.width(),
            map.height(),
            map.width()
        )));
    }
    let map = map.clamped();
    let (h, w, _) = img.data().dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            out[[y, x, 0]] = img.data()[[y, x, 0]] / map.data()[[y, x, 0]];
            out[[y, x, 1]] = img.data()[[y, x, 1]];
            out[[y, x, 2]] = img.data()[[y, x, 2]] / map.data()[[y, x, 1]];
        }
    }
    ImageTensor::new(out)
}

/// Bilinear resize with half-pixel sample centers, any channel count.
/// A same-size call reproduces the input exactly.
pub fn resize_bilinear<T: Scalar>(src: ArrayView3<'_, T>, new_h: usize, new_w: usize) -> Array3<T> {
    let (h, w, c) = src.dim();
    assert!(new_h >= 1 && new_w >= 1, "target dims must be >= 1");
    let mut out = Array3::zeros((new_h, new_w, c));
    let sy_scale = h as f64 / new_h as f64;
    let sx_scale = w as f64 / new_w as f64;
    for dy in 0..new_h {
        let sy = ((dy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = T::from_f64_c(sy - y0 as f64);
        for dx in 0..new_w {
            let sx = ((dx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = T::from_f64_c(sx - x0 as f64);
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (T::one() - fx) + src[[y0, x1, ch]] * fx;
                let bot = src[[y1, x0, ch]] * (T::one() - fx) + src[[y1, x1, ch]] * fx;
                out[[dy, dx, ch]] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Elementwise check that two rasters agree within `tol`.
pub fn max_abs_diff<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> T {
    let mut m = T::zero();
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = (x - y).abs();
        if d > m {
            m = d;
        }
    });
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map_from(pixels: Vec<(f64, f64)>, h: usize, w: usize) -> IlluminantMap<f64> {
        let mut d = Array3::zeros((h, w, 2));
        for (i, (r, b)) in pixels.into_iter().enumerate() {
            d[[i / w, i % w, 0]] = r;
            d[[i / w, i % w, 1]] = b;
        }
        IlluminantMap::new(d).unwrap()
    }

    #[test]
    fn full_rgb_inserts_unit_green() {
        let m = map_from(vec![(0.5, 2.0)], 1, 1);
        let rgb = to_full_rgb(&m);
        assert_eq!(rgb[[0, 0, 0]], 0.5);
        assert_eq!(rgb[[0, 0, 1]], 1.0);
        assert_eq!(rgb[[0, 0, 2]], 2.0);
    }

    #[test]
    fn full_rgb_roundtrip_is_identity() {
        let m = map_from(vec![(0.5, 2.0), (1.0, 1.0), (0.3, 0.9), (1.4, 0.2)], 2, 2);
        let back = from_full_rgb(&to_full_rgb(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn g_normalize_divides_by_green() {
        assert_eq!(g_normalize([2.0, 4.0, 8.0]).unwrap(), [0.5, 1.0, 2.0]);
        assert_eq!(g_normalize([1.0, 1.0, 1.0]).unwrap(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn g_normalize_rejects_zero_green() {
        assert!(matches!(
            g_normalize([0.2, 0.0, 0.3]),
            Err(Error::DegenerateChromaticity(_))
        ));
    }

    #[test]
    fn correction_divides_channelwise() {
        let img = ImageTensor::new(array![[[0.2, 0.4, 0.8]]]).unwrap();
        let m = map_from(vec![(0.5, 2.0)], 1, 1);
        let out = apply_correction(&img, &m).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 0.4);
        assert_eq!(out.data()[[0, 0, 1]], 0.4);
        assert_eq!(out.data()[[0, 0, 2]], 0.4);
    }

    #[test]
    fn identity_illuminant_is_noop() {
        let img = ImageTensor::new(array![[[0.2, 0.4, 0.8], [0.1, 0.9, 0.5]]]).unwrap();
        let m = map_from(vec![(1.0, 1.0), (1.0, 1.0)], 1, 2);
        let out = apply_correction(&img, &m).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn correction_rejects_shape_mismatch() {
        let img = ImageTensor::new(Array3::from_elem((2, 2, 3), 0.5)).unwrap();
        let m = map_from(vec![(1.0, 1.0)], 1, 1);
        assert!(apply_correction(&img, &m).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let src = Array3::from_elem((4, 4, 3), 0.37f64);
        for &(h, w) in &[(1, 1), (2, 7), (8, 8), (3, 5)] {
            let out = resize_bilinear(src.view(), h, w);
            assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let src = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let out = resize_bilinear(src.view(), 5, 7);
        for (a, b) in src.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_2x2_to_1x1_averages_half_pixel_samples() {
        let src = array![[[0.0], [1.0]], [[2.0], [3.0]]];
        let out = resize_bilinear(src.view(), 1, 1);
        assert!((out[[0, 0, 0]] - 1.5f64).abs() < 1e-12);
    }

    #[test]
    fn image_rejects_negative_and_nonfinite() {
        assert!(ImageTensor::new(array![[[0.1, -0.2, 0.3]]]).is_err());
        assert!(ImageTensor::new(array![[[0.1, f64::NAN, 0.3]]]).is_err());
    }

    #[test]
    fn clamped_map_respects_epsilon() {
        let m = IlluminantMap::new(array![[[-0.5, 0.0]]]).unwrap().clamped();
        assert_eq!(m.data()[[0, 0, 0]], 1e-4);
        assert_eq!(m.data()[[0, 0, 1]], 1e-4);
    }
}
