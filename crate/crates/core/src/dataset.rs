//! Deterministic synthetic multi-illuminant scenes, on-disk sample
//! format, LSMI-shaped import, and 7:2:1 splitting.
//!
//! Every generator is a pure function of (dimensions, seed), so repeated
//! calls are bitwise identical. Sample directories hold `meta.json` plus
//! little-endian f32 payloads; see [`write_sample`] / [`read_sample`].

use std::fs;
use std::io::Read as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{g_normalize, ImageTensor, IlluminantMap, ValidityMask};
use crate::metrics::angular_error;
use crate::scalar::Scalar;

/// One scene illuminant as a linear RGB chromaticity, all components > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlluminantSpec<T: Scalar> {
    pub chromaticity: [T; 3],
}

impl<T: Scalar> IlluminantSpec<T> {
    pub fn new(chromaticity: [T; 3]) -> Result<Self> {
        if chromaticity.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::ConfigError(
                "illuminant components must be finite and > 0".into(),
            ));
        }
        Ok(Self { chromaticity })
    }
}

/// H x W x K per-pixel mixing coefficients; each pixel sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMap<T: Scalar> {
    data: Array3<T>,
}

impl<T: Scalar> MixMap<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let tol = T::from_f64_c(1e-6);
        for px in data.rows() {
            let mut sum = T::zero();
            for &a in px {
                if a < -tol || a > T::one() + tol {
                    return Err(Error::ConfigError(format!(
                        "mix coefficient {a} outside [0, 1]"
                    )));
                }
                sum = sum + a;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::ConfigError(format!(
                    "mix coefficients sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_illuminants(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }
}

/// A composed scene: image, ground-truth illuminant map, validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample<T: Scalar> {
    pub image: ImageTensor<T>,
    pub gt: IlluminantMap<T>,
    pub mask: ValidityMask,
    pub illuminants: Vec<IlluminantSpec<T>>,
    pub name: String,
    pub seed: u64,
}

/// Split assignment over sample names, 7:2:1 by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub splits: SplitNames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNames {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn names_for(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(Error::ConfigError(format!("unknown split '{other}'"))),
        }
    }
}

/// Paint `n_patches` random axis-aligned rectangles over a random base
/// color; all colors uniform in [0.1, 0.9] per channel.
pub fn generate_mondrian_reflectance<T: Scalar>(
    h: usize,
    w: usize,
    n_patches: usize,
    rng_seed: u64,
) -> ImageTensor<T> {
    assert!(n_patches >= 1, "need at least one patch");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let lo = T::from_f64_c(0.1);
    let hi = T::from_f64_c(0.9);
    let color = |rng: &mut ChaCha8Rng| -> [T; 3] {
        [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ]
    };
    let base = color(&mut rng);
    let mut data = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[[y, x, c]] = base[c];
            }
        }
    }
    for _ in 0..n_patches {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let ph = rng.random_range(1..=h - y0);
        let pw = rng.random_range(1..=w - x0);
        let col = color(&mut rng);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                for c in 0..3 {
                    data[[y, x, c]] = col[c];
                }
            }
        }
    }
    ImageTensor::new(data).expect("mondrian values are in range by construction")
}

/// Draw `k` illuminants with g = 1 and (r, b) uniform in [0.6, 1.6]^2,
/// rejection-sampled so every pair is at least `min_separation_deg` apart.
pub fn sample_illuminants<T: Scalar>(
    k: usize,
    min_separation_deg: f64,
    rng_seed: u64,
) -> Result<Vec<IlluminantSpec<T>>> {
    assert!((1..=3).contains(&k), "k must be in 1..=3");
    const BUDGET: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let lo = T::from_f64_c(0.6);
    let hi = T::from_f64_c(1.6);
    let min_sep = T::from_f64_c(min_separation_deg);
    let mut out: Vec<IlluminantSpec<T>> = Vec::with_capacity(k);
    let mut draws = 0usize;
    while out.len() < k {
        if draws >= BUDGET {
            return Err(Error::GenerationFailure(format!(
                "could not place {k} illuminants {min_separation_deg} deg apart \
                 within {BUDGET} draws"
            )));
        }
        draws += 1;
        let cand = [rng.random_range(lo..hi), T::one(), rng.random_range(lo..hi)];
        let ok = out
            .iter()
            .all(|ex| angular_error(cand, ex.chromaticity).map_or(false, |a| a >= min_sep));
        if ok {
            out.push(IlluminantSpec::new(cand)?);
        }
    }
    Ok(out)
}

/// Smooth per-pixel mixing fields: a random linear gradient plus 1-3
/// Gaussian blobs per channel, softmax-normalized per pixel.
pub fn generate_mix_map<T: Scalar>(h: usize, w: usize, k: usize, rng_seed: u64) -> MixMap<T> {
    assert!((1..=3).contains(&k), "k must be in 1..=3");
    if k == 1 {
        return MixMap::new(Array3::from_elem((h, w, 1), T::one()))
            .expect("all-ones map is valid");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let span = h.max(w) as f64;
    let mut fields = Array3::<f64>::zeros((h, w, k));
    for c in 0..k {
        let gx = rng.random_range(-3.0..3.0) / span;
        let gy = rng.random_range(-3.0..3.0) / span;
        let offset = rng.random_range(-1.0..1.0);
        let n_blobs = rng.random_range(1..=3usize);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.1..0.4) * h.min(w) as f64,
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = gx * x as f64 + gy * y as f64 + offset;
                for &(cy, cx, sigma, amp) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                fields[[y, x, c]] = v;
            }
        }
    }
    let mut data = Array3::<T>::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let m = (0..k).map(|c| fields[[y, x, c]]).fold(f64::MIN, f64::max);
            let exps: Vec<f64> = (0..k).map(|c| (fields[[y, x, c]] - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..k {
                data[[y, x, c]] = T::from_f64_c(exps[c] / z);
            }
        }
    }
    MixMap::new(data).expect("softmax output is a valid mix map")
}

/// Blend illuminants per pixel, light the reflectance, rescale globally so
/// the maximum channel value is 1, and record the g-normalized blend as gt.
pub fn compose_scene<T: Scalar>(
    reflectance: &ImageTensor<T>,
    illuminants: &[IlluminantSpec<T>],
    mix: &MixMap<T>,
    name: impl Into<String>,
    seed: u64,
) -> Result<SceneSample<T>> {
    let (h, w, _) = reflectance.data().dim();
    if mix.height() != h || mix.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "reflectance {h}x{w} vs mix {}x{}",
            mix.height(),
            mix.width()
        )));
    }
    if mix.num_illuminants() != illuminants.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} illuminants vs {} mix channels",
            illuminants.len(),
            mix.num_illuminants()
        )));
    }
    let mut image = Array3::zeros((h, w, 3));
    let mut gt = Array3::zeros((h, w, 2));
    let mut max_v = T::zero();
    for y in 0..h {
        for x in 0..w {
            let mut e = [T::zero(); 3];
            for (k, l) in illuminants.iter().enumerate() {
                let a = mix.data()[[y, x, k]];
                for c in 0..3 {
                    e[c] = e[c] + a * l.chromaticity[c];
                }
            }
            let n = g_normalize(e)?;
            gt[[y, x, 0]] = n[0];
            gt[[y, x, 1]] = n[2];
            for c in 0..3 {
                let v = reflectance.data()[[y, x, c]] * e[c];
                image[[y, x, c]] = v;
                if v > max_v {
                    max_v = v;
                }
            }
        }
    }
    if max_v > T::zero() {
        image.mapv_inplace(|v| v / max_v);
    }
    Ok(SceneSample {
        image: ImageTensor::new(image)?,
        gt: IlluminantMap::new(gt)?,
        mask: ValidityMask::all_valid(h, w),
        illuminants: illuminants.to_vec(),
        name: name.into(),
        seed,
    })
}

/// Build a sample from LSMI-shaped labels: per-pixel mixing coefficients
/// plus illuminant chromaticities; the image passes through unchanged.
pub fn import_lsmi_sample<T: Scalar>(
    image: ImageTensor<T>,
    coefficients: &MixMap<T>,
    chromaticities: &[IlluminantSpec<T>],
    mask: Option<ValidityMask>,
    name: impl Into<String>,
) -> Result<SceneSample<T>> {
    let (h, w, _) = image.data().dim();
    if coefficients.height() != h || coefficients.width() != w {
        return Err(Error::ShapeMismatch("image dims differ from coefficients".into()));
    }
    if coefficients.num_illuminants() != chromaticities.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} chromaticities vs {} coefficient channels",
            chromaticities.len(),
            coefficients.num_illuminants()
        )));
    }
    if let Some(m) = &mask {
        if m.height() != h || m.width() != w {
            return Err(Error::ShapeMismatch("mask dims differ from image".into()));
        }
    }
    let mut gt = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let mut e = [T::zero(); 3];
            for (k, l) in chromaticities.iter().enumerate() {
                let a = coefficients.data()[[y, x, k]];
                for c in 0..3 {
                    e[c] = e[c] + a * l.chromaticity[c];
                }
            }
            let n = g_normalize(e)?;
            gt[[y, x, 0]] = n[0];
            gt[[y, x, 1]] = n[2];
        }
    }
    Ok(SceneSample {
        gt: IlluminantMap::new(gt)?,
        mask: mask.unwrap_or_else(|| ValidityMask::all_valid(h, w)),
        illuminants: chromaticities.to_vec(),
        name: name.into(),
        seed: 0,
        image,
    })
}

/// Deterministic 7:2:1 split: shuffle by seed, floor(0.7 n) train,
/// floor(0.2 n) val, remainder test.
pub fn split_dataset(names: &[String], seed: u64) -> Result<DatasetManifest> {
    let n = names.len();
    if n < 10 {
        return Err(Error::SplitError(format!(
            "need at least 10 samples for a 7:2:1 split, got {n}"
        )));
    }
    let mut shuffled = names.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (7 * n) / 10;
    let n_val = (2 * n) / 10;
    Ok(DatasetManifest {
        seed,
        splits: SplitNames {
            train: shuffled[..n_train].to_vec(),
            val: shuffled[n_train..n_train + n_val].to_vec(),
            test: shuffled[n_train + n_val..].to_vec(),
        },
    })
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    name: String,
    height: usize,
    width: usize,
    illuminants: Vec<[f64; 3]>,
    seed: u64,
}

fn write_f32_bin(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_exact_bin(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let mut f = fs::File::open(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(name.clone(), e))?;
    if bytes.len() != expected_len {
        return Err(Error::format(
            name,
            format!("expected {expected_len} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write one sample directory: `meta.json`, `image.bin`, `gt.bin`, and
/// `mask.bin` when the mask excludes any pixel.
pub fn write_sample<T: Scalar>(sample: &SceneSample<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = SampleMeta {
        name: sample.name.clone(),
        height: sample.image.height(),
        width: sample.image.width(),
        illuminants: sample
            .illuminants
            .iter()
            .map(|l| {
                [
                    l.chromaticity[0].to_f64().unwrap(),
                    l.chromaticity[1].to_f64().unwrap(),
                    l.chromaticity[2].to_f64().unwrap(),
                ]
            })
            .collect(),
        seed: sample.seed,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    write_f32_bin(
        &dir.join("image.bin"),
        sample.image.data().iter().map(|v| v.to_f32().unwrap()),
    )?;
    write_f32_bin(
        &dir.join("gt.bin"),
        sample.gt.data().iter().map(|v| v.to_f32().unwrap()),
    )?;
    if sample.mask.count_valid() < sample.mask.height() * sample.mask.width() {
        let path = dir.join("mask.bin");
        let bytes: Vec<u8> = sample.mask.data().iter().copied().collect();
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Read a sample directory written by [`write_sample`]; every size is
/// validated against `meta.json` before decoding.
pub fn read_sample<T: Scalar>(dir: &Path) -> Result<SceneSample<T>> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: SampleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;
    let (h, w) = (meta.height, meta.width);
    if h == 0 || w == 0 {
        return Err(Error::format(
            meta_path.display().to_string(),
            "height and width must be >= 1",
        ));
    }

    let img_bytes = read_exact_bin(&dir.join("image.bin"), h * w * 3 * 4)?;
    let img_vals: Vec<T> = f32s_from_le(&img_bytes)
        .into_iter()
        .map(|v| T::from_f32(v).unwrap())
        .collect();
    let image = Array3::from_shape_vec((h, w, 3), img_vals).unwrap();
    let image = ImageTensor::new(image)
        .map_err(|e| Error::format(dir.join("image.bin").display().to_string(), e.to_string()))?;

    let gt_bytes = read_exact_bin(&dir.join("gt.bin"), h * w * 2 * 4)?;
    let gt_vals: Vec<T> = f32s_from_le(&gt_bytes)
        .into_iter()
        .map(|v| T::from_f32(v).unwrap())
        .collect();
    let gt = IlluminantMap::new(Array3::from_shape_vec((h, w, 2), gt_vals).unwrap())
        .map_err(|e| Error::format(dir.join("gt.bin").display().to_string(), e.to_string()))?;

    let mask_path = dir.join("mask.bin");
    let mask = if mask_path.exists() {
        let bytes = read_exact_bin(&mask_path, h * w)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::format(
                mask_path.display().to_string(),
                "mask bytes must be 0 or 1",
            ));
        }
        ValidityMask::new(Array2::from_shape_vec((h, w), bytes).unwrap())?
    } else {
        ValidityMask::all_valid(h, w)
    };

    let illuminants = meta
        .illuminants
        .iter()
        .map(|l| {
            IlluminantSpec::new([
                T::from_f64_c(l[0]),
                T::from_f64_c(l[1]),
                T::from_f64_c(l[2]),
            ])
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;

    Ok(SceneSample {
        image,
        gt,
        mask,
        illuminants,
        name: meta.name,
        seed: meta.seed,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Knobs for [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub count: usize,
    pub size: usize,
    pub illuminants: usize,
    pub min_separation_deg: f64,
    pub n_patches: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 64,
            illuminants: 2,
            min_separation_deg: 5.0,
            n_patches: 30,
            seed: 0,
        }
    }
}

/// Generate `count` samples under `root` plus a `manifest.json` with
/// 7:2:1 splits. Deterministic for a fixed config.
pub fn generate_dataset<T: Scalar>(root: &Path, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    let mut names = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let sample = generate_sample::<T>(cfg, i)?;
        let name = sample.name.clone();
        write_sample(&sample, &root.join(&name))?;
        names.push(name);
    }
    let manifest = split_dataset(&names, cfg.seed)?;
    write_manifest(&manifest, root)?;
    Ok(manifest)
}

/// Generate the `index`-th sample of a dataset configuration.
pub fn generate_sample<T: Scalar>(cfg: &GenerateConfig, index: usize) -> Result<SceneSample<T>> {
    // distinct streams per sample and per role
    let base = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64);
    let reflectance =
        generate_mondrian_reflectance::<T>(cfg.size, cfg.size, cfg.n_patches, base ^ 0x01);
    let illums = sample_illuminants::<T>(cfg.illuminants, cfg.min_separation_deg, base ^ 0x02)?;
    let mix = generate_mix_map::<T>(cfg.size, cfg.size, cfg.illuminants, base ^ 0x03);
    compose_scene(
        &reflectance,
        &illums,
        &mix,
        format!("sample_{index:05}"),
        base,
    )
}

/// Load every sample named in a split, in manifest order.
pub fn load_split<T: Scalar>(
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<SceneSample<T>>> {
    manifest
        .names_for(split)?
        .iter()
        .map(|n| read_sample(&root.join(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::apply_correction;

    #[test]
    fn mondrian_is_deterministic_and_in_range() {
        let a = generate_mondrian_reflectance::<f32>(16, 20, 8, 42);
        let b = generate_mondrian_reflectance::<f32>(16, 20, 8, 42);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.1..=0.9).contains(&v)));
    }

    #[test]
    fn mondrian_single_patch_on_1x1_is_constant() {
        let img = generate_mondrian_reflectance::<f64>(1, 1, 1, 7);
        let px: Vec<f64> = img.data().iter().copied().collect();
        assert_eq!(px.len(), 3);
    }

    #[test]
    fn illuminants_respect_separation() {
        let l = sample_illuminants::<f64>(2, 3.0, 5).unwrap();
        let a = angular_error(l[0].chromaticity, l[1].chromaticity).unwrap();
        assert!(a >= 3.0);
    }

    #[test]
    fn single_illuminant_needs_no_separation() {
        assert_eq!(sample_illuminants::<f64>(1, 0.0, 1).unwrap().len(), 1);
    }

    #[test]
    fn infeasible_separation_fails() {
        // Oracle: brute-force scan of the (r, b) in [0.6, 1.6]^2 sampling box
        // shows the maximum pairwise angle is ~41.9 deg, so 90 is infeasible.
        let mut max_angle: f64 = 0.0;
        let grid = 20;
        let pts: Vec<[f64; 3]> = (0..=grid)
            .flat_map(|i| {
                (0..=grid).map(move |j| {
                    [
                        0.6 + i as f64 / grid as f64,
                        1.0,
                        0.6 + j as f64 / grid as f64,
                    ]
                })
            })
            .collect();
        for a in &pts {
            for b in &pts {
                max_angle = max_angle.max(angular_error(*a, *b).unwrap());
            }
        }
        assert!(max_angle < 90.0);
        assert!(matches!(
            sample_illuminants::<f64>(2, 90.0, 3),
            Err(Error::GenerationFailure(_))
        ));
    }

    #[test]
    fn mix_map_k1_is_all_ones() {
        let m = generate_mix_map::<f64>(4, 4, 1, 0);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mix_map_sums_to_one_and_is_deterministic() {
        let a = generate_mix_map::<f64>(12, 9, 3, 11);
        let b = generate_mix_map::<f64>(12, 9, 3, 11);
        assert_eq!(a.data(), b.data());
        for px in a.data().rows() {
            let s: f64 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    fn illum(r: f64, g: f64, b: f64) -> IlluminantSpec<f64> {
        IlluminantSpec::new([r, g, b]).unwrap()
    }

    #[test]
    fn compose_degenerate_mix_uses_single_illuminant() {
        let refl = generate_mondrian_reflectance::<f64>(6, 6, 4, 1);
        let l = illum(0.5, 1.0, 2.0);
        let mix = MixMap::new(Array3::from_elem((6, 6, 1), 1.0)).unwrap();
        let s = compose_scene(&refl, &[l], &mix, "t", 0).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert!((s.gt.data()[[y, x, 0]] - 0.5).abs() < 1e-12);
                assert!((s.gt.data()[[y, x, 1]] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_blend_hand_arithmetic() {
        // alpha = 0.5 of (1,1,1) and (0.5,1,2) blends to (0.75, 1, 1.5)
        let refl = ImageTensor::new(Array3::from_elem((1, 1, 3), 0.5)).unwrap();
        let mix = MixMap::new(Array3::from_elem((1, 1, 2), 0.5)).unwrap();
        let s = compose_scene(
            &refl,
            &[illum(1.0, 1.0, 1.0), illum(0.5, 1.0, 2.0)],
            &mix,
            "t",
            0,
        )
        .unwrap();
        assert!((s.gt.data()[[0, 0, 0]] - 0.75).abs() < 1e-12);
        assert!((s.gt.data()[[0, 0, 1]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn correction_with_gt_recovers_reflectance_up_to_scale() {
        let cfg = GenerateConfig {
            count: 1,
            size: 16,
            illuminants: 2,
            ..Default::default()
        };
        let s = generate_sample::<f64>(&cfg, 0).unwrap();
        let refl = generate_mondrian_reflectance::<f64>(16, 16, cfg.n_patches, {
            let base = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            base ^ 0x01
        });
        let corrected = apply_correction(&s.image, &s.gt).unwrap();
        // corrected = scale * reflectance * g(E); estimate scale from one pixel
        // by the green channel where g(E) = 1 after normalization of gt
        let scale = corrected.data()[[0, 0, 1]] / refl.data()[[0, 0, 1]];
        for (c, r) in corrected.data().iter().zip(refl.data().iter()) {
            assert!((c / scale - r).abs() < 1e-6 * r.abs().max(1.0));
        }
    }

    #[test]
    fn import_matches_compose_gt() {
        let refl = generate_mondrian_reflectance::<f64>(8, 8, 5, 3);
        let illums = vec![illum(1.2, 1.0, 0.8), illum(0.7, 1.0, 1.5)];
        let mix = generate_mix_map::<f64>(8, 8, 2, 9);
        let composed = compose_scene(&refl, &illums, &mix, "a", 0).unwrap();
        let imported =
            import_lsmi_sample(composed.image.clone(), &mix, &illums, None, "b").unwrap();
        assert_eq!(composed.gt, imported.gt);
    }

    #[test]
    fn import_hand_arithmetic() {
        // alpha = (0.25, 0.75) of (1,1,1) and (2,1,0.5) blends to (1.75, 1, 0.625)
        let img = ImageTensor::new(Array3::from_elem((1, 1, 3), 0.5)).unwrap();
        let mix =
            MixMap::new(Array3::from_shape_vec((1, 1, 2), vec![0.25, 0.75]).unwrap()).unwrap();
        let s = import_lsmi_sample(
            img,
            &mix,
            &[illum(1.0, 1.0, 1.0), illum(2.0, 1.0, 0.5)],
            None,
            "t",
        )
        .unwrap();
        assert!((s.gt.data()[[0, 0, 0]] - 1.75).abs() < 1e-12);
        assert!((s.gt.data()[[0, 0, 1]] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn split_ratios_and_determinism() {
        let names: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let m = split_dataset(&names, 1).unwrap();
        assert_eq!(m.splits.train.len(), 7);
        assert_eq!(m.splits.val.len(), 2);
        assert_eq!(m.splits.test.len(), 1);
        assert_eq!(m, split_dataset(&names, 1).unwrap());

        let names: Vec<String> = (0..100).map(|i| format!("s{i}")).collect();
        let m = split_dataset(&names, 2).unwrap();
        assert_eq!(
            (m.splits.train.len(), m.splits.val.len(), m.splits.test.len()),
            (70, 20, 10)
        );
        // every sample assigned exactly once
        let mut all: Vec<String> = m
            .splits
            .train
            .iter()
            .chain(&m.splits.val)
            .chain(&m.splits.test)
            .cloned()
            .collect();
        all.sort();
        let mut expect = names.clone();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_rejects_small_sets() {
        let names: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
        assert!(matches!(
            split_dataset(&names, 0),
            Err(Error::SplitError(_))
        ));
    }

    #[test]
    fn sample_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig {
            count: 1,
            size: 8,
            ..Default::default()
        };
        let mut s = generate_sample::<f32>(&cfg, 0).unwrap();
        // non-trivial mask so mask.bin is exercised
        let mut md = ndarray::Array2::ones((8, 8));
        md[[0, 0]] = 0u8;
        s.mask = ValidityMask::new(md).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let back = read_sample::<f32>(dir.path()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig {
            count: 1,
            size: 8,
            ..Default::default()
        };
        let s = generate_sample::<f32>(&cfg, 0).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let img = fs::read(dir.path().join("image.bin")).unwrap();
        fs::write(dir.path().join("image.bin"), &img[..img.len() - 4]).unwrap();
        assert!(matches!(
            read_sample::<f32>(dir.path()),
            Err(Error::FormatError { .. })
        ));
    }

    #[test]
    fn inconsistent_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig {
            count: 1,
            size: 8,
            ..Default::default()
        };
        let s = generate_sample::<f32>(&cfg, 0).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        fs::write(
            dir.path().join("meta.json"),
            meta.replace("\"height\": 8", "\"height\": 9"),
        )
        .unwrap();
        assert!(matches!(
            read_sample::<f32>(dir.path()),
            Err(Error::FormatError { .. })
        ));
    }
}
