//! Dataset ingestion: IDX files (MNIST's container) and a Gaussian-class
//! synthetic image generator.
//!
//! Samples loaded here carry raw 0-based class identifiers in `label`;
//! [`crate::harness::split_domains`] maps them to the 1..=K labels the
//! models use.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::ImageSample;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        message: message.into(),
    }
}

/// Reads a whole file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err(offset as u64, format!("file ends before {what}")))
}

/// Parsed IDX image file: `count` images of `rows × cols` bytes.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(0, format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(idx_err(8, "zero image dimension"));
    }
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(idx_err(
            16 + body.len() as u64,
            format!("truncated: {need} pixel bytes expected, {} present", body.len()),
        ));
    }
    if body.len() > need {
        return Err(idx_err(16 + need as u64, "trailing bytes after the last image"));
    }
    Ok((count, rows, cols, body))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(0, format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        let at = 8 + body.len().min(count) as u64;
        return Err(idx_err(at, format!("{count} labels declared, {} present", body.len())));
    }
    Ok(body)
}

/// Loads an IDX image/label pair (optionally gzipped). Pixels are scaled by
/// 1/255; labels stay as the raw class bytes.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<ImageSample>> {
    let image_bytes = read_maybe_gz(images)?;
    let label_bytes = read_maybe_gz(labels)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(idx_err(4, format!("{count} images but {} labels", labels.len())));
    }
    let plane = rows * cols;
    Ok(pixels
        .chunks_exact(plane)
        .zip(labels)
        .map(|(px, &label)| ImageSample {
            image: Tensor::from_parts(
                vec![1, rows, cols],
                px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            ),
            label: usize::from(label),
        })
        .collect())
}

/// Encodes samples as an uncompressed IDX pair (pixels rounded to bytes).
pub fn encode_idx(samples: &[ImageSample]) -> Result<(Vec<u8>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| invalid("nothing to encode"))?;
    let (rows, cols) = (first.height(), first.width());
    let mut images = Vec::with_capacity(16 + samples.len() * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [samples.len(), rows, cols] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + samples.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for s in samples {
        if s.image.shape() != [1, rows, cols] {
            return Err(invalid("IDX needs single-channel images of one size"));
        }
        images.extend(s.image.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        labels.push(u8::try_from(s.label).map_err(|_| invalid("IDX labels are single bytes"))?);
    }
    Ok((images, labels))
}

/// One class of the synthetic generator: a Gaussian over latent codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    /// Full latent covariance; overrides `std` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Per-dimension standard deviation (diagonal covariance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
}

/// Images built as `background + Σ_l z_l · pattern_l + noise`, clamped to
/// `[0, 1]`, where `z` is drawn from the sample's class Gaussian and the
/// patterns are fixed smooth blobs drawn once from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub samples_per_class: usize,
    pub classes: Vec<ClassSpec>,
    #[serde(default = "default_background")]
    pub background: f64,
    #[serde(default)]
    pub pixel_noise: f64,
    /// Blob width relative to the image side.
    #[serde(default = "default_blob_width")]
    pub blob_width: f64,
    /// Leading latent dimensions whose pattern is a flat field rather than
    /// a blob; they vary overall brightness.
    #[serde(default)]
    pub uniform_patterns: usize,
}

fn default_background() -> f64 {
    0.1
}

fn default_blob_width() -> f64 {
    0.15
}

impl SyntheticSpec {
    pub fn latent_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    /// Rejects specs that [`gen_synthetic`] would refuse.
    pub fn check(&self) -> Result<()> {
        self.factors().map(|_| ())
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = Σ` for each class.
    fn factors(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        if self.image_size < 2 {
            return Err(invalid("synthetic image_size must be at least 2"));
        }
        if self.classes.len() < 2 {
            return Err(invalid("synthetic data needs at least 2 classes"));
        }
        if self.uniform_patterns > self.latent_dim() {
            return Err(invalid("uniform_patterns exceeds the latent dimension"));
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(invalid("pixel_noise must be nonnegative"));
        }
        let dim = self.latent_dim();
        if dim == 0 {
            return Err(invalid("latent means must be non-empty"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.mean == b.mean {
                    return Err(invalid("class means must be pairwise distinct"));
                }
            }
        }
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.mean.len() != dim {
                    return Err(invalid(format!("class {i}: mean has {} dims, expected {dim}", c.mean.len())));
                }
                let cov = match (&c.covariance, &c.std) {
                    (Some(cov), _) => cov.clone(),
                    (None, Some(std)) => {
                        if std.len() != dim || std.iter().any(|s| !(*s >= 0.0)) {
                            return Err(invalid(format!("class {i}: std needs {dim} nonnegative entries")));
                        }
                        (0..dim)
                            .map(|r| (0..dim).map(|k| if r == k { std[r] * std[r] } else { 0.0 }).collect())
                            .collect()
                    }
                    (None, None) => vec![vec![0.0; dim]; dim],
                };
                cholesky_psd(&cov).map_err(|m| invalid(format!("class {i}: {m}")))
            })
            .collect()
    }
}

/// Cholesky factor of a symmetric positive semi-definite matrix. Zero pivots
/// are allowed when the rest of their column vanishes; anything indefinite
/// or asymmetric is rejected.
fn cholesky_psd(a: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, String> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err("covariance must be square".into());
    }
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;
    for i in 0..n {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > tol {
                return Err("covariance must be symmetric".into());
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -tol {
            return Err("covariance is not positive semi-definite".into());
        }
        if d <= tol {
            for i in j + 1..n {
                let r = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if r.abs() > tol {
                    return Err("covariance is not positive semi-definite".into());
                }
            }
            continue;
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            let r = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = r / l[j][j];
        }
    }
    Ok(l)
}

/// One pattern per latent dimension: flat fields first, then smooth blobs.
fn patterns(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let side = spec.image_size;
    let sigma = (spec.blob_width * side as f64).max(0.5);
    let margin = 0.2 * side as f64;
    (0..spec.latent_dim())
        .map(|l| {
            if l < spec.uniform_patterns {
                return vec![1.0; side * side];
            }
            let cx = rng.gen_range(margin..=side as f64 - 1.0 - margin);
            let cy = rng.gen_range(margin..=side as f64 - 1.0 - margin);
            (0..side * side)
                .map(|p| {
                    let (x, y) = ((p % side) as f64, (p / side) as f64);
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect()
}

/// Labelled single-channel images, `samples_per_class` per class, classes in
/// order; labels are the 0-based class index.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<ImageSample>> {
    let factors = spec.factors()?;
    let basis = patterns(spec, rng);
    let side = spec.image_size;
    let dim = spec.latent_dim();
    let mut out = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (label, (class, chol)) in spec.classes.iter().zip(&factors).enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..dim)
                .map(|i| class.mean[i] + (0..=i).map(|k| chol[i][k] * noise[k]).sum::<f64>())
                .collect();
            let pixels = (0..side * side)
                .map(|p| {
                    let mut v = spec.background;
                    for (zl, pat) in z.iter().zip(&basis) {
                        v += zl * pat[p];
                    }
                    if spec.pixel_noise > 0.0 {
                        v += spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    v.clamp(0.0, 1.0)
                })
                .collect();
            out.push(ImageSample {
                image: Tensor::from_parts(vec![1, side, side], pixels),
                label,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn empty_and_bad_magic_rejected() {
        assert!(matches!(parse_idx_images(&[]), Err(Error::Idx { offset: 0, .. })));
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 0];
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Idx { offset: 0, .. })));
        bytes[3] = 3;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Idx { offset: 8, .. })));
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0; 5]);
        match parse_idx_images(&bytes) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2]);
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Idx { offset: 10, .. })));
    }

    fn two_class(std: f64) -> SyntheticSpec {
        SyntheticSpec {
            image_size: 6,
            samples_per_class: 5,
            classes: vec![
                ClassSpec { mean: vec![0.5, 0.0], covariance: None, std: Some(vec![std, std]) },
                ClassSpec { mean: vec![0.0, 0.5], covariance: None, std: Some(vec![std, std]) },
            ],
            background: 0.1,
            pixel_noise: 0.0,
            blob_width: 0.2,
            uniform_patterns: 0,
        }
    }

    #[test]
    fn zero_covariance_gives_identical_samples() {
        let data = gen_synthetic(&two_class(0.0), &mut Rng::seed_from_u64(1)).unwrap();
        for class in data.chunks(5) {
            assert!(class.iter().all(|s| s.image == class[0].image));
        }
        assert_ne!(data[0].image, data[5].image);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_synthetic(&two_class(0.1), &mut Rng::seed_from_u64(9)).unwrap();
        let b = gen_synthetic(&two_class(0.1), &mut Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let mut spec = two_class(0.1);
        spec.classes[0].covariance = Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(gen_synthetic(&spec, &mut Rng::seed_from_u64(0)).is_err());
        spec.classes[0].covariance = Some(vec![vec![1.0, 0.0], vec![0.0, -0.1]]);
        assert!(gen_synthetic(&spec, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![vec![4.0, 2.0, 0.4], vec![2.0, 3.0, 0.1], vec![0.4, 0.1, 1.0]];
        let l = cholesky_psd(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
    }
}
