//! Random geometric augmentation of a single image: resized crop, affine
//! (translate + shear), rotation and perspective, applied in that order.
//!
//! Every family resamples with bilinear interpolation about pixel centres,
//! fills outside the source with zeros, and clamps the result to `[0, 1]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A `[C, H, W]` image with values in `[0, 1]` and a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Tensor,
    pub label: usize,
}

impl ImageSample {
    pub fn new(image: Tensor, label: usize) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(invalid(format!("image must be [C, H, W], got {:?}", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { image, label })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation angle drawn from `[-d, d]` degrees.
    pub rotation_degrees: f64,
    /// Crop area as a fraction of the image.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub crop_ratio: [f64; 2],
    /// Maximum translation as a fraction of width / height.
    pub translate: f64,
    /// Horizontal shear drawn from `[-s, s]` degrees.
    pub shear_degrees: f64,
    /// Corner displacement as a fraction of the half-size.
    pub perspective: f64,
    /// Probability that each family is applied.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 15.0,
            crop_scale: [0.6, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            translate: 0.1,
            shear_degrees: 10.0,
            perspective: 0.3,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every family applied, each with zero-width ranges.
    pub fn identity() -> Self {
        Self {
            rotation_degrees: 0.0,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            translate: 0.0,
            shear_degrees: 0.0,
            perspective: 0.0,
            probability: 1.0,
        }
    }

    /// Problems with the ranges, keyed by field name.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                out.push((key.to_string(), msg.to_string()));
            }
        };
        check((0.0..180.0).contains(&self.rotation_degrees), "rotation_degrees", "must lie in [0, 180)");
        check((0.0..180.0).contains(&self.shear_degrees), "shear_degrees", "must lie in [0, 180)");
        let [lo, hi] = self.crop_scale;
        check(lo > 0.0 && lo <= hi && hi <= 1.0, "crop_scale", "need 0 < min <= max <= 1");
        let [lo, hi] = self.crop_ratio;
        check(lo > 0.0 && lo <= hi && hi.is_finite(), "crop_ratio", "need 0 < min <= max");
        check((0.0..=1.0).contains(&self.translate), "translate", "must lie in [0, 1]");
        check((0.0..=1.0).contains(&self.perspective), "perspective", "must lie in [0, 1]");
        check((0.0..=1.0).contains(&self.probability), "probability", "must lie in [0, 1]");
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((k, m)) => Err(invalid(format!("augment.{k}: {m}"))),
        }
    }
}

/// Bilinear sample of one `[H, W]` plane at continuous pixel coordinates.
/// Neighbours outside the plane contribute zero.
pub fn bilinear(plane: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            0.0
        } else {
            plane[yi as usize * width + xi as usize]
        }
    };
    let mut v = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let w = wx * wy;
            if w != 0.0 {
                v += w * at(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Resamples every channel through `source_of(x, y)`, which maps an output
/// pixel centre to the source coordinates it reads from.
pub fn warp(image: &Tensor, source_of: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64, y as f64);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                out[ch * h * w + y * w + x] = bilinear(plane, h, w, sx, sy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

fn centre(image: &Tensor) -> (f64, f64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Crops the `[left, left+cw) × [top, top+ch)` window and resizes it to the full image.
pub fn resized_crop(image: &Tensor, left: usize, top: usize, cw: usize, ch: usize) -> Tensor {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let (sx, sy) = (cw as f64 / w, ch as f64 / h);
    warp(image, |x, y| {
        (left as f64 + (x + 0.5) * sx - 0.5, top as f64 + (y + 0.5) * sy - 0.5)
    })
}

/// Rotation by `degrees` (counter-clockwise on screen) about the image centre.
pub fn rotate(image: &Tensor, degrees: f64) -> Tensor {
    let (cx, cy) = centre(image);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(image, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

/// Translation by `(tx, ty)` pixels combined with a horizontal shear about the centre.
pub fn affine(image: &Tensor, tx: f64, ty: f64, shear_degrees: f64) -> Tensor {
    let (cx, cy) = centre(image);
    let k = shear_degrees.to_radians().tan();
    warp(image, |x, y| {
        let (dx, dy) = (x - cx - tx, y - cy - ty);
        (cx + dx - k * dy, cy + dy)
    })
}

/// Projective warp sending the four image corners to `corners`
/// (top-left, top-right, bottom-right, bottom-left).
pub fn perspective(image: &Tensor, corners: [(f64, f64); 4]) -> Result<Tensor> {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let start = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    // output pixel at corners[i] reads source pixel start[i]
    let hm = homography(&corners, &start)?;
    Ok(warp(image, |x, y| {
        let d = hm[6] * x + hm[7] * y + 1.0;
        ((hm[0] * x + hm[1] * y + hm[2]) / d, (hm[3] * x + hm[4] * y + hm[5]) / d)
    }))
}

/// Coefficients `[a..h]` of the projective map taking `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Result<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() < 1e-12 {
            return Err(invalid("degenerate perspective corners"));
        }
        a.swap(col, pivot);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut out = [0.0; 8];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i][8] / a[i][i];
    }
    Ok(out)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

const CROP_ATTEMPTS: usize = 10;

fn sample_crop(rng: &mut Rng, cfg: &AugmentConfig, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let scale = uniform(rng, cfg.crop_scale[0], cfg.crop_scale[1]);
        let log_ratio = uniform(rng, cfg.crop_ratio[0].ln(), cfg.crop_ratio[1].ln());
        let ratio = log_ratio.exp();
        let cw = (scale * area * ratio).sqrt().round() as usize;
        let ch = (scale * area / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let left = rng.gen_range(0..=w - cw);
            let top = rng.gen_range(0..=h - ch);
            return (left, top, cw, ch);
        }
    }
    (0, 0, w, h)
}

/// One random draw of the full augmentation pipeline. The label is kept.
pub fn transform(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ImageSample> {
    let (h, w) = (sample.height(), sample.width());
    let mut img = sample.image.clone();

    if rng.gen_bool(cfg.probability) {
        let (left, top, cw, ch) = sample_crop(rng, cfg, h, w);
        img = resized_crop(&img, left, top, cw, ch);
    }
    if rng.gen_bool(cfg.probability) {
        let tx = uniform(rng, -cfg.translate, cfg.translate) * w as f64;
        let ty = uniform(rng, -cfg.translate, cfg.translate) * h as f64;
        let shear = uniform(rng, -cfg.shear_degrees, cfg.shear_degrees);
        img = affine(&img, tx, ty, shear);
    }
    if rng.gen_bool(cfg.probability) {
        let angle = uniform(rng, -cfg.rotation_degrees, cfg.rotation_degrees);
        img = rotate(&img, angle);
    }
    if rng.gen_bool(cfg.probability) {
        let (hw, hh) = (cfg.perspective * (w as f64 - 1.0) / 2.0, cfg.perspective * (h as f64 - 1.0) / 2.0);
        let (r, b) = (w as f64 - 1.0, h as f64 - 1.0);
        let mut jitter = |max: f64| uniform(rng, 0.0, max);
        let corners = [
            (jitter(hw), jitter(hh)),
            (r - jitter(hw), jitter(hh)),
            (r - jitter(hw), b - jitter(hh)),
            (jitter(hw), b - jitter(hh)),
        ];
        img = perspective(&img, corners)?;
    }
    Ok(ImageSample {
        image: img,
        label: sample.label,
    })
}

/// `count` independent transforms of `x0`, all labelled like `x0`.
pub fn replicate(
    x0: &ImageSample,
    count: usize,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(invalid("replicate needs at least one copy"));
    }
    (0..count).map(|_| transform(x0, cfg, rng)).collect()
}
