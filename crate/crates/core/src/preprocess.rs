//! Resizing, unit-range normalization and training-time augmentation.
//!
//! Images are handled as channels-last `f32` samples of shape `[h, w, 3]`.

use image::RgbImage;
use plasmodium_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Degrees; angles are drawn from `[-range, range]`.
    pub rotation_range: f32,
    /// Degrees.
    pub shear_range: f32,
    /// Fraction of the image height/width.
    pub shift_range: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            rotation_range: 20.0,
            shear_range: 10.0,
            shift_range: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No transform at all; [`augment`] is then the identity.
    pub fn identity() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotation_range: 0.0,
            shear_range: 0.0,
            shift_range: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f32, max: f32| {
            if !(0.0..=max).contains(&v) {
                Err(CoreError::Config(format!("{name} must lie in [0, {max}], got {v}")))
            } else {
                Ok(())
            }
        };
        check("rotation_range", self.rotation_range, 180.0)?;
        check("shear_range", self.shear_range, 45.0)?;
        check("shift_range", self.shift_range, 0.5)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let symmetric = |rng: &mut R, r: f32| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        AugmentParams {
            horizontal_flip: self.horizontal_flip && rng.gen_bool(0.5),
            vertical_flip: self.vertical_flip && rng.gen_bool(0.5),
            angle: symmetric(rng, self.rotation_range),
            shear: symmetric(rng, self.shear_range),
            shift_x: symmetric(rng, self.shift_range),
            shift_y: symmetric(rng, self.shift_range),
        }
    }

    /// Random stream for one sample of one epoch, independent of the
    /// order in which workers pick samples up.
    pub fn sample_rng(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index as u64);
        rng
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Counter-clockwise, degrees.
    pub angle: f32,
    /// Horizontal shear, degrees.
    pub shear: f32,
    /// Fractions of width / height; positive moves content right / down.
    pub shift_x: f32,
    pub shift_y: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessProfile {
    /// `(height, width)`.
    pub target_size: (usize, usize),
    pub normalize: bool,
    #[serde(default = "rgb")]
    pub channel_order: String,
    #[serde(default = "bilinear")]
    pub resize: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
}

fn rgb() -> String {
    "RGB".into()
}

fn bilinear() -> String {
    "bilinear_half_pixel".into()
}

impl PreprocessProfile {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            target_size: (height, width),
            normalize: true,
            channel_order: rgb(),
            resize: bilinear(),
            augment: None,
        }
    }

    /// Shared 128x128 profile of model A and the transfer backbones.
    pub fn small() -> Self {
        Self::new(128, 128)
    }

    pub fn cnn_b() -> Self {
        Self::new(224, 224)
    }

    /// 32x32 raw-pixel features for the SVM.
    pub fn svm() -> Self {
        Self::new(32, 32)
    }

    pub fn with_augment(mut self, config: AugmentConfig) -> Self {
        self.augment = Some(config);
        self
    }

    pub fn without_augment(&self) -> Self {
        Self {
            augment: None,
            ..self.clone()
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.target_size.0, self.target_size.1, 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(CoreError::Config("target size must be non-zero".into()));
        }
        if self.channel_order != "RGB" {
            return Err(CoreError::Config(format!(
                "unsupported channel order `{}`",
                self.channel_order
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers and edge clamping, the
/// convention of TensorFlow's `resize` with `half_pixel_centers`.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w * c);
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                dst[ch] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// Resizes to the profile size and, if asked, scales 0-255 values to
/// `[0, 1]`.
pub fn standardize(image: &RgbImage, profile: &PreprocessProfile) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(CoreError::Data("cannot standardize a zero-area image".into()));
    }
    let scale = if profile.normalize { 1.0 / 255.0 } else { 1.0 };
    let src: Vec<f32> = image.as_raw().iter().map(|&v| v as f32 * scale).collect();
    let (oh, ow) = profile.target_size;
    let out = resize_bilinear(&src, h, w, 3, oh, ow);
    Ok(Tensor::from_vec(&[oh, ow, 3], out)?)
}

/// [`standardize`] for images that are already floating point. Inputs are
/// taken to be on the 0-255 scale unless every value already lies in
/// `[0, 1]`, so conforming inputs pass through unchanged.
pub fn standardize_tensor(image: &Tensor, profile: &PreprocessProfile) -> Result<Tensor> {
    let [h, w, c] = image.shape() else {
        return Err(CoreError::Data(format!("expected an [h, w, 3] image, got {:?}", image.shape())));
    };
    if *c != 3 || *h == 0 || *w == 0 {
        return Err(CoreError::Data(format!("expected an [h, w, 3] image, got {:?}", image.shape())));
    }
    let in_unit = image.data().iter().all(|v| (0.0..=1.0).contains(v));
    let scale = if profile.normalize && !in_unit { 1.0 / 255.0 } else { 1.0 };
    let src: Vec<f32> = image.data().iter().map(|v| v * scale).collect();
    let (oh, ow) = profile.target_size;
    Ok(Tensor::from_vec(&[oh, ow, 3], resize_bilinear(&src, *h, *w, 3, oh, ow))?)
}

/// Draws parameters from `config` and applies them.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, config: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    apply_augment(image, &config.sample(rng))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Flips, then one affine map (rotation, shear and shift about the image
/// center) resampled bilinearly with nearest-edge fill. Output values are
/// clamped to `[0, 1]`.
pub fn apply_augment(image: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(CoreError::Data(format!("expected an [h, w, c] image, got {:?}", image.shape())));
    };
    let src = image.data();
    let mut flipped = src.to_vec();
    if p.horizontal_flip || p.vertical_flip {
        for y in 0..h {
            for x in 0..w {
                let sy = if p.vertical_flip { h - 1 - y } else { y };
                let sx = if p.horizontal_flip { w - 1 - x } else { x };
                flipped[(y * w + x) * c..][..c].copy_from_slice(&src[(sy * w + sx) * c..][..c]);
            }
        }
    }
    let geometric = p.angle != 0.0 || p.shear != 0.0 || p.shift_x != 0.0 || p.shift_y != 0.0;
    let mut out = if geometric {
        // forward map on centered coordinates (x right, y down):
        // d = R(angle) * S(shear) * s + t, with R counter-clockwise on screen
        let (sin, cos) = (p.angle as f64).to_radians().sin_cos();
        let k = (p.shear as f64).to_radians().tan();
        // R = [[cos, sin], [-sin, cos]], S = [[1, k], [0, 1]]
        let m = [[cos, cos * k + sin], [-sin, -sin * k + cos]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (tx, ty) = (p.shift_x as f64 * w as f64, p.shift_y as f64 * h as f64);
        let mut out = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - tx;
                let dy = y as f64 - cy - ty;
                let sx = snap(inv[0][0] * dx + inv[0][1] * dy + cx).clamp(0.0, (w - 1) as f64);
                let sy = snap(inv[1][0] * dx + inv[1][1] * dy + cy).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                for ch in 0..c {
                    let v = |yy: usize, xx: usize| flipped[(yy * w + xx) * c + ch];
                    let val = if fx == 0.0 && fy == 0.0 {
                        v(y0, x0)
                    } else {
                        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                        top * (1.0 - fy) + bottom * fy
                    };
                    out[(y * w + x) * c + ch] = val;
                }
            }
        }
        out
    } else {
        flipped
    };
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Tensor::from_vec(image.shape(), out)?)
}
