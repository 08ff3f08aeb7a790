//! Synthetic cell crops for tests and smoke runs: a pale disk on a light
//! background, with a dark stained inclusion when parasitized. Nothing
//! here stands in for real smear data.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Label, LabeledImage};
use crate::error::{CoreError, Result};

pub fn cell_image(label: Label, size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let (cx, cy) = (s / 2.0 + rng.gen_range(-0.05..0.05) * s, s / 2.0 + rng.gen_range(-0.05..0.05) * s);
    let r = s * rng.gen_range(0.35..0.45);
    let body = [rng.gen_range(200..240u8), rng.gen_range(140..180u8), rng.gen_range(150..190u8)];
    let spot = (label == Label::Parasitized).then(|| {
        let a = rng.gen_range(0.0..std::f32::consts::TAU);
        let d = rng.gen_range(0.0..0.5) * r;
        (cx + d * a.cos(), cy + d * a.sin(), r * rng.gen_range(0.2..0.35))
    });
    RgbImage::from_fn(size, size, |x, y| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let noise: i16 = rng.gen_range(-6..=6);
        let base = if (px - cx).hypot(py - cy) <= r {
            match spot {
                Some((sx, sy, sr)) if (px - sx).hypot(py - sy) <= sr => [90, 40, 120],
                _ => body,
            }
        } else {
            [245, 240, 240]
        };
        Rgb(base.map(|c| (c as i16 + noise).clamp(0, 255) as u8))
    })
}

/// `per_class` images of each label, alternating, with distinct paths.
pub fn images(per_class: usize, size: u32, seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        for label in Label::ALL {
            let s = seed.wrapping_mul(1_000_003).wrapping_add((2 * i + label.index()) as u64);
            out.push(LabeledImage {
                pixels: cell_image(label, size, s),
                label,
                source_path: format!("{}/synthetic_{i:05}.png", label.dir_name()),
            });
        }
    }
    out
}

/// Writes a class-per-directory PNG corpus under `root`.
pub fn write_corpus(root: &Path, per_class: usize, size: u32, seed: u64) -> Result<()> {
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    }
    for img in images(per_class, size, seed) {
        let path = root.join(&img.source_path);
        img.pixels
            .save(&path)
            .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(cell_image(Label::Parasitized, 24, 5), cell_image(Label::Parasitized, 24, 5));
        assert_ne!(cell_image(Label::Parasitized, 24, 5), cell_image(Label::Parasitized, 24, 6));
    }

    #[test]
    fn paths_are_unique() {
        let imgs = images(10, 8, 1);
        let mut paths: Vec<_> = imgs.iter().map(|i| &i.source_path).collect();
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), 20);
    }
}
