//! Patch embeddings.
//!
//! Crops are cut into non-overlapping square patches in row-major patch
//! order; each patch is flattened channel-major (`c, y, x`) and projected
//! linearly. The template is additionally patchified at three patch sizes
//! for the multi-scale prompt generator. For those, the template is first
//! resampled to `P * G` pixels per side, `G = H_z / 16`, so every scale
//! yields the same `G x G` grid.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Total downsampling stride from pixels to tokens.
pub const PATCH: usize = 16;

/// Patch sizes of the multi-scale prompt generator, in prompt-token order.
pub const PROMPT_SCALES: [usize; 3] = [14, 16, 18];

/// Fixed per-channel standardization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PixelNorm {
    pub fn apply<T: Real>(&self, img: &Image) -> Tensor<T> {
        img.standardize(self.mean, self.std)
    }
}

/// Number of stride-16 tokens for an `h x w` crop.
pub fn token_count(h: usize, w: usize) -> Result<usize> {
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} is not divisible by {PATCH}"
        )));
    }
    Ok((h / PATCH) * (w / PATCH))
}

/// Top-left pixel of patch `index` in a grid `grid_w` patches wide.
pub fn patch_origin(index: usize, grid_w: usize, patch: usize) -> (usize, usize) {
    ((index / grid_w) * patch, (index % grid_w) * patch)
}

/// Cuts a `[3, H, W]` tensor into `[(H/P)(W/P), 3 P^2]` flattened patches.
pub fn patchify<T: Real>(pixels: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[3, h, w] = pixels.shape() else {
        return shape_err(
            "patchify",
            format!("expected [3, H, W], got {:?}", pixels.shape()),
        );
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err("patchify", format!("{h}x{w} not divisible by {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = 3 * patch * patch;
    let src = pixels.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for idx in 0..gh * gw {
        let (py, px) = patch_origin(idx, gw, patch);
        for c in 0..3 {
            for dy in 0..patch {
                let row = (c * h + py + dy) * w + px;
                out.extend_from_slice(&src[row..row + patch]);
            }
        }
    }
    Tensor::new([gh * gw, width], out)
}

/// Stride-16 patch embedding: flattened patches times `weight`
/// (`[768, D]`) plus the positional encoding `pos` (`[N, D]`).
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    pixels: &Tensor<T>,
    weight: Var,
    pos: Var,
) -> Result<Var> {
    let patches = patchify(pixels, PATCH)?;
    let n = patches.shape()[0];
    if tape.shape(pos)[0] != n {
        return shape_err(
            "patch_embed",
            format!("{n} patches but positional encoding {:?}", tape.shape(pos)),
        );
    }
    let patches = tape.constant(patches)?;
    let proj = tape.matmul(patches, weight)?;
    tape.add(proj, pos)
}

/// Resamples the template to `scale * G` pixels per side and projects its
/// `G^2` patches of `scale x scale` with `weight` (`[3 scale^2, D]`).
pub fn multiscale_patchify<T: Real>(
    tape: &mut Tape<T>,
    template: &Image,
    norm: &PixelNorm,
    scale: usize,
    weight: Var,
) -> Result<Var> {
    if !PROMPT_SCALES.contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "unsupported prompt patch size {scale}"
        )));
    }
    if template.height() % PATCH != 0 || template.width() % PATCH != 0 {
        return Err(Error::InvalidArgument(format!(
            "template {}x{} is not divisible by {PATCH}",
            template.height(),
            template.width()
        )));
    }
    let (gh, gw) = (template.height() / PATCH, template.width() / PATCH);
    let resized = template.resize(scale * gh, scale * gw);
    let patches = patchify(&norm.apply::<T>(&resized), scale)?;
    let patches = tape.constant(patches)?;
    tape.matmul(patches, weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_at_full_sizes() {
        assert_eq!(token_count(224, 224).unwrap(), 196);
        assert_eq!(token_count(112, 112).unwrap(), 49);
        assert!(token_count(100, 112).is_err());
    }

    #[test]
    fn patch_origin_round_trip() {
        let (gh, gw) = (3, 5);
        let mut seen = std::collections::HashSet::new();
        for idx in 0..gh * gw {
            let (y, x) = patch_origin(idx, gw, PATCH);
            assert_eq!(y % PATCH, 0);
            assert_eq!(x % PATCH, 0);
            assert_eq!((y / PATCH) * gw + x / PATCH, idx);
            assert!(seen.insert((y, x)));
        }
    }

    #[test]
    fn patchify_layout() {
        // pixel value encodes (c, y, x)
        let t = Tensor::<f64>::from_fn([3, 4, 4], |i| i as f64);
        let p = patchify(&t, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // patch 1 is rows 0..2, cols 2..4
        assert_eq!(&p.data()[12..16], &[2.0, 3.0, 6.0, 7.0]);
        // its green channel starts at plane offset 16
        assert_eq!(p.data()[16], 18.0);
        assert!(patchify(&t, 3).is_err());
    }

    #[test]
    fn multiscale_grid_is_scale_independent() {
        let img = Image::filled(112, 112, [0.3, 0.6, 0.9]);
        let norm = PixelNorm::default();
        for scale in PROMPT_SCALES {
            let mut tape = Tape::<f32>::new();
            let w = tape
                .constant(Tensor::zeros([3 * scale * scale, 4]))
                .unwrap();
            let out = multiscale_patchify(&mut tape, &img, &norm, scale, w).unwrap();
            assert_eq!(tape.shape(out), &[49, 4]);
        }
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::zeros([3 * 20 * 20, 4])).unwrap();
        assert!(multiscale_patchify(&mut tape, &img, &norm, 20, w).is_err());
    }
}
