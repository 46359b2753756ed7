//! Random patch masks for the masked forward process, and binarization of
//! predicted masks at inference.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::logistic;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Binary grid over latent sites: 1 marks cells that get diffused, 0 marks
/// cells preserved verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    grid: Vec<u8>,
    h: usize,
    w: usize,
    /// Realized fraction of 1-cells within the reference region (the supplied
    /// foreground for sampled masks, the whole grid otherwise).
    pub ratio: f64,
    /// Sampled patch side lengths; 1 for masks not built from patches.
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchMask {
    pub fn from_grid(grid: Vec<u8>, h: usize, w: usize) -> Result<Self> {
        if grid.len() != h * w {
            return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![grid.len()] });
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask cells must be 0 or 1"));
        }
        let ones = grid.iter().filter(|&&v| v == 1).count();
        let ratio = ones as f64 / (h * w) as f64;
        Ok(PatchMask { grid, h, w, ratio, patch_h: 1, patch_w: 1 })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        PatchMask { grid: vec![0; h * w], h, w, ratio: 0.0, patch_h: 1, patch_w: 1 }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    /// Clears every cell outside `foreground`.
    pub fn intersect(&mut self, foreground: &[u8]) -> Result<()> {
        if foreground.len() != self.grid.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.grid.len()],
                got: vec![foreground.len()],
            });
        }
        for (m, &f) in self.grid.iter_mut().zip(foreground) {
            if f == 0 {
                *m = 0;
            }
        }
        Ok(())
    }
}

/// Configuration for [`sample_random_mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSampler {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub patch_sides: Vec<usize>,
}

impl Default for MaskSampler {
    fn default() -> Self {
        MaskSampler { ratio_min: 0.0, ratio_max: 0.4, patch_sides: vec![1, 2, 4, 8] }
    }
}

/// Draws a random patch mask over an `h x w` latent grid.
///
/// The masking ratio is uniform in `[ratio_min, ratio_max]` and the patch
/// side lengths along each axis are drawn independently from `patch_sides`.
/// Grid-aligned patches (anchors at multiples of the patch side, clipped at
/// the borders) are selected uniformly without replacement until the covered
/// fraction of foreground cells first reaches the ratio; the result is then
/// intersected with the foreground, so the overshoot is at most one patch.
pub fn sample_random_mask(
    h: usize,
    w: usize,
    foreground: &[u8],
    sampler: &MaskSampler,
    rng: &mut Prng,
) -> Result<PatchMask> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument("mask grid must be at least 8x8"));
    }
    if foreground.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![foreground.len()] });
    }
    if sampler.patch_sides.is_empty() {
        return Err(Error::InvalidArgument("patch side set must be non-empty"));
    }
    if !(0.0..=1.0).contains(&sampler.ratio_min)
        || !(sampler.ratio_min..=1.0).contains(&sampler.ratio_max)
    {
        return Err(Error::InvalidArgument("mask ratio bounds must satisfy 0 <= min <= max <= 1"));
    }

    let ratio =
        sampler.ratio_min + (sampler.ratio_max - sampler.ratio_min) * rng.random::<f64>();
    let patch_h = sampler.patch_sides[rng.random_range(0..sampler.patch_sides.len())];
    let patch_w = sampler.patch_sides[rng.random_range(0..sampler.patch_sides.len())];

    let mut anchors: Vec<(usize, usize)> = (0..h)
        .step_by(patch_h)
        .flat_map(|y| (0..w).step_by(patch_w).map(move |x| (y, x)))
        .collect();
    anchors.shuffle(rng);

    let fg_total = foreground.iter().filter(|&&v| v > 0).count();
    let mut grid = vec![0u8; h * w];
    let mut fg_covered = 0usize;

    if fg_total > 0 {
        for &(ay, ax) in &anchors {
            if fg_covered as f64 / fg_total as f64 >= ratio {
                break;
            }
            for y in ay..(ay + patch_h).min(h) {
                for x in ax..(ax + patch_w).min(w) {
                    let i = y * w + x;
                    if grid[i] == 0 {
                        grid[i] = 1;
                        if foreground[i] > 0 {
                            fg_covered += 1;
                        }
                    }
                }
            }
        }
    }

    for (m, &f) in grid.iter_mut().zip(foreground) {
        if f == 0 {
            *m = 0;
        }
    }
    let realized = if fg_total == 0 { 0.0 } else { fg_covered as f64 / fg_total as f64 };
    Ok(PatchMask { grid, h, w, ratio: realized, patch_h, patch_w })
}

/// Thresholds mask logits: a cell becomes 1 where `logistic(logit)` is
/// strictly greater than `threshold`.
pub fn binarize(mask_logits: &Tensor, threshold: f64) -> Result<PatchMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument("binarize threshold must lie in (0, 1)"));
    }
    let (h, w) = logits_hw(mask_logits)?;
    let grid: Vec<u8> = mask_logits
        .data()
        .iter()
        .map(|&l| u8::from(logistic(l) > threshold))
        .collect();
    PatchMask::from_grid(grid, h, w)
}

fn logits_hw(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidArgument("mask logits must be HxW or 1xHxW")),
    }
}

/// Reduces an image-resolution foreground to latent resolution: a latent cell
/// is foreground when any pixel of its `factor x factor` block is.
pub fn downsample_foreground(
    foreground: &[u8],
    h: usize,
    w: usize,
    factor: usize,
) -> Result<Vec<u8>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument("foreground dims must divide by the factor"));
    }
    if foreground.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![foreground.len()] });
    }
    let (lh, lw) = (h / factor, w / factor);
    let mut out = vec![0u8; lh * lw];
    for ly in 0..lh {
        for lx in 0..lw {
            let mut any = 0u8;
            'block: for y in ly * factor..(ly + 1) * factor {
                for x in lx * factor..(lx + 1) * factor {
                    if foreground[y * w + x] > 0 {
                        any = 1;
                        break 'block;
                    }
                }
            }
            out[ly * lw + lx] = any;
        }
    }
    Ok(out)
}
