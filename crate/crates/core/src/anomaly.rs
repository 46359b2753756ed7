//! Anomaly maps: the smoothed clamped image residual, plus the two
//! alternative score sources (latent difference, averaged predicted mask).

use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{ImageGrid, COMPRESSION};
use crate::diffusion::ReverseTrace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which signal an anomaly map was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    ImageDiff,
    LatentDiff,
    AvgMask,
}

impl ScoreSource {
    pub const ALL: [ScoreSource; 3] =
        [ScoreSource::ImageDiff, ScoreSource::LatentDiff, ScoreSource::AvgMask];

    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::ImageDiff => "image_diff",
            ScoreSource::LatentDiff => "latent_diff",
            ScoreSource::AvgMask => "avg_mask",
        }
    }
}

/// Per-pixel anomaly scores in `[0, 1]` at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    h: usize,
    w: usize,
    scores: Vec<f64>,
    pub source: ScoreSource,
    /// Reconstruction the image-difference source compared against.
    pub reconstruction: Option<Vec<f64>>,
}

impl AnomalyMap {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Normalized 1-d Gaussian kernel with radius `ceil(4 sigma)`. `sigma = 0`
/// yields the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument("gaussian sigma must be finite and non-negative"));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Separable convolution with reflection padding (index -1 maps to 0,
/// -2 to 1, ...).
pub fn smooth(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Result<Vec<f64>> {
    if values.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![values.len()] });
    }
    if kernel.is_empty() || kernel.len() % 2 == 0 {
        return Err(Error::InvalidArgument("kernel must have odd length"));
    }
    if kernel.len() == 1 {
        let k = kernel[0];
        return Ok(values.iter().map(|v| v * k).collect());
    }
    let radius = kernel.len() / 2;
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &values[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x as i64 + j as i64 - radius as i64, w);
                acc += kv * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y as i64 + j as i64 - radius as i64, h);
                acc += kv * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// Image-level anomaly map: absolute residual between the input and its
/// reconstruction, clamped at `gamma` and rescaled to `[0, 1]`, then smoothed
/// with a Gaussian kernel. `gamma = None` disables the clamp and uses the raw
/// residual (already bounded by 1 for unit-range images).
pub fn image_diff_map(
    x: &ImageGrid,
    x_recon: &ImageGrid,
    gamma: Option<f64>,
    gauss_sigma: f64,
) -> Result<AnomalyMap> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    if x.height() != x_recon.height() || x.width() != x_recon.width() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.height(), x.width()],
            got: vec![x_recon.height(), x_recon.width()],
        });
    }
    if let Some(g) = gamma {
        if !(g > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive"));
        }
    }
    let residual: Vec<f64> = x
        .values()
        .iter()
        .zip(x_recon.values())
        .map(|(a, b)| {
            let d = (a - b).abs();
            match gamma {
                Some(g) => d.min_f(g) / g,
                None => d,
            }
        })
        .collect();
    let kernel = gaussian_kernel(gauss_sigma)?;
    let scores = smooth(&residual, x.height(), x.width(), &kernel)?;
    Ok(AnomalyMap {
        h: x.height(),
        w: x.width(),
        scores,
        source: ScoreSource::ImageDiff,
        reconstruction: Some(x_recon.values().to_vec()),
    })
}

fn nearest_upsample(values: &[f64], lh: usize, lw: usize, factor: usize) -> Vec<f64> {
    let (h, w) = (lh * factor, lw * factor);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = values[(y / factor) * lw + x / factor];
        }
    }
    out
}

/// Latent-level anomaly map: per-site channel-mean absolute difference,
/// min-max normalized to `[0, 1]` and upsampled to image resolution by
/// nearest neighbour.
pub fn latent_diff_map(z_start: &Tensor, z_final: &Tensor) -> Result<AnomalyMap> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    z_start.expect_same_shape(z_final)?;
    let [c, lh, lw] = match *z_start.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::InvalidArgument("latent must be CxHxW")),
    };
    let mut site = vec![0.0; lh * lw];
    for ci in 0..c {
        for i in 0..lh * lw {
            site[i] += (z_start.data()[ci * lh * lw + i] - z_final.data()[ci * lh * lw + i]).abs();
        }
    }
    for v in &mut site {
        *v /= c as f64;
    }
    let max = site.iter().cloned().fold(f64::MIN, f64::max);
    let min = site.iter().cloned().fold(f64::MAX, f64::min);
    if max > min {
        for v in &mut site {
            *v = (*v - min) / (max - min);
        }
    } else {
        for v in &mut site {
            *v = 0.0;
        }
    }
    let scores = nearest_upsample(&site, lh, lw, COMPRESSION);
    Ok(AnomalyMap {
        h: lh * COMPRESSION,
        w: lw * COMPRESSION,
        scores,
        source: ScoreSource::LatentDiff,
        reconstruction: None,
    })
}

/// Averaged predicted-mask map: mean of the per-step mask probabilities over
/// the sampling trace, upsampled to image resolution by nearest neighbour.
pub fn avg_mask_map(trace: &ReverseTrace) -> Result<AnomalyMap> {
    let Some(first) = trace.steps.first() else {
        return Err(Error::Degenerate("empty reverse trace"));
    };
    let (lh, lw) = match *first.mask_probs.shape() {
        [1, h, w] => (h, w),
        _ => return Err(Error::InvalidArgument("mask probabilities must be 1xHxW")),
    };
    let mut acc = vec![0.0; lh * lw];
    for step in &trace.steps {
        if step.mask_probs.shape() != first.mask_probs.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.mask_probs.shape().to_vec(),
                got: step.mask_probs.shape().to_vec(),
            });
        }
        for (a, &p) in acc.iter_mut().zip(step.mask_probs.data()) {
            *a += p;
        }
    }
    let n = trace.steps.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    let scores = nearest_upsample(&acc, lh, lw, COMPRESSION);
    Ok(AnomalyMap {
        h: lh * COMPRESSION,
        w: lw * COMPRESSION,
        scores,
        source: ScoreSource::AvgMask,
        reconstruction: None,
    })
}
