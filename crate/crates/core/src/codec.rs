//! Latent codec: a deterministic convolutional encoder/decoder pair with an
//! 8x spatial compression factor, trained on normal images only and frozen
//! while the denoiser trains.
//!
//! After training, latents are rescaled by the corpus standard deviation so
//! the diffusion process sees roughly unit-variance values.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Spatial compression per axis between image and latent space.
pub const COMPRESSION: usize = 8;

/// A single-channel image with its foreground (brain/phantom) mask.
///
/// Intensities are kept in `[0, 1]`; the foreground grid has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    h: usize,
    w: usize,
    values: Vec<f64>,
    foreground: Vec<u8>,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, values: Vec<f64>, foreground: Vec<u8>) -> Result<Self> {
        if values.len() != h * w || foreground.len() != h * w {
            return Err(Error::ShapeMismatch { expected: vec![h * w], got: vec![values.len()] });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image intensities must lie in [0, 1]"));
        }
        Ok(ImageGrid { h, w, values, foreground })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn foreground(&self) -> &[u8] {
        &self.foreground
    }

    /// View of the intensities as a `[1,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.h, self.w], self.values.clone()).expect("image shape")
    }
}

/// Latents are plain `[C',H',W']` tensors.
pub type LatentGrid = Tensor;

/// Architecture hyper-parameters of the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Encoder widths for the two hidden stride-2 stages.
    pub enc_widths: [usize; 2],
    /// Decoder widths for the three hidden stages.
    pub dec_widths: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { latent_channels: 4, enc_widths: [16, 32], dec_widths: [32, 16, 16] }
    }
}

/// Codec parameters in fixed order, plus the post-training latent scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    cfg: CodecConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    /// Latent standard deviation folded into encode/decode; 1 until trained.
    latent_scale: f64,
}

fn layout(cfg: &CodecConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.latent_channels;
    let [e0, e1] = cfg.enc_widths;
    let [d0, d1, d2] = cfg.dec_widths;
    let conv = |name: &str, co: usize, ci: usize| {
        [
            (format!("{name}.weight"), vec![co, ci, 3, 3]),
            (format!("{name}.bias"), vec![co]),
        ]
    };
    let mut out = Vec::new();
    out.extend(conv("enc1", e0, 1));
    out.extend(conv("enc2", e1, e0));
    out.extend(conv("enc3", c, e1));
    out.extend(conv("dec1", d0, c));
    out.extend(conv("dec2", d1, d0));
    out.extend(conv("dec3", d2, d1));
    out.extend(conv("dec4", 1, d2));
    out
}

impl CodecParams {
    pub fn init(cfg: CodecConfig, rng: &mut Prng) -> Self {
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(&cfg) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let scale = (2.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(rng);
                        g * scale
                    })
                    .collect();
                Tensor::from_vec(&shape, data).expect("layout shape")
            };
            names.push(name);
            tensors.push(t);
        }
        CodecParams { cfg, names, tensors, latent_scale: 1.0 }
    }

    pub fn from_named(
        cfg: CodecConfig,
        named: Vec<(String, Tensor)>,
        latent_scale: f64,
    ) -> Result<Self> {
        let lay = layout(&cfg);
        if named.len() != lay.len() {
            return Err(Error::InvalidArgument("wrong number of codec tensors"));
        }
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::InvalidArgument("latent scale must be positive and finite"));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, tensor), (want_name, want_shape)) in named.into_iter().zip(lay) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(Error::InvalidArgument("codec tensor name or shape mismatch"));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(CodecParams { cfg, names, tensors, latent_scale })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument("latent scale must be positive and finite"));
        }
        self.latent_scale = scale;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Maps an image to its latent. Deterministic; the image dimensions must
    /// divide by the compression factor.
    pub fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        if image.height() % COMPRESSION != 0 || image.width() % COMPRESSION != 0 {
            return Err(Error::InvalidArgument("image dims must divide by the compression factor"));
        }
        let mut tape = Tape::new();
        let taped = TapedCodec::new(&mut tape, self);
        let x = tape.leaf(image.to_tensor());
        let z = taped.encode(&mut tape, x)?;
        let mut latent = tape.value(z).clone();
        if self.latent_scale != 1.0 {
            for v in latent.data_mut() {
                *v /= self.latent_scale;
            }
        }
        Ok(latent)
    }

    /// Maps a latent back to an image, clamping intensities to `[0, 1]`.
    /// The decoded image carries an all-ones foreground.
    pub fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        let [c, lh, lw] = match *latent.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::InvalidArgument("latent must be CxHxW")),
        };
        if c != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.latent_channels],
                got: vec![c],
            });
        }
        let mut tape = Tape::new();
        let taped = TapedCodec::new(&mut tape, self);
        let mut scaled = latent.clone();
        if self.latent_scale != 1.0 {
            for v in scaled.data_mut() {
                *v *= self.latent_scale;
            }
        }
        let z = tape.leaf(scaled);
        let y = taped.decode(&mut tape, z)?;
        let values: Vec<f64> =
            tape.value(y).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (h, w) = (lh * COMPRESSION, lw * COMPRESSION);
        ImageGrid::new(h, w, values, vec![1; h * w])
    }
}

/// Codec parameters as leaves on a tape.
pub struct TapedCodec {
    vars: Vec<Var>,
}

impl TapedCodec {
    pub fn new(tape: &mut Tape, model: &CodecParams) -> Self {
        TapedCodec { vars: model.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    pub fn gradients(&self, tape: &Tape, model: &CodecParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(model.tensors())
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// Encoder: three stride-2 convolutions, linear output stage.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let v = &self.vars;
        let h = tape.conv2d(x, v[0], v[1], 2, 1)?;
        let h = tape.silu(h);
        let h = tape.conv2d(h, v[2], v[3], 2, 1)?;
        let h = tape.silu(h);
        tape.conv2d(h, v[4], v[5], 2, 1)
    }

    /// Decoder: convolutions interleaved with nearest-neighbour upsampling,
    /// linear output stage (unclamped).
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let v = &self.vars;
        let h = tape.conv2d(z, v[6], v[7], 1, 1)?;
        let h = tape.silu(h);
        let h = tape.upsample2x(h)?;
        let h = tape.conv2d(h, v[8], v[9], 1, 1)?;
        let h = tape.silu(h);
        let h = tape.upsample2x(h)?;
        let h = tape.conv2d(h, v[10], v[11], 1, 1)?;
        let h = tape.silu(h);
        let h = tape.upsample2x(h)?;
        tape.conv2d(h, v[12], v[13], 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn flat_image(h: usize, w: usize, v: f64) -> ImageGrid {
        ImageGrid::new(h, w, vec![v; h * w], vec![1; h * w]).unwrap()
    }

    #[test]
    fn image_grid_validation() {
        assert!(ImageGrid::new(4, 4, vec![0.5; 16], vec![1; 16]).is_ok());
        assert!(ImageGrid::new(4, 4, vec![1.5; 16], vec![1; 16]).is_err());
        assert!(ImageGrid::new(4, 4, vec![0.5; 15], vec![1; 16]).is_err());
    }

    #[test]
    fn encode_shape_contract_and_determinism() {
        let mut rng = seeded(1, 0);
        let codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let img = flat_image(64, 64, 0.3);
        let a = codec.encode(&img).unwrap();
        let b = codec.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 8, 8]);
        assert!(a.all_finite());
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let mut rng = seeded(2, 0);
        let codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let img = flat_image(60, 64, 0.3);
        assert!(codec.encode(&img).is_err());
    }

    #[test]
    fn decode_clamps_and_is_deterministic() {
        let mut rng = seeded(3, 0);
        let codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let z = Tensor::filled(&[4, 8, 8], 3.0);
        let a = codec.decode(&z).unwrap();
        let b = codec.decode(&z).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (64, 64));
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(codec.decode(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn latent_scale_roundtrips_through_encode_decode() {
        let mut rng = seeded(4, 0);
        let mut codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let img = flat_image(64, 64, 0.4);
        let before = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        codec.set_latent_scale(2.5).unwrap();
        let after = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        for (a, b) in before.values().iter().zip(after.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(codec.set_latent_scale(0.0).is_err());
    }

    #[test]
    fn single_cell_latent_change_stays_in_receptive_field() {
        let mut rng = seeded(5, 0);
        let codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let z0 = Tensor::zeros(&[4, 8, 8]);
        let mut z1 = z0.clone();
        // bump one channel at latent site (2, 3)
        z1.data_mut()[2 * 8 + 3] += 1.0;
        let a = codec.decode(&z0).unwrap();
        let b = codec.decode(&z1).unwrap();
        // Receptive field: each decoder conv adds +/-1 at its stage; mapped to
        // pixels that is +/-(8 + 8 + 4 + 2 + 1) around the 8x8 block.
        let radius = 23usize;
        let (cy, cx) = (2usize * 8 + 4, 3usize * 8 + 4);
        for y in 0..64usize {
            for x in 0..64usize {
                let inside = y.abs_diff(cy) <= radius && x.abs_diff(cx) <= radius;
                if !inside {
                    let d = (a.values()[y * 64 + x] - b.values()[y * 64 + x]).abs();
                    assert!(d == 0.0, "leak at ({y},{x}): {d}");
                }
            }
        }
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn from_named_roundtrip() {
        let mut rng = seeded(6, 0);
        let codec = CodecParams::init(CodecConfig::default(), &mut rng);
        let named: Vec<(String, Tensor)> =
            codec.named().map(|(n, t)| (n.into(), t.clone())).collect();
        let rebuilt = CodecParams::from_named(CodecConfig::default(), named, 1.0).unwrap();
        assert_eq!(rebuilt, codec);
    }
}
