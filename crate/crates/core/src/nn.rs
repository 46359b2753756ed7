//! The dual-head denoiser: a small convolutional encoder/decoder trunk with
//! skip connections and sinusoidal time conditioning, ending in a clean-latent
//! head and a mask-logit head computed from the shared trunk.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::PatchMask;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Architecture hyper-parameters of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Latent channel count the network consumes and predicts.
    pub latent_channels: usize,
    /// Trunk width at full latent resolution.
    pub base_width: usize,
    /// Trunk width after downsampling.
    pub mid_width: usize,
    /// Dimension of the sinusoidal time features.
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_width: 32,
            mid_width: 64,
            time_embed_dim: 64,
        }
    }
}

/// Both predictions for one latent input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    /// Estimate of the clean latent, `[C,H,W]`.
    pub z0_pred: Tensor,
    /// Mask logits, `[1,H,W]`.
    pub mask_logits: Tensor,
}

/// Named parameter tensors of the denoiser, in a fixed order shared by the
/// optimizer, the checkpoint container and the taped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    cfg: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// (name, shape) pairs in parameter order for a given config.
fn layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.latent_channels;
    let w0 = cfg.base_width;
    let w1 = cfg.mid_width;
    let td = cfg.time_embed_dim;
    let conv = |name: &str, co: usize, ci: usize| {
        [
            (format!("{name}.weight"), vec![co, ci, 3, 3]),
            (format!("{name}.bias"), vec![co]),
        ]
    };
    let mut out = Vec::new();
    out.extend(conv("stem", w0, c));
    out.push(("time_proj.weight".into(), vec![w0, td]));
    out.push(("time_proj.bias".into(), vec![w0]));
    out.extend(conv("enc1", w0, w0));
    out.extend(conv("down1", w1, w0));
    out.extend(conv("enc2", w1, w1));
    out.extend(conv("down2", w1, w1));
    out.extend(conv("mid", w1, w1));
    out.extend(conv("up1", w1, w1));
    out.extend(conv("fuse1", w1, 2 * w1));
    out.extend(conv("up2", w0, w1));
    out.extend(conv("fuse2", w0, 2 * w0));
    out.extend(conv("head_clean", c, w0));
    out.extend(conv("head_mask", 1, w0));
    out
}

impl DenoiserParams {
    /// Random initialization: weights scaled by `sqrt(2 / fan_in)`, biases zero.
    pub fn init(cfg: DenoiserConfig, rng: &mut Prng) -> Self {
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
                let data: Vec<f64> = (0..n)
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
        DenoiserParams { cfg, names, tensors }
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint section).
    /// Order, names and shapes must match the config's layout exactly.
    pub fn from_named(cfg: DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let lay = layout(&cfg);
        if named.len() != lay.len() {
            return Err(Error::InvalidArgument("wrong number of denoiser tensors"));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, tensor), (want_name, want_shape)) in named.into_iter().zip(lay) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(Error::InvalidArgument("denoiser tensor name or shape mismatch"));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(DenoiserParams { cfg, names, tensors })
    }

    pub fn config(&self) -> &DenoiserConfig {
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

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Runs both heads on one latent without keeping the graph around.
    pub fn forward(&self, z_t: &Tensor, t: usize) -> Result<DenoiserOutput> {
        let mut tape = Tape::new();
        let taped = TapedDenoiser::new(&mut tape, self);
        let (z0_pred, mask_logits) = taped.forward(&mut tape, z_t, t)?;
        Ok(DenoiserOutput {
            z0_pred: tape.value(z0_pred).clone(),
            mask_logits: tape.value(mask_logits).clone(),
        })
    }
}

/// Sinusoidal features of a step index.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let half = (dim / 2).max(1);
    let mut data = vec![0.0; 2 * half];
    let tf = t as f64;
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000.0_f64).ln() * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        data[i] = (tf * freq).sin();
        data[half + i] = (tf * freq).cos();
    }
    Tensor::from_vec(&[2 * half], data).expect("embedding shape")
}

/// Denoiser parameters materialized as leaves on one tape, reusable across a
/// whole batch so gradients accumulate into a single set of nodes.
pub struct TapedDenoiser {
    cfg: DenoiserConfig,
    vars: Vec<Var>,
}

impl TapedDenoiser {
    pub fn new(tape: &mut Tape, model: &DenoiserParams) -> Self {
        let vars = model.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        TapedDenoiser { cfg: model.cfg.clone(), vars }
    }

    /// Parameter gradients after `tape.backward`, aligned with
    /// [`DenoiserParams::tensors`]. Missing gradients are zero-filled.
    pub fn gradients(&self, tape: &Tape, model: &DenoiserParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(model.tensors())
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// Records the full forward pass for one latent at step `t` and returns
    /// `(clean-latent prediction, mask logits)`.
    pub fn forward(&self, tape: &mut Tape, z_t: &Tensor, t: usize) -> Result<(Var, Var)> {
        let [c, h, w] = match *z_t.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::InvalidArgument("latent must be CxHxW")),
        };
        if c != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.latent_channels],
                got: vec![c],
            });
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("latent dims must be positive multiples of 4"));
        }
        let v = &self.vars;
        let x = tape.leaf(z_t.clone());
        let temb = tape.leaf(time_embedding(t, self.cfg.time_embed_dim));

        // stem + time conditioning
        let h0 = tape.conv2d(x, v[0], v[1], 1, 1)?;
        let te = tape.linear(temb, v[2], v[3])?;
        let h0 = tape.add_channel_bias(h0, te)?;
        let h0 = tape.silu(h0);

        // encoder with two downsampling stages
        let s1 = tape.conv2d(h0, v[4], v[5], 1, 1)?;
        let s1 = tape.silu(s1);
        let d1 = tape.conv2d(s1, v[6], v[7], 2, 1)?;
        let d1 = tape.silu(d1);
        let s2 = tape.conv2d(d1, v[8], v[9], 1, 1)?;
        let s2 = tape.silu(s2);
        let d2 = tape.conv2d(s2, v[10], v[11], 2, 1)?;
        let d2 = tape.silu(d2);

        let mid = tape.conv2d(d2, v[12], v[13], 1, 1)?;
        let mid = tape.silu(mid);

        // decoder with skip connections
        let u1 = tape.upsample2x(mid)?;
        let u1 = tape.conv2d(u1, v[14], v[15], 1, 1)?;
        let u1 = tape.silu(u1);
        let u1 = tape.concat_channels(u1, s2)?;
        let u1 = tape.conv2d(u1, v[16], v[17], 1, 1)?;
        let u1 = tape.silu(u1);

        let u2 = tape.upsample2x(u1)?;
        let u2 = tape.conv2d(u2, v[18], v[19], 1, 1)?;
        let u2 = tape.silu(u2);
        let u2 = tape.concat_channels(u2, s1)?;
        let u2 = tape.conv2d(u2, v[20], v[21], 1, 1)?;
        let trunk = tape.silu(u2);

        let z0_pred = tape.conv2d(trunk, v[22], v[23], 1, 1)?;
        let mask_logits = tape.conv2d(trunk, v[24], v[25], 1, 1)?;
        Ok((z0_pred, mask_logits))
    }
}

/// Records the dual training objective on `tape`: mean squared error of the
/// clean-latent head plus `lambda` times the binary cross entropy of the mask
/// head against the mask actually used in the forward process.
pub fn loss_on_tape(
    tape: &mut Tape,
    taped: &TapedDenoiser,
    z0: &Tensor,
    z_t: &Tensor,
    t: usize,
    mask: &PatchMask,
    lambda: f64,
) -> Result<Var> {
    z0.expect_same_shape(z_t)?;
    let (z0_pred, mask_logits) = taped.forward(tape, z_t, t)?;
    let mask_target = Tensor::from_vec(
        &[1, mask.height(), mask.width()],
        mask.grid().iter().map(|&v| f64::from(v)).collect(),
    )?;
    let mse = tape.mse_mean(z0_pred, z0)?;
    let bce = tape.bce_logits_mean(mask_logits, &mask_target)?;
    let weighted = tape.scale_scalar(bce, lambda)?;
    tape.add_scalars(mse, weighted)
}

/// Evaluates the training objective for one sample and returns the scalar.
pub fn training_loss(
    model: &DenoiserParams,
    z0: &Tensor,
    z_t: &Tensor,
    t: usize,
    mask: &PatchMask,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let taped = TapedDenoiser::new(&mut tape, model);
    let loss = loss_on_tape(&mut tape, &taped, z0, z_t, t, mask, lambda)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logistic;
    use crate::rng::seeded;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig { latent_channels: 2, base_width: 4, mid_width: 6, time_embed_dim: 8 }
    }

    fn random_latent(shape: &[usize], rng: &mut Prng) -> Tensor {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn tiny_config_stays_under_budget() {
        let mut rng = seeded(1, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        assert!(model.param_count() <= 5000, "{} params", model.param_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = seeded(2, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let z = random_latent(&[2, 8, 8], &mut rng);
        let a = model.forward(&z, 3).unwrap();
        let b = model.forward(&z, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_heads_zero_both_outputs() {
        let mut rng = seeded(3, 0);
        let mut model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let head_names: Vec<usize> = model
            .named()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with("head_"))
            .map(|(i, _)| i)
            .collect();
        for i in head_names {
            let t = &mut model.tensors_mut()[i];
            *t = Tensor::zeros(t.shape());
        }
        let z = random_latent(&[2, 8, 8], &mut rng);
        let out = model.forward(&z, 5).unwrap();
        assert!(out.z0_pred.data().iter().all(|&v| v == 0.0));
        assert!(out.mask_logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_trunk_feeds_both_heads() {
        let mut rng = seeded(4, 0);
        let mut model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let z = random_latent(&[2, 8, 8], &mut rng);
        let base = model.forward(&z, 2).unwrap();
        // Perturb one stem weight; both heads must react.
        model.tensors_mut()[0].data_mut()[0] += 0.25;
        let bumped = model.forward(&z, 2).unwrap();
        assert_ne!(base.z0_pred, bumped.z0_pred);
        assert_ne!(base.mask_logits, bumped.mask_logits);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let mut rng = seeded(5, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        assert!(model.forward(&Tensor::zeros(&[3, 8, 8]), 1).is_err());
        assert!(model.forward(&Tensor::zeros(&[2, 6, 6]), 1).is_err());
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        // Independent element-by-element recomputation of both loss terms.
        let mut rng = seeded(6, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let z0 = random_latent(&[2, 4, 4], &mut rng);
        let zt = random_latent(&[2, 4, 4], &mut rng);
        let grid: alloc::vec::Vec<u8> = (0..16).map(|i| u8::from(i % 2 == 0)).collect();
        let mask = PatchMask::from_grid(grid, 4, 4).unwrap();
        let lambda = 0.7;
        let loss = training_loss(&model, &z0, &zt, 2, &mask, lambda).unwrap();

        let out = model.forward(&zt, 2).unwrap();
        let mut mse = 0.0;
        for (p, t) in out.z0_pred.data().iter().zip(z0.data()) {
            mse += (p - t) * (p - t);
        }
        mse /= 32.0;
        let mut bce = 0.0;
        for (&x, &m) in out.mask_logits.data().iter().zip(mask.grid()) {
            let p = logistic(x);
            let y = f64::from(m);
            bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        bce /= 16.0;
        assert!((loss - (mse + lambda * bce)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_isolates_latent_error() {
        let mut rng = seeded(7, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let z0 = random_latent(&[2, 4, 4], &mut rng);
        let zt = random_latent(&[2, 4, 4], &mut rng);
        let mask = PatchMask::zeros(4, 4);
        let loss = training_loss(&model, &z0, &zt, 1, &mask, 0.0).unwrap();
        let out = model.forward(&zt, 1).unwrap();
        let mse: f64 = out
            .z0_pred
            .data()
            .iter()
            .zip(z0.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 32.0;
        assert!((loss - mse).abs() < 1e-14);
    }

    #[test]
    fn loss_is_nonnegative_and_near_zero_when_cheating() {
        // A configuration that reproduces z0 exactly and saturates the mask
        // head toward the truth drives the objective to (almost) zero.
        let mut rng = seeded(8, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let z0 = random_latent(&[2, 4, 4], &mut rng);
        let mask = PatchMask::zeros(4, 4);
        let loss = training_loss(&model, &z0, &z0, 1, &mask, 1.0).unwrap();
        assert!(loss >= 0.0);

        // Direct check of the objective at its minimum.
        let out_perfect = DenoiserOutput {
            z0_pred: z0.clone(),
            mask_logits: Tensor::filled(&[1, 4, 4], -40.0),
        };
        let mut tape = Tape::new();
        let zp = tape.leaf(out_perfect.z0_pred.clone());
        let ml = tape.leaf(out_perfect.mask_logits.clone());
        let mse = tape.mse_mean(zp, &z0).unwrap();
        let target = Tensor::zeros(&[1, 4, 4]);
        let bce = tape.bce_logits_mean(ml, &target).unwrap();
        let weighted = tape.scale_scalar(bce, 1.0).unwrap();
        let total = tape.add_scalars(mse, weighted).unwrap();
        assert!(tape.value(total).data()[0] < 1e-12);
    }

    #[test]
    fn time_embedding_shape_and_determinism() {
        let a = time_embedding(3, 64);
        let b = time_embedding(3, 64);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[64]);
        assert_ne!(time_embedding(4, 64), a);
    }

    #[test]
    fn from_named_roundtrip_and_validation() {
        let mut rng = seeded(9, 0);
        let model = DenoiserParams::init(tiny_cfg(), &mut rng);
        let named: Vec<(String, Tensor)> =
            model.named().map(|(n, t)| (n.into(), t.clone())).collect();
        let rebuilt = DenoiserParams::from_named(tiny_cfg(), named.clone()).unwrap();
        assert_eq!(rebuilt, model);

        let mut broken = named;
        broken.swap(0, 2);
        assert!(DenoiserParams::from_named(tiny_cfg(), broken).is_err());
    }
}
