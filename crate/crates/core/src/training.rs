//! Epoch-level training for the codec and the denoiser.
//!
//! An epoch shuffles the data, draws every stochastic training case up front
//! from the caller's generator, evaluates per-case gradients through a
//! pluggable executor, and reduces them in case order. The reduction order is
//! fixed, so a serial executor and a data-parallel one produce bit-identical
//! parameter trajectories; the std companion crate provides the threaded
//! executor.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::codec::{CodecParams, ImageGrid, TapedCodec};
use crate::diffusion::masked_forward;
use crate::error::{Error, Result};
use crate::mask::{sample_random_mask, MaskSampler, PatchMask};
use crate::nn::{loss_on_tape, DenoiserParams, TapedDenoiser};
use crate::optim::AdamW;
use crate::rng::{GaussianNoise, Prng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Loss value and per-parameter gradients for one training case.
pub type CaseGrads = (f64, Vec<Vec<f64>>);

/// One fully drawn denoiser training case.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub z0: Tensor,
    pub z_t: Tensor,
    pub t: usize,
    pub mask: PatchMask,
}

/// Gradients of the dual objective for a single case.
pub fn denoiser_case_grads(
    model: &DenoiserParams,
    case: &PreparedCase,
    lambda: f64,
) -> Result<CaseGrads> {
    let mut tape = Tape::new();
    let taped = TapedDenoiser::new(&mut tape, model);
    let loss = loss_on_tape(&mut tape, &taped, &case.z0, &case.z_t, case.t, &case.mask, lambda)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok((value, taped.gradients(&tape, model)))
}

/// Gradients of the reconstruction objective for a single image.
pub fn codec_case_grads(model: &CodecParams, target: &Tensor) -> Result<CaseGrads> {
    let mut tape = Tape::new();
    let taped = TapedCodec::new(&mut tape, model);
    let x = tape.leaf(target.clone());
    let z = taped.encode(&mut tape, x)?;
    let y = taped.decode(&mut tape, z)?;
    let loss = tape.mse_mean(y, target)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    Ok((value, taped.gradients(&tape, model)))
}

/// Sums per-case results in case order, scales to the batch mean, and applies
/// one optimizer step. Returns the mean batch loss.
fn reduce_and_step(
    opt: &mut AdamW,
    params: &mut [Tensor],
    results: Vec<CaseGrads>,
) -> Result<f64> {
    let n = results.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch"));
    }
    let inv = 1.0 / n as f64;
    let mut iter = results.into_iter();
    let (first_loss, mut acc) = iter.next().expect("non-empty batch");
    let mut loss_sum = first_loss;
    for (loss, grads) in iter {
        loss_sum += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (av, gv) in a.iter_mut().zip(g) {
                *av += gv;
            }
        }
    }
    for a in &mut acc {
        for v in a.iter_mut() {
            *v *= inv;
        }
    }
    let mean = loss_sum * inv;
    if !mean.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    opt.step(params, &acc);
    Ok(mean)
}

/// Runs one reconstruction-training epoch over `images` and returns the mean
/// batch loss. `eval` maps a slice of batch targets to per-case gradients in
/// the same order.
pub fn codec_train_epoch_with<E>(
    model: &mut CodecParams,
    opt: &mut AdamW,
    images: &[ImageGrid],
    batch_size: usize,
    rng: &mut Prng,
    mut eval: E,
) -> Result<f64>
where
    E: FnMut(&CodecParams, &[Tensor]) -> Result<Vec<CaseGrads>>,
{
    if images.is_empty() {
        return Err(Error::InvalidArgument("codec training needs a non-empty corpus"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let targets: Vec<Tensor> = chunk.iter().map(|&i| images[i].to_tensor()).collect();
        let results = eval(model, &targets)?;
        if results.len() != targets.len() {
            return Err(Error::InvalidArgument("executor returned a wrong-sized batch"));
        }
        total += reduce_and_step(opt, model.tensors_mut(), results)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Serial variant of [`codec_train_epoch_with`].
pub fn codec_train_epoch(
    model: &mut CodecParams,
    opt: &mut AdamW,
    images: &[ImageGrid],
    batch_size: usize,
    rng: &mut Prng,
) -> Result<f64> {
    codec_train_epoch_with(model, opt, images, batch_size, rng, |m, targets| {
        targets.iter().map(|t| codec_case_grads(m, t)).collect()
    })
}

/// Mean absolute reconstruction error over a held-out set, with decode
/// clamping applied.
pub fn codec_val_mae(model: &CodecParams, images: &[ImageGrid]) -> Result<f64> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    if images.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let recon = model.decode(&model.encode(img)?)?;
        for (a, b) in img.values().iter().zip(recon.values()) {
            total += (a - b).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Latent standard deviation over a corpus (around the mean), used to
/// normalize latents after codec training.
pub fn latent_std(model: &CodecParams, images: &[ImageGrid]) -> Result<f64> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    if images.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty"));
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut n = 0usize;
    for img in images {
        let z = model.encode(img)?;
        for &v in z.data() {
            sum += v;
            sumsq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = sumsq / n as f64 - mean * mean;
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::Degenerate("latent variance is not positive"));
    }
    Ok(var.sqrt())
}

/// Everything the denoiser trainer needs per sample: the encoded latent and
/// the latent-resolution foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z0: Tensor,
    pub foreground: Vec<u8>,
}

/// Hyper-parameters of one denoiser training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTrainConfig {
    pub batch_size: usize,
    pub lambda: f64,
    pub mask_sampler: MaskSampler,
}

/// Draws the step, the mask and the noise behind one training case.
fn draw_training_case(
    sample: &LatentSample,
    schedule: &NoiseSchedule,
    sampler: &MaskSampler,
    rng: &mut Prng,
) -> Result<PreparedCase> {
    let [_, h, w] = match *sample.z0.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::InvalidArgument("latent must be CxHxW")),
    };
    let t = rng.random_range(1..=schedule.t_steps());
    let mask = sample_random_mask(h, w, &sample.foreground, sampler, rng)?;
    let fwd = masked_forward(&sample.z0, t, &mask, schedule, &mut GaussianNoise(rng))?;
    Ok(PreparedCase { z0: sample.z0.clone(), z_t: fwd.z_t, t, mask })
}

/// One denoiser training epoch; returns the mean batch loss. Cases are drawn
/// sequentially from `rng`, so the draw sequence is independent of the
/// executor. On a non-finite loss the epoch aborts with diagnostics.
pub fn denoiser_train_epoch_with<E>(
    model: &mut DenoiserParams,
    opt: &mut AdamW,
    data: &[LatentSample],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut Prng,
    mut eval: E,
) -> Result<f64>
where
    E: FnMut(&DenoiserParams, f64, &[PreparedCase]) -> Result<Vec<CaseGrads>>,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("denoiser training needs data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let cases: Vec<PreparedCase> = chunk
            .iter()
            .map(|&idx| draw_training_case(&data[idx], schedule, &cfg.mask_sampler, rng))
            .collect::<Result<_>>()?;
        let results = eval(model, cfg.lambda, &cases)?;
        if results.len() != cases.len() {
            return Err(Error::InvalidArgument("executor returned a wrong-sized batch"));
        }
        total += reduce_and_step(opt, model.tensors_mut(), results)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Serial variant of [`denoiser_train_epoch_with`].
pub fn denoiser_train_epoch(
    model: &mut DenoiserParams,
    opt: &mut AdamW,
    data: &[LatentSample],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut Prng,
) -> Result<f64> {
    denoiser_train_epoch_with(model, opt, data, schedule, cfg, rng, |m, lambda, cases| {
        cases.iter().map(|c| denoiser_case_grads(m, c, lambda)).collect()
    })
}

/// Validation loss on held-out normals with a freshly seeded draw sequence,
/// so successive epochs are compared on identical cases.
pub fn denoiser_val_loss(
    model: &DenoiserParams,
    data: &[LatentSample],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    mut rng: Prng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty"));
    }
    let mut total = 0.0;
    for sample in data {
        let case = draw_training_case(sample, schedule, &cfg.mask_sampler, &mut rng)?;
        total +=
            crate::nn::training_loss(model, &case.z0, &case.z_t, case.t, &case.mask, cfg.lambda)?;
    }
    Ok(total / data.len() as f64)
}

/// Mask-head probe: distorts each held-out normal with a known mask at a
/// random step and collects `(probability, truth)` per latent cell.
pub fn mask_head_probe(
    model: &DenoiserParams,
    data: &[LatentSample],
    schedule: &NoiseSchedule,
    sampler: &MaskSampler,
    mut rng: Prng,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for sample in data {
        let case = draw_training_case(sample, schedule, sampler, &mut rng)?;
        let out = model.forward(&case.z_t, case.t)?;
        for (&logit, &m) in out.mask_logits.data().iter().zip(case.mask.grid()) {
            probs.push(crate::math::logistic(logit));
            labels.push(m);
        }
    }
    Ok((probs, labels))
}

/// FNV-1a over parameter bytes; used to verify the codec stays frozen while
/// the denoiser trains.
pub fn param_checksum<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &v in t.data() {
            for b in v.to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    hash
}

/// Formats step diagnostics for surfaced training failures.
pub fn step_diagnostics(epoch: usize, batch: usize, err: &Error) -> String {
    format!("epoch {epoch}, batch {batch}: {err}")
}
