//! End-to-end orchestration: codec and denoiser training with early stopping
//! and resumable state, per-image inference, evaluation, and the ablation
//! sweeps. The CLI commands and the acceptance suite are thin wrappers over
//! these functions.

use std::path::Path;

use madad_core::anomaly::{avg_mask_map, image_diff_map, latent_diff_map, AnomalyMap, ScoreSource};
use madad_core::codec::{CodecParams, ImageGrid};
use madad_core::diffusion::{reverse_sample, ReverseTrace, SamplerConfig};
use madad_core::eval::{evaluate_corpus, mask_auroc, threshold_grid, EvalReport};
use madad_core::mask::downsample_foreground;
use madad_core::nn::DenoiserParams;
use madad_core::optim::AdamW;
use madad_core::phantom::SizeClass;
use madad_core::rng::{seeded, GaussianNoise, Prng};
use madad_core::schedule::NoiseSchedule;
use madad_core::tensor::Tensor;
use madad_core::training::{
    self, codec_case_grads, codec_train_epoch_with, codec_val_mae, denoiser_case_grads,
    denoiser_train_epoch_with, denoiser_val_loss, latent_std, mask_head_probe, CaseGrads,
    DenoiserTrainConfig, LatentSample, PreparedCase,
};

use crate::checkpoint::{
    Checkpoint, Section, TrainerState, SECTION_CODEC, SECTION_DENOISER, SECTION_TRAINER,
};
use crate::config::{score_source, RunConfig};
use crate::corpus::LoadedSample;
use crate::error::{CliError, CliResult};

/// Stream ids keeping the independent random sequences apart.
const STREAM_CODEC_INIT: u64 = 11;
const STREAM_CODEC_TRAIN: u64 = 12;
const STREAM_DENOISER_INIT: u64 = 21;
const STREAM_DENOISER_TRAIN: u64 = 22;
const STREAM_VAL: u64 = 31;
const STREAM_PROBE: u64 = 32;

/// Everything inference needs.
pub struct TrainedModels {
    pub schedule: NoiseSchedule,
    pub codec: CodecParams,
    pub denoiser: DenoiserParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_loss_log(rows: &[EpochRow], path: &Path) -> CliResult<()> {
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for r in rows {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    std::fs::write(path, csv).map_err(CliError::io(path))
}

// ------------------------------------------------------------- executors ---

/// Worker threads for gradient evaluation; 0 picks the available parallelism
/// (capped). The reduction order is fixed by case index, so any worker count
/// yields bit-identical results.
fn worker_count(cfg: &RunConfig) -> usize {
    match cfg.train.threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8),
        n => n,
    }
}

fn eval_chunked<T, F>(items: &[T], workers: usize, f: F) -> madad_core::Result<Vec<CaseGrads>>
where
    T: Sync,
    F: Fn(&T) -> madad_core::Result<CaseGrads> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let chunk_results: madad_core::Result<Vec<Vec<CaseGrads>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|slice| s.spawn(|| slice.iter().map(&f).collect::<madad_core::Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    Ok(chunk_results?.into_iter().flatten().collect())
}

// ---------------------------------------------------------------- codec ---

/// Trains the codec on normal images, then folds the corpus latent scale into
/// it. Returns the model and the per-epoch log (val column carries MAE).
pub fn train_codec(
    cfg: &RunConfig,
    train_images: &[ImageGrid],
    val_images: &[ImageGrid],
    mut progress: impl FnMut(&EpochRow),
) -> CliResult<(CodecParams, Vec<EpochRow>)> {
    let mut init_rng = seeded(cfg.train.seed, STREAM_CODEC_INIT);
    let mut model = CodecParams::init(cfg.codec_config(), &mut init_rng);
    let mut opt = AdamW::new(cfg.codec_adamw(), model.tensors());
    let mut rng = seeded(cfg.train.seed, STREAM_CODEC_TRAIN);
    let workers = worker_count(cfg);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.codec.epochs {
        let train_loss = codec_train_epoch_with(
            &mut model,
            &mut opt,
            train_images,
            cfg.codec.batch_size,
            &mut rng,
            |m, targets| eval_chunked(targets, workers, |t| codec_case_grads(m, t)),
        )
        .map_err(|e| CliError::Runtime(training::step_diagnostics(epoch, 0, &e)))?;
        let val_loss = codec_val_mae(&model, val_images)?;
        let row = EpochRow { epoch, train_loss, val_loss };
        progress(&row);
        rows.push(row);
    }
    let scale = latent_std(&model, train_images)?;
    model.set_latent_scale(scale)?;
    Ok((model, rows))
}

/// Encodes a split into unit-scale latents with latent-resolution foregrounds.
pub fn encode_samples(codec: &CodecParams, samples: &[LoadedSample]) -> CliResult<Vec<LatentSample>> {
    samples
        .iter()
        .map(|s| {
            let z0 = codec.encode(&s.image)?;
            let fg = downsample_foreground(
                s.image.foreground(),
                s.image.height(),
                s.image.width(),
                madad_core::codec::COMPRESSION,
            )?;
            Ok(LatentSample { z0, foreground: fg })
        })
        .collect()
}

// ------------------------------------------------------------- denoiser ---

/// Denoiser training loop state; checkpointable mid-run.
pub struct DenoiserTrainer {
    pub model: DenoiserParams,
    pub best_model: DenoiserParams,
    opt: AdamW,
    rng: Prng,
    epoch: usize,
    best_val: f64,
    epochs_since_best: usize,
}

impl DenoiserTrainer {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut init_rng = seeded(cfg.train.seed, STREAM_DENOISER_INIT);
        let model = DenoiserParams::init(cfg.denoiser_config(), &mut init_rng);
        let opt = AdamW::new(cfg.train_adamw(), model.tensors());
        DenoiserTrainer {
            best_model: model.clone(),
            model,
            opt,
            rng: seeded(cfg.train.seed, STREAM_DENOISER_TRAIN),
            epoch: 0,
            best_val: f64::INFINITY,
            epochs_since_best: 0,
        }
    }

    /// Restores a trainer from a checkpoint with a trainer section.
    pub fn resume(cfg: &RunConfig, ck: &Checkpoint) -> CliResult<Self> {
        let model = denoiser_from_checkpoint(cfg, ck)?;
        let state_bytes = &ck.extra;
        let state = TrainerState::from_bytes(state_bytes).ok_or_else(|| {
            CliError::Runtime("checkpoint lacks resumable trainer state".into())
        })?;
        let trainer_section = ck
            .section(SECTION_TRAINER)
            .ok_or_else(|| CliError::Runtime("checkpoint lacks the trainer section".into()))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, tensor) in &trainer_section.tensors {
            if let Some(rest) = name.strip_prefix("m.") {
                debug_assert!(!rest.is_empty());
                m.push(tensor.data().to_vec());
            } else if name.starts_with("v.") {
                v.push(tensor.data().to_vec());
            }
        }
        if m.len() != model.tensors().len() || v.len() != model.tensors().len() {
            return Err(CliError::Runtime("trainer moments do not match the model".into()));
        }
        let mut opt = AdamW::new(cfg.train_adamw(), model.tensors());
        opt.restore(m, v, state.opt_step, state.incidents);
        let rng = madad_core::rng::restore(state.rng_seed, state.rng_stream, state.rng_word_pos);
        Ok(DenoiserTrainer {
            best_model: model.clone(),
            model,
            opt,
            rng,
            epoch: state.epoch as usize,
            best_val: state.best_val,
            epochs_since_best: state.epochs_since_best as usize,
        })
    }

    /// Runs epochs until `cfg.train.epochs` or until the patience budget is
    /// spent, appending to `rows`.
    pub fn run(
        &mut self,
        cfg: &RunConfig,
        data: &[LatentSample],
        val: &[LatentSample],
        schedule: &NoiseSchedule,
        rows: &mut Vec<EpochRow>,
        mut progress: impl FnMut(&EpochRow),
    ) -> CliResult<()> {
        let tc = DenoiserTrainConfig {
            batch_size: cfg.train.batch_size,
            lambda: cfg.train.lambda,
            mask_sampler: cfg.mask_sampler(),
        };
        let workers = worker_count(cfg);
        while self.epoch < cfg.train.epochs {
            if cfg.train.patience > 0 && self.epochs_since_best >= cfg.train.patience {
                break;
            }
            let epoch = self.epoch + 1;
            let train_loss = denoiser_train_epoch_with(
                &mut self.model,
                &mut self.opt,
                data,
                schedule,
                &tc,
                &mut self.rng,
                |m, lambda, cases: &[PreparedCase]| {
                    eval_chunked(cases, workers, |c| denoiser_case_grads(m, c, lambda))
                },
            )
            .map_err(|e| CliError::Runtime(training::step_diagnostics(epoch, 0, &e)))?;
            let val_loss =
                denoiser_val_loss(&self.model, val, schedule, &tc, seeded(cfg.train.seed, STREAM_VAL))?;
            self.epoch = epoch;
            if val_loss < self.best_val {
                self.best_val = val_loss;
                self.best_model = self.model.clone();
                self.epochs_since_best = 0;
            } else {
                self.epochs_since_best += 1;
            }
            let row = EpochRow { epoch, train_loss, val_loss };
            progress(&row);
            rows.push(row);
        }
        Ok(())
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch as u64,
            opt_step: self.opt.step_count(),
            incidents: self.opt.incidents(),
            best_val: self.best_val,
            epochs_since_best: self.epochs_since_best as u64,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Full checkpoint including trainer state, for resuming.
    pub fn to_checkpoint(&self, schedule: &NoiseSchedule, codec: &CodecParams) -> Checkpoint {
        let mut ck = inference_checkpoint(schedule, codec, &self.model);
        let (m, v) = self.opt.moments();
        let mut tensors = Vec::new();
        for ((name, param), buf) in self.model.named().zip(m) {
            let t = Tensor::from_vec(param.shape(), buf.clone()).expect("moment shape");
            tensors.push((format!("m.{name}"), t));
        }
        for ((name, param), buf) in self.model.named().zip(v) {
            let t = Tensor::from_vec(param.shape(), buf.clone()).expect("moment shape");
            tensors.push((format!("v.{name}"), t));
        }
        ck.sections.push(Section { tag: SECTION_TRAINER.into(), tensors });
        ck.extra = self.state().to_bytes();
        ck
    }
}

/// Inference-only checkpoint: schedule plus codec and denoiser sections.
pub fn inference_checkpoint(
    schedule: &NoiseSchedule,
    codec: &CodecParams,
    denoiser: &DenoiserParams,
) -> Checkpoint {
    let mut codec_tensors: Vec<(String, Tensor)> =
        codec.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    codec_tensors.push(("latent_scale".into(), Tensor::scalar(codec.latent_scale())));
    let denoiser_tensors = denoiser.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Checkpoint {
        schedule: schedule.clone(),
        sections: vec![
            Section { tag: SECTION_CODEC.into(), tensors: codec_tensors },
            Section { tag: SECTION_DENOISER.into(), tensors: denoiser_tensors },
        ],
        extra: Vec::new(),
    }
}

/// Codec-only checkpoint (after `train-codec`).
pub fn codec_checkpoint(schedule: &NoiseSchedule, codec: &CodecParams) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> =
        codec.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    tensors.push(("latent_scale".into(), Tensor::scalar(codec.latent_scale())));
    Checkpoint {
        schedule: schedule.clone(),
        sections: vec![Section { tag: SECTION_CODEC.into(), tensors }],
        extra: Vec::new(),
    }
}

pub fn codec_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> CliResult<CodecParams> {
    let section = ck
        .section(SECTION_CODEC)
        .ok_or_else(|| CliError::Runtime("checkpoint lacks a codec section".into()))?;
    let mut named = section.tensors.clone();
    let scale = match named.last() {
        Some((name, t)) if name == "latent_scale" && t.len() == 1 => {
            let s = t.data()[0];
            named.pop();
            s
        }
        _ => return Err(CliError::Runtime("codec section lacks latent_scale".into())),
    };
    Ok(CodecParams::from_named(cfg.codec_config(), named, scale)?)
}

pub fn denoiser_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> CliResult<DenoiserParams> {
    let section = ck
        .section(SECTION_DENOISER)
        .ok_or_else(|| CliError::Runtime("checkpoint lacks a denoiser section".into()))?;
    Ok(DenoiserParams::from_named(cfg.denoiser_config(), section.tensors.clone())?)
}

/// Loads both models, checking the checkpoint schedule against the config.
/// With `defer_to_checkpoint` the checkpoint schedule wins instead.
pub fn models_from_checkpoint(
    cfg: &RunConfig,
    ck: &Checkpoint,
    defer_to_checkpoint: bool,
) -> CliResult<TrainedModels> {
    let config_schedule = cfg.noise_schedule()?;
    let schedule = if ck.schedule == config_schedule {
        config_schedule
    } else if defer_to_checkpoint {
        ck.schedule.clone()
    } else {
        return Err(CliError::Config(
            "checkpoint schedule differs from the configuration; align them or pass --defer-schedule"
                .into(),
        ));
    };
    Ok(TrainedModels {
        schedule,
        codec: codec_from_checkpoint(cfg, ck)?,
        denoiser: denoiser_from_checkpoint(cfg, ck)?,
    })
}

// ------------------------------------------------------------ inference ---

/// Everything produced for one input image.
pub struct InferenceOutputs {
    pub id: String,
    pub size_class: SizeClass,
    pub recon: ImageGrid,
    pub trace: ReverseTrace,
    pub maps: Vec<AnomalyMap>,
}

fn id_stream(id: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Runs the masked reverse process on one image and builds anomaly maps for
/// the requested sources. Deterministic given the config seed and the id.
pub fn infer_sample(
    cfg: &RunConfig,
    models: &TrainedModels,
    sample: &LoadedSample,
    sources: &[ScoreSource],
    record_previews: bool,
) -> CliResult<InferenceOutputs> {
    let z_start = models.codec.encode(&sample.image)?;
    let latent_fg = downsample_foreground(
        sample.image.foreground(),
        sample.image.height(),
        sample.image.width(),
        madad_core::codec::COMPRESSION,
    )?;
    let sampler_cfg = SamplerConfig {
        num_steps: cfg.sampling.num_steps,
        sigma: cfg.sampling.sigma,
        mask_threshold: cfg.mask.threshold,
        record_previews,
    };
    let mut rng = seeded(cfg.sampling.seed, id_stream(&sample.entry.id));
    let trace = reverse_sample(
        &models.denoiser,
        Some(&models.codec),
        &z_start,
        &models.schedule,
        &sampler_cfg,
        cfg.mask.intersect_foreground.then_some(latent_fg.as_slice()),
        &mut GaussianNoise(&mut rng),
    )?;
    let recon = models.codec.decode(&trace.final_z0)?;
    let mut maps = Vec::with_capacity(sources.len());
    for &source in sources {
        maps.push(match source {
            ScoreSource::ImageDiff => {
                image_diff_map(&sample.image, &recon, cfg.anomaly.gamma, cfg.anomaly.gauss_sigma)?
            }
            ScoreSource::LatentDiff => latent_diff_map(&z_start, &trace.final_z0)?,
            ScoreSource::AvgMask => avg_mask_map(&trace)?,
        });
    }
    Ok(InferenceOutputs {
        id: sample.entry.id.clone(),
        size_class: sample.entry.size_class,
        recon,
        trace,
        maps,
    })
}

/// Default source list for a config (single source unless sweeping).
pub fn configured_source(cfg: &RunConfig) -> CliResult<ScoreSource> {
    score_source(&cfg.anomaly.source)
        .ok_or_else(|| CliError::Config("unknown anomaly source".into()))
}

// ----------------------------------------------------------- evaluation ---

/// Mask-head AUROC on held-out normals with known injected masks.
pub fn mask_auroc_on_val(
    cfg: &RunConfig,
    models: &TrainedModels,
    val: &[LatentSample],
) -> CliResult<Option<f64>> {
    let (probs, labels) = mask_head_probe(
        &models.denoiser,
        val,
        &models.schedule,
        &cfg.mask_sampler(),
        seeded(cfg.train.seed, STREAM_PROBE),
    )?;
    Ok(mask_auroc(&probs, &labels)?)
}

/// Scores one batch of anomaly maps against lesion truths.
pub fn evaluate_maps(
    cfg: &RunConfig,
    ids: &[String],
    size_classes: &[SizeClass],
    maps: &[&AnomalyMap],
    truths: &[&[u8]],
    auroc: Option<f64>,
) -> CliResult<EvalReport> {
    let grid = threshold_grid(cfg.eval.threshold_grid);
    let scores: Vec<&[f64]> = maps.iter().map(|m| m.scores()).collect();
    Ok(evaluate_corpus(ids, size_classes, &scores, truths, &grid, auroc, cfg.fingerprint())?)
}

// -------------------------------------------------------------- ablation ---

/// One sweep row: which knob, its setting, and the resulting report.
pub struct AblationRow {
    pub sweep: &'static str,
    pub setting: String,
    pub report: EvalReport,
}

/// Runs the score-source sweep, the sampler-steps sweep and the clamp sweep,
/// reusing inference outputs where settings coincide.
pub fn run_ablation(
    cfg: &RunConfig,
    models: &TrainedModels,
    samples: &[LoadedSample],
) -> CliResult<Vec<AblationRow>> {
    let ids: Vec<String> = samples.iter().map(|s| s.entry.id.clone()).collect();
    let classes: Vec<SizeClass> = samples.iter().map(|s| s.entry.size_class).collect();
    let truths: Vec<&[u8]> = samples.iter().map(|s| s.lesion_mask.as_slice()).collect();
    let mut rows = Vec::new();

    // full-step inference once, all three sources
    let mut full: Vec<InferenceOutputs> = Vec::with_capacity(samples.len());
    for s in samples {
        full.push(infer_sample(cfg, models, s, &ScoreSource::ALL, false)?);
    }
    for (i, source) in ScoreSource::ALL.iter().enumerate() {
        let maps: Vec<&AnomalyMap> = full.iter().map(|o| &o.maps[i]).collect();
        let report = evaluate_maps(cfg, &ids, &classes, &maps, &truths, None)?;
        rows.push(AblationRow { sweep: "source", setting: source.name().into(), report });
    }

    // sampler-steps sweep on the image-difference source
    for steps in [2usize, 5, 10] {
        let report = if steps == cfg.sampling.num_steps {
            let maps: Vec<&AnomalyMap> = full.iter().map(|o| &o.maps[0]).collect();
            evaluate_maps(cfg, &ids, &classes, &maps, &truths, None)?
        } else {
            let mut sub_cfg = cfg.clone();
            sub_cfg.sampling.num_steps = steps;
            let mut maps = Vec::with_capacity(samples.len());
            for s in samples {
                let out = infer_sample(&sub_cfg, models, s, &[ScoreSource::ImageDiff], false)?;
                maps.push(out.maps.into_iter().next().expect("one map"));
            }
            let refs: Vec<&AnomalyMap> = maps.iter().collect();
            evaluate_maps(cfg, &ids, &classes, &refs, &truths, None)?
        };
        rows.push(AblationRow { sweep: "ddim_steps", setting: steps.to_string(), report });
    }

    // clamp sweep recomputed from the full-step reconstructions
    for gamma in [Some(0.2), Some(0.4), None] {
        let mut maps = Vec::with_capacity(samples.len());
        for (s, out) in samples.iter().zip(&full) {
            maps.push(image_diff_map(&s.image, &out.recon, gamma, cfg.anomaly.gauss_sigma)?);
        }
        let refs: Vec<&AnomalyMap> = maps.iter().collect();
        let report = evaluate_maps(cfg, &ids, &classes, &refs, &truths, None)?;
        let setting = gamma.map_or_else(|| "off".to_string(), |g| g.to_string());
        rows.push(AblationRow { sweep: "gamma", setting, report });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use madad_core::phantom;

    fn tiny_cfg() -> RunConfig {
        RunConfig::load(
            None,
            &[
                "codec.latent_channels=2".into(),
                "codec.enc_widths=[4,6]".into(),
                "codec.dec_widths=[6,4,4]".into(),
                "codec.epochs=2".into(),
                "denoiser.base_width=4".into(),
                "denoiser.mid_width=6".into(),
                "denoiser.time_embed_dim=8".into(),
                "train.epochs=2".into(),
                "train.batch_size=4".into(),
                "data.n_train=6".into(),
                "data.n_val=3".into(),
                "data.n_test_normal=2".into(),
                "data.n_test_anomalous=3".into(),
            ],
        )
        .unwrap()
    }

    fn loaded(entry: &phantom::ManifestEntry) -> LoadedSample {
        let s = phantom::generate(entry).unwrap();
        LoadedSample { entry: entry.clone(), image: s.image, lesion_mask: s.lesion_mask }
    }

    #[test]
    fn tiny_end_to_end_pipeline() {
        let cfg = tiny_cfg();
        let manifest = phantom::make_splits(6, 3, 2, 3, 5).unwrap();
        let train_imgs: Vec<ImageGrid> =
            manifest.train.iter().map(|e| phantom::generate(e).unwrap().image).collect();
        let val_imgs: Vec<ImageGrid> =
            manifest.val.iter().map(|e| phantom::generate(e).unwrap().image).collect();

        let (codec, codec_rows) = train_codec(&cfg, &train_imgs, &val_imgs, |_| {}).unwrap();
        assert_eq!(codec_rows.len(), 2);
        assert!(codec.latent_scale() > 0.0);

        let schedule = cfg.noise_schedule().unwrap();
        let train_samples: Vec<LoadedSample> = manifest.train.iter().map(loaded).collect();
        let val_samples: Vec<LoadedSample> = manifest.val.iter().map(loaded).collect();
        let latents = encode_samples(&codec, &train_samples).unwrap();
        let val_latents = encode_samples(&codec, &val_samples).unwrap();

        let before = training::param_checksum(codec.tensors().iter());
        let mut trainer = DenoiserTrainer::new(&cfg);
        let mut rows = Vec::new();
        trainer.run(&cfg, &latents, &val_latents, &schedule, &mut rows, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        // codec stayed frozen while the denoiser trained
        assert_eq!(before, training::param_checksum(codec.tensors().iter()));

        let models = TrainedModels { schedule, codec, denoiser: trainer.best_model.clone() };
        let test: Vec<LoadedSample> = manifest.test_anomalous.iter().map(loaded).collect();
        let out = infer_sample(&cfg, &models, &test[0], &ScoreSource::ALL, false).unwrap();
        assert_eq!(out.maps.len(), 3);
        assert_eq!(out.trace.steps.len(), cfg.sampling.num_steps);
        for m in &out.maps {
            assert!(m.scores().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        // determinism: the same sample infers identically
        let again = infer_sample(&cfg, &models, &test[0], &ScoreSource::ALL, false).unwrap();
        assert_eq!(out.maps[0].scores(), again.maps[0].scores());

        let auroc = mask_auroc_on_val(&cfg, &models, &val_latents).unwrap();
        assert!(auroc.is_some());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_models_and_resume_state() {
        let cfg = tiny_cfg();
        let manifest = phantom::make_splits(6, 3, 2, 3, 9).unwrap();
        let train_imgs: Vec<ImageGrid> =
            manifest.train.iter().map(|e| phantom::generate(e).unwrap().image).collect();
        let (codec, _) = train_codec(&cfg, &train_imgs, &train_imgs[..2], |_| {}).unwrap();
        let schedule = cfg.noise_schedule().unwrap();
        let train_samples: Vec<LoadedSample> = manifest.train.iter().map(loaded).collect();
        let latents = encode_samples(&codec, &train_samples).unwrap();

        let mut trainer = DenoiserTrainer::new(&cfg);
        let mut rows = Vec::new();
        trainer.run(&cfg, &latents, &latents[..2], &schedule, &mut rows, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        trainer.to_checkpoint(&schedule, &codec).write(&path).unwrap();
        let ck = Checkpoint::read(&path).unwrap();

        let codec_back = codec_from_checkpoint(&cfg, &ck).unwrap();
        assert_eq!(codec_back, codec);
        let denoiser_back = denoiser_from_checkpoint(&cfg, &ck).unwrap();
        assert_eq!(denoiser_back, trainer.model);

        let resumed = DenoiserTrainer::resume(&cfg, &ck).unwrap();
        assert_eq!(resumed.state(), trainer.state());

        // schedule mismatch is an explicit error unless deferred
        let mut other = cfg.clone();
        other.schedule.beta_end = 0.5;
        assert!(models_from_checkpoint(&other, &ck, false).is_err());
        let deferred = models_from_checkpoint(&other, &ck, true).unwrap();
        assert_eq!(deferred.schedule, schedule);
    }
}
