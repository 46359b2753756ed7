//! Command-line front end: dataset generation, codec and diffusion training,
//! inference, evaluation and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use madad::checkpoint::Checkpoint;
use madad::config::{resolve_out_path, RunConfig};
use madad::corpus;
use madad::error::{CliError, CliResult};
use madad::pgm;
use madad::pipeline::{self, AblationRow, DenoiserTrainer};
use madad::report;
use madad_core::anomaly::ScoreSource;
use madad_core::codec::ImageGrid;
use madad_core::phantom;

#[derive(Parser)]
#[command(
    name = "madad",
    about = "Masked latent diffusion for unsupervised anomaly detection on synthetic phantoms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set sampling.sigma=0.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus on disk.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus root directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent codec on the training split.
    TrainCodec {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus root (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and the loss log.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the denoiser (training the codec inline when none is given).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Existing codec checkpoint; trained inline when omitted.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Resume denoiser training from a full checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference: reconstructions, anomaly maps, optional traces.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Corpus split to process.
        #[arg(long, default_value = "test_anomalous")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dump per-step predicted masks and decoded previews.
        #[arg(long)]
        trace: bool,
        /// Emit anomaly maps for all three score sources.
        #[arg(long)]
        ablate_sources: bool,
        /// Accept the checkpoint schedule when it differs from the config.
        #[arg(long)]
        defer_schedule: bool,
    },
    /// Evaluate anomaly maps against ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with inference outputs (the infer --out-dir).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_anomalous")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint for the mask-head quality probe (optional).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        defer_schedule: bool,
    },
    /// Sweep score sources, sampler steps and the residual clamp.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_anomalous")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        defer_schedule: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config.load()?, &resolve_out_path(&out)),
        Command::TrainCodec { config, data, out_dir } => {
            cmd_train_codec(&config.load()?, &data, &resolve_out_path(&out_dir))
        }
        Command::Train { config, data, out_dir, codec, resume } => cmd_train(
            &config.load()?,
            &data,
            &resolve_out_path(&out_dir),
            codec.as_deref(),
            resume.as_deref(),
        ),
        Command::Infer {
            config,
            checkpoint,
            data,
            split,
            out_dir,
            trace,
            ablate_sources,
            defer_schedule,
        } => cmd_infer(
            &config.load()?,
            &checkpoint,
            &data,
            &split,
            &resolve_out_path(&out_dir),
            trace,
            ablate_sources,
            defer_schedule,
        ),
        Command::Eval { config, pred, data, split, out_dir, checkpoint, defer_schedule } => {
            cmd_eval(
                &config.load()?,
                &pred,
                &data,
                &split,
                &resolve_out_path(&out_dir),
                checkpoint.as_deref(),
                defer_schedule,
            )
        }
        Command::Ablate { config, checkpoint, data, split, out_dir, defer_schedule } => cmd_ablate(
            &config.load()?,
            &checkpoint,
            &data,
            &split,
            &resolve_out_path(&out_dir),
            defer_schedule,
        ),
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let manifest = phantom::make_splits(
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test_normal,
        cfg.data.n_test_anomalous,
        cfg.data.base_seed,
    )?;
    corpus::write_corpus(&manifest, out)?;
    cfg.write_resolved(out)?;
    println!(
        "wrote corpus to {}: {} train / {} val / {} test-normal / {} test-anomalous",
        out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test_normal.len(),
        manifest.test_anomalous.len()
    );
    Ok(())
}

fn load_images(data: &Path, split: &str) -> CliResult<Vec<ImageGrid>> {
    let manifest = corpus::read_manifest(data)?;
    Ok(corpus::load_split(data, &manifest, split)?.into_iter().map(|s| s.image).collect())
}

fn cmd_train_codec(cfg: &RunConfig, data: &Path, out_dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    cfg.write_resolved(out_dir)?;
    let train = load_images(data, "train")?;
    let val = load_images(data, "val")?;
    let (codec, rows) = pipeline::train_codec(cfg, &train, &val, |row| {
        println!("codec epoch {}: train mse {:.6}, val mae {:.6}", row.epoch, row.train_loss, row.val_loss);
    })?;
    pipeline::write_loss_log(&rows, &out_dir.join("codec_log.csv"))?;
    let schedule = cfg.noise_schedule()?;
    pipeline::codec_checkpoint(&schedule, &codec).write(&out_dir.join("codec.ckpt"))?;
    println!("codec checkpoint: {}", out_dir.join("codec.ckpt").display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    codec_ckpt: Option<&Path>,
    resume: Option<&Path>,
) -> CliResult<()> {
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    cfg.write_resolved(out_dir)?;
    let manifest = corpus::read_manifest(data)?;
    let train_samples = corpus::load_split(data, &manifest, "train")?;
    let val_samples = corpus::load_split(data, &manifest, "val")?;
    let schedule = cfg.noise_schedule()?;

    let codec = match (codec_ckpt, resume) {
        (_, Some(resume_path)) => {
            let ck = Checkpoint::read(resume_path)?;
            pipeline::codec_from_checkpoint(cfg, &ck)?
        }
        (Some(path), None) => {
            let ck = Checkpoint::read(path)?;
            if ck.schedule != schedule {
                return Err(CliError::Config(
                    "codec checkpoint schedule differs from the configuration".into(),
                ));
            }
            pipeline::codec_from_checkpoint(cfg, &ck)?
        }
        (None, None) => {
            let train_imgs: Vec<ImageGrid> =
                train_samples.iter().map(|s| s.image.clone()).collect();
            let val_imgs: Vec<ImageGrid> = val_samples.iter().map(|s| s.image.clone()).collect();
            let (codec, rows) = pipeline::train_codec(cfg, &train_imgs, &val_imgs, |row| {
                println!(
                    "codec epoch {}: train mse {:.6}, val mae {:.6}",
                    row.epoch, row.train_loss, row.val_loss
                );
            })?;
            pipeline::write_loss_log(&rows, &out_dir.join("codec_log.csv"))?;
            pipeline::codec_checkpoint(&schedule, &codec).write(&out_dir.join("codec.ckpt"))?;
            codec
        }
    };

    let codec_checksum = madad_core::training::param_checksum(codec.tensors().iter());
    let latents = pipeline::encode_samples(&codec, &train_samples)?;
    let val_latents = pipeline::encode_samples(&codec, &val_samples)?;

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.schedule != schedule {
                return Err(CliError::Config(
                    "resume checkpoint schedule differs from the configuration".into(),
                ));
            }
            DenoiserTrainer::resume(cfg, &ck)?
        }
        None => DenoiserTrainer::new(cfg),
    };
    let mut rows = Vec::new();
    trainer.run(cfg, &latents, &val_latents, &schedule, &mut rows, |row| {
        println!(
            "denoiser epoch {}: train loss {:.6}, val loss {:.6}",
            row.epoch, row.train_loss, row.val_loss
        );
    })?;
    if codec_checksum != madad_core::training::param_checksum(codec.tensors().iter()) {
        return Err(CliError::Runtime("codec changed while the denoiser trained".into()));
    }
    pipeline::write_loss_log(&rows, &out_dir.join("train_log.csv"))?;
    trainer.to_checkpoint(&schedule, &codec).write(&out_dir.join("model.ckpt"))?;
    pipeline::inference_checkpoint(&schedule, &codec, &trainer.best_model)
        .write(&out_dir.join("best.ckpt"))?;
    println!(
        "checkpoints: {} (resumable) and {} (best validation)",
        out_dir.join("model.ckpt").display(),
        out_dir.join("best.ckpt").display()
    );
    Ok(())
}

fn write_png(path: &Path, values: &[f64], h: usize, w: usize) -> CliResult<()> {
    let buf: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| CliError::Runtime(format!("png write {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out_dir: &Path,
    trace: bool,
    ablate_sources: bool,
    defer_schedule: bool,
) -> CliResult<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let models = pipeline::models_from_checkpoint(cfg, &ck, defer_schedule)?;
    let manifest = corpus::read_manifest(data)?;
    let samples = corpus::load_split(data, &manifest, split)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    cfg.write_resolved(out_dir)?;

    let sources: Vec<ScoreSource> = if ablate_sources {
        ScoreSource::ALL.to_vec()
    } else {
        vec![pipeline::configured_source(cfg)?]
    };
    let recon_dir = out_dir.join("recon");
    let maps_dir = out_dir.join("maps");
    std::fs::create_dir_all(&recon_dir).map_err(CliError::io(&recon_dir))?;
    std::fs::create_dir_all(&maps_dir).map_err(CliError::io(&maps_dir))?;

    let n = phantom::IMAGE_SIZE;
    for sample in &samples {
        let out = pipeline::infer_sample(cfg, &models, sample, &sources, trace)?;
        write_png(&recon_dir.join(format!("{}.png", out.id)), out.recon.values(), n, n)?;
        pgm::write_raw(&recon_dir.join(format!("{}.raw", out.id)), out.recon.values())?;
        for map in &out.maps {
            let stem = format!("{}_{}", out.id, map.source.name());
            write_png(&maps_dir.join(format!("{stem}.png")), map.scores(), n, n)?;
            pgm::write_raw(&maps_dir.join(format!("{stem}.raw")), map.scores())?;
        }
        if trace {
            let tdir = out_dir.join("trace").join(&out.id);
            std::fs::create_dir_all(&tdir).map_err(CliError::io(&tdir))?;
            for step in &out.trace.steps {
                let lh = step.mask_probs.shape()[1];
                let lw = step.mask_probs.shape()[2];
                write_png(
                    &tdir.join(format!("step_{:02}_mask.png", step.t)),
                    step.mask_probs.data(),
                    lh,
                    lw,
                )?;
                if let Some(preview) = &step.decoded_preview {
                    write_png(
                        &tdir.join(format!("step_{:02}_preview.png", step.t)),
                        preview.data(),
                        n,
                        n,
                    )?;
                }
            }
        }
    }
    println!("inference outputs for {} images under {}", samples.len(), out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    pred: &Path,
    data: &Path,
    split: &str,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    defer_schedule: bool,
) -> CliResult<()> {
    let manifest = corpus::read_manifest(data)?;
    let samples = corpus::load_split(data, &manifest, split)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    cfg.write_resolved(out_dir)?;

    let source = pipeline::configured_source(cfg)?;
    let mut ids = Vec::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    let mut truths: Vec<&[u8]> = Vec::new();
    for sample in &samples {
        let path = pred.join("maps").join(format!("{}_{}.raw", sample.entry.id, source.name()));
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "prediction for id `{}` not found at {}",
                sample.entry.id,
                path.display()
            )));
        }
        ids.push(sample.entry.id.clone());
        classes.push(sample.entry.size_class);
        scores.push(pgm::read_raw(&path)?);
        truths.push(sample.lesion_mask.as_slice());
    }

    let auroc = match checkpoint {
        Some(ckpt) => {
            let ck = Checkpoint::read(ckpt)?;
            let models = pipeline::models_from_checkpoint(cfg, &ck, defer_schedule)?;
            let val_samples = corpus::load_split(data, &manifest, "val")?;
            let val_latents = pipeline::encode_samples(&models.codec, &val_samples)?;
            pipeline::mask_auroc_on_val(cfg, &models, &val_latents)?
        }
        None => None,
    };

    let grid = madad_core::eval::threshold_grid(cfg.eval.threshold_grid);
    let score_refs: Vec<&[f64]> = scores.iter().map(Vec::as_slice).collect();
    let report = madad_core::eval::evaluate_corpus(
        &ids,
        &classes,
        &score_refs,
        &truths,
        &grid,
        auroc,
        cfg.fingerprint(),
    )?;
    report::write_report(&report, out_dir)?;
    println!(
        "evaluated {} images: mean max-dice {:.4}, global max-dice {:.4}",
        ids.len(),
        report.mean_max_dice(),
        report.global_max_dice
    );
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out_dir: &Path,
    defer_schedule: bool,
) -> CliResult<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let models = pipeline::models_from_checkpoint(cfg, &ck, defer_schedule)?;
    let manifest = corpus::read_manifest(data)?;
    let samples = corpus::load_split(data, &manifest, split)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    cfg.write_resolved(out_dir)?;

    let rows = pipeline::run_ablation(cfg, &models, &samples)?;
    let mut combined = String::from("sweep,setting,mean_max_dice,global_max_dice\n");
    let mut summary_rows = Vec::new();
    for AblationRow { sweep, setting, report } in &rows {
        let dir = out_dir.join(sweep).join(setting.replace('.', "_"));
        report::write_report(report, &dir)?;
        combined.push_str(&format!(
            "{sweep},{setting},{},{}\n",
            report.mean_max_dice(),
            report.global_max_dice
        ));
        summary_rows.push(serde_json::json!({
            "sweep": sweep,
            "setting": setting,
            "mean_max_dice": report.mean_max_dice(),
            "global_max_dice": report.global_max_dice,
        }));
        println!(
            "{sweep}={setting}: mean max-dice {:.4}, global {:.4}",
            report.mean_max_dice(),
            report.global_max_dice
        );
    }
    let csv_path = out_dir.join("summary.csv");
    std::fs::write(&csv_path, combined).map_err(CliError::io(&csv_path))?;
    let json_path = out_dir.join("summary.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&serde_json::json!({ "rows": summary_rows }))
            .expect("summary serializes"),
    )
    .map_err(CliError::io(&json_path))?;
    Ok(())
}
