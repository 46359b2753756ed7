//! Run configuration: a JSON document with strict key checking, defaults for
//! every field, dotted-path overrides, and validation at load time.
//!
//! Every command writes its fully resolved configuration next to its outputs
//! so a run can be reproduced from that file alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use madad_core::codec::CodecConfig;
use madad_core::mask::MaskSampler;
use madad_core::nn::DenoiserConfig;
use madad_core::optim::AdamWConfig;
use madad_core::schedule::NoiseSchedule;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { t_steps: 10, beta_start: 0.05, beta_end: 0.60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub patch_sides: Vec<usize>,
    pub threshold: f64,
    /// Intersect the predicted mask with the foreground at inference.
    pub intersect_foreground: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            ratio_min: 0.0,
            ratio_max: 0.4,
            patch_sides: vec![1, 2, 4, 8],
            threshold: 0.5,
            intersect_foreground: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub latent_channels: usize,
    pub enc_widths: [usize; 2],
    pub dec_widths: [usize; 3],
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            latent_channels: 4,
            enc_widths: [16, 32],
            dec_widths: [32, 16, 16],
            epochs: 60,
            lr: 2e-3,
            weight_decay: 1e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub mid_width: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection { base_width: 32, mid_width: 64, time_embed_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the mask-head term in the training objective.
    pub lambda: f64,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Gradient-evaluation workers; 0 picks the machine's parallelism.
    /// Results are bit-identical for any value (fixed reduction order).
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 60,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 1e-4,
            lambda: 1.0,
            patience: 12,
            seed: 7,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub num_steps: usize,
    /// Stochasticity knob: 0 deterministic, 1 posterior-matching.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection { num_steps: 10, sigma: 0.5, seed: 3 }
    }
}

fn default_gamma() -> Option<f64> {
    Some(0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySection {
    /// Residual clamp; `null` disables clamping.
    #[serde(default = "default_gamma")]
    pub gamma: Option<f64>,
    pub gauss_sigma: f64,
    /// Default score source: image_diff, latent_diff or avg_mask.
    pub source: String,
}

impl Default for AnomalySection {
    fn default() -> Self {
        AnomalySection { gamma: Some(0.2), gauss_sigma: 2.0, source: "image_diff".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold_grid: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold_grid: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub base_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 512,
            n_val: 64,
            n_test_normal: 64,
            n_test_anomalous: 96,
            base_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub mask: MaskSection,
    pub codec: CodecSection,
    pub denoiser: DenoiserSection,
    pub train: TrainSection,
    pub sampling: SamplingSection,
    pub anomaly: AnomalySection,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Loads a config file (or defaults when `path` is `None`), applies
    /// `key.path=value` overrides, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut doc: serde_json::Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(CliError::io(p))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |msg: &str| Err(CliError::Config(msg.into()));
        if self.schedule.t_steps == 0 {
            return fail("schedule.t_steps must be positive");
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return fail("schedule betas must satisfy 0 < start <= end < 1");
        }
        if !(0.0..=1.0).contains(&self.mask.ratio_min)
            || !(self.mask.ratio_min..=1.0).contains(&self.mask.ratio_max)
        {
            return fail("mask ratio bounds must satisfy 0 <= min <= max <= 1");
        }
        if self.mask.patch_sides.is_empty()
            || self.mask.patch_sides.iter().any(|&s| s == 0 || s > self.latent_side())
        {
            return fail("mask.patch_sides must be non-empty with sides within the latent grid");
        }
        if !(self.mask.threshold > 0.0 && self.mask.threshold < 1.0) {
            return fail("mask.threshold must lie in (0, 1)");
        }
        if self.codec.latent_channels == 0 || self.codec.batch_size == 0 {
            return fail("codec.latent_channels and codec.batch_size must be positive");
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return fail("train.batch_size and train.epochs must be positive");
        }
        if self.train.lambda < 0.0 {
            return fail("train.lambda must be non-negative");
        }
        if self.sampling.num_steps == 0 || self.sampling.num_steps > self.schedule.t_steps {
            return fail("sampling.num_steps must lie in 1..=schedule.t_steps");
        }
        if !(0.0..=1.0).contains(&self.sampling.sigma) {
            return fail("sampling.sigma must lie in [0, 1]");
        }
        if let Some(g) = self.anomaly.gamma {
            if !(g > 0.0) {
                return fail("anomaly.gamma must be positive (or null to disable)");
            }
        }
        if !(self.anomaly.gauss_sigma >= 0.0) {
            return fail("anomaly.gauss_sigma must be non-negative");
        }
        if score_source(&self.anomaly.source).is_none() {
            return fail("anomaly.source must be image_diff, latent_diff or avg_mask");
        }
        if self.eval.threshold_grid < 2 {
            return fail("eval.threshold_grid needs at least two thresholds");
        }
        if self.data.n_train == 0
            || self.data.n_val == 0
            || self.data.n_test_normal == 0
            || self.data.n_test_anomalous == 0
        {
            return fail("every data split must be non-empty");
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        madad_core::phantom::IMAGE_SIZE
    }

    pub fn latent_side(&self) -> usize {
        self.image_size() / madad_core::codec::COMPRESSION
    }

    pub fn noise_schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(NoiseSchedule::linear(
            self.schedule.t_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?)
    }

    pub fn mask_sampler(&self) -> MaskSampler {
        MaskSampler {
            ratio_min: self.mask.ratio_min,
            ratio_max: self.mask.ratio_max,
            patch_sides: self.mask.patch_sides.clone(),
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            latent_channels: self.codec.latent_channels,
            enc_widths: self.codec.enc_widths,
            dec_widths: self.codec.dec_widths,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.codec.latent_channels,
            base_width: self.denoiser.base_width,
            mid_width: self.denoiser.mid_width,
            time_embed_dim: self.denoiser.time_embed_dim,
        }
    }

    pub fn codec_adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.codec.lr,
            weight_decay: self.codec.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn train_adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Stable fingerprint of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    /// Writes the fully resolved config next to a command's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> CliResult<PathBuf> {
        fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
        let path = out_dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }
}

/// Parses the `anomaly.source` key.
pub fn score_source(name: &str) -> Option<madad_core::anomaly::ScoreSource> {
    use madad_core::anomaly::ScoreSource;
    match name {
        "image_diff" => Some(ScoreSource::ImageDiff),
        "latent_diff" => Some(ScoreSource::LatentDiff),
        "avg_mask" => Some(ScoreSource::AvgMask),
        _ => None,
    }
}

/// Applies one `dotted.path=json_value` override to the config document.
/// Plain strings may omit quotes.
fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> CliResult<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return Err(CliError::Usage(format!(
            "override `{assignment}` must look like key.path=value"
        )));
    };
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(CliError::Usage(format!("override path `{path}` crosses a non-object")));
        }
        let map = cursor.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("path has at least one segment")
}

/// Output-root override: when `MADAD_OUT_ROOT` is set, relative output paths
/// resolve beneath it. This is the only environment variable consulted.
pub fn resolve_out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("MADAD_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}
