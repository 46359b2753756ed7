//! The checkpoint container: magic bytes `MADAD1`, the realized schedule
//! arrays, then tag-labelled sections of named parameter tensors (name
//! length, name, shape rank, dims, 64-bit little-endian values), and a
//! trailing opaque blob for trainer state. Round-trips are bit-exact.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use madad_core::schedule::NoiseSchedule;
use madad_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 6] = b"MADAD1";

pub const SECTION_CODEC: &str = "codec";
pub const SECTION_DENOISER: &str = "denoiser";
pub const SECTION_TRAINER: &str = "trainer";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub sections: Vec<Section>,
    /// Opaque trainer state; empty when the checkpoint is inference-only.
    pub extra: Vec<u8>,
}

impl Checkpoint {
    pub fn section(&self, tag: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.tag == tag)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_f64s(&mut buf, self.schedule.betas());
        write_f64s(&mut buf, self.schedule.alphas());
        write_f64s(&mut buf, self.schedule.alpha_bars_ext());
        write_u64(&mut buf, self.sections.len() as u64);
        for section in &self.sections {
            write_str(&mut buf, &section.tag);
            write_u64(&mut buf, section.tensors.len() as u64);
            for (name, tensor) in &section.tensors {
                write_str(&mut buf, name);
                write_u64(&mut buf, tensor.shape().len() as u64);
                for &d in tensor.shape() {
                    write_u64(&mut buf, d as u64);
                }
                for &v in tensor.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        write_u64(&mut buf, self.extra.len() as u64);
        buf.extend_from_slice(&self.extra);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(CliError::io(parent))?;
            }
        }
        fs::write(path, buf).map_err(CliError::io(path))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        let bad = |reason: &str| CliError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut cur = Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 6];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let beta = read_f64s(&mut cur).ok_or_else(|| bad("truncated beta array"))?;
        let alpha = read_f64s(&mut cur).ok_or_else(|| bad("truncated alpha array"))?;
        let alpha_bar = read_f64s(&mut cur).ok_or_else(|| bad("truncated alpha_bar array"))?;
        let schedule = NoiseSchedule::from_arrays(beta, alpha, alpha_bar)
            .map_err(|e| bad(&format!("inconsistent schedule: {e}")))?;
        let n_sections = read_u64(&mut cur).ok_or_else(|| bad("truncated section count"))?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let tag = read_str(&mut cur).ok_or_else(|| bad("truncated section tag"))?;
            let n_tensors = read_u64(&mut cur).ok_or_else(|| bad("truncated tensor count"))?;
            let mut tensors = Vec::with_capacity(n_tensors as usize);
            for _ in 0..n_tensors {
                let name = read_str(&mut cur).ok_or_else(|| bad("truncated tensor name"))?;
                let rank = read_u64(&mut cur).ok_or_else(|| bad("truncated rank"))? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(read_u64(&mut cur).ok_or_else(|| bad("truncated dims"))? as usize);
                }
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                let mut chunk = [0u8; 8];
                for _ in 0..n {
                    cur.read_exact(&mut chunk).map_err(|_| bad("truncated tensor values"))?;
                    data.push(f64::from_le_bytes(chunk));
                }
                let tensor = Tensor::from_vec(&shape, data)
                    .map_err(|e| bad(&format!("bad tensor: {e}")))?;
                tensors.push((name, tensor));
            }
            sections.push(Section { tag, tensors });
        }
        let extra_len = read_u64(&mut cur).ok_or_else(|| bad("truncated extra length"))? as usize;
        let mut extra = vec![0u8; extra_len];
        cur.read_exact(&mut extra).map_err(|_| bad("truncated extra blob"))?;
        let mut rest = Vec::new();
        cur.read_to_end(&mut rest).expect("cursor read");
        if !rest.is_empty() {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { schedule, sections, extra })
    }
}

/// Serialized training-loop state stored in the extra blob.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub epoch: u64,
    pub opt_step: u64,
    pub incidents: u64,
    pub best_val: f64,
    pub epochs_since_best: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl TrainerState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&self.incidents.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        out.extend_from_slice(&self.epochs_since_best.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 96 {
            return None;
        }
        let u64_at =
            |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("fixed layout"));
        Some(TrainerState {
            epoch: u64_at(0),
            opt_step: u64_at(8),
            incidents: u64_at(16),
            best_val: f64::from_le_bytes(bytes[24..32].try_into().expect("fixed layout")),
            epochs_since_best: u64_at(32),
            rng_seed: bytes[40..72].try_into().expect("fixed layout"),
            rng_stream: u64_at(72),
            rng_word_pos: u128::from_le_bytes(bytes[80..96].try_into().expect("fixed layout")),
        })
    }
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    write_u64(buf, values.len() as u64);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Option<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn read_str(cur: &mut Cursor<&[u8]>) -> Option<String> {
    let len = read_u64(cur)? as usize;
    let mut b = vec![0u8; len];
    cur.read_exact(&mut b).ok()?;
    String::from_utf8(b).ok()
}

fn read_f64s(cur: &mut Cursor<&[u8]>) -> Option<Vec<f64>> {
    let len = read_u64(cur)? as usize;
    let mut out = Vec::with_capacity(len);
    let mut chunk = [0u8; 8];
    for _ in 0..len {
        cur.read_exact(&mut chunk).ok()?;
        out.push(f64::from_le_bytes(chunk));
    }
    Some(out)
}
