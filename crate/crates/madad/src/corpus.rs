//! On-disk corpus layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<id>.pgm          8-bit preview
//! <root>/<split>/<id>.raw          lossless f64 intensities
//! <root>/<split>/<id>_fg.pgm       foreground mask
//! <root>/<split>/<id>_lesion.pgm   lesion ground truth (test splits)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use madad_core::codec::ImageGrid;
use madad_core::phantom::{
    self, CorpusManifest, LesionType, ManifestEntry, PhantomSample, SizeClass,
};

use crate::error::{CliError, CliResult};
use crate::pgm;

pub const SPLITS: [&str; 4] = ["train", "val", "test_normal", "test_anomalous"];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryDoc {
    id: String,
    seed: u64,
    size_class: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lesion_type: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    base_seed: u64,
    image_size: usize,
    train: Vec<EntryDoc>,
    val: Vec<EntryDoc>,
    test_normal: Vec<EntryDoc>,
    test_anomalous: Vec<EntryDoc>,
}

fn to_doc(entry: &ManifestEntry) -> EntryDoc {
    EntryDoc {
        id: entry.id.clone(),
        seed: entry.seed,
        size_class: entry.size_class.name().to_string(),
        lesion_type: entry.lesion_type.map(|t| t.name().to_string()),
    }
}

fn from_doc(doc: &EntryDoc) -> CliResult<ManifestEntry> {
    Ok(ManifestEntry {
        id: doc.id.clone(),
        seed: doc.seed,
        size_class: SizeClass::from_name(&doc.size_class)?,
        lesion_type: doc.lesion_type.as_deref().map(LesionType::from_name).transpose()?,
    })
}

pub fn write_manifest(manifest: &CorpusManifest, root: &Path) -> CliResult<()> {
    let doc = ManifestDoc {
        base_seed: manifest.base_seed,
        image_size: phantom::IMAGE_SIZE,
        train: manifest.train.iter().map(to_doc).collect(),
        val: manifest.val.iter().map(to_doc).collect(),
        test_normal: manifest.test_normal.iter().map(to_doc).collect(),
        test_anomalous: manifest.test_anomalous.iter().map(to_doc).collect(),
    };
    fs::create_dir_all(root).map_err(CliError::io(root))?;
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    fs::write(&path, text).map_err(CliError::io(&path))
}

pub fn read_manifest(root: &Path) -> CliResult<CorpusManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let convert = |entries: &[EntryDoc]| -> CliResult<Vec<ManifestEntry>> {
        entries.iter().map(from_doc).collect()
    };
    Ok(CorpusManifest {
        base_seed: doc.base_seed,
        train: convert(&doc.train)?,
        val: convert(&doc.val)?,
        test_normal: convert(&doc.test_normal)?,
        test_anomalous: convert(&doc.test_anomalous)?,
    })
}

pub fn split_entries<'a>(manifest: &'a CorpusManifest, split: &str) -> CliResult<&'a [ManifestEntry]> {
    match split {
        "train" => Ok(&manifest.train),
        "val" => Ok(&manifest.val),
        "test_normal" => Ok(&manifest.test_normal),
        "test_anomalous" => Ok(&manifest.test_anomalous),
        _ => Err(CliError::Usage(format!("unknown split `{split}`"))),
    }
}

fn write_sample(dir: &Path, sample: &PhantomSample, entry: &ManifestEntry) -> CliResult<()> {
    let n = phantom::IMAGE_SIZE;
    let base = dir.join(&entry.id);
    pgm::write_pgm(&with_ext(&base, "pgm"), sample.image.values(), n, n)?;
    pgm::write_raw(&with_ext(&base, "raw"), sample.image.values())?;
    pgm::write_mask_pgm(&suffixed(&base, "_fg.pgm"), sample.image.foreground(), n, n)?;
    if entry.id.starts_with("test") {
        pgm::write_mask_pgm(&suffixed(&base, "_lesion.pgm"), &sample.lesion_mask, n, n)?;
    }
    Ok(())
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_os_string();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut p = base.as_os_str().to_os_string();
    p.push(suffix);
    PathBuf::from(p)
}

/// Materializes the whole corpus under `root`. Regenerating with the same
/// manifest produces byte-identical files.
pub fn write_corpus(manifest: &CorpusManifest, root: &Path) -> CliResult<()> {
    write_manifest(manifest, root)?;
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        for entry in split_entries(manifest, split)? {
            let sample = phantom::generate(entry)?;
            write_sample(&dir, &sample, entry)?;
        }
    }
    Ok(())
}

/// A split member loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub image: ImageGrid,
    pub lesion_mask: Vec<u8>,
}

/// Loads a split using the lossless raw intensities.
pub fn load_split(root: &Path, manifest: &CorpusManifest, split: &str) -> CliResult<Vec<LoadedSample>> {
    let n = phantom::IMAGE_SIZE;
    let dir = root.join(split);
    let mut out = Vec::new();
    for entry in split_entries(manifest, split)? {
        let base = dir.join(&entry.id);
        let values = pgm::read_raw(&with_ext(&base, "raw"))?;
        let (fg, fh, fw) = pgm::read_mask_pgm(&suffixed(&base, "_fg.pgm"))?;
        if values.len() != n * n || fh != n || fw != n {
            return Err(CliError::Format {
                path: with_ext(&base, "raw"),
                reason: "sample has unexpected dimensions".into(),
            });
        }
        let image = ImageGrid::new(n, n, values, fg)?;
        let lesion_path = suffixed(&base, "_lesion.pgm");
        let lesion_mask = if lesion_path.exists() {
            pgm::read_mask_pgm(&lesion_path)?.0
        } else {
            vec![0; n * n]
        };
        out.push(LoadedSample { entry: entry.clone(), image, lesion_mask });
    }
    Ok(out)
}
