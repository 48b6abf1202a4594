//! Image and label files, synthetic datasets and manifests.

pub mod codec;
pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsio;
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub use synth::{generate, generate_sample, SynthConfig, SynthSample};

/// Manifest file name inside a dataset directory.
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W`, values in `[0, 255]` before mean subtraction.
    pub image: Tensor,
    /// Single `H×W` map.
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Parses `id<TAB>image<TAB>label` lines; paths are relative to `base`.
/// Blank lines are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let &[id, image, label] = fields.as_slice() else {
            return Err(Error::Manifest {
                line: line_no,
                detail: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let entry = ManifestEntry {
            id: id.to_string(),
            image: base.join(image),
            label: base.join(label),
        };
        for path in [&entry.image, &entry.label] {
            if !path.is_file() {
                return Err(Error::Manifest {
                    line: line_no,
                    detail: format!("{} does not exist", path.display()),
                });
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = fsio::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to(), "manifest is not UTF-8"))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Manifest path for a dataset given either its directory or the file.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST)
    } else {
        data.to_path_buf()
    }
}

pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let image = codec::decode_ppm(&fsio::read(&entry.image)?)?;
    let labels = codec::decode_pgm(&fsio::read(&entry.label)?)?;
    let [_, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape(
            "load_sample",
            format!(
                "{}: image is {}×{} but labels are {}×{}",
                entry.id,
                h,
                w,
                labels.height(),
                labels.width()
            ),
        ));
    }
    Ok(Sample {
        id: entry.id.clone(),
        image,
        labels,
    })
}

/// Loads every sample listed by the manifest in `data` (directory or file).
pub fn load_dataset(data: &Path) -> Result<Vec<Sample>> {
    load_manifest(&manifest_path(data))?
        .iter()
        .map(load_sample)
        .collect()
}

/// Writes `images/<id>.ppm`, `labels/<id>.pgm` and the manifest under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fsio::create_dir_all(&dir.join("images"))?;
    fsio::create_dir_all(&dir.join("labels"))?;
    let mut manifest = String::new();
    for s in samples {
        let image = format!("images/{}.ppm", s.id);
        let label = format!("labels/{}.pgm", s.id);
        fsio::write_atomic(&dir.join(&image), &codec::encode_ppm(&s.image)?)?;
        fsio::write_atomic(&dir.join(&label), &codec::encode_pgm(&s.labels)?)?;
        let _ = writeln!(manifest, "{}\t{}\t{}", s.id, image, label);
    }
    fsio::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Generates the synthetic dataset described by `cfg` into `dir`.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = generate(cfg)?
        .into_iter()
        .map(|s| Sample {
            id: s.id,
            image: s.image,
            labels: s.labels,
        })
        .collect();
    write_dataset(dir, &samples)?;
    Ok(samples)
}
