//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>.pixels.f64le   row-major pixels, 64-bit little-endian floats
//! <dir>/<split>.labels.txt     one integer per line, -1 for hidden/unknown
//! ```
//!
//! Splits are `source`, `target_train` and `target_test`. A `-1` label reads
//! back as `Hidden` in `target_train` and `Unknown` in `target_test`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Domain, Image, Label, LabeledImage};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub domain: Domain,
    pub count: usize,
    pub pixels_file: String,
    pub labels_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub seed: u64,
    pub image_side: usize,
    pub splits: Vec<SplitEntry>,
}

fn splits(ds: &Dataset) -> [(&'static str, Domain, &[LabeledImage]); 3] {
    [
        ("source", Domain::Source, &ds.source),
        ("target_train", Domain::Target, &ds.target_train),
        ("target_test", Domain::Target, &ds.target_test),
    ]
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, domain, items) in splits(ds) {
        let pixels_file = format!("{name}.pixels.f64le");
        let labels_file = format!("{name}.labels.txt");
        let mut bytes = Vec::with_capacity(items.len() * ds.spec.image_side.pow(2) * 8);
        let mut labels = String::new();
        for item in items {
            for p in item.image.pixels() {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            labels.push_str(&item.label.to_code().to_string());
            labels.push('\n');
        }
        fs::write(dir.join(&pixels_file), bytes)?;
        fs::write(dir.join(&labels_file), labels)?;
        entries.push(SplitEntry {
            name: name.to_string(),
            domain,
            count: items.len(),
            pixels_file,
            labels_file,
        });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
        image_side: ds.spec.image_side,
        splits: entries,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_split(dir: &Path, entry: &SplitEntry, side: usize) -> Result<Vec<LabeledImage>> {
    let pixels_path = dir.join(&entry.pixels_file);
    let labels_path = dir.join(&entry.labels_file);
    let bytes = fs::read(&pixels_path)?;
    let per_image = side * side;
    if bytes.len() != entry.count * per_image * 8 {
        return Err(corrupt(
            &pixels_path,
            format!("expected {} bytes, found {}", entry.count * per_image * 8, bytes.len()),
        ));
    }
    let labels_text = fs::read_to_string(&labels_path)?;
    let codes = labels_text
        .lines()
        .map(|l| l.trim().parse::<i64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| corrupt(&labels_path, e.to_string()))?;
    if codes.len() != entry.count {
        return Err(corrupt(
            &labels_path,
            format!("expected {} labels, found {}", entry.count, codes.len()),
        ));
    }

    let negative = if entry.name == "target_test" {
        Label::Unknown
    } else {
        Label::Hidden
    };
    bytes
        .chunks_exact(per_image * 8)
        .zip(codes)
        .map(|(chunk, code)| {
            let pixels = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let label = match code {
                -1 => negative,
                c if c >= 0 => Label::Class(c as usize),
                c => return Err(corrupt(&labels_path, format!("invalid label {c}"))),
            };
            Ok(LabeledImage::new(Image::new(side, pixels)?, label, entry.domain))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(corrupt(
            &manifest_path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    manifest.spec.validate()?;
    let find = |name: &str| {
        manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| corrupt(&manifest_path, format!("missing split {name}")))
    };
    let side = manifest.image_side;
    Ok(Dataset {
        spec: manifest.spec.clone(),
        source: read_split(dir, find("source")?, side)?,
        target_train: read_split(dir, find("target_train")?, side)?,
        target_test: read_split(dir, find("target_test")?, side)?,
    })
}
