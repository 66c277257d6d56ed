//! Class-per-subdirectory image trees (AffectNet-style layouts).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{class_index, class_names, decode_grayscale, resize_bilinear, Dataset, Sample, Split, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::INPUT_SHAPE;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelTarget {
    Class(usize),
    Skip,
}

/// Maps source class names (subdirectory names) to canonical labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    entries: BTreeMap<String, LabelTarget>,
}

impl LabelMap {
    pub fn new(entries: BTreeMap<String, LabelTarget>) -> Result<Self> {
        if !entries.values().any(|t| matches!(t, LabelTarget::Class(_))) {
            return Err(Error::LabelMap("no non-skip entries".into()));
        }
        Ok(LabelMap { entries })
    }

    /// Every canonical class name mapped to itself.
    pub fn identity() -> Self {
        let entries = class_names()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, LabelTarget::Class(i)))
            .collect();
        LabelMap { entries }
    }

    /// Parses `source=canonical` / `source=skip` lines. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (src, dst) = line
                .split_once('=')
                .ok_or_else(|| Error::LabelMap(format!("line {}: expected source=target", i + 1)))?;
            let (src, dst) = (src.trim(), dst.trim());
            let target = if dst == "skip" {
                LabelTarget::Skip
            } else {
                LabelTarget::Class(
                    class_index(dst)
                        .ok_or_else(|| Error::LabelMap(format!("line {}: unknown class '{dst}'", i + 1)))?,
                )
            };
            if entries.insert(src.to_string(), target).is_some() {
                return Err(Error::LabelMap(format!("line {}: duplicate source '{src}'", i + 1)));
            }
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    pub fn get(&self, source: &str) -> Option<&LabelTarget> {
        self.entries.get(source)
    }
}

/// A file that could not be turned into a sample.
#[derive(Debug)]
pub struct LoadFailure {
    pub path: PathBuf,
    pub error: Error,
}

#[derive(Debug)]
pub struct LoadedDir {
    pub dataset: Dataset,
    pub failures: Vec<LoadFailure>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::from(e).in_file(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::from(e).in_file(dir))?;
    paths.sort();
    Ok(paths)
}

/// Decodes a PGM/PPM file into a `[1, 48, 48]` grayscale model input.
pub fn prepare_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let gray = decode_grayscale(bytes)?;
    resize_bilinear(&gray, IMAGE_SIZE, IMAGE_SIZE)?.reshape(&INPUT_SHAPE)
}

fn load_sample(path: &Path, label: usize) -> Result<Sample> {
    let bytes = fs::read(path)?;
    Sample::new(prepare_image(&bytes)?, label, class_names().len())
}

/// Loads `root/<class>/<image>` into a dataset.
///
/// Subdirectories and files are visited in sorted order. Classes mapped to
/// `skip` are ignored; unreadable images are collected in
/// [`LoadedDir::failures`] while loading continues.
pub fn load_image_dir(root: &Path, label_map: &LabelMap, split: Split) -> Result<LoadedDir> {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let label = match label_map.get(&name) {
            Some(LabelTarget::Class(c)) => *c,
            Some(LabelTarget::Skip) => continue,
            None => {
                return Err(Error::LabelMap(format!("subdirectory '{name}' is not in the label map")).in_file(&dir))
            }
        };
        for file in sorted_entries(&dir)? {
            if !file.is_file() {
                continue;
            }
            match load_sample(&file, label) {
                Ok(s) => samples.push(s),
                Err(error) => failures.push(LoadFailure { path: file, error }),
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::NoSamples.in_file(root));
    }
    Ok(LoadedDir {
        dataset: Dataset::new(samples, class_names(), split)?,
        failures,
    })
}
