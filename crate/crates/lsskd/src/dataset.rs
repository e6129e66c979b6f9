//! Dataset loading under the `<data-dir>/<dataset-name>/...` convention.

use std::path::{Path, PathBuf};

use lsskd_core::data::{DatasetMeta, ImageSample, Normalization};

use crate::cifar::{self, Variant};
use crate::error::{CliError, CliResult};
use crate::idx;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Known dataset names and their on-disk layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Cifar(Variant),
    /// MNIST-style IDX pairs, also used by the procedural glyph set.
    Idx,
}

pub fn layout(name: &str) -> Option<Layout> {
    match name {
        "cifar10" => Some(Layout::Cifar(Variant::Cifar10)),
        "cifar100" => Some(Layout::Cifar(Variant::Cifar100)),
        "mnist" | "synth10" => Some(Layout::Idx),
        _ => None,
    }
}

/// Normalization shipped for a dataset name.
pub fn default_normalization(name: &str) -> Option<Normalization> {
    match name {
        "cifar10" => Some(Normalization::cifar10()),
        "cifar100" => Some(Normalization::cifar100()),
        "mnist" => Some(Normalization::mnist()),
        "synth10" => Some(Normalization { means: vec![0.25], stds: vec![0.29] }),
        _ => None,
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn data_err(path: &Path, detail: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {detail}", path.display()))
}

fn samples(
    path: &Path,
    records: impl Iterator<Item = (usize, Vec<u8>)>,
    shape: [usize; 3],
    norm: &Normalization,
) -> CliResult<Vec<ImageSample>> {
    records
        .enumerate()
        .map(|(i, (label, bytes))| {
            let pixels = norm.apply(&bytes, shape[0]).map_err(|e| data_err(path, e))?;
            Ok(ImageSample { pixels, shape, label, sample_id: i as u32 })
        })
        .collect()
}

/// Parses CIFAR binary files (concatenated in order); the fine label is used.
pub fn load_cifar_binary(paths: &[PathBuf], variant: Variant, norm: &Normalization) -> CliResult<Vec<ImageSample>> {
    let mut raw = Vec::new();
    for p in paths {
        raw.extend(cifar::parse(&read(p)?, variant).map_err(|e| data_err(p, e))?);
    }
    let first = paths.first().map(PathBuf::as_path).unwrap_or(Path::new(""));
    samples(first, raw.into_iter().map(|r| (usize::from(r.label), r.pixels)), [3, 32, 32], norm)
}

/// `(samples, classes)` from an IDX image/label pair; classes is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path, norm: &Normalization) -> CliResult<(Vec<ImageSample>, usize)> {
    let (count, rows, cols, pixels) = idx::parse_images(&read(images)?).map_err(|e| data_err(images, e))?;
    let ls = idx::parse_labels(&read(labels)?).map_err(|e| data_err(labels, e))?;
    if ls.len() != count {
        return Err(data_err(labels, format!("{} labels for {count} images", ls.len())));
    }
    let plane = rows * cols;
    let records = ls.iter().enumerate().map(|(i, &l)| (usize::from(l), pixels[i * plane..(i + 1) * plane].to_vec()));
    let classes = ls.iter().max().map_or(0, |&m| usize::from(m) + 1);
    Ok((samples(images, records, [1, rows, cols], norm)?, classes))
}

pub fn load(name: &str, data_dir: &Path, norm: &Normalization) -> CliResult<Dataset> {
    let root = data_dir.join(name);
    let layout = layout(name).ok_or_else(|| CliError::Data(format!("unknown dataset {name:?}")))?;
    let (train, test, classes) = match layout {
        Layout::Cifar(v) => {
            let (train_files, test_file): (Vec<PathBuf>, PathBuf) = match v {
                Variant::Cifar10 => ((1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(), root.join("test_batch.bin")),
                Variant::Cifar100 => (vec![root.join("train.bin")], root.join("test.bin")),
            };
            let train = load_cifar_binary(&train_files, v, norm)?;
            let test = load_cifar_binary(&[test_file], v, norm)?;
            (train, test, v.classes())
        }
        Layout::Idx => {
            let (train, n_train) = load_idx(&root.join("train-images-idx3-ubyte"), &root.join("train-labels-idx1-ubyte"), norm)?;
            let (test, n_test) = load_idx(&root.join("t10k-images-idx3-ubyte"), &root.join("t10k-labels-idx1-ubyte"), norm)?;
            (train, test, n_train.max(n_test))
        }
    };
    let image_shape = train.first().map(|s| s.shape).ok_or_else(|| CliError::Data(format!("{}: empty training set", root.display())))?;
    if test.iter().any(|s| s.shape != image_shape) {
        return Err(CliError::Data(format!("{}: train and test image shapes differ", root.display())));
    }
    let meta = DatasetMeta {
        name: name.to_string(),
        classes,
        image_shape,
        normalization: norm.clone(),
        train_count: train.len(),
        test_count: test.len(),
    };
    meta.validate().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Dataset { meta, train, test })
}
