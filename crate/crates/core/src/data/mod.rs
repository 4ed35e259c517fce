//! Calibration dataset providers.
//!
//! On-disk corpus layout shared with external tooling:
//! `<dir>/images/*.png` (8-bit RGB) and `<dir>/labels.csv` with header `filename,label`.

pub mod cifar;
pub mod fractal;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fractal::{generate_fractal_dataset, FractalSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// (3, H, W), values in [0, 1].
    pub pixels: Tensor,
    pub label: Option<usize>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Directory,
    Fractal,
    DistillExport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: Option<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Vec<LabeledImage>,
        num_classes: Option<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        if let Some(k) = num_classes {
            for img in &images {
                if let Some(label) = img.label.filter(|&l| l >= k) {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_classes: k,
                    });
                }
            }
        } else if images.iter().any(|i| i.label.is_some()) {
            return Err(Error::InvalidArgument(
                "labeled images require a class count".into(),
            ));
        }
        Ok(Self {
            images,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|i| i.label.is_some())
    }

    /// Labels of every image, or an error if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.images
            .iter()
            .map(|i| i.label.ok_or(Error::Unlabeled))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// Stacks images into `(N, 3, H, W)` batches of at most `batch_size`.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Tensor>> {
        self.images
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let refs: Vec<&Tensor> = chunk.iter().map(|i| &i.pixels).collect();
                Tensor::stack(&refs)
            })
            .collect()
    }

    /// Picks at most `n` images for calibration: per-class balanced when the set is
    /// labeled and `n` splits evenly across classes, a seeded uniform subset otherwise.
    pub fn calibration_subset(&self, n: usize, seed: u64) -> Self {
        if self.len() <= n {
            return self.clone();
        }
        if let (Some(k), true) = (self.num_classes, self.is_fully_labeled()) {
            if n.is_multiple_of(k) {
                if let Ok(ds) = sample_per_class(self, n / k, seed) {
                    return ds;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.len(), n).into_vec();
        picked.sort_unstable();
        self.subset(&picked)
    }
}

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Decodes an image file to a (3, H, W) tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes a (3, H, W) tensor in [0, 1] as an 8-bit RGB PNG.
pub fn write_image(path: &Path, pixels: &Tensor) -> Result<()> {
    let [3, h, w] = *pixels.shape() else {
        return Err(Error::Shape(format!(
            "expected (3, H, W) pixels, got {:?}",
            pixels.shape()
        )));
    };
    let plane = h * w;
    let d = pixels.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            raw.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path,
        &raw,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_err(path, e))
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
}

/// Loads a corpus directory. Images come from `<path>/images` when it exists, else `<path>`;
/// labels from `labels_file`, falling back to `<path>/labels.csv` when present.
/// Images are ordered lexicographically by file name.
pub fn load_image_dir(
    path: &Path,
    labels_file: Option<&Path>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", path.display()),
        )));
    }
    let image_dir = if path.join("images").is_dir() {
        path.join("images")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<(String, PathBuf)> = fs::read_dir(&image_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let default_labels = path.join("labels.csv");
    let labels_path = labels_file
        .map(Path::to_path_buf)
        .or_else(|| default_labels.is_file().then_some(default_labels));
    let mut labels: HashMap<String, usize> = HashMap::new();
    if let Some(lp) = &labels_path {
        let mut reader = csv::Reader::from_path(lp).map_err(|e| Error::Parse {
            path: lp.clone(),
            msg: e.to_string(),
        })?;
        for row in reader.deserialize::<LabelRow>() {
            let row = row.map_err(|e| Error::Parse {
                path: lp.clone(),
                msg: e.to_string(),
            })?;
            if !files.iter().any(|(name, _)| *name == row.filename) {
                return Err(Error::MissingImage(row.filename));
            }
            labels.insert(row.filename, row.label);
        }
    }
    let max_label = labels.values().copied().max();
    let num_classes = match (num_classes, max_label) {
        (Some(k), Some(m)) if m >= k => {
            return Err(Error::LabelOutOfRange {
                label: m,
                num_classes: k,
            })
        }
        (Some(k), _) => Some(k),
        (None, Some(m)) => Some(m + 1),
        (None, None) => None,
    };

    let images = files
        .par_iter()
        .map(|(name, p)| {
            Ok(LabeledImage {
                pixels: read_image(p)?,
                label: labels.get(name).copied(),
                source_id: name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, num_classes, Provenance::Directory)
}

/// Writes the dataset in corpus layout. Files are named by position so that
/// reloading preserves order.
pub fn write_corpus(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let names: Vec<String> = (0..dataset.len()).map(|i| format!("{i:05}.png")).collect();
    dataset
        .images
        .par_iter()
        .zip(names.par_iter())
        .try_for_each(|(img, name)| write_image(&image_dir.join(name), &img.pixels))?;
    if dataset.images.iter().any(|i| i.label.is_some()) {
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
        w.write_record(["filename", "label"]).map_err(csv_err)?;
        for (img, name) in dataset.images.iter().zip(&names) {
            if let Some(l) = img.label {
                w.write_record([name.as_str(), &l.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Selects exactly `n_per_class` images per class by a seeded shuffle.
/// Output is class-major, each class in shuffled order.
pub fn sample_per_class(dataset: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let labels = dataset.labels()?;
    if labels.is_empty() {
        return Err(Error::Unlabeled);
    }
    let k = dataset
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n_per_class * k);
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::InsufficientImages {
                class,
                available: idx.len(),
                requested: n_per_class,
            });
        }
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..n_per_class]);
    }
    Ok(dataset.subset(&picked))
}
