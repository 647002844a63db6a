//! Directory-per-class dataset loading, stratified splitting and class weights.
//!
//! A dataset root holds one subdirectory per class (`anemic/`, `non_anemic/`).
//! Every decodable JPG/PNG below a class directory becomes one [`ImageSample`]
//! whose id is its path relative to the root.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["anemic", "non_anemic"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const ANEMIC: usize = 0;
pub const NON_ANEMIC: usize = 1;

/// Smallest accepted image side; smaller images are upscaled on load.
pub const MIN_SIDE: u32 = 64;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.10, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Conjunctiva,
    Fingernail,
    Unknown,
}

impl Site {
    /// Guess the anatomical site from a file path (`.../conjunctiva_12.jpg`, `.../nail/3.png`).
    pub fn infer(path: &Path) -> Site {
        let lower = path.to_string_lossy().to_lowercase();
        if lower.contains("conjunctiva") || lower.contains("eye") {
            Site::Conjunctiva
        } else if lower.contains("nail") {
            Site::Fingernail
        } else {
            Site::Unknown
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: RgbImage,
    pub label: usize,
    pub site: Site,
}

impl ImageSample {
    /// Builds a sample, upscaling images with a side below [`MIN_SIDE`].
    pub fn new(id: impl Into<String>, pixels: RgbImage, label: usize, site: Site) -> Result<Self> {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { label: label as i64, classes: NUM_CLASSES });
        }
        Ok(ImageSample { id: id.into(), pixels: ensure_min_side(pixels, MIN_SIDE), label, site })
    }
}

pub(crate) fn ensure_min_side(img: RgbImage, min_side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w >= min_side && h >= min_side {
        return img;
    }
    let scale = f64::from(min_side) / f64::from(w.min(h).max(1));
    let nw = ((f64::from(w) * scale).ceil() as u32).max(min_side);
    let nh = ((f64::from(h) * scale).ceil() as u32).max(min_side);
    image::imageops::resize(&img, nw, nh, FilterType::CatmullRom)
}

/// Immutable, id-ordered collection of samples.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    samples: Vec<ImageSample>,
    by_id: HashMap<String, usize>,
    skipped: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn from_samples(mut samples: Vec<ImageSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(DatasetIndex { samples, by_id, skipped: Vec::new() })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    /// Files that were found but could not be decoded.
    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Class counts restricted to `ids`; unknown ids are ignored.
    pub fn class_counts_of<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Vec<usize> {
        let mut counts = vec![0; NUM_CLASSES];
        for s in ids.into_iter().filter_map(|id| self.get(id)) {
            counts[s.label] += 1;
        }
        counts
    }
}

fn is_candidate(path: &Path) -> bool {
    let hidden = path.file_name().map(|n| n.to_string_lossy().starts_with('.')).unwrap_or(true);
    !hidden && path.is_file()
}

/// Loads `root/<class_name>/**` into an index ordered lexicographically by relative path.
///
/// Undecodable files are skipped with a warning and reported through
/// [`DatasetIndex::skipped`].
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut missing = Vec::new();
    for name in CLASS_NAMES {
        if !root.join(name).is_dir() {
            missing.push(name);
        }
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !CLASS_NAMES.contains(&name.as_str()) {
            log::warn!("ignoring unknown class directory `{name}` under {}", root.display());
        }
    }
    if missing.len() == CLASS_NAMES.len() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "dataset root {} is missing class directories: {}",
            root.display(),
            missing.join(", ")
        )));
    }

    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        for entry in WalkDir::new(root.join(name)).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Config(format!("walking {}: {e}", root.display())))?;
            if is_candidate(entry.path()) {
                files.push((entry.into_path(), label));
            }
        }
    }
    files.sort();

    let mut samples = Vec::with_capacity(files.len());
    let mut skipped = Vec::new();
    for (path, label) in files {
        let decoded = image::ImageReader::open(&path)
            .map_err(image::ImageError::IoError)
            .and_then(|r| r.with_guessed_format().map_err(image::ImageError::IoError))
            .and_then(|r| r.decode());
        match decoded {
            Ok(img) => {
                let id = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                let site = Site::infer(&path);
                samples.push(ImageSample::new(id, img.to_rgb8(), label, site)?);
            }
            Err(e) => {
                log::warn!("skipping undecodable image {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    if !skipped.is_empty() {
        log::warn!("{} undecodable file(s) skipped under {}", skipped.len(), root.display());
    }
    let mut index = DatasetIndex::from_samples(samples)?;
    index.skipped = skipped;
    Ok(index)
}

/// Train/val/test partition of sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

fn validate_fractions(fractions: &[f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Hamilton (largest remainder) apportionment of `n` items over `fractions`.
/// Ties in the remainder go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class allocation table `counts[class][part]` whose row sums are the class sizes
/// and whose column sums equal the largest-remainder apportionment of the total.
fn allocate(class_sizes: &[usize], fractions: &[f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = class_sizes.iter().sum();
    let targets = largest_remainder(total, fractions);
    let floor_of = |n_c: usize, part: usize| usize::from(n_c >= 3 && fractions[part] > 0.0);

    let mut table: Vec<[usize; 3]> = class_sizes
        .iter()
        .map(|&n_c| {
            let v = largest_remainder(n_c, fractions);
            let mut row = [v[0], v[1], v[2]];
            for part in 0..3 {
                while row[part] < floor_of(n_c, part) {
                    let donor = (0..3).max_by_key(|&p| row[p]).unwrap_or(0);
                    row[donor] -= 1;
                    row[part] += 1;
                }
            }
            row
        })
        .collect();

    // Move single samples between parts until every part hits its target total.
    loop {
        let totals: Vec<usize> = (0..3).map(|p| table.iter().map(|r| r[p]).sum()).collect();
        let Some(over) = (0..3).find(|&p| totals[p] > targets[p]) else { break };
        let Some(under) = (0..3).find(|&p| totals[p] < targets[p]) else { break };
        let excess = |c: usize, p: usize| table[c][p] as f64 - class_sizes[c] as f64 * fractions[p];
        let candidate =
            (0..table.len()).filter(|&c| table[c][over] > floor_of(class_sizes[c], over)).max_by(|&a, &b| {
                let sa = excess(a, over) - excess(a, under);
                let sb = excess(b, over) - excess(b, under);
                sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
            });
        let Some(c) = candidate else { break };
        table[c][over] -= 1;
        table[c][under] += 1;
    }
    table
}

/// Stratified, seed-deterministic train/val/test split.
pub fn stratified_split(index: &DatasetIndex, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    validate_fractions(&fractions)?;
    if index.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for s in index.samples() {
        by_class.entry(s.label).or_default().push(s.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_class.values_mut() {
        ids.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    for (label, n) in by_class.keys().zip(&sizes) {
        if *n < 3 {
            log::warn!("class {label} has only {n} sample(s); it may be absent from some splits");
        }
    }
    let table = allocate(&sizes, &fractions);

    let mut parts: [Vec<String>; 3] = Default::default();
    for (ids, row) in by_class.into_values().zip(table) {
        let mut it = ids.into_iter();
        for (part, &count) in row.iter().enumerate() {
            parts[part].extend(it.by_ref().take(count));
        }
    }
    for p in parts.iter_mut() {
        p.sort();
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { seed, fractions, train, val, test })
}

/// Inverse-frequency class weights `N / (K * n_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("class weights need at least one class".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let total: usize = counts.iter().sum();
        let k = counts.len() as f64;
        Ok(ClassWeights(counts.iter().map(|&n| total as f64 / (k * n as f64)).collect()))
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn compute_class_weights(index: &DatasetIndex) -> Result<ClassWeights> {
    ClassWeights::from_counts(&index.class_counts())
}
