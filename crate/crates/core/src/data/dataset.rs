//! Seeded train/val/test datasets and their JSONL manifests.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{load_depth_raster, load_rgb_png, save_depth_raster, save_rgb_png, DepthFormat};
use super::sample::{make_sample, Sample};
use super::scene::{random_room, render_scene, Camera, RoomParams};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::InvalidSplit(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Train, val and test fractions; must sum to 1.
    pub split: (f64, f64, f64),
    /// Fraction of training scenes stored as relative-only samples.
    /// Validation and test scenes always keep their metric labels.
    pub relative_fraction: f64,
    pub seed: u64,
    pub depth_format: DepthFormat,
    pub room: RoomParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            image_size: (48, 64),
            split: (0.8, 0.1, 0.1),
            relative_fraction: 0.0,
            seed: 0,
            depth_format: DepthFormat::Rawf32,
            room: RoomParams::default(),
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub split: Split,
    pub seed: u64,
    pub image: String,
    pub depth: String,
    pub has_metric_label: bool,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index`. A bijection in `index` for a fixed dataset seed, so
/// scene seeds never repeat within a dataset.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(dataset_seed) ^ index as u64)
}

impl DatasetConfig {
    /// Scene counts per split: train and val are rounded, test takes the rest.
    pub fn split_counts(&self) -> Result<[usize; 3], DataError> {
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions {a}, {b}, {c} must be in [0,1] and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.relative_fraction) {
            return Err(DataError::InvalidSplit(format!(
                "relative fraction {} outside [0, 1]",
                self.relative_fraction
            )));
        }
        let n = self.num_scenes as f64;
        let train = ((a * n).round() as usize).min(self.num_scenes);
        let val = ((b * n).round() as usize).min(self.num_scenes - train);
        Ok([train, val, self.num_scenes - train - val])
    }

    /// Records for every scene, in split order, without touching the disk.
    pub fn plan(&self) -> Result<Vec<ManifestRecord>, DataError> {
        let counts = self.split_counts()?;
        let n_rel = (self.relative_fraction * counts[0] as f64).round() as usize;
        let mut order: Vec<usize> = (0..counts[0]).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ 0x5e1a)));
        let mut relative = vec![false; counts[0]];
        for &i in &order[..n_rel] {
            relative[i] = true;
        }
        let mut out = Vec::with_capacity(self.num_scenes);
        let mut index = 0;
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for k in 0..count {
                let source_id = format!("{}_{k:05}", split.name());
                let ext = self.depth_format.extension();
                out.push(ManifestRecord {
                    image: format!("{}/{source_id}_rgb.png", split.name()),
                    depth: format!("{}/{source_id}_depth.{ext}", split.name()),
                    source_id,
                    split: *split,
                    seed: scene_seed(self.seed, index),
                    has_metric_label: !(*split == Split::Train && relative[k]),
                });
                index += 1;
            }
        }
        Ok(out)
    }

    fn camera(&self) -> Camera {
        Camera::for_size(self.image_size.0, self.image_size.1)
    }

    /// Renders the sample a record describes.
    pub fn render(&self, record: &ManifestRecord) -> Result<Sample, DataError> {
        let spec = random_room(record.seed, self.camera(), &self.room);
        let (image, depth) = render_scene(&spec)?;
        make_sample(&depth, image, !record.has_metric_label, record.source_id.clone())
    }
}

/// Samples grouped by split.
#[derive(Debug, Clone, Default)]
pub struct SplitSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSamples {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, split: Split, s: Sample) {
        match split {
            Split::Train => self.train.push(s),
            Split::Val => self.val.push(s),
            Split::Test => self.test.push(s),
        }
    }
}

/// Renders a dataset in memory.
pub fn generate_samples(cfg: &DatasetConfig) -> Result<SplitSamples, DataError> {
    let mut out = SplitSamples::default();
    for r in cfg.plan()? {
        out.push(r.split, cfg.render(&r)?);
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Renders every scene to `dir` and writes `manifest.jsonl` plus one
/// manifest per split.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let records = cfg.plan()?;
    for s in Split::ALL {
        fs::create_dir_all(dir.join(s.name()))?;
    }
    for r in &records {
        let spec = random_room(r.seed, cfg.camera(), &cfg.room);
        let (image, depth) = render_scene(&spec)?;
        save_rgb_png(&image, &dir.join(&r.image))?;
        save_depth_raster(&depth, &dir.join(&r.depth), cfg.depth_format)?;
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    for s in Split::ALL {
        let part: Vec<_> = records.iter().filter(|r| r.split == s).cloned().collect();
        write_manifest(&dir.join(format!("{}.jsonl", s.name())), &part)?;
    }
    let cfg_text = toml::to_string(cfg).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join("dataset.toml"), cfg_text)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::Manifest(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let f = fs::File::open(path).map_err(|e| DataError::UnreadableFile(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DataError::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// A manifest on disk together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    /// Opens `manifest.jsonl` inside `root`, or a manifest file path directly.
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let (root, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        Ok(Self { records: read_manifest(&manifest)?, root })
    }

    pub fn load(&self, r: &ManifestRecord) -> Result<Sample, DataError> {
        let image = load_rgb_png(&self.root.join(&r.image))?;
        let depth_path = self.root.join(&r.depth);
        let depth = load_depth_raster(&depth_path, DepthFormat::from_path(&depth_path)?)?;
        make_sample(&depth, image, !r.has_metric_label, r.source_id.clone())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.records.iter().filter(|r| r.split == split).map(|r| self.load(r)).collect()
    }

    pub fn load_all(&self) -> Result<SplitSamples, DataError> {
        let mut out = SplitSamples::default();
        for r in &self.records {
            out.push(r.split, self.load(r)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_arithmetic_and_disjoint_seeds() {
        let cfg = DatasetConfig::default();
        assert_eq!(cfg.split_counts().unwrap(), [160, 20, 20]);
        let plan = cfg.plan().unwrap();
        let seeds: HashSet<u64> = plan.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 200);
        assert!(plan.iter().all(|r| r.has_metric_label));
        assert_eq!(plan, cfg.plan().unwrap());
    }

    #[test]
    fn relative_fraction_applies_to_train_only() {
        let cfg = DatasetConfig { num_scenes: 100, relative_fraction: 0.5, ..Default::default() };
        let plan = cfg.plan().unwrap();
        let train: Vec<_> = plan.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(train.len(), 80);
        assert_eq!(train.iter().filter(|r| !r.has_metric_label).count(), 40);
        assert!(plan.iter().filter(|r| r.split != Split::Train).all(|r| r.has_metric_label));
    }

    #[test]
    fn invalid_split_is_rejected() {
        let cfg = DatasetConfig { split: (0.8, 0.3, 0.1), ..Default::default() };
        assert!(matches!(cfg.plan(), Err(DataError::InvalidSplit(_))));
        let cfg = DatasetConfig { relative_fraction: 1.5, ..Default::default() };
        assert!(matches!(cfg.plan(), Err(DataError::InvalidSplit(_))));
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { num_scenes: 10, relative_fraction: 0.5, ..Default::default() };
        let records = build_dataset(&cfg, dir.path()).unwrap();
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.records, records);
        let mem = generate_samples(&cfg).unwrap();
        let loaded = ds.load_all().unwrap();
        assert_eq!(loaded.train.len(), mem.train.len());
        for (a, b) in loaded.train.iter().zip(&mem.train) {
            assert_eq!(a.has_metric_label, b.has_metric_label);
            // Depth goes through f32 and pixels through 8 bits on disk.
            for (x, y) in a.normalized.data.iter().zip(b.normalized.data.iter()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
        let dir2 = tempfile::tempdir().unwrap();
        build_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(fs::read(dir2.path().join(MANIFEST_FILE)).unwrap(), first);
        let r = &records[0];
        assert_eq!(fs::read(dir.path().join(&r.depth)).unwrap(), fs::read(dir2.path().join(&r.depth)).unwrap());
    }
}
