use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_sample, EditSample, SynthConfig};
use crate::error::{Error, Result};
use crate::io::instructions::Instructions;
use crate::io::pnm::{read_ppm, write_ppm};
use crate::seed::derive;

pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_TEST: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Seed of sample `index` in `split`; the two splits draw from disjoint streams.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive(seed, &[split.tag(), index as u64])
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub num_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    /// Sample counts by box count, index 0 for one box.
    pub fn box_histogram(&self, split: Split) -> Vec<usize> {
        let entries = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let mut h = vec![0; self.config.max_boxes];
        for e in entries {
            h[e.num_boxes - 1] += 1;
        }
        h
    }
}

/// A sample read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub id: String,
    pub sample: EditSample,
}

fn write_sample(dir: &Path, id: &str, s: &EditSample) -> Result<()> {
    write_ppm(&dir.join(format!("{id}.ref.ppm")), &s.reference)?;
    write_ppm(&dir.join(format!("{id}.tgt.ppm")), &s.target)?;
    let ins = Instructions {
        image: format!("{id}.ref.ppm"),
        boxes: s.boxes.clone(),
    };
    std::fs::write(dir.join(format!("{id}.json")), ins.to_json())?;
    Ok(())
}

/// Renders and writes `out_dir/{train,test}/` plus `out_dir/manifest.json`.
pub fn gen_dataset(cfg: &SynthConfig, n_train: usize, n_test: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest {
        seed,
        config: cfg.clone(),
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
    };
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let dir = out_dir.join(split.name());
        std::fs::create_dir_all(&dir)?;
        for i in 0..n {
            let id = sample_id(split, i);
            let s = render_sample(sample_seed(seed, split, i), cfg)?;
            write_sample(&dir, &id, &s)?;
            let entry = ManifestEntry {
                id,
                seed: s.seed,
                num_boxes: s.boxes.len(),
            };
            match split {
                Split::Train => manifest.train.push(entry),
                Split::Test => manifest.test.push(entry),
            }
        }
    }
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    Ok(manifest)
}

/// Reads every `*.json` sample of a split directory, sorted by id.
pub fn load_split(dir: &Path) -> Result<Vec<StoredSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no samples in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format(format!("bad sample file {}", p.display())))?
                .to_owned();
            let ins = Instructions::load(p)?;
            let reference = read_ppm(&dir.join(&ins.image))?;
            let target = read_ppm(&dir.join(format!("{id}.tgt.ppm")))?;
            ins.check_bounds(reference.width(), reference.height())?;
            Ok(StoredSample {
                id,
                sample: EditSample {
                    seed: 0,
                    reference,
                    target,
                    boxes: ins.boxes,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerate_identical_bytes() {
        let cfg = SynthConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, 6, 3, 11, a.path()).unwrap();
        gen_dataset(&cfg, 6, 3, 11, b.path()).unwrap();
        for rel in ["manifest.json", "train/train-00004.ref.ppm", "test/test-00002.json", "test/test-00002.tgt.ppm"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn load_back_and_histogram() {
        let cfg = SynthConfig::default();
        let d = tempfile::tempdir().unwrap();
        let m = gen_dataset(&cfg, 8, 2, 5, d.path()).unwrap();
        let train = load_split(&d.path().join("train")).unwrap();
        assert_eq!(train.len(), 8);
        let direct = render_sample(sample_seed(5, Split::Train, 3), &cfg).unwrap();
        assert_eq!(train[3].sample.reference, direct.reference);
        assert_eq!(train[3].sample.boxes, direct.boxes);
        assert_eq!(m.box_histogram(Split::Train).iter().sum::<usize>(), 8);
        assert_eq!(m.box_histogram(Split::Train).len(), cfg.max_boxes);
    }

    #[test]
    fn splits_use_distinct_seeds() {
        assert_ne!(sample_seed(1, Split::Train, 0), sample_seed(1, Split::Test, 0));
    }
}
