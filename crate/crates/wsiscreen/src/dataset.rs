//! Newline-delimited JSON dataset index: one slide per line.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::Label;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub slide_id: String,
    pub label: Label,
    /// Slide directory relative to the index file.
    pub path: String,
    #[serde(default)]
    pub blur_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(path: &Path) -> Result<DatasetIndex> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScreenError::io_path("reading dataset index", path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = serde_json::from_str(line).map_err(|e| {
                ScreenError::Validation(format!("index line {}: {}", lineno + 1, e))
            })?;
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(ScreenError::Validation(format!(
                "dataset index '{}' has no entries",
                path.display()
            )));
        }
        Ok(DatasetIndex {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry).expect("index entry json");
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| ScreenError::io_path("writing dataset index", path, e))?;
        file.write_all(&out)
            .map_err(|e| ScreenError::io_path("writing dataset index", path, e))
    }

    pub fn slide_dir(&self, entry: &IndexEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Deterministic split by slide id: entries are ordered by id, shuffled
    /// with the seed, and the first `round(n * test_frac)` become the
    /// held-out set. Train and test are disjoint by construction.
    pub fn split(&self, test_frac: f64, seed: u64) -> (Vec<&IndexEntry>, Vec<&IndexEntry>) {
        let mut ordered: Vec<&IndexEntry> = self.entries.iter().collect();
        ordered.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ordered.shuffle(&mut rng);
        let n_test = ((self.entries.len() as f64) * test_frac).round() as usize;
        let n_test = n_test.min(self.entries.len());
        let test = ordered[..n_test].to_vec();
        let train = ordered[n_test..].to_vec();
        (train, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_index(n: usize) -> DatasetIndex {
        DatasetIndex {
            root: PathBuf::from("."),
            entries: (0..n)
                .map(|i| IndexEntry {
                    slide_id: format!("slide_{:04}", i),
                    label: if i % 2 == 0 { Label::Positive } else { Label::Negative },
                    path: format!("slides/slide_{:04}", i),
                    blur_sigma: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let idx = sample_index(20);
        let (train, test) = idx.split(0.3, 7);
        assert_eq!(test.len(), 6);
        assert_eq!(train.len(), 14);
        for t in &test {
            assert!(!train.iter().any(|e| e.slide_id == t.slide_id));
        }
        let (train2, test2) = idx.split(0.3, 7);
        let ids = |v: &[&IndexEntry]| v.iter().map(|e| e.slide_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&test), ids(&test2));
    }

    #[test]
    fn round_trip_ndjson() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.ndjson");
        let idx = sample_index(3);
        idx.save(&path).unwrap();
        let back = DatasetIndex::load(&path).unwrap();
        assert_eq!(back.entries.len(), 3);
        assert_eq!(back.entries[0].slide_id, "slide_0000");
        assert_eq!(back.entries[0].label, Label::Positive);
    }
}
