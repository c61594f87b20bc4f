use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::{generate_sample, pgm, DataError, Difficulty, GrayImage, Result, SegmentationMask};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Paths are relative to the manifest's root directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// `split=<tag>` header lines followed by `image<TAB>mask` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for split in [Split::Train, Split::Test] {
            out.push_str(&format!("split={split}\n"));
            for e in self.split(split) {
                out.push_str(&format!("{}\t{}\n", e.image.display(), e.mask.display()));
            }
        }
        out
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut current = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(tag) = line.strip_prefix("split=") {
                current = Some(match tag {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(DataError::Manifest {
                            line: line_no,
                            msg: format!("unknown split `{other}`"),
                        })
                    }
                });
                continue;
            }
            let split = current.ok_or_else(|| DataError::Manifest {
                line: line_no,
                msg: "entry before any split= header".into(),
            })?;
            let (image, mask) = line.split_once('\t').ok_or_else(|| DataError::Manifest {
                line: line_no,
                msg: "expected image<TAB>mask".into(),
            })?;
            entries.push(ManifestEntry {
                image: image.into(),
                mask: mask.into(),
                split,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(root, &text)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

/// Seed of sample `index` in `split`. Train and test occupy disjoint
/// halves of the 32-bit range under the dataset seed.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < (1 << 31), "sample index out of range");
    let half = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 31,
    };
    (dataset_seed << 32) | half | index as u64
}

/// Writes `n_train + n_test` image/mask PGM pairs under `out_dir` plus a
/// `manifest.txt`, and returns the manifest.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    size: usize,
    difficulty: Difficulty,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(n_train + n_test);
    for (split, count) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let dir = out_dir.join(split.tag());
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        for i in 0..count {
            let sample = generate_sample(sample_seed(seed, split, i), size, size, difficulty)?;
            let image = PathBuf::from(split.tag()).join(format!("img_{i:05}.pgm"));
            let mask = PathBuf::from(split.tag()).join(format!("mask_{i:05}.pgm"));
            pgm::save(&out_dir.join(&image), &sample.image)?;
            pgm::save_mask(&out_dir.join(&mask), &sample.mask)?;
            entries.push(ManifestEntry { image, mask, split });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

/// Loads every pair of one split, checking that image and mask agree in size.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<(GrayImage, SegmentationMask)>> {
    manifest
        .split(split)
        .map(|e| {
            let image = pgm::load(&manifest.resolve(&e.image))?;
            let mask = pgm::load_mask(&manifest.resolve(&e.mask))?;
            if (image.height(), image.width()) != (mask.height(), mask.width()) {
                return Err(DataError::Contract(format!(
                    "{}: image {}x{} but mask {}x{}",
                    e.image.display(),
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                )));
            }
            Ok((image, mask))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let text = "split=train\na.pgm\tam.pgm\nb.pgm\tbm.pgm\nsplit=test\nc.pgm\tcm.pgm\n";
        let m = DatasetManifest::parse("/data", text).unwrap();
        assert_eq!(m.split(Split::Train).count(), 2);
        assert_eq!(m.split(Split::Test).count(), 1);
        assert_eq!(m.to_text(), text);
    }

    #[test]
    fn entry_without_header_is_rejected() {
        let err = DatasetManifest::parse(".", "a.pgm\tb.pgm\n").unwrap_err();
        assert!(matches!(err, DataError::Manifest { line: 1, .. }));
    }

    #[test]
    fn split_seeds_are_disjoint() {
        assert_ne!(sample_seed(7, Split::Train, 0), sample_seed(7, Split::Test, 0));
        assert_eq!(sample_seed(7, Split::Test, 3) >> 32, 7);
    }
}
