//! Deterministic labeled / unlabeled / test partitions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fraction of all samples held out for testing, independent of the ratio.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub ratio: f64,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles `ids` with `seed`; the first fifth becomes the test set. The
/// rest is shuffled again with a seed-derived stream and its first
/// `round(ratio · |train|)` ids are labeled, so labeled sets are nested
/// across ratios.
pub fn make_split(ids: &[String], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("label ratio must lie in (0, 1], got {ratio}")));
    }
    let mut all = ids.to_vec();
    all.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let n_test = (TEST_FRACTION * all.len() as f64).round() as usize;
    let mut train = all.split_off(n_test);
    rng.set_stream(1);
    train.shuffle(&mut rng);
    let n_labeled = (ratio * train.len() as f64).round() as usize;
    let unlabeled = train.split_off(n_labeled);
    Ok(DatasetSplit {
        ratio,
        seed,
        labeled: train,
        unlabeled,
        test: all,
    })
}

impl DatasetSplit {
    pub fn file_name(ratio: f64, seed: u64) -> String {
        format!("split_{ratio}_{seed}.txt")
    }

    pub fn path(dir: &Path, ratio: f64, seed: u64) -> PathBuf {
        dir.join(Self::file_name(ratio, seed))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, ids) in [("LABELED", &self.labeled), ("UNLABELED", &self.unlabeled), ("TEST", &self.test)] {
            writeln!(s, "{name}").unwrap();
            for id in ids {
                writeln!(s, "{id}").unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str, ratio: f64, seed: u64) -> Result<Self> {
        let mut split = DatasetSplit {
            ratio,
            seed,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: Vec::new(),
        };
        let mut section: Option<&mut Vec<String>> = None;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            match t {
                "LABELED" => section = Some(&mut split.labeled),
                "UNLABELED" => section = Some(&mut split.unlabeled),
                "TEST" => section = Some(&mut split.test),
                "" => {}
                id => match section.as_mut() {
                    Some(v) => v.push(id.to_string()),
                    None => {
                        return Err(Error::Parse {
                            offset,
                            message: format!("id '{id}' before any section header"),
                        })
                    }
                },
            }
            offset += line.len();
        }
        Ok(split)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir, self.ratio, self.seed);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path, ratio: f64, seed: u64) -> Result<Self> {
        let path = Self::path(dir, ratio, seed);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text, ratio, seed)
    }
}
