//! Datasets: synthetic generation, on-disk layout and splits.
//!
//! A dataset directory holds `images/<id>.pgm`, `masks/<id>.pgm` (class
//! indices as pixel values), a `meta.txt` and any number of
//! `split_<ratio>_<seed>.txt` files.

mod pgm;
mod split;
mod synth;

use std::fs;
use std::path::Path;

pub use pgm::Pgm;
pub use split::{make_split, DatasetSplit, TEST_FRACTION};
pub use synth::{generate_dataset, intensity_bin, otsu_bin, Difficulty, FOREGROUND_RANGE, SIZE_MULTIPLE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` class indices; present iff `labeled`.
    pub mask: Option<Tensor>,
    pub labeled: bool,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Drops the mask.
    pub fn unlabeled(mut self) -> Self {
        self.mask = None;
        self.labeled = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn to_text(&self) -> String {
        format!(
            "count = {}\nheight = {}\nwidth = {}\nclasses = {}\ndifficulty = {}\nseed = {}\n",
            self.count, self.height, self.width, self.num_classes, self.difficulty, self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::Config(format!("meta.txt lacks '{key}'")))
        };
        let num = |v: String, key: &str| -> Result<u64> { v.parse().map_err(|_| Error::Config(format!("meta.txt: bad {key} '{v}'"))) };
        Ok(Self {
            count: num(get("count")?, "count")? as usize,
            height: num(get("height")?, "height")? as usize,
            width: num(get("width")?, "width")? as usize,
            num_classes: num(get("classes")?, "classes")? as usize,
            difficulty: get("difficulty")?.parse()?,
            seed: num(get("seed")?, "seed")?,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.txt");
        Self::from_text(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }
}

/// Quantises `[0, 1]` intensities to 8 bits.
pub fn image_to_pgm(image: &Tensor) -> Result<Pgm> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::dim("image_to_pgm", format!("expected [1,H,W], got {:?}", image.shape())));
    };
    Pgm::new(w, h, image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

pub fn mask_to_pgm(mask: &Tensor) -> Result<Pgm> {
    let &[h, w] = mask.shape() else {
        return Err(Error::dim("mask_to_pgm", format!("expected [H,W], got {:?}", mask.shape())));
    };
    Pgm::new(w, h, mask.data().iter().map(|&v| v as u8).collect())
}

pub fn image_from_pgm(p: &Pgm) -> Result<Tensor> {
    let scale = p.maxval as f64;
    Tensor::new(&[1, p.height, p.width], p.pixels.iter().map(|&v| v as f64 / scale).collect())
}

pub fn mask_from_pgm(p: &Pgm) -> Result<Tensor> {
    Tensor::new(&[p.height, p.width], p.pixels.iter().map(|&v| v as f64).collect())
}

/// Writes samples (and their masks) plus `meta.txt` under `dir`.
pub fn save_dataset(dir: &Path, samples: &[SegSample], meta: &DatasetMeta) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        image_to_pgm(&s.image)?.save(&dir.join("images").join(format!("{}.pgm", s.id)))?;
        if let Some(m) = &s.mask {
            mask_to_pgm(m)?.save(&dir.join("masks").join(format!("{}.pgm", s.id)))?;
        }
    }
    let path = dir.join("meta.txt");
    fs::write(&path, meta.to_text()).map_err(|e| Error::io(&path, e))
}

/// Sorted ids of every image in `dir/images`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads a sample; the mask is read only when `with_mask` is set.
pub fn load_sample(dir: &Path, id: &str, with_mask: bool) -> Result<SegSample> {
    let image = image_from_pgm(&Pgm::load(&dir.join("images").join(format!("{id}.pgm")))?)?;
    let mask = if with_mask {
        let m = mask_from_pgm(&Pgm::load(&dir.join("masks").join(format!("{id}.pgm")))?)?;
        if m.shape() != [image.shape()[1], image.shape()[2]] {
            return Err(Error::dim("load_sample", format!("mask {:?} does not match image {:?}", m.shape(), image.shape())));
        }
        Some(m)
    } else {
        None
    };
    Ok(SegSample {
        id: id.to_string(),
        image,
        labeled: mask.is_some(),
        mask,
    })
}
