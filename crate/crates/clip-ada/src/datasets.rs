//! Dataset ingestion: two industrial-inspection directory layouts are
//! indexed into one unified multi-category record stream. Training splits
//! hold normal images only; anomalous test records always carry a pixel
//! mask. Images are resized bilinearly, masks with nearest-neighbor.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::fnv1a64;
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub category: String,
    pub split: Split,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
}

/// Unified index over every category of a dataset root.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
    pub categories: Vec<String>,
}

impl DatasetIndex {
    pub fn train(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn train_len(&self) -> usize {
        self.train().count()
    }

    pub fn test_len(&self) -> usize {
        self.test().count()
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Layout("no categories found".into()));
        }
        for r in self.train() {
            if r.label != Label::Normal {
                return Err(Error::Layout(format!(
                    "train split contains a non-normal record: {}",
                    r.path.display()
                )));
            }
        }
        for r in self.test() {
            if r.label == Label::Anomalous && r.mask_path.is_none() {
                return Err(Error::MissingMask(r.path.clone()));
            }
        }
        Ok(())
    }
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

/// Index the `category/train/good`, `category/test/<defect>`,
/// `category/ground_truth/<defect>` layout.
pub fn index_mvtec(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", root.display())));
    }
    let mut records = Vec::new();
    let mut categories = Vec::new();

    for cat_dir in sorted_dir(root)? {
        if !cat_dir.is_dir() {
            continue;
        }
        let category = cat_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let train_good = cat_dir.join("train").join("good");
        let test_dir = cat_dir.join("test");
        if !train_good.is_dir() || !test_dir.is_dir() {
            return Err(Error::Layout(format!(
                "{} lacks the expected train/good and test directories",
                cat_dir.display()
            )));
        }
        categories.push(category.clone());

        for img in sorted_dir(&train_good)?.into_iter().filter(|p| is_image(p)) {
            records.push(DatasetRecord {
                path: img,
                category: category.clone(),
                split: Split::Train,
                label: Label::Normal,
                mask_path: None,
            });
        }

        for defect_dir in sorted_dir(&test_dir)? {
            if !defect_dir.is_dir() {
                continue;
            }
            let defect = defect_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let normal = defect == "good";
            for img in sorted_dir(&defect_dir)?.into_iter().filter(|p| is_image(p)) {
                let mask_path = if normal {
                    None
                } else {
                    let stem = img
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default();
                    let gt_dir = cat_dir.join("ground_truth").join(&defect);
                    let candidates = [
                        gt_dir.join(format!("{stem}_mask.png")),
                        gt_dir.join(format!("{stem}.png")),
                    ];
                    match candidates.into_iter().find(|c| c.is_file()) {
                        Some(found) => Some(found),
                        None => return Err(Error::MissingMask(img)),
                    }
                };
                records.push(DatasetRecord {
                    path: img,
                    category: category.clone(),
                    split: Split::Test,
                    label: if normal { Label::Normal } else { Label::Anomalous },
                    mask_path,
                });
            }
        }
    }

    let index = DatasetIndex { records, categories };
    index.validate()?;
    Ok(index)
}

/// Index the split-csv layout: `split_csv/1cls.csv` rows of
/// `object,split,label,image,mask` with image/mask paths relative to root.
pub fn index_visa(root: &Path) -> Result<DatasetIndex> {
    let csv_path = root.join("split_csv").join("1cls.csv");
    if !csv_path.is_file() {
        return Err(Error::Layout(format!(
            "missing split csv at {}",
            csv_path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::Layout(format!("cannot read {}: {e}", csv_path.display())))?;

    let mut records = Vec::new();
    let mut categories = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Layout(format!("bad csv row: {e}")))?;
        let get = |i: usize| row.get(i).unwrap_or_default().trim().to_string();
        let (object, split, label, image, mask) = (get(0), get(1), get(2), get(3), get(4));
        if object.is_empty() || image.is_empty() {
            continue;
        }
        let split = match split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Layout(format!("unknown split {other:?}"))),
        };
        let label = match label.as_str() {
            "normal" => Label::Normal,
            "anomaly" | "anomalous" => Label::Anomalous,
            other => return Err(Error::Layout(format!("unknown label {other:?}"))),
        };
        if split == Split::Train && label != Label::Normal {
            return Err(Error::Layout(format!(
                "train split contains anomalous image {image}"
            )));
        }
        let mask_path = if label == Label::Anomalous {
            if mask.is_empty() {
                return Err(Error::MissingMask(root.join(&image)));
            }
            Some(root.join(&mask))
        } else {
            None
        };
        categories.insert(object.clone());
        records.push(DatasetRecord {
            path: root.join(&image),
            category: object,
            split,
            label,
            mask_path,
        });
    }

    let index = DatasetIndex {
        records,
        categories: categories.into_iter().collect(),
    };
    index.validate()?;
    Ok(index)
}

/// Per-category stratified subsample of the train split; the test split is
/// untouched. `fraction = 1` returns the index unchanged.
pub fn subsample(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    if fraction == 1.0 {
        return Ok(index.clone());
    }
    let mut keep = vec![true; index.records.len()];
    for category in &index.categories {
        let members: Vec<usize> = index
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train && &r.category == category)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let target = ((members.len() as f64 * fraction).round() as usize)
            .clamp(1, members.len());
        let mut shuffled = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(category.bytes()));
        shuffled.shuffle(&mut rng);
        for &drop in &shuffled[target..] {
            keep[drop] = false;
        }
    }
    let records = index
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok(DatasetIndex {
        records,
        categories: index.categories.clone(),
    })
}

/// Load an image, resize bilinearly to `(height, width)`, scale to `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let resized = image::imageops::resize(
        &img,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        f64::from(resized.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    ImageTensor::new(data)
}

/// Load a binary mask, resize with nearest-neighbor (binariness preserved).
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let resized = image::imageops::resize(
        &img,
        width as u32,
        height as u32,
        image::imageops::FilterType::Nearest,
    );
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        u8::from(resized.get_pixel(x as u32, y as u32)[0] > 127)
    }))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use std::fs;

    pub fn write_png(path: &Path, side: u32, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = image::RgbImage::from_pixel(side, side, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    pub fn write_mask_png(path: &Path, side: u32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut img = image::GrayImage::new(side, side);
        for y in 0..side / 2 {
            for x in 0..side / 2 {
                img.put_pixel(x, y, image::Luma([255]));
            }
        }
        img.save(path).unwrap();
    }

    /// Two-category miniature tree: 3 train, 1 normal test, 2 anomalous test
    /// per category.
    pub fn mvtec_tree(root: &Path) {
        for cat in ["bolt", "casing"] {
            for i in 0..3 {
                write_png(&root.join(cat).join("train/good").join(format!("{i:03}.png")), 8, 100);
            }
            write_png(&root.join(cat).join("test/good/000.png"), 8, 110);
            for i in 0..2 {
                write_png(
                    &root.join(cat).join("test/scratch").join(format!("{i:03}.png")),
                    8,
                    60,
                );
                write_mask_png(
                    &root
                        .join(cat)
                        .join("ground_truth/scratch")
                        .join(format!("{i:03}_mask.png")),
                    8,
                );
            }
        }
    }

    pub fn visa_tree(root: &Path) {
        let mut rows = vec!["object,split,label,image,mask".to_string()];
        for cat in ["candle", "pcb"] {
            for i in 0..3 {
                let rel = format!("{cat}/img/train_{i}.png");
                write_png(&root.join(&rel), 8, 100);
                rows.push(format!("{cat},train,normal,{rel},"));
            }
            let rel = format!("{cat}/img/test_good.png");
            write_png(&root.join(&rel), 8, 110);
            rows.push(format!("{cat},test,normal,{rel},"));
            for i in 0..2 {
                let rel = format!("{cat}/img/test_bad_{i}.png");
                let mask = format!("{cat}/msk/test_bad_{i}.png");
                write_png(&root.join(&rel), 8, 50);
                write_mask_png(&root.join(&mask), 8);
                rows.push(format!("{cat},test,anomaly,{rel},{mask}"));
            }
        }
        fs::create_dir_all(root.join("split_csv")).unwrap();
        fs::write(root.join("split_csv/1cls.csv"), rows.join("\n")).unwrap();
    }
}
