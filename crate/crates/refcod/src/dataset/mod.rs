//! On-disk dataset layout, index loading and episode sampling.
//!
//! Canonical layout:
//!
//! ```text
//! <root>/Camo/<split>/<category>/<stem>.jpg    camouflage image
//! <root>/Camo/<split>/<category>/<stem>.png    ground-truth mask
//! <root>/Ref/<split>/<category>/<stem>.jpg     referring image
//! <root>/Ref/<split>/<category>/<stem>.png     referring mask (optional)
//! ```
//!
//! An optional `Camo/<split>/scenes.json` maps `<category>/<stem>` to the
//! number of camouflaged objects in the scene.

pub mod stats;
pub mod toy;

use crate::error::{Error, Result};
use crate::imageio;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamoRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub category_id: usize,
    pub split: Split,
    /// Number of camouflaged objects in the scene, when labeled.
    pub n_objects: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefRecord {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub category_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub camo_records: Vec<CamoRecord>,
    pub ref_records: Vec<RefRecord>,
    pub categories: Vec<String>,
}

impl DatasetIndex {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad index manifest: {e}")))
    }

    pub fn refs_of(&self, category_id: usize, split: Split) -> Vec<usize> {
        self.ref_records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.category_id == category_id && r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One training/evaluation unit: a camouflage image, its mask, and K
/// referring images of the same category (with masks when the layout has
/// them).
#[derive(Debug, Clone)]
pub struct Episode {
    pub camo_image: Array3<f64>,
    pub gt_mask: Array3<f64>,
    pub ref_images: Vec<Array3<f64>>,
    pub ref_masks: Vec<Option<Array3<f64>>>,
    pub category_id: usize,
    pub category_name: String,
    pub record_id: usize,
}

fn list_sorted_dirs(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    out.sort();
    Ok(out)
}

fn list_sorted_images(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let p = entry?.path();
        let ext = p
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("jpg") | Some("jpeg")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scan the layout under `root` and build the index for one split.
///
/// Pure function of the filesystem state: category ids come from the sorted
/// union of category directory names, and file lists are sorted, so repeated
/// loads are identical.
pub fn load_index(root: &Path, split: Split) -> Result<DatasetIndex> {
    let camo_root = root.join("Camo").join(split.dir_name());
    let ref_root = root.join("Ref").join(split.dir_name());
    for required in [root.join("Camo"), root.join("Ref"), camo_root.clone(), ref_root.clone()] {
        if !required.is_dir() {
            return Err(Error::MissingDirectory(required.display().to_string()));
        }
    }

    let mut categories = list_sorted_dirs(&camo_root)?;
    for extra in list_sorted_dirs(&ref_root)? {
        if !categories.contains(&extra) {
            categories.push(extra);
        }
    }
    categories.sort();

    let scenes: BTreeMap<String, u32> = {
        let path = camo_root.join("scenes.json");
        if path.is_file() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("bad scenes.json: {e}")))?
        } else {
            BTreeMap::new()
        }
    };

    let mut camo_records = Vec::new();
    let mut ref_records = Vec::new();
    for (category_id, category) in categories.iter().enumerate() {
        let camo_dir = camo_root.join(category);
        let ref_dir = ref_root.join(category);

        let mut n_refs = 0;
        if ref_dir.is_dir() {
            for image_path in list_sorted_images(&ref_dir)? {
                let mask = image_path.with_extension("png");
                ref_records.push(RefRecord {
                    mask_path: mask.is_file().then_some(mask),
                    image_path,
                    category_id,
                    split,
                });
                n_refs += 1;
            }
        }

        if camo_dir.is_dir() {
            let images = list_sorted_images(&camo_dir)?;
            if !images.is_empty() && n_refs == 0 {
                return Err(Error::EmptyCategory {
                    category: category.clone(),
                    split: split.dir_name().to_string(),
                });
            }
            for image_path in images {
                let mask_path = image_path.with_extension("png");
                if !mask_path.is_file() {
                    return Err(Error::Data(format!(
                        "missing mask for {}",
                        image_path.display()
                    )));
                }
                let stem = image_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_default();
                let n_objects = scenes.get(&format!("{category}/{stem}")).copied();
                camo_records.push(CamoRecord {
                    image_path,
                    mask_path,
                    category_id,
                    split,
                    n_objects,
                });
            }
        }
    }

    Ok(DatasetIndex {
        camo_records,
        ref_records,
        categories,
    })
}

/// Deterministic sub-stream seed for one (seed, record) pair.
fn episode_seed(rng_seed: u64, record_id: usize) -> u64 {
    crate::nn::splitmix64(rng_seed ^ (record_id as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// Assemble an episode: load the camo image and mask, draw `k` referring
/// images of the same category and split without replacement, and stretch
/// everything to `image_size` x `image_size`. Deterministic given `rng_seed`.
///
/// `k = 0` yields an episode without references (reference-free mode).
pub fn sample_episode(
    index: &DatasetIndex,
    camo_record_id: usize,
    k: usize,
    rng_seed: u64,
    image_size: usize,
) -> Result<Episode> {
    let record = index
        .camo_records
        .get(camo_record_id)
        .ok_or_else(|| Error::Data(format!("no camo record {camo_record_id}")))?;
    let category_name = index.categories[record.category_id].clone();

    let pool = index.refs_of(record.category_id, record.split);
    if k > pool.len() {
        return Err(Error::InsufficientReferences {
            category: category_name,
            requested: k,
            available: pool.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(rng_seed, camo_record_id));
    let mut shuffled = pool;
    shuffled.shuffle(&mut rng);
    shuffled.truncate(k);

    let camo_image = resize_image(&imageio::load_image_rgb(&record.image_path)?, image_size);
    let gt_mask = resize_mask(&imageio::load_mask_soft(&record.mask_path)?, image_size);

    let mut ref_images = Vec::with_capacity(k);
    let mut ref_masks = Vec::with_capacity(k);
    for ref_idx in shuffled {
        let r = &index.ref_records[ref_idx];
        ref_images.push(resize_image(&imageio::load_image_rgb(&r.image_path)?, image_size));
        ref_masks.push(match &r.mask_path {
            Some(p) => Some(resize_mask(&imageio::load_mask_soft(p)?, image_size)),
            None => None,
        });
    }

    Ok(Episode {
        camo_image,
        gt_mask,
        ref_images,
        ref_masks,
        category_id: record.category_id,
        category_name,
        record_id: camo_record_id,
    })
}

fn resize_image(img: &Array3<f64>, size: usize) -> Array3<f64> {
    imageio::resize_chw(img, size, size)
}

fn resize_mask(soft: &Array3<f64>, size: usize) -> Array3<f64> {
    imageio::binarize(&imageio::resize_chw(soft, size, size), 0.5)
}
