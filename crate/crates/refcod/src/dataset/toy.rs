//! Synthetic toy-camouflage dataset generator.
//!
//! Each category is a shape family plus a striped texture at a per-category
//! orientation/frequency. Camouflage scenes contain exactly two objects of
//! different categories rendered with background-matched color, so the target
//! category is ambiguous without a reference. Referring images show a single
//! dark object on a plain bright background. Ground-truth masks, referring
//! masks, and a distractor mask per scene (for audits) are emitted alongside
//! the images, plus a `scenes.json` with object counts.

use super::{load_index, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::imageio;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub n_categories: usize,
    pub n_camo_per_cat: usize,
    pub n_ref_per_cat: usize,
    pub image_size: usize,
    pub rng_seed: u64,
}

const FAMILIES: [&str; 6] = ["ellipse", "triangle", "cross", "ring", "diamond", "halfdisk"];

#[derive(Debug, Clone, Copy)]
struct ObjectSpec {
    category: usize,
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    rot: f64,
}

fn category_name(idx: usize) -> String {
    format!("{idx:02}_{}", FAMILIES[idx % FAMILIES.len()])
}

fn stripe_angle(category: usize, n_categories: usize) -> f64 {
    std::f64::consts::PI * category as f64 / n_categories as f64
}

fn stripe_freq(category: usize) -> f64 {
    5.0 + 2.0 * (category % 3) as f64
}

fn inside(family: usize, u: f64, v: f64, a: f64, b: f64) -> bool {
    match family % FAMILIES.len() {
        0 => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        1 => v.abs() <= b && u.abs() <= a * (b - v) / (2.0 * b),
        2 => u.abs() <= a && v.abs() <= b && (u.abs() <= 0.34 * a || v.abs() <= 0.34 * b),
        3 => {
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            (0.55..=1.0).contains(&r)
        }
        4 => u.abs() / a + v.abs() / b <= 1.0,
        _ => (u / a).powi(2) + (v / b).powi(2) <= 1.0 && v >= -0.15 * b,
    }
}

fn object_mask(spec: &ObjectSpec, size: usize) -> Array3<f64> {
    let (sin_r, cos_r) = spec.rot.sin_cos();
    let mut mask = Array3::<f64>::zeros((1, size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5) - spec.cy;
            let dx = (x as f64 + 0.5) - spec.cx;
            let u = dx * cos_r + dy * sin_r;
            let v = -dx * sin_r + dy * cos_r;
            if inside(spec.category, u, v, spec.half_w, spec.half_h) {
                mask[[0, y, x]] = 1.0;
            }
        }
    }
    mask
}

/// Stripe value in [-1,1] at a pixel, in global image coordinates.
fn stripe(category: usize, n_categories: usize, y: f64, x: f64, size: usize, phase: f64) -> f64 {
    let angle = stripe_angle(category, n_categories);
    let (s, c) = angle.sin_cos();
    let t = (x * c + y * s) / size as f64;
    (2.0 * std::f64::consts::PI * stripe_freq(category) * t + phase).sin()
}

/// Smooth per-image background noise: bilinearly upsampled coarse grid.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, amp: f64) -> Array3<f64> {
    let grid = 8usize.min(size);
    let coarse = Array3::from_shape_fn((1, grid, grid), |_| rng.random_range(-1.0..1.0));
    imageio::resize_chw(&coarse, size, size).mapv(|v| v * amp)
}

struct SceneArtifacts {
    image: Array3<f64>,
    target_mask: Array3<f64>,
    distractor_mask: Array3<f64>,
}

fn sample_object(rng: &mut ChaCha8Rng, category: usize, size: usize, axis_lo: f64, axis_hi: f64, vertical: bool) -> ObjectSpec {
    let s = size as f64;
    let along = rng.random_range(axis_lo * s..axis_hi * s);
    let across = rng.random_range(0.30 * s..0.70 * s);
    let (cy, cx) = if vertical { (across, along) } else { (along, across) };
    ObjectSpec {
        category,
        cy,
        cx,
        half_h: rng.random_range(0.10 * s..0.16 * s),
        half_w: rng.random_range(0.10 * s..0.16 * s),
        rot: rng.random_range(0.0..std::f64::consts::PI),
    }
}

fn render_camo_scene(
    rng: &mut ChaCha8Rng,
    target_cat: usize,
    n_categories: usize,
    size: usize,
) -> SceneArtifacts {
    let mut distractor_cat = rng.random_range(0..n_categories - 1);
    if distractor_cat >= target_cat {
        distractor_cat += 1;
    }
    let vertical = rng.random::<bool>();
    let target_first = rng.random::<bool>();
    let (lo_a, hi_a, lo_b, hi_b) = (0.19, 0.31, 0.69, 0.81);
    let (t_lo, t_hi, d_lo, d_hi) = if target_first {
        (lo_a, hi_a, lo_b, hi_b)
    } else {
        (lo_b, hi_b, lo_a, hi_a)
    };
    let target = sample_object(rng, target_cat, size, t_lo, t_hi, vertical);
    let distractor = sample_object(rng, distractor_cat, size, d_lo, d_hi, vertical);

    let base = [
        rng.random_range(0.42..0.58),
        rng.random_range(0.42..0.58),
        rng.random_range(0.42..0.58),
    ];
    let cloud = smooth_noise(rng, size, 0.05);
    let target_mask = object_mask(&target, size);
    let distractor_mask = object_mask(&distractor, size);
    let phase_t = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_d = rng.random_range(0.0..std::f64::consts::TAU);

    let mut image = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 + 0.5;
            let fx = x as f64 + 0.5;
            let striped = if target_mask[[0, y, x]] > 0.0 {
                0.09 * stripe(target_cat, n_categories, fy, fx, size, phase_t)
            } else if distractor_mask[[0, y, x]] > 0.0 {
                0.09 * stripe(distractor_cat, n_categories, fy, fx, size, phase_d)
            } else {
                cloud[[0, y, x]]
            };
            let grain = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                image[[c, y, x]] = (base[c] + striped + grain).clamp(0.0, 1.0);
            }
        }
    }
    SceneArtifacts {
        image,
        target_mask,
        distractor_mask,
    }
}

fn render_ref_scene(rng: &mut ChaCha8Rng, category: usize, n_categories: usize, size: usize) -> (Array3<f64>, Array3<f64>) {
    let s = size as f64;
    let obj = ObjectSpec {
        category,
        cy: rng.random_range(0.35 * s..0.65 * s),
        cx: rng.random_range(0.35 * s..0.65 * s),
        half_h: rng.random_range(0.14 * s..0.22 * s),
        half_w: rng.random_range(0.14 * s..0.22 * s),
        rot: rng.random_range(0.0..std::f64::consts::PI),
    };
    let mask = object_mask(&obj, size);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let grain = rng.random_range(-0.02..0.02);
            let value = if mask[[0, y, x]] > 0.0 {
                0.28 + 0.15 * stripe(category, n_categories, y as f64 + 0.5, x as f64 + 0.5, size, phase)
            } else {
                0.86
            };
            for c in 0..3 {
                image[[c, y, x]] = (value + grain).clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

fn split_point(total: usize) -> usize {
    // 80/20 with at least one sample on each side.
    ((total as f64 * 0.8).round() as usize).clamp(1, total - 1)
}

/// Generate the toy dataset under `out_path` in the canonical layout and
/// return the combined (train + test) index.
pub fn generate_toy_dataset(out_path: &Path, spec: &ToySpec) -> Result<DatasetIndex> {
    if spec.n_categories < 2 {
        return Err(Error::Config("toy generator needs n_categories >= 2".into()));
    }
    if spec.image_size < 32 {
        return Err(Error::Config("toy generator needs image_size >= 32".into()));
    }
    if spec.n_camo_per_cat < 2 || spec.n_ref_per_cat < 2 {
        return Err(Error::Config(
            "toy generator needs >= 2 camo and >= 2 ref images per category to fill both splits"
                .into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let camo_train_end = split_point(spec.n_camo_per_cat);
    let ref_train_end = split_point(spec.n_ref_per_cat);
    let mut scenes: BTreeMap<Split, BTreeMap<String, u32>> = BTreeMap::new();
    scenes.insert(Split::Train, BTreeMap::new());
    scenes.insert(Split::Test, BTreeMap::new());

    let mkdir = |p: &Path| -> Result<()> {
        std::fs::create_dir_all(p).map_err(|e| Error::WriteFailure {
            path: p.display().to_string(),
            source: e,
        })
    };

    for cat in 0..spec.n_categories {
        let name = category_name(cat);
        for split in [Split::Train, Split::Test] {
            mkdir(&out_path.join("Camo").join(split.dir_name()).join(&name))?;
            mkdir(&out_path.join("Ref").join(split.dir_name()).join(&name))?;
        }

        for i in 0..spec.n_camo_per_cat {
            let split = if i < camo_train_end { Split::Train } else { Split::Test };
            let dir = out_path.join("Camo").join(split.dir_name()).join(&name);
            let stem = format!("camo_{i:04}");
            let scene = render_camo_scene(&mut rng, cat, spec.n_categories, spec.image_size);
            imageio::save_jpeg(&dir.join(format!("{stem}.jpg")), &scene.image, 92)?;
            imageio::save_gray_png(&dir.join(format!("{stem}.png")), &scene.target_mask)?;
            imageio::save_gray_png(
                &dir.join(format!("{stem}.distractor.png")),
                &scene.distractor_mask,
            )?;
            scenes
                .get_mut(&split)
                .unwrap()
                .insert(format!("{name}/{stem}"), 2);
        }

        for i in 0..spec.n_ref_per_cat {
            let split = if i < ref_train_end { Split::Train } else { Split::Test };
            let dir = out_path.join("Ref").join(split.dir_name()).join(&name);
            let stem = format!("ref_{i:04}");
            let (image, mask) = render_ref_scene(&mut rng, cat, spec.n_categories, spec.image_size);
            imageio::save_jpeg(&dir.join(format!("{stem}.jpg")), &image, 92)?;
            imageio::save_gray_png(&dir.join(format!("{stem}.png")), &mask)?;
        }
    }

    for (split, table) in &scenes {
        let path = out_path
            .join("Camo")
            .join(split.dir_name())
            .join("scenes.json");
        let text = serde_json::to_string_pretty(table).expect("scene table serializes");
        std::fs::write(&path, text).map_err(|e| Error::WriteFailure {
            path: path.display().to_string(),
            source: e,
        })?;
    }

    let train = load_index(out_path, Split::Train)?;
    let test = load_index(out_path, Split::Test)?;
    Ok(DatasetIndex {
        camo_records: train
            .camo_records
            .into_iter()
            .chain(test.camo_records)
            .collect(),
        ref_records: train
            .ref_records
            .into_iter()
            .chain(test.ref_records)
            .collect(),
        categories: train.categories,
    })
}
