//! Synthetic datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, `images/NNNNNN.png`,
//! `labels/NNNNNN.lines.txt` (CULane grammar) and `tusimple.json`
//! (TuSimple records sampled on fixed rows).

pub mod annotations;
pub mod scene;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use scene::{generate_scene, Category, Sample, SceneConfig};

use crate::error::{Error, Result};
use crate::geometry::ImageSpec;
use annotations::TusimpleRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TUSIMPLE_FILE: &str = "tusimple.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub image: String,
    pub annotation: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub scene: SceneConfig,
    pub entries: Vec<ManifestEntry>,
    pub category_histogram: BTreeMap<Category, usize>,
    pub tusimple: String,
}

impl DatasetManifest {
    pub fn image(&self) -> ImageSpec {
        self.scene.image
    }

    /// SHA-256 of the serialized manifest.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {} is not supported (expected {MANIFEST_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Rows at which TuSimple records sample each lane: every `H / 32` px from
/// the bottom row upwards, returned top to bottom.
pub fn h_samples(image: &ImageSpec) -> Vec<f64> {
    let step = (image.height / 32).max(1);
    let mut ys: Vec<f64> = (0..)
        .map(|k| image.height as f64 - 1.0 - (k * step) as f64)
        .take_while(|&y| y >= 0.0)
        .collect();
    ys.reverse();
    ys
}

pub fn array_to_rgb(img: &Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |u, v| {
        let px = |c: usize| (img[(c, v as usize, u as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, v, u)| {
        img.get_pixel(u as u32, v as u32)[c] as f32 / 255.0
    })
}

pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    Ok(rgb_to_array(&image::open(path)?.to_rgb8()))
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(dir)?.next().is_none())
}

/// Generates `count` scenes into `dir`. Refuses a non-empty directory unless
/// `force` is set, in which case previous dataset files are replaced.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, count: u64, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if !dir_is_empty(dir)? {
        if !force {
            return Err(Error::Refused(format!(
                "{} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
        for sub in ["images", "labels"] {
            if dir.join(sub).exists() {
                fs::remove_dir_all(dir.join(sub))?;
            }
        }
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let hs = h_samples(&cfg.image);
    let mut entries = Vec::new();
    let mut hist = BTreeMap::new();
    let mut records = Vec::new();
    for index in 0..count {
        let sample = generate_scene(cfg, index)?;
        let image = format!("images/{index:06}.png");
        let annotation = format!("labels/{index:06}.lines.txt");
        array_to_rgb(&sample.image).save(dir.join(&image))?;
        annotations::write_culane(&dir.join(&annotation), &sample.lanes)?;
        records.push(TusimpleRecord::from_polylines(&sample.lanes, &hs, &image));
        *hist.entry(sample.category).or_insert(0) += 1;
        log::info!("generated {image} ({})", sample.category);
        entries.push(ManifestEntry {
            index,
            image,
            annotation,
            category: sample.category,
        });
    }
    annotations::write_tusimple(&dir.join(TUSIMPLE_FILE), &records)?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_VERSION,
        scene: cfg.clone(),
        entries,
        category_histogram: hist,
        tusimple: TUSIMPLE_FILE.to_string(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every sample listed in a dataset manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::read(dir)?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Sample {
                image: load_image(&dir.join(&e.image))?,
                lanes: annotations::read_culane(&dir.join(&e.annotation))?,
                category: e.category,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
