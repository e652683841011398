//! Manifest CSV (`image,mask,subgroup`) plus PGM files on disk.
//!
//! Labels and the sub-group count live in a `dataset.json` sidecar next to
//! the manifest; without one, `m` is inferred from the largest id.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::pgm::{self, GrayImage};
use super::{preprocess_image, resize_mask, tight_bbox, EmptyMaskPolicy, SegSample};
use crate::cemb::SubGroupCondition;
use crate::error::{Error, Result};
use crate::model::BBoxPrompt;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub image: String,
    pub mask: String,
    pub subgroup: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub m: usize,
    pub labels: Vec<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    m: usize,
    labels: Vec<String>,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    /// SHA-256 of the CSV form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    /// SHA-256 over the CSV form and the bytes of every listed file, with
    /// paths resolved against `dir`.
    pub fn content_hash(&self, dir: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_csv().as_bytes());
        for row in &self.rows {
            for rel in [&row.image, &row.mask] {
                let path = dir.join(rel);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            m: self.m,
            labels: self.labels.clone(),
        }
    }

    pub fn label(&self, g: usize) -> String {
        self.labels.get(g).cloned().unwrap_or_else(|| format!("g{g}"))
    }

    fn parse_csv(path: &Path, text: &str) -> Result<Vec<ManifestRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != ["image", "mask", "subgroup"] {
            return Err(Error::format(path, format!("header must be image,mask,subgroup, found {}", header.join(","))));
        }
        r.deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 2))))
            .collect()
    }

    /// Reads a manifest and its optional sidecar.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = Self::parse_csv(path, &text)?;
        let sidecar_path = path.with_file_name(SIDECAR_FILE);
        let (m, labels) = if sidecar_path.exists() {
            let raw = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
            let s: Sidecar = serde_json::from_str(&raw).map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
            (s.m, s.labels)
        } else {
            let m = rows.iter().map(|r| r.subgroup + 1).max().unwrap_or(0);
            (m, (0..m).map(|g| format!("g{g}")).collect())
        };
        if let Some(r) = rows.iter().find(|r| r.subgroup >= m) {
            return Err(Error::format(path, format!("sub-group id {} out of range for m = {m}", r.subgroup)));
        }
        Ok(Self { rows, m, labels })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        let side = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(&Sidecar {
            m: self.m,
            labels: self.labels.clone(),
        })
        .expect("sidecar serializes");
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }
}

fn to_gray(t: &Tensor<f32>, mask: bool) -> GrayImage {
    let s = t.shape();
    let pixels = t.data()[..s[1] * s[2]]
        .iter()
        .map(|&v| {
            if mask {
                if v >= 0.5 {
                    255
                } else {
                    0
                }
            } else {
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect();
    GrayImage {
        width: s[2],
        height: s[1],
        pixels,
    }
}

/// Writes 8-bit PGM images and masks plus the manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SegSample], manifest: &DatasetManifest) -> Result<()> {
    if samples.len() != manifest.rows.len() {
        return Err(Error::Invariant(format!(
            "{} samples but {} manifest rows",
            samples.len(),
            manifest.rows.len()
        )));
    }
    for (s, row) in samples.iter().zip(&manifest.rows) {
        if s.image.shape()[0] != 1 {
            return Err(Error::invalid("write_dataset", "PGM output needs single-channel images"));
        }
        for (rel, t, is_mask) in [(&row.image, &s.image, false), (&row.mask, &s.mask, true)] {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            pgm::write(&path, &to_gray(t, is_mask))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.write(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub image_size: usize,
    pub in_channels: usize,
    pub empty_mask: EmptyMaskPolicy,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<SegSample>,
    /// Rows matching `samples`, in order.
    pub manifest: DatasetManifest,
    /// Rows dropped under [`EmptyMaskPolicy::Exclude`].
    pub excluded: Vec<ManifestRow>,
}

fn gray_tensor(img: &GrayImage) -> Tensor<f32> {
    Tensor::from_fn([1, img.height, img.width], |i| f32::from(img.pixels[i]) / 255.0)
}

/// Loads every row of the manifest at `path`; relative file paths resolve
/// against the manifest's directory. Images are min-max normalized and
/// resized, masks binarized at 128.
pub fn load_disk_dataset(path: &Path, opts: LoadOptions) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(path)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for row in &manifest.rows {
        let img_path = base.join(&row.image);
        let mask_path = base.join(&row.mask);
        let img = pgm::read(&img_path)?;
        let msk = pgm::read(&mask_path)?;
        if (img.width, img.height) != (msk.width, msk.height) {
            return Err(Error::format(
                &mask_path,
                format!("mask is {}×{}, image is {}×{}", msk.width, msk.height, img.width, img.height),
            ));
        }
        let image = preprocess_image(&gray_tensor(&img), opts.image_size, opts.in_channels)?;
        let mask = Tensor::from_fn([1, msk.height, msk.width], |i| if msk.pixels[i] >= 128 { 1.0 } else { 0.0 });
        let mask = resize_mask(&mask, opts.image_size)?;
        let bbox = match tight_bbox(&mask) {
            Ok(b) => b,
            Err(_) if opts.empty_mask == EmptyMaskPolicy::Include => BBoxPrompt::full(opts.image_size, opts.image_size),
            Err(_) => {
                excluded.push(row.clone());
                continue;
            }
        };
        let sample = SegSample {
            image,
            mask,
            subgroup: SubGroupCondition::new(row.subgroup, manifest.m)?,
            bbox,
        };
        sample.validate().map_err(|e| Error::format(&img_path, e.to_string()))?;
        samples.push(sample);
        kept.push(row.clone());
    }
    Ok(LoadedDataset {
        samples,
        manifest: DatasetManifest {
            rows: kept,
            m: manifest.m,
            labels: manifest.labels,
        },
        excluded,
    })
}

/// In-memory counterpart of [`load_disk_dataset`] for freshly generated
/// samples: the same normalization, resizing and empty-mask policy, without
/// 8-bit quantization.
pub fn prepare_samples(samples: Vec<SegSample>, manifest: DatasetManifest, opts: LoadOptions) -> Result<LoadedDataset> {
    if samples.len() != manifest.rows.len() {
        return Err(Error::invalid(
            "prepare_samples",
            format!("{} samples for {} manifest rows", samples.len(), manifest.rows.len()),
        ));
    }
    let mut out = Vec::new();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (s, row) in samples.into_iter().zip(&manifest.rows) {
        let image = preprocess_image(&s.image, opts.image_size, opts.in_channels)?;
        let mask = resize_mask(&s.mask, opts.image_size)?;
        let bbox = match tight_bbox(&mask) {
            Ok(b) => b,
            Err(_) if opts.empty_mask == EmptyMaskPolicy::Include => BBoxPrompt::full(opts.image_size, opts.image_size),
            Err(_) => {
                excluded.push(row.clone());
                continue;
            }
        };
        out.push(SegSample { image, mask, subgroup: s.subgroup, bbox });
        kept.push(row.clone());
    }
    Ok(LoadedDataset {
        samples: out,
        manifest: DatasetManifest {
            rows: kept,
            m: manifest.m,
            labels: manifest.labels,
        },
        excluded,
    })
}
