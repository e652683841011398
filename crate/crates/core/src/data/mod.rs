//! Samples, preprocessing, splits and dataset interchange.

mod disk;
pub mod pgm;
mod synthetic;

pub use disk::{load_disk_dataset, prepare_samples, write_dataset, MANIFEST_FILE, SIDECAR_FILE, DatasetManifest, LoadOptions, LoadedDataset, ManifestRow};
pub use synthetic::{generate, ShapeFamily, SubgroupAppearance, SyntheticSpec};

use rand::Rng;

use crate::cemb::SubGroupCondition;
use crate::error::{Error, Result};
use crate::model::BBoxPrompt;
use crate::nn::resize_bilinear_tensor;
use crate::tensor::Tensor;

/// One image with its binary mask, sub-group and tight box.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `ch×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1×H×W`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub subgroup: SubGroupCondition,
    /// Tight box around the mask foreground (full image for an empty mask).
    pub bbox: BBoxPrompt,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn mask_is_empty(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0)
    }

    /// Checks value ranges and that the box is tight around the mask.
    pub fn validate(&self) -> Result<()> {
        let (is, ms) = (self.image.shape(), self.mask.shape());
        if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::shape("sample", is, ms));
        }
        if self.image.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invariant("image values outside [0, 1]".into()));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invariant("mask is not binary".into()));
        }
        let want = if self.mask_is_empty() {
            BBoxPrompt::full(self.width(), self.height())
        } else {
            tight_bbox(&self.mask)?
        };
        if want != self.bbox {
            return Err(Error::Invariant(format!("bbox {:?} is not the tight box {want:?}", self.bbox)));
        }
        Ok(())
    }
}

/// What to do with samples whose mask has no foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMaskPolicy {
    /// Drop the sample from training and evaluation.
    #[default]
    Exclude,
    /// Keep it with a full-image box and an all-zero target.
    Include,
}

/// `(x − min)/(max − min)`; a constant image maps to zeros.
pub fn minmax_normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let range = hi - lo;
        image.map(|v| (v - lo) / range)
    } else {
        image.map(|_| 0.0)
    }
}

/// Min-max normalization, bilinear resize to `size×size` and channel
/// replication up to `channels`. Input is `ch×H×W` with `ch` 1 or `channels`.
pub fn preprocess_image(image: &Tensor<f32>, size: usize, channels: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != channels) {
        return Err(Error::invalid(
            "preprocess",
            format!("image {s:?} cannot feed {channels} channels"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let x = minmax_normalize(image).reshape([1, c, h, w])?;
    let x = resize_bilinear_tensor(&x, size, size)?;
    let x = x.map(|v| v.clamp(0.0, 1.0));
    let plane = size * size;
    if c == channels {
        return x.reshape([c, size, size]);
    }
    let data: Vec<f32> = (0..channels).flat_map(|_| x.data()[..plane].iter().copied()).collect();
    Tensor::new([channels, size, size], data)
}

/// Resizes a binary mask by bilinear interpolation followed by a 0.5 threshold.
pub fn resize_mask(mask: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = mask.shape();
    if s[1] == size && s[2] == size {
        return Ok(mask.clone());
    }
    let x = mask.clone().reshape([1, 1, s[1], s[2]])?;
    let x = resize_bilinear_tensor(&x, size, size)?;
    x.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).reshape([1, size, size])
}

/// Tight box of the foreground of a `…×H×W` mask (exclusive maxima).
pub fn tight_bbox(mask: &Tensor<f32>) -> Result<BBoxPrompt> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut b: Option<BBoxPrompt> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (y, x) = ((i / w) % h, i % w);
        b = Some(match b {
            None => BBoxPrompt::new(x, y, x + 1, y + 1),
            Some(b) => BBoxPrompt::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x + 1), b.y_max.max(y + 1)),
        });
    }
    b.ok_or_else(|| Error::invalid("derive_bbox", "mask has no foreground pixel"))
}

/// Extends each side of `tight` outward by an independent uniform integer in
/// `[0, perturb_max]`, clamped to the image.
pub fn perturb_bbox<R: Rng + ?Sized>(tight: BBoxPrompt, width: usize, height: usize, perturb_max: usize, rng: &mut R) -> BBoxPrompt {
    if perturb_max == 0 {
        return tight;
    }
    let mut d = || rng.random_range(0..=perturb_max);
    let (l, t, r, b) = (d(), d(), d(), d());
    BBoxPrompt::new(
        tight.x_min.saturating_sub(l),
        tight.y_min.saturating_sub(t),
        (tight.x_max + r).min(width),
        (tight.y_max + b).min(height),
    )
}

/// Tight box of `mask`, perturbed outward by up to `perturb_max` pixels per side.
pub fn derive_bbox<R: Rng + ?Sized>(mask: &Tensor<f32>, perturb_max: usize, rng: &mut R) -> Result<BBoxPrompt> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok(perturb_bbox(tight_bbox(mask)?, w, h, perturb_max, rng))
}

/// Box used as the prompt for `sample`: perturbed during training, tight at
/// evaluation, full-image for empty masks.
pub fn prompt_for<R: Rng + ?Sized>(sample: &SegSample, perturb_max: usize, rng: &mut R) -> BBoxPrompt {
    if sample.mask_is_empty() {
        return sample.bbox;
    }
    perturb_bbox(sample.bbox, sample.width(), sample.height(), perturb_max, rng)
}

/// Index sets of a stratified three-way split.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per sub-group: shuffle, hold out `1 − ratio` for test, then `1 − ratio` of
/// the rest for validation. Each part keeps at least one sample per sub-group.
pub fn split_indices(subgroups: &[usize], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split", format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let m = subgroups.iter().copied().max().map_or(0, |v| v + 1);
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for g in 0..m {
        let mut idx: Vec<usize> = (0..subgroups.len()).filter(|&i| subgroups[i] == g).collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            return Err(Error::invalid(
                "split",
                format!("sub-group {g} has {n} samples; at least 3 are needed"),
            ));
        }
        let mut rng = crate::rng::stream(seed, "split", g as u64);
        // Fisher-Yates on a per-group stream keeps each group's split
        // independent of the others.
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let keep = ((n as f64 * ratio).round() as usize).clamp(2, n - 1);
        let train = ((keep as f64 * ratio).round() as usize).clamp(1, keep - 1);
        out.train.extend_from_slice(&idx[..train]);
        out.val.extend_from_slice(&idx[train..keep]);
        out.test.extend_from_slice(&idx[keep..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Stratified 80:20-style split of a manifest into (train, val, test).
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let ids: Vec<usize> = manifest.rows.iter().map(|r| r.subgroup).collect();
    let s = split_indices(&ids, ratio, seed)?;
    Ok((manifest.subset(&s.train), manifest.subset(&s.val), manifest.subset(&s.test)))
}

/// Number of 4-connected foreground regions of a `…×H×W` mask.
pub fn connected_components(mask: &Tensor<f32>) -> usize {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let fg: Vec<bool> = mask.data()[..h * w].iter().map(|&v| v != 0.0).collect();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}
