//! Seeded generator of heterogeneous segmentation data.
//!
//! Sub-group `g` draws a star-shaped foreground region with intensity around
//! `foreground_mean[g]` on a background around `background_mean[g]`, plus
//! pixel noise. With `distractor` enabled every image also carries a second,
//! unlabelled region next to the target whose intensity comes from another
//! sub-group, so that which region is the target depends on the sub-group.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{tight_bbox, DatasetManifest, ManifestRow, SegSample};
use crate::cemb::SubGroupCondition;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    /// Ellipse with a random low-order radial harmonic.
    Blob,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupAppearance {
    pub label: String,
    pub foreground_mean: f64,
    pub foreground_std: f64,
    pub background_mean: f64,
    pub background_std: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    pub shape: ShapeFamily,
    pub min_radius: f64,
    pub max_radius: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of sub-groups; must equal `subgroups.len()`.
    pub m: usize,
    pub subgroups: Vec<SubgroupAppearance>,
    pub samples_per_subgroup: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub distractor: bool,
    /// Required gap between any two sub-groups' foreground means.
    #[serde(default)]
    pub min_separation: f64,
}

impl SyntheticSpec {
    fn appearance(label: &str, fg: f64) -> SubgroupAppearance {
        SubgroupAppearance {
            label: label.into(),
            foreground_mean: fg,
            foreground_std: 0.02,
            background_mean: 0.1,
            background_std: 0.02,
            noise: 0.05,
            shape: ShapeFamily::Blob,
            min_radius: 6.0,
            max_radius: 11.0,
        }
    }

    /// Three sub-groups with foreground means 0.3, 0.6 and 0.9.
    pub fn heterogeneous(seed: u64) -> Self {
        Self {
            m: 3,
            subgroups: vec![
                Self::appearance("dim", 0.3),
                Self::appearance("mid", 0.6),
                Self::appearance("bright", 0.9),
            ],
            samples_per_subgroup: 100,
            image_size: 64,
            seed,
            distractor: true,
            min_separation: 0.25,
        }
    }

    /// Three labels sharing one appearance and no distractors.
    pub fn homogeneous(seed: u64) -> Self {
        Self {
            m: 3,
            subgroups: ["a", "b", "c"].iter().map(|l| Self::appearance(l, 0.6)).collect(),
            samples_per_subgroup: 100,
            image_size: 64,
            seed,
            distractor: false,
            min_separation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 {
            return fail("spec.m must be >= 1".into());
        }
        if self.subgroups.len() != self.m {
            return fail(format!("spec.m is {} but {} sub-groups are described", self.m, self.subgroups.len()));
        }
        if self.samples_per_subgroup == 0 {
            return fail("spec.samples_per_subgroup must be >= 1".into());
        }
        for (g, a) in self.subgroups.iter().enumerate() {
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !unit(a.foreground_mean) || !unit(a.background_mean) {
                return fail(format!("sub-group {g}: intensity means must lie in [0, 1]"));
            }
            if [a.foreground_std, a.background_std, a.noise].iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
                return fail(format!("sub-group {g}: standard deviations must be finite and >= 0"));
            }
            if !(a.min_radius >= 2.0 && a.max_radius >= a.min_radius) {
                return fail(format!("sub-group {g}: need 2 <= min_radius <= max_radius"));
            }
            let reach = 2.0 * a.max_radius * 1.25 + 4.0;
            if reach >= self.image_size as f64 {
                return fail(format!(
                    "sub-group {g}: max_radius {} too large for image_size {}",
                    a.max_radius, self.image_size
                ));
            }
        }
        for i in 0..self.m {
            for j in i + 1..self.m {
                let gap = (self.subgroups[i].foreground_mean - self.subgroups[j].foreground_mean).abs();
                if gap + 1e-12 < self.min_separation {
                    return fail(format!(
                        "foreground means of sub-groups {i} and {j} differ by {gap}, less than min_separation {}",
                        self.min_separation
                    ));
                }
            }
        }
        Ok(())
    }
}

struct Shape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    harmonic: u32,
    amp: f64,
    phase: f64,
}

impl Shape {
    fn draw<R: Rng + ?Sized>(a: &SubgroupAppearance, rng: &mut R) -> Self {
        let r = rng.random_range(a.min_radius..=a.max_radius);
        let aspect = rng.random_range(0.7..=1.0);
        let (harmonic, amp) = match a.shape {
            ShapeFamily::Ellipse => (0, 0.0),
            ShapeFamily::Blob => (rng.random_range(3..=5), rng.random_range(0.1..=0.25)),
        };
        Self {
            cx: 0.0,
            cy: 0.0,
            rx: r,
            ry: r * aspect,
            angle: rng.random_range(0.0..PI),
            harmonic,
            amp,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn reach(&self) -> f64 {
        self.rx.max(self.ry) * (1.0 + self.amp)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let q = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let rho = 1.0 + self.amp * (f64::from(self.harmonic) * v.atan2(u) + self.phase).sin();
        q <= rho
    }

    fn raster(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|i| self.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .collect()
    }
}

fn normal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("validated std").sample(rng)
}

fn dilate(mask: &[bool], size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size && mask[yy as usize * size + xx as usize]
                })
            })
        })
        .collect()
}

fn sample(spec: &SyntheticSpec, group: usize, index: u64) -> Result<SegSample> {
    let size = spec.image_size;
    let a = &spec.subgroups[group];
    let mut rng = stream(spec.seed, "sample", index);
    let fg = normal(a.foreground_mean, a.foreground_std, &mut rng);
    let bg = normal(a.background_mean, a.background_std, &mut rng);

    let mut target = Shape::draw(a, &mut rng);
    let reach = target.reach();
    target.cx = rng.random_range(reach + 1.0..=size as f64 - reach - 1.0);
    target.cy = rng.random_range(reach + 1.0..=size as f64 - reach - 1.0);
    let mask = target.raster(size);

    let mut second: Option<(Vec<bool>, f64)> = None;
    if spec.distractor && spec.m > 1 {
        let other = {
            let k = rng.random_range(0..spec.m - 1);
            if k >= group {
                k + 1
            } else {
                k
            }
        };
        let b = &spec.subgroups[other];
        let level = normal(b.foreground_mean, b.foreground_std, &mut rng);
        let mut d = Shape::draw(b, &mut rng);
        let keep_out = dilate(&mask, size);
        for _ in 0..32 {
            let dir = rng.random_range(0.0..2.0 * PI);
            let dist = reach + d.reach() * rng.random_range(0.6..=1.0) + rng.random_range(1.0..=4.0);
            d.cx = target.cx + dist * dir.cos();
            d.cy = target.cy + dist * dir.sin();
            let r = d.reach();
            if d.cx - r < 0.0 || d.cy - r < 0.0 || d.cx + r > size as f64 || d.cy + r > size as f64 {
                continue;
            }
            let raster = d.raster(size);
            if raster.iter().zip(&keep_out).all(|(&p, &k)| !(p && k)) && raster.iter().any(|&p| p) {
                second = Some((raster, level));
                break;
            }
        }
    }

    let pixels: Vec<f32> = (0..size * size)
        .map(|i| {
            let base = if mask[i] {
                fg
            } else {
                match &second {
                    Some((r, level)) if r[i] => *level,
                    _ => bg,
                }
            };
            normal(base, a.noise, &mut rng).clamp(0.0, 1.0) as f32
        })
        .collect();
    let image = Tensor::new([1, size, size], pixels)?;
    let mask = Tensor::new([1, size, size], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let bbox = tight_bbox(&mask)?;
    Ok(SegSample {
        image,
        mask,
        subgroup: SubGroupCondition::new(group, spec.m)?,
        bbox,
    })
}

/// Generates `m × samples_per_subgroup` samples, sub-group-major. Images are
/// raw (not min-max normalized). Sample `k` uses its own random stream.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<SegSample>, DatasetManifest)> {
    spec.validate()?;
    let n = spec.samples_per_subgroup;
    let mut samples = Vec::with_capacity(spec.m * n);
    let mut rows = Vec::with_capacity(spec.m * n);
    for g in 0..spec.m {
        for j in 0..n {
            let k = g * n + j;
            samples.push(sample(spec, g, k as u64)?);
            rows.push(ManifestRow {
                image: format!("images/{k:05}.pgm"),
                mask: format!("masks/{k:05}.pgm"),
                subgroup: g,
            });
        }
    }
    let manifest = DatasetManifest {
        rows,
        m: spec.m,
        labels: spec.subgroups.iter().map(|a| a.label.clone()).collect(),
    };
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::connected_components;

    fn small(spec: &mut SyntheticSpec) {
        spec.samples_per_subgroup = 20;
    }

    #[test]
    fn noiseless_foreground_mean_is_exact() {
        let mut spec = SyntheticSpec::homogeneous(0);
        small(&mut spec);
        for a in &mut spec.subgroups {
            a.foreground_mean = 0.9;
            a.background_mean = 0.1;
            a.foreground_std = 0.0;
            a.background_std = 0.0;
            a.noise = 0.0;
        }
        let (samples, _) = generate(&spec).unwrap();
        for s in &samples {
            let (sum, n) = s
                .image
                .data()
                .iter()
                .zip(s.mask.data())
                .filter(|(_, &m)| m == 1.0)
                .fold((0.0f64, 0usize), |(a, n), (&v, _)| (a + f64::from(v), n + 1));
            assert!((sum / n as f64 - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_counted() {
        let spec = SyntheticSpec::heterogeneous(3);
        let (a, ma) = generate(&spec).unwrap();
        let (b, mb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(ma.rows.len(), 300);
        let mut ids: Vec<usize> = ma.rows.iter().map(|r| r.subgroup).collect();
        ids.dedup();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn samples_are_valid_single_regions() {
        let mut spec = SyntheticSpec::heterogeneous(5);
        small(&mut spec);
        let (samples, _) = generate(&spec).unwrap();
        for s in &samples {
            s.validate().unwrap();
            assert_eq!(connected_components(&s.mask), 1);
        }
    }

    #[test]
    fn foreground_means_are_separated() {
        let spec = SyntheticSpec::heterogeneous(1);
        let (samples, _) = generate(&spec).unwrap();
        let mut means = vec![(0.0f64, 0usize); spec.m];
        for s in &samples {
            let e = &mut means[s.subgroup.index()];
            for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
                if m == 1.0 {
                    e.0 += f64::from(v);
                    e.1 += 1;
                }
            }
        }
        let means: Vec<f64> = means.iter().map(|(s, n)| s / *n as f64).collect();
        for i in 0..spec.m {
            for j in i + 1..spec.m {
                assert!((means[i] - means[j]).abs() >= spec.min_separation, "{means:?}");
            }
        }
    }

    #[test]
    fn distractor_present_outside_mask() {
        let mut spec = SyntheticSpec::heterogeneous(2);
        small(&mut spec);
        for a in &mut spec.subgroups {
            a.noise = 0.0;
            a.foreground_std = 0.0;
            a.background_std = 0.0;
        }
        let (samples, _) = generate(&spec).unwrap();
        let with = samples
            .iter()
            .filter(|s| {
                s.image.data().iter().zip(s.mask.data()).any(|(&v, &m)| m == 0.0 && (f64::from(v) - 0.1).abs() > 0.05)
            })
            .count();
        assert!(with * 10 >= samples.len() * 9, "{with} of {}", samples.len());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSpec::heterogeneous(0);
        s.m = 0;
        assert!(generate(&s).is_err());
        let mut s = SyntheticSpec::heterogeneous(0);
        s.subgroups[1].foreground_mean = 0.4;
        assert!(generate(&s).is_err());
        let mut s = SyntheticSpec::heterogeneous(0);
        s.subgroups[0].max_radius = 40.0;
        assert!(generate(&s).is_err());
        let json = r#"{"m":1,"subgroups":[],"samples_per_subgroup":1,"image_size":64,"seed":0,"bogus":1}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(json).is_err());
    }
}
