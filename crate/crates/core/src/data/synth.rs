//! Synthetic ultrasound-like dataset with a configurable class imbalance.
//!
//! Each non-background class is a parametric bright shape drawn at a random
//! pose over a dark, slowly varying background; class 0 is shapeless
//! texture. Multiplicative speckle `p·(1 + a·u)`, `u ~ U[−1, 1]`, is applied
//! last and the result is clamped to `[0, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{write_image, RasterImage};
use super::manifest::{DatasetManifest, ManifestEntry, REFERENCE_CLASSES};
use super::split::proportional_counts;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Texture,
    Ellipse,
    Rectangle,
    Cross,
    Ring,
    Bar,
    TwoBlob,
    Arc,
    SpeckleDisc,
}

const FOREGROUND_KINDS: [ShapeKind; 8] = [
    ShapeKind::Ellipse,
    ShapeKind::Rectangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Bar,
    ShapeKind::TwoBlob,
    ShapeKind::Arc,
    ShapeKind::SpeckleDisc,
];

/// Shape drawn for one class; `size` is the nominal radius as a fraction of
/// the shorter image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub kind: ShapeKind,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ClassShape>,
    pub speckle: f64,
    pub seed: u64,
}

/// Class 0 is texture; later classes cycle through the eight shapes, and a
/// second cycle uses a smaller size so every class stays distinguishable.
pub fn default_shapes(classes: usize) -> Vec<ClassShape> {
    (0..classes)
        .map(|j| {
            if j == 0 {
                ClassShape {
                    kind: ShapeKind::Texture,
                    size: 0.0,
                }
            } else {
                let cycle = (j - 1) / FOREGROUND_KINDS.len();
                ClassShape {
                    kind: FOREGROUND_KINDS[(j - 1) % FOREGROUND_KINDS.len()],
                    size: if cycle == 0 { 0.32 } else { 0.18 },
                }
            }
        })
        .collect()
}

/// Reference-dataset class counts rescaled to `total` images over `classes` classes.
///
/// With 16 classes the original class order is kept. With fewer, classes are
/// taken at evenly spaced ranks of the count-sorted table so the largest
/// ("Other") and smallest classes are always included and the
/// majority:minority ratio stays ≈ 1798:138.
pub fn reference_profile(classes: usize, total: usize) -> Result<(Vec<String>, Vec<usize>)> {
    if !(2..=16).contains(&classes) {
        return Err(Error::invalid(format!("reference profile supports 2..=16 classes, got {classes}")));
    }
    if total < classes {
        return Err(Error::invalid(format!("total {total} smaller than class count {classes}")));
    }
    let picked: Vec<(&str, usize)> = if classes == 16 {
        REFERENCE_CLASSES.to_vec()
    } else {
        let mut sorted = REFERENCE_CLASSES.to_vec();
        sorted.sort_by_key(|c| std::cmp::Reverse(c.1));
        (0..classes)
            .map(|i| sorted[(i * 15 + (classes - 1) / 2) / (classes - 1)])
            .collect()
    };
    let sum: usize = picked.iter().map(|p| p.1).sum();
    let ratios: Vec<f64> = picked.iter().map(|p| p.1 as f64 / sum as f64).collect();
    let mut counts = proportional_counts(total, &ratios);
    // keep every class non-empty, taking from the largest
    for i in 0..counts.len() {
        if counts[i] == 0 {
            counts[i] = 1;
            let max = (0..counts.len()).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            counts[max] -= 1;
        }
    }
    Ok((picked.iter().map(|p| p.0.to_string()).collect(), counts))
}

impl SynthSpec {
    pub fn reference(classes: usize, total: usize, size: usize, seed: u64) -> Result<Self> {
        let (class_names, counts) = reference_profile(classes, total)?;
        Ok(SynthSpec {
            shapes: default_shapes(classes),
            class_names,
            counts,
            height: size,
            width: size,
            speckle: 0.3,
            seed,
        })
    }

    /// Same class layout as [`SynthSpec::reference`] with `per_class` images each.
    pub fn balanced(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Self> {
        let (class_names, _) = reference_profile(classes, classes.max(16))?;
        Ok(SynthSpec {
            shapes: default_shapes(classes),
            class_names,
            counts: vec![per_class; classes],
            height: size,
            width: size,
            speckle: 0.3,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k == 0 || self.counts.len() != k || self.shapes.len() != k {
            return Err(Error::invalid(format!(
                "synth spec needs matching class_names/counts/shapes, got {}/{}/{}",
                k,
                self.counts.len(),
                self.shapes.len()
            )));
        }
        if let Some(j) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {j} has zero images")));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic images must be at least 8×8"));
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::invalid(format!("speckle amplitude {} outside [0, 1]", self.speckle)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(label, image_id)` in generation order.
    pub fn layout(&self) -> Vec<(usize, String)> {
        let mut out = Vec::with_capacity(self.total());
        for (label, &n) in self.counts.iter().enumerate() {
            for i in 0..n {
                out.push((label, format!("c{label:02}_{i:05}")));
            }
        }
        out
    }

    /// Renders image number `index` of [`SynthSpec::layout`].
    pub fn render(&self, index: usize, label: usize) -> RasterImage {
        let mut rng = keyed_rng(self.seed, "synth", b"", index as u64);
        render_sample(self.shapes[label], self.height, self.width, self.speckle, &mut rng)
    }
}

/// Directory-safe form of a class name.
pub fn class_dir_name(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_');
    if trimmed.is_empty() {
        "class".into()
    } else {
        trimmed.into()
    }
}

/// Renders every image in memory, quantized to 8 bits exactly as it would be
/// written to disk.
pub fn synth_in_memory(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<RasterImage>)> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.total());
    let mut images = Vec::with_capacity(spec.total());
    for (index, (label, id)) in spec.layout().into_iter().enumerate() {
        let img = spec.render(index, label);
        images.push(RasterImage::from_bytes(img.height(), img.width(), img.channels(), &img.to_bytes())?);
        entries.push(ManifestEntry {
            path: format!("{}/{}.ppm", class_dir_name(&spec.class_names[label]), id),
            image_id: id,
            label,
        });
    }
    Ok((DatasetManifest::new(entries, spec.class_names.clone())?, images))
}

/// Writes `<root>/<class_dir>/<image_id>.ppm`, `<root>/manifest.csv`,
/// `<root>/classes.txt` and `<root>/synth_spec.json`.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (manifest, images) = synth_in_memory(spec)?;
    for (entry, img) in manifest.entries.iter().zip(&images) {
        write_image(img, &root.join(&entry.path))?;
    }
    manifest.write(&root.join("manifest.csv"))?;
    let spec_path = root.join("synth_spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest.with_base_dir(root))
}

/// Whether local point `(u, v)` (in units of the shape radius) is inside.
fn inside(kind: ShapeKind, u: f64, v: f64, aspect: f64) -> bool {
    let r2 = u * u + v * v;
    match kind {
        ShapeKind::Texture => false,
        ShapeKind::Ellipse => u * u + (v * aspect) * (v * aspect) <= 1.0,
        ShapeKind::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85 / aspect,
        ShapeKind::Cross => (u.abs() <= 1.0 && v.abs() <= 0.22) || (v.abs() <= 1.0 && u.abs() <= 0.22),
        ShapeKind::Ring => (0.36..=1.0).contains(&r2),
        ShapeKind::Bar => u.abs() <= 1.2 && v.abs() <= 0.2,
        ShapeKind::TwoBlob => {
            let a = (u + 0.6).powi(2) + v * v;
            let b = (u - 0.6).powi(2) + v * v;
            a <= 0.16 || b <= 0.16
        }
        ShapeKind::Arc => (0.3025..=1.0).contains(&r2) && v >= 0.0,
        ShapeKind::SpeckleDisc => r2 <= 0.81,
    }
}

fn render_sample<R: Rng>(shape: ClassShape, h: usize, w: usize, speckle: f64, rng: &mut R) -> RasterImage {
    let side = h.min(w) as f64;
    // background: dark level plus a few slow sinusoids
    let base = rng.gen_range(0.08..0.2);
    let waves = if shape.kind == ShapeKind::Texture { 5 } else { 3 };
    let amp = if shape.kind == ShapeKind::Texture { 0.07 } else { 0.035 };
    let bg_waves: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) * 2.0 * PI / side,
                rng.gen_range(0.5..3.0) * 2.0 * PI / side,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..1.0) * amp,
            )
        })
        .collect();

    let radius = shape.size * side * rng.gen_range(0.85..1.15);
    let cx = w as f64 / 2.0 + rng.gen_range(-0.15..0.15) * w as f64;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.15..0.15) * h as f64;
    let theta = rng.gen_range(0.0..2.0 * PI);
    let aspect = match shape.kind {
        ShapeKind::Ellipse => rng.gen_range(1.5..2.2),
        ShapeKind::Rectangle => rng.gen_range(1.0..1.4),
        _ => 1.0,
    };
    let level = rng.gen_range(0.55..0.85);
    let (sin_t, cos_t) = theta.sin_cos();

    let mut intensity = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut bg = base;
            for &(fx, fy, ph, a) in &bg_waves {
                bg += a * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            let mut cover = 0.0;
            if shape.kind != ShapeKind::Texture && radius > 0.0 {
                // 2×2 supersampling for soft edges
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let dx = x as f64 + sx - cx;
                    let dy = y as f64 + sy - cy;
                    let u = (cos_t * dx + sin_t * dy) / radius;
                    let v = (-sin_t * dx + cos_t * dy) / radius;
                    if inside(shape.kind, u, v, aspect) {
                        cover += 0.25;
                    }
                }
            }
            let mut fg = level;
            if shape.kind == ShapeKind::SpeckleDisc && cover > 0.0 {
                fg *= rng.gen_range(0.35..1.0);
            }
            intensity[y * w + x] = bg * (1.0 - cover) + fg * cover;
        }
    }

    const TINT: [f64; 3] = [1.0, 0.96, 0.9];
    let mut pixels = Vec::with_capacity(h * w * 3);
    for v in intensity {
        let noisy = v * (1.0 + speckle * rng.gen_range(-1.0..=1.0));
        for t in TINT {
            pixels.push(noisy.clamp(0.0, 1.0) * t);
        }
    }
    RasterImage::from_clamped(h, w, 3, pixels).expect("dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::decode_image;
    use crate::data::manifest::class_counts;

    fn small_spec(counts: Vec<usize>) -> SynthSpec {
        let k = counts.len();
        SynthSpec {
            class_names: (0..k).map(|i| format!("class {i}")).collect(),
            counts,
            height: 16,
            width: 16,
            shapes: default_shapes(k),
            speckle: 0.3,
            seed: 5,
        }
    }

    #[test]
    fn counts_and_labels() {
        let (m, imgs) = synth_in_memory(&small_spec(vec![3, 5])).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(imgs.len(), 8);
        let labels: Vec<usize> = m.entries.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(class_counts(&m), vec![3, 5]);
    }

    #[test]
    fn files_are_byte_identical_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small_spec(vec![2, 2, 1]);
        let ma = synth_generate(&spec, a.path()).unwrap();
        synth_generate(&spec, b.path()).unwrap();
        for e in &ma.entries {
            let fa = fs::read(a.path().join(&e.path)).unwrap();
            let fb = fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(fa, fb);
            let img = decode_image(&a.path().join(&e.path)).unwrap();
            assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(
            fs::read(a.path().join("manifest.csv")).unwrap(),
            fs::read(b.path().join("manifest.csv")).unwrap()
        );
        let mut other = spec.clone();
        other.seed += 1;
        let c = tempfile::tempdir().unwrap();
        synth_generate(&other, c.path()).unwrap();
        let e = &ma.entries[0];
        assert_ne!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(c.path().join(&e.path)).unwrap());
    }

    #[test]
    fn in_memory_matches_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(vec![1, 2]);
        let (_, imgs) = synth_in_memory(&spec).unwrap();
        let m = synth_generate(&spec, dir.path()).unwrap();
        for (e, img) in m.entries.iter().zip(&imgs) {
            assert_eq!(&decode_image(&m.resolve(e)).unwrap(), img);
        }
    }

    #[test]
    fn reference_profile_keeps_the_imbalance_ratio() {
        let (names, counts) = reference_profile(16, 5309).unwrap();
        assert_eq!(counts, REFERENCE_CLASSES.iter().map(|c| c.1).collect::<Vec<_>>());
        assert_eq!(names[0], "Other");

        for (k, total) in [(16, 1600), (6, 1600), (4, 900)] {
            let (names, counts) = reference_profile(k, total).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), total);
            assert_eq!(names[0], "Other");
            let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
            let target = 1798.0 / 138.0;
            // rounding of the smallest class bounds the deviation
            let min = *counts.iter().min().unwrap() as f64;
            assert!((ratio - target).abs() <= target / min + 1e-9, "k={k}: {ratio} vs {target}");
        }
    }

    #[test]
    fn class_dir_names_are_safe() {
        assert_eq!(class_dir_name("Head (PPP, quadrigeminal plate)"), "head_ppp_quadrigeminal_plate");
        assert_eq!(class_dir_name("Bladder (CDC)"), "bladder_cdc");
    }

    #[test]
    fn invalid_specs() {
        assert!(synth_in_memory(&small_spec(vec![0, 2])).is_err());
        let mut s = small_spec(vec![1]);
        s.shapes.clear();
        assert!(synth_in_memory(&s).is_err());
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(synth_generate(&small_spec(vec![1, 1]), &blocker.join("sub")).is_err());
    }
}
