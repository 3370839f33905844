//! Synthetic ground-truth scenes: piecewise-constant reflectance mosaics
//! rendered under a random illuminant.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::color::{render_under_illuminant, Illuminant};
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::io::manifest::{self, DatasetManifest, ManifestRecord};
use crate::io::pnm;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    /// Voronoi cells of constant reflectance.
    pub num_regions: usize,
    /// Range of region brightness.
    pub albedo_range: (f64, f64),
    /// Maximum relative per-channel deviation of a chromatic region from gray.
    pub chroma: f64,
    /// Probability that a region is achromatic.
    pub achromatic_fraction: f64,
    /// Range of raw illuminant components before normalization.
    pub illuminant_range: (f64, f64),
    /// Smallest allowed normalized illuminant component.
    pub min_normalized_component: f64,
    pub noise_std: f64,
    /// Rescale channels so the canonical scene's channel means are equal.
    pub gray_world_balanced: bool,
    /// Exclude a square in the bottom-right corner (a stand-in for a calibration chart).
    pub mask_chart: bool,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            width: 96,
            height: 96,
            num_regions: 64,
            albedo_range: (0.05, 0.9),
            chroma: 0.3,
            achromatic_fraction: 0.3,
            illuminant_range: (0.15, 1.0),
            min_normalized_component: 0.1,
            noise_std: 0.0,
            gray_world_balanced: true,
            mask_chart: false,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("scene must be at least 2×2, got {}×{}", self.width, self.height));
        }
        if self.num_regions < 2 {
            return bad("num_regions must be >= 2".into());
        }
        let (lo, hi) = self.albedo_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("albedo_range must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        if !(0.0..1.0).contains(&self.chroma) {
            return bad(format!("chroma must be in [0, 1), got {}", self.chroma));
        }
        if !(0.0..=1.0).contains(&self.achromatic_fraction) {
            return bad(format!("achromatic_fraction must be in [0, 1], got {}", self.achromatic_fraction));
        }
        let (lo, hi) = self.illuminant_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("illuminant_range must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        // Below 1/sqrt(3) the gray direction always qualifies, so rejection sampling terminates.
        let floor = self.min_normalized_component;
        if !(0.0..1.0 / 3f64.sqrt()).contains(&floor) {
            return bad(format!("min_normalized_component must be in [0, 1/sqrt(3)), got {floor}"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub canonical: LinearImage,
    pub image: LinearImage,
    pub illuminant: Illuminant,
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_illuminant(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Illuminant {
    let (lo, hi) = spec.illuminant_range;
    loop {
        let raw = [
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
        ];
        let e = Illuminant::normalize(raw).expect("components are positive");
        if e.rgb().iter().all(|&v| v >= spec.min_normalized_component) {
            return e;
        }
    }
}

fn chart_mask(w: usize, h: usize) -> Vec<bool> {
    let side = (w.min(h) / 6).max(1);
    (0..w * h)
        .map(|i| i % w >= w - side && i / w >= h - side)
        .collect()
}

/// Scene `index` of the dataset described by `spec`. Pixel values are
/// rounded to `f32` so the scene survives a PFM round trip unchanged.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: usize) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let (w, h) = (spec.width, spec.height);

    let sites: Vec<(f64, f64)> = (0..spec.num_regions)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let (alo, ahi) = spec.albedo_range;
    let colors: Vec<[f64; 3]> = (0..spec.num_regions)
        .map(|_| {
            let a = rng.random_range(alo..=ahi);
            if rng.random_bool(spec.achromatic_fraction) {
                [a; 3]
            } else {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = a * (1.0 + rng.random_range(-spec.chroma..=spec.chroma));
                }
                c
            }
        })
        .collect();

    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, (sx, sy))| (i, (sx - px).powi(2) + (sy - py).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least two regions");
            pixels.push(colors[nearest]);
        }
    }
    let mask = spec.mask_chart.then(|| chart_mask(w, h));

    if spec.gray_world_balanced {
        let mut sum = [0.0; 3];
        for (i, p) in pixels.iter().enumerate() {
            if mask.as_ref().is_none_or(|m| !m[i]) {
                for c in 0..3 {
                    sum[c] += p[c];
                }
            }
        }
        let target = (sum[0] + sum[1] + sum[2]) / 3.0;
        let gains = sum.map(|s| if s > 0.0 { target / s } else { 1.0 });
        for p in &mut pixels {
            for c in 0..3 {
                p[c] *= gains[c];
            }
        }
    }
    for p in &mut pixels {
        for v in p.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    let canonical = LinearImage::new(w, h, pixels)?.with_mask(mask.clone())?;
    let illuminant = draw_illuminant(spec, &mut rng);
    let mut image = render_under_illuminant(&canonical, &illuminant)?;
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("validated std"));
    let rendered: Vec<[f64; 3]> = image
        .pixels()
        .iter()
        .map(|p| {
            p.map(|v| {
                let v = match &noise {
                    Some(nd) => (v + nd.sample(&mut rng)).max(0.0),
                    None => v,
                };
                v as f32 as f64
            })
        })
        .collect();
    image = LinearImage::new(w, h, rendered)?.with_mask(mask)?;
    Ok(SyntheticScene {
        canonical,
        image,
        illuminant,
    })
}

/// Writes `n` scenes as `scene_XXXX.pfm` (plus `scene_XXXX_mask.pgm` when
/// masked) and `manifest.csv` into `out_dir`. Output bytes depend only on `spec` and `n`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(spec, i)?;
        let image = out_dir.join(format!("scene_{i:04}.pfm"));
        pnm::write_bytes(&image, &pnm::encode_pfm(&scene.image))?;
        let mask = match scene.image.mask() {
            Some(m) => {
                let p = out_dir.join(format!("scene_{i:04}_mask.pgm"));
                pnm::write_bytes(&p, &pnm::encode_mask(spec.width, spec.height, m))?;
                Some(p)
            }
            None => None,
        };
        records.push(ManifestRecord {
            image,
            mask,
            ground_truth: scene.illuminant,
            subset: "synthetic".into(),
            linear: false,
        });
    }
    let path = out_dir.join("manifest.csv");
    manifest::write_manifest(&path, &records)?;
    manifest::load_manifest(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::diagonal_correct;
    use crate::sampling::rank_projections;

    fn small() -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            width: 40,
            height: 30,
            num_regions: 8,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_correction_recovers_canonical() {
        for i in 0..5 {
            let s = generate_scene(&small(), i).unwrap();
            let back = diagonal_correct(&s.illuminant, &s.image).unwrap();
            for (a, b) in back.pixels().iter().zip(s.canonical.pixels()) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn illuminants_respect_floor() {
        for i in 0..50 {
            let s = generate_scene(&small(), i).unwrap();
            assert!(s.illuminant.rgb().iter().all(|&v| v >= 0.1));
        }
    }

    #[test]
    fn projection_spread_positive() {
        for i in 0..10 {
            let s = generate_scene(&small(), i).unwrap();
            let r = rank_projections(&s.image).unwrap();
            let (lo, hi) = r
                .projections
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi > lo);
        }
    }

    #[test]
    fn balanced_canonical_has_equal_channel_means() {
        let spec = SyntheticSceneSpec {
            mask_chart: true,
            ..small()
        };
        let s = generate_scene(&spec, 3).unwrap();
        let mut sum = [0.0; 3];
        for p in s.canonical.valid_pixels() {
            for c in 0..3 {
                sum[c] += p[c];
            }
        }
        assert!((sum[0] - sum[1]).abs() / sum[0] < 1e-6);
        assert!((sum[0] - sum[2]).abs() / sum[0] < 1e-6);
    }

    #[test]
    fn dataset_is_byte_identical_across_runs() {
        let spec = SyntheticSceneSpec {
            noise_std: 0.01,
            mask_chart: true,
            ..small()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(&spec, 3, a.path()).unwrap();
        generate_synthetic(&spec, 3, b.path()).unwrap();
        assert_eq!(ma.records.len(), 3);
        for name in ["manifest.csv", "scene_0000.pfm", "scene_0002.pfm", "scene_0001_mask.pgm"] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        // Decoded files equal the in-memory scenes.
        let img = ma.records[1].load_image().unwrap();
        assert_eq!(img, generate_scene(&spec, 1).unwrap().image);
    }
}
