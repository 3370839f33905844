//! Bright/dark pixel ranking and center-surround patch sampling.
//!
//! Pixels are ranked by their signed scalar projection onto the mean image
//! color. The top and bottom `d`% are the bright and dark sets; central
//! windows are accepted only when they contain at least one of each and no
//! excluded pixel. Ranking runs on linear values, patch contents are taken
//! from the gamma-encoded image.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::gamma_encode_value;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::nn::Tensor;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct PixelRanking {
    pub width: usize,
    pub height: usize,
    /// Projection per pixel, row-major; masked pixels hold `-inf`.
    pub projections: Vec<f64>,
    pub bright: Vec<bool>,
    pub dark: Vec<bool>,
    pub valid: usize,
}

impl PixelRanking {
    pub fn bright_count(&self) -> usize {
        self.bright.iter().filter(|&&b| b).count()
    }

    pub fn dark_count(&self) -> usize {
        self.dark.iter().filter(|&&b| b).count()
    }
}

/// Projects every unmasked pixel onto the mean color direction.
pub fn rank_projections(image: &LinearImage) -> Result<PixelRanking> {
    let valid = image.valid_count();
    if valid == 0 {
        return Err(Error::Data("every pixel is masked".into()));
    }
    let mut sum = [0.0f64; 3];
    for p in image.valid_pixels() {
        for c in 0..3 {
            sum[c] += p[c];
        }
    }
    let mu = sum.map(|s| s / valid as f64);
    let mu_norm = (mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2]).sqrt();
    if mu_norm < 1e-12 {
        return Err(Error::Data("mean color is black; projections undefined".into()));
    }
    let projections = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if image.is_masked_index(i) {
                f64::NEG_INFINITY
            } else {
                (p[0] * mu[0] + p[1] * mu[1] + p[2] * mu[2]) / mu_norm
            }
        })
        .collect();
    let n = image.pixels().len();
    Ok(PixelRanking {
        width: image.width(),
        height: image.height(),
        projections,
        bright: vec![false; n],
        dark: vec![false; n],
        valid,
    })
}

/// Number of pixels in each of the bright and dark sets: `ceil(d/100 * n_valid)`.
pub fn selection_size(d: f64, valid: usize) -> usize {
    // d·n/100 keeps integral products exact (5 % of 100 is 5, not 5.000…1).
    ((d * valid as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize
}

/// Marks the `k` highest-projection pixels bright and the `k` lowest dark.
/// Ties are broken by row-major index.
pub fn select_bright_dark(ranking: &PixelRanking, d: f64) -> Result<PixelRanking> {
    if !(d > 0.0 && d < 50.0) {
        return Err(Error::InvalidArgument(format!("d = {d} outside (0, 50)")));
    }
    let k = selection_size(d, ranking.valid);
    let mut order: Vec<usize> = (0..ranking.projections.len())
        .filter(|&i| ranking.projections[i] != f64::NEG_INFINITY)
        .collect();
    let proj = &ranking.projections;
    let n = proj.len();
    let mut out = ranking.clone();
    out.bright = vec![false; n];
    out.dark = vec![false; n];

    order.sort_by(|&a, &b| {
        proj[b]
            .partial_cmp(&proj[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(k) {
        out.bright[i] = true;
    }
    order.sort_by(|&a, &b| {
        proj[a]
            .partial_cmp(&proj[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(k) {
        out.dark[i] = true;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    BrightDark,
    Random,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::BrightDark => "bright_dark",
            SamplingMode::Random => "random",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bright_dark" => Ok(SamplingMode::BrightDark),
            "random" => Ok(SamplingMode::Random),
            _ => Err(Error::Config(format!(
                "unknown sampling mode {s:?} (bright_dark | random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub num_patches: usize,
    /// Strictly ascending percentages in (0, 50).
    pub d_schedule: Vec<f64>,
    pub max_attempts_per_d: usize,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 32,
            num_patches: 15,
            d_schedule: vec![3.5, 5.0, 10.0],
            max_attempts_per_d: 150,
            mode: SamplingMode::BrightDark,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::Config(format!(
                "patch_size must be >= 8, got {}",
                self.patch_size
            )));
        }
        if self.num_patches == 0 {
            return Err(Error::Config("num_patches must be >= 1".into()));
        }
        if self.d_schedule.is_empty() {
            return Err(Error::Config("d_schedule is empty".into()));
        }
        for w in self.d_schedule.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "d_schedule must be strictly ascending: {:?}",
                    self.d_schedule
                )));
            }
        }
        if let Some(d) = self.d_schedule.iter().find(|d| !(**d > 0.0 && **d < 50.0)) {
            return Err(Error::Config(format!("d = {d} outside (0, 50)")));
        }
        if self.max_attempts_per_d == 0 {
            return Err(Error::Config("max_attempts_per_d must be >= 1".into()));
        }
        Ok(())
    }

    /// Same settings with a different RNG seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..self.clone()
        }
    }
}

/// A central patch and its 2× surround, both S×S, channels-first.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub central: Tensor<T>,
    pub surround: Tensor<T>,
    /// Center pixel of the central window: `(left + S/2, top + S/2)`.
    pub center_xy: (usize, usize),
    /// Percentage whose bright/dark sets admitted the window; `None` for random windows.
    pub d_used: Option<f64>,
    pub mode: SamplingMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPatches<T> {
    pub pairs: Vec<PatchPair<T>>,
    /// Set when the `d` schedule ran out and random windows filled the remainder.
    pub fell_back_to_random: bool,
}

/// Summed-area table of a boolean field for O(1) window counts.
struct Integral {
    w: usize,
    table: Vec<u32>,
}

impl Integral {
    fn new(w: usize, h: usize, field: impl Fn(usize) -> bool) -> Self {
        let mut table = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += field(y * w + x) as u32;
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, table }
    }

    fn count(&self, left: usize, top: usize, size: usize) -> u32 {
        let s = self.w + 1;
        let (r, b) = (left + size, top + size);
        self.table[b * s + r] + self.table[top * s + left]
            - self.table[top * s + r]
            - self.table[b * s + left]
    }
}

/// Gamma-encoded copy used for patch contents; excluded pixels read as zero.
fn network_input(image: &LinearImage) -> Vec<[f64; 3]> {
    image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if image.is_masked_index(i) {
                [0.0; 3]
            } else {
                p.map(gamma_encode_value)
            }
        })
        .collect()
}

fn central_patch<T: Real>(px: &[[f64; 3]], width: usize, left: usize, top: usize, s: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = px[(top + y) * width + left + x];
            for c in 0..3 {
                data[(c * s + y) * s + x] = T::lit(p[c]);
            }
        }
    }
    Tensor::from_vec(&[3, s, s], data).expect("3×S×S")
}

fn surround_patch<T: Real>(
    px: &[[f64; 3]],
    width: usize,
    height: usize,
    center: (usize, usize),
    s: usize,
) -> Tensor<T> {
    let left = center.0 as isize - s as isize;
    let top = center.1 as isize - s as isize;
    let fetch = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        px[yc * width + xc]
    };
    let mut data = vec![T::zero(); 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let bx = left + 2 * x as isize;
            let by = top + 2 * y as isize;
            let mut acc = [0.0f64; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = fetch(bx + dx, by + dy);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            for c in 0..3 {
                data[(c * s + y) * s + x] = T::lit(acc[c] / 4.0);
            }
        }
    }
    Tensor::from_vec(&[3, s, s], data).expect("3×S×S")
}

/// Reads the 2S×2S window centered at `center_xy`, replicating edge pixels
/// outside the image, and box-averages it down to S×S. Values are taken as-is.
pub fn extract_surround<T: Real>(image: &LinearImage, center_xy: (usize, usize), s: usize) -> Tensor<T> {
    surround_patch(image.pixels(), image.width(), image.height(), center_xy, s)
}

/// Reads the S×S central window whose center is `center_xy`, values as-is.
pub fn extract_central<T: Real>(image: &LinearImage, center_xy: (usize, usize), s: usize) -> Result<Tensor<T>> {
    let (left, top) = (center_xy.0.wrapping_sub(s / 2), center_xy.1.wrapping_sub(s / 2));
    if left > image.width().saturating_sub(s) || top > image.height().saturating_sub(s) {
        return Err(Error::InvalidArgument(format!(
            "central window at {center_xy:?} of size {s} leaves the image"
        )));
    }
    Ok(central_patch(image.pixels(), image.width(), left, top, s))
}

/// Samples `cfg.num_patches` center/surround pairs. Deterministic in `(image, cfg)`.
pub fn sample_patch_pairs<T: Real>(image: &LinearImage, cfg: &SamplerConfig) -> Result<SampledPatches<T>> {
    cfg.validate()?;
    let (w, h, s) = (image.width(), image.height(), cfg.patch_size);
    if w < s || h < s {
        return Err(Error::Data(format!(
            "image {w}x{h} smaller than patch size {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masked = Integral::new(w, h, |i| image.is_masked_index(i));
    let encoded = network_input(image);

    let mut windows: Vec<(usize, usize, Option<f64>, SamplingMode)> = Vec::new();
    let draw = |rng: &mut ChaCha8Rng| (rng.random_range(0..=w - s), rng.random_range(0..=h - s));

    let mut fell_back = false;
    if cfg.mode == SamplingMode::BrightDark {
        let ranking = rank_projections(image)?;
        for &d in &cfg.d_schedule {
            if windows.len() >= cfg.num_patches {
                break;
            }
            let sel = select_bright_dark(&ranking, d)?;
            let bright = Integral::new(w, h, |i| sel.bright[i]);
            let dark = Integral::new(w, h, |i| sel.dark[i]);
            for _ in 0..cfg.max_attempts_per_d {
                if windows.len() >= cfg.num_patches {
                    break;
                }
                let (l, t) = draw(&mut rng);
                if masked.count(l, t, s) == 0 && bright.count(l, t, s) > 0 && dark.count(l, t, s) > 0 {
                    windows.push((l, t, Some(d), SamplingMode::BrightDark));
                }
            }
        }
        fell_back = windows.len() < cfg.num_patches;
    }

    let budget = cfg.max_attempts_per_d * cfg.num_patches.max(1) * 10;
    let mut attempts = 0;
    while windows.len() < cfg.num_patches {
        if attempts >= budget {
            return Err(Error::Data(format!(
                "could only place {} of {} unmasked {s}x{s} windows",
                windows.len(),
                cfg.num_patches
            )));
        }
        attempts += 1;
        let (l, t) = draw(&mut rng);
        if masked.count(l, t, s) == 0 {
            windows.push((l, t, None, SamplingMode::Random));
        }
    }

    let pairs = windows
        .into_iter()
        .map(|(l, t, d_used, mode)| {
            let center = (l + s / 2, t + s / 2);
            PatchPair {
                central: central_patch(&encoded, w, l, t, s),
                surround: surround_patch(&encoded, w, h, center, s),
                center_xy: center,
                d_used,
                mode,
            }
        })
        .collect();
    Ok(SampledPatches {
        pairs,
        fell_back_to_random: fell_back,
    })
}
