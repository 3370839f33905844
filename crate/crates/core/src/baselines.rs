//! Classical statistical estimators in the Minkowski framework.

use std::fmt;
use std::str::FromStr;

use crate::color::Illuminant;
use crate::error::{Error, Result};
use crate::image::LinearImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    GrayWorld,
    WhitePatch,
    ShadesOfGray,
    GrayEdge,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::GrayWorld,
        BaselineMethod::WhitePatch,
        BaselineMethod::ShadesOfGray,
        BaselineMethod::GrayEdge,
    ];
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::GrayWorld => "gray_world",
            BaselineMethod::WhitePatch => "white_patch",
            BaselineMethod::ShadesOfGray => "shades_of_gray",
            BaselineMethod::GrayEdge => "gray_edge",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    /// Minkowski norm for shades_of_gray and gray_edge; `f64::INFINITY` means max.
    pub minkowski_p: f64,
    /// 1 or 2 (gray_edge only).
    pub derivative_order: u8,
    /// Gaussian pre-smoothing in pixels; 0 disables it.
    pub smoothing_sigma: f64,
}

impl BaselineSpec {
    pub fn new(method: BaselineMethod) -> Self {
        let (p, sigma) = match method {
            BaselineMethod::GrayWorld | BaselineMethod::WhitePatch => (1.0, 0.0),
            BaselineMethod::ShadesOfGray => (6.0, 0.0),
            BaselineMethod::GrayEdge => (6.0, 1.0),
        };
        BaselineSpec {
            method,
            minkowski_p: p,
            derivative_order: 1,
            smoothing_sigma: sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.minkowski_p >= 1.0) {
            return Err(Error::Config(format!("minkowski_p must be >= 1, got {}", self.minkowski_p)));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.smoothing_sigma)));
        }
        if !matches!(self.derivative_order, 1 | 2) {
            return Err(Error::Config(format!(
                "derivative_order must be 1 or 2, got {}",
                self.derivative_order
            )));
        }
        Ok(())
    }

    /// Row label for reports, e.g. `gray_edge2_p6_s1`.
    pub fn label(&self) -> String {
        match self.method {
            BaselineMethod::GrayWorld | BaselineMethod::WhitePatch => self.method.to_string(),
            BaselineMethod::ShadesOfGray if self.smoothing_sigma == 0.0 => {
                format!("shades_of_gray_p{}", self.minkowski_p)
            }
            BaselineMethod::ShadesOfGray => format!("shades_of_gray_p{}_s{}", self.minkowski_p, self.smoothing_sigma),
            BaselineMethod::GrayEdge => format!(
                "gray_edge{}_p{}_s{}",
                self.derivative_order, self.minkowski_p, self.smoothing_sigma
            ),
        }
    }
}

/// Per-pixel channel values with a validity flag.
struct Plane {
    w: usize,
    h: usize,
    values: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

impl Plane {
    fn from_image(img: &LinearImage) -> Self {
        Plane {
            w: img.width(),
            h: img.height(),
            values: img.pixels().to_vec(),
            valid: (0..img.pixels().len()).map(|i| !img.is_masked_index(i)).collect(),
        }
    }

    fn at(&self, x: isize, y: isize) -> Option<[f64; 3]> {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            return None;
        }
        let i = y as usize * self.w + x as usize;
        self.valid[i].then(|| self.values[i])
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing truncated at 3σ, normalized over valid pixels
/// so masked pixels contribute nothing.
fn smooth(p: &Plane, sigma: f64) -> Plane {
    if sigma == 0.0 {
        return Plane {
            w: p.w,
            h: p.h,
            values: p.values.clone(),
            valid: p.valid.clone(),
        };
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[[f64; 4]], horizontal: bool| -> Vec<[f64; 4]> {
        let mut out = vec![[0.0; 4]; src.len()];
        for y in 0..p.h as isize {
            for x in 0..p.w as isize {
                let mut acc = [0.0; 4];
                for (j, &kw) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx < 0 || sy < 0 || sx >= p.w as isize || sy >= p.h as isize {
                        continue;
                    }
                    let s = src[sy as usize * p.w + sx as usize];
                    for c in 0..4 {
                        acc[c] += kw * s[c];
                    }
                }
                out[y as usize * p.w + x as usize] = acc;
            }
        }
        out
    };
    // Channel values premultiplied by validity, validity weight in slot 3.
    let start: Vec<[f64; 4]> = p
        .values
        .iter()
        .zip(&p.valid)
        .map(|(v, &ok)| if ok { [v[0], v[1], v[2], 1.0] } else { [0.0; 4] })
        .collect();
    let out = pass(&pass(&start, true), false);
    Plane {
        w: p.w,
        h: p.h,
        values: out
            .iter()
            .map(|a| if a[3] > 0.0 { [a[0] / a[3], a[1] / a[3], a[2] / a[3]] } else { [0.0; 3] })
            .collect(),
        valid: p.valid.clone(),
    }
}

/// Derivative magnitudes at pixels whose whole stencil is valid.
fn edge_magnitudes(p: &Plane, order: u8) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for y in 0..p.h as isize {
        'px: for x in 0..p.w as isize {
            let mut n = [[[0.0; 3]; 3]; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if order == 1 && dx != 0 && dy != 0 {
                        continue;
                    }
                    match p.at(x + dx, y + dy) {
                        Some(v) => n[(dy + 1) as usize][(dx + 1) as usize] = v,
                        None => continue 'px,
                    }
                }
            }
            let mut m = [0.0; 3];
            for c in 0..3 {
                let f = |dx: usize, dy: usize| n[dy][dx][c];
                m[c] = if order == 1 {
                    let fx = (f(2, 1) - f(0, 1)) / 2.0;
                    let fy = (f(1, 2) - f(1, 0)) / 2.0;
                    (fx * fx + fy * fy).sqrt()
                } else {
                    let fxx = f(2, 1) - 2.0 * f(1, 1) + f(0, 1);
                    let fyy = f(1, 2) - 2.0 * f(1, 1) + f(1, 0);
                    let fxy = (f(2, 2) - f(2, 0) - f(0, 2) + f(0, 0)) / 4.0;
                    (fxx * fxx + fyy * fyy + 4.0 * fxy * fxy).sqrt()
                };
            }
            out.push(m);
        }
    }
    out
}

fn minkowski(values: &[[f64; 3]], p: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        if p.is_infinite() {
            *o = values.iter().map(|v| v[c]).fold(0.0, f64::max);
        } else {
            // Scale by the max first so large p cannot overflow.
            let mx = values.iter().map(|v| v[c]).fold(0.0, f64::max);
            if mx == 0.0 {
                continue;
            }
            let s: f64 = values.iter().map(|v| (v[c] / mx).powf(p)).sum();
            *o = mx * (s / values.len() as f64).powf(1.0 / p);
        }
    }
    out
}

pub fn estimate_baseline(spec: &BaselineSpec, image: &LinearImage) -> Result<Illuminant> {
    spec.validate()?;
    if image.valid_count() == 0 {
        return Err(Error::Data("image has no unmasked pixels".into()));
    }
    let plane = Plane::from_image(image);
    let stat = match spec.method {
        BaselineMethod::GrayWorld => minkowski(&valid_values(&plane), 1.0),
        BaselineMethod::WhitePatch => minkowski(&valid_values(&plane), f64::INFINITY),
        BaselineMethod::ShadesOfGray => {
            let sm = smooth(&plane, spec.smoothing_sigma);
            minkowski(&valid_values(&sm), spec.minkowski_p)
        }
        BaselineMethod::GrayEdge => {
            let sm = smooth(&plane, spec.smoothing_sigma);
            let mags = edge_magnitudes(&sm, spec.derivative_order);
            if mags.is_empty() {
                return Err(Error::DegenerateIlluminant([0.0; 3]));
            }
            minkowski(&mags, spec.minkowski_p)
        }
    };
    if stat.iter().all(|&v| v == 0.0) || stat.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateIlluminant(stat));
    }
    Illuminant::normalize(stat)
}

fn valid_values(p: &Plane) -> Vec<[f64; 3]> {
    p.values
        .iter()
        .zip(&p.valid)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .collect()
}
