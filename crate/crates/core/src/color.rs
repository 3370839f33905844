//! Illuminant normalization, angular error, diagonal (von Kries) correction,
//! its exact inverse used to render synthetic scenes, and gamma encoding.

use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::nn::Tensor;
use crate::scalar::Real;

/// Smallest per-channel value of a correctable unit illuminant.
pub const MIN_CHANNEL: f64 = 1e-6;

/// Display gamma applied to linear images before they enter the networks.
pub const GAMMA: f64 = 1.0 / 2.2;

/// Unit-L2 RGB direction of a light source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Illuminant<T = f64>([T; 3]);

impl<T: Real> Illuminant<T> {
    /// `(1, 1, 1) / sqrt(3)`.
    pub fn neutral() -> Self {
        Self::normalize([T::one(); 3]).expect("neutral is non-degenerate")
    }

    pub fn normalize(v: [T; 3]) -> Result<Self> {
        normalize_illuminant(v)
    }

    pub fn rgb(&self) -> [T; 3] {
        self.0
    }

    pub fn cast<U: Real>(&self) -> Illuminant<U> {
        Illuminant(crate::scalar::cast3(self.0))
    }

    /// Whether every channel exceeds [`MIN_CHANNEL`], i.e. the diagonal correction is defined.
    pub fn is_correctable(&self) -> bool {
        self.0.iter().all(|c| c.as_f64() > MIN_CHANNEL)
    }
}

fn to_f64<T: Real>(v: [T; 3]) -> [f64; 3] {
    [v[0].as_f64(), v[1].as_f64(), v[2].as_f64()]
}

fn norm<T: Real>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Scales `v` to unit length.
pub fn normalize_illuminant<T: Real>(v: [T; 3]) -> Result<Illuminant<T>> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::DegenerateIlluminant(to_f64(v)));
    }
    let n = norm(v);
    if n.as_f64() < 1e-12 {
        return Err(Error::DegenerateIlluminant(to_f64(v)));
    }
    Ok(Illuminant([v[0] / n, v[1] / n, v[2] / n]))
}

/// Angle in degrees between two nonzero RGB vectors. Computed in 64-bit as
/// `atan2(|a × b|, a · b)`, which stays accurate for nearly parallel vectors
/// where `acos` of the cosine loses about half the digits.
pub fn angular_error<T: Real>(e: [T; 3], e_star: [T; 3]) -> Result<f64> {
    let a = to_f64(e);
    let b = to_f64(e_star);
    let na = norm(a);
    let nb = norm(b);
    if !(na >= 1e-12 && nb >= 1e-12) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateIlluminant(if na < 1e-12 { a } else { b }));
    }
    let ua = [a[0] / na, a[1] / na, a[2] / na];
    let ub = [b[0] / nb, b[1] / nb, b[2] / nb];
    let dot = ua[0] * ub[0] + ua[1] * ub[1] + ua[2] * ub[2];
    let cross = [
        ua[1] * ub[2] - ua[2] * ub[1],
        ua[2] * ub[0] - ua[0] * ub[2],
        ua[0] * ub[1] - ua[1] * ub[0],
    ];
    Ok(norm(cross).atan2(dot).to_degrees())
}

/// Per-channel gains `(1/sqrt(3)) / e_c` of the diagonal correction. The
/// neutral illuminant maps to gains of exactly one.
pub fn diagonal_gains<T: Real>(e: &Illuminant<T>) -> Result<[T; 3]> {
    if !e.is_correctable() {
        return Err(Error::DegenerateIlluminant(to_f64(e.0)));
    }
    let inv_sqrt3 = Illuminant::<T>::neutral().0[0];
    Ok([inv_sqrt3 / e.0[0], inv_sqrt3 / e.0[1], inv_sqrt3 / e.0[2]])
}

/// Removes the color cast of `e` from a linear image. Output is not clipped.
pub fn diagonal_correct(e: &Illuminant, image: &LinearImage) -> Result<LinearImage> {
    let g = diagonal_gains(e)?;
    image.map_pixels(|p| [p[0] * g[0], p[1] * g[1], p[2] * g[2]])
}

/// Diagonal correction of a channels-first 3×H×W patch.
pub fn diagonal_correct_patch<T: Real>(e: &Illuminant<T>, patch: &Tensor<T>) -> Result<Tensor<T>> {
    let g = diagonal_gains(e)?;
    scale_channels(patch, g)
}

pub(crate) fn scale_channels<T: Real>(patch: &Tensor<T>, g: [T; 3]) -> Result<Tensor<T>> {
    if patch.shape().len() != 3 || patch.shape()[0] != 3 {
        return Err(Error::shape(
            "diagonal_correct",
            format!("patch shape {:?} (want 3×H×W)", patch.shape()),
        ));
    }
    let plane = patch.shape()[1] * patch.shape()[2];
    let mut out = patch.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= g[c]);
    }
    Ok(out)
}

/// Renders a canonical (white-lit) scene under `e`: `out_c = in_c * sqrt(3) * e_c`.
/// Exact inverse of [`diagonal_correct`].
pub fn render_under_illuminant(canonical: &LinearImage, e: &Illuminant) -> Result<LinearImage> {
    let g = diagonal_gains(e)?;
    canonical.map_pixels(|p| [p[0] / g[0], p[1] / g[1], p[2] / g[2]])
}

#[inline]
pub fn gamma_encode_value(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(GAMMA)
}

#[inline]
pub fn gamma_decode_value(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

/// Clips to [0, 1] and applies the power law `v^(1/2.2)` per channel.
pub fn gamma_encode(image: &LinearImage) -> LinearImage {
    image
        .map_pixels(|p| p.map(gamma_encode_value))
        .expect("encoded values stay in [0, 1]")
}
