use crate::error::{Error, Result};

/// Scene-linear RGB raster, row-major, with an optional exclusion mask
/// (`true` = excluded, e.g. a color-checker region).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
    mask: Option<Vec<bool>>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(i) = pixels
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::Data(format!(
                "pixel {i} = {:?} is negative or non-finite",
                pixels[i]
            )));
        }
        Ok(LinearImage {
            width,
            height,
            pixels,
            mask: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn with_mask(mut self, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != self.pixels.len() {
                return Err(Error::Data(format!(
                    "mask has {} entries, image has {} pixels",
                    m.len(),
                    self.pixels.len()
                )));
            }
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn is_masked_index(&self, i: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[i])
    }

    #[inline]
    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.is_masked_index(y * self.width + x)
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| !b).count(),
            None => self.pixels.len(),
        }
    }

    /// Unmasked pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = &[f64; 3]> + '_ {
        self.pixels
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_masked_index(*i))
            .map(|(_, p)| p)
    }

    /// Applies `f` to every pixel, keeping geometry and mask. The result must
    /// stay nonnegative and finite.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        Self::new(self.width, self.height, self.pixels.iter().map(|&p| f(p)).collect())?
            .with_mask(self.mask.clone())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        self.map_pixels(|p| [p[0] * s, p[1] * s, p[2] * s])
    }
}
