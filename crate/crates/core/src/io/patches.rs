//! Patch-pair export in the shared container (section `"patches"`).
//!
//! Payload: `u32` pair count, `u32` patch size; per pair the image index
//! (`u32`), center x and y (`u32`), the selection percentage used (`f64`,
//! NaN for random draws), then central and surround patches as `f32` values in C×H×W order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::container::{self, Reader, Writer};
use crate::nn::Tensor;
use crate::sampling::PatchPair;

pub const SECTION: &str = "patches";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image_index: u32,
    pub center_xy: (u32, u32),
    pub d_used: Option<f64>,
    pub central: Tensor<f32>,
    pub surround: Tensor<f32>,
}

impl PatchRecord {
    pub fn from_pair(image_index: usize, pair: &PatchPair<f32>) -> Self {
        PatchRecord {
            image_index: image_index as u32,
            center_xy: (pair.center_xy.0 as u32, pair.center_xy.1 as u32),
            d_used: pair.d_used,
            central: pair.central.clone(),
            surround: pair.surround.clone(),
        }
    }
}

pub fn encode_patches(patch_size: usize, records: &[PatchRecord]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.u32(records.len() as u32);
    w.u32(patch_size as u32);
    let want = [3, patch_size, patch_size];
    for r in records {
        if r.central.shape() != want || r.surround.shape() != want {
            return Err(Error::shape("patch export", format!("patches must be {want:?}")));
        }
        w.u32(r.image_index);
        w.u32(r.center_xy.0);
        w.u32(r.center_xy.1);
        w.f64(r.d_used.unwrap_or(f64::NAN));
        r.central.data().iter().for_each(|&v| w.f32(v));
        r.surround.data().iter().for_each(|&v| w.f32(v));
    }
    Ok(container::wrap(SECTION, &w.buf))
}

pub fn decode_patches(bytes: &[u8]) -> Result<(usize, Vec<PatchRecord>)> {
    let payload = container::unwrap(bytes, SECTION)?;
    let mut r = Reader::new(payload, "patches");
    let n = r.u32()? as usize;
    let s = r.u32()? as usize;
    let shape = [3, s, s];
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let image_index = r.u32()?;
        let center_xy = (r.u32()?, r.u32()?);
        let d = r.f64()?;
        let mut read_patch = || -> Result<Tensor<f32>> {
            let v = (0..3 * s * s).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            Tensor::from_vec(&shape, v)
        };
        let central = read_patch()?;
        let surround = read_patch()?;
        out.push(PatchRecord {
            image_index,
            center_xy,
            d_used: (!d.is_nan()).then_some(d),
            central,
            surround,
        });
    }
    if !r.is_done() {
        return Err(Error::format("patches", "trailing bytes"));
    }
    Ok((s, out))
}

pub fn write_patches(path: &Path, patch_size: usize, records: &[PatchRecord]) -> Result<()> {
    std::fs::write(path, encode_patches(patch_size, records)?).map_err(|e| Error::io(path, e))
}
