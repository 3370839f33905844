//! Dataset manifests: CSV with header `image,mask,r,g,b,subset` and an
//! optional trailing `linear` column (1/true marks P6 files holding linear values).
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use crate::color::Illuminant;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::io::pnm;

pub const FORMAT_VERSION: u32 = 1;
const HEADER: [&str; 6] = ["image", "mask", "r", "g", "b", "subset"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub ground_truth: Illuminant,
    pub subset: String,
    pub linear: bool,
}

impl ManifestRecord {
    /// Image id used in reports: the file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    /// Decodes the image and attaches its mask.
    pub fn load_image(&self) -> Result<LinearImage> {
        let img = pnm::decode_image(&self.image, self.linear)?;
        match &self.mask {
            Some(m) => {
                let mask = pnm::load_mask(m, img.width(), img.height())?;
                img.with_mask(Some(mask))
            }
            None => Ok(img),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
}

/// One raw CSV row before validation.
struct Row {
    image: String,
    mask: String,
    rgb: [String; 3],
    subset: String,
    linear: Option<String>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Some(false),
        "1" | "true" | "yes" => Some(true),
        _ => None,
    }
}

fn validate_row(row: &Row, index: usize, base: &Path) -> std::result::Result<ManifestRecord, String> {
    let mut rgb = [0.0; 3];
    for (c, s) in row.rgb.iter().enumerate() {
        rgb[c] = s
            .trim()
            .parse()
            .map_err(|_| format!("record {index}: bad ground-truth value {s:?}"))?;
    }
    let gt = Illuminant::normalize(rgb)
        .map_err(|e| format!("record {index}: degenerate ground truth {rgb:?} ({e})"))?;
    if gt.rgb().iter().any(|&v| v < 0.0) {
        return Err(format!("record {index}: negative ground truth {rgb:?}"));
    }
    let resolve = |p: &str| -> std::result::Result<PathBuf, String> {
        let path = base.join(p.trim());
        if path.is_file() {
            Ok(path)
        } else {
            Err(format!("record {index}: file not found: {}", path.display()))
        }
    };
    if row.image.trim().is_empty() {
        return Err(format!("record {index}: empty image path"));
    }
    let image = resolve(&row.image)?;
    let mask = if row.mask.trim().is_empty() {
        None
    } else {
        Some(resolve(&row.mask)?)
    };
    let linear = match &row.linear {
        None => false,
        Some(s) => parse_bool(s).ok_or_else(|| format!("record {index}: bad linear flag {s:?}"))?,
    };
    Ok(ManifestRecord {
        image,
        mask,
        ground_truth: gt,
        subset: row.subset.trim().to_string(),
        linear,
    })
}

/// Loads and validates every record; all per-record problems are reported together.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let has_linear = match names.as_slice() {
        [a, b, c, d, e, f] if [*a, *b, *c, *d, *e, *f] == HEADER => false,
        [a, b, c, d, e, f, "linear"] if [*a, *b, *c, *d, *e, *f] == HEADER => true,
        _ => {
            return Err(Error::Data(format!(
                "{}: header must be image,mask,r,g,b,subset[,linear], got {}",
                path.display(),
                names.join(",")
            )))
        }
    };
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (index, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("record {index}: {e}"));
                continue;
            }
        };
        let f = |i: usize| rec.get(i).unwrap_or("").to_string();
        if rec.len() < 6 {
            problems.push(format!("record {index}: expected at least 6 fields, got {}", rec.len()));
            continue;
        }
        let row = Row {
            image: f(0),
            mask: f(1),
            rgb: [f(2), f(3), f(4)],
            subset: f(5),
            linear: has_linear.then(|| f(6)),
        };
        match validate_row(&row, index, base) {
            Ok(r) => records.push(r),
            Err(p) => problems.push(p),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!("{}: {}", path.display(), problems.join("; "))));
    }
    Ok(DatasetManifest {
        version: FORMAT_VERSION,
        records,
    })
}

/// Writes records with paths relative to `dir` when possible.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let any_linear = records.iter().any(|r| r.linear);
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<&str> = HEADER.to_vec();
    if any_linear {
        header.push("linear");
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let g = r.ground_truth.rgb();
        let mut row = vec![
            rel(&r.image),
            r.mask.as_deref().map(rel).unwrap_or_default(),
            format!("{:?}", g[0]),
            format!("{:?}", g[1]),
            format!("{:?}", g[2]),
            r.subset.clone(),
        ];
        if any_linear {
            row.push(if r.linear { "1".into() } else { "0".into() });
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let img = LinearImage::filled(2, 2, [0.5; 3]).unwrap();
        for name in ["a.pfm", "b.pfm", "c.pfm"] {
            std::fs::write(dir.path().join(name), pnm::encode_pfm(&img)).unwrap();
        }
        std::fs::write(dir.path().join("m.pgm"), pnm::encode_mask(2, 2, &[true, false, false, false])).unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn three_valid_records() {
        let (_d, p) = setup("image,mask,r,g,b,subset\na.pfm,m.pgm,1,2,3,cam1\nb.pfm,,0.5,0.5,0.5,cam1\nc.pfm,,3,2,1,cam2\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 3);
        for r in &m.records {
            let n: f64 = r.ground_truth.rgb().iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(m.records[0].mask.is_some());
        assert!(m.records[1].mask.is_none());
        assert_eq!(m.records[0].load_image().unwrap().valid_count(), 3);
    }

    #[test]
    fn zero_ground_truth_rejected_with_index() {
        let (_d, p) = setup("image,mask,r,g,b,subset\na.pfm,,1,1,1,x\nb.pfm,,0,0,0,x\n");
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn missing_file_reported() {
        let (_d, p) = setup("image,mask,r,g,b,subset\nnope.pfm,,1,1,1,x\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("not found"));
    }

    #[test]
    fn bad_header_rejected() {
        let (_d, p) = setup("img,mask,r,g,b,subset\na.pfm,,1,1,1,x\n");
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn write_then_load() {
        let (d, p) = setup("image,mask,r,g,b,subset\na.pfm,m.pgm,1,2,3,cam1\nb.pfm,,0.5,0.5,0.5,cam1\n");
        let m = load_manifest(&p).unwrap();
        let p2 = d.path().join("again.csv");
        write_manifest(&p2, &m.records).unwrap();
        assert_eq!(load_manifest(&p2).unwrap(), m);
    }

    #[test]
    fn linear_column() {
        let (_d, p) = setup("image,mask,r,g,b,subset,linear\na.pfm,,1,1,1,x,1\nb.pfm,,1,1,1,x,0\n");
        let m = load_manifest(&p).unwrap();
        assert!(m.records[0].linear && !m.records[1].linear);
    }
}
