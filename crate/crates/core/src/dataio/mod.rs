//! Dataset ingestion: index CSV, per-channel PNG stacks, label encoding,
//! regression targets, and a synthetic cell-painting generator.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::Role;
use crate::tensor::Tensor;
use crate::train::TrainingSet;
use crate::util::{median, write_atomic};

pub use synthetic::{gen_synthetic, SyntheticSpec, SyntheticSummary};

/// Canonical channel order of every stacked image.
pub const CHANNELS: [&str; 5] = ["DNA", "ER", "RNA", "AGP", "Mito"];

pub const INDEX_FILE: &str = "index.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const LATENTS_FILE: &str = "latents.csv";

// ── index ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// One imaged site and its channel files.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub plate: String,
    pub well: String,
    pub site: String,
    pub treatment: String,
    pub role: Role,
    pub split: Split,
    /// Channel name → image path, resolved against the index directory.
    pub channel_paths: BTreeMap<String, PathBuf>,
}

fn column(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim()))
        .ok_or_else(|| Error::input(path, format!("missing column {}", names.join(" or "))))
}

/// Parse an index CSV. The treatment column may be named `Treatment` or
/// `pert_name`; channel paths are relative to the index file.
pub fn load_index(path: impl AsRef<Path>) -> Result<Vec<IndexRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::input(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::input(path, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::input(path, "empty index file"));
    }
    let plate = column(&headers, &["Plate"], path)?;
    let well = column(&headers, &["Well"], path)?;
    let site = column(&headers, &["Site"], path)?;
    let treatment = column(&headers, &["Treatment", "pert_name"], path)?;
    let role = column(&headers, &["Role"], path)?;
    let split = column(&headers, &["Split"], path)?;
    let channels = CHANNELS.iter().map(|c| column(&headers, &[c], path)).collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::input(path, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let line = i + 2;
        let r = IndexRecord {
            plate: field(plate),
            well: field(well),
            site: field(site),
            treatment: field(treatment),
            role: field(role).parse().map_err(|e: Error| Error::input(path, format!("line {line}: {e}")))?,
            split: field(split).parse().map_err(|e: Error| Error::input(path, format!("line {line}: {e}")))?,
            channel_paths: CHANNELS
                .iter()
                .zip(&channels)
                .map(|(name, &c)| (name.to_string(), base.join(field(c))))
                .collect(),
        };
        if r.treatment.is_empty() {
            return Err(Error::input(path, format!("line {line}: empty treatment")));
        }
        if !seen.insert((r.plate.clone(), r.well.clone(), r.site.clone())) {
            return Err(Error::input(
                path,
                format!("line {line}: duplicate site ({}, {}, {})", r.plate, r.well, r.site),
            ));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::input(path, "index has no records"));
    }
    Ok(out)
}

/// Write records as an index CSV; channel paths are stored relative to the
/// index directory when possible.
pub fn write_index(records: &[IndexRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Plate", "Well", "Site", "Treatment", "Role", "Split"];
    header.extend(CHANNELS);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.plate.clone(),
            r.well.clone(),
            r.site.clone(),
            r.treatment.clone(),
            r.role.to_string(),
            r.split.to_string(),
        ];
        for c in CHANNELS {
            let p = r.channel_paths.get(c).ok_or_else(|| {
                Error::InvalidArgument(format!("record {}/{}/{} lacks channel {c}", r.plate, r.well, r.site))
            })?;
            let rel = p.strip_prefix(base).unwrap_or(p);
            row.push(rel.to_string_lossy().replace('\\', "/"));
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Check that `role == control` exactly for the control treatment.
pub fn check_roles(records: &[IndexRecord], control_label: &str) -> Result<()> {
    for r in records {
        if (r.role == Role::Control) != (r.treatment == control_label) {
            return Err(Error::InvalidArgument(format!(
                "site {}/{}/{}: role {} does not match treatment {:?} (control label {control_label:?})",
                r.plate, r.well, r.site, r.role, r.treatment
            )));
        }
    }
    Ok(())
}

// ── images ───────────────────────────────────────────────────────────────

/// Decode a grayscale PNG into `[0,1]` values (divided by 255 or 65535).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::input(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| Error::input(path, e.to_string()))?
        .decode()
        .map_err(|e| Error::input(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => return Err(Error::input(path, format!("expected a grayscale image, found {:?}", other.color()))),
    };
    Ok((w, h, data))
}

/// Encode `[0,1]` values as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let raw: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::InvalidArgument("pixel buffer does not match image size".into()))?;
    let mut bytes = Cursor::new(Vec::new());
    buf.write_to(&mut bytes, ImageFormat::Png)?;
    write_atomic(path, bytes.get_ref())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    if width == out_w && height == out_h {
        return src.to_vec();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (xs, ys) = (taps(out_w, width), taps(out_h, height));
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p = |y: usize, x: usize| src[y * width + x];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Stack the canonical channels of one site into `[5, size, size]`.
pub fn load_image_stack(record: &IndexRecord, image_size: usize) -> Result<Tensor<f32>> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let mut data = Vec::with_capacity(CHANNELS.len() * image_size * image_size);
    for c in CHANNELS {
        let path = record.channel_paths.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("site {}/{}/{} lacks channel {c}", record.plate, record.well, record.site))
        })?;
        let (w, h, px) = read_gray(path)?;
        data.extend(resize_bilinear(&px, w, h, image_size, image_size));
    }
    Tensor::new(vec![CHANNELS.len(), image_size, image_size], data)
}

/// Load every record's stack in parallel into `[N, 5, size, size]`.
pub fn load_images(records: &[IndexRecord], image_size: usize) -> Result<Tensor<f32>> {
    let stacks = records
        .par_iter()
        .map(|r| load_image_stack(r, image_size).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![records.len(), CHANNELS.len(), image_size, image_size], stacks.concat())
}

// ── labels and targets ───────────────────────────────────────────────────

/// Lexicographically ordered treatment vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEncoder {
    classes: Vec<String>,
}

impl LabelEncoder {
    pub fn fit<'a>(treatments: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = treatments.into_iter().collect();
        Self { classes: set.into_iter().map(str::to_string).collect() }
    }

    pub fn from_records(records: &[IndexRecord]) -> Self {
        Self::fit(records.iter().map(|r| r.treatment.as_str()))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn encode(&self, treatment: &str) -> Result<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(treatment))
            .map_err(|_| Error::InvalidArgument(format!("unknown treatment {treatment:?}")))
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }
}

/// Read a `treatment,g0000,…` CSV of per-image (or per-treatment) profiles.
pub fn read_profile_source(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::input(path, e.to_string()))?;
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("treatment") || headers.len() < 2 {
        return Err(Error::input(path, "expected header `treatment,g0000,...`"));
    }
    let mut out: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::input(path, format!("row with {} fields, expected {}", rec.len(), headers.len())));
        }
        let v = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::input(path, format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.entry(rec[0].trim().to_string()).or_default().push(v);
    }
    Ok(out)
}

/// Coordinate-wise median profile per treatment, for every treatment in `records`.
pub fn load_regression_targets(
    source: &BTreeMap<String, Vec<Vec<f64>>>,
    records: &[IndexRecord],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let needed: BTreeSet<&str> = records.iter().map(|r| r.treatment.as_str()).collect();
    let mut out = BTreeMap::new();
    for t in needed {
        let profiles = source
            .get(t)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::InvalidArgument(format!("treatment {t:?} has no morphology profiles")))?;
        let dim = profiles[0].len();
        if profiles.iter().any(|p| p.len() != dim) {
            return Err(Error::shape("regression_targets", format!("profiles of {t:?} differ in length")));
        }
        let target =
            (0..dim).map(|j| median(&profiles.iter().map(|p| p[j]).collect::<Vec<_>>()).expect("non-empty")).collect();
        out.insert(t.to_string(), target);
    }
    Ok(out)
}

/// Everything needed to train on a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<IndexRecord>,
    pub encoder: LabelEncoder,
    pub training: TrainingSet,
}

/// Load `index.csv` and `latents.csv` from `dir` into a training set.
pub fn load_dataset(dir: impl AsRef<Path>, image_size: usize) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    let records = load_index(dir.join(INDEX_FILE))?;
    let source = read_profile_source(dir.join(LATENTS_FILE))?;
    let targets = load_regression_targets(&source, &records)?;
    let encoder = LabelEncoder::from_records(&records);
    let images = load_images(&records, image_size)?;
    let labels = records.iter().map(|r| encoder.encode(&r.treatment)).collect::<Result<Vec<_>>>()?;
    let dim = targets.values().next().map(Vec::len).unwrap_or(0);
    let target_data: Vec<f32> = records.iter().flat_map(|r| targets[&r.treatment].iter().map(|&v| v as f32)).collect();
    let targets = Tensor::new(vec![records.len(), dim], target_data)?;
    let training = TrainingSet::new(images, labels, targets)?;
    Ok(LoadedDataset { records, encoder, training })
}

#[cfg(test)]
mod tests;
