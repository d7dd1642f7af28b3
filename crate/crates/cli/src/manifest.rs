//! Dataset manifests and raster IO.
//!
//! A manifest is comma-separated text, one record per line:
//! `image, mask-or-dash, domain, split[, abnormal-mask]`. Lines starting with
//! `#` are comments, except `#depth=N`, which declares the bit depth of every
//! image. Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use adaseg_core::codespace::Domain;
use adaseg_core::data::{
    epoch_order, one_hot, preprocess, resize_nearest, DatasetManifest, EvalImage, LabeledImage,
    ManifestRecord, RawImage, Split, TrainingData, UnlabeledImage,
};
use adaseg_core::pipeline::BinaryMask;
use adaseg_core::tensor::Tensor;
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{CliError, IoContext, Result};

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut depth = None;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("#depth=") {
            let d = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad depth directive {line:?}")))?;
            depth = Some(d);
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::Config(format!("manifest record {}: {e}", n + 1)))?;
        if row.len() != 4 && row.len() != 5 {
            return Err(CliError::Config(format!(
                "manifest record {} has {} fields, expected 4 or 5",
                n + 1,
                row.len()
            )));
        }
        let opt = |s: &str| (s != "-" && !s.is_empty()).then(|| s.to_string());
        records.push(ManifestRecord {
            image: row[0].to_string(),
            mask: opt(&row[1]),
            domain: row[2].parse()?,
            split: row[3].parse()?,
            abnormal: row.get(4).and_then(opt),
        });
    }
    let m = DatasetManifest { records, depth };
    m.validate()?;
    Ok(m)
}

pub fn format_manifest(m: &DatasetManifest) -> String {
    let mut out = String::new();
    if let Some(d) = m.depth {
        out.push_str(&format!("#depth={d}\n"));
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(Vec::new());
    for r in &m.records {
        let mut fields = vec![
            r.image.clone(),
            r.mask.clone().unwrap_or_else(|| "-".into()),
            r.domain.name().into(),
            r.split.as_str().into(),
        ];
        if let Some(a) = &r.abnormal {
            fields.push(a.clone());
        }
        w.write_record(&fields).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf8"));
    out
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(&std::fs::read_to_string(path).at(path)?)
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    std::fs::write(path, format_manifest(m)).at(path)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads a grayscale raster; 8-bit files load as depth 8, anything else as 16.
pub fn read_raw(path: &Path, declared: Option<u32>) -> Result<RawImage> {
    let img = open(path)?;
    let eight = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageRgb8(_)
            | DynamicImage::ImageRgba8(_)
    );
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (depth, pixels) = match (declared, eight) {
        (Some(8), _) | (None, true) => (
            8,
            img.to_luma8()
                .into_raw()
                .into_iter()
                .map(u16::from)
                .collect(),
        ),
        (Some(d), _) => (d, img.to_luma16().into_raw()),
        (None, false) => (16, img.to_luma16().into_raw()),
    };
    if let Some(&p) = pixels.iter().find(|&&p| u32::from(p) >= 1 << depth) {
        return Err(CliError::Data(format!(
            "{}: pixel {p} exceeds {depth}-bit range",
            path.display()
        )));
    }
    Ok(RawImage {
        height,
        width,
        depth,
        pixels,
    })
}

/// Mask raster binarised at half intensity.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v >= 128).collect(),
    )?)
}

/// Writes a mask as 8-bit raster, 255 for foreground.
pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let data = m
        .data()
        .iter()
        .map(|&b| if b { 255u8 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(m.width() as u32, m.height() as u32, data).expect("sized");
    buf.save(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes a `[-1, 1]` image as a 16-bit raster (inverse of [`preprocess`] at depth 16).
pub fn write_image16(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = t.chw()?;
    let data = t
        .data()
        .iter()
        .map(|&v| ((f64::from(v).clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized");
    buf.save(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// One loaded record: the preprocessed image and its masks at the same size.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub record: ManifestRecord,
    pub image: Tensor<f32>,
    pub mask: Option<BinaryMask>,
    pub abnormal: Option<BinaryMask>,
}

impl LoadedRecord {
    /// Identifier used for output file names: the image file stem.
    pub fn id(&self) -> String {
        Path::new(&self.record.image).file_stem().map_or_else(
            || self.record.image.clone(),
            |s| s.to_string_lossy().into_owned(),
        )
    }

    pub fn eval_image(&self) -> Option<EvalImage<f32>> {
        Some(EvalImage {
            id: self.id(),
            domain: self.record.domain,
            image: self.image.clone(),
            mask: self.mask.clone()?,
            abnormal: self.abnormal.clone(),
        })
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_mask(
    base: &Path,
    rec: &ManifestRecord,
    p: &str,
    raw: &RawImage,
    size: usize,
) -> Result<BinaryMask> {
    let m = read_mask(&resolve(base, p))?;
    if (m.height(), m.width()) != (raw.height, raw.width) {
        return Err(CliError::Data(format!(
            "record {}: mask {p} is {}×{}, image is {}×{}",
            rec.image,
            m.height(),
            m.width(),
            raw.height,
            raw.width
        )));
    }
    Ok(resize_nearest(&m, size, size))
}

/// Loads every record, preprocessed to `size`, in the seeded order of epoch 0.
pub fn load_dataset(
    m: &DatasetManifest,
    base: &Path,
    size: usize,
    seed: u64,
) -> Result<Vec<LoadedRecord>> {
    let mut out = Vec::with_capacity(m.records.len());
    for idx in epoch_order(m.records.len(), seed, 0) {
        let rec = &m.records[idx];
        let path = resolve(base, &rec.image);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "record {}: file {} not found",
                rec.image,
                path.display()
            )));
        }
        let raw = read_raw(&path, m.depth)?;
        let image = preprocess(&raw, size)?;
        let mask = rec
            .mask
            .as_deref()
            .map(|p| load_mask(base, rec, p, &raw, size))
            .transpose()?;
        let abnormal = rec
            .abnormal
            .as_deref()
            .map(|p| load_mask(base, rec, p, &raw, size))
            .transpose()?;
        out.push(LoadedRecord {
            record: rec.clone(),
            image,
            mask,
            abnormal,
        });
    }
    Ok(out)
}

/// Training view: labelled INTRA, unlabelled INTER (masks dropped) and a
/// validation set (INTER val when annotated, INTRA val otherwise).
pub fn training_data(records: &[LoadedRecord]) -> Result<TrainingData<f32>> {
    let mut data = TrainingData::default();
    for r in records.iter().filter(|r| r.record.split == Split::Train) {
        match r.record.domain {
            Domain::Intra => {
                let mask = r.mask.as_ref().ok_or_else(|| {
                    CliError::Data(format!(
                        "INTRA training record {} has no mask",
                        r.record.image
                    ))
                })?;
                data.intra.push(LabeledImage {
                    image: r.image.clone(),
                    target: one_hot(mask),
                });
            }
            _ => data.inter.push(UnlabeledImage {
                image: r.image.clone(),
            }),
        }
    }
    let val = |d: Domain| {
        records
            .iter()
            .filter(|r| r.record.split == Split::Val && r.record.domain == d)
            .filter_map(LoadedRecord::eval_image)
            .collect::<Vec<_>>()
    };
    data.val = val(Domain::Inter);
    if data.val.is_empty() {
        data.val = val(Domain::Intra);
    }
    data.validate()?;
    Ok(data)
}
