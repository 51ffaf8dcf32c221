//! Binary PGM images and the `metadata.csv` + `images/<id>.pgm` directory layout.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{MetaRecord, Sex};
use crate::tensor::Tensor;

pub const METADATA_HEADER: [&str; 5] = ["id", "age", "sex", "label", "split"];

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads an 8-bit binary (P5) PGM as a `[1 × H × W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected binary PGM magic P5, got `{}`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| format_err(path, format!("bad PGM {what} `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err(format_err(path, "PGM dimensions must be positive"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| {
        format_err(path, format!("raster too short for {w}×{h} pixels"))
    })?;
    let scale = maxval as f64;
    let data = raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes raw 8-bit rows as a P5 PGM with maxval 255.
pub fn write_pgm_values(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a `[1 × H × W]` or `[H × W]` tensor with values in `[0, 1]`.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(Error::Validation(format!(
                "PGM export needs a single-channel image, got shape {s:?}"
            )))
        }
    };
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm_values(path, w, h, &pixels)
}

fn format_age(age: f64) -> String {
    let s = format!("{age:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Writes `metadata.csv` and `images/<id>.pgm` under `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let csv_path = dir.join("metadata.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| format_err(&csv_path, e.to_string()))?;
    let csv_err = |e: csv::Error| format_err(&csv_path, e.to_string());
    w.write_record(METADATA_HEADER).map_err(csv_err)?;
    for s in samples {
        let split = s.split.map(Split::name).unwrap_or("");
        w.write_record([
            s.id.as_str(),
            &format_age(s.meta.age),
            s.meta.sex.code(),
            &s.label.to_string(),
            split,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    samples
        .par_iter()
        .try_for_each(|s| write_pgm(&images.join(format!("{}.pgm", s.id)), &s.image))
}

struct Row {
    line: usize,
    id: String,
    meta: MetaRecord,
    label: usize,
    split: Option<Split>,
}

/// Reads a dataset directory. Rows come back in CSV order; any malformed row,
/// missing image or out-of-range label is an error naming the row.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let csv_path = dir.join("metadata.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| format_err(&csv_path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| format_err(&csv_path, e.to_string()))?
        .clone();
    if header.iter().ne(METADATA_HEADER) {
        return Err(format_err(
            &csv_path,
            format!(
                "header must be `{}`, got `{}`",
                METADATA_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| format_err(&csv_path, format!("row {line}: {e}")))?;
        let bad = |what: String| format_err(&csv_path, format!("row {line} (id `{}`): {what}", &record[0]));
        let id = record[0].to_string();
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(bad("id must be a non-empty file stem".into()));
        }
        let age: f64 = record[1]
            .parse()
            .map_err(|_| bad(format!("age `{}` is not a number", &record[1])))?;
        let sex: Sex = record[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let meta = MetaRecord::new(age, sex).map_err(|e| bad(e.to_string()))?;
        let label: usize = record[3]
            .parse()
            .map_err(|_| bad(format!("label `{}` is not a class index", &record[3])))?;
        if label >= num_classes {
            return Err(bad(format!("label {label} out of range for {num_classes} classes")));
        }
        let split = match &record[4] {
            "" => None,
            s => Some(s.parse::<Split>().map_err(|e| bad(e.to_string()))?),
        };
        rows.push(Row { line, id, meta, label, split });
    }

    rows.into_par_iter()
        .map(|row| {
            let path = dir.join("images").join(format!("{}.pgm", row.id));
            if !path.exists() {
                return Err(format_err(
                    &csv_path,
                    format!("row {} (id `{}`): missing image {}", row.line, row.id, path.display()),
                ));
            }
            Ok(Sample {
                image: read_pgm(&path)?,
                id: row.id,
                meta: row.meta,
                label: row.label,
                split: row.split,
            })
        })
        .collect()
}
