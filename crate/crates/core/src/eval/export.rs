//! CSV records and portable-pixmap image grids.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::losses::TermValues;
use crate::tensor::Tensor;

/// A row type with a fixed CSV header.
pub trait CsvRecord: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub q_c: f64,
    pub q_z: f64,
    pub q_tr: f64,
    #[serde(rename = "q_idA")]
    pub q_id_a: f64,
    #[serde(rename = "q_idB")]
    pub q_id_b: f64,
    pub q_cyc: f64,
    pub q_trc: f64,
    pub total: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
}

impl LossRecord {
    pub fn new(step: u64, v: &TermValues) -> Self {
        Self {
            step,
            q_c: v.q_c,
            q_z: v.q_z,
            q_tr: v.q_tr,
            q_id_a: v.q_id_a,
            q_id_b: v.q_id_b,
            q_cyc: v.q_cyc,
            q_trc: v.q_trc,
            total: v.total,
            d_x: v.d_x,
            d_y: v.d_y,
            d_z: v.d_z,
        }
    }
}

impl CsvRecord for LossRecord {
    const HEADER: &'static [&'static str] = &[
        "step", "q_c", "q_z", "q_tr", "q_idA", "q_idB", "q_cyc", "q_trc", "total", "d_x", "d_y",
        "d_z",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub domain: Domain,
    pub label: Option<usize>,
    pub pc1: f64,
    pub pc2: f64,
}

impl CsvRecord for EmbeddingRecord {
    const HEADER: &'static [&'static str] = &["domain", "label", "pc1", "pc2"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: String,
    pub accuracy: f64,
    pub probe: Option<f64>,
}

impl CsvRecord for MetricsRecord {
    const HEADER: &'static [&'static str] = &["step", "split", "accuracy", "probe"];
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Appending CSV writer; the header is written on creation, so an empty log is
/// a header-only file.
pub struct CsvLog<R: CsvRecord> {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
    _row: std::marker::PhantomData<R>,
}

impl<R: CsvRecord> CsvLog<R> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        writer
            .write_record(R::HEADER)
            .map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            _row: std::marker::PhantomData,
        })
    }

    /// Continues an existing log without repeating the header.
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file),
            _row: std::marker::PhantomData,
        })
    }

    pub fn push(&mut self, row: &R) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn export_csv<R: CsvRecord>(path: &Path, rows: &[R]) -> Result<()> {
    let mut log = CsvLog::create(path)?;
    for r in rows {
        log.push(r)?;
    }
    log.flush()
}

/// Reads a file written by [`export_csv`], checking the header.
pub fn read_csv<R: CsvRecord>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::Data(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            header,
            R::HEADER
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Maps `[-1, 1]` to a byte.
pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// A tiled image: `channels` interleaved bytes per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Pixmap {
    /// Binary PGM (`P5`) for one channel, PPM (`P6`) for three.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Data("malformed pixmap".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes.get(pos).ok_or_else(bad)?.is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes.get(pos).ok_or_else(bad)?.is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| bad())?
                    .to_string(),
            );
        }
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(bad()),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height * channels || fields[3] != "255" {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }
}

/// Tiles `[B, C, H, W]` images (C = 1 or 3) row-major into `cols` columns;
/// unused tiles stay black.
pub fn image_grid(images: &Tensor<f32>, cols: usize) -> Result<Pixmap> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "image_grid",
            format!("expected [B, C, H, W], got {:?}", images.shape()),
        ));
    };
    if c != 1 && c != 3 || cols == 0 || b == 0 {
        return Err(Error::shape(
            "image_grid",
            format!("{b} images, {c} channels, {cols} columns"),
        ));
    }
    let cols_used = cols.min(b);
    let rows = b.div_ceil(cols_used);
    let (width, height) = (cols_used * w, rows * h);
    let mut pixels = vec![0u8; width * height * c];
    let data = images.data();
    for i in 0..b {
        let (ty, tx) = (i / cols_used, i % cols_used);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[((i * c + ch) * h + y) * w + x];
                    pixels[((ty * h + y) * width + tx * w + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    Ok(Pixmap {
        width,
        height,
        channels: c,
        pixels,
    })
}

pub fn export_image_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let bytes = image_grid(images, cols)?.encode();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
