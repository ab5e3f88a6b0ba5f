//! File formats: headerless numeric CSV, PGM greymaps and JSON records.
//!
//! CSV values are written in Rust's shortest round-trip form, so a
//! write/read cycle reproduces every `f64` bit for bit. PGM samples map to
//! `[0, 1]` by dividing by the format's maximal value.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, column, message: message.into() }
}

/// Reads a rectangular matrix of decimal numbers.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let file = File::open(path)?;
    parse_matrix_csv(BufReader::new(file))
}

/// [`read_matrix_csv`] from any reader.
pub fn parse_matrix_csv(reader: impl std::io::Read) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 1, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_err(line, record.len().min(c) + 1, format!("expected {c} fields, found {}", record.len())));
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| parse_err(line, j + 1, format!("not a number: {field:?}")))?;
            values.push(x);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(1, 1, "empty file"))?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| parse_err(rows, 1, e.to_string()))
}

/// Reads a vector stored as a single row or a single column.
pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<Array1<f64>> {
    let m = read_matrix_csv(path)?;
    match m.dim() {
        (1, _) | (_, 1) => Ok(Array1::from_iter(m)),
        (r, c) => Err(parse_err(1, 1, format!("expected a single row or column, found {r}x{c}"))),
    }
}

pub fn write_matrix_csv(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    format_matrix_csv(&mut out, matrix)?;
    out.flush()?;
    Ok(())
}

/// [`write_matrix_csv`] into any writer.
pub fn format_matrix_csv(writer: impl Write, matrix: &Array2<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in matrix.outer_iter() {
        wtr.write_record(row.iter().map(|x| x.to_string()))
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// One value per line.
pub fn write_vector_csv(path: impl AsRef<Path>, vector: &Array1<f64>) -> Result<()> {
    let column = vector.view().insert_axis(ndarray::Axis(1)).to_owned();
    write_matrix_csv(path, &column)
}

/// Raw greymap: integer samples and the header's maximal value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Greymap {
    pub samples: Array2<u16>,
    pub maxval: u16,
}

impl Greymap {
    /// Samples divided by `maxval`.
    pub fn to_unit(&self) -> Array2<f64> {
        let m = f64::from(self.maxval);
        self.samples.mapv(|v| f64::from(v) / m)
    }
}

/// Byte cursor over a PNM file that tracks line numbers and skips comments.
struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl PnmCursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                if b == b'\n' {
                    self.line += 1;
                }
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(self.line, 1, format!("missing {what}")));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str, max: u32) -> Result<u32> {
        let line = self.line;
        let tok = self.token(what)?;
        let text = String::from_utf8_lossy(tok).into_owned();
        match text.parse::<u32>() {
            Ok(v) if v <= max => Ok(v),
            _ => Err(parse_err(line, 1, format!("invalid {what}: {text:?}"))),
        }
    }
}

/// Parses a P2 (ASCII) or P5 (binary) greymap with `maxval <= 65535`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Greymap> {
    let mut cur = PnmCursor { bytes, pos: 0, line: 1 };
    let binary = match cur.token("magic number")? {
        b"P2" => false,
        b"P5" => true,
        other => return Err(parse_err(1, 1, format!("not a PGM file: {:?}", String::from_utf8_lossy(other)))),
    };
    let w = cur.number("width", u32::MAX)? as usize;
    let h = cur.number("height", u32::MAX)? as usize;
    let maxval = cur.number("maxval", 65535)?;
    if maxval == 0 || w == 0 || h == 0 {
        return Err(parse_err(cur.line, 1, "zero width, height or maxval"));
    }
    let mut samples = Vec::with_capacity(w * h);
    if binary {
        cur.pos += 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let data = bytes.get(cur.pos..).unwrap_or(&[]);
        if data.len() < w * h * width {
            return Err(parse_err(cur.line + 1, 1, "truncated sample data"));
        }
        for i in 0..w * h {
            let v = if width == 1 {
                u32::from(data[i])
            } else {
                u32::from(u16::from_be_bytes([data[2 * i], data[2 * i + 1]]))
            };
            if v > maxval {
                return Err(parse_err(cur.line + 1, 1, format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v as u16);
        }
    } else {
        for _ in 0..w * h {
            samples.push(cur.number("sample", maxval)? as u16);
        }
    }
    let samples = Array2::from_shape_vec((h, w), samples).map_err(|e| parse_err(1, 1, e.to_string()))?;
    Ok(Greymap { samples, maxval: maxval as u16 })
}

pub fn read_pgm_raw(path: impl AsRef<Path>) -> Result<Greymap> {
    parse_pgm(&std::fs::read(path)?)
}

/// Reads a P2 or P5 greymap; samples are returned in `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    Ok(read_pgm_raw(path)?.to_unit())
}

/// Writes a binary P5 greymap; two bytes per sample when `maxval > 255`.
pub fn write_pgm_raw(path: impl AsRef<Path>, map: &Greymap) -> Result<()> {
    let (h, w) = map.samples.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n{}\n", map.maxval)?;
    for &v in &map.samples {
        if map.maxval < 256 {
            out.write_all(&[v as u8])?;
        } else {
            out.write_all(&v.to_be_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Sample depth of a written greymap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

impl PgmDepth {
    pub fn maxval(self) -> u16 {
        match self {
            Self::Eight => 255,
            Self::Sixteen => 65535,
        }
    }
}

/// Writes `image` (values clamped to `[0, 1]`) as a binary P5 greymap.
pub fn write_pgm(path: impl AsRef<Path>, image: &Array2<f64>, depth: PgmDepth) -> Result<()> {
    let maxval = depth.maxval();
    let m = f64::from(maxval);
    let samples = image.mapv(|x| if x.is_nan() { 0 } else { (x.clamp(0.0, 1.0) * m).round() as u16 });
    write_pgm_raw(path, &Greymap { samples, maxval })
}

/// Heat map of a nonnegative array: rescaled by its maximum, then written as PGM.
pub fn write_pgm_heatmap(path: impl AsRef<Path>, values: &Array2<f64>, depth: PgmDepth) -> Result<()> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let scaled = if max > 0.0 { values / max } else { values.clone() };
    write_pgm(path, &scaled, depth)
}

/// Serializes `value` as a single JSON line.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Io(e.to_string()))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
