//! File formats: dataset CSV and serde adaptors that store matrices as
//! row-major nested arrays in JSON documents.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::model::Dataset;
use crate::{Error, Result};

/// Serializes a JSON document with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Parses a JSON document, reporting the offending field path and line.
pub fn from_json_str<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::parse(
            format!("{what}: line {} field `{path}`", inner.line()),
            inner.to_string(),
        )
    })
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], cols: usize, name: &str) -> Result<DMatrix<f64>> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::parse(
                format!("field `{name}` row {i}"),
                format!("expected {cols} columns, found {}", r.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `#[serde(with = "rows")]` for `DMatrix<f64>` as `[[row0...], [row1...]]`.
pub mod rows {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }
}

/// `#[serde(with = "bool_rows")]` for adjacency matrices stored as 0/1 rows.
pub mod bool_rows {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<bool>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<u8>> = m.row_iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<bool>, D::Error> {
        let rows: Vec<Vec<u8>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged adjacency rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j] != 0))
    }
}

/// `#[serde(with = "vector")]` for `DVector<f64>` as a flat array.
pub mod vector {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `t,y1..yp,u1..um`. Row `k` (1-based) holds `y(t_k)` followed by the
/// input `u(t_{k-1})` that drove the transition into sample `k`. Metadata goes
/// into leading `#` comment lines.
pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut out = out;
    let mut meta = Vec::new();
    if let Some(seed) = data.seed {
        meta.push(format!("seed={seed}"));
    }
    if let Some(snr) = data.snr_db {
        meta.push(format!("snr_db={snr}"));
    }
    if let Some(s) = data.noise_scale {
        meta.push(format!("noise_scale={}", fmt_real(s)));
    }
    if !meta.is_empty() {
        writeln!(out, "# {}", meta.join(" "))?;
    }
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=data.p()).map(|i| format!("y{i}")));
    header.extend((1..=data.m()).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..data.n_samples() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(data.y[k].iter().map(|&v| fmt_real(v)));
        rec.extend(data.u[k].iter().map(|&v| fmt_real(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse("csv", format!("{other:?}")),
    }
}

/// Parses the dataset CSV written by [`write_dataset_csv`].
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;

    let mut seed = None;
    let mut snr_db = None;
    let mut noise_scale = None;
    let mut body_start_line = 0usize;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            for kv in rest.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    let loc = format!("line {}: metadata `{k}`", body_start_line + 1);
                    match k {
                        "seed" => seed = Some(v.parse().map_err(|_| Error::parse(loc, v))?),
                        "snr_db" => snr_db = Some(v.parse().map_err(|_| Error::parse(loc, v))?),
                        "noise_scale" => {
                            noise_scale = Some(v.parse().map_err(|_| Error::parse(loc, v))?)
                        }
                        _ => {}
                    }
                }
            }
            body_start_line += 1;
        } else {
            break;
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    let header_line = body_start_line + 1;
    if header.get(0) != Some("t") {
        return Err(Error::parse(
            format!("line {header_line}"),
            "first column must be `t`",
        ));
    }
    let mut p = 0;
    let mut m = 0;
    for (idx, name) in header.iter().enumerate().skip(1) {
        if let Some(i) = name.strip_prefix('y') {
            if m > 0 || i.parse::<usize>().ok() != Some(p + 1) {
                return Err(Error::parse(
                    format!("line {header_line} column {}", idx + 1),
                    format!("unexpected header `{name}`"),
                ));
            }
            p += 1;
        } else if let Some(i) = name.strip_prefix('u') {
            if i.parse::<usize>().ok() != Some(m + 1) {
                return Err(Error::parse(
                    format!("line {header_line} column {}", idx + 1),
                    format!("unexpected header `{name}`"),
                ));
            }
            m += 1;
        } else {
            return Err(Error::parse(
                format!("line {header_line} column {}", idx + 1),
                format!("unexpected header `{name}`"),
            ));
        }
    }

    let mut y = Vec::new();
    let mut u = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(header_line + row + 1, |pos| pos.line() as usize);
        if rec.len() != 1 + p + m {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected {} fields, found {}", 1 + p + m, rec.len()),
            ));
        }
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(format!("line {line} field `t`"), format!("`{}`", &rec[0])))?;
        if t != row + 1 {
            return Err(Error::parse(
                format!("line {line} field `t`"),
                format!("expected sample index {}, found {t}", row + 1),
            ));
        }
        let mut vals = Vec::with_capacity(p + m);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(
                    format!("line {line} field `{}`", &header[j]),
                    format!("not a number: `{field}`"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("line {line} field `{}`", &header[j]),
                    "non-finite value",
                ));
            }
            vals.push(v);
        }
        y.push(DVector::from_column_slice(&vals[..p]));
        u.push(DVector::from_column_slice(&vals[p..]));
    }
    let mut data = Dataset::new(y, u)?;
    data.seed = seed;
    data.snr_db = snr_db;
    data.noise_scale = noise_scale;
    Ok(data)
}
