/*
 * Field-sample files. Two formats, both embedding the resolved run
 * configuration so a file is a self-describing reproduction bundle:
 *   - CSV: `#`-prefixed metadata lines followed by one row per time point
 *     (shortest round-trip float formatting, so re-reading is bit exact);
 *   - binary: magic, metadata JSON, then little-endian f64 values.
 */

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use spde_core::model::FieldSample;
use spde_core::{Result, SpdeError};

use crate::config::{resolve, FieldFormat, Overrides, RunConfig};

const MAGIC: &[u8; 8] = b"SPDEFB01";

/// Everything but the values: enough to rebuild the sample and audit the
/// run that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldMeta {
    pub config: RunConfig,
    pub seed: u64,
    pub stream_index: u64,
}

fn data_err(msg: impl Into<String>) -> SpdeError {
    SpdeError::DataError(msg.into())
}

/// Write `sample` to `path` in the requested format, embedding the resolved
/// config.
pub fn write_field(
    path: &Path,
    format: FieldFormat,
    sample: &FieldSample,
    config: &RunConfig,
) -> Result<()> {
    let meta = FieldMeta {
        config: config.clone(),
        seed: sample.seed,
        stream_index: sample.stream_index,
    };
    let meta_json = serde_json::to_string(&meta)?;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        FieldFormat::Csv => {
            writeln!(w, "# spde field sample")?;
            writeln!(w, "# meta = {meta_json}")?;
            let m = sample.scheme.m();
            let header: Vec<String> = (0..m).map(|j| format!("y{j}")).collect();
            writeln!(w, "{}", header.join(","))?;
            for i in 0..sample.n_rows() {
                let row: Vec<String> = sample.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        FieldFormat::Binary => {
            w.write_all(MAGIC)?;
            w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
            w.write_all(meta_json.as_bytes())?;
            for v in &sample.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a field sample written by [`write_field`], detecting the format
/// from the leading bytes. Returns the sample and its embedded config.
pub fn read_field(path: &Path) -> Result<(FieldSample, RunConfig)> {
    let bytes = fs::read(path)?;
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] == MAGIC {
        read_binary(&bytes)
    } else {
        read_csv(std::str::from_utf8(&bytes).map_err(|_| data_err("field file is not valid UTF-8 text"))?)
    }
}

fn rebuild(meta: FieldMeta, values: Vec<f64>) -> Result<(FieldSample, RunConfig)> {
    let run = resolve(meta.config, &Overrides::default())?;
    let expected = (run.scheme.n() + 1) * run.scheme.m();
    if values.len() != expected {
        return Err(data_err(format!(
            "field file holds {} values, metadata implies {expected}",
            values.len()
        )));
    }
    let sample = FieldSample {
        params: run.params.clone(),
        scheme: run.scheme.clone(),
        method: run.method.clone(),
        seed: meta.seed,
        stream_index: meta.stream_index,
        values,
    };
    Ok((sample, run.config))
}

fn read_binary(bytes: &[u8]) -> Result<(FieldSample, RunConfig)> {
    let mut cursor = &bytes[MAGIC.len()..];
    let mut len_buf = [0u8; 8];
    cursor
        .read_exact(&mut len_buf)
        .map_err(|_| data_err("binary field file truncated in header"))?;
    let meta_len = u64::from_le_bytes(len_buf) as usize;
    if cursor.len() < meta_len {
        return Err(data_err("binary field file truncated in metadata"));
    }
    let meta: FieldMeta = serde_json::from_slice(&cursor[..meta_len])?;
    let rest = &cursor[meta_len..];
    if rest.len() % 8 != 0 {
        return Err(data_err("binary field file has a partial value record"));
    }
    let values: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    rebuild(meta, values)
}

fn read_csv(text: &str) -> Result<(FieldSample, RunConfig)> {
    let mut meta: Option<FieldMeta> = None;
    let mut values = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(json) = rest.trim_start().strip_prefix("meta = ") {
                meta = Some(serde_json::from_str(json)?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| data_err(format!("field file cell {cell:?} is not a number")))?;
            values.push(v);
        }
    }
    let meta = meta.ok_or_else(|| data_err("field file is missing its `# meta = ` line"))?;
    rebuild(meta, values)
}
