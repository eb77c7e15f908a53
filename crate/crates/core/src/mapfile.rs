//! Relevance map files.
//!
//! ```text
//! magic    8 bytes  "APEMMAP\n"
//! header   u32 LE length + UTF-8 JSON (image id, method, params, stage, height, width)
//! grid     height * width little-endian f64, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{Method, RelevanceMap, Stage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"APEMMAP\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub image_id: u64,
    pub method: Method,
    pub params: BTreeMap<String, f64>,
    pub stage: Stage,
    pub height: usize,
    pub width: usize,
}

pub fn encode_map<S: Scalar>(header: &MapHeader, map: &RelevanceMap<S>) -> Result<Vec<u8>> {
    if map.values.shape() != [header.height, header.width] {
        return Err(Error::InputShape {
            expected: vec![header.height, header.width],
            actual: map.values.shape().to_vec(),
        });
    }
    let text = serde_json::to_string(header).expect("map header serializes");
    let mut out = Vec::with_capacity(12 + text.len() + 8 * map.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in map.values.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_map<S: Scalar>(bytes: &[u8], origin: &str) -> Result<(MapHeader, RelevanceMap<S>)> {
    let bad = |what: &str| Error::Format(format!("{origin}: {what}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not an apemkit map file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: MapHeader =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(&format!("header: {e}")))?;
    let n = header
        .height
        .checked_mul(header.width)
        .ok_or_else(|| bad("grid size overflows"))?;
    let grid = &bytes[hend..];
    if grid.len() != n * 8 {
        return Err(bad(&format!(
            "expected {} grid bytes, found {}",
            n * 8,
            grid.len()
        )));
    }
    let values: Vec<f64> = grid
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let map = RelevanceMap::normalized(
        Tensor::from_f64(&[header.height, header.width], &values)?,
        header.stage,
    )?;
    Ok((header, map))
}

pub fn save_map<S: Scalar>(path: &Path, header: &MapHeader, map: &RelevanceMap<S>) -> Result<()> {
    fs::write(path, encode_map(header, map)?).map_err(|e| Error::io(path, e))
}

pub fn load_map<S: Scalar>(path: &Path) -> Result<(MapHeader, RelevanceMap<S>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes, &path.display().to_string())
}

/// One CSV line per map row, values comma-separated.
pub fn write_map_csv<S: Scalar, W: Write>(
    map: &RelevanceMap<S>,
    mut out: W,
) -> std::io::Result<()> {
    for row in map.values.data().chunks(map.width().max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.as_f64().to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}
