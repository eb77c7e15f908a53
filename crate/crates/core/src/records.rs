//! Per-image result rows and their CSV encoding.
//!
//! `GapRow` is the contract between evaluation and reporting: one row per
//! (image, method, stage), with the epsilon fields left empty when the gap is
//! undefined (an all-zero relevance or irrelevance map).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apem::GapResult;
use crate::error::{Error, Result};
use crate::explain::{Method, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub image_id: u64,
    pub method: Method,
    pub stage: Stage,
    pub eps_minus: Option<u64>,
    pub eps_plus: Option<u64>,
    pub gap: Option<i64>,
    pub capped_minus: Option<bool>,
    pub capped_plus: Option<bool>,
    pub predicted_class: usize,
    pub true_class: usize,
    pub confidence: f64,
    pub loss: f64,
}

impl GapRow {
    pub fn set_result(&mut self, r: Option<&GapResult>) {
        self.eps_minus = r.map(|r| r.eps_minus);
        self.eps_plus = r.map(|r| r.eps_plus);
        self.gap = r.map(|r| r.gap);
        self.capped_minus = r.map(|r| r.capped_minus);
        self.capped_plus = r.map(|r| r.capped_plus);
    }

    pub fn is_defined(&self) -> bool {
        self.gap.is_some()
    }

    pub fn is_capped(&self) -> bool {
        self.capped_minus == Some(true) || self.capped_plus == Some(true)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}

/// A gap row computed on a shuffled copy of the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub image_id: u64,
    pub method: Method,
    pub stage: Stage,
    pub shuffle: u32,
    pub eps_minus: Option<u64>,
    pub eps_plus: Option<u64>,
    pub gap: Option<i64>,
    pub capped_minus: Option<bool>,
    pub capped_plus: Option<bool>,
}

impl ShuffleRow {
    pub fn new(
        image_id: u64,
        method: Method,
        stage: Stage,
        shuffle: u32,
        r: Option<&GapResult>,
    ) -> Self {
        Self {
            image_id,
            method,
            stage,
            shuffle,
            eps_minus: r.map(|r| r.eps_minus),
            eps_plus: r.map(|r| r.eps_plus),
            gap: r.map(|r| r.gap),
            capped_minus: r.map(|r| r.capped_minus),
            capped_plus: r.map(|r| r.capped_plus),
        }
    }
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(f))
}
