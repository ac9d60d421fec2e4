//! Per-anchor CSV dump of an assignment.
//!
//! Columns: `anchor_index,x,y,s,u,t,t_hat,instance,is_positive`, followed by
//! the decoded prediction `pred_x1..pred_y2`, the matched ground truth
//! `gt_x1..gt_y2` (empty for non-positives) and the raw class scores
//! `score_0..score_{K-1}`. `instance` is empty when the anchor is not
//! positive.

use std::io::{Read, Write};
use std::path::Path;

use super::{predicted_box, AnchorGrid, Assignment};
use crate::error::{Error, Result};
use crate::geometry::Instance;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRow {
    pub anchor_index: usize,
    pub x: f64,
    pub y: f64,
    pub s: f64,
    pub u: f64,
    pub t: f64,
    pub t_hat: f64,
    pub instance: Option<usize>,
    pub is_positive: bool,
    pub pred: [f64; 4],
    pub gt: Option<[f64; 4]>,
    pub scores: Vec<f64>,
}

const FIXED: [&str; 17] = [
    "anchor_index", "x", "y", "s", "u", "t", "t_hat", "instance", "is_positive", "pred_x1", "pred_y1", "pred_x2",
    "pred_y2", "gt_x1", "gt_y1", "gt_x2", "gt_y2",
];

/// Writes one row per anchor.
#[allow(clippy::too_many_arguments)]
pub fn write_anchor_dump<T: Scalar, W: Write>(
    out: W,
    grid: &AnchorGrid,
    assignment: &Assignment,
    instances: &[Instance],
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
) -> Result<()> {
    let k = p_align.hwc()?.2;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..k).map(|c| format!("score_{c}")));
    w.write_record(&header)?;
    for (idx, l) in assignment.labels.iter().enumerate() {
        let (x, y) = grid.point(idx);
        let mut row = vec![
            idx.to_string(),
            x.to_string(),
            y.to_string(),
            l.s.to_string(),
            l.u.to_string(),
            l.t.to_string(),
            l.t_hat.to_string(),
            l.instance.filter(|_| l.is_positive).map(|i| i.to_string()).unwrap_or_default(),
            (l.is_positive as u8).to_string(),
        ];
        row.extend(predicted_box(grid, b_align, idx).iter().map(|v| v.to_string()));
        match l.instance.filter(|_| l.is_positive) {
            Some(i) => row.extend(instances[i].bbox.to_array().iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.extend((0..k).map(|c| p_align.data()[idx * k + c].as_f64().to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Io { path: "<anchor dump>".into(), source: e })?;
    Ok(())
}

fn parse<F: std::str::FromStr>(field: &str, line: usize, col: &str) -> Result<F> {
    field
        .parse()
        .map_err(|_| Error::format(line, format!("column {col}: cannot parse {field:?}")))
}

/// Reads a dump written by [`write_anchor_dump`]. Format errors carry the
/// 1-based line number as their offset.
pub fn read_anchor_dump<R: Read>(input: R) -> Result<Vec<AnchorRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < FIXED.len() || header.iter().zip(FIXED).any(|(a, b)| a != b) {
        return Err(Error::format(1, "unexpected anchor dump header"));
    }
    let k = header.len() - FIXED.len();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let f = |i: usize| -> Result<f64> { parse(&rec[i], line, FIXED[i]) };
        let opt_box = if rec[13].is_empty() {
            None
        } else {
            Some([f(13)?, f(14)?, f(15)?, f(16)?])
        };
        rows.push(AnchorRow {
            anchor_index: parse(&rec[0], line, "anchor_index")?,
            x: f(1)?,
            y: f(2)?,
            s: f(3)?,
            u: f(4)?,
            t: f(5)?,
            t_hat: f(6)?,
            instance: if rec[7].is_empty() { None } else { Some(parse(&rec[7], line, "instance")?) },
            is_positive: parse::<u8>(&rec[8], line, "is_positive")? == 1,
            pred: [f(9)?, f(10)?, f(11)?, f(12)?],
            gt: opt_box,
            scores: (0..k).map(|c| parse(&rec[FIXED.len() + c], line, "score")).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Writes the dump to `path`.
pub fn write_anchor_dump_file<T: Scalar>(
    path: &Path,
    grid: &AnchorGrid,
    assignment: &Assignment,
    instances: &[Instance],
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_anchor_dump(std::io::BufWriter::new(f), grid, assignment, instances, p_align, b_align)
}
