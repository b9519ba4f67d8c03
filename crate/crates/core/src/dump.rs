//! Attention-map export: one CSV (`pass,row,col,weight`) and one binary
//! 8-bit PGM per map. The PGM has one pixel row per pooled token and one
//! column per input token, min-max scaled to `0..=255`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pooling::AttentionMap;

pub fn map_csv(map: &AttentionMap) -> String {
    let mut out = String::from("pass,row,col,weight\n");
    for r in 0..map.rows() {
        for (c, w) in map.weights.row(r).iter().enumerate() {
            let _ = writeln!(out, "{},{r},{c},{w:.9e}", map.pass);
        }
    }
    out
}

pub fn map_pgm(map: &AttentionMap) -> Vec<u8> {
    let data = map.weights.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    out.extend(data.iter().map(|&w| {
        if span > 0.0 {
            ((w - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `{pass}.csv` and `{pass}.pgm` for every map; returns the paths.
pub fn write_maps(maps: &[AttentionMap], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for map in maps {
        let csv = dir.join(format!("{}.csv", map.pass));
        fs::write(&csv, map_csv(map)).map_err(|e| Error::io(&csv, e))?;
        let pgm = dir.join(format!("{}.pgm", map.pass));
        fs::write(&pgm, map_pgm(map)).map_err(|e| Error::io(&pgm, e))?;
        paths.push(csv);
        paths.push(pgm);
    }
    Ok(paths)
}
