//! ASCII PGM ("P2") reading and writing for grids.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Grid;

const MAXVAL: u32 = 255;

pub fn parse_pgm(text: &str) -> Result<Grid> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let magic = tokens.next().ok_or_else(|| Error::Format("empty file".into()))?;
    if magic != "P2" {
        return Err(Error::Format(format!("expected P2, found {magic:?}")));
    }
    let mut header = |what: &str| -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("missing {what}")))?
            .parse::<u32>()
            .map_err(|e| Error::Format(format!("bad {what}: {e}")))
    };
    let w = header("width")? as usize;
    let h = header("height")? as usize;
    let maxval = header("maxval")?;
    if maxval != MAXVAL {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected {MAXVAL}")));
    }
    let mut values = Vec::with_capacity(w * h);
    for tok in tokens {
        let v: u32 = tok
            .parse()
            .map_err(|e| Error::Format(format!("bad pixel {tok:?}: {e}")))?;
        if v > maxval {
            return Err(Error::Format(format!("pixel {v} exceeds maxval {maxval}")));
        }
        values.push(v as f64 / maxval as f64);
    }
    if values.len() != w * h {
        return Err(Error::Format(format!(
            "{w}x{h} image has {} pixels",
            values.len()
        )));
    }
    Grid::new(h, w, values)
}

/// Quantizes to 0..=255 with halves rounded up.
pub fn to_pgm(grid: &Grid) -> String {
    let mut out = format!("P2\n{} {}\n{MAXVAL}\n", grid.w, grid.h);
    for row in grid.values().chunks(grid.w) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v * MAXVAL as f64 + 0.5).floor() as u32).min(MAXVAL).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    parse_pgm(&fs::read_to_string(path)?)
}

pub fn save_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_pgm(grid))?;
    Ok(())
}
