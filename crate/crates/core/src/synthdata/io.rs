//! Dataset directories: one sub-directory per sample holding `layout.json`,
//! `partial.json`, `saliency.pgm`, `attention.pgm` and `attr.txt`.

use std::fs;
use std::path::Path;

use super::pgm::{load_grid, save_grid};
use super::Sample;
use crate::constraints::{AttributeConstraint, PartialLayout};
use crate::error::{Error, Result};
use crate::layout::Layout;

fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:06}")
}

pub fn write_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("layout.json"), sample.layout.to_json())?;
    fs::write(dir.join("partial.json"), sample.partial.to_json())?;
    save_grid(&sample.saliency, dir.join("saliency.pgm"))?;
    save_grid(&sample.attention, dir.join("attention.pgm"))?;
    fs::write(dir.join("attr.txt"), format!("{}\n", sample.attribute.name()))?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let attr_text = fs::read_to_string(dir.join("attr.txt"))?;
    let attribute = AttributeConstraint::from_name(attr_text.trim())
        .ok_or_else(|| Error::Parse(format!("unknown attribute {:?}", attr_text.trim())))?;
    Ok(Sample {
        layout: Layout::from_json(&fs::read_to_string(dir.join("layout.json"))?)?,
        saliency: load_grid(dir.join("saliency.pgm"))?,
        attention: load_grid(dir.join("attention.pgm"))?,
        attribute,
        partial: PartialLayout::from_json(&fs::read_to_string(dir.join("partial.json"))?)?,
    })
}

/// Writes `samples` under `root`, which must not already hold a dataset.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(s, &root.join(sample_dir_name(i)))?;
    }
    Ok(())
}

/// Reads every `sample_*` sub-directory of `root` in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && name.starts_with("sample_") {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no sample directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}
