//! `APTD` dataset container:
//!
//! ```text
//! magic "APTD" | version u32 | n_samples u32 | height u16 | width u16 |
//! channels u16 | n_classes u16 | per sample: label u16, pixels f32 × H·W·C
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::io::{put_f32s, LeReader};

pub const DATA_MAGIC: [u8; 4] = *b"APTD";
pub const DATA_VERSION: u32 = 1;

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds 16 bits")))
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(&DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    let n = u32::try_from(ds.len()).map_err(|_| Error::Format("too many samples".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for (v, what) in [
        (ds.height, "height"),
        (ds.width, "width"),
        (ds.channels, "channels"),
        (ds.n_classes, "class count"),
    ] {
        w.write_all(&u16_field(v, what)?.to_le_bytes())?;
    }
    for i in 0..ds.len() {
        w.write_all(&u16_field(ds.labels[i], "label")?.to_le_bytes())?;
        put_f32s(w, ds.image(i))?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(r: R) -> Result<Dataset> {
    let mut r = LeReader::new(r, "dataset file");
    r.expect_header(DATA_MAGIC, DATA_VERSION)?;
    let n = r.u32()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let n_classes = r.u16()? as usize;
    let per = height * width * channels;
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    let mut pixels = Vec::with_capacity((n * per).min(1 << 26));
    for _ in 0..n {
        let label = r.u16()? as usize;
        if label >= n_classes {
            return Err(Error::Format(format!("label {label} not below class count {n_classes}")));
        }
        labels.push(label);
        pixels.extend(r.f32s(per)?);
    }
    r.expect_end()?;
    Ok(Dataset {
        height,
        width,
        channels,
        n_classes,
        labels,
        pixels,
        split: Split::Unspecified,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
