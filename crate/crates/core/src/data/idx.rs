//! IDX file format (the MNIST container): big-endian magic + dimension
//! fields, then raw u8 payload.

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Load an image/label IDX pair, scaling pixels to [0,1] by /255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(images_path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(0, "truncated image magic"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(0, format!("bad image magic {magic:#010x}, want 0x00000803")));
    }
    let count = r
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(4, "truncated image count"))? as usize;
    let rows = r
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(8, "truncated row count"))? as usize;
    let cols = r
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(12, "truncated column count"))? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels).map_err(|_| {
        parse_err(16, format!("truncated pixel payload, expected {} bytes", pixels.len()))
    })?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let lmagic = lr
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(0, "truncated label magic"))?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(parse_err(0, format!("bad label magic {lmagic:#010x}, want 0x00000801")));
    }
    let lcount = lr
        .read_u32::<BigEndian>()
        .map_err(|_| parse_err(4, "truncated label count"))? as usize;
    if lcount != count {
        return Err(parse_err(
            4,
            format!("label count {lcount} does not match image count {count}"),
        ));
    }
    let mut labels = vec![0u8; count];
    lr.read_exact(&mut labels)
        .map_err(|_| parse_err(8, format!("truncated label payload, expected {count} bytes")))?;

    let inputs = Tensor::new(
        vec![count, 1, rows, cols],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    Ok(Dataset {
        inputs,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        split: "idx".into(),
    })
}

/// Write an image/label IDX pair (pixels already in [0,1], stored as u8).
pub fn write_idx(
    dataset: &Dataset,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let (c, h, w) = dataset.sample_dims();
    if c != 1 {
        return Err(Error::contract("IDX image files are single-channel"));
    }
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    iw.write_u32::<BigEndian>(dataset.len() as u32)?;
    iw.write_u32::<BigEndian>(h as u32)?;
    iw.write_u32::<BigEndian>(w as u32)?;
    let bytes: Vec<u8> = dataset
        .inputs
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    lw.write_u32::<BigEndian>(dataset.len() as u32)?;
    lw.write_all(&dataset.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    lw.flush()?;
    Ok(())
}
