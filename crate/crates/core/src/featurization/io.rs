//! Raw input file formats. All integers and samples are little-endian.
//!
//! Image stack (`.img`):
//! ```text
//! magic b"TPIM", version u32 = 1,
//! count u32, height u32, width u32, channels u32,
//! pixels f32 in planar order: image, channel, row, column
//! ```
//!
//! Waveform (`.wav`, not RIFF):
//! ```text
//! magic b"TPWV", version u32 = 1, sample_rate u32, samples u64,
//! samples f32 (PCM float)
//! ```

use std::fs;
use std::path::Path;

use super::{ImageGeometry, VisualInput};
use crate::error::{Error, Result};

const IMAGE_MAGIC: &[u8; 4] = b"TPIM";
const WAVE_MAGIC: &[u8; 4] = b"TPWV";
const VERSION: u32 = 1;

/// Writes pixels planar; `patch` is not stored and must be supplied on read.
pub fn write_images(path: &Path, input: &VisualInput) -> Result<()> {
    let g = input.geometry();
    let mut buf = Vec::with_capacity(24 + g.pixel_count() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [
        VERSION,
        g.count as u32,
        g.height as u32,
        g.width as u32,
        g.channels as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let px = input.pixels();
    for j in 0..g.count {
        for c in 0..g.channels {
            for y in 0..g.height {
                for x in 0..g.width {
                    let v = px[((j * g.height + y) * g.width + x) * g.channels + c];
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: &Path, patch: usize) -> Result<VisualInput> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "not an image stack"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let g = ImageGeometry {
        count: word(1),
        height: word(2),
        width: word(3),
        channels: word(4),
        patch,
    };
    let n = g.count * g.height * g.width * g.channels;
    if bytes.len() != 24 + 4 * n {
        return Err(Error::format(path, "pixel payload size does not match header"));
    }
    let planar: Vec<f32> = bytes[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut pixels = vec![0f32; n];
    let mut it = planar.into_iter();
    for j in 0..g.count {
        for c in 0..g.channels {
            for y in 0..g.height {
                for x in 0..g.width {
                    pixels[((j * g.height + y) * g.width + x) * g.channels + c] = it.next().unwrap();
                }
            }
        }
    }
    VisualInput::new(g, pixels)
}

pub fn write_waveform(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + samples.len() * 4);
    buf.extend_from_slice(WAVE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(samples, sample_rate)`.
pub fn read_waveform(path: &Path) -> Result<(Vec<f32>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != WAVE_MAGIC {
        return Err(Error::format(path, "not a waveform file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rate = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format(path, "sample payload size does not match header"));
    }
    let samples = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((samples, rate))
}
