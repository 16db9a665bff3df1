//! Bit-exact image persistence.
//!
//! Canonical format OPIMG1: magic `OPIMG1`, little-endian u32 height,
//! width, channels, then f64 pixel data row-major channel-interleaved.
//! Round-trips are bit-identical. A PPM (P6) exporter provides an 8-bit
//! view for external tools; quantization is q = floor(v·255 + 0.5).
//!
//! The same length-prefixed container backs parameter checkpoints
//! (`OPPAR1`) and policy checkpoints (`OPPOL1`): magic, u32 entry count,
//! then per entry a u32 name length, UTF-8 name, u32 value count, and f64
//! little-endian values.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const IMG_MAGIC: &[u8; 6] = b"OPIMG1";
/// Per-dimension sanity bound for loads: guards against corrupt headers
/// allocating absurd buffers.
const MAX_DIM: u32 = 1 << 20;

/// Write bytes to `path` atomically (write to sibling temp, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + img.data().len() * 8);
    buf.extend_from_slice(IMG_MAGIC);
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.channels() as u32).to_le_bytes());
    for &v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() < 18 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..6] != IMG_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let c = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
    if h > MAX_DIM || w > MAX_DIM || c > 4 {
        return Err(Error::Format(format!("{}: dimension overflow {h}x{w}x{c}", path.display())));
    }
    let count = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(c as usize))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let expect = 18 + count * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: truncated payload ({} bytes, expected {expect})",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes[18..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Image::new(h as usize, w as usize, c as usize, data)
}

/// 8-bit quantization used by the PPM exporter.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Export as binary PPM (P6). Single-channel images are written as gray
/// RGB triplets.
pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    let c = img.channels();
    for px in img.data().chunks_exact(c) {
        if c == 1 {
            let q = quantize_u8(px[0]);
            buf.extend_from_slice(&[q, q, q]);
        } else {
            buf.extend_from_slice(&[quantize_u8(px[0]), quantize_u8(px[1]), quantize_u8(px[2])]);
        }
    }
    write_atomic(path, &buf)
}

/// Serialize name-keyed f64 arrays under the given 6-byte magic.
pub fn write_named_arrays(magic: &[u8; 6], entries: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, values) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for &v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Read back name-keyed f64 arrays, checking the magic.
pub fn read_named_arrays(magic: &[u8; 6], path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let bytes = fs::read(path)?;
    let take = |off: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!("{}: truncated payload", path.display())));
        }
        let out = bytes[*off..*off + n].to_vec();
        *off += n;
        Ok(out)
    };
    let mut off = 0usize;
    if take(&mut off, 6)? != magic {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("{}: name length overflow", path.display())));
        }
        let name = String::from_utf8(take(&mut off, name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut off, len * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, values));
    }
    if off != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(entries)
}
