//! On-disk mask and caption caches.
//!
//! Mask file: 8-byte header `b"MSK1"`, height (u16 LE), width (u16 LE), then
//! `ceil(H·W / 8)` bytes of row-major bits, most significant bit first,
//! trailing bits zero.
//!
//! Caption sidecar: UTF-8 text, one `<image sha256 hex>\t<caption>` per line,
//! sorted by hash.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BinaryMask, Result, SigError, TextDescription};

pub const MASK_MAGIC: &[u8; 4] = b"MSK1";

fn bad(path: &Path, reason: impl Into<String>) -> SigError {
    SigError::MaskFile { path: path.display().to_string(), reason: reason.into() }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.bits().len().div_ceil(8));
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.height() as u16).to_le_bytes());
    out.extend_from_slice(&(mask.width() as u16).to_le_bytes());
    for chunk in mask.bits().chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 0x80 >> i;
            }
        }
        out.push(byte);
    }
    out
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    if mask.height() > u16::MAX as usize || mask.width() > u16::MAX as usize {
        return Err(bad(path, "dimensions exceed 65535"));
    }
    write_atomic(path, &encode_mask(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != MASK_MAGIC {
        return Err(bad(path, "missing MSK1 header"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = h * w;
    if bytes.len() != 8 + n.div_ceil(8) {
        return Err(bad(path, format!("{}x{} mask needs {} payload bytes, found {}", h, w, n.div_ceil(8), bytes.len() - 8)));
    }
    let bits = (0..n).map(|i| bytes[8 + i / 8] & (0x80 >> (i % 8)) != 0).collect();
    BinaryMask::from_bits(h, w, bits)
}

pub fn write_captions(path: &Path, entries: &[(String, TextDescription)]) -> Result<()> {
    let mut sorted: Vec<_> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::new();
    for (hash, caption) in sorted {
        text.push_str(hash);
        text.push('\t');
        text.push_str(&caption.text());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_captions(path: &Path) -> Result<Vec<(String, TextDescription)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (hash, caption) = line
            .split_once('\t')
            .ok_or_else(|| bad(path, format!("line {}: expected `hash<TAB>caption`", n + 1)))?;
        out.push((hash.to_string(), TextDescription::new(caption)));
    }
    Ok(out)
}
