//! File helpers: atomic writes, JSON and 16/8-bit PGM images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary (P5) PGM. The `image` PNM encoder only writes 8-bit samples, so
/// the header is emitted here; samples wider than a byte are big-endian.
fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

fn check_extent(path: &Path, width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len || len == 0 {
        return Err(Error::format(
            path,
            format!("{len} pixels do not fill a {width}x{height} image"),
        ));
    }
    Ok(())
}

/// Writes a 16-bit binary PGM; `values` is row-major `height x width`.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    check_extent(path, width, height, values.len())?;
    let raw: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_atomic(path, &encode_pgm(width, height, u16::MAX, &raw))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    check_extent(path, width, height, values.len())?;
    write_atomic(path, &encode_pgm(width, height, u8::MAX as u16, values))
}

/// A decoded grayscale PGM.
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: GrayPixels,
}

pub enum GrayPixels {
    Eight(Vec<u8>),
    Sixteen(Vec<u16>),
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma8(b) => GrayPixels::Eight(b.into_raw()),
        image::DynamicImage::ImageLuma16(b) => GrayPixels::Sixteen(b.into_raw()),
        _ => return Err(Error::format(path, "expected a grayscale PGM")),
    };
    Ok(Gray {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let g = read_pgm(path)?;
    match g.pixels {
        GrayPixels::Sixteen(p) => Ok((g.width, g.height, p)),
        GrayPixels::Eight(_) => Err(Error::format(path, "expected a 16-bit PGM")),
    }
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let g = read_pgm(path)?;
    match g.pixels {
        GrayPixels::Eight(p) => Ok((g.width, g.height, p)),
        GrayPixels::Sixteen(_) => Err(Error::format(path, "expected an 8-bit PGM")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("a.pgm");
        let v16: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_pgm16(&p16, 4, 3, &v16).unwrap();
        assert_eq!(read_pgm16(&p16).unwrap(), (4, 3, v16));
        let p8 = dir.path().join("b.pgm");
        write_pgm8(&p8, 2, 2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(read_pgm8(&p8).unwrap(), (2, 2, vec![0, 1, 2, 3]));
        assert!(read_pgm16(&p8).is_err());
        assert!(!dir.path().join("a.pgm.tmp").exists());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_bytes(Path::new("/nonexistent/x.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.bin"));
    }
}
