//! Binary PGM/PPM images, PGM masks and raw float dumps.
//!
//! Pixel values map to `[0, 1]` by `v / 255` on read and by
//! `round(clamp(v, 0, 1) * 255)` on write.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Field, MaskField};

const DUMP_MAGIC: &[u8; 4] = b"CFSF";

/// Encodes a 1-channel field as P5 or a 3-channel field as P6.
pub fn encode_pnm(f: &Field) -> Result<Vec<u8>> {
    let magic = match f.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot write {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", f.width(), f.height()).into_bytes();
    out.extend(f.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes P5 (1 channel) or P6 (3 channels), 8-bit only.
pub fn decode_pnm(bytes: &[u8]) -> Result<Field> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported magic {m:?}"))),
    };
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("truncated raster: need {n} bytes")))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Field::new(height, width, channels, data)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad header number {tok:?}")))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Field> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, f: &Field) -> Result<()> {
    fs::write(path, encode_pnm(f)?)?;
    Ok(())
}

/// Reads a PGM mask; pixels `>= 128` are known.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskField> {
    let f = read_image(path)?;
    if f.channels() != 1 {
        return Err(Error::Format("mask must be a single-channel PGM".into()));
    }
    // v / 255 >= 128 / 255
    let bits = f.data().iter().map(|&v| (v * 255.0).round() >= 128.0).collect();
    MaskField::new(f.height(), f.width(), bits)
}

pub fn mask_to_field(m: &MaskField) -> Field {
    let data = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Field::new(m.height(), m.width(), 1, data).expect("mask dims are valid")
}

pub fn write_mask(path: impl AsRef<Path>, m: &MaskField) -> Result<()> {
    write_image(path, &mask_to_field(m))
}

/// Raw dump: `"CFSF"`, u32 height, u32 width, u32 channels, then
/// little-endian f32 values.
pub fn write_dump(mut w: impl Write, f: &Field) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    for d in [f.height(), f.width(), f.channels()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in f.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dump(mut r: impl Read) -> Result<Field> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != DUMP_MAGIC {
        return Err(Error::Format("missing CFSF magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let mut raw = vec![0u8; h * w * c * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Field::new(h, w, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_quantized() {
        let f = Field::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let back = decode_pnm(&encode_pnm(&f).unwrap()).unwrap();
        assert_eq!(back.shape(), f.shape());
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // quantized values survive exactly
        assert_eq!(decode_pnm(&encode_pnm(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!(f.shape(), (1, 2, 1));
        assert_eq!(f.data(), &[0.0, 1.0]);

        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n65535\n").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut bytes = b"P5\n4 1\n255\n".to_vec();
        bytes.extend([0u8, 127, 128, 255]);
        fs::write(&path, bytes).unwrap();
        let m = read_mask(&path).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn dump_layout() {
        let f = Field::new(1, 2, 1, vec![0.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_dump(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], b"CFSF");
        assert_eq!(buf.len(), 16 + 8);
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &0.5f32.to_le_bytes());
        assert_eq!(read_dump(&buf[..]).unwrap(), f);
        assert!(read_dump(&b"XXXX\0\0\0\0\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
