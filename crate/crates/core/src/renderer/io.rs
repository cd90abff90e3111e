//! Binary PPM (P6) images and flat depth / mask maps.
//!
//! Map layout: magic `PMAP`, one dtype byte (1 = f64 depth, 2 = u8 mask),
//! three zero bytes, little-endian u32 height and width, then row-major
//! little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use super::RgbImage;
use crate::error::{Error, Result};

const MAP_MAGIC: &[u8; 4] = b"PMAP";
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    if header[0] != "P6" {
        return Err(Error::Data(format!("unsupported image magic {:?}", header[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
    }
    let n = w * h * 3;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Data("truncated PPM pixel data".into()))?;
    Ok(RgbImage {
        width: w,
        height: h,
        data: body.iter().map(|&b| b as f64 / maxval as f64).collect(),
    })
}

fn write_header(w: &mut impl Write, dtype: u8, height: usize, width: usize) -> Result<()> {
    w.write_all(MAP_MAGIC)?;
    w.write_all(&[dtype, 0, 0, 0])?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, dtype: u8) -> Result<(usize, usize)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != MAP_MAGIC {
        return Err(Error::Data("not a map file".into()));
    }
    if head[4] != dtype {
        return Err(Error::Data(format!("map dtype {} != expected {dtype}", head[4])));
    }
    let h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    Ok((h, w))
}

pub fn write_depth(path: &Path, depth: &[f64], height: usize, width: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, DTYPE_F64, height, width)?;
    for v in depth {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (h, w) = read_header(&mut f, DTYPE_F64)?;
    let mut buf = vec![0u8; h * w * 8];
    f.read_exact(&mut buf)?;
    let depth = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((depth, h, w))
}

pub fn write_mask(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, DTYPE_U8, height, width)?;
    f.write_all(&mask.iter().map(|&m| m as u8).collect::<Vec<_>>())?;
    f.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (h, w) = read_header(&mut f, DTYPE_U8)?;
    let mut buf = vec![0u8; h * w];
    f.read_exact(&mut buf)?;
    Ok((buf.into_iter().map(|b| b != 0).collect(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantizes_to_8_bits() {
        let mut img = RgbImage::new(3, 2);
        img.set(1, 1, [1.0, 0.5, 0.0]);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.get(1, 1), [1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(back.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn depth_and_mask_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let depth = vec![1.5, f64::INFINITY, 0.25, 2.0, 3.0, 4.0];
        let p = dir.path().join("d.map");
        write_depth(&p, &depth, 2, 3).unwrap();
        assert_eq!(read_depth(&p).unwrap(), (depth, 2, 3));
        let mask = vec![true, false, true, true, false, false];
        let q = dir.path().join("m.map");
        write_mask(&q, &mask, 3, 2).unwrap();
        assert_eq!(read_mask(&q).unwrap(), (mask, 3, 2));
        assert!(read_mask(&p).is_err());
    }
}
