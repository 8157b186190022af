//! Binary PGM (`P5`) image ingestion with center cropping.

use std::path::Path;

use crate::error::{invalid, Error, Result};

/// A decoded grayscale image with values in `[0, maxval]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |why: &str| Error::Format(format!("pgm: {why}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let width = token(bytes, &mut pos).ok_or_else(|| bad("bad width"))?;
    let height = token(bytes, &mut pos).ok_or_else(|| bad("bad height"))?;
    let maxval = token(bytes, &mut pos).ok_or_else(|| bad("bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval outside 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header not terminated"));
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| bad("extent overflow"))?;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raw = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let pixels: Vec<u16> = if wide {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raw.iter().map(|&b| b as u16).collect()
    };
    if pixels.iter().any(|&p| p as usize > maxval) {
        return Err(bad("pixel above maxval"));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, pixels })
}

/// Center `side × side` crop rescaled to `[-1, 1]`; `None` if the image is
/// smaller than the crop.
pub fn center_crop(img: &Pgm, side: usize) -> Option<Vec<f64>> {
    if img.width < side || img.height < side {
        return None;
    }
    let (x0, y0) = ((img.width - side) / 2, (img.height - side) / 2);
    let scale = 2.0 / img.maxval as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        let row = &img.pixels[y * img.width..][..img.width];
        out.extend(row[x0..x0 + side].iter().map(|&p| p as f64 * scale - 1.0));
    }
    Some(out)
}

/// Result of ingesting a directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub images: Vec<Vec<f64>>,
    /// Files that failed to parse or were too small.
    pub skipped: usize,
}

/// Loads every regular file in `dir` (sorted by name) as a PGM cropped to
/// `side × side`. Unusable files are skipped and counted.
pub fn ingest_dir(dir: &Path, side: usize) -> Result<Ingested> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    if paths.is_empty() {
        return Err(invalid(format!("{} contains no files", dir.display())));
    }
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = 0;
    for p in &paths {
        let img = std::fs::read(p).ok().and_then(|b| parse_pgm(&b).ok()).and_then(|i| center_crop(&i, side));
        match img {
            Some(v) => images.push(v),
            None => skipped += 1,
        }
    }
    if images.is_empty() {
        return Err(invalid(format!("none of the {} files in {} is a usable image", paths.len(), dir.display())));
    }
    Ok(Ingested { images, skipped })
}

/// Encodes an 8-bit P5 image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_image_maps_to_one() {
        let img = parse_pgm(&encode_pgm(16, 16, &[255; 256])).unwrap();
        assert_eq!(center_crop(&img, 16).unwrap(), vec![1.0; 256]);
    }

    #[test]
    fn comments_and_wide_samples() {
        let mut b = b"P5 # note\n2 1\n# more\n1000\n".to_vec();
        b.extend_from_slice(&[0, 0, 0x03, 0xe8]);
        let img = parse_pgm(&b).unwrap();
        assert_eq!(img.pixels, vec![0, 1000]);
        assert_eq!(center_crop(&img, 1).unwrap(), vec![-1.0]);
    }

    #[test]
    fn crop_takes_the_middle() {
        let px: Vec<u8> = (0..16).collect();
        let img = parse_pgm(&encode_pgm(4, 4, &px)).unwrap();
        let c = center_crop(&img, 2).unwrap();
        let expect: Vec<f64> = [5u8, 6, 9, 10].iter().map(|&p| p as f64 * 2.0 / 255.0 - 1.0).collect();
        assert_eq!(c, expect);
        assert!(center_crop(&img, 5).is_none());
    }

    #[test]
    fn corrupt_headers_fail() {
        for b in [&b"P6\n1 1\n255\n\0"[..], b"P5\n1\n", b"P5\n1 1\n255\n", b"P5\n0 1\n255\n", b"P5\n1 1\n100\n\xff"] {
            assert!(parse_pgm(b).is_err(), "{b:?}");
        }
    }
}
