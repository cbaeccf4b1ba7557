//! Binary PPM (P6) output, 8 bits per channel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::toyfaces::ToyImage;

pub fn encode_ppm(img: &ToyImage) -> Vec<u8> {
    let n = img.size;
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    out.reserve(3 * n * n);
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &ToyImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ToyImage> {
    let bad = || Error::Format("not an 8-bit square P6 image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P6" || fields[3] != "255" || w != h || bytes.len() < pos + 3 * w * h {
        return Err(bad());
    }
    let mut pixels = vec![0.0; 3 * w * h];
    for (i, px) in bytes[pos..pos + 3 * w * h].chunks(3).enumerate() {
        for c in 0..3 {
            pixels[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    ToyImage::new(w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantizes_to_8_bits() {
        let img = ToyImage::new(2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
