//! Image and mask dumps: binary PPM (P6), plain-text PBM (P1) and a flat
//! little-endian `f32` RGBA file.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use trim_core::mask::InstanceMask;
use trim_core::render::RenderedImage;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes of the RGB channels (already composited over black).
pub fn ppm_bytes(image: &RenderedImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.pixels.len() * 3);
    for px in &image.pixels {
        out.extend(px[..3].iter().map(|&c| to_byte(c)));
    }
    out
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RenderedImage) -> io::Result<()> {
    fs::write(path, ppm_bytes(image))
}

/// P1 text grid, `1` for background cells.
pub fn pbm_text(mask: &InstanceMask) -> String {
    let mut out = format!("P1\n{} {}\n", mask.width(), mask.height());
    for row in 0..mask.height() {
        let line: Vec<&str> = (0..mask.width())
            .map(|col| if mask.get(row, col) { "1" } else { "0" })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pbm(path: impl AsRef<Path>, mask: &InstanceMask) -> io::Result<()> {
    fs::write(path, pbm_text(mask))
}

/// Row-major RGBA, four little-endian `f32` per pixel, no header.
pub fn write_rgba_f32(path: impl AsRef<Path>, image: &RenderedImage) -> io::Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    for px in &image.pixels {
        for &c in px {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_rgba_f32(path: impl AsRef<Path>, width: usize, height: usize) -> io::Result<RenderedImage> {
    let bytes = fs::read(path)?;
    if bytes.len() != width * height * 16 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("expected {} bytes, found {}", width * height * 16, bytes.len()),
        ));
    }
    let pixels = bytes
        .chunks_exact(16)
        .map(|px| {
            let c = |i: usize| f64::from(f32::from_le_bytes(px[i * 4..i * 4 + 4].try_into().unwrap()));
            [c(0), c(1), c(2), c(3)]
        })
        .collect();
    Ok(RenderedImage { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let mut img = RenderedImage::transparent(3, 2);
        img.pixels[1] = [1.0, 0.5, 0.0, 1.0];
        let b = ppm_bytes(&img);
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(b.len(), header.len() + 18);
        assert_eq!(&b[header.len() + 3..header.len() + 6], &[255, 128, 0]);
    }

    #[test]
    fn pbm_marks_background() {
        let mut m = InstanceMask::empty(2, 3);
        m.set(1, 2, true);
        assert_eq!(pbm_text(&m), "P1\n3 2\n0 0 0\n0 0 1\n");
    }

    #[test]
    fn rgba_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let mut img = RenderedImage::transparent(2, 2);
        img.pixels[3] = [0.25, 0.5, 0.75, 1.0];
        write_rgba_f32(&path, &img).unwrap();
        assert_eq!(read_rgba_f32(&path, 2, 2).unwrap(), img);
        assert!(read_rgba_f32(&path, 3, 2).is_err());
    }
}
