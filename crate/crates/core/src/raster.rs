//! Pixel rasters: display images, on/off pixel masks, and binary PPM I/O.

use crate::color::Rgb;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;

/// A floating-point RGB raster, row-major, values expected in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: u32, height: u32, value: Rgb) -> Self {
        Image {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn idx(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn get(&self, u: u32, v: u32) -> Rgb {
        self.data[self.idx(u, v)]
    }

    pub fn set(&mut self, u: u32, v: u32, value: Rgb) {
        let i = self.idx(u, v);
        self.data[i] = value;
    }

    /// Write as binary PPM (P6), 8-bit, clamped.
    pub fn write_ppm(&self, path: &Path) -> io::Result<()> {
        let mut out = Vec::with_capacity(self.pixel_count() * 3 + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in &self.data {
            for c in 0..3 {
                out.push((px[c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out)
    }

    /// Read a binary PPM (P6) or PGM (P5), 8-bit only.
    pub fn read_ppm(path: &Path) -> io::Result<Image> {
        let bytes = std::fs::read(path)?;
        parse_pnm(&bytes).map_err(|msg| io::Error::new(io::ErrorKind::InvalidData, msg))
    }
}

fn parse_pnm(bytes: &[u8]) -> Result<Image, String> {
    let mut cursor = io::Cursor::new(bytes);
    let mut header_fields = Vec::new();
    let mut magic = [0u8; 2];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| "truncated header".to_string())?;
    let magic = std::str::from_utf8(&magic).map_err(|_| "bad magic")?.to_string();
    if magic != "P6" && magic != "P5" {
        return Err(format!("unsupported PNM magic {magic:?}, expected P6 or P5"));
    }
    // Read width, height, maxval, skipping whitespace and '#' comments.
    while header_fields.len() < 3 {
        let mut byte = [0u8; 1];
        cursor.read_exact(&mut byte).map_err(|_| "truncated header")?;
        match byte[0] {
            b'#' => {
                let mut line = String::new();
                cursor.read_line(&mut line).map_err(|_| "truncated comment")?;
            }
            b if b.is_ascii_whitespace() => {}
            b => {
                let mut tok = vec![b];
                loop {
                    let mut nb = [0u8; 1];
                    cursor.read_exact(&mut nb).map_err(|_| "truncated header")?;
                    if nb[0].is_ascii_whitespace() {
                        break;
                    }
                    tok.push(nb[0]);
                }
                let s = std::str::from_utf8(&tok).map_err(|_| "bad token")?;
                header_fields.push(s.parse::<u32>().map_err(|_| format!("bad number {s:?}"))?);
            }
        }
    }
    let (width, height, maxval) = (header_fields[0], header_fields[1], header_fields[2]);
    if maxval != 255 {
        return Err(format!("only 8-bit PNM supported, got maxval {maxval}"));
    }
    let n = width as usize * height as usize;
    let chans = if magic == "P6" { 3 } else { 1 };
    let mut raw = vec![0u8; n * chans];
    cursor.read_exact(&mut raw).map_err(|_| "truncated pixel data")?;
    let data = (0..n)
        .map(|i| {
            if chans == 3 {
                Rgb::new(
                    raw[3 * i] as f64 / 255.0,
                    raw[3 * i + 1] as f64 / 255.0,
                    raw[3 * i + 2] as f64 / 255.0,
                )
            } else {
                Rgb::splat(raw[i] as f64 / 255.0)
            }
        })
        .collect();
    Ok(Image { width, height, data })
}

/// Per-pixel on/off mask for a projector image plane. `false` forces the
/// pixel's signal to zero; the black-level floor is unaffected.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub on: Vec<bool>,
}

impl PixelMask {
    pub fn all_on(width: u32, height: u32) -> Self {
        PixelMask {
            width,
            height,
            on: vec![true; width as usize * height as usize],
        }
    }

    pub fn off_count(&self) -> usize {
        self.on.iter().filter(|&&b| !b).count()
    }

    pub fn is_on(&self, pixel: usize) -> bool {
        self.on[pixel]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::filled(3, 2, Rgb::ZERO);
        img.set(0, 0, Rgb::new(1.0, 0.5, 0.25));
        img.set(2, 1, Rgb::new(0.0, 1.0, 0.0));
        let dir = std::env::temp_dir().join("relight_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        // 8-bit quantization
        assert!((back.get(0, 0)[1] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn same_image_writes_identical_bytes() {
        let img = Image::filled(4, 4, Rgb::splat(0.7));
        let dir = std::env::temp_dir().join("relight_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.ppm"), dir.join("b.ppm"));
        img.write_ppm(&p1).unwrap();
        img.write_ppm(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
