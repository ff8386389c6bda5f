use std::path::Path;

use super::EncodeError;
use crate::io::write_atomic;

/// An `height × width × 3` byte image, row-major with interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut c = Self::new(height, width);
        for px in c.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        c
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, EncodeError> {
        if pixels.len() != height * width * 3 {
            return Err(EncodeError::Size(format!(
                "{} bytes do not form a {height}x{width} RGB canvas",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, EncodeError> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos).ok_or_else(|| ppm_err("missing magic"))?;
        if magic != b"P6" {
            return Err(ppm_err("not a binary PPM (P6)"));
        }
        for f in fields.iter_mut() {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| ppm_err("truncated header"))?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ppm_err("bad header number"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(ppm_err("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let len = width * height * 3;
        if bytes.len() < pos + len {
            return Err(ppm_err("truncated raster"));
        }
        Self::from_pixels(height, width, bytes[pos..pos + len].to_vec())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), EncodeError> {
        write_atomic(path, &self.to_ppm())
            .map_err(|e| EncodeError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load_ppm(path: &Path) -> Result<Self, EncodeError> {
        let bytes =
            std::fs::read(path).map_err(|e| EncodeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_ppm(&bytes)
    }
}

fn ppm_err(msg: &str) -> EncodeError {
    EncodeError::Format(format!("PPM: {msg}"))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    (start < *pos).then(|| &bytes[start..*pos])
}
