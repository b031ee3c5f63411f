//! RGB rasters and binary PPM (P6) encoding.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image stored row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    /// A raster filled with a single color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "raster must be nonempty");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn from_rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Ppm("raster must be nonempty".into()));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Ppm(format!(
                "expected {} bytes for {width}x{height}, got {}",
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_rgb(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbor upscale by an integer factor.
    pub fn upscale(&self, factor: u32) -> Raster {
        assert!(factor >= 1);
        let mut out = Raster::filled(self.width * factor, self.height * factor, [0, 0, 0]);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set_pixel(x, y, self.pixel(x / factor, y / factor));
            }
        }
        out
    }

    /// RGBA bytes, convenient for canvas `ImageData`.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parse a binary PPM. Header comments are accepted; only maxval 255 is supported.
    pub fn read_ppm<R: Read>(r: R) -> Result<Raster> {
        let mut r = BufReader::new(r);
        let magic = next_token(&mut r)?;
        if magic != "P6" {
            return Err(Error::Ppm(format!("unsupported magic `{magic}`")));
        }
        let width = parse_dim(&next_token(&mut r)?, "width")?;
        let height = parse_dim(&next_token(&mut r)?, "height")?;
        let maxval = parse_dim(&next_token(&mut r)?, "maxval")?;
        if maxval != 255 {
            return Err(Error::Ppm(format!("unsupported maxval {maxval}")));
        }
        let mut data = vec![0u8; width as usize * height as usize * 3];
        r.read_exact(&mut data)
            .map_err(|e| Error::Ppm(format!("truncated pixel data: {e}")))?;
        Raster::from_rgb(width, height, data)
    }

    pub fn load(path: &Path) -> Result<Raster> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Raster::read_ppm(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_ppm_bytes())
    }
}

fn parse_dim(tok: &str, what: &str) -> Result<u32> {
    match tok.parse::<u32>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Ppm(format!("bad {what} `{tok}`"))),
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// Consumes exactly one whitespace byte after the token.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r
            .read(&mut byte)
            .map_err(|e| Error::Ppm(format!("header: {e}")))?
            == 0
        {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)
                .map_err(|e| Error::Ppm(format!("header: {e}")))?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
        if tok.len() > 32 {
            return Err(Error::Ppm("header token too long".into()));
        }
    }
    if tok.is_empty() {
        return Err(Error::Ppm("unexpected end of header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Ppm("non-ASCII header".into()))
}
