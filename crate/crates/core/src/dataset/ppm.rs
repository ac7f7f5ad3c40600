//! Binary portable pixmap I/O (P6 color, P5 grayscale).

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use std::io::Read;
use std::path::Path;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(w: usize, h: usize) -> Self {
        Raster {
            w,
            h,
            data: vec![0; w * h * 3],
        }
    }

    pub fn from_data(w: usize, h: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != w * h * 3 {
            return Err(Error::Dataset(format!(
                "raster {w}x{h} expects {} bytes, got {}",
                w * h * 3,
                data.len()
            )));
        }
        Ok(Raster { w, h, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.w + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: (u8, u8, u8)) {
        let i = (y * self.w + x) * 3;
        self.data[i] = rgb.0;
        self.data[i + 1] = rgb.1;
        self.data[i + 2] = rgb.2;
    }

    /// As a `1 x 3 x h x w` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor4 {
        let shape = Shape4::new(1, 3, self.h, self.w);
        let mut data = vec![0.0; shape.numel()];
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    data[(c * self.h + y) * self.w + x] = self.data[(y * self.w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Tensor4::new(shape, data).expect("byte raster converts to finite values")
    }
}

/// Stack rasters of one size into an `n x 3 x h x w` batch tensor.
pub fn rasters_to_tensor(rasters: &[&Raster]) -> Result<Tensor4> {
    let first = rasters.first().ok_or_else(|| Error::Dataset("empty raster batch".into()))?;
    let (h, w) = (first.h, first.w);
    let shape = Shape4::new(rasters.len(), 3, h, w);
    let mut data = vec![0.0; shape.numel()];
    for (n, r) in rasters.iter().enumerate() {
        if r.h != h || r.w != w {
            return Err(Error::Dataset(format!(
                "raster batch mixes sizes {w}x{h} and {}x{}",
                r.w, r.h
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[shape.idx(n, c, y, x)] = r.data[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
    }
    Tensor4::new(shape, data)
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    // header tokens separated by whitespace; `#` starts a comment to end of line
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 && pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
                    Error::Dataset("pixmap header is not ASCII".into())
                })?);
            }
        }
    }
    if tokens.len() < 4 || tokens[0] != magic {
        return Err(Error::Dataset(format!("not a {magic} pixmap")));
    }
    let w: usize = tokens[1].parse().map_err(|_| Error::Dataset("bad pixmap width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Dataset("bad pixmap height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| Error::Dataset("bad pixmap maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Dataset(format!("only maxval 255 supported, got {maxval}")));
    }
    // pos sits on the single whitespace byte after maxval
    Ok((w, h, pos + 1))
}

pub fn read_ppm<P: AsRef<Path>>(path: P) -> Result<Raster> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let (w, h, offset) = parse_header(&bytes, "P6")?;
    let need = w * h * 3;
    if bytes.len() < offset + need {
        return Err(Error::Dataset(format!(
            "P6 payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(offset)
        )));
    }
    Raster::from_data(w, h, bytes[offset..offset + need].to_vec())
}

pub fn write_ppm<P: AsRef<Path>>(path: P, raster: &Raster) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", raster.w, raster.h).into_bytes();
    out.extend_from_slice(&raster.data);
    super::write_atomic(path.as_ref(), &out)
}

pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let (w, h, offset) = parse_header(&bytes, "P5")?;
    if bytes.len() < offset + w * h {
        return Err(Error::Dataset("P5 payload truncated".into()));
    }
    Ok((w, h, bytes[offset..offset + w * h].to_vec()))
}

pub fn write_pgm<P: AsRef<Path>>(path: P, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Dataset(format!(
            "P5 {w}x{h} expects {} bytes, got {}",
            w * h,
            gray.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    super::write_atomic(path.as_ref(), &out)
}
