//! Float image containers and their on-disk formats.
//!
//! Linear intermediates are stored as PFM (portable float map, little-endian,
//! bottom-to-top rows). Display outputs are 8-bit PNG.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// H×W×3 float image, interleaved RGB, row-major from the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(CHANNELS) {
            px.copy_from_slice(&value);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                CHANNELS
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: [f64; 3]) {
        let i = self.index(x, y, 0);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn same_size(&self, other: &LinearImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixel-wise mean of equally sized images.
    pub fn average(images: &[LinearImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot average an empty image list"))?;
        let mut out = LinearImage::new(first.width, first.height);
        for img in images {
            if !img.same_size(first) {
                return Err(Error::invalid("images differ in size"));
            }
            for (o, v) in out.data.iter_mut().zip(&img.data) {
                *o += v;
            }
        }
        let n = images.len() as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(path.as_ref(), self.width, self.height, CHANNELS, &self.data)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (w, h, c, data) = read_pfm(path)?;
        if c != CHANNELS {
            return Err(Error::format(path, "expected a colour (PF) map"));
        }
        Self::from_vec(w, h, data)
    }

    /// Writes 8-bit PNG. Values are clamped to [0,1] and rounded; callers are
    /// expected to have delinearized first.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::from_vec(w as usize, h as usize, data)
    }
}

/// Single-channel float map, used for per-view depth. Zero marks "no surface".
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("depth buffer size mismatch"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// (min, max) over pixels with a surface hit, if any.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.data
            .iter()
            .filter(|&&d| d > 0.0)
            .fold(None, |acc, &d| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(path.as_ref(), self.width, self.height, 1, &self.data)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (w, h, c, data) = read_pfm(path)?;
        if c != 1 {
            return Err(Error::format(path, "expected a greyscale (Pf) map"));
        }
        Self::from_vec(w, h, data)
    }
}

fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    // Negative scale marks little-endian payload.
    write!(out, "{tag}\n{width} {height}\n-1.0\n").expect("write to Vec");
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header is three whitespace-separated lines: tag, dims, scale.
    let mut fields = Vec::with_capacity(4);
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
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte after the scale
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("unknown tag {other:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad dimension {s:?}")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| Error::format(path, "bad scale"))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = bytes
        .get(pos..pos + n * 4)
        .ok_or_else(|| Error::format(path, "truncated payload"))?;
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / row;
        let y = height - 1 - file_row;
        data[y * row + i % row] = v as f64;
    }
    Ok((width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_preserves_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = LinearImage::new(3, 2);
        img.set_pixel(0, 0, [0.25, 0.5, 0.75]);
        img.set_pixel(2, 1, [1.0, -0.5, 2.0]);
        let p = dir.path().join("a.pfm");
        img.write_pfm(&p).unwrap();
        let back = LinearImage::read_pfm(&p).unwrap();
        assert_eq!(back, img);

        let mut d = DepthMap::new(2, 2);
        d.set(1, 0, 3.5);
        let p = dir.path().join("d.pfm");
        d.write_pfm(&p).unwrap();
        assert_eq!(DepthMap::read_pfm(&p).unwrap(), d);
        assert!(LinearImage::read_pfm(&p).is_err());
    }

    #[test]
    fn png_is_eight_bit_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = LinearImage::new(2, 1);
        img.set_pixel(0, 0, [-1.0, 0.5, 2.0]);
        let p = dir.path().join("a.png");
        img.write_png(&p).unwrap();
        let back = LinearImage::read_png(&p).unwrap();
        assert_eq!(back.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn average_and_range() {
        let a = LinearImage::filled(2, 2, [0.0, 0.2, 0.4]);
        let b = LinearImage::filled(2, 2, [1.0, 0.4, 0.0]);
        let m = LinearImage::average(&[a, b]).unwrap();
        assert_eq!(m.pixel(1, 1), [0.5, 0.30000000000000004, 0.2]);
        let d = DepthMap::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(d.range(), Some((2.0, 2.0)));
        assert_eq!(DepthMap::new(1, 1).range(), None);
    }
}
