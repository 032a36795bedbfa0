//! On-disk formats: tensor checkpoints, PFM float maps and 8-bit PNGs.
//!
//! Checkpoint layout: `b"JINV"`, a little-endian `u32` version, then records
//! until end of file. Each record is a `u32` name length, the UTF-8 name, a
//! `u32` rank, `rank` little-endian `u64` dims and the values as
//! little-endian `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JINV";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Invariant(format!("checkpoint has no tensor '{name}'")))
    }

    /// Stores a JSON document as a byte tensor.
    pub fn push_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        let data = bytes.into_iter().map(f64::from).collect::<Vec<_>>();
        self.push(name, Tensor::new(vec![data.len()], data)?);
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let t = self.require(name)?;
        let bytes = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Invariant(format!("tensor '{name}' is not a byte string")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        while r.pos < bytes.len() {
            let len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let name = r.take(len).ok_or_else(|| bad("truncated name"))?;
            let name = std::str::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64().ok_or_else(|| bad("truncated dims"))?;
                shape.push(usize::try_from(d).map_err(|_| bad("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("dimension overflow"))?;
            let raw = r
                .take(n.checked_mul(8).ok_or_else(|| bad("dimension overflow"))?)
                .ok_or_else(|| bad("truncated values"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&format!("tensor '{name}': {e}")))?;
            ck.push(name, t);
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Rounds every sample to the nearest `f32`, the precision PFM stores.
pub fn to_f32_precision(img: &Image) -> Image {
    img.map(|v| v as f32 as f64)
}

pub fn pfm_bytes(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for &v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pfm_bytes(img)?).map_err(|e| Error::io(path, e))
}

pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // Four whitespace-separated header tokens, then one whitespace byte
    // before the raster.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("bad magic")),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("only little-endian (negative scale) PFM is supported"));
    }
    let n = width * height * channels;
    let raster = bytes.get(pos..).filter(|r| r.len() == n * 4).ok_or_else(|| bad("raster size mismatch"))?;
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (i, c) in raster.chunks_exact(4).enumerate() {
        let (file_row, col) = (i / row, i % row);
        let y = height - 1 - file_row;
        let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(bad("non-finite sample"));
        }
        data[y * row + col] = v;
    }
    Image::new(height, width, channels, data)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes, path)
}

/// 8-bit quantization: `round(255 * clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Shape(format!("PNG export takes 1 or 3 channels, not {c}"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        let mut w = enc.write_header().map_err(png_err)?;
        let raster: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
        w.write_image_data(&raster).map_err(png_err)?;
    }
    Ok(out)
}

fn png_err(e: png::EncodingError) -> Error {
    Error::Invariant(format!("png encoding failed: {e}"))
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = png_bytes(img)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(info.height as usize, info.width as usize, channels, data)
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
