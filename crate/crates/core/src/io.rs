//! Binary file formats.
//!
//! `.f32r` raster: `b"F32R"`, u32 width, u32 height, then `width * height`
//! f32 values row-major. All integers and floats are little-endian.
//!
//! Checkpoint: `b"AHPC"`, u32 version (1), u32 tensor count, then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, `rank` u32 dimensions and
//! the f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

const RASTER_MAGIC: &[u8; 4] = b"F32R";
const CHECKPOINT_MAGIC: &[u8; 4] = b"AHPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A raster as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.cols as u32,
            height: img.rows as u32,
            data: img.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            rows: self.height as usize,
            cols: self.width as usize,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let expected = r.width as usize * r.height as usize;
    if r.data.len() != expected {
        return Err(Error::Format(format!(
            "raster declares {}x{} but holds {} values",
            r.width,
            r.height,
            r.data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * expected);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&r.width.to_le_bytes());
    out.extend_from_slice(&r.height.to_le_bytes());
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != RASTER_MAGIC {
        return Err(Error::Format("missing F32R magic".into()));
    }
    let width = cur.u32()?;
    let height = cur.u32()?;
    let n = width as usize * height as usize;
    let data = cur.f32s(n)?;
    if !cur.is_done() {
        return Err(Error::Format("trailing bytes after raster payload".into()));
    }
    Ok(Raster { width, height, data })
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    let bytes = encode_raster(r)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_raster(&bytes)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_raster(path, &Raster::from_image(img))
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(read_raster(path)?.to_image())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("rank too large for {}", t.name)))?;
        if t.numel() != t.data.len() {
            return Err(Error::Format(format!(
                "tensor {} declares {} values but holds {}",
                t.name,
                t.numel(),
                t.data.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing AHPC magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()?);
        }
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let data = cur.f32s(n)?;
        tensors.push(NamedTensor { name, dims, data });
    }
    if !cur.is_done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(tensors)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    // write then rename so an interrupted run never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(&bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
