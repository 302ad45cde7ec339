//! In-memory images and label grids, and their on-disk formats.
//!
//! Images are written as binary PPM (`P6`, 8-bit RGB). Masks and flows use a
//! small self-describing grid format, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `CFGR`                           |
//! | 4      | 1    | format version (1)                     |
//! | 5      | 1    | dtype: 1 = u8, 2 = f32, 3 = f64        |
//! | 6      | 2    | channels                               |
//! | 8      | 4    | width                                  |
//! | 12     | 4    | height                                 |
//! | 16     | ...  | row-major, channel-interleaved samples |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in [0, 1].
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    pub fn is_black(&self) -> bool {
        self.data.iter().all(|p| *p == [0.0; 3])
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() * 3 + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height).expect("vec write");
        for px in &self.data {
            for c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::corrupt(path, why.to_string());
        // Header: magic, width, height, maxval separated by whitespace.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only 8-bit binary PPM is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() != width * height * 3 {
            return Err(bad("pixel data length does not match header"));
        }
        let data = body.chunks_exact(3).map(|p| [p[0], p[1], p[2]].map(|v| v as f64 / 255.0)).collect();
        Ok(Self { width, height, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }
}

const GRID_MAGIC: &[u8; 4] = b"CFGR";
const GRID_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum GridDtype {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl GridDtype {
    fn size(self) -> usize {
        match self {
            GridDtype::U8 => 1,
            GridDtype::F32 => 4,
            GridDtype::F64 => 8,
        }
    }
}

/// A decoded grid file; samples are widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub dtype: GridDtype,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub fn write_grid(path: &Path, dtype: GridDtype, channels: usize, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != channels * width * height {
        return Err(Error::shape(format!(
            "grid has {} values for {channels}x{width}x{height}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + values.len() * dtype.size());
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in values {
        match dtype {
            GridDtype::U8 => out.push(v as u8),
            GridDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            GridDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<RawGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != GRID_MAGIC {
        return Err(Error::corrupt(path, "not a grid file"));
    }
    if bytes[4] != GRID_VERSION {
        return Err(Error::Version {
            found: bytes[4] as u32,
            expected: GRID_VERSION as u32,
        });
    }
    let dtype = match bytes[5] {
        1 => GridDtype::U8,
        2 => GridDtype::F32,
        3 => GridDtype::F64,
        d => return Err(Error::corrupt(path, format!("unknown dtype {d}"))),
    };
    let channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = channels * width * height;
    let body = &bytes[16..];
    if body.len() != n * dtype.size() {
        return Err(Error::corrupt(path, "payload length does not match header"));
    }
    let values = match dtype {
        GridDtype::U8 => body.iter().map(|&b| b as f64).collect(),
        GridDtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        GridDtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(RawGrid {
        dtype,
        channels,
        width,
        height,
        values,
    })
}

impl MaskGrid {
    pub fn save(&self, path: &Path) -> Result<()> {
        let v: Vec<f64> = self.data.iter().map(|&m| m as f64).collect();
        write_grid(path, GridDtype::U8, 1, self.width, self.height, &v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g = read_grid(path)?;
        if g.channels != 1 {
            return Err(Error::corrupt(path, "mask grids have one channel"));
        }
        Ok(Self {
            width: g.width,
            height: g.height,
            data: g.values.iter().map(|&v| v as u8).collect(),
        })
    }
}

impl FlowGrid {
    pub fn save(&self, path: &Path) -> Result<()> {
        let v: Vec<f64> = self.data.iter().flat_map(|f| f.iter().copied()).collect();
        write_grid(path, GridDtype::F32, 2, self.width, self.height, &v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g = read_grid(path)?;
        if g.channels != 2 {
            return Err(Error::corrupt(path, "flow grids have two channels"));
        }
        Ok(Self {
            width: g.width,
            height: g.height,
            data: g.values.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }
}
