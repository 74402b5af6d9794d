//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer for
//! scalar 3D volumes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

/// A scalar volume with x varying fastest, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Extents `[x, y, z]`.
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

/// On-disk element type used by [`write_volume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreAs {
    U8,
    F32,
}

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {msg}", path.display()))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a: [u8; N] = self.b[at..at + N].try_into().expect("in bounds");
        if !self.little {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(parse_err(path, "file shorter than a NIfTI-1 header"));
    }
    let little = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(parse_err(path, "not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(parse_err(path, "only single-file NIfTI-1 ('n+1') is supported"));
    }
    let r = Reader { b: &bytes, little };
    let ndim = r.i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(parse_err(path, format!("expected a 3D volume, header declares {ndim} dimensions")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = r.i16(42 + 2 * i);
        if v <= 0 {
            return Err(parse_err(path, format!("non-positive extent {v} on axis {i}")));
        }
        *d = v as usize;
    }
    if ndim == 4 && r.i16(48) > 1 {
        return Err(parse_err(path, "4D volumes with more than one frame are not supported"));
    }
    let datatype = r.i16(70);
    let spacing = [r.f32(80), r.f32(84), r.f32(88)];
    let offset = r.f32(108).max(DATA_OFFSET as f32) as usize;
    let mut slope = r.f32(112);
    let inter = r.f32(116);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let n = dims.iter().product::<usize>();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(parse_err(path, format!("unsupported datatype code {other}"))),
    };
    let payload = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| parse_err(path, "voxel data truncated"))?;
    let pr = Reader { b: payload, little };
    let data = (0..n)
        .map(|i| {
            let at = i * width;
            let raw = match datatype {
                2 => payload[at] as f64,
                256 => payload[at] as i8 as f64,
                4 => pr.i16(at) as f64,
                512 => u16::from_le_bytes(pr.bytes(at)) as f64,
                8 => pr.i32(at) as f64,
                768 => u32::from_le_bytes(pr.bytes(at)) as f64,
                16 => pr.f32(at) as f64,
                64 => f64::from_le_bytes(pr.bytes(at)),
                _ => unreachable!(),
            };
            (raw * slope as f64 + inter as f64) as f32
        })
        .collect();
    Ok(Volume { dims, spacing, data })
}

pub fn write_volume(path: &Path, vol: &Volume, store: StoreAs) -> Result<()> {
    let n: usize = vol.dims.iter().product();
    if vol.data.len() != n {
        return Err(Error::Shape(format!("volume {:?} needs {n} voxels, got {}", vol.dims, vol.data.len())));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (i, &d) in vol.dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Shape(format!("extent {d} too large for NIfTI-1")))?;
        put_i16(&mut h, 42 + 2 * i, d);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    let (code, bitpix) = match store {
        StoreAs::U8 => (2i16, 8i16),
        StoreAs::F32 => (16, 32),
    };
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for i in 0..3 {
        put_f32(&mut h, 80 + 4 * i, vol.spacing[i]);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    h[344..348].copy_from_slice(b"n+1\0");
    let mut body = h;
    match store {
        StoreAs::U8 => {
            for &v in &vol.data {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Data(format!("value {v} not representable as u8")));
                }
                body.push(v as u8);
            }
        }
        StoreAs::F32 => {
            for &v in &vol.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        body
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
