//! Single-file NIfTI-1 (`n+1`) reader and writer, spacing-only geometry.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use log::warn;

use super::{Volume3D, VolumeKind};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const KIND_TAG: &str = "vseg:";

/// Payload datatypes this reader and writer support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }

    /// Natural storage type for a volume kind.
    pub fn for_kind(kind: VolumeKind) -> Self {
        match kind {
            VolumeKind::BinaryMask => NiftiDatatype::Uint8,
            _ => NiftiDatatype::Float32,
        }
    }
}

/// Header fields chosen by the writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeHeaderInfo {
    pub datatype: NiftiDatatype,
    pub description: String,
}

impl VolumeHeaderInfo {
    pub fn new(datatype: NiftiDatatype, description: impl Into<String>) -> Self {
        VolumeHeaderInfo { datatype, description: description.into() }
    }

    pub fn for_volume(v: &Volume3D) -> Self {
        Self::new(NiftiDatatype::for_kind(v.kind()), "")
    }
}

/// What the reader found besides the voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiInfo {
    pub datatype: NiftiDatatype,
    pub description: String,
    pub big_endian: bool,
    pub warnings: Vec<String>,
}

struct Fields<'a> {
    buf: &'a [u8],
    be: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.be {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b = self.buf[off..off + 4].try_into().unwrap();
        if self.be {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }

    fn text(&self, off: usize, len: usize) -> String {
        let raw = &self.buf[off..off + len];
        let end = raw.iter().position(|&b| b == 0).unwrap_or(len);
        String::from_utf8_lossy(&raw[..end]).into_owned()
    }
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_nifti_with_info(path).map(|(v, _)| v)
}

/// Reads a single-file NIfTI-1 volume, gzipped or not.
pub fn read_nifti_with_info(path: impl AsRef<Path>) -> Result<(Volume3D, NiftiInfo)> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    parse(&bytes)
}

pub(crate) fn parse(bytes: &[u8]) -> Result<(Volume3D, NiftiInfo)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!("file holds {} bytes, a NIfTI-1 header needs {HEADER_SIZE}", bytes.len())));
    }
    let le = Fields { buf: bytes, be: false };
    let be = if le.i32(0) == HEADER_SIZE as i32 {
        false
    } else if (Fields { buf: bytes, be: true }).i32(0) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::MalformedHeader(format!("sizeof_hdr is {}, expected 348", le.i32(0))));
    };
    let h = Fields { buf: bytes, be };
    if &bytes[344..348] != MAGIC {
        return Err(Error::MalformedHeader(format!("magic {:?} is not single-file NIfTI-1", String::from_utf8_lossy(&bytes[344..348]))));
    }

    let dim: Vec<i16> = (0..8).map(|i| h.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(ndim == 3 || (ndim == 4 && dim[4] == 1)) {
        return Err(Error::MalformedHeader(format!("only 3D volumes are supported, dim = {dim:?}")));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(Error::MalformedHeader(format!("non-positive extent in dim = {dim:?}")));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let datatype = NiftiDatatype::from_code(h.i16(70))?;

    let mut warnings = Vec::new();
    let mut spacing = [h.f32(80), h.f32(84), h.f32(88)];
    for s in &mut spacing {
        if !(*s > 0.0) || !s.is_finite() {
            warnings.push(format!("pixdim {s} replaced by 1.0"));
            *s = 1.0;
        } else {
            *s = s.abs();
        }
    }
    let qform = h.i16(252);
    let sform = h.i16(254);
    if qform > 0 || sform > 0 {
        warnings.push(format!("orientation (qform_code {qform}, sform_code {sform}) ignored; spacing-only geometry"));
    }
    if bytes.len() > HEADER_SIZE + 3 && bytes[HEADER_SIZE] != 0 {
        warnings.push("header extensions present and ignored".to_string());
    }

    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset} is below 348")));
    }
    let vox_offset = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let expected = n * datatype.bytes();
    let available = bytes.len().saturating_sub(vox_offset);
    if available < expected {
        return Err(Error::TruncatedPayload { expected, found: available });
    }
    let payload = &bytes[vox_offset..vox_offset + expected];
    let p = Fields { buf: payload, be };
    let mut data: Vec<f32> = match datatype {
        NiftiDatatype::Uint8 => payload.iter().map(|&b| f32::from(b)).collect(),
        NiftiDatatype::Int16 => (0..n).map(|i| f32::from(p.i16(2 * i))).collect(),
        NiftiDatatype::Float32 => (0..n).map(|i| p.f32(4 * i)).collect(),
    };

    let slope = h.f32(112);
    let inter = h.f32(116);
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }

    let intent = h.text(328, 16);
    let kind = intent.strip_prefix(KIND_TAG).and_then(VolumeKind::parse).unwrap_or(VolumeKind::Intensity);
    for w in &warnings {
        warn!("{w}");
    }
    let vol = Volume3D::new(dims, spacing, data, kind)?;
    Ok((vol, NiftiInfo { datatype, description: h.text(148, 80), big_endian: be, warnings }))
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn encode(v: &Volume3D, info: &VolumeHeaderInfo) -> Result<Vec<u8>> {
    if info.description.len() > 80 {
        return Err(Error::InvalidParams(format!("description is {} bytes, at most 80 fit in the header", info.description.len())));
    }
    let dims = v.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidVolume(format!("dims {dims:?} exceed the NIfTI-1 range")));
    }
    let dt = info.datatype;
    let mut out = vec![0u8; VOX_OFFSET + v.len() * dt.bytes()];
    {
        let h = &mut out[..VOX_OFFSET];
        put_i32(h, 0, HEADER_SIZE as i32);
        h[38] = b'r';
        let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            put_i16(h, 40 + 2 * i, *d);
        }
        put_i16(h, 70, dt.code());
        put_i16(h, 72, (dt.bytes() * 8) as i16);
        let sp = v.spacing();
        let pixdim = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
        for (i, p) in pixdim.iter().enumerate() {
            put_f32(h, 76 + 4 * i, *p);
        }
        put_f32(h, 108, VOX_OFFSET as f32);
        put_f32(h, 112, 1.0);
        put_f32(h, 116, 0.0);
        // millimetres
        h[123] = 2;
        h[148..148 + info.description.len()].copy_from_slice(info.description.as_bytes());
        let tag = format!("{KIND_TAG}{}", v.kind().as_str());
        let tag = &tag.as_bytes()[..tag.len().min(16)];
        h[328..328 + tag.len()].copy_from_slice(tag);
        h[344..348].copy_from_slice(MAGIC);
    }
    let payload = &mut out[VOX_OFFSET..];
    match dt {
        NiftiDatatype::Float32 => {
            for (chunk, &x) in payload.chunks_exact_mut(4).zip(v.data()) {
                chunk.copy_from_slice(&x.to_le_bytes());
            }
        }
        NiftiDatatype::Uint8 => {
            for (b, &x) in payload.iter_mut().zip(v.data()) {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(Error::InvalidVolume(format!("value {x} does not fit uint8")));
                }
                *b = x as u8;
            }
        }
        NiftiDatatype::Int16 => {
            for (chunk, &x) in payload.chunks_exact_mut(2).zip(v.data()) {
                if x.fract() != 0.0 || !(-32768.0..=32767.0).contains(&x) {
                    return Err(Error::InvalidVolume(format!("value {x} does not fit int16")));
                }
                chunk.copy_from_slice(&(x as i16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes a little-endian single-file NIfTI-1 volume without scaling
/// (`scl_slope = 1`, `scl_inter = 0`). Gzip output is never produced.
pub fn write_nifti(v: &Volume3D, path: impl AsRef<Path>, info: &VolumeHeaderInfo) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v, info)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
