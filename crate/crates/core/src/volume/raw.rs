//! Header-less little-endian float32 payload with a `key = value` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Volume3D, VolumeKind};
use crate::error::{Error, Result};

/// Sidecar location for a raw payload: `<payload>.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_raw(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    let mut meta = String::new();
    let _ = writeln!(meta, "dims = {nx} {ny} {nz}");
    let _ = writeln!(meta, "spacing = {sx} {sy} {sz}");
    let _ = writeln!(meta, "kind = {}", v.kind().as_str());
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(&side, e))
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("sidecar `{key}` is not numeric: {value}")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::MalformedHeader(format!("sidecar `{key}` needs three values")))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let meta = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut dims = None;
    let mut spacing = [1.0f32; 3];
    let mut kind = VolumeKind::Intensity;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::MalformedHeader(format!("sidecar line without `=`: {line}")));
        };
        match key.trim() {
            "dims" => dims = Some(parse_triple::<usize>("dims", value)?),
            "spacing" => spacing = parse_triple::<f32>("spacing", value)?,
            "kind" => kind = VolumeKind::parse(value).ok_or_else(|| Error::MalformedHeader(format!("unknown kind `{}`", value.trim())))?,
            other => log::warn!("ignoring unknown sidecar key `{other}`"),
        }
    }
    let dims = dims.ok_or_else(|| Error::MalformedHeader("sidecar lacks `dims`".into()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = dims.iter().product::<usize>() * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    let data = bytes[..expected].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume3D::new(dims, spacing, data, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let v = Volume3D::from_fn([3, 2, 4], VolumeKind::Probability, |x, y, z| ((x + y + z) as f32 / 7.0).min(1.0))
            .unwrap()
            .with_spacing([0.3, 0.3, 0.6])
            .unwrap();
        write_raw(&v, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(read_raw(&path).unwrap(), v);
    }

    #[test]
    fn missing_dims_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        fs::write(&path, [0u8; 8]).unwrap();
        fs::write(sidecar_path(&path), "kind = intensity\n").unwrap();
        assert!(matches!(read_raw(&path), Err(Error::MalformedHeader(_))));
    }
}
