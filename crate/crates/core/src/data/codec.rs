//! `VOL1` volume files: magic, version, four u32 extents, then f32 payload, all little-endian.

use std::fs;
use std::path::Path;

use super::volume::VolumeGrid;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4;

pub fn encode_volume(volume: &VolumeGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.voxels().len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(volume.channels() as u32).to_le_bytes());
    for v in volume.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VolumeGrid> {
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "VOL1".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
            supported: VOLUME_VERSION,
        });
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let channels = u32_at(20) as usize;
    let count = dims
        .iter()
        .chain(std::iter::once(&channels))
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let (count, payload) = count.ok_or_else(|| Error::DimOverflow {
        path: path.into(),
        detail: format!("{dims:?}x{channels} does not fit in memory"),
    })?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("payload needs {payload} bytes for {dims:?}x{channels}, found {available}"),
        });
    }
    let voxels = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    debug_assert_eq!(voxels.len(), count);
    VolumeGrid::new(dims, channels, voxels)
}

pub fn write_volume(volume: &VolumeGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

/// Reads a volume. Values outside `[0, 1]` are accepted with a warning on stderr.
pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let v = decode_volume(&bytes, path)?;
    if !v.in_unit_range() {
        eprintln!("warning: {} has voxels outside [0, 1]", path.display());
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let n = 20 * 20 * 20;
        let v = VolumeGrid::new([20, 20, 20], 1, (0..n).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(
            back.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.dims(), [20, 20, 20]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_volume(&VolumeGrid::zeros([2, 2, 2], 1).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_volume(&VolumeGrid::zeros([50, 50, 50], 1).unwrap());
        let half = &bytes[..HEADER_LEN + (bytes.len() - HEADER_LEN) / 2];
        assert!(matches!(decode_volume(half, Path::new("x")), Err(Error::Truncated { .. })));
        assert!(matches!(decode_volume(&bytes[..10], Path::new("x")), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dim_overflow() {
        let mut bytes = encode_volume(&VolumeGrid::zeros([1, 1, 1], 1).unwrap());
        for o in [8, 12, 16, 20] {
            bytes[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_volume(&bytes, Path::new("x")), Err(Error::DimOverflow { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_volume(&VolumeGrid::zeros([1, 1, 1], 1).unwrap());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_volume(&bytes, Path::new("x")), Err(Error::UnsupportedVersion { .. })));
    }
}
