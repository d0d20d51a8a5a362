//! `MNAV1` volume files: magic, three u32 LE extents (x, y, z), then f32 LE voxels, x fastest.

use std::fs;
use std::path::Path;

use super::{Modality, Volume};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MNAV1";

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + 4 * v.voxels().len());
    out.extend_from_slice(MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path, modality: Modality, subject_id: &str) -> Result<Volume> {
    let header = MAGIC.len() + 12;
    if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not an MNAV1 volume"));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let at = MAGIC.len() + 4 * a;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() - header != 4 * n {
        return Err(Error::format(
            path,
            format!("extents {dims:?} need {} voxel bytes, found {}", 4 * n, bytes.len() - header),
        ));
    }
    let voxels = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, voxels, modality, subject_id).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path, modality: Modality, subject_id: &str) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path, modality, subject_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let v = Volume::new([2, 1, 1], vec![1.0, -2.5], Modality::Pet, "a").unwrap();
        let bytes = encode_volume(&v);
        let mut expected = b"MNAV1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = decode_volume(&bytes, Path::new("x"), Modality::Pet, "a").unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let v = Volume::filled([2, 2, 2], 1.0, Modality::Mri, "a");
        let bytes = encode_volume(&v);
        let p = Path::new("x");
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 1], p, Modality::Mri, "a"),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_volume(&bad, p, Modality::Mri, "a").is_err());
        let mut nan = bytes;
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_volume(&nan, p, Modality::Mri, "a").is_err());
    }
}
