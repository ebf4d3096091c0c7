//! IDX container parsing (the classic MNIST file layout): big-endian magic,
//! big-endian 32-bit extents, then raw bytes.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image stack: `data` holds `count` images of rows×cols bytes,
/// untransformed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses an IDX image payload from any reader; `path` is used only in
/// error messages.
pub fn read_idx_images(mut r: impl Read, path: impl Into<PathBuf>) -> Result<IdxImages> {
    let path = path.into();
    let magic = read_u32_be(&mut r, &path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            &path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&mut r, &path, "image count")? as usize;
    let rows = read_u32_be(&mut r, &path, "row count")? as usize;
    let cols = read_u32_be(&mut r, &path, "column count")? as usize;
    let expected = count * rows * cols;
    let mut data = Vec::with_capacity(expected);
    let actual = r
        .take(expected as u64 + 1)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(&path, e))?;
    if actual != expected {
        return Err(Error::format(
            &path,
            format!("payload holds {actual} bytes, expected {expected}"),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        data,
    })
}

/// Parses an IDX label payload from any reader.
pub fn read_idx_labels(mut r: impl Read, path: impl Into<PathBuf>) -> Result<Vec<u8>> {
    let path = path.into();
    let magic = read_u32_be(&mut r, &path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            &path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&mut r, &path, "label count")? as usize;
    let mut data = Vec::with_capacity(count);
    let actual = r
        .take(count as u64 + 1)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(&path, e))?;
    if actual != count {
        return Err(Error::format(
            &path,
            format!("payload holds {actual} labels, expected {count}"),
        ));
    }
    Ok(data)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_idx_images(BufReader::new(file), path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_idx_labels(BufReader::new(file), path)
}

/// Serializes images back into IDX bytes (fixture construction, tests, and
/// the bundled-corpus tooling).
pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.data.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.data);
    out
}

/// Serializes labels into IDX bytes.
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_round_trips_exact_bytes() {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            data: vec![0, 63, 127, 255, 1, 2, 3, 4],
        };
        let bytes = write_idx_images(&images);
        let parsed = read_idx_images(&bytes[..], "fixture").unwrap();
        assert_eq!(parsed, images);
        assert_eq!(parsed.image(1), &[1, 2, 3, 4]);
    }

    #[test]
    fn wrong_magic_is_a_structured_error() {
        let mut bytes = write_idx_images(&IdxImages {
            count: 1,
            rows: 1,
            cols: 1,
            data: vec![7],
        });
        bytes[3] = 0x99;
        let err = read_idx_images(&bytes[..], "fixture").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload_reports_expected_and_actual() {
        let bytes = write_idx_images(&IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            data: vec![9; 8],
        });
        let err = read_idx_images(&bytes[..bytes.len() - 3], "fixture").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5 bytes") && msg.contains("expected 8"), "{msg}");
    }

    #[test]
    fn labels_round_trip_and_validate() {
        let bytes = write_idx_labels(&[3, 1, 4, 1, 5]);
        assert_eq!(read_idx_labels(&bytes[..], "labels").unwrap(), vec![3, 1, 4, 1, 5]);
        let err = read_idx_labels(&bytes[..6], "labels").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
