//! Reader for the MNIST IDX file layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what.display().to_string(), "truncated header"))
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "payload has {} bytes, header implies {}",
                body.len(),
                count * rows * cols
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} labels present, header says {count}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Writes an IDX image file; used to build fixtures.
pub fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let pixels: Vec<u8> = (0..2 * 4 * 3).map(|v| v as u8).collect();
        write_images(&img, 4, 3, &pixels).unwrap();
        write_labels(&lab, &[3, 9]).unwrap();
        let parsed = read_images(&img).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 4, 3));
        assert_eq!(parsed.pixels, pixels);
        assert_eq!(read_labels(&lab).unwrap(), vec![3, 9]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let lab = dir.path().join("lab");
        write_labels(&lab, &[1, 2, 3]).unwrap();
        assert!(matches!(read_images(&lab), Err(Error::Format { .. })));

        let img = dir.path().join("img");
        write_images(&img, 2, 2, &[0; 8]).unwrap();
        let mut bytes = fs::read(&img).unwrap();
        bytes.pop();
        fs::write(&img, bytes).unwrap();
        assert!(matches!(read_images(&img), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_a_load_error() {
        let err = read_labels(Path::new("/nonexistent/labels")).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
    }
}
