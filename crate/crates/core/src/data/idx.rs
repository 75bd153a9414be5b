//! Big-endian IDX files as distributed with MNIST, optionally gzipped.

use super::Split;
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// A pool of grayscale digits with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Digits {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl Digits {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixels cannot hold {} digits of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Digits {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Loads `train-*` or `t10k-*` IDX files from `dir`, gzipped or not.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self> {
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        let find = |stem: String| -> PathBuf {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        load_idx(
            &find(format!("{prefix}-images-idx3-ubyte")),
            &find(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated while reading {what}: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn parse_header(c: &mut Cursor<'_>, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let got = c.u32("magic number")?;
    if got != magic {
        return Err(c.fail(0, format!("magic number {got}, expected {magic}")));
    }
    (0..ndims).map(|i| c.u32(&format!("dimension {i}")).map(|d| d as usize)).collect()
}

/// Parses an image file (magic 2051, dims count×rows×cols) and a label file
/// (magic 2049, dim count). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Digits> {
    let img_bytes = read_all(images_path)?;
    let lbl_bytes = read_all(labels_path)?;
    parse_idx(images_path, &img_bytes, labels_path, &lbl_bytes)
}

/// [`load_idx`] on in-memory (uncompressed) file contents.
pub fn parse_idx(images_path: &Path, images: &[u8], labels_path: &Path, labels: &[u8]) -> Result<Digits> {
    let mut ci = Cursor {
        path: images_path,
        bytes: images,
        pos: 0,
    };
    let dims = parse_header(&mut ci, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let payload = ci.take(count * rows * cols, "pixel data")?;
    if ci.pos != images.len() {
        return Err(ci.fail(ci.pos, "trailing bytes after pixel data"));
    }

    let mut cl = Cursor {
        path: labels_path,
        bytes: labels,
        pos: 0,
    };
    let n_labels = parse_header(&mut cl, LABEL_MAGIC, 1)?[0];
    if n_labels != count {
        return Err(cl.fail(4, format!("{n_labels} labels for {count} images")));
    }
    let lbl = cl.take(n_labels, "labels")?.to_vec();
    if cl.pos != labels.len() {
        return Err(cl.fail(cl.pos, "trailing bytes after labels"));
    }
    if let Some(pos) = lbl.iter().position(|&l| l > 9) {
        return Err(cl.fail(8 + pos, format!("label {} is not a digit", lbl[pos])));
    }
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Digits::new(rows, cols, pixels, lbl)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(&28u32.to_be_bytes());
        v.extend_from_slice(&28u32.to_be_bytes());
        v.extend(std::iter::repeat_n(fill, count as usize * 784));
        v
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn p(s: &str) -> PathBuf {
        PathBuf::from(s)
    }

    #[test]
    fn blank_digit_parses() {
        let d = parse_idx(&p("i"), &idx_images(1, 0), &p("l"), &idx_labels(&[7])).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.label(0), 7);
        assert!(d.image(0).iter().all(|&v| v == 0.0));
        let d = parse_idx(&p("i"), &idx_images(1, 255), &p("l"), &idx_labels(&[7])).unwrap();
        assert!(d.image(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut img = idx_images(2, 3);
        img.truncate(16 + 784 + 10);
        let err = parse_idx(&p("imgs"), &img, &p("l"), &idx_labels(&[1, 2])).unwrap_err();
        match err {
            Error::Parse { offset, message, .. } => {
                assert_eq!(offset, 810);
                assert!(message.contains("truncated"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_magic_and_count_mismatch() {
        let lbl = idx_labels(&[1]);
        assert!(parse_idx(&p("i"), &lbl, &p("l"), &lbl).is_err());
        let err = parse_idx(&p("i"), &idx_images(2, 0), &p("l"), &idx_labels(&[1])).unwrap_err();
        assert!(err.to_string().contains("1 labels for 2 images"), "{err}");
    }

    #[test]
    fn gzipped_files_are_read_transparently() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let gz = |name: &str, bytes: &[u8]| {
            let path = dir.path().join(name);
            let mut e = GzEncoder::new(std::fs::File::create(&path).unwrap(), flate2::Compression::fast());
            e.write_all(bytes).unwrap();
            e.finish().unwrap();
        };
        gz("t10k-images-idx3-ubyte.gz", &idx_images(3, 51));
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[7, 2, 1])).unwrap();
        let d = Digits::load_dir(dir.path(), Split::Test).unwrap();
        assert_eq!(d.labels(), &[7, 2, 1]);
        assert!((d.image(2)[0] - 0.2).abs() < 1e-15);
    }
}
