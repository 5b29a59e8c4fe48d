//! Big-endian IDX files as distributed with the digit datasets.

use std::path::Path;

use super::{Dataset, Domain, Range};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Colour images, `N x H x W x 3`.
const IDX_COLOUR_MAGIC: u32 = 0x0000_0804;

fn header(bytes: &[u8], what: &str) -> Result<(u32, Vec<usize>, usize)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
    };
    let magic = word(0)?;
    let rank = (magic & 0xff) as usize;
    if magic >> 8 != 0x08 || rank == 0 {
        return Err(Error::Data(format!("{what}: bad magic {magic:#010x}")));
    }
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((magic, dims, 4 * (rank + 1)))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, dims: &[usize], what: &str) -> Result<&'a [u8]> {
    let n: usize = dims.iter().product();
    let body = &bytes[offset..];
    if body.len() < n {
        return Err(Error::Data(format!(
            "{what}: truncated payload ({} of {n} bytes)",
            body.len()
        )));
    }
    Ok(&body[..n])
}

/// `(shape [N, C, H, W], pixel bytes in NCHW order)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let (magic, dims, offset) = header(bytes, "images")?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let data = payload(bytes, offset, &dims, "images")?;
            Ok((vec![dims[0], 1, dims[1], dims[2]], data.to_vec()))
        }
        IDX_COLOUR_MAGIC if dims[3] == 3 => {
            let data = payload(bytes, offset, &dims, "images")?;
            let (n, h, w) = (dims[0], dims[1], dims[2]);
            let mut out = vec![0u8; data.len()];
            for i in 0..n {
                for p in 0..h * w {
                    for c in 0..3 {
                        out[((i * 3 + c) * h * w) + p] = data[(i * h * w + p) * 3 + c];
                    }
                }
            }
            Ok((vec![n, 3, h, w], out))
        }
        _ => Err(Error::Data(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        ))),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (magic, dims, offset) = header(bytes, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    Ok(payload(bytes, offset, &dims, "labels")?.to_vec())
}

/// Reads an image file and its label file. Pixels stay in `[0, 255]`; see
/// [`super::preprocess`].
pub fn load_idx(images: &Path, labels: &Path, domain: Domain) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (shape, pixels) = parse_idx_images(&ib)?;
    let labels = parse_idx_labels(&lb)?;
    if labels.len() != shape[0] {
        return Err(Error::Data(format!(
            "count mismatch: {} images, {} labels",
            shape[0],
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(
        shape[1..].to_vec(),
        pixels.into_iter().map(f32::from).collect(),
        Some(labels),
        classes,
        domain,
        Range::Bytes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, 2, 2] {
            b.extend(d.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn labels(l: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((l.len() as u32).to_be_bytes());
        b.extend(l);
        b
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, images(2, &[0, 1, 2, 3, 250, 251, 252, 255])).unwrap();
        std::fs::write(&lp, labels(&[7, 3])).unwrap();
        let ds = load_idx(&ip, &lp, Domain::Source).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.tensor().shape(), &[2, 1, 2, 2]);
        assert_eq!(
            ds.values(),
            &[0.0, 1.0, 2.0, 3.0, 250.0, 251.0, 252.0, 255.0]
        );
        assert_eq!(ds.labels().unwrap(), &[7, 3]);
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, images(2, &[0; 8])).unwrap();
        std::fs::write(&lp, labels(&[1])).unwrap();
        let err = load_idx(&ip, &lp, Domain::Source).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = images(2, &[0; 8]);
        b[3] = 0x01;
        assert!(parse_idx_images(&b).is_err());
        assert!(parse_idx_labels(&images(2, &[0; 8])).is_err());
        assert!(parse_idx_images(&images(2, &[0; 7]))
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
    }

    #[test]
    fn colour_is_planar() {
        let mut b = IDX_COLOUR_MAGIC.to_be_bytes().to_vec();
        for d in [1u32, 1, 2, 3] {
            b.extend(d.to_be_bytes());
        }
        b.extend([1, 2, 3, 4, 5, 6]);
        let (shape, px) = parse_idx_images(&b).unwrap();
        assert_eq!(shape, vec![1, 3, 1, 2]);
        assert_eq!(px, vec![1, 4, 2, 5, 3, 6]);
    }
}
