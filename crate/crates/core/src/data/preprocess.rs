use super::{Dataset, Range};
use crate::autodiff::bilinear_resize_forward;
use crate::error::{Error, Result};

/// Grayscale weights for red, green, blue.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Grayscale, aligned-corners bilinear resize to `size x size`, and the linear
/// map `[0, 255] -> [-1, 1]`. Steps already satisfied are skipped, so the
/// function is idempotent.
pub fn preprocess(ds: &Dataset, size: usize) -> Result<Dataset> {
    let &[c, h, w] = ds.sample_shape() else {
        return Err(Error::Data(format!(
            "expected [C, H, W] samples, got {:?}",
            ds.sample_shape()
        )));
    };
    if size == 0 {
        return Err(Error::Data("target size 0".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("{c} channels; expected 1 or 3")));
    }
    let n = ds.len();
    let mut gray = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let s = ds.sample(i);
        if c == 1 {
            gray.extend_from_slice(s);
        } else {
            let plane = h * w;
            gray.extend(
                (0..plane)
                    .map(|p| LUMA[0] * s[p] + LUMA[1] * s[plane + p] + LUMA[2] * s[2 * plane + p]),
            );
        }
    }
    let resized = if (h, w) == (size, size) {
        gray
    } else {
        bilinear_resize_forward(&gray, n, h, w, size, size)
    };
    let values: Vec<f32> = match ds.range {
        Range::Bytes => resized
            .iter()
            .map(|&v| (v / 127.5 - 1.0).clamp(-1.0, 1.0))
            .collect(),
        Range::Signed => resized,
    };
    Dataset::new(
        vec![1, size, size],
        values,
        ds.labels().map(<[usize]>::to_vec),
        ds.num_classes,
        ds.domain,
        Range::Signed,
    )
}
