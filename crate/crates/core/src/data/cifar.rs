//! CIFAR-10 binary batch reader (`data_batch_*.bin`, `test_batch.bin`).

use std::fs;
use std::path::Path;

use super::{Dataset, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;
pub const NUM_CLASSES: usize = 10;

/// Parses one batch file: each record is a label byte followed by the R, G and B planes.
pub fn parse_batch(bytes: &[u8], source: &str) -> Result<Vec<LabeledImage>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Parse {
            path: source.into(),
            msg: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: NUM_CLASSES,
                });
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                pixels: Tensor::new(vec![3, SIDE, SIDE], data)?,
                label: Some(label),
                source_id: format!("{source}#{i}"),
            })
        })
        .collect()
}

pub fn read_batches(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut images = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.extend(parse_batch(&bytes, &name)?);
    }
    Dataset::new(images, Some(NUM_CLASSES), Provenance::Directory)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_planes_in_channel_order() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255, SIDE * SIDE));
        rec.extend(std::iter::repeat_n(0, SIDE * SIDE));
        rec.extend(std::iter::repeat_n(51, SIDE * SIDE));
        let imgs = parse_batch(&rec, "b").unwrap();
        assert_eq!(imgs[0].label, Some(7));
        let d = imgs[0].pixels.data();
        assert_eq!((d[0], d[SIDE * SIDE], d[2 * SIDE * SIDE]), (1.0, 0.0, 0.2));
    }

    #[test]
    fn rejects_truncated_and_bad_label() {
        assert!(parse_batch(&[0u8; RECORD - 1], "b").is_err());
        let mut rec = vec![0u8; RECORD];
        rec[0] = 10;
        assert!(matches!(
            parse_batch(&rec, "b"),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }
}
