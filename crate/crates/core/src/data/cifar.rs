//! CIFAR-style binary records: one label byte followed by the R, G and B
//! planes, each row-major.

use std::io::Write;
use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::image::ImageU8;

pub const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Decodes records of `side`×`side` images; labels must be below `classes`.
pub fn read_records(bytes: &[u8], side: usize, classes: usize) -> Result<Vec<LabeledImage>> {
    let plane = side * side;
    let record = 1 + 3 * plane;
    if bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(record)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let planes = &rec[1..];
            let mut data = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                data.extend_from_slice(&[planes[i], planes[plane + i], planes[2 * plane + i]]);
            }
            Ok(LabeledImage {
                image: ImageU8::new(side, side, data)?,
                label,
            })
        })
        .collect()
}

/// Encodes square images as records; every image must be `side`×`side`.
pub fn write_records(images: &[LabeledImage], mut out: impl Write) -> Result<()> {
    for item in images {
        let (h, w) = (item.image.height(), item.image.width());
        if h != w {
            return Err(Error::Shape(format!("records need square images, got {h}x{w}")));
        }
        let label = u8::try_from(item.label)
            .map_err(|_| Error::InvalidArgument(format!("label {} does not fit in a byte", item.label)))?;
        let mut rec = Vec::with_capacity(1 + 3 * h * w);
        rec.push(label);
        for c in 0..3 {
            rec.extend(item.image.data().iter().skip(c).step_by(3));
        }
        out.write_all(&rec)?;
    }
    Ok(())
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path)?;
    read_records(&bytes, CIFAR_SIDE, CIFAR_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty() {
        assert!(read_records(&[], 32, 10).unwrap().is_empty());
    }

    #[test]
    fn hand_built_red_record() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 2048));
        let path = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(path.path(), &rec).unwrap();
        let items = load_cifar10(path.path()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].label, 3);
        assert_eq!(items[0].image.pixel(0, 0), [255, 0, 0]);
        assert_eq!(items[0].image.pixel(31, 31), [255, 0, 0]);
    }

    #[test]
    fn bad_sizes_and_labels_error() {
        assert!(matches!(read_records(&[0u8; 3072], 32, 10), Err(Error::Format(_))));
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        assert!(matches!(read_records(&rec, 32, 10), Err(Error::LabelOutOfRange { label: 10, .. })));
    }

    #[test]
    fn records_round_trip() {
        let items: Vec<LabeledImage> = (0..4)
            .map(|k| LabeledImage {
                image: ImageU8::from_fn(8, 8, |y, x| [(y * 30 + k) as u8, (x * 20) as u8, (k * 50) as u8]).unwrap(),
                label: k as usize,
            })
            .collect();
        let mut buf = Vec::new();
        write_records(&items, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 * (1 + 3 * 64));
        assert_eq!(read_records(&buf, 8, 10).unwrap(), items);
    }
}
