//! IDX image/label files (the MNIST container format).
//!
//! Images: magic 0x00000803, then count/rows/cols as big-endian u32, then
//! unsigned bytes. Labels: magic 0x00000801, count, bytes. Pixels are
//! normalised as (p/255 - 0.1307) / 0.3081; class count is 10.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Labels, Normalization, Split};
use crate::error::{FgpError, Result};
use crate::tensor::{Scalar, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const MEAN: f64 = 0.1307;
const STD: f64 = 0.3081;

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FgpError::data(path.display().to_string(), "truncated header"))
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset<T>> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| FgpError::io(images_path.display().to_string(), e))?;
    let lab_bytes = fs::read(labels_path)
        .map_err(|e| FgpError::io(labels_path.display().to_string(), e))?;

    let img_path_s = images_path.display().to_string();
    let lab_path_s = labels_path.display().to_string();

    if read_u32_be(&img_bytes, 0, images_path)? != IMAGE_MAGIC {
        return Err(FgpError::data(&img_path_s, "bad magic (expected 0x00000803)"));
    }
    if read_u32_be(&lab_bytes, 0, labels_path)? != LABEL_MAGIC {
        return Err(FgpError::data(&lab_path_s, "bad magic (expected 0x00000801)"));
    }
    let count = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let lab_count = read_u32_be(&lab_bytes, 4, labels_path)? as usize;

    if lab_count != count {
        return Err(FgpError::data(
            &lab_path_s,
            format!("label count {lab_count} does not match image count {count}"),
        ));
    }
    let px_per = rows * cols;
    if img_bytes.len() != 16 + count * px_per {
        return Err(FgpError::data(
            &img_path_s,
            format!(
                "truncated image payload: expected {} bytes, got {}",
                16 + count * px_per,
                img_bytes.len()
            ),
        ));
    }
    if lab_bytes.len() != 8 + count {
        return Err(FgpError::data(&lab_path_s, "truncated label payload"));
    }

    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let raw = &img_bytes[16 + i * px_per..16 + (i + 1) * px_per];
        let data: Vec<T> = raw
            .iter()
            .map(|&p| T::from_f64((p as f64 / 255.0 - MEAN) / STD))
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
        let l = lab_bytes[8 + i] as usize;
        if l >= 10 {
            return Err(FgpError::data(
                &lab_path_s,
                format!("label {l} out of range at record {i}"),
            ));
        }
        labels.push(l);
    }

    let ds = Dataset {
        images,
        labels: Labels::Classes(labels),
        class_count: 10,
        split,
        norm: Normalization {
            mean: vec![MEAN],
            std: vec![STD],
        },
    };
    ds.check_invariants()?;
    Ok(ds)
}

/// Write raw u8 images/labels as a pair of IDX files.
pub fn write_idx_files(
    images_path: &Path,
    labels_path: &Path,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    assert_eq!(images.len(), labels.len());
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        assert_eq!(im.len(), rows * cols);
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);

    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| FgpError::io(path.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| FgpError::io(path.display().to_string(), e))
    };
    write(images_path, &img)?;
    write(labels_path, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("fgp-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn two_image_fixture_round_trips() {
        // Byte-authored fixture: 2 images of 28x28. First image has corner
        // pixels 0 and 255, second is all 17.
        let dir = tmpdir();
        let ip = dir.join("fixture-images");
        let lp = dir.join("fixture-labels");
        let mut im0 = vec![0u8; 28 * 28];
        im0[0] = 0;
        im0[27] = 255;
        im0[28 * 28 - 1] = 128;
        let im1 = vec![17u8; 28 * 28];
        write_idx_files(&ip, &lp, &[im0, im1], &[3, 9], 28, 28).unwrap();

        let ds = load_idx::<f64>(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 28, 28]);
        assert_eq!(ds.labels, Labels::Classes(vec![3, 9]));
        let norm = |p: f64| (p / 255.0 - 0.1307) / 0.3081;
        assert!((ds.images[0].data()[0] - norm(0.0)).abs() < 1e-12);
        assert!((ds.images[0].data()[27] - norm(255.0)).abs() < 1e-12);
        assert!((ds.images[0].data()[28 * 28 - 1] - norm(128.0)).abs() < 1e-12);
        assert!((ds.images[1].data()[100] - norm(17.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let dir = tmpdir();
        let ip = dir.join("empty-images");
        let lp = dir.join("empty-labels");
        fs::write(&ip, []).unwrap();
        fs::write(&lp, []).unwrap();
        let err = load_idx::<f32>(&ip, &lp, Split::Train).unwrap_err();
        assert!(matches!(err, FgpError::DataFormat { .. }));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tmpdir();
        let ip = dir.join("range-images");
        let lp = dir.join("range-labels");
        write_idx_files(&ip, &lp, &[vec![0u8; 4]], &[10], 2, 2).unwrap();
        let err = load_idx::<f32>(&ip, &lp, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 10"), "{msg}");
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tmpdir();
        let ip = dir.join("mismatch-images");
        let lp = dir.join("mismatch-labels");
        write_idx_files(&ip, &lp, &[vec![0u8; 4]], &[1], 2, 2).unwrap();
        // rewrite labels with 2 entries
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[1, 2]);
        fs::write(&lp, lab).unwrap();
        let err = load_idx::<f32>(&ip, &lp, Split::Train).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }
}
