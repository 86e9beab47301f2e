//! CIFAR-10 binary batches: records of 3073 bytes, one label byte followed
//! by 32x32 red, green and blue planes.

use std::fs;
use std::path::Path;

use super::{Dataset, Labels, Normalization, Split};
use crate::error::{FgpError, Result};
use crate::tensor::{Scalar, Tensor};

const RECORD: usize = 3073;
const PLANE: usize = 32 * 32;
const MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
const STDS: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Load one or more batch files. `class_subset`, when given, keeps only
/// those classes and relabels them 0..n in ascending original order;
/// `per_class_cap` keeps at most that many samples of each (possibly
/// relabelled) class, in file order.
pub fn load_cifar10<T: Scalar>(
    paths: &[&Path],
    split: Split,
    class_subset: Option<&[usize]>,
    per_class_cap: Option<usize>,
) -> Result<Dataset<T>> {
    let mut remap: Option<Vec<Option<usize>>> = None;
    if let Some(subset) = class_subset {
        let mut sorted: Vec<usize> = subset.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || *sorted.last().unwrap() >= 10 {
            return Err(FgpError::InvalidArg(format!(
                "class subset {subset:?} invalid for CIFAR-10"
            )));
        }
        let mut table = vec![None; 10];
        for (new, &orig) in sorted.iter().enumerate() {
            table[orig] = Some(new);
        }
        remap = Some(table);
    }
    let class_count = remap
        .as_ref()
        .map(|t| t.iter().flatten().count())
        .unwrap_or(10);

    let mut images = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut kept_per_class = vec![0usize; class_count];

    for path in paths {
        let bytes = fs::read(path).map_err(|e| FgpError::io(path.display().to_string(), e))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(FgpError::data(
                path.display().to_string(),
                format!("length {} is not a positive multiple of {RECORD}", bytes.len()),
            ));
        }
        for (rec, chunk) in bytes.chunks_exact(RECORD).enumerate() {
            let raw_label = chunk[0] as usize;
            if raw_label >= 10 {
                return Err(FgpError::data(
                    path.display().to_string(),
                    format!("label {raw_label} out of range at record {rec}"),
                ));
            }
            let label = match &remap {
                Some(table) => match table[raw_label] {
                    Some(l) => l,
                    None => continue,
                },
                None => raw_label,
            };
            if let Some(cap) = per_class_cap {
                if kept_per_class[label] >= cap {
                    continue;
                }
            }
            kept_per_class[label] += 1;

            let mut data = Vec::with_capacity(3 * PLANE);
            for ch in 0..3 {
                let plane = &chunk[1 + ch * PLANE..1 + (ch + 1) * PLANE];
                data.extend(
                    plane
                        .iter()
                        .map(|&p| T::from_f64((p as f64 / 255.0 - MEANS[ch]) / STDS[ch])),
                );
            }
            images.push(Tensor::new(vec![3, 32, 32], data)?);
            labels.push(label);
        }
    }

    let ds = Dataset {
        images,
        labels: Labels::Classes(labels),
        class_count,
        split,
        norm: Normalization {
            mean: MEANS.to_vec(),
            std: STDS.to_vec(),
        },
    };
    ds.check_invariants()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_records(name: &str, records: &[(u8, u8, u8, u8)]) -> std::path::PathBuf {
        // each record: label byte, then constant r/g/b planes
        let dir = std::env::temp_dir().join(format!("fgp-cifar-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut bytes = Vec::new();
        for &(label, r, g, b) in records {
            bytes.push(label);
            bytes.extend(std::iter::repeat(r).take(PLANE));
            bytes.extend(std::iter::repeat(g).take(PLANE));
            bytes.extend(std::iter::repeat(b).take(PLANE));
        }
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn one_record_plane_order() {
        // red plane precedes green precedes blue
        let path = write_records("one.bin", &[(7, 255, 128, 0)]);
        let ds = load_cifar10::<f64>(&[&path], Split::Test, None, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample_shape(), &[3, 32, 32]);
        let norm = |p: f64, ch: usize| (p / 255.0 - MEANS[ch]) / STDS[ch];
        let img = &ds.images[0];
        assert!((img.data()[0] - norm(255.0, 0)).abs() < 1e-12);
        assert!((img.data()[PLANE] - norm(128.0, 1)).abs() < 1e-12);
        assert!((img.data()[2 * PLANE] - norm(0.0, 2)).abs() < 1e-12);
        assert_eq!(ds.labels, Labels::Classes(vec![7]));
    }

    #[test]
    fn class_subset_filters_and_relabels() {
        let path = write_records(
            "subset.bin",
            &[(0, 1, 1, 1), (5, 2, 2, 2), (9, 3, 3, 3), (5, 4, 4, 4)],
        );
        let ds = load_cifar10::<f32>(&[&path], Split::Train, Some(&[5, 9]), None).unwrap();
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.labels, Labels::Classes(vec![0, 1, 0])); // 5->0, 9->1
    }

    #[test]
    fn per_class_cap_limits() {
        let path = write_records("cap.bin", &[(1, 0, 0, 0), (1, 0, 0, 0), (1, 0, 0, 0)]);
        let ds = load_cifar10::<f32>(&[&path], Split::Train, None, Some(2)).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn truncated_record_rejected() {
        let dir = std::env::temp_dir().join(format!("fgp-cifar-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.bin");
        fs::write(&path, vec![0u8; RECORD + 5]).unwrap();
        let err = load_cifar10::<f32>(&[&path], Split::Train, None, None).unwrap_err();
        assert!(matches!(err, FgpError::DataFormat { .. }));
    }
}
