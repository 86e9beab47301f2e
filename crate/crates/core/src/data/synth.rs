//! Synthetic segmentation data: axis-aligned rectangles and discs of
//! class-specific intensity over a textured background, with pixel-exact
//! masks. Identical seeds produce bit-identical datasets.

use super::{Dataset, Labels, Normalization, Split};
use crate::error::{FgpError, Result};
use crate::rng::{stream, StreamTag};
use crate::tensor::{Scalar, Tensor};

/// Pixels painted per class per sample, maintained while drawing (overdraw
/// decrements the hidden class), so tests can audit masks against it.
#[derive(Debug, Clone)]
pub struct PlacementLog {
    pub per_sample: Vec<Vec<usize>>,
}

const MAX_FOREGROUND: usize = 8;

pub fn synth_shapes<T: Scalar>(
    seed: u64,
    n: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Result<Dataset<T>> {
    synth_shapes_with_log(seed, n, classes, h, w).map(|(ds, _)| ds)
}

pub fn synth_shapes_with_log<T: Scalar>(
    seed: u64,
    n: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Result<(Dataset<T>, PlacementLog)> {
    if classes < 2 {
        return Err(FgpError::InvalidArg(
            "synthetic shapes need background plus at least one class".into(),
        ));
    }
    if classes - 1 > MAX_FOREGROUND {
        return Err(FgpError::InvalidArg(format!(
            "shape palette supports at most {MAX_FOREGROUND} foreground classes, asked for {}",
            classes - 1
        )));
    }
    if h < 12 || w < 12 {
        return Err(FgpError::InvalidArg("synthetic images must be at least 12x12".into()));
    }

    let mut rng = stream(seed, StreamTag::Synth, 0);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut log = Vec::with_capacity(n);

    for _ in 0..n {
        let mut img = vec![0.0f64; h * w];
        let mut mask = vec![0u8; h * w];
        let mut counts = vec![0usize; classes];
        counts[0] = h * w;

        // textured background
        let base = rng.uniform(0.05, 0.15);
        for px in img.iter_mut() {
            *px = base + rng.normal() * 0.04;
        }

        // one shape per foreground class, painted in class order; later
        // shapes overdraw earlier ones and the log tracks the change
        for class in 1..classes {
            let spread = (classes - 2).max(1) as f64;
            let level = 0.35 + 0.55 * ((class - 1) as f64) / spread;
            let is_disc = class % 2 == 0;
            let size = rng.bounded((h.min(w) as u64 / 4).max(2)) as usize + h.min(w) / 5;
            let ci = rng.bounded((h - size) as u64) as usize + size / 2;
            let cj = rng.bounded((w - size) as u64) as usize + size / 2;
            let half = (size / 2).max(2);

            for i in 0..h {
                for j in 0..w {
                    let inside = if is_disc {
                        let di = i as f64 - ci as f64;
                        let dj = j as f64 - cj as f64;
                        di * di + dj * dj <= (half * half) as f64
                    } else {
                        i.abs_diff(ci) <= half && j.abs_diff(cj) <= half
                    };
                    if inside {
                        let old = mask[i * w + j] as usize;
                        counts[old] -= 1;
                        counts[class] += 1;
                        mask[i * w + j] = class as u8;
                        img[i * w + j] = level + rng.normal() * 0.03;
                    }
                }
            }
        }

        images.push(Tensor::new(
            vec![1, h, w],
            img.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        masks.push(mask);
        log.push(counts);
    }

    let ds = Dataset {
        images,
        labels: Labels::Masks { masks, h, w },
        class_count: classes,
        split: Split::Train,
        norm: Normalization::identity(1),
    };
    ds.check_invariants()?;
    Ok((ds, PlacementLog { per_sample: log }))
}
