use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;

/// Mirrors every row of a `[C × H × W]` image.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(s.to_vec(), data).expect("same shape")
}

/// Rotates each channel of a `[C × H × W]` image by `degrees` about its
/// center with bilinear sampling; samples outside the image clamp to the edge.
pub fn rotate(image: &Tensor, degrees: f64) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let at = |ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[(ch * h + y) * w + x]
    };
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                let sy = cos * dy - sin * dx + cy;
                let sx = sin * dy + cos * dx + cx;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Tops every class below `target` up to exactly `target` members with
/// flipped or slightly rotated copies of its existing members. Copies get
/// the id suffix `_aug<n>` and are appended after the originals; classes
/// already at or above `target` are left alone.
pub fn balance_by_augmentation(
    samples: &[Sample],
    num_classes: usize,
    target: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = (0..num_classes).map(|k| (k, Vec::new())).collect();
    for s in samples {
        by_class
            .get_mut(&s.label)
            .ok_or_else(|| Error::Validation(format!("sample `{}`: label {} out of range", s.id, s.label)))?
            .push(s);
    }
    if let Some((k, _)) = by_class.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::Validation(format!("class {k} has no samples to augment")));
    }
    let minority = by_class.values().map(Vec::len).min().unwrap_or(0);
    if target < minority {
        return Err(Error::Validation(format!(
            "balance target {target} is below the smallest class size {minority}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for members in by_class.values() {
        for n in 0..target.saturating_sub(members.len()) {
            let src = members[rng.random_range(0..members.len())];
            let image = if rng.random_bool(0.5) {
                flip_horizontal(&src.image)
            } else {
                rotate(&src.image, rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG))
            };
            out.push(Sample {
                id: format!("{}_aug{n}", src.id),
                image,
                ..src.clone()
            });
        }
    }
    Ok(out)
}
