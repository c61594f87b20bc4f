use crate::{Result, SegmentationMask};

/// Symmetric Hausdorff distance (pixels) between the positive-pixel sets.
///
/// Both sets empty gives 0. Exactly one empty set gives the image diagonal
/// `sqrt(H^2 + W^2)`, the largest distance representable on the grid.
pub fn hausdorff(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let a = pred.positives();
    let b = gt.positives();
    Ok(match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => {
            let (h, w) = (pred.height() as f64, pred.width() as f64);
            (h * h + w * w).sqrt()
        }
        (false, false) => directed_sq(&a, &b).max(directed_sq(&b, &a)).sqrt(),
    })
}

/// `max_{a in from} min_{b in to} |a - b|`; both sets must be non-empty.
pub fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    assert!(!from.is_empty() && !to.is_empty(), "directed Hausdorff of an empty set");
    directed_sq(from, to).sqrt()
}

// Squared distances are integers, so the early exit below does not change
// the result: a point whose nearest neighbour is already no farther than the
// running maximum cannot raise it.
fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst: u64 = 0;
    for &(ar, ac) in from {
        let mut best = u64::MAX;
        for &(br, bc) in to {
            let dr = ar.abs_diff(br) as u64;
            let dc = ac.abs_diff(bc) as u64;
            let d = dr * dr + dc * dc;
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst as f64
}
