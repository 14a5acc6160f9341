//! Area-weighted resampling for single-channel rasters.

/// How overlapping source area is folded into an output cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    /// Output cell holds the overlap-weighted sum; totals are conserved.
    Sum,
    /// Output cell holds the overlap-weighted mean; constants are preserved.
    Mean,
}

/// Per-axis contributions `(src, dst, weight)` where weight is the fraction of
/// source cell `src` that falls inside destination cell `dst`.
fn axis_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let mut out = Vec::with_capacity(src_len + dst_len);
    for dst in 0..dst_len {
        let lo = dst as f64 * scale;
        let hi = (dst + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src_len);
        for src in first..last {
            let overlap = (hi.min((src + 1) as f64) - lo.max(src as f64)).max(0.0);
            if overlap > 0.0 {
                out.push((src, dst, overlap));
            }
        }
    }
    out
}

/// Resample a row-major `src_h × src_w` raster to `dst_h × dst_w`.
pub fn resample_area(
    src: &[f32],
    (src_w, src_h): (usize, usize),
    (dst_w, dst_h): (usize, usize),
    fold: Fold,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h, "raster length mismatch");
    if (src_w, src_h) == (dst_w, dst_h) {
        return src.to_vec();
    }
    let wx = axis_weights(src_w, dst_w);
    let wy = axis_weights(src_h, dst_h);

    // Horizontal pass: src_h × dst_w.
    let mut tmp = vec![0f64; src_h * dst_w];
    for y in 0..src_h {
        let row = &src[y * src_w..(y + 1) * src_w];
        let out = &mut tmp[y * dst_w..(y + 1) * dst_w];
        for &(s, d, w) in &wx {
            out[d] += row[s] as f64 * w;
        }
    }
    // Vertical pass.
    let mut acc = vec![0f64; dst_h * dst_w];
    for &(s, d, w) in &wy {
        let src_row = &tmp[s * dst_w..(s + 1) * dst_w];
        let out = &mut acc[d * dst_w..(d + 1) * dst_w];
        for (o, v) in out.iter_mut().zip(src_row) {
            *o += v * w;
        }
    }
    let norm = match fold {
        Fold::Sum => 1.0,
        Fold::Mean => (dst_w * dst_h) as f64 / (src_w * src_h) as f64,
    };
    acc.into_iter().map(|v| (v * norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_fold_conserves_total() {
        let src: Vec<f32> = (0..7 * 5).map(|i| (i % 4) as f32).collect();
        let total: f32 = src.iter().sum();
        for dst in [(3, 2), (7, 5), (14, 10), (4, 4)] {
            let out = resample_area(&src, (7, 5), dst, Fold::Sum);
            let s: f32 = out.iter().sum();
            assert!((s - total).abs() < 1e-3, "{dst:?}: {s} vs {total}");
        }
    }

    #[test]
    fn mean_fold_preserves_constant() {
        let src = vec![0.25f32; 9 * 6];
        let out = resample_area(&src, (9, 6), (4, 4), Fold::Mean);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn integer_downscale_is_block_sum() {
        let src = vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12., 13., 14., 15., 16.];
        let out = resample_area(&src, (4, 4), (2, 2), Fold::Sum);
        assert_eq!(out, vec![14., 22., 46., 54.]);
    }
}
