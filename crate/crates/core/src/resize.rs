//! Coordinate helpers shared by layer upsampling, mask resampling, and
//! dataset resizing. All use half-pixel source mapping.

/// Source taps for one output coordinate under half-pixel bilinear mapping,
/// edge-clamped: (low index, high index, high-side weight).
pub(crate) fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let s = (dst as f32 + 0.5) * (src_len as f32 / dst_len as f32) - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f32);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f32)
}

/// Index of the nearest source row/column for a destination coordinate.
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize;
    s.min(src_len - 1)
}

/// Bilinear resize of one (h, w) plane to (dh, dw); up- or downscale.
pub(crate) fn resize_bilinear_plane(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), sh * sw);
    let rows: Vec<(usize, usize, f32)> = (0..dh).map(|d| bilinear_taps(d, sh, dh)).collect();
    let cols: Vec<(usize, usize, f32)> = (0..dw).map(|d| bilinear_taps(d, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}
