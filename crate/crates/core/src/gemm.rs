//! Row-major SGEMM plus image-to-column lowering for the convolution ops.
//!
//! Convolutions are evaluated as matrix products over column chunks so the
//! lowered buffer stays bounded regardless of feature-map size.

/// C (m×n) = alpha·A·B + beta·C with explicit element strides per matrix.
/// Strides are in elements; each slice must cover its strided extent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(span(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

/// Output extent of a convolution along one axis, or None when the dilated
/// kernel does not fit the padded input.
pub(crate) fn conv_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if effective > padded {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Geometry shared by the lowering in both convolution directions. The
/// "input" is always the larger map the kernel slides over.
#[derive(Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Rows of the lowered matrix.
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the lowered matrix (one per output position).
    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Columns per chunk, sized to keep the chunk buffer around 16 MB.
    pub fn chunk_cols(&self) -> usize {
        (4_000_000 / self.rows()).max(64).min(self.cols().max(1))
    }
}

/// Fill `out` (rows() × (col_end − col_start), row-major) with the lowered
/// patch matrix for columns [col_start, col_end) of one image plane
/// (c_in × h × w contiguous). Out-of-bounds taps read as zero.
pub(crate) fn im2col_chunk(plane: &[f32], g: &ConvGeometry, col_start: usize, col_end: usize, out: &mut [f32]) {
    let cw = col_end - col_start;
    debug_assert_eq!(plane.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(out.len(), g.rows() * cw);
    // Identity lowering: each row is a contiguous run of the input plane.
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 && g.dilation == 1 {
        for ci in 0..g.c_in {
            let src = &plane[ci * g.cols() + col_start..ci * g.cols() + col_end];
            out[ci * cw..(ci + 1) * cw].copy_from_slice(src);
        }
        return;
    }
    let mut r = 0;
    for ci in 0..g.c_in {
        let chan = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut out[r * cw..(r + 1) * cw];
                for (idx, j) in (col_start..col_end).enumerate() {
                    let oy = j / g.out_w;
                    let ox = j % g.out_w;
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    row[idx] = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w
                    {
                        chan[iy as usize * g.w + ix as usize]
                    } else {
                        0.0
                    };
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add the lowered matrix chunk back onto the image plane: the
/// adjoint of [`im2col_chunk`]. Out-of-bounds taps are dropped.
pub(crate) fn col2im_add_chunk(
    cols: &[f32],
    g: &ConvGeometry,
    col_start: usize,
    col_end: usize,
    plane: &mut [f32],
) {
    let cw = col_end - col_start;
    debug_assert_eq!(plane.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * cw);
    let mut r = 0;
    for ci in 0..g.c_in {
        let chan = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[r * cw..(r + 1) * cw];
                for (idx, j) in (col_start..col_end).enumerate() {
                    let oy = j / g.out_w;
                    let ox = j % g.out_w;
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        chan[iy as usize * g.w + ix as usize] += row[idx];
                    }
                }
                r += 1;
            }
        }
    }
}
