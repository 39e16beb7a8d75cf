//! Differentiable layer operations: convolutions (direct and transposed),
//! batch normalization, activations, pooling, bilinear upsampling, and
//! channel concatenation.
//!
//! Convolutions lower image patches to column matrices and run a single
//! matrix product per chunk; every backward rule re-derives the lowering
//! instead of caching it, trading a little compute for bounded memory.

use crate::error::{Error, Result};
use crate::gemm::{col2im_add_chunk, conv_out_size, gemm_strided, im2col_chunk, ConvGeometry};
use crate::resize::bilinear_taps;
use crate::tensor::{Shape, Tensor};

/// Convolution parameters. `weight` is (c_out, c_in, k_h, k_w); `bias` is a
/// per-output-channel vector stored as (1, c_out, 1, 1).
#[derive(Clone)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dParams {
            weight,
            bias,
            stride,
            padding,
            dilation,
        }
    }
}

/// Strided 2-D convolution with zero padding.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (c_out, c_in, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    if p.stride < 1 || p.dilation < 1 {
        return Err(Error::Contract(format!(
            "conv2d requires stride >= 1 and dilation >= 1, got stride={} dilation={}",
            p.stride, p.dilation
        )));
    }
    if xs.c != c_in {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels but weight expects {}",
            xs.c, c_in
        )));
    }
    if p.bias.shape() != Shape::new(1, c_out, 1, 1) {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {} does not match (1,{},1,1)",
            p.bias.shape(),
            c_out
        )));
    }
    let out_h = conv_out_size(xs.h, kh, p.stride, p.padding, p.dilation);
    let out_w = conv_out_size(xs.w, kw, p.stride, p.padding, p.dilation);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::Shape(format!(
            "conv2d: dilated {kh}x{kw} kernel does not fit {}x{} input with pad {}",
            xs.h, xs.w, p.padding
        )));
    };
    let g = ConvGeometry {
        c_in,
        h: xs.h,
        w: xs.w,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        dilation: p.dilation,
        out_h,
        out_w,
    };
    let k_rows = g.rows();
    let l = g.cols();
    let chunk = g.chunk_cols();
    let in_plane = c_in * xs.h * xs.w;
    let out_plane = c_out * l;

    let mut y = vec![0.0f32; xs.n * out_plane];
    {
        let xd = x.data();
        let wd = p.weight.data();
        let bd = p.bias.data();
        let mut cols = vec![0.0f32; k_rows * chunk];
        for i in 0..xs.n {
            let plane = &xd[i * in_plane..(i + 1) * in_plane];
            let mut j0 = 0;
            while j0 < l {
                let j1 = (j0 + chunk).min(l);
                let cw = j1 - j0;
                im2col_chunk(plane, &g, j0, j1, &mut cols[..k_rows * cw]);
                gemm_strided(
                    c_out,
                    k_rows,
                    cw,
                    1.0,
                    &wd,
                    k_rows as isize,
                    1,
                    &cols[..k_rows * cw],
                    cw as isize,
                    1,
                    0.0,
                    &mut y[i * out_plane + j0..],
                    l as isize,
                    1,
                );
                j0 = j1;
            }
            for oc in 0..c_out {
                let b = bd[oc];
                if b != 0.0 {
                    for v in &mut y[i * out_plane + oc * l..i * out_plane + (oc + 1) * l] {
                        *v += b;
                    }
                }
            }
        }
    }

    let (px, pw, pb) = (x.clone(), p.weight.clone(), p.bias.clone());
    let n = xs.n;
    Ok(Tensor::from_op(
        Shape::new(n, c_out, out_h, out_w),
        y,
        "conv2d",
        vec![x.clone(), p.weight.clone(), p.bias.clone()],
        move |gy| {
            if pb.requires_grad() {
                let mut db = vec![0.0f32; c_out];
                for i in 0..n {
                    for oc in 0..c_out {
                        let row = &gy[i * out_plane + oc * l..i * out_plane + (oc + 1) * l];
                        db[oc] += row.iter().sum::<f32>();
                    }
                }
                pb.accumulate_grad(&db);
            }
            let need_w = pw.requires_grad();
            let need_x = px.requires_grad();
            if !need_w && !need_x {
                return;
            }
            let xd = px.data();
            let wd = pw.data();
            let mut dw = if need_w { vec![0.0f32; c_out * k_rows] } else { Vec::new() };
            let mut dx = if need_x { vec![0.0f32; n * in_plane] } else { Vec::new() };
            let mut cols = vec![0.0f32; k_rows * chunk];
            let mut dcols = if need_x { vec![0.0f32; k_rows * chunk] } else { Vec::new() };
            for i in 0..n {
                let plane = &xd[i * in_plane..(i + 1) * in_plane];
                let mut j0 = 0;
                while j0 < l {
                    let j1 = (j0 + chunk).min(l);
                    let cw = j1 - j0;
                    if need_w {
                        im2col_chunk(plane, &g, j0, j1, &mut cols[..k_rows * cw]);
                        gemm_strided(
                            c_out,
                            cw,
                            k_rows,
                            1.0,
                            &gy[i * out_plane + j0..],
                            l as isize,
                            1,
                            &cols[..k_rows * cw],
                            1,
                            cw as isize,
                            1.0,
                            &mut dw,
                            k_rows as isize,
                            1,
                        );
                    }
                    if need_x {
                        gemm_strided(
                            k_rows,
                            c_out,
                            cw,
                            1.0,
                            &wd,
                            1,
                            k_rows as isize,
                            &gy[i * out_plane + j0..],
                            l as isize,
                            1,
                            0.0,
                            &mut dcols[..k_rows * cw],
                            cw as isize,
                            1,
                        );
                        col2im_add_chunk(
                            &dcols[..k_rows * cw],
                            &g,
                            j0,
                            j1,
                            &mut dx[i * in_plane..(i + 1) * in_plane],
                        );
                    }
                    j0 = j1;
                }
            }
            drop(xd);
            drop(wd);
            if need_w {
                pw.accumulate_grad(&dw);
            }
            if need_x {
                px.accumulate_grad(&dx);
            }
        },
    ))
}

/// Transposed 2-D convolution (the adjoint of an unpadded strided
/// convolution). `weight` is (c_in, c_out, k_h, k_w); output spatial size is
/// (h-1)*stride + k per axis. `bias` is (1, c_out, 1, 1).
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let (c_in, c_out, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    if stride < 1 {
        return Err(Error::Contract("conv_transpose2d requires stride >= 1".into()));
    }
    if xs.c != c_in {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input has {} channels but weight expects {}",
            xs.c, c_in
        )));
    }
    if bias.shape() != Shape::new(1, c_out, 1, 1) {
        return Err(Error::Shape(format!(
            "conv_transpose2d: bias shape {} does not match (1,{},1,1)",
            bias.shape(),
            c_out
        )));
    }
    let out_h = (xs.h - 1) * stride + kh;
    let out_w = (xs.w - 1) * stride + kw;
    // The lowering geometry of the forward convolution this op is adjoint
    // to: it slides the kernel over the (larger) output map and lands on
    // exactly this op's input positions.
    let g = ConvGeometry {
        c_in: c_out,
        h: out_h,
        w: out_w,
        kh,
        kw,
        stride,
        pad: 0,
        dilation: 1,
        out_h: xs.h,
        out_w: xs.w,
    };
    debug_assert_eq!(conv_out_size(out_h, kh, stride, 0, 1), Some(xs.h));
    let k_rows = g.rows();
    let l = g.cols();
    let chunk = g.chunk_cols();
    let in_plane = c_in * l;
    let out_plane = c_out * out_h * out_w;

    let mut y = vec![0.0f32; xs.n * out_plane];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut dcols = vec![0.0f32; k_rows * chunk];
        for i in 0..xs.n {
            let mut j0 = 0;
            while j0 < l {
                let j1 = (j0 + chunk).min(l);
                let cw = j1 - j0;
                gemm_strided(
                    k_rows,
                    c_in,
                    cw,
                    1.0,
                    &wd,
                    1,
                    k_rows as isize,
                    &xd[i * in_plane + j0..],
                    l as isize,
                    1,
                    0.0,
                    &mut dcols[..k_rows * cw],
                    cw as isize,
                    1,
                );
                col2im_add_chunk(
                    &dcols[..k_rows * cw],
                    &g,
                    j0,
                    j1,
                    &mut y[i * out_plane..(i + 1) * out_plane],
                );
                j0 = j1;
            }
            for oc in 0..c_out {
                let b = bd[oc];
                if b != 0.0 {
                    let span = out_h * out_w;
                    for v in &mut y[i * out_plane + oc * span..i * out_plane + (oc + 1) * span] {
                        *v += b;
                    }
                }
            }
        }
    }

    let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
    let n = xs.n;
    Ok(Tensor::from_op(
        Shape::new(n, c_out, out_h, out_w),
        y,
        "conv_transpose2d",
        vec![x.clone(), weight.clone(), bias.clone()],
        move |gy| {
            if pb.requires_grad() {
                let span = out_h * out_w;
                let mut db = vec![0.0f32; c_out];
                for i in 0..n {
                    for oc in 0..c_out {
                        let row = &gy[i * out_plane + oc * span..i * out_plane + (oc + 1) * span];
                        db[oc] += row.iter().sum::<f32>();
                    }
                }
                pb.accumulate_grad(&db);
            }
            let need_w = pw.requires_grad();
            let need_x = px.requires_grad();
            if !need_w && !need_x {
                return;
            }
            let xd = px.data();
            let wd = pw.data();
            let mut dw = if need_w { vec![0.0f32; c_in * k_rows] } else { Vec::new() };
            let mut dx = if need_x { vec![0.0f32; n * in_plane] } else { Vec::new() };
            let mut cols = vec![0.0f32; k_rows * chunk];
            for i in 0..n {
                let gplane = &gy[i * out_plane..(i + 1) * out_plane];
                let mut j0 = 0;
                while j0 < l {
                    let j1 = (j0 + chunk).min(l);
                    let cw = j1 - j0;
                    im2col_chunk(gplane, &g, j0, j1, &mut cols[..k_rows * cw]);
                    if need_x {
                        gemm_strided(
                            c_in,
                            k_rows,
                            cw,
                            1.0,
                            &wd,
                            k_rows as isize,
                            1,
                            &cols[..k_rows * cw],
                            cw as isize,
                            1,
                            0.0,
                            &mut dx[i * in_plane + j0..],
                            l as isize,
                            1,
                        );
                    }
                    if need_w {
                        gemm_strided(
                            c_in,
                            cw,
                            k_rows,
                            1.0,
                            &xd[i * in_plane + j0..],
                            l as isize,
                            1,
                            &cols[..k_rows * cw],
                            1,
                            cw as isize,
                            1.0,
                            &mut dw,
                            k_rows as isize,
                            1,
                        );
                    }
                    j0 = j1;
                }
            }
            drop(xd);
            drop(wd);
            if need_w {
                pw.accumulate_grad(&dw);
            }
            if need_x {
                px.accumulate_grad(&dx);
            }
        },
    ))
}

/// Batch-normalization state. Vectors are stored as (1, c, 1, 1) tensors;
/// `running_mean`/`running_var` are buffers, never differentiated.
#[derive(Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
    pub training: bool,
}

impl BatchNormParams {
    /// Fresh state for `c` channels: gamma 1, beta 0, running mean 0,
    /// running var 1, eps 1e-5, momentum 0.1.
    pub fn new(c: usize) -> Self {
        let vecshape = Shape::new(1, c, 1, 1);
        BatchNormParams {
            gamma: Tensor::full(vecshape, 1.0),
            beta: Tensor::zeros(vecshape),
            running_mean: Tensor::zeros(vecshape),
            running_var: Tensor::full(vecshape, 1.0),
            eps: 1e-5,
            momentum: 0.1,
            training: true,
        }
    }
}

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics (biased variance over n·h·w) and updates the running stats;
/// inference mode normalizes with the running stats.
pub fn batch_norm2d(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let xs = x.shape();
    let c = xs.c;
    let vecshape = Shape::new(1, c, 1, 1);
    for (name, t) in [
        ("gamma", &p.gamma),
        ("beta", &p.beta),
        ("running_mean", &p.running_mean),
        ("running_var", &p.running_var),
    ] {
        if t.shape() != vecshape {
            return Err(Error::Shape(format!(
                "batch_norm2d: {name} shape {} does not match (1,{c},1,1)",
                t.shape()
            )));
        }
    }
    if p.eps <= 0.0 {
        return Err(Error::Contract("batch_norm2d requires eps > 0".into()));
    }
    if !(0.0..=1.0).contains(&p.momentum) {
        return Err(Error::Contract("batch_norm2d requires momentum in [0,1]".into()));
    }
    if p.running_var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("batch_norm2d: running_var must be non-negative".into()));
    }

    let hw = xs.h * xs.w;
    let m = xs.n * hw;
    let chan = move |i: usize, ch: usize| (i * c + ch) * hw;

    let (mean, var): (Vec<f32>, Vec<f32>) = if p.training {
        let xd = x.data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for i in 0..xs.n {
                for &v in &xd[chan(i, ch)..chan(i, ch) + hw] {
                    sum += v as f64;
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0.0f64;
            for i in 0..xs.n {
                for &v in &xd[chan(i, ch)..chan(i, ch) + hw] {
                    let d = v as f64 - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu as f32;
            var[ch] = (sq / m as f64) as f32;
        }
        drop(xd);
        let mom = p.momentum;
        p.running_mean.update_data(|rm| {
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        });
        p.running_var.update_data(|rv| {
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        });
        (mean, var)
    } else {
        (p.running_mean.to_vec(), p.running_var.to_vec())
    };

    let inv_sigma: Vec<f32> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
    let gamma_v = p.gamma.to_vec();
    let beta_v = p.beta.to_vec();

    let mut y = vec![0.0f32; xs.numel()];
    {
        let xd = x.data();
        for i in 0..xs.n {
            for ch in 0..c {
                let (mu, is, ga, be) = (mean[ch], inv_sigma[ch], gamma_v[ch], beta_v[ch]);
                let base = chan(i, ch);
                for k in 0..hw {
                    y[base + k] = (xd[base + k] - mu) * is * ga + be;
                }
            }
        }
    }

    let (px, pg, pbeta) = (x.clone(), p.gamma.clone(), p.beta.clone());
    let training = p.training;
    let (n, _eps) = (xs.n, p.eps);
    Ok(Tensor::from_op(
        xs,
        y,
        "batch_norm2d",
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        move |gy| {
            let xd = px.data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = if px.requires_grad() { vec![0.0f32; n * c * hw] } else { Vec::new() };
            for ch in 0..c {
                let (mu, is, ga) = (mean[ch], inv_sigma[ch], gamma_v[ch]);
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for i in 0..n {
                    let base = chan(i, ch);
                    for k in 0..hw {
                        let g = gy[base + k] as f64;
                        let xh = ((xd[base + k] - mu) * is) as f64;
                        s1 += g;
                        s2 += g * xh;
                    }
                }
                dbeta[ch] = s1 as f32;
                dgamma[ch] = s2 as f32;
                if px.requires_grad() {
                    if training {
                        let g_mean = (s1 / m as f64) as f32;
                        let gx_mean = (s2 / m as f64) as f32;
                        for i in 0..n {
                            let base = chan(i, ch);
                            for k in 0..hw {
                                let xh = (xd[base + k] - mu) * is;
                                dx[base + k] = ga * is * (gy[base + k] - g_mean - xh * gx_mean);
                            }
                        }
                    } else {
                        for i in 0..n {
                            let base = chan(i, ch);
                            for k in 0..hw {
                                dx[base + k] = gy[base + k] * ga * is;
                            }
                        }
                    }
                }
            }
            drop(xd);
            pg.accumulate_grad(&dgamma);
            pbeta.accumulate_grad(&dbeta);
            if px.requires_grad() {
                px.accumulate_grad(&dx);
            }
        },
    ))
}

/// Elementwise max(0, x). The subgradient at exactly 0 is 0.
pub fn relu(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let px = x.clone();
    Tensor::from_op(x.shape(), data, "relu", vec![x.clone()], move |g| {
        let xd = px.data();
        let gx: Vec<f32> = g
            .iter()
            .zip(xd.iter())
            .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
            .collect();
        drop(xd);
        px.accumulate_grad(&gx);
    })
}

/// Elementwise logistic function 1/(1+e^-x).
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let px = x.clone();
    Tensor::from_op(x.shape(), data, "sigmoid", vec![x.clone()], move |g| {
        let xd = px.data();
        let gx: Vec<f32> = g
            .iter()
            .zip(xd.iter())
            .map(|(&gi, &v)| {
                let s = 1.0 / (1.0 + (-v).exp());
                gi * s * (1.0 - s)
            })
            .collect();
        drop(xd);
        px.accumulate_grad(&gx);
    })
}

/// 2×2 max pooling with stride 2. Gradient routes to the first-encountered
/// maximum in row-major window order.
pub fn max_pool2d(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2d requires even spatial dims, got {}x{}",
            xs.h, xs.w
        )));
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let out_n = xs.n * xs.c * oh * ow;
    let mut y = vec![0.0f32; out_n];
    let mut argmax = vec![0u32; out_n];
    {
        let xd = x.data();
        let mut o = 0;
        for i in 0..xs.n {
            for ch in 0..xs.c {
                let base = (i * xs.c + ch) * xs.h * xs.w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = base + (2 * oy) * xs.w + 2 * ox;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * xs.w + 2 * ox + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        y[o] = best;
                        argmax[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        }
    }
    let px = x.clone();
    let in_numel = xs.numel();
    Ok(Tensor::from_op(
        Shape::new(xs.n, xs.c, oh, ow),
        y,
        "max_pool2d",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![0.0f32; in_numel];
            for (o, &gi) in g.iter().enumerate() {
                gx[argmax[o] as usize] += gi;
            }
            px.accumulate_grad(&gx);
        },
    ))
}

/// Bin extent along one axis: [⌊i·len/bins⌋, ⌈(i+1)·len/bins⌉).
fn bin_range(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let lo = i * len / bins;
    let hi = ((i + 1) * len).div_ceil(bins);
    (lo, hi)
}

/// Adaptive average pooling to a (b_h, b_w) grid; each output is the mean of
/// its bin.
pub fn adaptive_avg_pool2d(x: &Tensor, bins: (usize, usize)) -> Result<Tensor> {
    let xs = x.shape();
    let (bh, bw) = bins;
    if bh < 1 || bw < 1 || bh > xs.h || bw > xs.w {
        return Err(Error::Shape(format!(
            "adaptive_avg_pool2d: bins ({bh},{bw}) out of range for {}x{} input",
            xs.h, xs.w
        )));
    }
    let mut y = vec![0.0f32; xs.n * xs.c * bh * bw];
    {
        let xd = x.data();
        let mut o = 0;
        for i in 0..xs.n {
            for ch in 0..xs.c {
                let base = (i * xs.c + ch) * xs.h * xs.w;
                for by in 0..bh {
                    let (y0, y1) = bin_range(by, xs.h, bh);
                    for bx in 0..bw {
                        let (x0, x1) = bin_range(bx, xs.w, bw);
                        let mut sum = 0.0f32;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                sum += xd[base + yy * xs.w + xx];
                            }
                        }
                        y[o] = sum / ((y1 - y0) * (x1 - x0)) as f32;
                        o += 1;
                    }
                }
            }
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        Shape::new(xs.n, xs.c, bh, bw),
        y,
        "adaptive_avg_pool2d",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![0.0f32; xs.numel()];
            let mut o = 0;
            for i in 0..xs.n {
                for ch in 0..xs.c {
                    let base = (i * xs.c + ch) * xs.h * xs.w;
                    for by in 0..bh {
                        let (y0, y1) = bin_range(by, xs.h, bh);
                        for bx in 0..bw {
                            let (x0, x1) = bin_range(bx, xs.w, bw);
                            let share = g[o] / ((y1 - y0) * (x1 - x0)) as f32;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[base + yy * xs.w + xx] += share;
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
            px.accumulate_grad(&gx);
        },
    ))
}

/// Bilinear upsampling to (h_o, w_o) with half-pixel source coordinates and
/// edge clamping. Downscaling is not supported.
pub fn upsample_bilinear(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let xs = x.shape();
    let (ho, wo) = out;
    if ho < xs.h || wo < xs.w {
        return Err(Error::Contract(format!(
            "upsample_bilinear cannot downscale: {}x{} -> {ho}x{wo}",
            xs.h, xs.w
        )));
    }
    let rows: Vec<(usize, usize, f32)> = (0..ho).map(|d| bilinear_taps(d, xs.h, ho)).collect();
    let cols: Vec<(usize, usize, f32)> = (0..wo).map(|d| bilinear_taps(d, xs.w, wo)).collect();
    let mut y = vec![0.0f32; xs.n * xs.c * ho * wo];
    {
        let xd = x.data();
        let mut o = 0;
        for i in 0..xs.n {
            for ch in 0..xs.c {
                let base = (i * xs.c + ch) * xs.h * xs.w;
                for &(y0, y1, fy) in &rows {
                    for &(x0, x1, fx) in &cols {
                        let v00 = xd[base + y0 * xs.w + x0];
                        let v01 = xd[base + y0 * xs.w + x1];
                        let v10 = xd[base + y1 * xs.w + x0];
                        let v11 = xd[base + y1 * xs.w + x1];
                        let top = v00 + (v01 - v00) * fx;
                        let bot = v10 + (v11 - v10) * fx;
                        y[o] = top + (bot - top) * fy;
                        o += 1;
                    }
                }
            }
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        Shape::new(xs.n, xs.c, ho, wo),
        y,
        "upsample_bilinear",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![0.0f32; xs.numel()];
            let mut o = 0;
            for i in 0..xs.n {
                for ch in 0..xs.c {
                    let base = (i * xs.c + ch) * xs.h * xs.w;
                    for &(y0, y1, fy) in &rows {
                        for &(x0, x1, fx) in &cols {
                            let gi = g[o];
                            o += 1;
                            gx[base + y0 * xs.w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * xs.w + x1] += gi * (1.0 - fy) * fx;
                            gx[base + y1 * xs.w + x0] += gi * fy * (1.0 - fx);
                            gx[base + y1 * xs.w + x1] += gi * fy * fx;
                        }
                    }
                }
            }
            px.accumulate_grad(&gx);
        },
    ))
}

/// Concatenate along the channel axis, preserving order.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return Err(Error::Contract("concat_channels requires at least one tensor".into()));
    };
    let fs = first.shape();
    let mut c_total = 0;
    for t in xs {
        let s = t.shape();
        if s.n != fs.n || s.h != fs.h || s.w != fs.w {
            return Err(Error::Shape(format!(
                "concat_channels: shape {} does not align with {}",
                s, fs
            )));
        }
        c_total += s.c;
    }
    let hw = fs.h * fs.w;
    let out_plane = c_total * hw;
    let mut y = vec![0.0f32; fs.n * out_plane];
    for i in 0..fs.n {
        let mut c_off = 0;
        for t in xs {
            let tc = t.shape().c;
            let td = t.data();
            y[i * out_plane + c_off * hw..i * out_plane + (c_off + tc) * hw]
                .copy_from_slice(&td[i * tc * hw..(i + 1) * tc * hw]);
            c_off += tc;
        }
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let closure_parents = parents.clone();
    let n = fs.n;
    Ok(Tensor::from_op(
        Shape::new(fs.n, c_total, fs.h, fs.w),
        y,
        "concat_channels",
        parents,
        move |g| {
            let mut c_off = 0;
            for t in &closure_parents {
                let tc = t.shape().c;
                if t.requires_grad() {
                    let mut gt = vec![0.0f32; n * tc * hw];
                    for i in 0..n {
                        gt[i * tc * hw..(i + 1) * tc * hw].copy_from_slice(
                            &g[i * out_plane + c_off * hw..i * out_plane + (c_off + tc) * hw],
                        );
                    }
                    t.accumulate_grad(&gt);
                }
                c_off += tc;
            }
        },
    ))
}
