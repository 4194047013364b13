//! Hand-rolled conv/pool inner loops, shared by the tape ops. Loop order is
//! chosen so the innermost loop walks contiguous rows of both input and
//! output, which the optimizer vectorizes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Direct convolution. `x` is `[ci, h, w]`, `k` is `[co, ci, kh, kw]`,
/// `bias` is `[co]` if present; output `[co, oh, ow]` with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: &[f32],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut out = vec![0.0f32; co * oh * ow];
    for c_out in 0..co {
        let out_c = &mut out[c_out * oh * ow..(c_out + 1) * oh * ow];
        if let Some(b) = bias {
            out_c.iter_mut().for_each(|v| *v = b[c_out]);
        }
        for c_in in 0..ci {
            let x_c = &x[c_in * h * w..(c_in + 1) * h * w];
            let k_c = &k[((c_out * ci) + c_in) * kh * kw..((c_out * ci) + c_in + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k_c[ky * kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                        // valid ox range so that ix = ox*stride + kx - pad is in [0, w)
                        let (ox0, ox1) = ox_bounds(ow, w, stride, kx, pad);
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in ox0..ox1 {
                                out_row[ox] += kv * x_row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                out_row[ox] += kv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn ox_bounds(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // smallest ox with ox*stride + kx - pad >= 0
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    // largest ox with ox*stride + kx - pad <= w - 1
    let hi_num = w as isize - 1 - kx as isize + pad as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

/// Backward pass of `conv2d_fwd`. Accumulates into whichever of
/// `dx`/`dk`/`db` is provided.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: &[f32],
    co: usize,
    kh: usize,
    kw: usize,
    dy: &[f32],
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [f32]>,
    mut dk: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    if let Some(db) = db {
        for c_out in 0..co {
            let dy_c = &dy[c_out * oh * ow..(c_out + 1) * oh * ow];
            db[c_out] += dy_c.iter().sum::<f32>();
        }
    }
    for c_out in 0..co {
        let dy_c = &dy[c_out * oh * ow..(c_out + 1) * oh * ow];
        for c_in in 0..ci {
            let x_c = &x[c_in * h * w..(c_in + 1) * h * w];
            let k_base = ((c_out * ci) + c_in) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[k_base + ky * kw + kx];
                    let mut kgrad = 0.0f32;
                    let want_dx = dx.is_some();
                    let want_dk = dk.is_some();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let dy_row = &dy_c[oy * ow..(oy + 1) * ow];
                        let (ox0, ox1) = ox_bounds(ow, w, stride, kx, pad);
                        if want_dk {
                            let x_row = &x_c[row..row + w];
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                kgrad += x_row[ix as usize] * dy_row[ox];
                            }
                        }
                        if want_dx {
                            let dx_buf = dx.as_deref_mut().unwrap();
                            let dx_row = &mut dx_buf[c_in * h * w + row..c_in * h * w + row + w];
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                dx_row[ix as usize] += kv * dy_row[ox];
                            }
                        }
                    }
                    if let Some(dk_buf) = dk.as_deref_mut() {
                        dk_buf[k_base + ky * kw + kx] += kgrad;
                    }
                }
            }
        }
    }
}

/// Pooling over `[c, h, w]` with zero padding. Max-pool treats padded cells
/// as absent (never the argmax); avg-pool counts them as zeros in a fixed
/// `window*window` denominator. Returns the output plus, for max mode, the
/// flat input index chosen per output cell (first maximum in row-major scan).
#[allow(clippy::too_many_arguments)]
pub fn pool2d_fwd(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    mode: PoolMode,
    window: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = conv_out_dim(h, window, stride, pad);
    let ow = conv_out_dim(w, window, stride, pad);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = if mode == PoolMode::Max {
        vec![0u32; c * oh * ow]
    } else {
        Vec::new()
    };
    let denom = (window * window) as f32;
    for ch in 0..c {
        let x_c = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                let mut acc = 0.0f32;
                for wy in 0..window {
                    let iy = (oy * stride + wy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for wx in 0..window {
                        let ix = (ox * stride + wx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = x_c[idx];
                        match mode {
                            PoolMode::Max => {
                                if v > best {
                                    best = v;
                                    best_idx = (ch * h * w + idx) as u32;
                                }
                            }
                            PoolMode::Avg => acc += v,
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                match mode {
                    PoolMode::Max => {
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                    PoolMode::Avg => out[o] = acc / denom,
                }
            }
        }
    }
    (out, arg)
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_bwd(
    dy: &[f32],
    c: usize,
    h: usize,
    w: usize,
    mode: PoolMode,
    window: usize,
    stride: usize,
    pad: usize,
    argmax: &[u32],
    dx: &mut [f32],
) {
    let oh = conv_out_dim(h, window, stride, pad);
    let ow = conv_out_dim(w, window, stride, pad);
    let denom = (window * window) as f32;
    match mode {
        PoolMode::Max => {
            for (o, &g) in dy.iter().enumerate() {
                dx[argmax[o] as usize] += g;
            }
        }
        PoolMode::Avg => {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[ch * oh * ow + oy * ow + ox] / denom;
                        for wy in 0..window {
                            let iy = (oy * stride + wy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for wx in 0..window {
                                let ix = (ox * stride + wx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[ch * h * w + iy as usize * w + ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_1x1_identity_kernel_is_exact() {
        let x: Vec<f32> = (0..9).map(|v| v as f32 * 0.37 - 1.0).collect();
        let out = conv2d_fwd(&x, 1, 3, 3, &[1.0], 1, 1, 1, None, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_3x3_ones_sums_window() {
        let x = vec![1.0f32; 9];
        let k = vec![1.0f32; 9];
        let out = conv2d_fwd(&x, 1, 3, 3, &k, 1, 3, 3, None, 1, 0);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_stride2_pad1_dims() {
        let x = vec![0.5f32; 2 * 8 * 8];
        let k = vec![0.1f32; 3 * 2 * 9];
        let out = conv2d_fwd(&x, 2, 8, 8, &k, 3, 3, 3, None, 2, 1);
        assert_eq!(out.len(), 3 * 4 * 4);
    }

    #[test]
    fn max_pool_2x2_picks_max_and_avg_averages() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (mx, arg) = pool2d_fwd(&x, 1, 2, 2, PoolMode::Max, 2, 2, 0);
        assert_eq!(mx, vec![4.0]);
        assert_eq!(arg, vec![3]);
        let (av, _) = pool2d_fwd(&x, 1, 2, 2, PoolMode::Avg, 2, 2, 0);
        assert_eq!(av, vec![2.5]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_in_row_major_order() {
        let x = vec![7.0, 7.0, 7.0, 7.0];
        let (_, arg) = pool2d_fwd(&x, 1, 2, 2, PoolMode::Max, 2, 2, 0);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn shape_preserving_pool_with_pad() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let (out, _) = pool2d_fwd(&x, 1, 4, 4, PoolMode::Max, 3, 1, 1);
        assert_eq!(out.len(), 16);
        // center cell sees the full 3x3 neighborhood
        assert_eq!(out[5], 10.0);
        // corner ignores padded cells: max of the 2x2 corner block
        assert_eq!(out[0], 5.0);
    }
}
