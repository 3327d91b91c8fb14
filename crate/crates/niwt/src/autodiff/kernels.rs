//! Forward numeric kernels for the graph primitives. Direct loops, batch
//! dimension parallelized with rayon; every parallel write targets a disjoint
//! slice so results are bit-deterministic regardless of thread count.

use rayon::prelude::*;

pub fn conv2d_out_hw(in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let oh = (in_h + 2 * pad - k) / stride + 1;
    let ow = (in_w + 2 * pad - k) / stride + 1;
    (oh, ow)
}

/// Range of output positions whose tap `kx` stays inside `[0, extent)`:
/// pos * stride + kx - pad must be a valid input index.
#[inline]
fn valid_range(extent: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > kx {
        ((extent - 1 + pad - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one image into patch-major layout: row p = (ic, ky, kx) holds the
/// input value each output position reads through that filter tap (zero where
/// the tap falls in the padding). Shape [ci*k*k, oh*ow].
#[allow(clippy::too_many_arguments)]
fn im2col(
    xb: &[f64],
    ci: usize,
    h: usize,
    wid: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    col.fill(0.0);
    for ic in 0..ci {
        let xc = &xb[ic * h * wid..(ic + 1) * h * wid];
        for ky in 0..k {
            for kx in 0..k {
                let p = ic * k * k + ky * k + kx;
                let crow_all = &mut col[p * oh * ow..(p + 1) * oh * ow];
                let (lo, hi) = valid_range(wid, ow, kx, stride, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * wid..(iy as usize + 1) * wid];
                    let crow = &mut crow_all[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let xoff = lo + kx - pad;
                        crow[lo..hi].copy_from_slice(&xrow[xoff..xoff + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            crow[ox] = xrow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// x: [n, ci, h, w], w: [co, ci, k, k] -> [n, co, oh, ow]
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wid: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv2d_out_hw(h, wid, k, stride, pad);
    let mut out = vec![0.0; n * co * oh * ow];
    let in_img = ci * h * wid;
    let out_img = co * oh * ow;
    let taps = ci * k * k;
    let positions = oh * ow;
    out.par_chunks_mut(out_img)
        .zip(x.par_chunks(in_img))
        .for_each_init(
            || vec![0.0; taps * positions],
            |col, (yb, xb)| {
                im2col(xb, ci, h, wid, k, stride, pad, oh, ow, col);
                // y[oc] = W[oc] . col, accumulated tap-by-tap so each output
                // element sums its contributions in (ic, ky, kx) order.
                for oc in 0..co {
                    let wrow = &w[oc * taps..(oc + 1) * taps];
                    let yrow = &mut yb[oc * positions..(oc + 1) * positions];
                    for (p, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let crow = &col[p * positions..(p + 1) * positions];
                        for (y, &cv) in yrow.iter_mut().zip(crow) {
                            *y += wv * cv;
                        }
                    }
                }
            },
        );
    out
}

/// Gradient of conv2d output w.r.t. its input: scatter g through w.
/// g: [n, co, oh, ow], w: [co, ci, k, k] -> [n, ci, in_h, in_w]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_igrad(
    g: &[f64],
    w: &[f64],
    n: usize,
    co: usize,
    oh: usize,
    ow: usize,
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * ci * in_h * in_w];
    let g_img = co * oh * ow;
    let x_img = ci * in_h * in_w;
    let taps = ci * k * k;
    let positions = oh * ow;
    out.par_chunks_mut(x_img)
        .zip(g.par_chunks(g_img))
        .for_each_init(
            || vec![0.0; taps * positions],
            |col, (xb, gb)| {
                // colgrad[p] = sum_oc w[oc, p] * g[oc], then fold the patch
                // rows back onto the input (adjoint of im2col).
                col.fill(0.0);
                for oc in 0..co {
                    let wrow = &w[oc * taps..(oc + 1) * taps];
                    let grow = &gb[oc * positions..(oc + 1) * positions];
                    for (p, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let crow = &mut col[p * positions..(p + 1) * positions];
                        for (c, &gv) in crow.iter_mut().zip(grow) {
                            *c += wv * gv;
                        }
                    }
                }
                for ic in 0..ci {
                    let xc = &mut xb[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let p = ic * k * k + ky * k + kx;
                            let crow_all = &col[p * positions..(p + 1) * positions];
                            let (lo, hi) = valid_range(in_w, ow, kx, stride, pad);
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                let xrow =
                                    &mut xc[iy as usize * in_w..(iy as usize + 1) * in_w];
                                let crow = &crow_all[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let xoff = lo + kx - pad;
                                    for (x, &cv) in
                                        xrow[xoff..xoff + hi - lo].iter_mut().zip(&crow[lo..hi])
                                    {
                                        *x += cv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        xrow[ox * stride + kx - pad] += crow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            },
        );
    out
}

/// Gradient of conv2d output w.r.t. the filter bank.
/// x: [n, ci, h, w], g: [n, co, oh, ow] -> [co, ci, k, k]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_wgrad(
    x: &[f64],
    g: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wid: usize,
    co: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let taps = ci * k * k;
    let positions = oh * ow;
    let mut out = vec![0.0; co * taps];
    let x_img = ci * h * wid;
    let g_img = co * positions;
    // Batch summed sequentially in fixed order; channels parallel per image.
    let mut col = vec![0.0; taps * positions];
    for b in 0..n {
        let xb = &x[b * x_img..(b + 1) * x_img];
        let gb = &g[b * g_img..(b + 1) * g_img];
        im2col(xb, ci, h, wid, k, stride, pad, oh, ow, &mut col);
        out.par_chunks_mut(taps).enumerate().for_each(|(oc, wg)| {
            let grow = &gb[oc * positions..(oc + 1) * positions];
            for (p, w_acc) in wg.iter_mut().enumerate() {
                let crow = &col[p * positions..(p + 1) * positions];
                let mut acc = 0.0;
                for (&gv, &cv) in grow.iter().zip(crow) {
                    acc += gv * cv;
                }
                *w_acc += acc;
            }
        });
    }
    out
}

/// a: [m, k] x b: [k, n] -> [m, n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, kdim: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * kdim..(i + 1) * kdim];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// [n, c, h, w] -> [n, c] spatial mean.
pub fn gap(x: &[f64], nc: usize, hw: usize) -> Vec<f64> {
    let inv = 1.0 / hw as f64;
    (0..nc)
        .map(|i| x[i * hw..(i + 1) * hw].iter().sum::<f64>() * inv)
        .collect()
}

/// [n, c] -> [n, c, h, w] replication.
pub fn spatial_broadcast(x: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len() * hw];
    for (i, &v) in x.iter().enumerate() {
        out[i * hw..(i + 1) * hw].fill(v);
    }
    out
}

/// [n, c, h, w] -> [n, c, h/k, w/k] window means. h, w divisible by k.
pub fn avg_pool2d(x: &[f64], nc: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let oh = h / k;
    let ow = w / k;
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * oh * ow];
    for c in 0..nc {
        let xc = &x[c * h * w..(c + 1) * h * w];
        let yc = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xc[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                yc[oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

/// Adjoint of avg_pool2d: spread g/k^2 into each window cell.
pub fn avg_unpool2d(g: &[f64], nc: usize, oh: usize, ow: usize, k: usize) -> Vec<f64> {
    let h = oh * k;
    let w = ow * k;
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * h * w];
    for c in 0..nc {
        let gc = &g[c * oh * ow..(c + 1) * oh * ow];
        let xc = &mut out[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gc[oy * ow + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        xc[(oy * k + dy) * w + ox * k + dx] = v;
                    }
                }
            }
        }
    }
    out
}
