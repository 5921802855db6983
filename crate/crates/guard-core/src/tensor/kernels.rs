//! Forward kernels for the recorded primitive ops. Shape validation happens
//! in the op constructors; kernels assume conforming inputs.

use super::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// y[n,co,oh,ow] = sum_{ci,kh,kw} x[n,ci,oh*s+kh-p, ow*s+kw-p] * w[co,ci,kh,kw]
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (nb, ci, h, wd) = dims4(x);
    let (co, _, kh, kw) = dims4(w);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let xd = x.data();
    let wdt = w.data();
    let mut out = vec![0.0; nb * co * oh * ow];
    for n in 0..nb {
        for c_out in 0..co {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for krow in 0..kh {
                            let irow = (orow * stride + krow) as isize - pad as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            for kcol in 0..kw {
                                let icol = (ocol * stride + kcol) as isize - pad as isize;
                                if icol < 0 || icol >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c_in) * h + irow as usize) * wd + icol as usize;
                                let wi = ((c_out * ci + c_in) * kh + krow) * kw + kcol;
                                acc += xd[xi] * wdt[wi];
                            }
                        }
                    }
                    out[((n * co + c_out) * oh + orow) * ow + ocol] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, co, oh, ow], out)
}

/// Gradient of conv2d output w.r.t. its input: scatter of g through w.
pub fn conv2d_dx(g: &Tensor, w: &Tensor, stride: usize, pad: usize, x_shape: &[usize]) -> Tensor {
    let (nb, co, oh, ow) = dims4(g);
    let (_, ci, kh, kw) = dims4(w);
    let (h, wd) = (x_shape[2], x_shape[3]);
    let gd = g.data();
    let wdt = w.data();
    let mut out = vec![0.0; nb * ci * h * wd];
    for n in 0..nb {
        for c_out in 0..co {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let gv = gd[((n * co + c_out) * oh + orow) * ow + ocol];
                    if gv == 0.0 {
                        continue;
                    }
                    for c_in in 0..ci {
                        for krow in 0..kh {
                            let irow = (orow * stride + krow) as isize - pad as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            for kcol in 0..kw {
                                let icol = (ocol * stride + kcol) as isize - pad as isize;
                                if icol < 0 || icol >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c_in) * h + irow as usize) * wd + icol as usize;
                                let wi = ((c_out * ci + c_in) * kh + krow) * kw + kcol;
                                out[xi] += gv * wdt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

/// Gradient of conv2d output w.r.t. the kernel: correlation of g with x.
pub fn conv2d_dw(g: &Tensor, x: &Tensor, stride: usize, pad: usize, w_shape: &[usize]) -> Tensor {
    let (nb, co, oh, ow) = dims4(g);
    let (_, ci, h, wd) = dims4(x);
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let gd = g.data();
    let xd = x.data();
    let mut out = vec![0.0; co * ci * kh * kw];
    for n in 0..nb {
        for c_out in 0..co {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let gv = gd[((n * co + c_out) * oh + orow) * ow + ocol];
                    if gv == 0.0 {
                        continue;
                    }
                    for c_in in 0..ci {
                        for krow in 0..kh {
                            let irow = (orow * stride + krow) as isize - pad as isize;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            for kcol in 0..kw {
                                let icol = (ocol * stride + kcol) as isize - pad as isize;
                                if icol < 0 || icol >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c_in) * h + irow as usize) * wd + icol as usize;
                                let wi = ((c_out * ci + c_in) * kh + krow) * kw + kcol;
                                out[wi] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(w_shape.to_vec(), out)
}

/// Max pooling; also returns the flat input index of each window maximum
/// (first occurrence wins on ties, which keeps replay deterministic).
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (nb, c, h, w) = dims4(x);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; nb * c * oh * ow];
    let mut idx = vec![0usize; nb * c * oh * ow];
    for n in 0..nb {
        for ch in 0..c {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for krow in 0..k {
                        for kcol in 0..k {
                            let xi = ((n * c + ch) * h + orow * stride + krow) * w
                                + ocol * stride
                                + kcol;
                            if xd[xi] > best {
                                best = xd[xi];
                                best_i = xi;
                            }
                        }
                    }
                    let oi = ((n * c + ch) * oh + orow) * ow + ocol;
                    out[oi] = best;
                    idx[oi] = best_i;
                }
            }
        }
    }
    (Tensor::from_parts(vec![nb, c, oh, ow], out), idx)
}

pub fn max_unpool2d(g: &Tensor, indices: &[usize], x_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; super::numel_of(x_shape)];
    for (gi, &xi) in g.data().iter().zip(indices.iter()) {
        out[xi] += *gi;
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

pub fn index_gather(x: &Tensor, indices: &[usize], out_shape: &[usize]) -> Tensor {
    let xd = x.data();
    let out = indices.iter().map(|&i| xd[i]).collect();
    Tensor::from_parts(out_shape.to_vec(), out)
}

pub fn avgpool2d(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (nb, c, h, w) = dims4(x);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = vec![0.0; nb * c * oh * ow];
    for n in 0..nb {
        for ch in 0..c {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = 0.0;
                    for krow in 0..k {
                        for kcol in 0..k {
                            acc += xd[((n * c + ch) * h + orow * stride + krow) * w
                                + ocol * stride
                                + kcol];
                        }
                    }
                    out[((n * c + ch) * oh + orow) * ow + ocol] = acc * inv;
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, c, oh, ow], out)
}

pub fn avg_unpool2d(g: &Tensor, k: usize, stride: usize, x_shape: &[usize]) -> Tensor {
    let (nb, c, oh, ow) = dims4(g);
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = 1.0 / (k * k) as f64;
    let gd = g.data();
    let mut out = vec![0.0; super::numel_of(x_shape)];
    for n in 0..nb {
        for ch in 0..c {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let gv = gd[((n * c + ch) * oh + orow) * ow + ocol] * inv;
                    for krow in 0..k {
                        for kcol in 0..k {
                            out[((n * c + ch) * h + orow * stride + krow) * w
                                + ocol * stride
                                + kcol] += gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

pub fn row_sum(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let out = (0..n).map(|i| xd[i * c..(i + 1) * c].iter().sum()).collect();
    Tensor::from_parts(vec![n], out)
}

pub fn row_broadcast(v: &Tensor, c: usize) -> Tensor {
    let n = v.shape()[0];
    let vd = v.data();
    let mut out = Vec::with_capacity(n * c);
    for &val in vd.iter() {
        out.extend(std::iter::repeat(val).take(c));
    }
    Tensor::from_parts(vec![n, c], out)
}

pub fn gather_label(x: &Tensor, labels: &[usize]) -> Tensor {
    let c = x.shape()[1];
    let xd = x.data();
    let out = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| xd[i * c + y])
        .collect();
    Tensor::from_parts(vec![labels.len()], out)
}

pub fn scatter_label(v: &Tensor, labels: &[usize], c: usize) -> Tensor {
    let n = v.shape()[0];
    let vd = v.data();
    let mut out = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        out[i * c + y] = vd[i];
    }
    Tensor::from_parts(vec![n, c], out)
}

/// Sum over every axis except axis 1 (the channel/feature axis).
pub fn channel_sum(x: &Tensor) -> Tensor {
    let c = x.shape()[1];
    let n = x.shape()[0];
    let spatial = super::numel_of(&x.shape()[2..]);
    let xd = x.data();
    let mut out = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            out[ch] += xd[base..base + spatial].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![c], out)
}

pub fn channel_broadcast(v: &Tensor, shape: &[usize]) -> Tensor {
    let c = shape[1];
    let n = shape[0];
    let spatial = super::numel_of(&shape[2..]);
    let vd = v.data();
    let mut out = vec![0.0; n * c * spatial];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            out[base..base + spatial].fill(vd[ch]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Forward difference along rows: y[..,h,..] = x[..,h+1,..] - x[..,h,..].
pub fn diff_rows(x: &Tensor) -> Tensor {
    let (nb, c, h, w) = dims4(x);
    let xd = x.data();
    let mut out = vec![0.0; nb * c * (h - 1) * w];
    for n in 0..nb {
        for ch in 0..c {
            for row in 0..h - 1 {
                for col in 0..w {
                    out[((n * c + ch) * (h - 1) + row) * w + col] = xd
                        [((n * c + ch) * h + row + 1) * w + col]
                        - xd[((n * c + ch) * h + row) * w + col];
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, c, h - 1, w], out)
}

pub fn diff_rows_adj(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (nb, c, hm1, w) = dims4(g);
    let h = x_shape[2];
    debug_assert_eq!(hm1 + 1, h);
    let gd = g.data();
    let mut out = vec![0.0; super::numel_of(x_shape)];
    for n in 0..nb {
        for ch in 0..c {
            for row in 0..hm1 {
                for col in 0..w {
                    let gv = gd[((n * c + ch) * hm1 + row) * w + col];
                    out[((n * c + ch) * h + row + 1) * w + col] += gv;
                    out[((n * c + ch) * h + row) * w + col] -= gv;
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

pub fn diff_cols(x: &Tensor) -> Tensor {
    let (nb, c, h, w) = dims4(x);
    let xd = x.data();
    let mut out = vec![0.0; nb * c * h * (w - 1)];
    for n in 0..nb {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w - 1 {
                    out[((n * c + ch) * h + row) * (w - 1) + col] =
                        xd[((n * c + ch) * h + row) * w + col + 1]
                            - xd[((n * c + ch) * h + row) * w + col];
                }
            }
        }
    }
    Tensor::from_parts(vec![nb, c, h, w - 1], out)
}

pub fn diff_cols_adj(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (nb, c, h, wm1) = dims4(g);
    let w = x_shape[3];
    debug_assert_eq!(wm1 + 1, w);
    let gd = g.data();
    let mut out = vec![0.0; super::numel_of(x_shape)];
    for n in 0..nb {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..wm1 {
                    let gv = gd[((n * c + ch) * h + row) * wm1 + col];
                    out[((n * c + ch) * h + row) * w + col + 1] += gv;
                    out[((n * c + ch) * h + row) * w + col] -= gv;
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
