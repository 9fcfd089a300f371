use alloc::vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Depthwise causal convolution over time.
///
/// `x: [B, T, C]`, `kernel: [C, W]`, `bias: [C]`;
/// `y[b,t,c] = bias[c] + sum_w kernel[c,w] * x[b, t-(W-1)+w, c]`, with
/// positions before the start treated as zero.
pub fn causal_depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 2 || kernel.dim(0) != x.dim(2) || bias.shape() != [x.dim(2)] {
        return Err(shape_err("causal_depthwise_conv1d", x.shape(), kernel.shape()));
    }
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let w = kernel.dim(1);
    if w == 0 {
        return Err(Error::InvalidArgument("convolution width must be >= 1".into()));
    }
    let mut out = vec![0.0; b * t * c];
    {
        let xd = x.data();
        let kd = kernel.data();
        let bd = bias.data();
        for bi in 0..b {
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                o.copy_from_slice(&bd);
                for wi in 0..w {
                    let Some(src) = (ti + wi).checked_sub(w - 1) else { continue };
                    let xs = &xd[(bi * t + src) * c..(bi * t + src + 1) * c];
                    for ci in 0..c {
                        o[ci] += kd[ci * w + wi] * xs[ci];
                    }
                }
            }
        }
    }
    let (x_t, k_t) = (x.clone(), kernel.clone());
    Ok(Tensor::from_op(
        out,
        vec![b, t, c],
        vec![x.clone(), kernel.clone(), bias.clone()],
        move |g| {
            let xd = x_t.data();
            let kd = k_t.data();
            let mut gx = vec![0.0; b * t * c];
            let mut gk = vec![0.0; c * w];
            let mut gb = vec![0.0; c];
            for bi in 0..b {
                for ti in 0..t {
                    let go = &g[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                    for ci in 0..c {
                        gb[ci] += go[ci];
                    }
                    for wi in 0..w {
                        let Some(src) = (ti + wi).checked_sub(w - 1) else { continue };
                        let base = (bi * t + src) * c;
                        for ci in 0..c {
                            gk[ci * w + wi] += go[ci] * xd[base + ci];
                            gx[base + ci] += go[ci] * kd[ci * w + wi];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk), Some(gb)]
        },
    ))
}

/// Output length of a strided convolution with symmetric zero padding.
pub fn conv2d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if len + 2 * pad < kernel {
        0
    } else {
        (len + 2 * pad - kernel) / stride + 1
    }
}

/// Plain 2-D convolution. `x: [B, Cin, H, W]`, `weight: [Cout, Cin, KH, KW]`,
/// `bias: [Cout]`, same stride and zero padding on both spatial axes.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || bias.shape() != [weight.dim(0)] {
        return Err(shape_err("conv2d", x.shape(), weight.shape()));
    }
    let (b, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    let oh = conv2d_out_len(h, kh, stride, pad);
    let ow = conv2d_out_len(wd, kw, stride, pad);
    if oh == 0 || ow == 0 || stride == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "conv2d input {:?} too small for kernel {}x{}",
            x.shape(),
            kh,
            kw
        )));
    }
    // (output position, input position) pairs per axis
    let taps = |olen: usize, ilen: usize, k: usize| {
        let mut v = alloc::vec::Vec::with_capacity(olen * k);
        for o in 0..olen {
            for ki in 0..k {
                let pos = (o * stride + ki) as isize - pad as isize;
                v.push(if pos >= 0 && (pos as usize) < ilen { Some(pos as usize) } else { None });
            }
        }
        v
    };
    let th = taps(oh, h, kh);
    let tw = taps(ow, wd, kw);
    let mut out = vec![0.0; b * cout * oh * ow];
    {
        let xd = x.data();
        let wdat = weight.data();
        let bd = bias.data();
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = bd[co];
                        for ci in 0..cin {
                            let ibase = (bi * cin + ci) * h * wd;
                            let wbase = (co * cin + ci) * kh * kw;
                            for ki in 0..kh {
                                let Some(iy) = th[y * kh + ki] else { continue };
                                for kj in 0..kw {
                                    let Some(ix) = tw[xo * kw + kj] else { continue };
                                    s += wdat[wbase + ki * kw + kj] * xd[ibase + iy * wd + ix];
                                }
                            }
                        }
                        out[obase + y * ow + xo] = s;
                    }
                }
            }
        }
    }
    let (x_t, w_t) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![b, cout, oh, ow],
        vec![x.clone(), weight.clone(), bias.clone()],
        move |g| {
            let xd = x_t.data();
            let wdat = w_t.data();
            let mut gx = x_t.requires_grad().then(|| vec![0.0; xd.len()]);
            let mut gw = vec![0.0; wdat.len()];
            let mut gb = vec![0.0; cout];
            for bi in 0..b {
                for co in 0..cout {
                    let obase = (bi * cout + co) * oh * ow;
                    for y in 0..oh {
                        for xo in 0..ow {
                            let go = g[obase + y * ow + xo];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for ci in 0..cin {
                                let ibase = (bi * cin + ci) * h * wd;
                                let wbase = (co * cin + ci) * kh * kw;
                                for ki in 0..kh {
                                    let Some(iy) = th[y * kh + ki] else { continue };
                                    for kj in 0..kw {
                                        let Some(ix) = tw[xo * kw + kj] else { continue };
                                        gw[wbase + ki * kw + kj] += go * xd[ibase + iy * wd + ix];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[ibase + iy * wd + ix] += go * wdat[wbase + ki * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, Some(gw), Some(gb)]
        },
    ))
}
