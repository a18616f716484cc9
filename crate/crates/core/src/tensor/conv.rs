//! Convolution, pooling, and upsampling kernels.
//!
//! Convolutions lower to im2col plus one matrix product. The backward pass
//! recomputes the column matrix instead of caching it, trading a little time
//! for a much smaller peak footprint while a tape is alive.

use ndarray::{Array2, ArrayView2, IxDyn};

use super::Arr;

#[derive(Debug, Clone)]
pub(crate) struct Conv2dSpec {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dSpec {
    pub fn infer(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be (N, C, H, W)");
        assert_eq!(w.len(), 4, "conv2d weight must be (O, C, KH, KW)");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        assert!(stride > 0);
        let (h, ww) = (x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        assert!(h + 2 * pad >= kh && ww + 2 * pad >= kw, "kernel larger than input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w: ww,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (ww + 2 * pad - kw) / stride + 1,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv3dSpec {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    pub ot: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv3dSpec {
    pub fn infer(x: &[usize], w: &[usize], stride: (usize, usize, usize), pad: (usize, usize, usize)) -> Self {
        assert_eq!(x.len(), 5, "conv3d input must be (N, C, T, H, W)");
        assert_eq!(w.len(), 5, "conv3d weight must be (O, C, KT, KH, KW)");
        assert_eq!(x[1], w[1], "conv3d channel mismatch");
        assert!(stride.0 > 0 && stride.1 > 0 && stride.2 > 0);
        let (t, h, ww) = (x[2], x[3], x[4]);
        let (kt, kh, kw) = (w[2], w[3], w[4]);
        assert!(
            t + 2 * pad.0 >= kt && h + 2 * pad.1 >= kh && ww + 2 * pad.2 >= kw,
            "kernel larger than input"
        );
        Self {
            n: x[0],
            c: x[1],
            t,
            h,
            w: ww,
            o: w[0],
            kt,
            kh,
            kw,
            stride,
            pad,
            ot: (t + 2 * pad.0 - kt) / stride.0 + 1,
            oh: (h + 2 * pad.1 - kh) / stride.1 + 1,
            ow: (ww + 2 * pad.2 - kw) / stride.2 + 1,
        }
    }
}

fn im2col2d(x: &Arr, s: &Conv2dSpec) -> Array2<f64> {
    let xs = x.as_slice().expect("conv input must be contiguous");
    let ckk = s.c * s.kh * s.kw;
    let mut col = Array2::<f64>::zeros((s.n * s.oh * s.ow, ckk));
    let cs = col.as_slice_mut().unwrap();
    for n in 0..s.n {
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let row = (n * s.oh + oy) * s.ow + ox;
                let dst = &mut cs[row * ckk..(row + 1) * ckk];
                let mut k = 0;
                for c in 0..s.c {
                    let xbase = (n * s.c + c) * s.h * s.w;
                    for ky in 0..s.kh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy >= 0 && (iy as usize) < s.h {
                            let rowbase = xbase + iy as usize * s.w;
                            for kx in 0..s.kw {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix >= 0 && (ix as usize) < s.w {
                                    dst[k] = xs[rowbase + ix as usize];
                                }
                                k += 1;
                            }
                        } else {
                            k += s.kw;
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im2d(dcol: &Array2<f64>, s: &Conv2dSpec) -> Arr {
    let mut dx = vec![0.0; s.n * s.c * s.h * s.w];
    let ckk = s.c * s.kh * s.kw;
    let ds = dcol.as_slice().unwrap();
    for n in 0..s.n {
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let row = (n * s.oh + oy) * s.ow + ox;
                let src = &ds[row * ckk..(row + 1) * ckk];
                let mut k = 0;
                for c in 0..s.c {
                    let xbase = (n * s.c + c) * s.h * s.w;
                    for ky in 0..s.kh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy >= 0 && (iy as usize) < s.h {
                            let rowbase = xbase + iy as usize * s.w;
                            for kx in 0..s.kw {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix >= 0 && (ix as usize) < s.w {
                                    dx[rowbase + ix as usize] += src[k];
                                }
                                k += 1;
                            }
                        } else {
                            k += s.kw;
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[s.n, s.c, s.h, s.w]), dx).unwrap()
}

pub(crate) fn conv2d_fwd(x: &Arr, w: &Arr, b: &Arr, s: &Conv2dSpec) -> Arr {
    let col = im2col2d(x, s);
    let ckk = s.c * s.kh * s.kw;
    let wmat = ArrayView2::from_shape((s.o, ckk), w.as_slice().unwrap()).unwrap();
    let ymat = col.dot(&wmat.t());
    let bs = b.as_slice().unwrap();
    let ys = ymat.as_slice().unwrap();
    let mut out = vec![0.0; s.n * s.o * s.oh * s.ow];
    for n in 0..s.n {
        for o in 0..s.o {
            let obase = (n * s.o + o) * s.oh * s.ow;
            for p in 0..s.oh * s.ow {
                out[obase + p] = ys[(n * s.oh * s.ow + p) * s.o + o] + bs[o];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[s.n, s.o, s.oh, s.ow]), out).unwrap()
}

pub(crate) fn conv2d_bwd(
    g: &Arr,
    x: &Arr,
    w: &Arr,
    s: &Conv2dSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let gs = g.as_slice().unwrap();
    let hw = s.oh * s.ow;
    let mut gmat = Array2::<f64>::zeros((s.n * hw, s.o));
    {
        let gm = gmat.as_slice_mut().unwrap();
        for n in 0..s.n {
            for o in 0..s.o {
                let obase = (n * s.o + o) * hw;
                for p in 0..hw {
                    gm[(n * hw + p) * s.o + o] = gs[obase + p];
                }
            }
        }
    }
    let db = need_db.then(|| {
        let v = gmat.sum_axis(ndarray::Axis(0));
        Arr::from_shape_vec(IxDyn(&[s.o]), v.to_vec()).unwrap()
    });
    let dw = need_dw.then(|| {
        let col = im2col2d(x, s);
        let dwmat = gmat.t().dot(&col);
        dwmat
            .into_dyn()
            .into_shape_with_order(IxDyn(&[s.o, s.c, s.kh, s.kw]))
            .unwrap()
    });
    let dx = need_dx.then(|| {
        let ckk = s.c * s.kh * s.kw;
        let wmat = ArrayView2::from_shape((s.o, ckk), w.as_slice().unwrap()).unwrap();
        let dcol = gmat.dot(&wmat);
        col2im2d(&dcol, s)
    });
    (dx, dw, db)
}

fn im2col3d(x: &Arr, s: &Conv3dSpec) -> Array2<f64> {
    let xs = x.as_slice().expect("conv input must be contiguous");
    let ckkk = s.c * s.kt * s.kh * s.kw;
    let rows = s.n * s.ot * s.oh * s.ow;
    let mut col = Array2::<f64>::zeros((rows, ckkk));
    let cs = col.as_slice_mut().unwrap();
    let thw = s.t * s.h * s.w;
    for n in 0..s.n {
        for ot in 0..s.ot {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let row = ((n * s.ot + ot) * s.oh + oy) * s.ow + ox;
                    let dst = &mut cs[row * ckkk..(row + 1) * ckkk];
                    let mut k = 0;
                    for c in 0..s.c {
                        let xbase = (n * s.c + c) * thw;
                        for kt in 0..s.kt {
                            let it = (ot * s.stride.0 + kt) as isize - s.pad.0 as isize;
                            if it < 0 || it as usize >= s.t {
                                k += s.kh * s.kw;
                                continue;
                            }
                            let tbase = xbase + it as usize * s.h * s.w;
                            for ky in 0..s.kh {
                                let iy = (oy * s.stride.1 + ky) as isize - s.pad.1 as isize;
                                if iy >= 0 && (iy as usize) < s.h {
                                    let rowbase = tbase + iy as usize * s.w;
                                    for kx in 0..s.kw {
                                        let ix =
                                            (ox * s.stride.2 + kx) as isize - s.pad.2 as isize;
                                        if ix >= 0 && (ix as usize) < s.w {
                                            dst[k] = xs[rowbase + ix as usize];
                                        }
                                        k += 1;
                                    }
                                } else {
                                    k += s.kw;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im3d(dcol: &Array2<f64>, s: &Conv3dSpec) -> Arr {
    let mut dx = vec![0.0; s.n * s.c * s.t * s.h * s.w];
    let ckkk = s.c * s.kt * s.kh * s.kw;
    let ds = dcol.as_slice().unwrap();
    let thw = s.t * s.h * s.w;
    for n in 0..s.n {
        for ot in 0..s.ot {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let row = ((n * s.ot + ot) * s.oh + oy) * s.ow + ox;
                    let src = &ds[row * ckkk..(row + 1) * ckkk];
                    let mut k = 0;
                    for c in 0..s.c {
                        let xbase = (n * s.c + c) * thw;
                        for kt in 0..s.kt {
                            let it = (ot * s.stride.0 + kt) as isize - s.pad.0 as isize;
                            if it < 0 || it as usize >= s.t {
                                k += s.kh * s.kw;
                                continue;
                            }
                            let tbase = xbase + it as usize * s.h * s.w;
                            for ky in 0..s.kh {
                                let iy = (oy * s.stride.1 + ky) as isize - s.pad.1 as isize;
                                if iy >= 0 && (iy as usize) < s.h {
                                    let rowbase = tbase + iy as usize * s.w;
                                    for kx in 0..s.kw {
                                        let ix =
                                            (ox * s.stride.2 + kx) as isize - s.pad.2 as isize;
                                        if ix >= 0 && (ix as usize) < s.w {
                                            dx[rowbase + ix as usize] += src[k];
                                        }
                                        k += 1;
                                    }
                                } else {
                                    k += s.kw;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[s.n, s.c, s.t, s.h, s.w]), dx).unwrap()
}

pub(crate) fn conv3d_fwd(x: &Arr, w: &Arr, b: &Arr, s: &Conv3dSpec) -> Arr {
    let col = im2col3d(x, s);
    let ckkk = s.c * s.kt * s.kh * s.kw;
    let wmat = ArrayView2::from_shape((s.o, ckkk), w.as_slice().unwrap()).unwrap();
    let ymat = col.dot(&wmat.t());
    let bs = b.as_slice().unwrap();
    let ys = ymat.as_slice().unwrap();
    let ohw = s.ot * s.oh * s.ow;
    let mut out = vec![0.0; s.n * s.o * ohw];
    for n in 0..s.n {
        for o in 0..s.o {
            let obase = (n * s.o + o) * ohw;
            for p in 0..ohw {
                out[obase + p] = ys[(n * ohw + p) * s.o + o] + bs[o];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[s.n, s.o, s.ot, s.oh, s.ow]), out).unwrap()
}

pub(crate) fn conv3d_bwd(
    g: &Arr,
    x: &Arr,
    w: &Arr,
    s: &Conv3dSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let gs = g.as_slice().unwrap();
    let ohw = s.ot * s.oh * s.ow;
    let mut gmat = Array2::<f64>::zeros((s.n * ohw, s.o));
    {
        let gm = gmat.as_slice_mut().unwrap();
        for n in 0..s.n {
            for o in 0..s.o {
                let obase = (n * s.o + o) * ohw;
                for p in 0..ohw {
                    gm[(n * ohw + p) * s.o + o] = gs[obase + p];
                }
            }
        }
    }
    let db = need_db.then(|| {
        let v = gmat.sum_axis(ndarray::Axis(0));
        Arr::from_shape_vec(IxDyn(&[s.o]), v.to_vec()).unwrap()
    });
    let dw = need_dw.then(|| {
        let col = im2col3d(x, s);
        let dwmat = gmat.t().dot(&col);
        dwmat
            .into_dyn()
            .into_shape_with_order(IxDyn(&[s.o, s.c, s.kt, s.kh, s.kw]))
            .unwrap()
    });
    let dx = need_dx.then(|| {
        let ckkk = s.c * s.kt * s.kh * s.kw;
        let wmat = ArrayView2::from_shape((s.o, ckkk), w.as_slice().unwrap()).unwrap();
        let dcol = gmat.dot(&wmat);
        col2im3d(&dcol, s)
    });
    (dx, dw, db)
}

pub(crate) fn avg_pool2d_fwd(x: &Arr, k: usize) -> Arr {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "avg_pool2d expects (N, C, H, W)");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(h % k == 0 && w % k == 0, "pool size must divide input");
    let (oh, ow) = (h / k, w / k);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; n * c * oh * ow];
    let inv = 1.0 / (k * k) as f64;
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let base = (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        acc += src[base + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
}

pub(crate) fn avg_pool2d_bwd(g: &Arr, x_shape: &[usize], k: usize) -> Arr {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let gs = g.as_slice().unwrap();
    let mut dx = vec![0.0; n * c * h * w];
    let inv = 1.0 / (k * k) as f64;
    for nc in 0..n * c {
        let src = &gs[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = src[oy * ow + ox] * inv;
                for dy in 0..k {
                    let base = (oy * k + dy) * w + ox * k;
                    for dxk in 0..k {
                        dst[base + dxk] += gv;
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
}

pub(crate) fn upsample2x_fwd(x: &Arr) -> Arr {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "upsample2x expects (N, C, H, W)");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for nc in 0..n * c {
        let src = &xs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let b = 2 * y * 2 * w + 2 * x;
                dst[b] = v;
                dst[b + 1] = v;
                dst[b + 2 * w] = v;
                dst[b + 2 * w + 1] = v;
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap()
}

pub(crate) fn upsample2x_bwd(g: &Arr) -> Arr {
    let sh = g.shape();
    let (n, c, gh, gw) = (sh[0], sh[1], sh[2], sh[3]);
    let (h, w) = (gh / 2, gw / 2);
    let gs = g.as_slice().unwrap();
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let src = &gs[nc * gh * gw..(nc + 1) * gh * gw];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let b = 2 * y * gw + 2 * x;
                dst[y * w + x] = src[b] + src[b + 1] + src[b + gw] + src[b + gw + 1];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::super::{rng_for, Arr};
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_arr(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Arr::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Direct nested-loop convolution, the reference the im2col path must match.
    fn naive_conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
        let s = Conv2dSpec::infer(x.shape(), w.shape(), stride, pad);
        let mut out = Arr::zeros(IxDyn(&[s.n, s.o, s.oh, s.ow]));
        for n in 0..s.n {
            for o in 0..s.o {
                for oy in 0..s.oh {
                    for ox in 0..s.ow {
                        let mut acc = b[[o]];
                        for c in 0..s.c {
                            for ky in 0..s.kh {
                                for kx in 0..s.kw {
                                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < s.h
                                        && (ix as usize) < s.w
                                    {
                                        acc += x[[n, c, iy as usize, ix as usize]]
                                            * w[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[n, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn naive_conv3d(
        x: &Arr,
        w: &Arr,
        b: &Arr,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Arr {
        let s = Conv3dSpec::infer(x.shape(), w.shape(), stride, pad);
        let mut out = Arr::zeros(IxDyn(&[s.n, s.o, s.ot, s.oh, s.ow]));
        for n in 0..s.n {
            for o in 0..s.o {
                for ot in 0..s.ot {
                    for oy in 0..s.oh {
                        for ox in 0..s.ow {
                            let mut acc = b[[o]];
                            for c in 0..s.c {
                                for kt in 0..s.kt {
                                    for ky in 0..s.kh {
                                        for kx in 0..s.kw {
                                            let it =
                                                (ot * s.stride.0 + kt) as isize - s.pad.0 as isize;
                                            let iy =
                                                (oy * s.stride.1 + ky) as isize - s.pad.1 as isize;
                                            let ix =
                                                (ox * s.stride.2 + kx) as isize - s.pad.2 as isize;
                                            if it >= 0
                                                && iy >= 0
                                                && ix >= 0
                                                && (it as usize) < s.t
                                                && (iy as usize) < s.h
                                                && (ix as usize) < s.w
                                            {
                                                acc += x[[
                                                    n,
                                                    c,
                                                    it as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                ]] * w[[o, c, kt, ky, kx]];
                                            }
                                        }
                                    }
                                }
                            }
                            out[[n, o, ot, oy, ox]] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = rng_for(11, "conv2d-oracle");
        for &(stride, pad, h) in &[(1usize, 1usize, 6usize), (2, 1, 6), (1, 0, 5), (2, 2, 7)] {
            let x = rand_arr(&[2, 3, h, h + 1], &mut rng);
            let w = rand_arr(&[4, 3, 3, 3], &mut rng);
            let b = rand_arr(&[4], &mut rng);
            let s = Conv2dSpec::infer(x.shape(), w.shape(), stride, pad);
            let got = conv2d_fwd(&x, &w, &b, &s);
            let want = naive_conv2d(&x, &w, &b, stride, pad);
            let diff = (&got - &want).mapv(f64::abs).sum();
            assert!(diff < 1e-10, "stride={stride} pad={pad}: diff={diff}");
        }
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let mut rng = rng_for(13, "conv3d-oracle");
        for &(stride, pad) in &[
            ((1usize, 1usize, 1usize), (1usize, 1usize, 1usize)),
            ((1, 2, 2), (1, 1, 1)),
            ((2, 2, 2), (0, 1, 1)),
        ] {
            let x = rand_arr(&[2, 2, 4, 5, 6], &mut rng);
            let w = rand_arr(&[3, 2, 3, 3, 3], &mut rng);
            let b = rand_arr(&[3], &mut rng);
            let s = Conv3dSpec::infer(x.shape(), w.shape(), stride, pad);
            let got = conv3d_fwd(&x, &w, &b, &s);
            let want = naive_conv3d(&x, &w, &b, stride, pad);
            let diff = (&got - &want).mapv(f64::abs).sum();
            assert!(diff < 1e-10, "stride={stride:?} pad={pad:?}: diff={diff}");
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_values() {
        let x = Arr::from_shape_vec(
            IxDyn(&[1, 1, 2, 2]),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let p = avg_pool2d_fwd(&x, 2);
        assert_eq!(p.shape(), &[1, 1, 1, 1]);
        assert!((p[[0, 0, 0, 0]] - 2.5).abs() < 1e-12);
        let u = upsample2x_fwd(&x);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u[[0, 0, 0, 1]], 1.0);
        assert_eq!(u[[0, 0, 3, 2]], 4.0);
    }
}
