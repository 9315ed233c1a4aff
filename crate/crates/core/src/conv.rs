//! 2-D convolution kernels (NCHW, zero padding) with their adjoints.
//!
//! Every output element is produced by exactly one thread with a fixed
//! summation order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Geometry {
    let (n, cin, h, w) = x.dims4();
    let (cout, cin_g, kh, kw) = weight.dims4();
    assert_eq!(cin, cin_g * spec.groups, "conv input channels vs weight/groups");
    assert_eq!(cout % spec.groups, 0, "conv output channels vs groups");
    Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        oh: spec.output_size(h, kh),
        ow: spec.output_size(w, kw),
    }
}

/// Range of output columns whose tap `offset` (in input coordinates, before
/// stride) lands inside `[0, size)`.
#[inline]
fn valid_range(out_len: usize, size: usize, stride: usize, offset: isize) -> (usize, usize) {
    // need 0 <= o*stride + offset < size
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = size as isize - offset;
    let hi = if hi_num <= 0 {
        0
    } else {
        ((hi_num as usize).div_ceil(stride)).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let g = geometry(x, weight, spec);
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let cout_g = g.cout / spec.groups;
    let xd = x.data();
    let wd = weight.data();
    let plane = g.oh * g.ow;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, oc) = (idx / g.cout, idx % g.cout);
            if let Some(bias) = bias {
                dst.fill(bias.data()[oc]);
            }
            let group = oc / cout_g;
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let src = &xd[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let row_off = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (y0, y1) = valid_range(g.oh, g.h, spec.stride, row_off);
                    for kx in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let col_off = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (x0, x1) = valid_range(g.ow, g.w, spec.stride, col_off);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * spec.stride) as isize + row_off;
                            let srow = &src[iy as usize * g.w..][..g.w];
                            let drow = &mut dst[oy * g.ow..][..g.ow];
                            if spec.stride == 1 {
                                let base = (x0 as isize + col_off) as usize;
                                for (d, s) in drow[x0..x1].iter_mut().zip(&srow[base..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = (ox * spec.stride) as isize + col_off;
                                    drow[ox] += wv * srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(d input, d weight, d bias)` for upstream gradient `dy`.
pub fn backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    spec: &ConvSpec,
) -> (Tensor, Tensor, Tensor) {
    let g = geometry(x, weight, spec);
    let cout_g = g.cout / spec.groups;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;

    let mut dx = Tensor::zeros(&[g.n, g.cin, g.h, g.w]);
    dx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, ic) = (idx / g.cin, idx % g.cin);
            let group = ic / g.cin_g;
            let icg = ic % g.cin_g;
            for oc in group * cout_g..(group + 1) * cout_g {
                let grad = &dyd[(b * g.cout + oc) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let row_off = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (y0, y1) = valid_range(g.oh, g.h, spec.stride, row_off);
                    for kx in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let col_off = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (x0, x1) = valid_range(g.ow, g.w, spec.stride, col_off);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = ((oy * spec.stride) as isize + row_off) as usize;
                            let grow = &grad[oy * g.ow..][..g.ow];
                            let drow = &mut dst[iy * g.w..][..g.w];
                            if spec.stride == 1 {
                                let base = (x0 as isize + col_off) as usize;
                                for (d, s) in drow[base..].iter_mut().zip(&grow[x0..x1]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = (ox * spec.stride) as isize + col_off;
                                    drow[ix as usize] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    let ksize = g.cin_g * g.kh * g.kw;
    let mut dw = Tensor::zeros(&[g.cout, g.cin_g, g.kh, g.kw]);
    let mut db = Tensor::zeros(&[g.cout]);
    dw.data_mut()
        .par_chunks_mut(ksize)
        .zip(db.data_mut().par_iter_mut())
        .enumerate()
        .for_each(|(oc, (dst, dbias))| {
            let group = oc / cout_g;
            let mut bsum = 0.0;
            for b in 0..g.n {
                let grad = &dyd[(b * g.cout + oc) * plane_out..][..plane_out];
                bsum += grad.iter().sum::<f64>();
                for icg in 0..g.cin_g {
                    let ic = group * g.cin_g + icg;
                    let src = &xd[(b * g.cin + ic) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        let row_off = (ky * spec.dilation) as isize - spec.padding as isize;
                        let (y0, y1) = valid_range(g.oh, g.h, spec.stride, row_off);
                        for kx in 0..g.kw {
                            let col_off = (kx * spec.dilation) as isize - spec.padding as isize;
                            let (x0, x1) = valid_range(g.ow, g.w, spec.stride, col_off);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = ((oy * spec.stride) as isize + row_off) as usize;
                                let grow = &grad[oy * g.ow..][..g.ow];
                                let srow = &src[iy * g.w..][..g.w];
                                if spec.stride == 1 {
                                    let base = (x0 as isize + col_off) as usize;
                                    for (a, s) in grow[x0..x1].iter().zip(&srow[base..]) {
                                        acc += a * s;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        let ix = (ox * spec.stride) as isize + col_off;
                                        acc += grow[ox] * srow[ix as usize];
                                    }
                                }
                            }
                            dst[(icg * g.kh + ky) * g.kw + kx] += acc;
                        }
                    }
                }
            }
            *dbias = bsum;
        });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution, used as the reference.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, s: &ConvSpec) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_g, kh, kw) = w.dims4();
        let oh = s.output_size(h, kh);
        let ow = s.output_size(wd, kw);
        let cout_g = cout / s.groups;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bi in 0..n {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s.stride + ky * s.dilation) as isize
                                        - s.padding as isize;
                                    let ix = (ox * s.stride + kx * s.dilation) as isize
                                        - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx]
                                        * x.data()
                                            [((bi * cin + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn forward_matches_naive_for_assorted_specs() {
        let specs = [
            (ConvSpec { stride: 1, padding: 1, dilation: 1, groups: 1 }, 4, 6, 3),
            (ConvSpec { stride: 2, padding: 3, dilation: 1, groups: 1 }, 1, 3, 7),
            (ConvSpec { stride: 1, padding: 6, dilation: 3, groups: 4 }, 4, 4, 5),
            (ConvSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }, 6, 2, 1),
        ];
        for (spec, cin, cout, k) in specs {
            let x = ramp(&[2, cin, 9, 11], 0.37);
            let w = ramp(&[cout, cin / spec.groups, k, k], 0.71);
            let b = ramp(&[cout], 1.3);
            let fast = forward(&x, &w, Some(&b), &spec);
            let slow = naive(&x, &w, &b, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{spec:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn kernel_wider_than_the_image() {
        let spec = ConvSpec::same(7, 3, 2);
        let x = ramp(&[1, 2, 2, 3], 0.4);
        let w = ramp(&[2, 1, 7, 7], 0.8);
        let b = ramp(&[2], 0.1);
        let fast = forward(&x, &w, Some(&b), &spec);
        let slow = naive(&x, &w, &b, &spec);
        assert_eq!(fast.data(), slow.data());
        let (dx, _, _) = backward(&x, &w, &fast, &spec);
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <conv(x), dy> must equal <x, dx> + <w, dw> + <b, db> for a bilinear map
        let spec = ConvSpec { stride: 2, padding: 2, dilation: 2, groups: 2 };
        let x = ramp(&[2, 4, 10, 9], 0.53);
        let w = ramp(&[6, 2, 3, 3], 0.29);
        let b = ramp(&[6], 0.9);
        let y = forward(&x, &w, None, &spec);
        let dy = ramp(y.shape(), 0.17);
        let (dx, dw, db) = backward(&x, &w, &dy, &spec);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        // conv is linear in x for fixed w and in w for fixed x, so both sides equal <y, dy>
        assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
        let (_, cout, oh, ow) = dy.dims4();
        for oc in 0..cout {
            let mut s = 0.0;
            for bi in 0..2 {
                s += dy.data()[(bi * cout + oc) * oh * ow..][..oh * ow].iter().sum::<f64>();
            }
            assert!((db.data()[oc] - s).abs() < 1e-12);
        }
        let _ = b;
    }
}
