//! Spatial ops on `[N, C, H, W]` tensors.
//!
//! `conv2d` lowers to a single GEMM per call: the input is unfolded into a
//! `[Cin*Kh*Kw, N*Ho*Wo]` patch matrix which the `[Cout, Cin*Kh*Kw]` kernel
//! multiplies from the left.
//! The patch matrix is rebuilt in the backward pass rather than kept alive
//! with the graph.

use crate::error::{shape_err, Result};
use crate::float::{gemm, Float, MatView};
use crate::tensor::{BackwardArgs, Tensor};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let r = g.rows();
    let mut cols = vec![T::zero(); g.patch() * r];
    let (h, w) = (g.h as isize, g.w as isize);
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * r..][..r];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut row[(n * g.ho + oy) * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let r = g.rows();
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let (h, w) = (g.h as isize, g.w as isize);
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * r..][..r];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        let src = &row[(n * g.ho + oy) * g.wo..][..g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, N*P]` to `[N, C, P]`.
fn cnp_to_ncp<T: Float>(m: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c * p);
    for b in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&m[(ch * n + b) * p..][..p]);
        }
    }
    out
}

/// `[N, C, P]` to `[C, N*P]`.
fn ncp_to_cnp<T: Float>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c * p);
    for ch in 0..c {
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

impl<T: Float> Tensor<T> {
    /// 2-D cross-correlation, `[N, Cin, H, W] * [Cout, Cin, Kh, Kw] -> [N, Cout, Ho, Wo]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be [N, Cin, H, W], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(shape_err("conv2d", format!("kernel must be [Cout, Cin, Kh, Kw], got {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels (input axis 1) = {} but kernel axis 1 expects {}", xs[1], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        if xs[2] + 2 * pad < ks[2] {
            return Err(shape_err(
                "conv2d",
                format!("height (axis 2) {} + 2*pad {} is smaller than kernel height {}", xs[2], pad, ks[2]),
            ));
        }
        if xs[3] + 2 * pad < ks[3] {
            return Err(shape_err(
                "conv2d",
                format!("width (axis 3) {} + 2*pad {} is smaller than kernel width {}", xs[3], pad, ks[3]),
            ));
        }
        let g = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ks[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ks[3]) / stride + 1,
        };
        let cols = im2col(&self.data(), &g);
        let mut out_cnp = vec![T::zero(); g.cout * g.rows()];
        gemm(
            &kernel.data(),
            MatView::dense(g.cout, g.patch()),
            &cols,
            MatView::dense(g.patch(), g.rows()),
            &mut out_cnp,
            MatView::dense(g.cout, g.rows()),
            false,
        );
        drop(cols);
        let p = g.ho * g.wo;
        let out = cnp_to_ncp(&out_cnp, g.n, g.cout, p);
        Ok(Tensor::from_op(
            vec![g.n, g.cout, g.ho, g.wo],
            out,
            "conv2d",
            vec![self.clone(), kernel.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let gcnp = ncp_to_cnp(a.grad_out, g.n, g.cout, p);
                let gx = a.needs[0].then(|| {
                    let mut gcols = vec![T::zero(); g.patch() * g.rows()];
                    gemm(
                        &a.inputs[1].data(),
                        MatView::dense(g.cout, g.patch()).transposed(),
                        &gcnp,
                        MatView::dense(g.cout, g.rows()),
                        &mut gcols,
                        MatView::dense(g.patch(), g.rows()),
                        false,
                    );
                    col2im(&gcols, &g)
                });
                let gk = a.needs[1].then(|| {
                    let cols = im2col(&a.inputs[0].data(), &g);
                    let mut gk = vec![T::zero(); g.cout * g.patch()];
                    gemm(
                        &gcnp,
                        MatView::dense(g.cout, g.rows()),
                        &cols,
                        MatView::dense(g.patch(), g.rows()).transposed(),
                        &mut gk,
                        MatView::dense(g.cout, g.patch()),
                        false,
                    );
                    gk
                });
                vec![gx, gk]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        if self.ndim() != 4 {
            return Err(shape_err("upsample2x", format!("expected [N, C, H, W], got {:?}", self.shape())));
        }
        let s = self.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); planes * h2 * w2];
        {
            let d = self.data();
            for p in 0..planes {
                for y in 0..h2 {
                    let src = &d[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                    let dst = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                    for (x, v) in dst.iter_mut().enumerate() {
                        *v = src[x / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![s[0], s[1], h2, w2],
            out,
            "upsample2x",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..h2 {
                        let src = &a.grad_out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                        let dst = &mut g[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                        for (x, &v) in src.iter().enumerate() {
                            dst[x / 2] = dst[x / 2] + v;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// 2x2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2x(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(shape_err("avg_pool2x", format!("expected [N, C, H, W] with even H, W, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); planes * h2 * w2];
        {
            let d = self.data();
            for p in 0..planes {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let i = (p * h + 2 * y) * w + 2 * x;
                        out[(p * h2 + y) * w2 + x] = (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![s[0], s[1], h2, w2],
            out,
            "avg_pool2x",
            vec![self.clone()],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let v = a.grad_out[(p * h2 + y) * w2 + x] * quarter;
                            let i = (p * h + 2 * y) * w + 2 * x;
                            g[i] = v;
                            g[i + 1] = v;
                            g[i + w] = v;
                            g[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
