//! 2-D convolution via im2col + matrix multiply.

use super::{Batch, ParamRef};
use ndarray::{Array1, Array2, Array4};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    w: Array4<f64>,
    b: Array1<f64>,
    gw: Array4<f64>,
    gb: Array1<f64>,
    // forward caches for backward
    cols: Option<Array2<f64>>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        // He-uniform initialization
        let fan_in = (in_c * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((out_c, in_c, kernel, kernel), |_| {
            rng.random_range(-limit..limit)
        });
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            w,
            b: Array1::zeros(out_c),
            gw: Array4::zeros((out_c, in_c, kernel, kernel)),
            gb: Array1::zeros(out_c),
            cols: None,
            in_shape: (0, 0, 0, 0),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Column matrix, shape `(n*oh*ow, in_c*k*k)`.
    fn im2col(&self, x: &Batch) -> Array2<f64> {
        let (n, cin, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let ck2 = cin * k * k;
        let mut cols = Array2::<f64>::zeros((n * oh * ow, ck2));
        let xs = x.as_slice().expect("input batch is contiguous");
        let cs = cols.as_slice_mut().expect("freshly allocated");
        for ni in 0..n {
            for oy in 0..oh {
                let iy0 = (oy * self.stride) as isize - self.pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let row = ((ni * oh + oy) * ow + ox) * ck2;
                    for ci in 0..cin {
                        let plane = (ni * cin + ci) * h * w;
                        let base = row + ci * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = plane + iy as usize * w;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[base + ky * k + kx] = xs[line + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let ck2 = cin * k * k;
        let cols = self.im2col(x);
        let wmat = self
            .w
            .view()
            .into_shape_with_order((self.out_c, ck2))
            .expect("weights contiguous");
        // (n*oh*ow, ck2) x (ck2, out_c)
        let out_mat = cols.dot(&wmat.t());
        let mut out = Array4::<f64>::zeros((n, self.out_c, oh, ow));
        {
            let os = out.as_slice_mut().expect("freshly allocated");
            let om = out_mat.as_slice().expect("dot output contiguous");
            for ni in 0..n {
                for co in 0..self.out_c {
                    let bias = self.b[co];
                    let dst = (ni * self.out_c + co) * oh * ow;
                    for p in 0..oh * ow {
                        os[dst + p] = om[((ni * oh * ow) + p) * self.out_c + co] + bias;
                    }
                }
            }
        }
        self.in_shape = (n, cin, h, w);
        self.cols = if train { Some(cols) } else { None };
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let (n, cout, oh, ow) = grad.dim();
        assert_eq!(cout, self.out_c, "conv grad channels");
        let (_, cin, h, w) = self.in_shape;
        let k = self.kernel;
        let ck2 = cin * k * k;
        let cols = self.cols.take().expect("forward(train=true) before backward");

        // reorder grad to (n*oh*ow, out_c)
        let mut gmat = Array2::<f64>::zeros((n * oh * ow, cout));
        {
            let gs = grad.as_slice().expect("grad contiguous");
            let gm = gmat.as_slice_mut().expect("freshly allocated");
            for ni in 0..n {
                for co in 0..cout {
                    let src = (ni * cout + co) * oh * ow;
                    for p in 0..oh * ow {
                        gm[((ni * oh * ow) + p) * cout + co] = gs[src + p];
                    }
                }
            }
        }

        // parameter gradients
        let gw_mat = gmat.t().dot(&cols); // (out_c, ck2)
        let gw_view = gw_mat
            .into_shape_with_order((self.out_c, cin, k, k))
            .expect("shape matches");
        self.gw += &gw_view;
        for co in 0..cout {
            self.gb[co] += gmat.column(co).sum();
        }

        // input gradient via col2im
        let gcols = gmat.dot(
            &self
                .w
                .view()
                .into_shape_with_order((self.out_c, ck2))
                .expect("weights contiguous"),
        ); // (n*oh*ow, ck2)
        let mut gx = Array4::<f64>::zeros((n, cin, h, w));
        {
            let gc = gcols.as_slice().expect("dot output contiguous");
            let gxs = gx.as_slice_mut().expect("freshly allocated");
            for ni in 0..n {
                for oy in 0..oh {
                    let iy0 = (oy * self.stride) as isize - self.pad as isize;
                    for ox in 0..ow {
                        let ix0 = (ox * self.stride) as isize - self.pad as isize;
                        let row = ((ni * oh + oy) * ow + ox) * ck2;
                        for ci in 0..cin {
                            let plane = (ni * cin + ci) * h * w;
                            let base = row + ci * k * k;
                            for ky in 0..k {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let line = plane + iy as usize * w;
                                for kx in 0..k {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gxs[line + ix as usize] += gc[base + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn param_refs(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view().into_dyn(),
            },
            ParamRef {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view().into_dyn(),
            },
        ]
    }

    pub fn param_values(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        vec![self.w.view().into_dyn(), self.b.view().into_dyn()]
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}
