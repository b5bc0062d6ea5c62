//! Parameter-free layers: activations, resampling, pooling, coordinates.

use super::Batch;
use ndarray::{Array4, Axis};

#[derive(Default)]
pub struct Relu {
    mask: Option<Array4<f64>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let out = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        grad * self.mask.as_ref().expect("forward before backward")
    }
}

pub struct LeakyRelu {
    alpha: f64,
    mask: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(alpha: f64) -> LeakyRelu {
        LeakyRelu { alpha, mask: None }
    }

    pub fn forward(&mut self, x: &Batch) -> Batch {
        let a = self.alpha;
        let out = x.mapv(|v| if v > 0.0 { v } else { a * v });
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { a }));
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        grad * self.mask.as_ref().expect("forward before backward")
    }
}

#[derive(Default)]
pub struct Sigmoid {
    out: Option<Array4<f64>>,
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let out = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.out = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let s = self.out.as_ref().expect("forward before backward");
        grad * &s.mapv(|v| v * (1.0 - v))
    }
}

#[derive(Default)]
pub struct Tanh {
    out: Option<Array4<f64>>,
}

impl Tanh {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let out = x.mapv(f64::tanh);
        self.out = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let t = self.out.as_ref().expect("forward before backward");
        grad * &t.mapv(|v| 1.0 - v * v)
    }
}

/// Softmax across the channel axis, independently per spatial position.
#[derive(Default)]
pub struct SoftmaxChannels {
    out: Option<Array4<f64>>,
}

impl SoftmaxChannels {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut maxv = f64::NEG_INFINITY;
                    for ci in 0..c {
                        maxv = maxv.max(x[[ni, ci, y, xx]]);
                    }
                    let mut sum = 0.0;
                    for ci in 0..c {
                        let e = (x[[ni, ci, y, xx]] - maxv).exp();
                        out[[ni, ci, y, xx]] = e;
                        sum += e;
                    }
                    for ci in 0..c {
                        out[[ni, ci, y, xx]] /= sum;
                    }
                }
            }
        }
        self.out = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        // dx = s * (g - sum_c(g * s))
        let s = self.out.as_ref().expect("forward before backward");
        let dot = (grad * s).sum_axis(Axis(1)).insert_axis(Axis(1));
        s * &(grad - &dot)
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Default)]
pub struct Upsample2x {
    in_hw: (usize, usize),
}

impl Upsample2x {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let (n, c, h, w) = x.dim();
        self.in_hw = (h, w);
        let mut out = Array4::<f64>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[ni, ci, y, xx]];
                        out[[ni, ci, 2 * y, 2 * xx]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xx]] = v;
                        out[[ni, ci, 2 * y, 2 * xx + 1]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let (n, c, _, _) = grad.dim();
        let (h, w) = self.in_hw;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ni, ci, y, xx]] = grad[[ni, ci, 2 * y, 2 * xx]]
                            + grad[[ni, ci, 2 * y + 1, 2 * xx]]
                            + grad[[ni, ci, 2 * y, 2 * xx + 1]]
                            + grad[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                    }
                }
            }
        }
        out
    }
}

/// Collapses each feature map to its mean, shape `(n, c, 1, 1)`.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_hw: (usize, usize),
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let (n, c, h, w) = x.dim();
        self.in_hw = (h, w);
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array4::<f64>::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci, 0, 0]] = x
                    .index_axis(Axis(0), ni)
                    .index_axis(Axis(0), ci)
                    .sum()
                    * scale;
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let (n, c, _, _) = grad.dim();
        let (h, w) = self.in_hw;
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = grad[[ni, ci, 0, 0]] * scale;
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        out
    }
}

/// Appends three constant channels per pixel: x in `[-1, 1]`, y in `[-1, 1]`
/// and radius from the image centre. Gives position awareness to otherwise
/// translation-equivariant convolutions.
#[derive(Default)]
pub struct CoordConcat {
    in_c: usize,
}

impl CoordConcat {
    pub fn forward(&mut self, x: &Batch) -> Batch {
        let (n, c, h, w) = x.dim();
        self.in_c = c;
        let mut out = Array4::<f64>::zeros((n, c + 3, h, w));
        out.slice_mut(ndarray::s![.., ..c, .., ..]).assign(x);
        for y in 0..h {
            let vy = if h > 1 {
                2.0 * y as f64 / (h - 1) as f64 - 1.0
            } else {
                0.0
            };
            for xx in 0..w {
                let vx = if w > 1 {
                    2.0 * xx as f64 / (w - 1) as f64 - 1.0
                } else {
                    0.0
                };
                let r = (vx * vx + vy * vy).sqrt();
                for ni in 0..n {
                    out[[ni, c, y, xx]] = vx;
                    out[[ni, c + 1, y, xx]] = vy;
                    out[[ni, c + 2, y, xx]] = r;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Batch) -> Batch {
        let c = self.in_c;
        grad.slice(ndarray::s![.., ..c, .., ..]).to_owned()
    }
}
