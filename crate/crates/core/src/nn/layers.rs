//! Layer primitives with explicit forward caches and hand-written backward
//! passes, in f64 throughout. Convolution is im2col plus GEMM.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Collects parameter views in a fixed order; gradient vectors produced by
/// the nets' backward passes follow the same order.
pub trait Parameterized {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>);
}

/// `dot` may hand back transposed-layout results; gradients are kept in
/// standard layout so serialization and flat indexing stay trivial.
fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).expect("reshape")
    }
}

fn kaiming(fan_in: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// 2-D convolution with square kernel, stride and symmetric zero padding.
/// Weights are stored flattened as (out_channels, in_channels * k * k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCache {
    col: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        let weight = Array2::from_shape_vec((out_channels, k), kaiming(k, out_channels * k, rng))
            .expect("weight shape");
        Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Zero-initialized variant, used for output heads so a fresh denoiser
    /// starts as the identity in the residual sense.
    pub fn new_zeroed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        Conv2d {
            weight: Array2::zeros((out_channels, k)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = self.padding as isize;
        let s = self.stride;
        let mut col = Array2::<f64>::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("contiguous input");
        let cs = col.as_slice_mut().expect("contiguous col");
        for ci in 0..c {
            let xbase = ci * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let rbase = row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let obase = rbase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[obase + ox] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, grad_col: &Array2<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = self.padding as isize;
        let s = self.stride;
        let mut gx = Array3::<f64>::zeros(in_shape);
        let gs = gx.as_slice_mut().expect("contiguous grad");
        let cs = grad_col.as_slice().expect("contiguous col");
        for ci in 0..c {
            let xbase = ci * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let rbase = row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let obase = rbase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gs[xrow + ix as usize] += cs[obase + ox];
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let col = self.im2col(x);
        let mut y2 = self.weight.dot(&col);
        for (mut row, b) in y2.rows_mut().into_iter().zip(self.bias.iter()) {
            row += *b;
        }
        let y = y2
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("output shape");
        (
            y,
            Conv2dCache {
                col,
                in_shape: x.dim(),
            },
        )
    }

    /// Returns (grad_x, grad_weight, grad_bias).
    pub fn backward(
        &self,
        cache: &Conv2dCache,
        grad_y: &Array3<f64>,
    ) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
        let (co, oh, ow) = grad_y.dim();
        debug_assert_eq!(co, self.out_channels);
        let gy2 = grad_y
            .view()
            .into_shape_with_order((co, oh * ow))
            .expect("grad shape");
        let grad_w = to_standard(gy2.dot(&cache.col.t()));
        let grad_b = gy2.sum_axis(ndarray::Axis(1));
        let grad_col = self.weight.t().dot(&gy2);
        let grad_x = self.col2im(&grad_col, cache.in_shape);
        (grad_x, grad_w, grad_b)
    }
}

impl Parameterized for Conv2d {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        out.push(self.weight.view().into_dyn());
        out.push(self.bias.view().into_dyn());
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.weight.view_mut().into_dyn());
        out.push(self.bias.view_mut().into_dyn());
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct DenseCache {
    x: Array1<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: Array2::from_shape_vec((out_dim, in_dim), kaiming(in_dim, out_dim * in_dim, rng))
                .expect("weight shape"),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn forward_cached(&self, x: &Array1<f64>) -> (Array1<f64>, DenseCache) {
        (self.forward(x), DenseCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &DenseCache,
        grad_y: &Array1<f64>,
    ) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let grad_x = self.weight.t().dot(grad_y);
        let gy = grad_y.view().insert_axis(ndarray::Axis(1));
        let x = cache.x.view().insert_axis(ndarray::Axis(0));
        let grad_w = to_standard(gy.dot(&x));
        (grad_x, grad_w, grad_y.clone())
    }
}

impl Parameterized for Dense {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        out.push(self.weight.view().into_dyn());
        out.push(self.bias.view().into_dyn());
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.weight.view_mut().into_dyn());
        out.push(self.bias.view_mut().into_dyn());
    }
}

/// Group normalization over (channels/groups, H, W) slices with per-channel
/// affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

pub struct GroupNormCache {
    x_hat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        GroupNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let per = c / self.groups;
        let n = (per * h * w) as f64;
        let mut x_hat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = ndarray::s![g * per..(g + 1) * per, .., ..];
            let xg = x.slice(span);
            let mean = xg.sum() / n;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            let mut out = x_hat.slice_mut(span);
            out.assign(&xg.mapv(|v| (v - mean) * istd));
        }
        let mut y = x_hat.clone();
        for ci in 0..c {
            let mut plane = y.slice_mut(ndarray::s![ci, .., ..]);
            plane.mapv_inplace(|v| v * self.gamma[ci]);
            plane += self.beta[ci];
        }
        (y, GroupNormCache { x_hat, inv_std })
    }

    /// Returns (grad_x, grad_gamma, grad_beta).
    pub fn backward(
        &self,
        cache: &GroupNormCache,
        grad_y: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
        let (c, h, w) = grad_y.dim();
        let per = c / self.groups;
        let n = (per * h * w) as f64;
        let mut grad_gamma = Array1::<f64>::zeros(c);
        let mut grad_beta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let gy = grad_y.slice(ndarray::s![ci, .., ..]);
            let xh = cache.x_hat.slice(ndarray::s![ci, .., ..]);
            grad_gamma[ci] = gy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            grad_beta[ci] = gy.sum();
        }
        let mut grad_x = Array3::<f64>::zeros((c, h, w));
        for g in 0..self.groups {
            let span = ndarray::s![g * per..(g + 1) * per, .., ..];
            let gy = grad_y.slice(span);
            let xh = cache.x_hat.slice(span);
            // d = dL/d x_hat within the group.
            let mut d = gy.to_owned();
            for (local, mut plane) in d.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v * self.gamma[g * per + local]);
            }
            let sum_d = d.sum();
            let sum_dx = d.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            let istd = cache.inv_std[g];
            let mut gx = grad_x.slice_mut(span);
            ndarray::Zip::from(&mut gx)
                .and(&d)
                .and(&xh)
                .for_each(|o, &dv, &xv| {
                    *o = istd * (dv - sum_d / n - xv * sum_dx / n);
                });
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

impl Parameterized for GroupNorm {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        out.push(self.gamma.view().into_dyn());
        out.push(self.beta.view().into_dyn());
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        out.push(self.gamma.view_mut().into_dyn());
        out.push(self.beta.view_mut().into_dyn());
    }
}

pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Array3<f64>, grad_y: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_y.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|o, &v| {
        let s = sigmoid(v);
        *o *= s * (1.0 + v * (1.0 - s));
    });
    g
}

pub fn silu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_backward(x: &Array1<f64>, grad_y: &Array1<f64>) -> Array1<f64> {
    let mut g = grad_y.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|o, &v| {
        let s = sigmoid(v);
        *o *= s * (1.0 + v * (1.0 - s));
    });
    g
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<f64>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ci, i, j]];
                y[[ci, 2 * i, 2 * j]] = v;
                y[[ci, 2 * i + 1, 2 * j]] = v;
                y[[ci, 2 * i, 2 * j + 1]] = v;
                y[[ci, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2x_backward(grad_y: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad_y.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[[ci, i, j]] = grad_y[[ci, 2 * i, 2 * j]]
                    + grad_y[[ci, 2 * i + 1, 2 * j]]
                    + grad_y[[ci, 2 * i, 2 * j + 1]]
                    + grad_y[[ci, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    gx
}

/// Global average pooling to one value per channel.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_iter(x.outer_iter().map(|plane| plane.sum() / n))
}

pub fn global_avg_pool_backward(grad_y: &Array1<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = shape;
    let n = (h * w) as f64;
    let mut gx = Array3::<f64>::zeros(shape);
    for ci in 0..c {
        gx.slice_mut(ndarray::s![ci, .., ..]).fill(grad_y[ci] / n);
    }
    gx
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}
