//! Layers with explicit backward passes.

use rand::{Rng, RngCore};

use super::ops::{chunks, col2im, gather, im2col, scatter, Window};
use super::{join, Init, Param, Parameters, Scalar, Tensor};

fn take_cache<T>(cache: &mut Option<T>, layer: &str) -> T {
    cache
        .take()
        .unwrap_or_else(|| panic!("{layer}: backward called without a training forward"))
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, init: &mut Init) -> Self {
        let fan_in = in_ch * k * k;
        Self {
            weight: Param::new(vec![out_ch, in_ch, k, k], init.he_normal(out_ch * fan_in, fan_in)),
            bias: Param::new(vec![out_ch], init.fill(out_ch, 0.0)),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn window(&self, x: &Tensor<T>) -> Window {
        assert_eq!(
            x.c(),
            self.in_ch,
            "conv expects {} input channels, got {}",
            self.in_ch,
            x.c()
        );
        Window {
            channels: self.in_ch,
            h: x.h(),
            w: x.w(),
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn unfold(&self, x: &Tensor<T>, g: Window, n0: usize, cnt: usize) -> Vec<T> {
        let p = g.out_len();
        if self.pointwise() {
            return gather(x.data(), self.in_ch, p, n0, cnt);
        }
        let ld = cnt * p;
        let mut cols = vec![T::zero(); g.rows() * ld];
        for i in 0..cnt {
            im2col(x.sample(n0 + i), g, &mut cols, ld, i * p);
        }
        cols
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.window(x);
        let (oh, ow) = (g.out_h(), g.out_w());
        let p = oh * ow;
        let mut y = Tensor::zeros([x.n(), self.out_ch, oh, ow]);
        for (n0, cnt) in chunks(x.n(), g.rows() * p) {
            let cols = self.unfold(x, g, n0, cnt);
            let ld = cnt * p;
            let mut out = vec![T::zero(); self.out_ch * ld];
            for (o, row) in out.chunks_mut(ld).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            T::gemm(
                self.out_ch,
                g.rows(),
                ld,
                T::one(),
                &self.weight.value,
                false,
                &cols,
                false,
                T::one(),
                &mut out,
            );
            scatter(&out, self.out_ch, p, n0, cnt, y.data_mut());
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = take_cache(&mut self.cache, "conv2d");
        let g = self.window(&x);
        let p = g.out_len();
        assert_eq!(dy.shape(), [x.n(), self.out_ch, g.out_h(), g.out_w()]);
        let mut dx = Tensor::zeros(x.shape());
        for (n0, cnt) in chunks(x.n(), g.rows() * p) {
            let ld = cnt * p;
            let cols = self.unfold(&x, g, n0, cnt);
            let dyg = gather(dy.data(), self.out_ch, p, n0, cnt);
            for (o, row) in dyg.chunks(ld).enumerate() {
                self.bias.grad[o] += row.iter().copied().sum();
            }
            T::gemm(
                self.out_ch,
                ld,
                g.rows(),
                T::one(),
                &dyg,
                false,
                &cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            let mut dcols = vec![T::zero(); g.rows() * ld];
            T::gemm(
                g.rows(),
                self.out_ch,
                ld,
                T::one(),
                &self.weight.value,
                true,
                &dyg,
                false,
                T::zero(),
                &mut dcols,
            );
            if self.pointwise() {
                scatter(&dcols, self.in_ch, p, n0, cnt, dx.data_mut());
            } else {
                for i in 0..cnt {
                    col2im(&dcols, ld, i * p, g, dx.sample_mut(n0 + i));
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`.
///
/// Output side is `(in - 1) * stride - 2 * pad + k + output_pad`; with
/// `k = 3, stride = 2, pad = 1, output_pad = 1` it exactly doubles.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        init: &mut Init,
    ) -> Self {
        // Each output pixel receives on average in_ch * k * k / stride^2 terms.
        let fan_in = (in_ch * k * k / (stride * stride)).max(1);
        Self {
            weight: Param::new(vec![in_ch, out_ch, k, k], init.he_normal(in_ch * out_ch * k * k, fan_in)),
            bias: Param::new(vec![out_ch], init.fill(out_ch, 0.0)),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    /// Window of the equivalent forward convolution that maps the output
    /// plane back onto the input plane.
    fn window(&self, x: &Tensor<T>) -> Window {
        assert_eq!(
            x.c(),
            self.in_ch,
            "transposed conv expects {} input channels, got {}",
            self.in_ch,
            x.c()
        );
        let oh = (x.h() - 1) * self.stride + self.k + self.output_pad - 2 * self.pad;
        let ow = (x.w() - 1) * self.stride + self.k + self.output_pad - 2 * self.pad;
        let g = Window {
            channels: self.out_ch,
            h: oh,
            w: ow,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        debug_assert_eq!((g.out_h(), g.out_w()), (x.h(), x.w()));
        g
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.window(x);
        let p = x.h() * x.w();
        let mut y = Tensor::zeros([x.n(), self.out_ch, g.h, g.w]);
        for (n0, cnt) in chunks(x.n(), g.rows() * p) {
            let ld = cnt * p;
            let xg = gather(x.data(), self.in_ch, p, n0, cnt);
            let mut cols = vec![T::zero(); g.rows() * ld];
            T::gemm(
                g.rows(),
                self.in_ch,
                ld,
                T::one(),
                &self.weight.value,
                true,
                &xg,
                false,
                T::zero(),
                &mut cols,
            );
            for i in 0..cnt {
                col2im(&cols, ld, i * p, g, y.sample_mut(n0 + i));
            }
        }
        let plane = g.h * g.w;
        for i in 0..x.n() {
            for (o, ch) in y.sample_mut(i).chunks_mut(plane).enumerate() {
                let b = self.bias.value[o];
                ch.iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = take_cache(&mut self.cache, "conv_transpose2d");
        let g = self.window(&x);
        assert_eq!(dy.shape(), [x.n(), self.out_ch, g.h, g.w]);
        let p = x.h() * x.w();
        let plane = g.h * g.w;
        for i in 0..x.n() {
            for (o, ch) in dy.sample(i).chunks(plane).enumerate() {
                self.bias.grad[o] += ch.iter().copied().sum();
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        for (n0, cnt) in chunks(x.n(), g.rows() * p) {
            let ld = cnt * p;
            let mut cols = vec![T::zero(); g.rows() * ld];
            for i in 0..cnt {
                im2col(dy.sample(n0 + i), g, &mut cols, ld, i * p);
            }
            let xg = gather(x.data(), self.in_ch, p, n0, cnt);
            T::gemm(
                self.in_ch,
                ld,
                g.rows(),
                T::one(),
                &xg,
                false,
                &cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            let mut dxg = vec![T::zero(); self.in_ch * ld];
            T::gemm(
                self.in_ch,
                g.rows(),
                ld,
                T::one(),
                &self.weight.value,
                false,
                &cols,
                false,
                T::zero(),
                &mut dxg,
            );
            scatter(&dxg, self.in_ch, p, n0, cnt, dx.data_mut());
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for ConvTranspose2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Batch normalization over N, H, W with affine parameters and running
/// statistics (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    channels: usize,
    cache: Option<BnCache<T>>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        Self {
            gamma: Param::new(vec![channels], init.fill(channels, 1.0)),
            beta: Param::new(vec![channels], init.fill(channels, 0.0)),
            running_mean: Param::buffer(vec![channels], init.fill(channels, 0.0)),
            running_var: Param::buffer(vec![channels], init.fill(channels, 1.0)),
            channels,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) {
        assert_eq!(x.c(), self.channels, "batchnorm channel mismatch");
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.check(x);
        let plane = x.h() * x.w();
        let mut y = x.clone();
        for i in 0..x.n() {
            for (c, ch) in y.sample_mut(i).chunks_mut(plane).enumerate() {
                let inv = T::one() / (self.running_var.value[c] + T::lit(BN_EPS)).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                ch.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.check(x);
        let plane = x.h() * x.w();
        let m = (x.n() * plane) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for i in 0..x.n() {
                sum += x.sample(i)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(0.0))
                    .sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for i in 0..x.n() {
                sq += x.sample(i)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap_or(0.0) - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..x.n() {
                let xs = &mut xhat.sample_mut(i)[c * plane..(c + 1) * plane];
                xs.iter_mut().for_each(|v| *v = (*v - mean_t) * inv_t);
                let ys = &mut y.sample_mut(i)[c * plane..(c + 1) * plane];
                for (yv, &xv) in ys.iter_mut().zip(xhat.sample(i)[c * plane..(c + 1) * plane].iter()) {
                    *yv = g * xv + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = T::lit(BN_MOMENTUM);
            self.running_mean.value[c] = (T::one() - mom) * self.running_mean.value[c] + mom * mean_t;
            self.running_var.value[c] =
                (T::one() - mom) * self.running_var.value[c] + mom * T::lit(unbiased);
            inv_std.push(inv_t);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let BnCache { xhat, inv_std } = take_cache(&mut self.cache, "batchnorm");
        assert_eq!(dy.shape(), xhat.shape());
        let plane = dy.h() * dy.w();
        let m = (dy.n() * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..self.channels {
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for i in 0..dy.n() {
                let d = &dy.sample(i)[c * plane..(c + 1) * plane];
                let xh = &xhat.sample(i)[c * plane..(c + 1) * plane];
                for (a, b) in d.iter().zip(xh) {
                    let a = a.to_f64().unwrap_or(0.0);
                    sdy += a;
                    sdyx += a * b.to_f64().unwrap_or(0.0);
                }
            }
            self.beta.grad[c] += T::lit(sdy);
            self.gamma.grad[c] += T::lit(sdyx);
            let k = self.gamma.value[c] * inv_std[c] / T::lit(m);
            let (mt, sdy, sdyx) = (T::lit(m), T::lit(sdy), T::lit(sdyx));
            for i in 0..dy.n() {
                let d = &dy.sample(i)[c * plane..(c + 1) * plane];
                let xh = &xhat.sample(i)[c * plane..(c + 1) * plane];
                let out = &mut dx.sample_mut(i)[c * plane..(c + 1) * plane];
                for ((o, &a), &b) in out.iter_mut().zip(d).zip(xh) {
                    *o = k * (mt * a - sdy - b * sdyx);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Rectifier. Caches its output to mask the gradient.
#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = take_cache(&mut self.cache, "relu");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        dx
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { cache: None }
    }

    fn pool<T: Scalar>(x: &Tensor<T>, keep: bool) -> (Tensor<T>, Vec<u32>) {
        assert!(
            x.h() % 2 == 0 && x.w() % 2 == 0,
            "max pool needs even spatial dims, got {}x{}",
            x.h(),
            x.w()
        );
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([x.n(), x.c(), oh, ow]);
        let mut idx = if keep { vec![0u32; y.data().len()] } else { Vec::new() };
        let planes = x.n() * x.c();
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = pl * oh * ow + oy * ow + ox;
                    y.data_mut()[o] = src[best];
                    if keep {
                        idx[o] = best as u32;
                    }
                }
            }
        }
        (y, idx)
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::pool(x, false).0
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, idx) = Self::pool(x, true);
        self.cache = Some((x.shape(), idx));
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, idx) = take_cache(&mut self.cache, "maxpool");
        let mut dx = Tensor::zeros(shape);
        let (hw, ohw) = (shape[2] * shape[3], dy.h() * dy.w());
        for (o, (&g, &i)) in dy.data().iter().zip(&idx).enumerate() {
            let pl = o / ohw;
            dx.data_mut()[pl * hw + i as usize] += g;
        }
        dx
    }
}

/// Fully connected layer on `[N, in, 1, 1]` tensors, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_f: usize,
    out_f: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_f: usize, out_f: usize, init: &mut Init) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        Self {
            weight: Param::new(vec![out_f, in_f], init.uniform(out_f * in_f, bound)),
            bias: Param::new(vec![out_f], init.uniform(out_f, bound)),
            in_f,
            out_f,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_f, "linear input width mismatch");
        let n = x.n();
        let mut y = Tensor::zeros([n, self.out_f, 1, 1]);
        for row in y.data_mut().chunks_mut(self.out_f) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            n,
            self.in_f,
            self.out_f,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            true,
            T::one(),
            y.data_mut(),
        );
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = take_cache(&mut self.cache, "linear");
        let n = x.n();
        for row in dy.data().chunks(self.out_f) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        T::gemm(
            self.out_f,
            n,
            self.in_f,
            T::one(),
            dy.data(),
            true,
            x.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            self.out_f,
            self.in_f,
            T::one(),
            dy.data(),
            false,
            &self.weight.value,
            false,
            T::zero(),
            dx.data_mut(),
        );
        dx
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let plane = x.h() * x.w();
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([x.n(), x.c(), 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let plane = shape[2] * shape[3];
    let inv = T::one() / T::lit(plane as f64);
    let mut dx = Tensor::zeros(shape);
    for (ch, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        ch.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// Inverted dropout; the mask is drawn from the caller's generator so that
/// training steps are reproducible.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    mask: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self { p, mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, rng: &mut dyn RngCore) -> Tensor<T> {
        let keep: Vec<bool> = (0..x.data().len()).map(|_| rng.random::<f64>() >= self.p).collect();
        let scale = T::lit(1.0 / (1.0 - self.p));
        let mut y = x.clone();
        for (v, &k) in y.data_mut().iter_mut().zip(&keep) {
            *v = if k { *v * scale } else { T::zero() };
        }
        self.mask = Some(keep);
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let keep = take_cache(&mut self.mask, "dropout");
        let scale = T::lit(1.0 / (1.0 - self.p));
        let mut dx = dy.clone();
        for (v, &k) in dx.data_mut().iter_mut().zip(&keep) {
            *v = if k { *v * scale } else { T::zero() };
        }
        dx
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Convolution followed by batch norm and (optionally) ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    relu: Option<Relu<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    /// 3x3, stride 1, pad 1, batch norm and ReLU.
    pub fn same(in_ch: usize, out_ch: usize, init: &mut Init) -> Self {
        Self::new(Conv2d::new(in_ch, out_ch, 3, 1, 1, init), true, init)
    }

    pub fn new(conv: Conv2d<T>, normalized: bool, init: &mut Init) -> Self {
        let c = conv.out_channels();
        Self {
            conv,
            bn: normalized.then(|| BatchNorm2d::new(c, init)),
            relu: normalized.then(Relu::new),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv.infer(x);
        if let Some(bn) = &self.bn {
            y = bn.infer(&y);
        }
        if let Some(r) = &self.relu {
            y = r.infer(&y);
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y);
        }
        if let Some(r) = &mut self.relu {
            y = r.forward(&y);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        if let Some(r) = &mut self.relu {
            d = r.backward(&d);
        }
        if let Some(bn) = &mut self.bn {
            d = bn.backward(&d);
        }
        self.conv.backward(&d)
    }
}

impl<T: Scalar> Parameters<T> for ConvBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.visit(&join(prefix, "conv"), out);
        self.bn.visit(&join(prefix, "bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.bn.visit_mut(&join(prefix, "bn"), out);
    }
}

/// A run of [`ConvBlock`]s applied in sequence.
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> ConvStack<T> {
    /// `count` 3x3 same-padding blocks mapping `in_ch` to `out_ch`.
    pub fn same(in_ch: usize, out_ch: usize, count: usize, init: &mut Init) -> Self {
        let blocks = (0..count)
            .map(|i| ConvBlock::same(if i == 0 { in_ch } else { out_ch }, out_ch, init))
            .collect();
        Self { blocks }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.infer(&y);
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for ConvStack<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.blocks.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.blocks.visit_mut(prefix, out);
    }
}
