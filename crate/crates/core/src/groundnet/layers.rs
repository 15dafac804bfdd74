//! Convolution and dense layers with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::featstats::FeatureMap;
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

pub(crate) fn conv_out_len(len: usize, stride: usize) -> usize {
    // kernel 3, padding 1
    (len + 2 - KERNEL) / stride + 1
}

pub(crate) fn normal_vec<T: Scalar, R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::of(dist.sample(rng))).collect()
}

/// 3×3 convolution with padding 1 followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out × (in · 9)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new_he<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let fan_in = in_channels * TAPS;
        Self {
            in_channels,
            out_channels,
            stride,
            weight: normal_vec(rng, out_channels * fan_in, (2.0 / fan_in as f64).sqrt()),
            bias: vec![T::zero(); out_channels],
        }
    }

    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let (c, h, w) = x.shape();
        let n = oh * ow;
        let mut cols = vec![T::zero(); c * TAPS * n];
        let s = self.stride;
        for ci in 0..c {
            let plane = x.channel(ci);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &mut cols[((ci * TAPS) + ky * KERNEL + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: (usize, usize, usize), oh: usize, ow: usize) -> Vec<T> {
        let (c, h, w) = shape;
        let n = oh * ow;
        let mut dx = vec![T::zero(); c * h * w];
        let s = self.stride;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..][..h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &cols[((ci * TAPS) + ky * KERNEL + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * ow..][..ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the post-ReLU output and the im2col buffer for backward.
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>) {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (oh, ow) = (conv_out_len(x.height(), self.stride), conv_out_len(x.width(), self.stride));
        let n = oh * ow;
        let cols = self.im2col(x, oh, ow);
        let mut out = vec![T::zero(); self.out_channels * n];
        for (o, b) in out.chunks_mut(n).zip(&self.bias) {
            o.fill(*b);
        }
        let k = self.in_channels * TAPS;
        matmul(self.out_channels, k, n, &self.weight, &cols, T::one(), &mut out);
        for v in &mut out {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        (FeatureMap::from_raw(self.out_channels, oh, ow, out), cols)
    }

    /// Back-propagates through ReLU and the convolution.
    ///
    /// `grad_out` is the gradient w.r.t. the post-ReLU output `out`. Weight
    /// gradients are accumulated into `grads` when given; the input gradient
    /// is returned when `input_shape` is given.
    pub fn backward(
        &self,
        out: &FeatureMap<T>,
        cols: &[T],
        mut grad_out: Vec<T>,
        grads: Option<(&mut [T], &mut [T])>,
        input_shape: Option<(usize, usize, usize)>,
    ) -> Option<Vec<T>> {
        for (g, &o) in grad_out.iter_mut().zip(out.data()) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
        let (oh, ow) = (out.height(), out.width());
        let n = oh * ow;
        let k = self.in_channels * TAPS;
        if let Some((dw, db)) = grads {
            matmul_nt(self.out_channels, n, k, &grad_out, cols, T::one(), dw);
            for (b, g) in db.iter_mut().zip(grad_out.chunks(n)) {
                *b += g.iter().copied().sum::<T>();
            }
        }
        input_shape.map(|shape| {
            let mut dcols = vec![T::zero(); k * n];
            matmul_tn(k, self.out_channels, n, &self.weight, &grad_out, T::zero(), &mut dcols);
            self.col2im(&dcols, shape, oh, ow)
        })
    }
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, std: f64) -> Self {
        Self { inputs, outputs, weight: normal_vec(rng, inputs * outputs, std), bias: vec![T::zero(); outputs] }
    }

    /// Treats `x` as `inputs × cols` (column per sample); returns `outputs × cols`.
    pub fn forward_cols(&self, x: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.outputs * cols];
        for (o, b) in out.chunks_mut(cols).zip(&self.bias) {
            o.fill(*b);
        }
        matmul(self.outputs, self.inputs, cols, &self.weight, x, T::one(), &mut out);
        out
    }

    /// Treats `x` as `rows × inputs` (row per sample); returns `rows × outputs`.
    pub fn forward_rows(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.outputs];
        for o in out.chunks_mut(self.outputs) {
            o.copy_from_slice(&self.bias);
        }
        matmul_nt(rows, self.inputs, self.outputs, x, &self.weight, T::one(), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let (c, h, w) = x.shape();
        let (oh, ow) = (conv_out_len(h, conv.stride), conv_out_len(w, conv.stride));
        let mut out = vec![0.0; conv.out_channels * oh * ow];
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * conv.stride + ky) as isize - 1;
                                let ix = (ox * conv.stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[o * c * 9 + ci * 9 + ky * 3 + kx]
                                        * x.get(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        FeatureMap::from_raw(conv.out_channels, oh, ow, out)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let conv = Conv2d::<f64>::new_he(&mut rng, 3, 4, stride);
            let x = FeatureMap::from_raw(3, 7, 6, normal_vec(&mut rng, 3 * 7 * 6, 1.0));
            let (out, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(out.shape(), want.shape());
            for (a, b) in out.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new_he(&mut rng, 2, 3, 2);
        conv.bias = vec![0.1, -0.05, 0.2];
        let x = FeatureMap::from_raw(2, 5, 6, normal_vec(&mut rng, 60, 1.0));
        let (out, cols) = conv.forward(&x);
        let weights: Vec<f64> = normal_vec(&mut rng, out.data().len(), 1.0);
        let loss = |conv: &Conv2d<f64>, x: &FeatureMap<f64>| {
            conv.forward(x).0.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; 3];
        let dx = conv.backward(&out, &cols, weights.clone(), Some((&mut dw, &mut db)), Some(x.shape())).unwrap();
        let h = 1e-6;
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[i] += h;
            let mut m = conv.clone();
            m.weight[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-5, "w[{i}] {fd} vs {}", dw[i]);
        }
        for i in 0..3 {
            let mut p = conv.clone();
            p.bias[i] += h;
            let mut m = conv.clone();
            m.bias[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-5);
        }
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-5, "x[{i}] {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn dense_row_and_column_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = Dense::<f64>::new(&mut rng, 4, 3, 1.0);
        d.bias = vec![1.0, 2.0, 3.0];
        let x: Vec<f64> = normal_vec(&mut rng, 4 * 2, 1.0);
        let rows = d.forward_rows(&x, 2);
        let mut xt = vec![0.0; 8];
        for r in 0..2 {
            for c in 0..4 {
                xt[c * 2 + r] = x[r * 4 + c];
            }
        }
        let cols = d.forward_cols(&xt, 2);
        for r in 0..2 {
            for o in 0..3 {
                assert!((rows[r * 3 + o] - cols[o * 2 + r]).abs() < 1e-12);
            }
        }
    }
}
