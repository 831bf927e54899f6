//! Convolution, pooling and up-sampling on `(channels, height, width)`
//! feature maps, each with a hand-written backward pass.
//!
//! Layers do not own their weights. They hold offsets into the flat
//! parameter vector of the network that contains them, and their backward
//! passes accumulate into a gradient vector with the same layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};

/// Same-padded 2D convolution with bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: usize,
    pub bias: usize,
}

fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * h * w..][..h * w];
                let (x0, x1) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let src = &plane[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = k / 2;
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<f64>::zeros((c, h, w));
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cs[((ci * k + ky) * k + kx) * h * w..][..h * w];
                let (x0, x1) = (pad.saturating_sub(kx), (w + pad).saturating_sub(kx).min(w));
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let dst = &mut plane[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

fn as_matrix(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (c, h, w) = x.dim();
    ArrayView2::from_shape((c, h * w), x.as_slice().expect("standard layout")).unwrap()
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.weight_len();
        ArrayView2::from_shape((self.cout, n / self.cout), &params[self.weight..self.weight + n]).unwrap()
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let mut out = Array2::<f64>::zeros((self.cout, h * w));
        let bias = &params[self.bias..self.bias + self.cout];
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row.fill(b);
        }
        if self.k == 1 {
            general_mat_mul(1.0, &self.weights(params), &as_matrix(x), 1.0, &mut out);
        } else {
            let cols = im2col(x, self.k);
            general_mat_mul(1.0, &self.weights(params), &cols, 1.0, &mut out);
        }
        out.into_shape_with_order((self.cout, h, w)).unwrap()
    }

    /// Accumulates weight and bias gradients into `grads`; returns the
    /// gradient with respect to `x`.
    pub fn backward(&self, params: &[f64], x: &Array3<f64>, gy: &Array3<f64>, grads: &mut [f64]) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let gy2 = as_matrix(gy);
        for (o, row) in gy2.rows().into_iter().enumerate() {
            grads[self.bias + o] += row.sum();
        }
        let n = self.weight_len();
        let mut gw = ArrayViewMut2::from_shape(
            (self.cout, n / self.cout),
            &mut grads[self.weight..self.weight + n],
        )
        .unwrap();
        let wt = self.weights(params);
        if self.k == 1 {
            general_mat_mul(1.0, &gy2, &as_matrix(x).t(), 1.0, &mut gw);
            let mut gx = Array2::<f64>::zeros((c, h * w));
            general_mat_mul(1.0, &wt.t(), &gy2, 0.0, &mut gx);
            gx.into_shape_with_order((c, h, w)).unwrap()
        } else {
            let cols = im2col(x, self.k);
            general_mat_mul(1.0, &gy2, &cols.t(), 1.0, &mut gw);
            let mut gcols = Array2::<f64>::zeros(cols.dim());
            general_mat_mul(1.0, &wt.t(), &gy2, 0.0, &mut gcols);
            col2im(&gcols, c, h, w, self.k)
        }
    }
}

/// 2×2 transposed convolution with stride 2. Weights are laid out as
/// `[cin, cout, 2, 2]`.
#[derive(Clone, Debug)]
pub(crate) struct UpConv2x2 {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl UpConv2x2 {
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * 4
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.cin, self.cout * 4),
            &params[self.weight..self.weight + self.weight_len()],
        )
        .unwrap()
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let mut taps = Array2::<f64>::zeros((self.cout * 4, h * w));
        general_mat_mul(1.0, &self.weights(params).t(), &as_matrix(x), 0.0, &mut taps);
        let bias = &params[self.bias..self.bias + self.cout];
        let mut out = Array3::<f64>::zeros((self.cout, 2 * h, 2 * w));
        for o in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let row = taps.row(o * 4 + a * 2 + b);
                    for i in 0..h {
                        for j in 0..w {
                            out[[o, 2 * i + a, 2 * j + b]] = row[i * w + j] + bias[o];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, params: &[f64], x: &Array3<f64>, gy: &Array3<f64>, grads: &mut [f64]) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let mut gtaps = Array2::<f64>::zeros((self.cout * 4, h * w));
        for o in 0..self.cout {
            let mut bsum = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let mut row = gtaps.row_mut(o * 4 + a * 2 + b);
                    for i in 0..h {
                        for j in 0..w {
                            let g = gy[[o, 2 * i + a, 2 * j + b]];
                            row[i * w + j] = g;
                            bsum += g;
                        }
                    }
                }
            }
            grads[self.bias + o] += bsum;
        }
        let n = self.weight_len();
        let mut gw =
            ArrayViewMut2::from_shape((self.cin, self.cout * 4), &mut grads[self.weight..self.weight + n]).unwrap();
        general_mat_mul(1.0, &as_matrix(x), &gtaps.t(), 1.0, &mut gw);
        let mut gx = Array2::<f64>::zeros((c, h * w));
        general_mat_mul(1.0, &self.weights(params), &gtaps, 0.0, &mut gx);
        gx.into_shape_with_order((c, h, w)).unwrap()
    }
}

pub(crate) fn relu_inplace(x: &mut Array3<f64>) {
    // `f64::max` would swallow NaN; keep it so divergence surfaces.
    x.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
}

/// Zeroes `g` wherever the ReLU output `y` was clipped.
pub(crate) fn relu_backward(y: &Array3<f64>, g: &mut Array3<f64>) {
    g.zip_mut_with(y, |g, &y| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
}

/// 2×2 max pooling; also returns the winning position (0..4) per output.
pub(crate) fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = vec![0u8; c * oh * ow];
    let mut n = 0;
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[ci, 2 * i, 2 * j]];
                let mut which = 0u8;
                for (t, (a, b)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[[ci, 2 * i + a, 2 * j + b]];
                    if v > best {
                        best = v;
                        which = t as u8 + 1;
                    }
                }
                out[[ci, i, j]] = best;
                arg[n] = which;
                n += 1;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(arg: &[u8], gy: &Array3<f64>) -> Array3<f64> {
    let (c, oh, ow) = gy.dim();
    let mut gx = Array3::<f64>::zeros((c, 2 * oh, 2 * ow));
    let mut n = 0;
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let t = arg[n] as usize;
                gx[[ci, 2 * i + t / 2, 2 * j + t % 2]] = gy[[ci, i, j]];
                n += 1;
            }
        }
    }
    gx
}

pub(crate) fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub(crate) fn split_channels(g: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        g.slice(s![..first, .., ..]).to_owned(),
        g.slice(s![first.., .., ..]).to_owned(),
    )
}
