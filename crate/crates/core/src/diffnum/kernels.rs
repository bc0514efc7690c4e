//! Lowering of convolutions to matrix products (im2col / col2im).

use super::Real;

/// Geometry of a 1-D convolution over a `[channels, time]` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_l: usize,
    pub pad_r: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl Conv1dGeom {
    /// Returns `None` when the padded input is shorter than the kernel span.
    pub fn new(
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_l: usize,
        pad_r: usize,
        t_in: usize,
    ) -> Option<Self> {
        let span = dilation * (kernel - 1) + 1;
        let padded = t_in + pad_l + pad_r;
        if padded < span || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            kernel,
            stride,
            dilation,
            pad_l,
            pad_r,
            t_in,
            t_out: (padded - span) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel
    }
}

/// `cols[(c·K + k), t] = x[c, t·stride + k·dilation − pad_l]` (zero outside).
pub fn im2col_1d<T: Real>(x: &[T], g: &Conv1dGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.t_out];
    for c in 0..g.channels {
        let xrow = &x[c * g.t_in..(c + 1) * g.t_in];
        for k in 0..g.kernel {
            let dst = &mut cols[(c * g.kernel + k) * g.t_out..(c * g.kernel + k + 1) * g.t_out];
            let off = (k * g.dilation) as isize - g.pad_l as isize;
            for (t, d) in dst.iter_mut().enumerate() {
                let src = (t * g.stride) as isize + off;
                if src >= 0 && (src as usize) < g.t_in {
                    *d = xrow[src as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_1d`]: scatter-adds columns back into `dx`.
pub fn col2im_1d<T: Real>(cols: &[T], g: &Conv1dGeom, dx: &mut [T]) {
    for c in 0..g.channels {
        let xrow = &mut dx[c * g.t_in..(c + 1) * g.t_in];
        for k in 0..g.kernel {
            let src = &cols[(c * g.kernel + k) * g.t_out..(c * g.kernel + k + 1) * g.t_out];
            let off = (k * g.dilation) as isize - g.pad_l as isize;
            for (t, s) in src.iter().enumerate() {
                let dst = (t * g.stride) as isize + off;
                if dst >= 0 && (dst as usize) < g.t_in {
                    xrow[dst as usize] += *s;
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: (usize, usize),
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    pub fn new(
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        pad: (usize, usize),
        h_in: usize,
        w_in: usize,
    ) -> Option<Self> {
        let span_h = dilation.0 * (kernel.0 - 1) + 1;
        let span_w = dilation.1 * (kernel.1 - 1) + 1;
        let ph = h_in + 2 * pad.0;
        let pw = w_in + 2 * pad.1;
        if ph < span_h || pw < span_w || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some(Self {
            channels,
            kernel,
            stride,
            dilation,
            pad,
            h_in,
            w_in,
            h_out: (ph - span_h) / stride.0 + 1,
            w_out: (pw - span_w) / stride.1 + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn for_each_tap_2d(g: &Conv2dGeom, mut f: impl FnMut(usize, usize, usize)) {
    // f(row of cols, column of cols, flat input index)
    let (kh, kw) = g.kernel;
    for c in 0..g.channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride.0 + i * g.dilation.0) as isize - g.pad.0 as isize;
                    if ih < 0 || ih as usize >= g.h_in {
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride.1 + j * g.dilation.1) as isize - g.pad.1 as isize;
                        if iw < 0 || iw as usize >= g.w_in {
                            continue;
                        }
                        let src = (c * g.h_in + ih as usize) * g.w_in + iw as usize;
                        f(row, oh * g.w_out + ow, src);
                    }
                }
            }
        }
    }
}

pub fn im2col_2d<T: Real>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.rows() * n];
    for_each_tap_2d(g, |row, col, src| cols[row * n + col] = x[src]);
    cols
}

pub fn col2im_2d<T: Real>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let n = g.out_len();
    for_each_tap_2d(g, |row, col, src| dx[src] += cols[row * n + col]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_conv_arithmetic() {
        let g = Conv1dGeom::new(1, 4, 2, 1, 1, 1, 16).unwrap();
        assert_eq!(g.t_out, 8);
        let g = Conv1dGeom::new(1, 7, 1, 1, 3, 3, 5).unwrap();
        assert_eq!(g.t_out, 5);
        assert!(Conv1dGeom::new(1, 7, 1, 1, 0, 0, 5).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Conv1dGeom::new(2, 3, 2, 2, 2, 1, 9).unwrap();
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.t_out).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col_1d(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 18];
        col2im_1d(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let g2 = Conv2dGeom::new(2, (3, 2), (2, 1), (1, 2), (1, 1), 5, 4).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.29).sin()).collect();
        let y: Vec<f64> = (0..g2.rows() * g2.out_len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = im2col_2d(&x, &g2).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im_2d(&y, &g2, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
