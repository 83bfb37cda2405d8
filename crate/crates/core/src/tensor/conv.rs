//! im2col-based 2-D convolution kernels for NCHW tensors.
//!
//! Transposed convolution is computed as the adjoint of the forward
//! convolution: its forward pass is a `col2im` scatter and its input
//! gradient is an `im2col` gather.

use super::{Scalar, TensorError};

/// Output extent of a strided convolution, `floor((in + 2p - k) / s) + 1`.
pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, TensorError> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::InvalidAttr { op: "conv2d", detail: format!("kernel {kernel}, stride {stride}") });
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(TensorError::NonPositiveExtent {
            op: "conv2d",
            detail: format!("input {input} + 2*{padding} < kernel {kernel}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `(in - 1) * s - 2p + k`.
pub fn conv_transpose2d_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(TensorError::InvalidAttr {
            op: "conv_transpose2d",
            detail: format!("input {input}, kernel {kernel}, stride {stride}"),
        });
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(TensorError::NonPositiveExtent {
            op: "conv_transpose2d",
            detail: format!("({input}-1)*{stride} - 2*{padding} + {kernel} <= 0"),
        });
    }
    Ok(full - 2 * padding)
}

/// Geometry shared by a convolution and its transpose.
///
/// `image_*` describes the dense side (the conv input, or the transposed-conv
/// output) and `grid_*` the strided side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub image_c: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub grid_c: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.image_c * self.kernel * self.kernel
    }

    fn grid_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn image_len(&self) -> usize {
        self.image_c * self.image_h * self.image_w
    }

    /// Source pixel index for (channel, ki, kj) at grid cell (oi, oj), if inside the image.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<usize> {
        let y = (oi * self.stride + ki) as isize - self.padding as isize;
        let x = (oj * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.image_h as isize || x >= self.image_w as isize {
            return None;
        }
        Some((c * self.image_h + y as usize) * self.image_w + x as usize)
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let gl = self.grid_len();
        for c in 0..self.image_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * gl;
                    for oi in 0..self.grid_h {
                        for oj in 0..self.grid_w {
                            cols[row + oi * self.grid_w + oj] = match self.source(c, ki, kj, oi, oj) {
                                Some(idx) => image[idx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let k = self.kernel;
        let gl = self.grid_len();
        for c in 0..self.image_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * gl;
                    for oi in 0..self.grid_h {
                        for oj in 0..self.grid_w {
                            if let Some(idx) = self.source(c, ki, kj, oi, oj) {
                                image[idx] = image[idx] + cols[row + oi * self.grid_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `x` is N×C×H×W (image side), `w` is O×C×k×k.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, gl) = (g.col_rows(), g.grid_len());
    let mut cols = vec![T::zero(); rows * gl];
    let mut out = vec![T::zero(); g.batch * g.grid_c * gl];
    for n in 0..g.batch {
        g.im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        let dst = &mut out[n * g.grid_c * gl..(n + 1) * g.grid_c * gl];
        T::gemm(g.grid_c, rows, gl, T::one(), w, (rows as isize, 1), &cols, (gl as isize, 1), T::zero(), dst, (gl as isize, 1));
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(gl).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
/// Gradients `(dx, dw, db)`; `dx` is left zero when `need_dx` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, gl) = (g.col_rows(), g.grid_len());
    let mut cols = vec![T::zero(); rows * gl];
    let mut dcols = vec![T::zero(); if need_dx { rows * gl } else { 0 }];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.grid_c];
    for n in 0..g.batch {
        let dy = &dout[n * g.grid_c * gl..(n + 1) * g.grid_c * gl];
        g.im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        // dW += dY · colsᵀ
        T::gemm(g.grid_c, gl, rows, T::one(), dy, (gl as isize, 1), &cols, (1, gl as isize), T::one(), &mut dw, (rows as isize, 1));
        if need_dx {
            // dcols = Wᵀ · dY
            T::gemm(rows, g.grid_c, gl, T::one(), w, (1, rows as isize), dy, (gl as isize, 1), T::zero(), &mut dcols, (gl as isize, 1));
            g.col2im(&dcols, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
        for (o, chunk) in dy.chunks(gl).enumerate() {
            db[o] = db[o] + chunk.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `x` is N×Cin×H×W (grid side), `w` is Cin×Cout×k×k.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, gl) = (g.col_rows(), g.grid_len());
    let mut cols = vec![T::zero(); rows * gl];
    let mut out = vec![T::zero(); g.batch * g.image_len()];
    for n in 0..g.batch {
        let xn = &x[n * g.grid_c * gl..(n + 1) * g.grid_c * gl];
        // cols = Wᵀ · x, with W viewed as Cin × (Cout·k·k)
        T::gemm(rows, g.grid_c, gl, T::one(), w, (1, rows as isize), xn, (gl as isize, 1), T::zero(), &mut cols, (gl as isize, 1));
        let dst = &mut out[n * g.image_len()..(n + 1) * g.image_len()];
        g.col2im(&cols, dst);
        if let Some(b) = bias {
            let plane = g.image_h * g.image_w;
            for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[c]);
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, gl) = (g.col_rows(), g.grid_len());
    let plane = g.image_h * g.image_w;
    let mut dcols = vec![T::zero(); rows * gl];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.image_c];
    for n in 0..g.batch {
        let dy = &dout[n * g.image_len()..(n + 1) * g.image_len()];
        g.im2col(dy, &mut dcols);
        let xn = &x[n * g.grid_c * gl..(n + 1) * g.grid_c * gl];
        // dx = W · dcols
        T::gemm(g.grid_c, rows, gl, T::one(), w, (rows as isize, 1), &dcols, (gl as isize, 1), T::zero(), &mut dx[n * g.grid_c * gl..(n + 1) * g.grid_c * gl], (gl as isize, 1));
        // dW += x · dcolsᵀ
        T::gemm(g.grid_c, gl, rows, T::one(), xn, (gl as isize, 1), &dcols, (1, gl as isize), T::one(), &mut dw, (rows as isize, 1));
        for (c, chunk) in dy.chunks(plane).enumerate() {
            db[c] = db[c] + chunk.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_and_decoder_extents() {
        assert_eq!(conv2d_out_extent(33, 4, 2, 1).unwrap(), 16);
        assert_eq!(conv2d_out_extent(16, 4, 2, 1).unwrap(), 8);
        assert_eq!(conv_transpose2d_out_extent(8, 5, 4, 0).unwrap(), 33);
        assert_eq!(conv_transpose2d_out_extent(1, 4, 2, 1).unwrap(), 2);
    }

    #[test]
    fn degenerate_extents_are_errors() {
        assert!(conv2d_out_extent(2, 5, 1, 0).is_err());
        assert!(conv2d_out_extent(5, 3, 0, 0).is_err());
        assert!(conv_transpose2d_out_extent(1, 2, 1, 1).is_err());
    }

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = conv2d_out_extent(h, k, s, p).unwrap();
        let ow = conv2d_out_extent(w, k, s, p).unwrap();
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * s + ki) as isize - p as isize;
                                let xx = (j * s + kj) as isize - p as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += x[(ic * h + y as usize) * w + xx as usize] * wt[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(oc * oh + i) * ow + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let (c, h, w, o, k, s, p) = (2, 5, 6, 3, 3, 2, 1);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let g = ConvGeom {
            batch: 1,
            image_c: c,
            image_h: h,
            image_w: w,
            grid_c: o,
            grid_h: conv2d_out_extent(h, k, s, p).unwrap(),
            grid_w: conv2d_out_extent(w, k, s, p).unwrap(),
            kernel: k,
            stride: s,
            padding: p,
        };
        let fast = conv2d_forward(&g, &x, &wt, None);
        let slow = naive_conv(&x, c, h, w, &wt, o, k, s, p);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
