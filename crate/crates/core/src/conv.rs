//! Direct float convolution with a configurable padding value, plus its two
//! adjoints. Weights are `(cout, cin, kh, kw)` row-major.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::shape(
                "conv geometry",
                "kernel >= 1 and stride >= 1",
                (self.kh, self.kw, self.stride),
            ));
        }
        if self.padding >= self.kh.min(self.kw) && self.padding > 0 {
            return Err(Error::PaddingOverflow {
                padding: self.padding,
                kernel: self.kh.min(self.kw),
            });
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kh * self.kw
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.cin {
            return Err(Error::shape("conv input channels", self.cin, input.c));
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return Err(Error::shape("conv spatial extent", (self.kh, self.kw), (ph, pw)));
        }
        Ok(Shape::new(
            input.n,
            self.cout,
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    #[inline]
    pub(crate) fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.kh + ky) * self.kw + kx
    }
}

/// Input coordinate for output coordinate `o` and kernel tap `k`, if in bounds.
#[inline]
pub(crate) fn source(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    (o * stride + k).checked_sub(padding).filter(|&i| i < extent)
}

/// Cross-correlation of `x` with `weights`; out-of-range taps read `pad_value`.
pub fn conv2d(
    x: &FloatTensor,
    weights: &[f64],
    g: &ConvGeometry,
    pad_value: f64,
) -> Result<FloatTensor> {
    if weights.len() != g.weight_len() {
        return Err(Error::shape("conv weights", g.weight_len(), weights.len()));
    }
    let is = x.shape();
    let os = g.output_shape(is)?;
    let mut out = FloatTensor::zeros(os);
    for n in 0..is.n {
        for co in 0..g.cout {
            let dst = out.plane_mut(n, co);
            for ci in 0..g.cin {
                let src = x.plane(n, ci);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weights[g.widx(co, ci, ky, kx)];
                        for oy in 0..os.h {
                            let row = &mut dst[oy * os.w..(oy + 1) * os.w];
                            match source(oy, ky, g.stride, g.padding, is.h) {
                                Some(iy) => {
                                    let srow = &src[iy * is.w..(iy + 1) * is.w];
                                    for (ox, o) in row.iter_mut().enumerate() {
                                        *o += wv * match source(ox, kx, g.stride, g.padding, is.w) {
                                            Some(ix) => srow[ix],
                                            None => pad_value,
                                        };
                                    }
                                }
                                None => {
                                    if pad_value != 0.0 {
                                        row.iter_mut().for_each(|o| *o += wv * pad_value);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the input of [`conv2d`]. Padding taps receive no gradient.
pub fn conv2d_backward_input(
    grad_out: &FloatTensor,
    weights: &[f64],
    g: &ConvGeometry,
    input_shape: Shape,
) -> FloatTensor {
    let os = grad_out.shape();
    let mut grad = FloatTensor::zeros(input_shape);
    for n in 0..os.n {
        for co in 0..g.cout {
            let go = grad_out.plane(n, co);
            for ci in 0..g.cin {
                let dst = grad.plane_mut(n, ci);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weights[g.widx(co, ci, ky, kx)];
                        for oy in 0..os.h {
                            let Some(iy) = source(oy, ky, g.stride, g.padding, input_shape.h) else {
                                continue;
                            };
                            for ox in 0..os.w {
                                if let Some(ix) = source(ox, kx, g.stride, g.padding, input_shape.w) {
                                    dst[iy * input_shape.w + ix] += wv * go[oy * os.w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Gradient w.r.t. the weights of [`conv2d`].
pub fn conv2d_backward_weights(
    x: &FloatTensor,
    grad_out: &FloatTensor,
    g: &ConvGeometry,
    pad_value: f64,
) -> Vec<f64> {
    let is = x.shape();
    let os = grad_out.shape();
    let mut grad = vec![0.0; g.weight_len()];
    for n in 0..os.n {
        for co in 0..g.cout {
            let go = grad_out.plane(n, co);
            for ci in 0..g.cin {
                let src = x.plane(n, ci);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..os.h {
                            let grow = &go[oy * os.w..(oy + 1) * os.w];
                            match source(oy, ky, g.stride, g.padding, is.h) {
                                Some(iy) => {
                                    let srow = &src[iy * is.w..(iy + 1) * is.w];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc += gv * match source(ox, kx, g.stride, g.padding, is.w) {
                                            Some(ix) => srow[ix],
                                            None => pad_value,
                                        };
                                    }
                                }
                                None => {
                                    if pad_value != 0.0 {
                                        acc += pad_value * grow.iter().sum::<f64>();
                                    }
                                }
                            }
                        }
                        grad[g.widx(co, ci, ky, kx)] += acc;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_overflow_is_rejected() {
        let g = ConvGeometry { cout: 1, cin: 1, kh: 1, kw: 1, stride: 1, padding: 1 };
        assert!(matches!(g.validate(), Err(Error::PaddingOverflow { .. })));
        let g = ConvGeometry { cout: 1, cin: 1, kh: 3, kw: 3, stride: 1, padding: 1 };
        assert!(g.validate().is_ok());
    }

    #[test]
    fn output_extent() {
        let g = ConvGeometry { cout: 2, cin: 3, kh: 3, kw: 3, stride: 2, padding: 1 };
        assert_eq!(g.output_shape(Shape::new(1, 3, 7, 8)).unwrap(), Shape::new(1, 2, 4, 4));
    }

    #[test]
    fn pad_value_is_read() {
        let g = ConvGeometry { cout: 1, cin: 1, kh: 3, kw: 3, stride: 1, padding: 1 };
        let x = FloatTensor::full(Shape::new(1, 1, 1, 1), 1.0).unwrap();
        let w = vec![1.0; 9];
        assert_eq!(conv2d(&x, &w, &g, -1.0).unwrap().data(), &[-7.0]);
        assert_eq!(conv2d(&x, &w, &g, 0.0).unwrap().data(), &[1.0]);
    }
}
