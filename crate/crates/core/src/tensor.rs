//! Dense real-valued tensors in `(n, c, h, w)` layout and the channel
//! reductions built on them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// A 2-D `(rows, cols)` shape stored as `(rows, cols, 1, 1)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(rows, cols, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn zeros(shape: Shape) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(FloatTensor {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("FloatTensor::from_vec", shape.len(), data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FloatTensor { shape, data })
    }

    /// Internal constructor for values produced by arithmetic on finite inputs.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        FloatTensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// The contiguous `h*w` slice of one `(sample, channel)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.spatial();
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape.spatial();
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FloatTensor {
        FloatTensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &FloatTensor) -> Result<FloatTensor> {
        if self.shape != other.shape {
            return Err(Error::shape("FloatTensor::add", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(FloatTensor::from_raw(self.shape, data))
    }

    pub(crate) fn add_assign(&mut self, other: &FloatTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Samples `[start, start + count)` as a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<FloatTensor> {
        if start + count > self.shape.n {
            return Err(Error::shape("slice_batch", self.shape.n, start + count));
        }
        let per = self.shape.c * self.shape.spatial();
        let shape = Shape { n: count, ..self.shape };
        Ok(FloatTensor::from_raw(
            shape,
            self.data[start * per..(start + count) * per].to_vec(),
        ))
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[FloatTensor]) -> Result<FloatTensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "at least one part", 0))?;
        let mut shape = first.shape;
        shape.n = 0;
        let mut data = Vec::new();
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (shape.c, shape.h, shape.w) {
                return Err(Error::shape("stack", first.shape, p.shape));
            }
            shape.n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(FloatTensor::from_raw(shape, data))
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
        let (sa, sb) = (a.shape, b.shape);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.len());
        let (pa, pb) = (sa.c * sa.spatial(), sb.c * sb.spatial());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&b.data[n * pb..(n + 1) * pb]);
        }
        Ok(FloatTensor::from_raw(shape, data))
    }

    /// Splits channels `[0, at)` and `[at, c)`.
    pub fn split_channels(&self, at: usize) -> (FloatTensor, FloatTensor) {
        let s = self.shape;
        assert!(at <= s.c);
        let hw = s.spatial();
        let mut a = Vec::with_capacity(s.n * at * hw);
        let mut b = Vec::with_capacity(s.n * (s.c - at) * hw);
        for n in 0..s.n {
            let base = n * s.c * hw;
            a.extend_from_slice(&self.data[base..base + at * hw]);
            b.extend_from_slice(&self.data[base + at * hw..base + s.c * hw]);
        }
        (
            FloatTensor::from_raw(Shape::new(s.n, at, s.h, s.w), a),
            FloatTensor::from_raw(Shape::new(s.n, s.c - at, s.h, s.w), b),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-sample channel statistics: an `n x c` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub n: usize,
    pub c: usize,
    pub values: Vec<f64>,
}

impl ChannelVector {
    pub fn zeros(n: usize, c: usize) -> Self {
        ChannelVector {
            n,
            c,
            values: vec![0.0; n * c],
        }
    }

    pub fn from_rows(n: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * c {
            return Err(Error::shape("ChannelVector", n * c, values.len()));
        }
        Ok(ChannelVector { n, c, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.c..(i + 1) * self.c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.c + j]
    }
}

/// Mean over the spatial positions of every `(sample, channel)` plane.
pub fn global_avg_pool(x: &FloatTensor) -> Result<ChannelVector> {
    let s = x.shape();
    if s.spatial() == 0 {
        return Err(Error::EmptySpatial);
    }
    let inv = 1.0 / s.spatial() as f64;
    let mut out = ChannelVector::zeros(s.n, s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            out.values[n * s.c + c] = x.plane(n, c).iter().sum::<f64>() * inv;
        }
    }
    Ok(out)
}

/// Adjoint of [`global_avg_pool`]: spreads each gradient uniformly over its plane.
pub fn global_avg_pool_backward(grad: &ChannelVector, shape: Shape) -> FloatTensor {
    let inv = 1.0 / shape.spatial() as f64;
    let mut out = FloatTensor::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let g = grad.get(n, c) * inv;
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    out
}

/// 2x2 stride-2 average pooling. Requires even spatial extents.
pub fn avg_pool2x2(x: &FloatTensor) -> Result<FloatTensor> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("avg_pool2x2 (even extents)", "even h, w", s));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = FloatTensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..out_shape.h {
                for xo in 0..out_shape.w {
                    let i = 2 * y * s.w + 2 * xo;
                    dst[y * out_shape.w + xo] =
                        0.25 * (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2x2_backward(grad: &FloatTensor, input_shape: Shape) -> FloatTensor {
    let gs = grad.shape();
    let mut out = FloatTensor::zeros(input_shape);
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                for x in 0..gs.w {
                    let g = 0.25 * src[y * gs.w + x];
                    let i = 2 * y * input_shape.w + 2 * x;
                    dst[i] = g;
                    dst[i + 1] = g;
                    dst[i + input_shape.w] = g;
                    dst[i + input_shape.w + 1] = g;
                }
            }
        }
    }
    out
}
