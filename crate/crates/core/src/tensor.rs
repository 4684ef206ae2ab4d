//! Dense activation tensors.
//!
//! Layout is time-major and row-major: `(T, N, C, H, W)`, where `N` is the
//! batch axis. Single-sample tensors use `N = 1`, which is what the
//! `(T, C, H, W)` constructors produce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub t: usize,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, n: 1, c, h, w }
    }

    pub fn batched(t: usize, n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.t * self.n * self.c * self.h * self.w
    }

    /// Number of independent `(t, n)` frames.
    pub fn frames(&self) -> usize {
        self.t * self.n
    }

    /// Elements in one `(C, H, W)` frame.
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one time slice `(N, C, H, W)`.
    pub fn slice_len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn with_t(self, t: usize) -> Self {
        Self { t, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    #[inline]
    pub fn index(&self, t: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
        (((t * self.n + n) * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.t, self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.n == 1 {
            write!(f, "({},{},{},{})", self.t, self.c, self.h, self.w)
        } else {
            write!(f, "({},{},{},{},{})", self.t, self.n, self.c, self.h, self.w)
        }
    }
}

/// Continuous tensor: presynaptic inputs, membrane potentials, block outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "tensor".into(),
                msg: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Kernels use this for
    /// outputs computed from already-validated inputs.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: usize, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(t, n, c, h, w)]
    }

    pub fn set(&mut self, t: usize, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(t, n, c, h, w);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Time slice `t` as a `T = 1` tensor.
    pub fn time_slice(&self, t: usize) -> RealTensor {
        let len = self.shape.slice_len();
        Self::from_raw(
            self.shape.with_t(1),
            self.data[t * len..(t + 1) * len].to_vec(),
        )
    }

    /// Stacks `T = 1` slices along time.
    pub fn stack_time(slices: &[RealTensor]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero slices".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * slices.len());
        for sl in slices {
            if sl.shape != s || sl.shape.t != 1 {
                return Err(Error::dim(format!(
                    "slice shape {} does not match {s}",
                    sl.shape
                )));
            }
            data.extend_from_slice(&sl.data);
        }
        Ok(Self::from_raw(s.with_t(slices.len()), data))
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack_batch(samples: &[RealTensor]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("cannot batch zero samples".into()))?;
        let s = first.shape;
        if s.n != 1 {
            return Err(Error::dim("stack_batch expects N = 1 samples"));
        }
        let n = samples.len();
        let out_shape = Shape::batched(s.t, n, s.c, s.h, s.w);
        let frame = s.frame_len();
        let mut data = vec![0.0; out_shape.numel()];
        for (i, sample) in samples.iter().enumerate() {
            if sample.shape != s {
                return Err(Error::dim(format!(
                    "sample {i} has shape {}, expected {s}",
                    sample.shape
                )));
            }
            for t in 0..s.t {
                let dst = (t * n + i) * frame;
                data[dst..dst + frame].copy_from_slice(&sample.data[t * frame..(t + 1) * frame]);
            }
        }
        Ok(Self::from_raw(out_shape, data))
    }

    /// Extracts sample `i` of a batch as an `N = 1` tensor.
    pub fn sample(&self, i: usize) -> RealTensor {
        let s = self.shape;
        let frame = s.frame_len();
        let mut data = Vec::with_capacity(s.t * frame);
        for t in 0..s.t {
            let src = (t * s.n + i) * frame;
            data.extend_from_slice(&self.data[src..src + frame]);
        }
        Self::from_raw(Shape::new(s.t, s.c, s.h, s.w), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealTensor {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Population variance over all elements. Values are shifted by the
    /// first element, so constant data gives exactly 0.
    pub fn variance(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        let k = self.data[0];
        let m = self.data.iter().map(|v| v - k).sum::<f64>() / n as f64;
        self.data.iter().map(|v| (v - k - m) * (v - k - m)).sum::<f64>() / n as f64
    }

    /// Unbiased sample variance over all elements; 0 with fewer than two.
    pub fn sample_variance(&self) -> f64 {
        let n = self.data.len();
        if n < 2 {
            return 0.0;
        }
        self.variance() * n as f64 / (n - 1) as f64
    }

    pub fn max_abs_diff(&self, other: &RealTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Integer spike counts in `[0, d_max]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTensor {
    shape: Shape,
    data: Vec<i32>,
    d_max: i32,
}

impl SpikeTensor {
    pub fn zeros(shape: Shape, d_max: i32) -> Self {
        Self {
            shape,
            data: vec![0; shape.numel()],
            d_max,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<i32>, d_max: i32) -> Result<Self> {
        if d_max < 1 {
            return Err(Error::Invariant(format!("d_max must be >= 1, got {d_max}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, &v)| v < 0 || v > d_max) {
            return Err(Error::Invariant(format!(
                "spike count {v} at flat index {i} outside [0, {d_max}]"
            )));
        }
        Ok(Self { shape, data, d_max })
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<i32>, d_max: i32) -> Self {
        Self { shape, data, d_max }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn d_max(&self) -> i32 {
        self.d_max
    }

    pub fn get(&self, t: usize, n: usize, c: usize, h: usize, w: usize) -> i32 {
        self.data[self.shape.index(t, n, c, h, w)]
    }

    /// Checks the `[0, d_max]` range invariant.
    pub fn validate(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v < 0 || v > self.d_max)
        {
            Some(i) => Err(Error::Invariant(format!(
                "spike count {} at flat index {i} outside [0, {}]",
                self.data[i], self.d_max
            ))),
            None => Ok(()),
        }
    }

    pub fn to_real(&self) -> RealTensor {
        RealTensor::from_raw(self.shape, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Reinterprets a real tensor holding exact integer counts.
    pub fn from_real_counts(x: &RealTensor, d_max: i32) -> Result<Self> {
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if (r - v).abs() > 1e-9 {
                    Err(Error::Invariant(format!("value {v} is not an integer count")))
                } else {
                    Ok(r as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vec(x.shape(), data, d_max)
    }

    pub fn sum(&self) -> i64 {
        self.data.iter().map(|&v| v as i64).sum()
    }
}
