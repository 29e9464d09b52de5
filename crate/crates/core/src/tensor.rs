//! Dense rank-3 tensor over `f64`.
//!
//! Activations and gradients use the layout `(batch, time, channels)` with
//! channels contiguous. Convolution weights reuse the same container with the
//! layout `(taps, in_channels, out_channels)`.

/// Dense row-major rank-3 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    batch: usize,
    time: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, time: usize, channels: usize) -> Self {
        Tensor {
            batch,
            time,
            channels,
            data: vec![0.0; batch * time * channels],
        }
    }

    /// Wraps an existing buffer; `data.len()` must equal the shape product.
    pub fn from_vec(batch: usize, time: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            batch * time * channels,
            "tensor data length {} does not match shape ({batch},{time},{channels})",
            data.len()
        );
        Tensor {
            batch,
            time,
            channels,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.time, self.channels)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn time(&self) -> usize {
        self.time
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, b: usize, t: usize) -> usize {
        (b * self.time + t) * self.channels
    }

    /// Contiguous channel row at (b, t).
    #[inline]
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let o = self.offset(b, t);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let o = self.offset(b, t);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> f64 {
        self.data[self.offset(b, t) + c]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, c: usize, v: f64) {
        let o = self.offset(b, t) + c;
        self.data[o] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug-build guard: layer kernels call this on their outputs so a
    /// NaN/Inf is caught at the op that produced it.
    #[inline]
    pub fn debug_assert_finite(&self, context: &str) {
        debug_assert!(self.is_finite(), "non-finite values after {context}");
    }
}
