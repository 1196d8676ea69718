use crate::error::{Error, Result};

/// Dense 4-D array in (batch, channel, height, width) order, row-major `f64`.
///
/// This is the universal value carrier of the crate: feature maps, per-batch
/// weight matrices (stored as `(B, N, 1, D)`), pooled scalars and convolution
/// kernels all live in this one type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (needs {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Tensor::filled(other.shape, 1.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat index: `((b*C + c)*H + h)*W + w`.
    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.idx(b, c, h, w);
        self.data[i] = value;
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(&self, shape: [usize; 4]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape_mismatch("reshape element count", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("tensor add", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("tensor add", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("tensor sub", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("tensor compare", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::contract(format!("{what} contains non-finite values")))
        }
    }

    /// Copy a contiguous channel range into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if start > end || end > c {
            return Err(Error::contract(format!(
                "channel slice {start}..{end} out of range for {c} channels"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let from = (bi * c + start) * plane;
            let to = (bi * c + end) * plane;
            data.extend_from_slice(&self.data[from..to]);
        }
        Ok(Tensor { shape: [b, end - start, h, w], data })
    }

    /// Add `src` into the channel range starting at `start` (inverse of slicing).
    pub fn add_into_channels(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let [b, c, h, w] = self.shape;
        let [sb, sc, sh, sw] = src.shape;
        if sb != b || sh != h || sw != w || start + sc > c {
            return Err(Error::shape_mismatch(
                "channel scatter",
                [b, c, h, w],
                [sb, sc, sh, sw],
            ));
        }
        let plane = h * w;
        for bi in 0..b {
            let dst_base = (bi * c + start) * plane;
            let src_base = bi * sc * plane;
            for j in 0..sc * plane {
                self.data[dst_base + j] += src.data[src_base + j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let mut t = Tensor::zeros([2, 3, 4, 5]);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("length 7"));
    }

    #[test]
    fn zero_extents_are_legal() {
        let t = Tensor::zeros([1, 0, 4, 4]);
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
    }

    #[test]
    fn reshape_preserves_data_order() {
        let t = Tensor::from_vec([1, 2, 3, 1], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape([1, 2, 1, 3]).unwrap();
        assert_eq!(t.data(), r.data());
        assert!(t.reshape([1, 2, 2, 2]).is_err());
    }

    #[test]
    fn slice_then_scatter_roundtrip() {
        let t = Tensor::from_vec([2, 3, 1, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.at(0, 0, 0, 0), t.at(0, 1, 0, 0));
        assert_eq!(s.at(1, 1, 0, 1), t.at(1, 2, 0, 1));
        let mut back = Tensor::zeros([2, 3, 1, 2]);
        back.add_into_channels(1, &s).unwrap();
        let lo = t.slice_channels(0, 1).unwrap();
        let mut expect = Tensor::zeros([2, 3, 1, 2]);
        expect.add_into_channels(0, &lo).unwrap();
        // untouched channel stays zero, scattered range matches the source
        assert_eq!(back.slice_channels(1, 3).unwrap(), s);
        assert_eq!(expect.slice_channels(0, 1).unwrap(), lo);
    }
}
