use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// A batch of images stored NCHW, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Vec<T>, batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let want = batch * channels * height * width;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {batch}x{channels}x{height}x{width} = {want}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: vec![T::zero(); batch * channels * height * width],
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.batch, self.channels, self.height, self.width)
    }

    /// Values per image.
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{}x{} vs {}x{}x{}x{}",
                self.batch,
                self.channels,
                self.height,
                self.width,
                other.batch,
                other.channels,
                other.height,
                other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            data: crate::tensor::cast_slice(&self.data),
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Concatenate images along the batch axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(Error::Shape("concatenating images of different geometry".into()));
            }
            data.extend_from_slice(&p.data);
            batch += p.batch;
        }
        Self::new(data, batch, first.channels, first.height, first.width)
    }
}
