use crate::error::{Error, Result};
use crate::tensor::{cast_slice, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed registration order.
///
/// The order is part of the checkpoint format: tensors are written and read
/// back in exactly this sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param {name}");
        debug_assert!(!self.names.contains(&name), "duplicate param {name}");
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(values);
        ParamId(self.data.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.data.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.data)
            .map(|((n, s), d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.data
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| vec![T::zero(); d.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for d in &mut self.data {
            d.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| cast_slice(d)).collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn check_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] || self.shapes[i] != other.shapes[i] {
                return Err(Error::Shape(format!(
                    "parameter {i}: {} {:?} vs {} {:?}",
                    self.names[i], self.shapes[i], other.names[i], other.shapes[i]
                )));
            }
        }
        Ok(())
    }

    /// Replaces every tensor's values, checking sizes.
    pub fn load_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Shape(format!("{} tensors vs {}", values.len(), self.data.len())));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != self.data[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {}: {} values vs {}",
                    self.names[i],
                    v.len(),
                    self.data[i].len()
                )));
            }
        }
        self.data = values;
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|d| crate::tensor::sq_norm(d)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|d| d.iter().all(|v| v.is_finite()))
    }
}
