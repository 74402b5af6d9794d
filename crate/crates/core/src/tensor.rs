//! Dense row-major arrays and label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(&shape)).map(f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Number of samples along the leading (batch) axis.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per sample (product of all non-leading axes).
    pub fn sample_len(&self) -> usize {
        numel(&self.shape[1..])
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copy of sample `n` without the batch axis.
    pub fn sample_tensor(&self, n: usize) -> Tensor<T> {
        Tensor { shape: self.shape[1..].to_vec(), data: self.sample(n).to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    pub fn ensure_same_shape<U>(&self, other: &Tensor<U>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Element-wise {0,1} field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "mask shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("binary mask contains value {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0; n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..numel(&shape)).map(|i| f(i) as u8).collect();
        Self { shape, data }
    }

    /// `1` where `value >= threshold`.
    pub fn threshold<T: Scalar>(t: &Tensor<T>, threshold: T) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| (v >= threshold) as u8).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.data[i] == 1
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| T::lit(v as f64)).collect() }
    }
}

/// Per-element class indices in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    shape: Vec<usize>,
    data: Vec<u8>,
    num_classes: u8,
}

impl ClassMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, num_classes: u8) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "class map shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::Data(format!("class index {bad} outside 0..{num_classes}")));
        }
        Ok(Self { shape, data, num_classes })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Indicator of one class.
    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask { shape: self.shape.clone(), data: self.data.iter().map(|&v| (v == class) as u8).collect() }
    }
}

/// Ground-truth or pseudo label: a binary mask or a class-index map,
/// shaped like the image without its channel axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Binary(BinaryMask),
    Classes(ClassMap),
}

impl Label {
    pub fn shape(&self) -> &[usize] {
        match self {
            Label::Binary(m) => m.shape(),
            Label::Classes(m) => m.shape(),
        }
    }

    pub fn data(&self) -> &[u8] {
        match self {
            Label::Binary(m) => m.data(),
            Label::Classes(m) => m.data(),
        }
    }

    /// Stack per-sample labels along a new leading axis.
    pub fn stack(items: &[&Label]) -> Result<Label> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero labels".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(numel(&shape));
        for l in items {
            if l.shape() != first.shape() {
                return Err(Error::Shape(format!("label shapes {:?} and {:?} differ", l.shape(), first.shape())));
            }
            data.extend_from_slice(l.data());
        }
        match first {
            Label::Binary(_) => Ok(Label::Binary(BinaryMask::new(shape, data)?)),
            Label::Classes(c) => Ok(Label::Classes(ClassMap::new(shape, data, c.num_classes())?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = a.map(|v| v * 10.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.sample_tensor(0), a);
        assert_eq!(s.sample_tensor(1), b);
    }

    #[test]
    fn binary_mask_rejects_non_binary_values() {
        assert!(BinaryMask::new(vec![3], vec![0, 1, 2]).is_err());
        assert_eq!(BinaryMask::new(vec![3], vec![0, 1, 1]).unwrap().count(), 2);
    }

    #[test]
    fn class_map_rejects_out_of_range() {
        assert!(ClassMap::new(vec![2], vec![0, 4], 4).is_err());
        let m = ClassMap::new(vec![3], vec![0, 3, 3], 4).unwrap();
        assert_eq!(m.class_mask(3).count(), 2);
    }
}
