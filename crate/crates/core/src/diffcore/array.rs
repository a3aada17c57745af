use serde::{Deserialize, Serialize};

use super::DiffError;

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(DiffError::ValueCount {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// Builds an array from a shape and an index function over flat positions.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a scalar (or one-element) array.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape, shape],
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Size of the trailing axis and the number of rows before it.
pub(crate) fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&n) if n > 0 => (shape.iter().product::<usize>() / n, n),
        Some(_) => (0, 0),
        None => (1, 1),
    }
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output positions of a broadcast back to flat positions of one operand.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastIndex {
    Identity,
    /// Operand equals a contiguous suffix block of the output, repeated.
    Modulo(usize),
    Strided {
        out_shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl BroadcastIndex {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Self {
        if operand == out {
            return Self::Identity;
        }
        let n: usize = operand.iter().product();
        let trimmed: Vec<usize> = {
            let first = operand.iter().position(|&d| d != 1).unwrap_or(operand.len());
            operand[first..].to_vec()
        };
        if !trimmed.is_empty() && out.ends_with(&trimmed) {
            return Self::Modulo(n);
        }
        if n == 1 {
            return Self::Modulo(1);
        }
        let rank = out.len();
        let offset = rank - operand.len();
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..operand.len()).rev() {
            strides[i + offset] = if operand[i] == 1 { 0 } else { acc };
            acc *= operand[i];
        }
        Self::Strided {
            out_shape: out.to_vec(),
            strides,
        }
    }

    #[inline]
    pub(crate) fn map(&self, flat: usize) -> usize {
        match self {
            Self::Identity => flat,
            Self::Modulo(n) => flat % n,
            Self::Strided { out_shape, strides } => {
                let mut rem = flat;
                let mut idx = 0;
                for (d, s) in out_shape.iter().zip(strides).rev() {
                    idx += (rem % d) * s;
                    rem /= d;
                }
                idx
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_count_is_checked() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(DenseArray::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
    }

    #[test]
    fn broadcast_index_strided() {
        let idx = BroadcastIndex::new(&[2, 1], &[2, 3]);
        let mapped: Vec<usize> = (0..6).map(|i| idx.map(i)).collect();
        assert_eq!(mapped, vec![0, 0, 0, 1, 1, 1]);
        let idx = BroadcastIndex::new(&[3], &[2, 3]);
        let mapped: Vec<usize> = (0..6).map(|i| idx.map(i)).collect();
        assert_eq!(mapped, vec![0, 1, 2, 0, 1, 2]);
    }
}
