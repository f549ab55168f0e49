use std::sync::Arc;

use super::{GradError, Scalar};

/// Dense row-major array (last index fastest).
///
/// The data buffer is reference counted so that binding a tensor into a
/// [`Graph`](super::Graph) does not copy it. Mutation goes through
/// [`Tensor::data_mut`], which copies only when the buffer is still shared.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, GradError> {
        check_shape(shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data), requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("zeros: shape/data always agree")
    }

    pub fn scalar(v: S) -> Self {
        Self::new(&[1], vec![v]).expect("scalar tensor")
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<S>> {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Installs a gradient, adding to any gradient already present.
    pub fn accumulate_grad(&mut self, g: Vec<S>) -> Result<(), GradError> {
        if g.len() != self.len() {
            return Err(GradError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("gradient has {} elements, tensor has {}", g.len(), self.len()),
            });
        }
        match &mut self.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, GradError> {
        check_shape(shape, self.len()).map_err(|_| GradError::ShapeMismatch {
            op: "reshape",
            detail: format!("cannot view {:?} as {:?}", self.shape, shape),
        })?;
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data), requires_grad: self.requires_grad, grad: None })
    }

    /// Converts element type, rounding where the target is narrower.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect();
        let mut out = Tensor::new(&self.shape, data).expect("cast keeps shape");
        out.requires_grad = self.requires_grad;
        out
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), GradError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(GradError::ShapeMismatch {
            op: "tensor",
            detail: format!("shape {shape:?} must have positive dimensions"),
        });
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GradError::ShapeMismatch { op: "tensor", detail: format!("shape {shape:?} overflows") })?;
    if n != len {
        return Err(GradError::ShapeMismatch {
            op: "tensor",
            detail: format!("shape {shape:?} needs {n} elements, got {len}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f32>::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn data_mut_copies_on_write() {
        let a = Tensor::<f32>::zeros(&[4]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[2]).with_grad();
        t.accumulate_grad(vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(vec![0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(vec![1.0]).is_err());
    }
}
