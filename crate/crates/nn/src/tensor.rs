use crate::Scalar;

/// Dense row-major tensor. Image batches use `[N, C, H, W]`, feature
/// batches `[N, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match {} elements", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two `[N, A]` and `[N, B]` feature batches into `[N, A + B]`.
    pub fn concat_features(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape.len(), 2, "concat_features expects [N, F]");
        assert_eq!(b.shape.len(), 2, "concat_features expects [N, F]");
        assert_eq!(a.shape[0], b.shape[0], "batch mismatch");
        let (n, fa, fb) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            data.extend_from_slice(&a.data[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&b.data[i * fb..(i + 1) * fb]);
        }
        Self { shape: vec![n, fa + fb], data }
    }

    /// Inverse of [`Tensor::concat_features`].
    pub fn split_features(&self, first: usize) -> (Self, Self) {
        assert_eq!(self.shape.len(), 2, "split_features expects [N, F]");
        let (n, f) = (self.shape[0], self.shape[1]);
        assert!(first <= f);
        let mut a = Vec::with_capacity(n * first);
        let mut b = Vec::with_capacity(n * (f - first));
        for i in 0..n {
            let row = &self.data[i * f..(i + 1) * f];
            a.extend_from_slice(&row[..first]);
            b.extend_from_slice(&row[first..]);
        }
        (Self { shape: vec![n, first], data: a }, Self { shape: vec![n, f - first], data: b })
    }

    /// Stacks equally shaped items along a new leading batch dimension.
    pub fn stack(items: &[&[T]], item_shape: &[usize]) -> Self {
        let len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * len);
        for item in items {
            assert_eq!(item.len(), len, "stack: item length mismatch");
            data.extend_from_slice(item);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Self { shape, data }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}
