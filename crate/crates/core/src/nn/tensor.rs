use super::Scalar;

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack an empty list");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * items[0].data.len());
        for t in items {
            assert_eq!([t.shape[1], t.shape[2], t.shape[3]], [s[1], s[2], s[3]]);
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape[0]).sum();
        Self::from_vec([n, s[1], s[2], s[3]], data)
    }

    /// Channel-wise concatenation `[a | b]`.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Self {
        assert_eq!(a.n(), b.n(), "concat: batch mismatch");
        assert_eq!((a.h(), a.w()), (b.h(), b.w()), "concat: spatial mismatch");
        let (la, lb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n() {
            data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
            data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
        }
        Self::from_vec([a.n(), a.c() + b.c(), a.h(), a.w()], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Tensor<T>, Tensor<T>) {
        assert!(c <= self.c());
        let hw = self.h() * self.w();
        let (la, lb) = (c * hw, (self.c() - c) * hw);
        let mut a = Vec::with_capacity(self.n() * la);
        let mut b = Vec::with_capacity(self.n() * lb);
        for i in 0..self.n() {
            let s = self.sample(i);
            a.extend_from_slice(&s[..la]);
            b.extend_from_slice(&s[la..]);
        }
        (
            Self::from_vec([self.n(), c, self.h(), self.w()], a),
            Self::from_vec([self.n(), self.c() - c, self.h(), self.w()], b),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }
}
