use pmr_core::media::{Frame, FrameClip};
use pmr_core::Scalar;

/// Dense row-major tensor. Feature stacks are `(T, H, W, C)`, convolution
/// weights `(Cout, Cin/groups, kt, kh, kw)`, scalars shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data length mismatch");
        Self { shape: shape.to_vec(), data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "accumulating mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.f64())).collect() }
    }
}

/// Clip -> `(T, H, W, C)` tensor.
pub fn clip_to_tensor<S: Scalar>(clip: &FrameClip<S>) -> Tensor<S> {
    let (t, h, w, c) = clip.shape();
    let mut data = Vec::with_capacity(t * h * w * c);
    for frame in clip.frames() {
        data.extend_from_slice(frame.data());
    }
    Tensor::from_vec(&[t, h, w, c], data)
}

/// `(T, H, W, C)` tensor -> clip, clamping into `[0, 1]`.
pub fn tensor_to_clip<S: Scalar>(t: &Tensor<S>) -> FrameClip<S> {
    let s = t.shape();
    assert_eq!(s.len(), 4, "clip tensors are 4-d");
    let (nt, h, w, c) = (s[0], s[1], s[2], s[3]);
    let frames = (0..nt)
        .map(|ti| {
            let base = ti * h * w * c;
            Frame::from_vec(h, w, c, t.data()[base..base + h * w * c].to_vec()).expect("sized")
        })
        .collect();
    FrameClip::from_frames_clamped(frames).expect("valid frame geometry")
}
