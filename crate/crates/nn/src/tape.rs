//! Eager reverse-mode autodiff. Every operation computes its value
//! immediately and records a one-shot backward closure; [`Tape::backward`]
//! consumes the tape and returns per-node gradients. Ops panic on violated
//! shape contracts (callers validate at the public network boundaries).

use crate::tensor::Tensor;
use pmr_core::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

pub struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn accumulate(&mut self, id: VarId, g: Tensor<S>) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<S>> {
        self.slots[id.0].take()
    }
}

type BackFn<S> = Box<dyn FnOnce(&Tensor<S>, &mut Grads<S>)>;

struct Node<S> {
    value: Tensor<S>,
    back: Option<BackFn<S>>,
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Insert a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor<S>) -> VarId {
        self.nodes.push(Node { value, back: None });
        VarId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, back: BackFn<S>) -> VarId {
        self.nodes.push(Node { value, back: Some(back) });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1; the loss must be scalar.
    pub fn backward(mut self, loss: VarId) -> Grads<S> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads = Grads { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.accumulate(loss, Tensor::scalar(S::one()));
        for i in (0..self.nodes.len()).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = self.nodes[i].back.take() {
                let g = grads.slots[i].clone().expect("gradient present");
                back(&g, &mut grads);
            }
        }
        grads
    }

    // ----- elementwise arithmetic -----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Box::new(move |g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        self.push(out, Box::new(move |g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g.map(|v| -v));
        }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        self.push(out, Box::new(move |g, grads| {
            let ga = Tensor::from_vec(
                g.shape(),
                g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect(),
            );
            let gb = Tensor::from_vec(
                g.shape(),
                g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect(),
            );
            grads.accumulate(a, ga);
            grads.accumulate(b, gb);
        }))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let ks = S::of(k);
        let out = self.value(a).map(|v| v * ks);
        self.push(out, Box::new(move |g, grads| {
            grads.accumulate(a, g.map(|v| v * ks));
        }))
    }

    /// Elementwise mean of several same-shaped tensors.
    pub fn mean_many(&mut self, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty(), "mean over empty list");
        let shape = self.value(ids[0]).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &id in ids {
            acc.add_assign(self.value(id));
        }
        let inv = S::of(1.0 / ids.len() as f64);
        let out = acc.map(|v| v * inv);
        let ids = ids.to_vec();
        self.push(out, Box::new(move |g, grads| {
            let part = g.map(|v| v * inv);
            for id in ids {
                grads.accumulate(id, part.clone());
            }
        }))
    }

    /// Scalar mean over all elements.
    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).numel();
        let inv = S::of(1.0 / n as f64);
        let total: S = self.value(a).data().iter().copied().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::scalar(total * inv), Box::new(move |g, grads| {
            let gv = g.item() * inv;
            grads.accumulate(a, Tensor::full(&shape, gv));
        }))
    }

    /// Elementwise `sqrt(v^2 + eps^2)`, the Charbonnier penalty kernel.
    pub fn charbonnier_kernel(&mut self, a: VarId, eps: f64) -> VarId {
        let av = self.value(a).clone();
        let e2 = S::of(eps * eps);
        let out = av.map(|v| (v * v + e2).sqrt());
        let ov = out.clone();
        self.push(out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(av.data().iter().zip(ov.data()))
                .map(|(&gv, (&x, &y))| gv * x / y)
                .collect();
            grads.accumulate(a, Tensor::from_vec(g.shape(), data));
        }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let fwd = |x: f64| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
        let out = av.map(|v| S::of(fwd(v.f64())));
        self.push(out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&gv, &xv)| {
                    let x = xv.f64();
                    let u = c * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    gv * S::of(d)
                })
                .collect();
            grads.accumulate(a, Tensor::from_vec(g.shape(), data));
        }))
    }

    /// Clamp into `[0, 1]`; gradient passes inside the closed interval.
    pub fn clamp01(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(|v| v.max(S::zero()).min(S::one()));
        self.push(out, Box::new(move |g, grads| {
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&gv, &x)| if x >= S::zero() && x <= S::one() { gv } else { S::zero() })
                .collect();
            grads.accumulate(a, Tensor::from_vec(g.shape(), data));
        }))
    }

    /// Concatenate two 4-d stacks along the channel (last) axis.
    pub fn concat_c(&mut self, a: VarId, b: VarId) -> VarId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa.len(), 4);
        assert_eq!(&sa[..3], &sb[..3], "concat_c spatial mismatch");
        let (ca, cb) = (sa[3], sb[3]);
        let positions = sa[0] * sa[1] * sa[2];
        let mut data = Vec::with_capacity(positions * (ca + cb));
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for p in 0..positions {
                data.extend_from_slice(&da[p * ca..(p + 1) * ca]);
                data.extend_from_slice(&db[p * cb..(p + 1) * cb]);
            }
        }
        let out = Tensor::from_vec(&[sa[0], sa[1], sa[2], ca + cb], data);
        self.push(out, Box::new(move |g, grads| {
            let mut ga = Tensor::zeros(&sa);
            let mut gb = Tensor::zeros(&sb);
            for p in 0..positions {
                let row = &g.data()[p * (ca + cb)..(p + 1) * (ca + cb)];
                ga.data_mut()[p * ca..(p + 1) * ca].copy_from_slice(&row[..ca]);
                gb.data_mut()[p * cb..(p + 1) * cb].copy_from_slice(&row[ca..]);
            }
            grads.accumulate(a, ga);
            grads.accumulate(b, gb);
        }))
    }

    /// Channel slice `[from, to)` of a 4-d stack.
    pub fn slice_c(&mut self, a: VarId, from: usize, to: usize) -> VarId {
        let sa = self.value(a).shape().to_vec();
        assert_eq!(sa.len(), 4);
        assert!(from < to && to <= sa[3], "slice_c out of range");
        let c = sa[3];
        let positions = sa[0] * sa[1] * sa[2];
        let width = to - from;
        let mut data = Vec::with_capacity(positions * width);
        {
            let da = self.value(a).data();
            for p in 0..positions {
                data.extend_from_slice(&da[p * c + from..p * c + to]);
            }
        }
        let out = Tensor::from_vec(&[sa[0], sa[1], sa[2], width], data);
        self.push(out, Box::new(move |g, grads| {
            let mut ga = Tensor::zeros(&sa);
            for p in 0..positions {
                ga.data_mut()[p * c + from..p * c + to]
                    .copy_from_slice(&g.data()[p * width..(p + 1) * width]);
            }
            grads.accumulate(a, ga);
        }))
    }
}
