//! Parameter storage and conv-layer builders for the encoder-decoder
//! networks. Networks compute in f32; the public API converts at the
//! frame boundary.

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

/// Named parameter tensors for one network, in construction order.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

#[derive(Clone, Copy)]
pub(crate) struct PId(usize);

impl ParamStore {
    pub(crate) fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: String, v: ArrayD<f32>) -> PId {
        self.names.push(name);
        self.values.push(v);
        PId(self.values.len() - 1)
    }

    pub(crate) fn load(&self, tape: &mut Tape<f32>) -> Loaded {
        Loaded {
            ids: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.values.len()
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &ArrayD<f32>)) {
        for (n, v) in self.names.iter().zip(self.values.iter()) {
            f(&format!("{prefix}.{n}"), v);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut ArrayD<f32>)) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            f(&format!("{prefix}.{n}"), v);
        }
    }

    /// Add zero-mean Gaussian noise to every parameter (test utility for
    /// exercising non-degenerate weights without a training run).
    pub(crate) fn perturb(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        let dist = Normal::new(0.0, scale).unwrap();
        for v in self.values.iter_mut() {
            v.mapv_inplace(|x| x + dist.sample(rng) as f32);
        }
    }
}

/// Tape node ids of one store's parameters for the current forward pass.
pub(crate) struct Loaded {
    ids: Vec<NodeId>,
}

impl Loaded {
    pub(crate) fn get(&self, p: PId) -> NodeId {
        self.ids[p.0]
    }

    pub(crate) fn all(&self) -> &[NodeId] {
        &self.ids
    }
}

pub(crate) enum Init {
    He,
    Zero,
}

fn he_weights(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let fan_in = (k * k * cin) as f64;
    let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((k, k, cin, cout), |_| dist.sample(rng) as f32)
}

pub(crate) struct Conv {
    w: PId,
    b: PId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = match init {
            Init::He => he_weights(k, cin, cout, rng),
            Init::Zero => Array4::zeros((k, k, cin, cout)),
        };
        let w = store.add(format!("{name}.w"), w.into_dyn());
        let b = store.add(format!("{name}.b"), Array1::<f32>::zeros(cout).into_dyn());
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn apply(&self, t: &mut Tape<f32>, lp: &Loaded, x: NodeId) -> NodeId {
        t.conv2d(x, lp.get(self.w), lp.get(self.b), self.stride, self.pad)
    }
}

/// Transposed conv, kernel 4 stride 2 pad 1: exact 2x spatial upsampling.
pub(crate) struct ConvT {
    w: PId,
    b: PId,
}

impl ConvT {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_weights(4, cin, cout, rng).into_dyn());
        let b = store.add(format!("{name}.b"), Array1::<f32>::zeros(cout).into_dyn());
        ConvT { w, b }
    }

    pub(crate) fn apply(&self, t: &mut Tape<f32>, lp: &Loaded, x: NodeId) -> NodeId {
        t.conv_transpose2d(x, lp.get(self.w), lp.get(self.b), 2, 1)
    }
}

pub(crate) fn lrelu(t: &mut Tape<f32>, x: NodeId) -> NodeId {
    t.leaky_relu(x, LEAKY_SLOPE as f32)
}

pub(crate) fn to_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|v| v as f32)
}

pub(crate) fn to_f64(a: &ndarray::ArrayView3<'_, f32>) -> Array3<f64> {
    a.mapv(|v| v as f64)
}
