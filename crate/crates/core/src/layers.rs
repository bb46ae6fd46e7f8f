//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k × k` kernel, He-initialised, zero bias; padding keeps "same" extents at stride 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_relu<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        g.relu(y)
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.freeze(self.w);
        store.freeze(self.b);
    }
}

/// 2×2 transposed convolution with stride 2: doubles the spatial extents.
#[derive(Clone, Debug)]
pub struct Up {
    pub w: ParamId,
    pub b: ParamId,
}

impl Up {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = store.add_he(format!("{name}.w"), &[cin, cout, 2, 2], cin, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv_transpose2d(x, w, Some(b), 2, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, e: usize, rng: &mut R) -> Self {
        // Xavier-style scale: these layers feed sigmoids, softmax and embeddings
        let std = (1.0 / d as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d, e], std, rng));
        let b = store.add_zeros(format!("{name}.b"), &[e]);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, Some(b))
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.freeze(self.w);
        store.freeze(self.b);
    }
}

/// A learned vector of length `n` repeated for every batch item: `[batch, n]`.
pub fn tile_rows<T: Real>(g: &mut Graph<T>, store: &ParamStore, row: ParamId, batch: usize) -> Result<Var> {
    let ones = g.constant(Tensor::ones(&[batch, 1]));
    let w = g.param(store, row);
    g.linear(ones, w, None)
}
