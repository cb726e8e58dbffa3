//! Parameterized layers built on the graph primitives.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Negative-side slope of every activation in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` / `<name>.bias` with He-uniform init.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], bound, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    /// Multiply-accumulates for an `[n, cin, h, w]` input.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        (n * self.cout * self.out_extent(h) * self.out_extent(w) * self.cin * self.k * self.k) as u64
    }
}

/// Transposed convolution. Kernel 4 / padding 1 upsamples by the stride;
/// kernel 3 / padding 1 / stride 1 keeps the extent.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = if stride == 1 { 3 } else { 2 * stride };
        let pad = if stride == 1 { 1 } else { stride / 2 };
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[cin, cout, k, k], bound, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }

    pub fn params(&self) -> usize {
        self.cin * self.cout * self.k * self.k + self.cout
    }

    /// Multiply-accumulates for an `[n, cin, h, w]` input (every input pixel
    /// scatters a `cout × k × k` patch).
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        (n * self.cin * h * w * self.cout * self.k * self.k) as u64
    }
}

/// Running tally of parameters and multiply-accumulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    pub fn conv(&mut self, c: &Conv2d, n: usize, h: usize, w: usize) -> (usize, usize) {
        self.params += c.params() as u64;
        self.macs += c.macs(n, h, w);
        (c.out_extent(h), c.out_extent(w))
    }

    pub fn convt(&mut self, c: &ConvTranspose2d, n: usize, h: usize, w: usize) -> (usize, usize) {
        self.params += c.params() as u64;
        self.macs += c.macs(n, h, w);
        (c.out_extent(h), c.out_extent(w))
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Self) {
        self.params += o.params;
        self.macs += o.macs;
    }
}
