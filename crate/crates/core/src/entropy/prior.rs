use rand::Rng;

use crate::error::Result;
use crate::tensor::prior_math::{self, PriorTensors, DIMS, LAYERS};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Trainable per-channel density of the coded latent. Parameters live in
/// the model's [`ParamStore`]; this struct only remembers where.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    channels: usize,
    ids: [ParamId; 11],
}

impl FactorizedPrior {
    /// Registers the prior under `<name>.matrix{i}`, `<name>.bias{i}` and
    /// `<name>.factor{i}`. The initial density is wide (roughly ±10) so early
    /// training does not saturate the rate term.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let init_scale: f64 = 10.0;
        let scale = libm::pow(init_scale, 1.0 / LAYERS as f64);
        let shapes = PriorTensors::<T>::shapes(channels);
        let mut ids = Vec::with_capacity(11);
        for (i, shape) in shapes[..LAYERS].iter().enumerate() {
            let init = libm::log(libm::expm1(1.0 / scale / DIMS[i + 1] as f64));
            ids.push(store.add(format!("{name}.matrix{i}"), Tensor::full(shape, T::lit(init)))?);
        }
        for (i, shape) in shapes[LAYERS..2 * LAYERS].iter().enumerate() {
            ids.push(store.add_uniform(format!("{name}.bias{i}"), shape, 0.5, rng)?);
        }
        for (i, shape) in shapes[2 * LAYERS..].iter().enumerate() {
            ids.push(store.add(format!("{name}.factor{i}"), Tensor::zeros(shape))?);
        }
        Ok(Self {
            channels,
            ids: ids.try_into().expect("11 prior tensors"),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ids(&self) -> &[ParamId; 11] {
        &self.ids
    }

    /// Parameter values as a borrowed bundle.
    pub fn tensors<'a, T: Real>(&self, store: &'a ParamStore<T>) -> PriorTensors<'a, T> {
        let refs: Vec<&Tensor<T>> = self.ids.iter().map(|&id| store.value(id)).collect();
        PriorTensors::from_slice(&refs)
    }

    /// Information content of `x` in bits, recorded on the graph.
    pub fn bits<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let params = self.ids.map(|id| g.param(store, id));
        g.prior_bits(x, params)
    }

    /// Information content of `x` in bits, evaluated directly in `f64`.
    pub fn bits_of<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> f64 {
        let owned: Vec<Tensor<f64>> = self.ids.iter().map(|&id| store.value(id).cast()).collect();
        let refs: Vec<&Tensor<f64>> = owned.iter().collect();
        prior_math::bits_forward(&x.cast::<f64>(), &PriorTensors::from_slice(&refs))
    }
}
