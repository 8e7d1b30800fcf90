//! Parameter registration and the small building blocks shared by the model
//! modules. Parameters are addressed by dotted paths, e.g. `encoder.0.attn.q.w`.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{derive_seed, xavier_init, Graph, ParamStore, Tensor, Var};

/// Registers parameters with the default initialization: Xavier-uniform
/// weights, zero biases, unit layer-norm gains.
/// Names are prefixed with `scope`, mirroring [`Graph::set_scope`].
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    scope: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self::scoped(store, seed, "")
    }

    pub fn scoped(store: &'a mut ParamStore<T>, seed: u64, scope: &str) -> Self {
        Init {
            store,
            seed,
            scope: scope.to_string(),
        }
    }

    fn put(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.store.insert(format!("{}{name}", self.scope), t)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let full = format!("{}{name}", self.scope);
        let t = xavier_init(shape, derive_seed(self.seed, &full));
        self.store.insert(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, Tensor::full(shape, T::one()))
    }

    /// `{prefix}.w: [fan_in × fan_out]`, `{prefix}.b: [fan_out]`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), &[fan_in, fan_out])?;
        self.zeros(&format!("{prefix}.b"), &[fan_out])
    }

    /// `{prefix}.gamma`, `{prefix}.beta`.
    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.ones(&format!("{prefix}.gamma"), &[dim])?;
        self.zeros(&format!("{prefix}.beta"), &[dim])
    }
}

pub fn linear<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Join a path prefix and a component name, skipping empty prefixes.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
