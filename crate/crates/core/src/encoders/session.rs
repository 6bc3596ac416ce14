use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore, Scalar, Tensor, Var};

/// A graph under construction plus the parameters it may bind. Parameters
/// for which `trainable` returns false enter the graph as constants, so no
/// gradient is ever produced for them.
pub struct Session<'p, T: Scalar> {
    pub g: Graph<T>,
    stores: Vec<&'p ParamStore<T>>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self { g: Graph::new(), stores: vec![params], trainable: Box::new(trainable) }
    }

    /// Binds names from several stores, searched in order.
    pub fn layered(stores: Vec<&'p ParamStore<T>>, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self { g: Graph::new(), stores, trainable: Box::new(trainable) }
    }

    /// Inference-only session.
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Self::new(params, |_| false)
    }

    pub fn get(&self, name: &str) -> Option<&'p Tensor<T>> {
        self.stores.iter().find_map(|s| s.get(name))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        let trainable = (self.trainable)(name);
        Ok(self.g.param(name, t, trainable))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    /// `x [N, in] · w [in, out] (+ b [out])`.
    pub fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let w = self.p(w)?;
        let mut y = self.g.matmul(x, w)?;
        if let Some(b) = b {
            let b = self.p(b)?;
            y = self.g.add(y, b)?;
        }
        Ok(y)
    }

    /// Layer norm over the last axis with `{prefix}.g` / `{prefix}.b`.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, g, b, T::c(LN_EPS))?)
    }
}

pub const LN_EPS: f64 = 1e-5;
