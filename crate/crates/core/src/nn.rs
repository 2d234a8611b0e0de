//! Parameterised layers backed by a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            bias: store.add_full(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[width], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::register(store, &format!("{name}.q"), width, width, rng),
            key: Linear::register(store, &format!("{name}.k"), width, width, rng),
            value: Linear::register(store, &format!("{name}.v"), width, width, rng),
            output: Linear::register(store, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, values);
        let a = g.attention(q, k, v, self.heads);
        self.output.forward(g, store, a)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::register(store, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
