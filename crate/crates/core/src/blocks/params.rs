//! Named parameter sets.
//!
//! Every parameter container implements [`ParamSet`], which enumerates its
//! tensors under stable dotted names (`norm1.gamma`, `attn.wq`, ...). The
//! same type doubles as the gradient container, and the optimizer,
//! checkpoint writer and gradient checker all work through this one trait.

use crate::numerics::{init_uniform, DenseArray, Rng};

pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray));

    fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all tensors from a flat vector in visiting order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat vector length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(0.0));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// `self += other`, tensor by tensor. Both must share one schema.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += flat[at];
                at += 1;
            }
        });
    }

    /// `(name, shape)` list in visiting order.
    fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for DenseArray {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        f(prefix.to_string(), self)
    }
}

impl<T: ParamSet> ParamSet for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        if let Some(t) = self {
            t.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f)
        }
    }
}

/// Implements [`ParamSet`] for a struct by visiting the listed fields in order.
macro_rules! param_struct {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::blocks::ParamSet for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numerics::DenseArray),
            ) {
                $( self.$field.visit(&$crate::blocks::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numerics::DenseArray),
            ) {
                $( self.$field.visit_mut(&$crate::blocks::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_struct;

/// Affine parameters of a layer norm over `dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: DenseArray,
    pub beta: DenseArray,
}
param_struct!(LayerNormParams { gamma, beta });

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DenseArray::filled(&[dim], 1.0),
            beta: DenseArray::zeros(&[dim]),
        }
    }
}

/// Per-token affine map `x · weight + bias`, weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseArray,
    pub bias: Option<DenseArray>,
}
param_struct!(Linear { weight, bias });

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = init_uniform(&[fan_in, fan_out], fan_in, rng);
        let bias = bias.then(|| init_uniform(&[fan_out], fan_in, rng));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Bias-free Q/K/V/output projections, each `C × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: DenseArray,
    pub wk: DenseArray,
    pub wv: DenseArray,
    pub wo: DenseArray,
}
param_struct!(AttentionParams { wq, wk, wv, wo });

impl AttentionParams {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            wq: init_uniform(&[c, c], c, rng),
            wk: init_uniform(&[c, c], c, rng),
            wv: init_uniform(&[c, c], c, rng),
            wo: init_uniform(&[c, c], c, rng),
        }
    }
}

/// Two-layer feed-forward `C → rC → C` with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}
param_struct!(FfnParams { w1, b1, w2, b2 });

impl FfnParams {
    pub fn init(c: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: init_uniform(&[c, hidden], c, rng),
            b1: init_uniform(&[hidden], c, rng),
            w2: init_uniform(&[hidden, c], hidden, rng),
            b2: init_uniform(&[c], hidden, rng),
        }
    }
}

/// Moves every layer-norm affine away from the identity so that gradient
/// checks exercise the `gamma`/`beta` paths with generic values.
pub fn jitter_norms<P: ParamSet>(params: &mut P, rng: &mut Rng) {
    params.visit_mut("", &mut |name, t| {
        if name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|g| *g = 1.0 + rng.uniform_range(-0.5, 0.5));
        } else if name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
        }
    });
}
