//! Parameter layout of the attention network.
//!
//! The containers are generic over the leaf type so one layout serves
//! parameter values (`Matrix`), gradients (`Matrix`), Adam moments (`Matrix`)
//! and tape handles (`Var`). Every traversal visits leaves in the same fixed
//! order, which is also the checkpoint order:
//!
//! ```text
//! pos_encoder.{0..3}.{weight,bias}
//! layers.{l}.{intra,inter}.{query,key,value,merge}.{weight,bias}
//! layers.{l}.{intra,inter}.mlp_hidden.{weight,bias}
//! layers.{l}.{intra,inter}.mlp_norm.{gamma,beta}
//! layers.{l}.{intra,inter}.mlp_out.{weight,bias}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PgatError, Result};
use crate::numerics::{Linear, MaskedNorm, Matrix};

/// Hidden widths of the positional encoder between the 3-d input and `E`.
pub const POS_ENCODER_HIDDEN: [usize; 3] = [32, 64, 128];

/// Init bound multiplier for the merge projection and the last message-MLP
/// layer, so a fresh network starts close to the identity.
pub const NEAR_ZERO_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Descriptor width `E`.
    pub descriptor_dim: usize,
    /// Number of (intra, inter) layers `L`.
    pub layers: usize,
    /// Attention heads `h`; must divide `E`.
    pub heads: usize,
}

impl ModelDims {
    /// E = 256, L = 9, h = 4.
    pub const DEFAULT: ModelDims = ModelDims {
        descriptor_dim: 256,
        layers: 9,
        heads: 4,
    };

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 || self.heads == 0 {
            return Err(PgatError::Config("descriptor dim and heads must be positive".into()));
        }
        if !self.descriptor_dim.is_multiple_of(self.heads) {
            return Err(PgatError::Config(format!(
                "descriptor dim {} is not divisible by {} heads",
                self.descriptor_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.descriptor_dim / self.heads
    }
}

/// One multi-head attention block plus its message MLP.
///
/// `query`, `key` and `value` are E×E; head `k` owns rows
/// `k·d_k .. (k+1)·d_k` of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub merge: Linear<T>,
    /// 2E → 2E
    pub mlp_hidden: Linear<T>,
    pub mlp_norm: MaskedNorm<T>,
    /// 2E → E
    pub mlp_out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub intra: AttentionBlock<T>,
    pub inter: AttentionBlock<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub dims: ModelDims,
    /// 3 → 32 → 64 → 128 → E, rectified between layers.
    pub pos_encoder: Vec<Linear<T>>,
    pub layers: Vec<Layer<T>>,
}

pub type ModelParams = Model<Matrix>;

fn map_linear<'s, T, U>(l: &'s Linear<T>, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> Linear<U> {
    Linear {
        weight: f(&format!("{prefix}.weight"), &l.weight),
        bias: f(&format!("{prefix}.bias"), &l.bias),
    }
}

fn map_block<'s, T, U>(b: &'s AttentionBlock<T>, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> AttentionBlock<U> {
    AttentionBlock {
        query: map_linear(&b.query, &format!("{prefix}.query"), f),
        key: map_linear(&b.key, &format!("{prefix}.key"), f),
        value: map_linear(&b.value, &format!("{prefix}.value"), f),
        merge: map_linear(&b.merge, &format!("{prefix}.merge"), f),
        mlp_hidden: map_linear(&b.mlp_hidden, &format!("{prefix}.mlp_hidden"), f),
        mlp_norm: MaskedNorm {
            gamma: f(&format!("{prefix}.mlp_norm.gamma"), &b.mlp_norm.gamma),
            beta: f(&format!("{prefix}.mlp_norm.beta"), &b.mlp_norm.beta),
            epsilon: b.mlp_norm.epsilon,
        },
        mlp_out: map_linear(&b.mlp_out, &format!("{prefix}.mlp_out"), f),
    }
}

fn visit_linear_mut<T>(l: &mut Linear<T>, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
    f(&format!("{prefix}.weight"), &mut l.weight);
    f(&format!("{prefix}.bias"), &mut l.bias);
}

fn visit_block_mut<T>(b: &mut AttentionBlock<T>, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
    visit_linear_mut(&mut b.query, &format!("{prefix}.query"), f);
    visit_linear_mut(&mut b.key, &format!("{prefix}.key"), f);
    visit_linear_mut(&mut b.value, &format!("{prefix}.value"), f);
    visit_linear_mut(&mut b.merge, &format!("{prefix}.merge"), f);
    visit_linear_mut(&mut b.mlp_hidden, &format!("{prefix}.mlp_hidden"), f);
    f(&format!("{prefix}.mlp_norm.gamma"), &mut b.mlp_norm.gamma);
    f(&format!("{prefix}.mlp_norm.beta"), &mut b.mlp_norm.beta);
    visit_linear_mut(&mut b.mlp_out, &format!("{prefix}.mlp_out"), f);
}

impl<T> Model<T> {
    /// Rebuilds the layout with every leaf passed through `f`, in canonical
    /// order.
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> Model<U> {
        let f: &mut dyn FnMut(&str, &'s T) -> U = &mut f;
        let pos_encoder = self
            .pos_encoder
            .iter()
            .enumerate()
            .map(|(i, l)| map_linear(l, &format!("pos_encoder.{i}"), f))
            .collect();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| Layer {
                intra: map_block(&layer.intra, &format!("layers.{i}.intra"), f),
                inter: map_block(&layer.inter, &format!("layers.{i}.inter"), f),
            })
            .collect();
        Model {
            dims: self.dims,
            pos_encoder,
            layers,
        }
    }

    pub fn try_map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> Result<U>) -> Result<Model<U>> {
        let mut first_err = None;
        let mapped = self.map(|name, t| {
            if first_err.is_some() {
                return None;
            }
            f(name, t).map_err(|e| first_err = Some(e)).ok()
        });
        match first_err {
            Some(e) => Err(e),
            None => Ok(mapped.into_map(|u| u.expect("every leaf mapped"))),
        }
    }

    /// Consuming variant of [`Model::map`] without names.
    pub fn into_map<U>(self, mut f: impl FnMut(T) -> U) -> Model<U> {
        let mut lin = |l: Linear<T>| Linear {
            weight: f(l.weight),
            bias: f(l.bias),
        };
        let pos_encoder = self.pos_encoder.into_iter().map(&mut lin).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in self.layers {
            let mut blocks = Vec::with_capacity(2);
            for b in [layer.intra, layer.inter] {
                let query = lin(b.query);
                let key = lin(b.key);
                let value = lin(b.value);
                let merge = lin(b.merge);
                let mlp_hidden = lin(b.mlp_hidden);
                let (g, be) = (b.mlp_norm.gamma, b.mlp_norm.beta);
                let epsilon = b.mlp_norm.epsilon;
                // gamma/beta go through the same closure as the linear leaves
                let gamma_beta = lin(Linear { weight: g, bias: be });
                let mlp_out = lin(b.mlp_out);
                blocks.push(AttentionBlock {
                    query,
                    key,
                    value,
                    merge,
                    mlp_hidden,
                    mlp_norm: MaskedNorm {
                        gamma: gamma_beta.weight,
                        beta: gamma_beta.bias,
                        epsilon,
                    },
                    mlp_out,
                });
            }
            let inter = blocks.pop().expect("two blocks");
            let intra = blocks.pop().expect("two blocks");
            layers.push(Layer { intra, inter });
        }
        Model {
            dims: self.dims,
            pos_encoder,
            layers,
        }
    }

    /// Visits every leaf mutably, in canonical order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f: &mut dyn FnMut(&str, &mut T) = &mut f;
        for (i, l) in self.pos_encoder.iter_mut().enumerate() {
            visit_linear_mut(l, &format!("pos_encoder.{i}"), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_block_mut(&mut layer.intra, &format!("layers.{i}.intra"), f);
            visit_block_mut(&mut layer.inter, &format!("layers.{i}.inter"), f);
        }
    }

    /// Visits every leaf, in canonical order.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(&str, &'s T)) {
        self.map(|name, t| f(name, t));
    }

    /// Leaf names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|name, _| out.push(name.to_string()));
        out
    }
}

fn init_linear<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Linear<Matrix> {
    let bound = scale / (input as f64).sqrt();
    Linear {
        weight: Matrix::random_uniform(output, input, bound, rng),
        bias: Matrix::zeros(output, 1),
    }
}

impl AttentionBlock<Matrix> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        AttentionBlock {
            query: init_linear(dim, dim, 1.0, rng),
            key: init_linear(dim, dim, 1.0, rng),
            value: init_linear(dim, dim, 1.0, rng),
            merge: init_linear(dim, dim, NEAR_ZERO_INIT_SCALE, rng),
            mlp_hidden: init_linear(2 * dim, 2 * dim, 1.0, rng),
            mlp_norm: MaskedNorm::identity(2 * dim),
            mlp_out: init_linear(2 * dim, dim, NEAR_ZERO_INIT_SCALE, rng),
        }
    }
}

impl Model<Matrix> {
    /// Fan-in scaled uniform weights, zero biases, unit norm scales.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut widths = vec![3];
        widths.extend_from_slice(&POS_ENCODER_HIDDEN);
        widths.push(dims.descriptor_dim);
        let pos_encoder = widths
            .windows(2)
            .map(|w| init_linear(w[0], w[1], 1.0, rng))
            .collect();
        let layers = (0..dims.layers)
            .map(|_| Layer {
                intra: AttentionBlock::init(dims.descriptor_dim, rng),
                inter: AttentionBlock::init(dims.descriptor_dim, rng),
            })
            .collect();
        Ok(Model {
            dims,
            pos_encoder,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, m| n += m.len());
        n
    }

    /// Named tensor shapes in canonical order.
    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(|name, m| out.push((name.to_string(), m.shape())));
        out
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit(|_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Overwrites every parameter from a flat slice in canonical order.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.parameter_count();
        if values.len() != total {
            return Err(PgatError::dim(format!(
                "{} values for {total} parameters",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(|_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Elementwise `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &Model<Matrix>) -> Result<()> {
        if self.dims != other.dims {
            return Err(PgatError::dim("adding models of different dims"));
        }
        let mut rhs = Vec::new();
        other.visit(|_, m| rhs.push(m));
        let mut idx = 0;
        let mut err = None;
        self.visit_mut(|_, m| {
            if let Err(e) = m.add_assign(rhs[idx]) {
                err.get_or_insert(e);
            }
            idx += 1;
        });
        err.map_or(Ok(()), Err)
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.visit_mut(|_, m| m.scale_in_place(k));
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut found = None;
        self.visit(|name, m| {
            if found.is_none() && !m.is_finite() {
                found = Some(name.to_string());
            }
        });
        found
    }

    /// Structural checks run after loading from disk.
    pub fn validate_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        if self.shapes() != expected_shapes(self.dims) {
            return Err(PgatError::dim("parameter shapes do not match the declared dims"));
        }
        let eps_ok = self
            .layers
            .iter()
            .flat_map(|l| [&l.intra, &l.inter])
            .all(|b| b.mlp_norm.epsilon > 0.0);
        if !eps_ok {
            return Err(PgatError::Input("norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Named tensor shapes of a model with the given dims, in canonical order.
pub fn expected_shapes(dims: ModelDims) -> Vec<(String, (usize, usize))> {
    let e = dims.descriptor_dim;
    let mut out = Vec::new();
    let mut widths = vec![3];
    widths.extend_from_slice(&POS_ENCODER_HIDDEN);
    widths.push(e);
    for (i, w) in widths.windows(2).enumerate() {
        out.push((format!("pos_encoder.{i}.weight"), (w[1], w[0])));
        out.push((format!("pos_encoder.{i}.bias"), (w[1], 1)));
    }
    for l in 0..dims.layers {
        for kind in ["intra", "inter"] {
            let p = format!("layers.{l}.{kind}");
            for (name, rows, cols) in [
                ("query", e, e),
                ("key", e, e),
                ("value", e, e),
                ("merge", e, e),
                ("mlp_hidden", 2 * e, 2 * e),
            ] {
                out.push((format!("{p}.{name}.weight"), (rows, cols)));
                out.push((format!("{p}.{name}.bias"), (rows, 1)));
            }
            out.push((format!("{p}.mlp_norm.gamma"), (2 * e, 1)));
            out.push((format!("{p}.mlp_norm.beta"), (2 * e, 1)));
            out.push((format!("{p}.mlp_out.weight"), (e, 2 * e)));
            out.push((format!("{p}.mlp_out.bias"), (e, 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_model_has_about_twelve_million_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(ModelDims::DEFAULT, &mut rng).unwrap();
        let n = m.parameter_count();
        assert_eq!(n, 11_890_752);
        assert_eq!(m.shapes(), expected_shapes(ModelDims::DEFAULT));
        assert!((n as f64 - 12e6).abs() / 12e6 < 0.05);
    }

    #[test]
    fn traversals_share_one_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::init(
            ModelDims {
                descriptor_dim: 4,
                layers: 2,
                heads: 2,
            },
            &mut rng,
        )
        .unwrap();
        let names = m.names();
        let mut mut_names = Vec::new();
        m.visit_mut(|n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
        assert_eq!(names[0], "pos_encoder.0.weight");
        assert!(names.contains(&"layers.1.inter.mlp_norm.gamma".to_string()));

        let flat = m.flatten();
        let mut copy = m.zeros_like();
        copy.assign_flat(&flat).unwrap();
        assert_eq!(copy, m);

        let owned = m.clone().into_map(|t| t.len());
        let mut sizes = Vec::new();
        m.visit(|_, t| sizes.push(t.len()));
        let mut owned_sizes = Vec::new();
        owned.visit(|_, s| owned_sizes.push(*s));
        assert_eq!(sizes, owned_sizes);
    }

    #[test]
    fn heads_must_divide_dim() {
        let dims = ModelDims {
            descriptor_dim: 6,
            layers: 1,
            heads: 4,
        };
        assert!(dims.validate().is_err());
    }
}
