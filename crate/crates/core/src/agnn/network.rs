//! Forward pass of the attention network, recorded on an autodiff tape.

use crate::error::{PgatError, Result};
use crate::numerics::{Graph, Matrix, Var};
use crate::pose_graph::{KeynodeSet, Subgraph};

use super::params::{AttentionBlock, Model, ModelDims, ModelParams};

/// Padded model input for one subgraph.
///
/// Columns whose mask entry is `false` are padding and hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphTensor {
    /// E × width
    pub descriptors: Matrix,
    /// 3 × width, normalized per subgraph
    pub positions: Matrix,
    pub mask: Vec<bool>,
}

impl SubgraphTensor {
    pub fn new(descriptors: Matrix, positions: Matrix, mask: Vec<bool>) -> Result<Self> {
        let width = mask.len();
        if descriptors.cols() != width || positions.cols() != width || positions.rows() != 3 {
            return Err(PgatError::dim(format!(
                "descriptors {:?} / positions {:?} for a mask of {width}",
                descriptors.shape(),
                positions.shape()
            )));
        }
        let t = SubgraphTensor {
            descriptors,
            positions,
            mask,
        };
        for j in t.padding_columns() {
            let dirty = (0..t.descriptors.rows()).any(|e| t.descriptors[(e, j)] != 0.0)
                || (0..3).any(|k| t.positions[(k, j)] != 0.0);
            if dirty {
                return Err(PgatError::Input(format!("padding column {j} is not zero")));
            }
        }
        Ok(t)
    }

    /// Gathers descriptors and normalized positions of `sub`, padded with
    /// zero columns up to `width`.
    pub fn from_subgraph(sub: &Subgraph, keynodes: &KeynodeSet, width: usize) -> Result<Self> {
        let n = sub.len();
        if width < n {
            return Err(PgatError::dim(format!("cannot pad {n} nodes into width {width}")));
        }
        let e = keynodes.descriptor_dim();
        let mut descriptors = Matrix::zeros(e, width);
        let mut positions = Matrix::zeros(3, width);
        for (j, id) in sub.keynode_ids.iter().enumerate() {
            let node = keynodes.get(*id)?;
            descriptors.set_col(j, &node.descriptor);
            positions.set_col(j, &sub.positions[j]);
        }
        let mask = (0..width).map(|j| j < n).collect();
        Ok(SubgraphTensor {
            descriptors,
            positions,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_columns(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|j| self.mask[*j]).collect()
    }

    pub fn padding_columns(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|j| !self.mask[*j]).collect()
    }
}

/// Puts every parameter on the tape as a borrowed leaf.
pub fn register<'a>(g: &mut Graph<'a>, model: &'a ModelParams) -> Model<Var> {
    model.map(|_, m| g.input(m))
}

/// `X = D + MLP_enc(P)`, padding columns forced back to zero.
pub fn encode_on_graph(g: &mut Graph<'_>, model: &Model<Var>, d: Var, p: Var, mask: &[bool]) -> Result<Var> {
    let mut h = p;
    let last = model.pos_encoder.len().saturating_sub(1);
    for (i, layer) in model.pos_encoder.iter().enumerate() {
        h = g.linear(layer.weight, layer.bias, h)?;
        if i < last {
            h = g.relu(h);
        }
    }
    let fused = g.add(d, h)?;
    g.mask_columns(fused, mask)
}

/// One residual attention update of the receivers `xr` from the senders `xs`.
pub fn attention_on_graph(
    g: &mut Graph<'_>,
    block: &AttentionBlock<Var>,
    heads: usize,
    xr: Var,
    mask_r: &[bool],
    xs: Var,
    mask_s: &[bool],
) -> Result<Var> {
    let dim = g.value(xr).rows();
    if g.value(xs).rows() != dim {
        return Err(PgatError::dim("receiver and sender feature dims differ"));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(PgatError::dim(format!("{heads} heads for dim {dim}")));
    }
    let head_dim = dim / heads;
    let q = g.linear(block.query.weight, block.query.bias, xr)?;
    let k = g.linear(block.key.weight, block.key.bias, xs)?;
    let v = g.linear(block.value.weight, block.value.bias, xs)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut messages = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_rows(q, h * head_dim, head_dim)?;
        let kh = g.slice_rows(k, h * head_dim, head_dim)?;
        let vh = g.slice_rows(v, h * head_dim, head_dim)?;
        let scores = g.matmul_tn(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax(scores, mask_s)?;
        // (d_k × N_S)(N_S × N_R)
        messages.push(g.matmul_nt(vh, attn)?);
    }
    let stacked = g.concat_rows(&messages)?;
    let message = g.linear(block.merge.weight, block.merge.bias, stacked)?;

    let joined = g.concat_rows(&[xr, message])?;
    let hidden = g.linear(block.mlp_hidden.weight, block.mlp_hidden.bias, joined)?;
    let hidden = g.masked_norm(
        hidden,
        block.mlp_norm.gamma,
        block.mlp_norm.beta,
        block.mlp_norm.epsilon,
        mask_r,
    )?;
    let hidden = g.relu(hidden);
    let update = g.linear(block.mlp_out.weight, block.mlp_out.bias, hidden)?;
    let update = g.mask_columns(update, mask_r)?;
    g.add(xr, update)
}

/// Intra then inter message passing for every layer. Returns the refined
/// padded feature matrices of both subgraphs.
pub fn forward_on_graph<'a>(
    g: &mut Graph<'a>,
    model: &Model<Var>,
    a: &'a SubgraphTensor,
    b: &'a SubgraphTensor,
) -> Result<(Var, Var)> {
    check_inputs(model.dims, a)?;
    check_inputs(model.dims, b)?;
    let da = g.input(&a.descriptors);
    let pa = g.input(&a.positions);
    let db = g.input(&b.descriptors);
    let pb = g.input(&b.positions);
    let mut xa = encode_on_graph(g, model, da, pa, &a.mask)?;
    let mut xb = encode_on_graph(g, model, db, pb, &b.mask)?;
    let heads = model.dims.heads;
    for layer in &model.layers {
        let na = attention_on_graph(g, &layer.intra, heads, xa, &a.mask, xa, &a.mask)?;
        let nb = attention_on_graph(g, &layer.intra, heads, xb, &b.mask, xb, &b.mask)?;
        xa = attention_on_graph(g, &layer.inter, heads, na, &a.mask, nb, &b.mask)?;
        xb = attention_on_graph(g, &layer.inter, heads, nb, &b.mask, na, &a.mask)?;
    }
    Ok((xa, xb))
}

fn check_inputs(dims: ModelDims, t: &SubgraphTensor) -> Result<()> {
    if t.descriptors.rows() != dims.descriptor_dim {
        return Err(PgatError::dim(format!(
            "{}-dim descriptors for a model with E = {}",
            t.descriptors.rows(),
            dims.descriptor_dim
        )));
    }
    if t.positions.rows() != 3 || t.positions.cols() != t.width() || t.descriptors.cols() != t.width() {
        return Err(PgatError::dim("subgraph tensor shapes disagree with its mask"));
    }
    if !t.mask.iter().any(|m| *m) {
        return Err(PgatError::Degenerate("subgraph has no valid keynodes".into()));
    }
    Ok(())
}

/// Fuses positional encodings into descriptors (no tape kept).
pub fn encode_and_fuse(d: &Matrix, p: &Matrix, mask: &[bool], model: &ModelParams) -> Result<Matrix> {
    if d.rows() != model.dims.descriptor_dim || p.rows() != 3 || d.cols() != p.cols() || mask.len() != d.cols() {
        return Err(PgatError::dim(format!(
            "descriptors {:?}, positions {:?}, mask {}",
            d.shape(),
            p.shape(),
            mask.len()
        )));
    }
    let mut g = Graph::new();
    let mv = register(&mut g, model);
    let dv = g.input(d);
    let pv = g.input(p);
    let x = encode_on_graph(&mut g, &mv, dv, pv, mask)?;
    Ok(g.value(x).clone())
}

/// One attention block applied outside of a training graph.
pub fn attention_block(
    xr: &Matrix,
    mask_r: &[bool],
    xs: &Matrix,
    mask_s: &[bool],
    block: &AttentionBlock<Matrix>,
    heads: usize,
) -> Result<Matrix> {
    if xr.cols() != mask_r.len() || xs.cols() != mask_s.len() {
        return Err(PgatError::dim("feature columns and masks disagree"));
    }
    let mut g = Graph::new();
    let bv = AttentionBlock {
        query: crate::numerics::Linear {
            weight: g.input(&block.query.weight),
            bias: g.input(&block.query.bias),
        },
        key: crate::numerics::Linear {
            weight: g.input(&block.key.weight),
            bias: g.input(&block.key.bias),
        },
        value: crate::numerics::Linear {
            weight: g.input(&block.value.weight),
            bias: g.input(&block.value.bias),
        },
        merge: crate::numerics::Linear {
            weight: g.input(&block.merge.weight),
            bias: g.input(&block.merge.bias),
        },
        mlp_hidden: crate::numerics::Linear {
            weight: g.input(&block.mlp_hidden.weight),
            bias: g.input(&block.mlp_hidden.bias),
        },
        mlp_norm: crate::numerics::MaskedNorm {
            gamma: g.input(&block.mlp_norm.gamma),
            beta: g.input(&block.mlp_norm.beta),
            epsilon: block.mlp_norm.epsilon,
        },
        mlp_out: crate::numerics::Linear {
            weight: g.input(&block.mlp_out.weight),
            bias: g.input(&block.mlp_out.bias),
        },
    };
    let r = g.input(xr);
    let s = g.input(xs);
    let out = attention_on_graph(&mut g, &bv, heads, r, mask_r, s, mask_s)?;
    Ok(g.value(out).clone())
}

/// Refined descriptors `(F_A, F_B)` restricted to the valid columns.
pub fn pgat_forward(a: &SubgraphTensor, b: &SubgraphTensor, model: &ModelParams) -> Result<(Matrix, Matrix)> {
    let mut g = Graph::new();
    let mv = register(&mut g, model);
    let (fa, fb) = forward_on_graph(&mut g, &mv, a, b)?;
    Ok((
        g.value(fa).select_columns(&a.valid_columns()),
        g.value(fb).select_columns(&b.valid_columns()),
    ))
}
