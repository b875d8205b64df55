//! Graph layers built from tape primitives: GCN propagation, top-k graph
//! pooling with a tanh gate, and the hybrid convolution that concatenates a
//! 1-D convolution over text order with a GCN aggregation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{extract_subgraph, Adjacency, NormalizedAdjacency};
use crate::tensor::{Scalar, Tensor};

/// Handles to a GCN layer's weight (`c_in x c_out`) and bias (`1 x c_out`).
#[derive(Clone, Copy, Debug)]
pub struct GcnVars {
    pub weight: Var,
    pub bias: Var,
}

/// Handles to the conv half of an hConv layer: kernel
/// (`width * c_in x c_out/2`) and bias (`1 x c_out/2`).
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HConvVars {
    pub gcn: GcnVars,
    pub conv: ConvVars,
}

/// Records `a_norm` as a tape constant.
pub fn adjacency_constant<T: Scalar>(tape: &mut Tape<T>, a_norm: &NormalizedAdjacency) -> Var {
    let n = a_norm.n();
    let data = a_norm
        .as_slice()
        .iter()
        .map(|&v| T::from_f64_lossy(v))
        .collect();
    tape.constant(Tensor::from_vec(n, n, data).expect("square"))
}

/// `a_norm * x * W + b`, without the activation.
pub fn gcn_linear<T: Scalar>(
    tape: &mut Tape<T>,
    a_norm: Var,
    x: Var,
    params: GcnVars,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let a_shape = tape.value(a_norm).shape();
    if a_shape != (n, n) {
        return Err(Error::Shape(format!(
            "adjacency {a_shape:?} for {n} feature rows"
        )));
    }
    let (c_in, c_out) = tape.value(params.weight).shape();
    // Multiply on the narrower side first.
    let h = if c_out <= c_in {
        let xw = tape.matmul(x, params.weight)?;
        tape.matmul(a_norm, xw)?
    } else {
        let ax = tape.matmul(a_norm, x)?;
        tape.matmul(ax, params.weight)?
    };
    tape.add_row(h, params.bias)
}

/// GCN propagation `relu(a_norm * x * W + b)`; the node count is unchanged.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    a_norm: Var,
    x: Var,
    params: GcnVars,
) -> Result<Var> {
    let h = gcn_linear(tape, a_norm, x, params)?;
    Ok(tape.relu(h))
}

/// hConv: `relu([conv1d_same(x), a_norm * x * W + b])`. Both halves emit
/// `c_out / 2` channels; the activation is applied once after the concat.
pub fn hconv_forward<T: Scalar>(
    tape: &mut Tape<T>,
    a_norm: Var,
    x: Var,
    params: HConvVars,
) -> Result<Var> {
    let conv_out = tape.value(params.conv.kernel).cols();
    let gcn_out = tape.value(params.gcn.weight).cols();
    if conv_out != gcn_out {
        return Err(Error::Config(format!(
            "hConv halves disagree: conv emits {conv_out}, gcn emits {gcn_out}"
        )));
    }
    let conv = tape.conv1d_same(x, params.conv.kernel, params.conv.bias, params.conv.width)?;
    let gcn = gcn_linear(tape, a_norm, x, params.gcn)?;
    let both = tape.concat_cols(conv, gcn)?;
    Ok(tape.relu(both))
}

/// Raw scores `|x * p|` on the tape together with the ranking keys, where
/// masked (padded) rows are pushed to negative infinity.
pub fn gpool_scores<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: Var,
    mask: &[bool],
) -> Result<(Var, Vec<T>)> {
    let (n, c) = tape.value(x).shape();
    if tape.value(p).shape() != (c, 1) {
        return Err(Error::Shape(format!(
            "projection {:?} for {c} channels",
            tape.value(p).shape()
        )));
    }
    if mask.len() != n {
        return Err(Error::Shape(format!("mask of length {} for {n} rows", mask.len())));
    }
    let xp = tape.matmul(x, p)?;
    let y = tape.abs(xp);
    let keys = tape
        .value(y)
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&v, &real)| if real { v } else { T::neg_infinity() })
        .collect();
    Ok((y, keys))
}

/// Indices of the `k` largest scores, ties broken toward the smaller index,
/// returned in ascending index order.
pub fn rank_topk<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    let eligible = scores.iter().filter(|v| **v != T::neg_infinity()).count();
    if k == 0 || k > eligible {
        return Err(Error::Config(format!(
            "top-k with k = {k} over {eligible} selectable nodes"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Number of nodes a pooling site keeps: half the real nodes, rounded up,
/// never below one.
pub fn pooled_size(n_real: usize) -> usize {
    n_real.div_ceil(2).max(1)
}

pub struct GPoolOutput {
    pub adjacency: Adjacency,
    pub features: Var,
    pub idx: Vec<usize>,
}

/// Top-k graph pooling.
///
/// Scores every node by `|x * p|`, keeps the `k` best in their original
/// order, slices the adjacency to the kept nodes and scales each kept
/// feature row by `tanh` of its score. The selection itself is a constant
/// during backward; `p` receives gradient only through the gate. With
/// `gate = false` the kept rows pass through unscaled, which leaves `p`
/// without any gradient path.
pub fn gpool_forward<T: Scalar>(
    tape: &mut Tape<T>,
    adjacency: &Adjacency,
    x: Var,
    p: Var,
    k: usize,
    mask: &[bool],
    gate: bool,
) -> Result<GPoolOutput> {
    let n = tape.value(x).rows();
    if adjacency.n() != n {
        return Err(Error::Shape(format!(
            "adjacency of {} nodes for {n} feature rows",
            adjacency.n()
        )));
    }
    let (y, keys) = gpool_scores(tape, x, p, mask)?;
    let idx = rank_topk(&keys, k)?;
    let pooled_adj = extract_subgraph(adjacency, &idx)?;
    let kept = tape.gather_rows(x, &idx)?;
    let features = if gate {
        let y_kept = tape.gather_rows(y, &idx)?;
        let g = tape.tanh(y_kept);
        tape.rowwise_scale(kept, g)?
    } else {
        kept
    };
    Ok(GPoolOutput {
        adjacency: pooled_adj,
        features,
        idx,
    })
}
