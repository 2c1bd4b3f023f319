//! Matching layer: bidirectional cosine attention over pooled states and
//! multi-perspective cosine matching of each comment position against the
//! attentive target vector.

use rand::Rng;

use crate::encoder::EncodedText;
use crate::tensor::{NodeId, Tape, Tensor};

/// Perspective weight vectors for one matching target, per direction.
#[derive(Debug, Clone, Copy)]
pub struct PerspectiveNodes {
    /// `p x H` weights applied elementwise in the forward direction.
    pub fwd: NodeId,
    /// `p x H` weights for the backward direction.
    pub bwd: NodeId,
}

/// Perspective weights start near 1 so initial matching behaves like a
/// plain cosine.
pub fn init_perspectives(rng: &mut impl Rng, p: usize, hidden: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![p, hidden]);
    for v in t.data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    t
}

/// Cosine attention weights of both directions: each entry is the cosine of
/// one pooled comment state and one pooled target state.
pub fn attention_weights(
    tape: &Tape,
    comment: &EncodedText,
    target: &EncodedText,
) -> (NodeId, NodeId) {
    let fwd = tape.cosine_matrix(comment.pooled_fwd, target.pooled_fwd);
    let bwd = tape.cosine_matrix(comment.pooled_bwd, target.pooled_bwd);
    (fwd, bwd)
}

/// Weight-normalized sum of target states per comment position. Rows whose
/// weights cancel fall back to the unweighted mean (cosines may be negative).
pub fn attentive_vectors(tape: &Tape, alpha: NodeId, target_states: NodeId) -> NodeId {
    tape.attentive(alpha, target_states)
}

/// The matching function: cosine of the two vectors reweighted elementwise
/// by each of the `p` perspective vectors.
pub fn multi_perspective(tape: &Tape, v1: NodeId, v2: NodeId, w: NodeId) -> NodeId {
    tape.multi_cosine(v1, v2, w)
}

/// Matches the comment against one target, producing a `L'_c x 2p` sequence
/// of per-direction perspective cosines. An absent target (ablation or no
/// surroundings) yields the all-zero match sequence, keeping downstream
/// dimensions fixed.
pub fn match_target(
    tape: &Tape,
    comment: &EncodedText,
    target: Option<&EncodedText>,
    persp: &PerspectiveNodes,
    p: usize,
) -> NodeId {
    let target = match target {
        Some(t) => t,
        None => return tape.leaf(Tensor::zeros(vec![comment.pooled_len, 2 * p])),
    };
    let (alpha_fwd, alpha_bwd) = attention_weights(tape, comment, target);
    let sum_fwd = attentive_vectors(tape, alpha_fwd, target.pooled_fwd);
    let sum_bwd = attentive_vectors(tape, alpha_bwd, target.pooled_bwd);
    let m_fwd = multi_perspective(tape, comment.pooled_fwd, sum_fwd, persp.fwd);
    let m_bwd = multi_perspective(tape, comment.pooled_bwd, sum_bwd, persp.bwd);
    tape.concat_cols(&[m_fwd, m_bwd])
}

/// Surrounding comments are SEP-joined into one sequence upstream and then
/// matched exactly like any other target.
pub fn match_surroundings(
    tape: &Tape,
    comment: &EncodedText,
    joined: Option<&EncodedText>,
    persp: &PerspectiveNodes,
    p: usize,
) -> NodeId {
    match_target(tape, comment, joined, persp, p)
}
