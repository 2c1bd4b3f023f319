//! Combination layer: informativeness from the comment itself, Bi-LSTM
//! aggregation of each match sequence, concatenation into the final
//! representation and the three-layer classification head.

use rand::Rng;

use crate::encoder::{BiLstmNodes, EncodedText};
use crate::tensor::{NodeId, Tape, Tensor};

/// Three affine layers; tanh follows the first two, softmax the last.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

/// One affine layer: weights uniform in +-1/sqrt(fan_in), bias zero.
pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut w = Tensor::zeros(vec![fan_in, fan_out]);
    for v in w.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    (w, Tensor::zeros(vec![1, fan_out]))
}

/// Mean of the comment's raw contextual states with directions concatenated,
/// a `1 x 2H` row.
pub fn informativeness(tape: &Tape, comment: &EncodedText) -> NodeId {
    let states = tape.concat_cols(&[comment.raw_fwd, comment.raw_bwd]);
    tape.mean_rows(states)
}

/// Runs the aggregation Bi-LSTM over one match sequence and returns the last
/// forward state next to the first backward state, a `1 x 2H_m` row.
pub fn aggregate_match(tape: &Tape, match_seq: NodeId, lstm: &BiLstmNodes) -> NodeId {
    let len = tape.shape(match_seq)[0];
    let fwd = tape.lstm_seq(match_seq, lstm.fwd.wx, lstm.fwd.wh, lstm.fwd.b, false);
    let bwd = tape.lstm_seq(match_seq, lstm.bwd.wx, lstm.bwd.wh, lstm.bwd.b, true);
    tape.concat_cols(&[tape.row(fwd, len - 1), tape.row(bwd, 0)])
}

/// Final representation `R = [R_info ; rt ; ra ; rc]`.
pub fn combine(tape: &Tape, r_info: NodeId, rt: NodeId, ra: NodeId, rc: NodeId) -> NodeId {
    tape.concat_cols(&[r_info, rt, ra, rc])
}

/// Classification head producing two logits. Dropout hits the input and both
/// hidden activations and only does anything in train mode.
pub fn classify(
    tape: &Tape,
    r: NodeId,
    clf: &ClassifierNodes,
    dropout: f64,
    train: bool,
    rng: &mut impl Rng,
) -> NodeId {
    let x = tape.dropout(r, dropout, train, rng);
    let h1 = tape.tanh(tape.add(tape.matmul(x, clf.w1), clf.b1));
    let h1 = tape.dropout(h1, dropout, train, rng);
    let h2 = tape.tanh(tape.add(tape.matmul(h1, clf.w2), clf.b2));
    let h2 = tape.dropout(h2, dropout, train, rng);
    tape.add(tape.matmul(h2, clf.w3), clf.b3)
}
