//! Representation layer: embedding lookup, one-layer Bi-LSTM contextual
//! encoding and overlapping mean-pooling of adjacent hidden states.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Vocabulary, PAD_ID};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

pub const EMB_SCHEMA: &str = "mtm-emb-v1";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("io error reading embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file line {line}: {msg}")]
    BadEmbeddingFile { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One LSTM direction's parameters, leafed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
}

/// Both directions of a Bi-LSTM.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmNodes {
    pub fwd: LstmNodes,
    pub bwd: LstmNodes,
}

/// Per-direction encodings of one text, raw and pooled.
#[derive(Debug, Clone, Copy)]
pub struct EncodedText {
    pub raw_fwd: NodeId,
    pub raw_bwd: NodeId,
    pub pooled_fwd: NodeId,
    pub pooled_bwd: NodeId,
    pub len: usize,
    pub pooled_len: usize,
}

/// Embedding table initializer: PAD row zero, the rest uniform in +-0.1.
pub fn init_embedding(rng: &mut impl Rng, vocab_size: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![vocab_size, dim]);
    for row in 1..vocab_size {
        for v in &mut t.data_mut()[row * dim..(row + 1) * dim] {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    t
}

/// LSTM weights uniform in +-1/sqrt(H); forget-gate bias 1, other biases 0.
pub fn init_lstm(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> (Tensor, Tensor, Tensor) {
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut init = |shape: Vec<usize>| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        t
    };
    let wx = init(vec![input_dim, 4 * hidden]);
    let wh = init(vec![hidden, 4 * hidden]);
    let mut b = Tensor::zeros(vec![1, 4 * hidden]);
    for j in hidden..2 * hidden {
        b.data_mut()[j] = 1.0;
    }
    (wx, wh, b)
}

/// Looks up token ids in the embedding table leafed at `table`.
pub fn embed(tape: &Tape, table: NodeId, ids: &[usize]) -> NodeId {
    tape.embed(table, ids)
}

/// Runs both LSTM directions; row `i` of each output is the state at token `i`.
pub fn bilstm(tape: &Tape, embeds: NodeId, params: &BiLstmNodes) -> (NodeId, NodeId) {
    let fwd = tape.lstm_seq(embeds, params.fwd.wx, params.fwd.wh, params.fwd.b, false);
    let bwd = tape.lstm_seq(embeds, params.bwd.wx, params.bwd.wh, params.bwd.b, true);
    (fwd, bwd)
}

/// Overlapping mean-pooling over `ps` adjacent states, stride 1. Both
/// directions pool the same token span so pooled positions stay aligned.
pub fn mean_pool(tape: &Tape, states: NodeId, ps: usize) -> Result<NodeId, TensorError> {
    let len = tape.shape(states)[0];
    if ps < 1 || len < ps {
        return Err(TensorError::SequenceTooShort { len, ps });
    }
    Ok(tape.mean_window(states, ps))
}

/// Embeds, encodes and pools one token sequence.
pub fn encode_text(
    tape: &Tape,
    table: NodeId,
    ids: &[usize],
    lstm: &BiLstmNodes,
    ps: usize,
) -> Result<EncodedText, TensorError> {
    let embeds = embed(tape, table, ids);
    let (raw_fwd, raw_bwd) = bilstm(tape, embeds, lstm);
    let pooled_fwd = mean_pool(tape, raw_fwd, ps)?;
    let pooled_bwd = mean_pool(tape, raw_bwd, ps)?;
    Ok(EncodedText {
        raw_fwd,
        raw_bwd,
        pooled_fwd,
        pooled_bwd,
        len: ids.len(),
        pooled_len: ids.len() - ps + 1,
    })
}

/// Overwrites table rows for vocabulary tokens found in a pretrained-vector
/// file (`mtm-emb-v1 V d` header, then one token and `d` floats per line).
/// The PAD row is never touched. Returns how many rows were loaded.
pub fn apply_pretrained(
    table: &mut Tensor,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<usize, EncoderError> {
    let dim = table.cols();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(EncoderError::BadEmbeddingFile { line: 1, msg: "empty file".into() })??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != EMB_SCHEMA {
        return Err(EncoderError::BadEmbeddingFile {
            line: 1,
            msg: format!("expected header \"{EMB_SCHEMA} V d\", got {header:?}"),
        });
    }
    let d: usize = fields[2]
        .parse()
        .map_err(|_| EncoderError::BadEmbeddingFile { line: 1, msg: "bad dimension".into() })?;
    if d != dim {
        return Err(EncoderError::BadEmbeddingFile {
            line: 1,
            msg: format!("dimension {d} does not match table width {dim}"),
        });
    }

    let mut loaded = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or(EncoderError::BadEmbeddingFile { line: lineno, msg: "empty line".into() })?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EncoderError::BadEmbeddingFile { line: lineno, msg: e.to_string() })?;
        if values.len() != dim {
            return Err(EncoderError::BadEmbeddingFile {
                line: lineno,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id == PAD_ID || vocab.token(id) != token {
            continue; // unknown token, or would clobber the PAD row
        }
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn leaf_lstm(tape: &Tape, wx: Tensor, wh: Tensor, b: Tensor) -> LstmNodes {
        LstmNodes { wx: tape.leaf(wx), wh: tape.leaf(wh), b: tape.leaf(b) }
    }

    fn random_bilstm(tape: &Tape, rng: &mut ChaCha8Rng, d: usize, h: usize) -> BiLstmNodes {
        let (wx, wh, b) = init_lstm(rng, d, h);
        let fwd = leaf_lstm(tape, wx, wh, b);
        let (wx, wh, b) = init_lstm(rng, d, h);
        let bwd = leaf_lstm(tape, wx, wh, b);
        BiLstmNodes { fwd, bwd }
    }

    #[test]
    fn all_pad_sequence_embeds_to_zero() {
        let tape = Tape::new();
        let table = tape.leaf(init_embedding(&mut rng(), 5, 3));
        let e = embed(&tape, table, &[PAD_ID, PAD_ID, PAD_ID]);
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_embeds_to_its_row() {
        let tape = Tape::new();
        let t = init_embedding(&mut rng(), 5, 3);
        let expected = t.row(4).to_vec();
        let table = tape.leaf(t);
        let e = embed(&tape, table, &[4]);
        assert_eq!(tape.value(e).data(), &expected[..]);
    }

    #[test]
    fn gradient_reaches_only_looked_up_rows() {
        let tape = Tape::new();
        let table = tape.leaf(init_embedding(&mut rng(), 6, 3));
        let e = embed(&tape, table, &[2, 4, 2]);
        let loss = tape.sum(tape.mul(e, e));
        let grads = tape.backward(loss);
        let g = grads.get(table).unwrap();
        for row in 0..6 {
            let zero = g.row(row).iter().all(|&v| v == 0.0);
            assert_eq!(zero, row != 2 && row != 4, "row {row}");
        }
    }

    #[test]
    #[should_panic(expected = "out of vocabulary")]
    fn out_of_range_id_is_rejected() {
        let tape = Tape::new();
        let table = tape.leaf(init_embedding(&mut rng(), 4, 2));
        embed(&tape, table, &[4]);
    }

    #[test]
    fn length_one_sequence_gives_equal_direction_states() {
        let tape = Tape::new();
        let mut r = rng();
        let (wx, wh, b) = init_lstm(&mut r, 3, 4);
        let shared = leaf_lstm(&tape, wx, wh, b);
        let params = BiLstmNodes { fwd: shared, bwd: shared };
        let x = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let (f, bwd) = bilstm(&tape, x, &params);
        assert_eq!(tape.value(f).data(), tape.value(bwd).data());
    }

    #[test]
    fn forward_states_are_causal_and_backward_anticausal() {
        let mut r = rng();
        let d = 3;
        let h = 4;
        let base: Vec<f64> = (0..5 * d).map(|_| r.gen_range(-1.0..1.0)).collect();

        let run = |data: Vec<f64>, r: &mut ChaCha8Rng| {
            let mut r2 = ChaCha8Rng::seed_from_u64(9);
            let _ = r;
            let tape = Tape::new();
            let params = random_bilstm(&tape, &mut r2, d, h);
            let x = tape.leaf(Tensor::matrix(5, d, data).unwrap());
            let (f, b) = bilstm(&tape, x, &params);
            (tape.value(f), tape.value(b))
        };

        let (f0, b0) = run(base.clone(), &mut r);
        // perturb the last token: forward states before it must not move
        let mut pert = base.clone();
        pert[4 * d] += 1.0;
        let (f1, b1) = run(pert, &mut r);
        for i in 0..4 {
            assert_eq!(f0.row(i), f1.row(i), "forward state {i} saw a future token");
        }
        assert_ne!(b0.row(0), b1.row(0));

        // perturb the first token: backward states after it must not move
        let mut pert = base.clone();
        pert[0] += 1.0;
        let (f2, b2) = run(pert, &mut r);
        for i in 1..5 {
            assert_eq!(b0.row(i), b2.row(i), "backward state {i} saw a past token");
        }
        assert_ne!(f0.row(4), f2.row(4));
    }

    #[test]
    fn zero_parameters_give_zero_states_by_hand() {
        // With all weights zero: g = tanh(0) = 0, so c = f*c_prev stays 0 and
        // every hidden state is 0 regardless of the forget bias.
        let tape = Tape::new();
        let h = 2;
        let mut b = Tensor::zeros(vec![1, 4 * h]);
        for j in h..2 * h {
            b.data_mut()[j] = 1.0;
        }
        let p = leaf_lstm(&tape, Tensor::zeros(vec![3, 4 * h]), Tensor::zeros(vec![h, 4 * h]), b);
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.lstm_seq(x, p.wx, p.wh, p.b, false);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn biased_gates_match_hand_evaluation() {
        // Zero weights, biases b_f = 1 and b_g = 0.5: gates are identical at
        // every step, so the recurrence is c_t = sigma(1) c_{t-1} + 0.5 tanh(0.5).
        let tape = Tape::new();
        let h = 2;
        let mut b = Tensor::zeros(vec![1, 4 * h]);
        for j in h..2 * h {
            b.data_mut()[j] = 1.0;
        }
        for j in 2 * h..3 * h {
            b.data_mut()[j] = 0.5;
        }
        let p = leaf_lstm(&tape, Tensor::zeros(vec![3, 4 * h]), Tensor::zeros(vec![h, 4 * h]), b);
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let out = tape.value(tape.lstm_seq(x, p.wx, p.wh, p.b, false));

        let sig = |x: f64| 1.0 / (1.0 + (-x as f64).exp());
        let c1 = 0.5 * 0.5f64.tanh();
        let h1 = 0.5 * c1.tanh();
        let c2 = sig(1.0) * c1 + 0.5 * 0.5f64.tanh();
        let h2 = 0.5 * c2.tanh();
        for j in 0..h {
            assert!((out.row(0)[j] - h1).abs() < 1e-12);
            assert!((out.row(1)[j] - h2).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_states_stay_inside_unit_interval() {
        let tape = Tape::new();
        let mut r = rng();
        let params = random_bilstm(&tape, &mut r, 4, 6);
        let data: Vec<f64> = (0..40).map(|_| r.gen_range(-3.0..3.0)).collect();
        let x = tape.leaf(Tensor::matrix(10, 4, data).unwrap());
        let (f, b) = bilstm(&tape, x, &params);
        for v in tape.value(f).data().iter().chain(tape.value(b).data()) {
            assert!(v.abs() < 1.0);
        }
    }

    #[test]
    fn pooling_with_ps_one_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = mean_pool(&tape, x, 1).unwrap();
        assert_eq!(tape.value(p), tape.value(x));
    }

    #[test]
    fn full_window_pooling_is_the_mean() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let p = mean_pool(&tape, x, 3).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
    }

    #[test]
    fn window_of_two_matches_direct_arithmetic() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = mean_pool(&tape, x, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn pooling_rejects_too_short_sequences() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        assert_eq!(mean_pool(&tape, x, 3).unwrap_err(), TensorError::SequenceTooShort { len: 2, ps: 3 });
    }

    #[test]
    fn pooling_is_linear() {
        let mut r = rng();
        let xd: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let yd: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.6);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, 3, xd.clone()).unwrap());
        let y = tape.leaf(Tensor::matrix(4, 3, yd.clone()).unwrap());
        let combo = tape.add(tape.scale(x, a), tape.scale(y, b));
        let lhs = tape.value(mean_pool(&tape, combo, 2).unwrap());
        let px = tape.value(mean_pool(&tape, x, 2).unwrap());
        let py = tape.value(mean_pool(&tape, y, 2).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(px.data()).zip(py.data()) {
            assert!((l - (a * x + b * y)).abs() < 1e-6);
        }
    }

    #[test]
    fn pretrained_vectors_overwrite_matching_rows() {
        use std::io::Write;
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "<sep>", "hello", "world"].map(String::from).to_vec(),
        );
        let mut table = init_embedding(&mut rng(), vocab.len(), 2);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{EMB_SCHEMA} 3 2").unwrap();
        writeln!(f, "hello 0.25 -0.5").unwrap();
        writeln!(f, "absent 1.0 1.0").unwrap();
        writeln!(f, "<pad> 9.0 9.0").unwrap();
        f.flush().unwrap();
        let loaded = apply_pretrained(&mut table, &vocab, f.path()).unwrap();
        assert_eq!(loaded, 1);
        assert_eq!(table.row(vocab.id("hello")), &[0.25, -0.5]);
        assert_eq!(table.row(PAD_ID), &[0.0, 0.0]);
    }

    #[test]
    fn pretrained_dimension_mismatch_is_rejected() {
        use std::io::Write;
        let vocab = Vocabulary::from_tokens(["<pad>", "<unk>", "<sep>"].map(String::from).to_vec());
        let mut table = init_embedding(&mut rng(), vocab.len(), 4);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{EMB_SCHEMA} 1 2").unwrap();
        f.flush().unwrap();
        assert!(matches!(
            apply_pretrained(&mut table, &vocab, f.path()),
            Err(EncoderError::BadEmbeddingFile { line: 1, .. })
        ));
    }
}
