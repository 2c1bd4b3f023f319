//! The full matching network: parameter initialization, forward pass over a
//! single instance, and checkpoint serialization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{aggregate_match, classify, combine, informativeness, init_linear, ClassifierNodes};
use crate::corpus::{join_with_sep, Label, TrainingInstance, Vocabulary};
use crate::encoder::{encode_text, init_embedding, init_lstm, BiLstmNodes, LstmNodes};
use crate::matcher::{init_perspectives, match_target, PerspectiveNodes};
use crate::tensor::check::ParamMap;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

pub const CKPT_SCHEMA: &str = "mtm-ckpt-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {msg}")]
    BadCheckpoint { msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width d.
    pub embed_dim: usize,
    /// Encoder Bi-LSTM hidden size H per direction.
    pub hidden: usize,
    /// Aggregation Bi-LSTM hidden size per direction.
    pub agg_hidden: usize,
    /// Classifier hidden width.
    pub clf_hidden: usize,
    /// Number of matching perspectives p.
    pub perspectives: usize,
    /// Overlapping mean-pooling window ps.
    pub pool_size: usize,
    /// Number of surrounding comments K.
    pub k: usize,
    pub dropout: f64,
    pub no_title: bool,
    pub no_abstract: bool,
    pub no_surroundings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 200,
            hidden: 100,
            agg_hidden: 100,
            clf_hidden: 100,
            perspectives: 5,
            pool_size: 4,
            k: 5,
            dropout: 0.2,
            no_title: false,
            no_abstract: false,
            no_surroundings: false,
        }
    }
}

impl ModelConfig {
    /// Width of the combined representation fed to the classifier.
    pub fn dim_r(&self) -> usize {
        2 * self.hidden + 3 * 2 * self.agg_hidden
    }
}

/// Class index of a label in the output distribution.
pub fn class_index(label: Label) -> usize {
    match label {
        Label::Low => 0,
        Label::High => 1,
    }
}

pub const HIGH_CLASS: usize = 1;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// All trainable arrays, addressable by stable names.
    pub params: ParamMap,
}

impl Model {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        params.insert("embedding".into(), init_embedding(&mut rng, vocab_size, config.embed_dim));

        let lstm = |params: &mut ParamMap, prefix: &str, rng: &mut ChaCha8Rng, d: usize, h: usize| {
            let (wx, wh, b) = init_lstm(rng, d, h);
            params.insert(format!("{prefix}.wx"), wx);
            params.insert(format!("{prefix}.wh"), wh);
            params.insert(format!("{prefix}.b"), b);
        };
        lstm(&mut params, "enc.fwd", &mut rng, config.embed_dim, config.hidden);
        lstm(&mut params, "enc.bwd", &mut rng, config.embed_dim, config.hidden);
        lstm(&mut params, "agg.fwd", &mut rng, 2 * config.perspectives, config.agg_hidden);
        lstm(&mut params, "agg.bwd", &mut rng, 2 * config.perspectives, config.agg_hidden);

        for target in ["title", "abstract", "surround"] {
            for dir in ["fwd", "bwd"] {
                params.insert(
                    format!("persp.{target}.{dir}"),
                    init_perspectives(&mut rng, config.perspectives, config.hidden),
                );
            }
        }

        let (w1, b1) = init_linear(&mut rng, config.dim_r(), config.clf_hidden);
        let (w2, b2) = init_linear(&mut rng, config.clf_hidden, config.clf_hidden);
        let (w3, b3) = init_linear(&mut rng, config.clf_hidden, 2);
        params.insert("clf.w1".into(), w1);
        params.insert("clf.b1".into(), b1);
        params.insert("clf.w2".into(), w2);
        params.insert("clf.b2".into(), b2);
        params.insert("clf.w3".into(), w3);
        params.insert("clf.b3".into(), b3);

        Self { config, params }
    }

    pub fn vocab_size(&self) -> usize {
        self.params["embedding"].rows()
    }
}

/// Leafs every parameter on a tape, keyed by its stable name.
pub fn leaf_params(tape: &Tape, params: &ParamMap) -> BTreeMap<String, NodeId> {
    params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone()))).collect()
}

/// Token-id view of one training instance, with ablations already applied.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub comment: Vec<usize>,
    pub title: Option<Vec<usize>>,
    pub abstract_ids: Option<Vec<usize>>,
    /// The SEP-joined surrounding comments, absent when K = 0 or ablated.
    pub surroundings: Option<Vec<usize>>,
    pub label: Label,
    pub news_type: String,
}

/// Encodes a training instance to ids, dropping ablated targets.
pub fn prepare_input(
    instance: &TrainingInstance,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> ModelInput {
    let surroundings = if config.no_surroundings || config.k == 0 || instance.surroundings.is_empty()
    {
        None
    } else {
        Some(vocab.encode(&join_with_sep(&instance.surroundings)))
    };
    ModelInput {
        comment: vocab.encode(&instance.comment),
        title: (!config.no_title).then(|| vocab.encode(&instance.title)),
        abstract_ids: (!config.no_abstract).then(|| vocab.encode(&instance.abstract_tokens)),
        surroundings,
        label: instance.label,
        news_type: instance.news_type.clone(),
    }
}

/// Logits plus the intermediate representations the scorer and the ablation
/// invariants need.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub logits: NodeId,
    pub r_info: NodeId,
    pub rt: NodeId,
    pub ra: NodeId,
    pub rc: NodeId,
}

fn bilstm_nodes(nodes: &BTreeMap<String, NodeId>, prefix: &str) -> BiLstmNodes {
    let dir = |d: &str| LstmNodes {
        wx: nodes[&format!("{prefix}.{d}.wx")],
        wh: nodes[&format!("{prefix}.{d}.wh")],
        b: nodes[&format!("{prefix}.{d}.b")],
    };
    BiLstmNodes { fwd: dir("fwd"), bwd: dir("bwd") }
}

fn persp_nodes(nodes: &BTreeMap<String, NodeId>, target: &str) -> PerspectiveNodes {
    PerspectiveNodes {
        fwd: nodes[&format!("persp.{target}.fwd")],
        bwd: nodes[&format!("persp.{target}.bwd")],
    }
}

/// Full forward pass over one instance, recorded on `tape`.
pub fn forward(
    tape: &Tape,
    nodes: &BTreeMap<String, NodeId>,
    config: &ModelConfig,
    input: &ModelInput,
    train: bool,
    rng: &mut impl Rng,
) -> Result<ForwardPass, TensorError> {
    let table = nodes["embedding"];
    let enc = bilstm_nodes(nodes, "enc");
    let agg = bilstm_nodes(nodes, "agg");
    let ps = config.pool_size;
    let p = config.perspectives;

    let comment = encode_text(tape, table, &input.comment, &enc, ps)?;
    let encode_opt = |ids: &Option<Vec<usize>>| -> Result<_, TensorError> {
        ids.as_ref().map(|ids| encode_text(tape, table, ids, &enc, ps)).transpose()
    };
    let title = encode_opt(&input.title)?;
    let abstract_enc = encode_opt(&input.abstract_ids)?;
    let surround = encode_opt(&input.surroundings)?;

    let mt = match_target(tape, &comment, title.as_ref(), &persp_nodes(nodes, "title"), p);
    let ma = match_target(tape, &comment, abstract_enc.as_ref(), &persp_nodes(nodes, "abstract"), p);
    let ms = match_target(tape, &comment, surround.as_ref(), &persp_nodes(nodes, "surround"), p);

    let r_info = informativeness(tape, &comment);
    let rt = aggregate_match(tape, mt, &agg);
    let ra = aggregate_match(tape, ma, &agg);
    let rc = aggregate_match(tape, ms, &agg);
    let r = combine(tape, r_info, rt, ra, rc);

    let clf = ClassifierNodes {
        w1: nodes["clf.w1"],
        b1: nodes["clf.b1"],
        w2: nodes["clf.w2"],
        b2: nodes["clf.b2"],
        w3: nodes["clf.w3"],
        b3: nodes["clf.b3"],
    };
    let logits = classify(tape, r, &clf, config.dropout, train, rng);
    Ok(ForwardPass { logits, r_info, rt, ra, rc })
}

/// Cross-entropy loss of one instance against its label.
pub fn forward_loss(
    tape: &Tape,
    nodes: &BTreeMap<String, NodeId>,
    config: &ModelConfig,
    input: &ModelInput,
    train: bool,
    rng: &mut impl Rng,
) -> Result<NodeId, TensorError> {
    let pass = forward(tape, nodes, config, input, train, rng)?;
    Ok(tape.softmax_cross_entropy(pass.logits, class_index(input.label)))
}

/// P(HIGH) for one instance in eval mode.
pub fn predict_high(
    model: &Model,
    input: &ModelInput,
) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let nodes = leaf_params(&tape, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = forward(&tape, &nodes, &model.config, input, false, &mut rng)?;
    let probs = tape.value(tape.softmax(pass.logits));
    Ok(probs.data()[HIGH_CLASS])
}

/// Rounds every parameter through f32, the checkpoint precision, so metrics
/// logged for a saved model match what a reload reproduces.
pub fn round_params_to_f32(params: &mut ParamMap) {
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Gradient-checks the whole network on a small fixed batch: three
/// instances of length at most six, hidden size 8, two perspectives. The
/// loss is the summed cross-entropy; dropout is off so the graph is
/// deterministic.
pub fn gradcheck_full_model(
    seed: u64,
    h: f64,
) -> Result<crate::tensor::check::GradCheckReport, TensorError> {
    let config = ModelConfig {
        embed_dim: 6,
        hidden: 8,
        agg_hidden: 4,
        clf_hidden: 6,
        perspectives: 2,
        pool_size: 2,
        k: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let vocab_size = 12;
    let model = Model::init(config.clone(), vocab_size, seed);
    let sep = crate::corpus::SEP_ID;
    let inputs = [
        ModelInput {
            comment: vec![3, 4, 5, 6],
            title: Some(vec![4, 7, 8]),
            abstract_ids: Some(vec![5, 9, 10, 6]),
            surroundings: Some(vec![7, 11, sep, 8, 3]),
            label: Label::High,
            news_type: "society".into(),
        },
        ModelInput {
            comment: vec![9, 10, 11, 3, 4, 5],
            title: Some(vec![3, 6, 9]),
            abstract_ids: Some(vec![10, 4, 7]),
            surroundings: None,
            label: Label::Low,
            news_type: "society".into(),
        },
        ModelInput {
            comment: vec![6, 7],
            title: None,
            abstract_ids: Some(vec![8, 9, 11]),
            surroundings: Some(vec![5, 10]),
            label: Label::Low,
            news_type: "society".into(),
        },
    ];
    crate::tensor::check::grad_check(&model.params, h, 4, seed, |tape, nodes| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = None;
        for input in &inputs {
            let loss = forward_loss(tape, nodes, &config, input, false, &mut rng)
                .expect("toy batch is well formed");
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss),
            });
        }
        total.expect("nonempty batch")
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    schema: String,
    config: ModelConfig,
    /// Opaque training metadata (split seed, fractions, ...) so evaluation
    /// can rebuild the exact splits the logged metrics came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<serde_json::Value>,
    vocab: Vec<String>,
    params: Vec<CkptParam>,
}

/// Writes a checkpoint: one JSON header line, then every parameter as
/// little-endian f32, concatenated in header order. The write is atomic
/// (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    train_meta: Option<serde_json::Value>,
) -> Result<(), ModelError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        let header = CkptHeader {
            schema: CKPT_SCHEMA.into(),
            config: model.config.clone(),
            train: train_meta,
            vocab: vocab.tokens().to_vec(),
            params: model
                .params
                .iter()
                .map(|(name, t)| CkptParam { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)
            .map_err(|e| ModelError::BadCheckpoint { msg: e.to_string() })?;
        w.write_all(b"\n")?;
        for t in model.params.values() {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

/// Checkpoint contents: the model, its vocabulary and whatever training
/// metadata was stored alongside.
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub train_meta: Option<serde_json::Value>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(|_| ModelError::BadCheckpoint {
            msg: "missing header line".into(),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::BadCheckpoint { msg: e.to_string() })?;
    if header.schema != CKPT_SCHEMA {
        return Err(ModelError::BadCheckpoint {
            msg: format!("unknown schema {:?}", header.schema),
        });
    }

    let mut params = ParamMap::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| ModelError::BadCheckpoint {
            msg: format!("truncated payload at parameter {:?}", p.name),
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::BadCheckpoint { msg: "trailing bytes after payload".into() });
    }
    Ok(Checkpoint {
        model: Model { config: header.config, params },
        vocab: Vocabulary::from_tokens(header.vocab),
        train_meta: header.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SurroundingPolicy;
    use crate::corpus::{make_instances, CommentRecord, NewsExample};

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            hidden: 5,
            agg_hidden: 4,
            clf_hidden: 4,
            perspectives: 2,
            pool_size: 2,
            k: 2,
            dropout: 0.2,
            ..ModelConfig::default()
        }
    }

    fn example() -> NewsExample {
        NewsExample {
            title: tokens("t1 t2 t3 t4 t5"),
            abstract_tokens: tokens("a1 a2 a3 a4 a5 a6"),
            body: vec![],
            news_type: "society".into(),
            comments: vec![
                CommentRecord { text: tokens("t1 a1 a2 c1 c2 c3"), likes: 50, replies: 0 },
                CommentRecord { text: tokens("f1 f2 f3 f4 f5"), likes: 0, replies: 0 },
                CommentRecord { text: tokens("t2 a3 c4 c5 c6"), likes: 20, replies: 1 },
            ],
        }
    }

    fn vocab_for(example: &NewsExample) -> Vocabulary {
        crate::corpus::build_vocab(std::slice::from_ref(example), 1).unwrap()
    }

    fn an_input(config: &ModelConfig) -> (ModelInput, Vocabulary) {
        let ex = example();
        let vocab = vocab_for(&ex);
        let inst = make_instances(&ex, 0, config.k, SurroundingPolicy::Nearest).remove(0);
        (prepare_input(&inst, &vocab, config), vocab)
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let c = small_config();
        let a = Model::init(c.clone(), 20, 7);
        let b = Model::init(c.clone(), 20, 7);
        assert_eq!(a.params, b.params);
        let c2 = Model::init(c, 20, 8);
        assert_ne!(a.params, c2.params);
    }

    #[test]
    fn parameter_names_and_shapes_are_stable() {
        let c = small_config();
        let m = Model::init(c.clone(), 20, 0);
        let names: Vec<&str> = m.params.keys().map(String::as_str).collect();
        assert!(names.contains(&"embedding"));
        assert!(names.contains(&"enc.fwd.wx") && names.contains(&"agg.bwd.wh"));
        assert!(names.contains(&"persp.title.fwd") && names.contains(&"persp.surround.bwd"));
        assert!(names.contains(&"clf.w3"));
        assert_eq!(m.params["embedding"].shape(), &[20, c.embed_dim]);
        assert_eq!(m.params["enc.fwd.wx"].shape(), &[c.embed_dim, 4 * c.hidden]);
        assert_eq!(m.params["agg.fwd.wx"].shape(), &[2 * c.perspectives, 4 * c.agg_hidden]);
        assert_eq!(m.params["persp.title.fwd"].shape(), &[c.perspectives, c.hidden]);
        assert_eq!(m.params["clf.w1"].shape(), &[c.dim_r(), c.clf_hidden]);
        assert_eq!(m.params["clf.w3"].shape(), &[c.clf_hidden, 2]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_two_way() {
        let config = small_config();
        let (input, vocab) = an_input(&config);
        let model = Model::init(config.clone(), vocab.len(), 3);
        let run = || {
            let tape = Tape::new();
            let nodes = leaf_params(&tape, &model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let pass = forward(&tape, &nodes, &config, &input, false, &mut rng).unwrap();
            (tape.value(pass.logits), tape.value(tape.softmax(pass.logits)))
        };
        let (l1, p1) = run();
        let (l2, _) = run();
        assert_eq!(l1.shape(), &[1, 2]);
        assert_eq!(l1.data(), l2.data());
        assert!((p1.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ablating_the_title_changes_only_its_pathway() {
        let config = small_config();
        let (input, vocab) = an_input(&config);
        let model = Model::init(config.clone(), vocab.len(), 3);
        let mut ablated_config = config.clone();
        ablated_config.no_title = true;
        let mut ablated_input = input.clone();
        ablated_input.title = None;

        let tape = Tape::new();
        let nodes = leaf_params(&tape, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = forward(&tape, &nodes, &config, &input, false, &mut rng).unwrap();
        let cut = forward(&tape, &nodes, &ablated_config, &ablated_input, false, &mut rng).unwrap();

        assert_eq!(tape.value(full.r_info).data(), tape.value(cut.r_info).data());
        assert_eq!(tape.value(full.ra).data(), tape.value(cut.ra).data());
        assert_eq!(tape.value(full.rc).data(), tape.value(cut.rc).data());
        assert_ne!(tape.value(full.rt).data(), tape.value(cut.rt).data());

        // the ablated rt is the zero-input signature
        let zero_seq = tape.leaf(Tensor::zeros(vec![
            input.comment.len() - config.pool_size + 1,
            2 * config.perspectives,
        ]));
        let sig = aggregate_match(&tape, zero_seq, &super::bilstm_nodes(&nodes, "agg"));
        assert_eq!(tape.value(cut.rt).data(), tape.value(sig).data());
    }

    #[test]
    fn k_zero_and_no_surroundings_prepare_identically() {
        let mut c1 = small_config();
        c1.k = 0;
        let mut c2 = small_config();
        c2.no_surroundings = true;
        let ex = example();
        let vocab = vocab_for(&ex);
        let i1 = make_instances(&ex, 0, c1.k, SurroundingPolicy::Nearest).remove(0);
        let i2 = make_instances(&ex, 0, c2.k, SurroundingPolicy::Nearest).remove(0);
        let in1 = prepare_input(&i1, &vocab, &c1);
        let in2 = prepare_input(&i2, &vocab, &c2);
        assert!(in1.surroundings.is_none() && in2.surroundings.is_none());
        assert_eq!(in1.comment, in2.comment);
    }

    #[test]
    fn a_few_gradient_steps_reduce_the_loss() {
        let config = small_config();
        let (input, vocab) = an_input(&config);
        let mut model = Model::init(config.clone(), vocab.len(), 5);
        let loss_of = |m: &Model| {
            let tape = Tape::new();
            let nodes = leaf_params(&tape, &m.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = forward_loss(&tape, &nodes, &config, &input, false, &mut rng).unwrap();
            tape.value(loss).item()
        };
        let before = loss_of(&model);
        for _ in 0..5 {
            let tape = Tape::new();
            let nodes = leaf_params(&tape, &model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = forward_loss(&tape, &nodes, &config, &input, false, &mut rng).unwrap();
            let grads = tape.backward(loss);
            for (name, node) in &nodes {
                if let Some(g) = grads.get(*node) {
                    let t = model.params.get_mut(name).unwrap();
                    for (v, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *v -= 0.1 * gi;
                    }
                }
            }
        }
        assert!(loss_of(&model) < before, "loss did not drop");
    }

    #[test]
    fn checkpoint_roundtrips_config_vocab_and_f32_params() {
        let config = small_config();
        let ex = example();
        let vocab = vocab_for(&ex);
        let mut model = Model::init(config.clone(), vocab.len(), 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = serde_json::json!({"seed": 11});
        save_checkpoint(&path, &model, &vocab, Some(meta.clone())).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.model.config, config);
        assert_eq!(ckpt.vocab.tokens(), vocab.tokens());
        assert_eq!(ckpt.train_meta, Some(meta));
        round_params_to_f32(&mut model.params);
        assert_eq!(ckpt.model.params, model.params);
    }

    #[test]
    fn checkpoint_payload_is_four_bytes_per_value() {
        let config = small_config();
        let ex = example();
        let vocab = vocab_for(&ex);
        let model = Model::init(config, vocab.len(), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &vocab, None).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let n_values: usize = model.params.values().map(Tensor::len).sum();
        assert_eq!(bytes.len() - header_len, 4 * n_values);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let config = small_config();
        let ex = example();
        let vocab = vocab_for(&ex);
        let model = Model::init(config, vocab.len(), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &vocab, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::BadCheckpoint { .. })));
    }

    #[test]
    fn predict_high_is_a_probability() {
        let config = small_config();
        let (input, vocab) = an_input(&config);
        let model = Model::init(config, vocab.len(), 2);
        let p = predict_high(&model, &input).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}
