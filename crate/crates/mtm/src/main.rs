//! Command-line entry point: corpus synthesis, training, evaluation,
//! scoring, sweep reports and gradient checking. Every command echoes its
//! fully resolved configuration as the first output line; reports are
//! line-delimited JSON; output files are written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mtm::corpus::{self, load_corpus, make_instances, Corpus, CorpusError, SurroundingPolicy};
use mtm::encoder::apply_pretrained;
use mtm::model::{
    gradcheck_full_model, load_checkpoint, predict_high, prepare_input, save_checkpoint, Model,
    ModelConfig, ModelError,
};
use mtm::trainer::{
    ablation_sweep, evaluate, majority_baseline_accuracy, make_inputs, prepare_splits,
    split_corpus, train_prepared, AblationMode, TrainConfig, TrainError, PAPER_KS, PAPER_PSS,
};

const EXIT_OK: i32 = 0;
const EXIT_GENERIC: i32 = 1;
const EXIT_MISSING_FILE: i32 = 2;
const EXIT_MALFORMED: i32 = 3;
const EXIT_BAD_CONFIG: i32 = 4;

#[derive(Debug)]
struct CliError {
    code: i32,
    msg: String,
}

impl CliError {
    fn missing(path: &Path) -> Self {
        Self { code: EXIT_MISSING_FILE, msg: format!("missing file: {}", path.display()) }
    }
    fn generic(msg: impl Into<String>) -> Self {
        Self { code: EXIT_GENERIC, msg: msg.into() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::BadConfig { .. } => EXIT_BAD_CONFIG,
            TrainError::Corpus(c) => return corpus_error(c, &e.to_string()),
            TrainError::EmptySplit { .. } => EXIT_MALFORMED,
            _ => EXIT_GENERIC,
        };
        Self { code, msg: e.to_string() }
    }
}

fn corpus_error(e: &CorpusError, msg: &str) -> CliError {
    let code = match e {
        CorpusError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
        _ => EXIT_MALFORMED,
    };
    CliError { code, msg: msg.to_string() }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        corpus_error(&e, &e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
            ModelError::BadCheckpoint { .. } => EXIT_MALFORMED,
            _ => EXIT_GENERIC,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            EXIT_MISSING_FILE
        } else {
            EXIT_GENERIC
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "mtm", about = "Multi-target text matching for comment quality", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        news: usize,
        #[arg(long = "comments-per-news", default_value_t = 10)]
        comments_per_news: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one corpus split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Additionally break metrics down per news type.
        #[arg(long = "by-type")]
        by_type: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
    },
    /// Score every comment in a corpus with P(HIGH) and ablated sub-scores.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over an ablation / hyperparameter grid.
    Ablate(AblateArgs),
    /// Check model gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Finite-difference step, in [1e-4, 1e-2]. The default sits at the
        /// small end: larger steps inflate truncation error through the
        /// recurrent layers.
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Valid,
    Test,
    /// The whole corpus, ignoring the stored split.
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "out-ckpt")]
    out_ckpt: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Number of surrounding comments.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Overlapping mean-pooling window.
    #[arg(long, default_value_t = 4)]
    ps: usize,
    /// Number of matching perspectives.
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "no-title")]
    no_title: bool,
    #[arg(long = "no-abstract")]
    no_abstract: bool,
    #[arg(long = "no-surroundings")]
    no_surroundings: bool,
    #[arg(long = "embed-dim", default_value_t = 200)]
    embed_dim: usize,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    #[arg(long = "agg-hidden", default_value_t = 100)]
    agg_hidden: usize,
    #[arg(long = "clf-hidden", default_value_t = 100)]
    clf_hidden: usize,
    #[arg(long = "min-count", default_value_t = 2)]
    min_count: usize,
    /// Stop after this many epochs without validation-F1 improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Stop once validation F1 reaches this value.
    #[arg(long = "target-f1")]
    target_f1: Option<f64>,
    /// Optional pretrained embedding file to initialize from.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl TrainArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            min_count: self.min_count,
            patience: self.patience,
            target_f1: self.target_f1,
            model: ModelConfig {
                embed_dim: self.embed_dim,
                hidden: self.hidden,
                agg_hidden: self.agg_hidden,
                clf_hidden: self.clf_hidden,
                perspectives: self.p,
                pool_size: self.ps,
                k: self.k,
                dropout: self.dropout,
                no_title: self.no_title,
                no_abstract: self.no_abstract,
                no_surroundings: self.no_surroundings,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `paper` for the published K x ps grid, or a custom spec of the form
    /// `ablations=full,noTitle;ks=0,5;pss=1,4`.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long = "embed-dim", default_value_t = 50)]
    embed_dim: usize,
    #[arg(long, default_value_t = 25)]
    hidden: usize,
    #[arg(long = "agg-hidden", default_value_t = 25)]
    agg_hidden: usize,
    #[arg(long = "clf-hidden", default_value_t = 25)]
    clf_hidden: usize,
    #[arg(long = "min-count", default_value_t = 2)]
    min_count: usize,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The parsed grid: ablations x Ks x pooling sizes.
struct Grid {
    ablations: Vec<AblationMode>,
    ks: Vec<usize>,
    pss: Vec<usize>,
}

fn parse_grid(spec: &str) -> Result<Grid, CliError> {
    if spec == "paper" {
        return Ok(Grid {
            ablations: vec![AblationMode::Full],
            ks: PAPER_KS.to_vec(),
            pss: PAPER_PSS.to_vec(),
        });
    }
    let mut grid = Grid { ablations: vec![AblationMode::Full], ks: vec![5], pss: vec![4] };
    for part in spec.split(';') {
        let (key, values) = part.split_once('=').ok_or_else(|| CliError {
            code: EXIT_BAD_CONFIG,
            msg: format!("bad grid component {part:?}, expected key=v1,v2,..."),
        })?;
        let bad = |msg: String| CliError { code: EXIT_BAD_CONFIG, msg };
        match key.trim() {
            "ablations" => {
                grid.ablations = values
                    .split(',')
                    .map(|v| {
                        AblationMode::parse(v.trim())
                            .ok_or_else(|| bad(format!("unknown ablation {v:?}")))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "ks" | "pss" => {
                let parsed: Vec<usize> = values
                    .split(',')
                    .map(|v| {
                        v.trim().parse().map_err(|_| bad(format!("bad {key} value {v:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                if key == "ks" {
                    grid.ks = parsed;
                } else {
                    grid.pss = parsed;
                }
            }
            other => return Err(bad(format!("unknown grid key {other:?}"))),
        }
    }
    Ok(grid)
}

fn load_corpus_checked(path: &Path) -> Result<Corpus, CliError> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    Ok(load_corpus(path)?)
}

/// Writes a file atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CliError::generic(e.to_string()))?;
    Ok(())
}

fn echo_config(command: &str, resolved: serde_json::Value) {
    println!("{}", json!({ "command": command, "resolved": resolved }));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { seed, news, comments_per_news, out } => {
            echo_config(
                "synth",
                json!({ "seed": seed, "news": news, "commentsPerNews": comments_per_news,
                        "out": out.display().to_string() }),
            );
            let body = corpus::synth::generate(seed, news, comments_per_news);
            write_atomic(&out, &body)?;
            println!("{}", json!({ "written": out.display().to_string(), "news": news }));
            Ok(())
        }
        Command::Train(args) => cmd_train(args),
        Command::Eval { ckpt, corpus, by_type, split } => cmd_eval(&ckpt, &corpus, by_type, split),
        Command::Score { ckpt, corpus, out } => cmd_score(&ckpt, &corpus, &out),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck { seed, h } => {
            echo_config("gradcheck", json!({ "seed": seed, "h": h }));
            let report = gradcheck_full_model(seed, h).map_err(|e| {
                if matches!(e, mtm::tensor::TensorError::BadStep { .. }) {
                    CliError { code: EXIT_BAD_CONFIG, msg: e.to_string() }
                } else {
                    CliError::generic(e.to_string())
                }
            })?;
            let ok = report.max_rel_err < 1e-3;
            println!(
                "{}",
                json!({ "maxRelErr": report.max_rel_err, "coordsChecked": report.coords_checked,
                        "worst": report.worst.as_ref().map(|(n, c)| json!({"param": n, "coord": c})),
                        "pass": ok })
            );
            if ok {
                Ok(())
            } else {
                Err(CliError::generic(format!(
                    "gradient check failed: max relative error {}",
                    report.max_rel_err
                )))
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.to_config();
    config.validate()?;
    echo_config(
        "train",
        json!({ "corpus": args.corpus.display().to_string(),
                "outCkpt": args.out_ckpt.display().to_string(),
                "config": config,
                "embeddings": args.embeddings.as_ref().map(|p| p.display().to_string()) }),
    );
    let corpus = load_corpus_checked(&args.corpus)?;
    let splits = prepare_splits(corpus, &config)?;
    let mut model = Model::init(config.model.clone(), splits.vocab.len(), config.seed);
    if let Some(path) = &args.embeddings {
        if !path.exists() {
            return Err(CliError::missing(path));
        }
        let table = model.params.get_mut("embedding").expect("embedding parameter");
        let loaded = apply_pretrained(table, &splits.vocab, path)
            .map_err(|e| CliError { code: EXIT_MALFORMED, msg: e.to_string() })?;
        println!("{}", json!({ "pretrainedRows": loaded }));
    }
    println!(
        "{}",
        json!({ "vocab": splits.vocab.len(), "train": splits.train.len(),
                "valid": splits.valid.len(), "test": splits.test.len(),
                "majorityBaselineAcc": majority_baseline_accuracy(&splits.valid) })
    );

    let outcome = train_prepared(model, &splits, &config)?;
    for entry in &outcome.log {
        println!("{}", serde_json::to_string(entry).expect("serializable log entry"));
    }
    let meta = serde_json::to_value(&config).expect("serializable config");
    save_checkpoint(&args.out_ckpt, &outcome.model, &outcome.vocab, Some(meta))?;
    println!(
        "{}",
        json!({ "bestEpoch": outcome.best_epoch, "bestValid": outcome.best_valid,
                "ckpt": args.out_ckpt.display().to_string() })
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, corpus_path: &Path, by_type: bool, split: SplitArg) -> Result<(), CliError> {
    if !ckpt.exists() {
        return Err(CliError::missing(ckpt));
    }
    let loaded = load_checkpoint(ckpt)?;
    echo_config(
        "eval",
        json!({ "ckpt": ckpt.display().to_string(), "corpus": corpus_path.display().to_string(),
                "byType": by_type, "split": split, "config": loaded.model.config }),
    );
    let corpus = load_corpus_checked(corpus_path)?;
    let train_meta: Option<TrainConfig> =
        loaded.train_meta.clone().and_then(|v| serde_json::from_value(v).ok());

    let inputs = match (split, &train_meta) {
        (SplitArg::All, _) | (_, None) => {
            let (filtered, _) = corpus::filter_lengths(corpus);
            make_inputs(&filtered.news, &loaded.vocab, &loaded.model.config)
        }
        (_, Some(meta)) => {
            let [train, valid, test] = split_corpus(corpus, meta.fractions, meta.seed)?;
            let news = match split {
                SplitArg::Train => train,
                SplitArg::Valid => valid,
                SplitArg::Test => test,
                SplitArg::All => unreachable!(),
            };
            make_inputs(&news, &loaded.vocab, &loaded.model.config)
        }
    };
    let (overall, per_type) = evaluate(&loaded.model, &inputs, by_type)?;
    println!("{}", json!({ "split": split, "n": inputs.len(), "metrics": overall }));
    if let Some(per_type) = per_type {
        for (news_type, metrics) in per_type {
            println!("{}", json!({ "type": news_type, "metrics": metrics }));
        }
    }
    Ok(())
}

fn cmd_score(ckpt: &Path, corpus_path: &Path, out: &Path) -> Result<(), CliError> {
    if !ckpt.exists() {
        return Err(CliError::missing(ckpt));
    }
    let loaded = load_checkpoint(ckpt)?;
    echo_config(
        "score",
        json!({ "ckpt": ckpt.display().to_string(), "corpus": corpus_path.display().to_string(),
                "out": out.display().to_string(), "config": loaded.model.config }),
    );
    let corpus = load_corpus_checked(corpus_path)?;
    let (filtered, _) = corpus::filter_lengths(corpus);

    let mut report = String::new();
    for (ni, item) in filtered.news.iter().enumerate() {
        for inst in make_instances(item, ni, loaded.model.config.k, SurroundingPolicy::Nearest) {
            let full = prepare_input(&inst, &loaded.vocab, &loaded.model.config);
            let p = predict_high(&loaded.model, &full)
                .map_err(|e| CliError::generic(e.to_string()))?;
            // sub-scores: re-forward with one target zeroed at a time
            let probe = |strip: &dyn Fn(&mut mtm::model::ModelInput)| {
                let mut input = full.clone();
                strip(&mut input);
                predict_high(&loaded.model, &input)
            };
            let no_title = probe(&|i| i.title = None)
                .map_err(|e| CliError::generic(e.to_string()))?;
            let no_abstract = probe(&|i| i.abstract_ids = None)
                .map_err(|e| CliError::generic(e.to_string()))?;
            let no_surroundings = probe(&|i| i.surroundings = None)
                .map_err(|e| CliError::generic(e.to_string()))?;
            let line = json!({
                "news": inst.news_idx,
                "comment": inst.comment_idx,
                "pHigh": p,
                "score": 10.0 * p,
                "sub": { "noTitle": 10.0 * no_title, "noAbstract": 10.0 * no_abstract,
                         "noSurroundings": 10.0 * no_surroundings },
            });
            report.push_str(&line.to_string());
            report.push('\n');
        }
    }
    write_atomic(out, &report)?;
    println!("{}", json!({ "written": out.display().to_string() }));
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let grid = parse_grid(&args.grid)?;
    let base = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        min_count: args.min_count,
        model: ModelConfig {
            embed_dim: args.embed_dim,
            hidden: args.hidden,
            agg_hidden: args.agg_hidden,
            clf_hidden: args.clf_hidden,
            perspectives: args.p,
            dropout: args.dropout,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    base.validate()?;
    echo_config(
        "ablate",
        json!({ "corpus": args.corpus.display().to_string(), "grid": args.grid,
                "ablations": grid.ablations.iter().map(|a| a.name()).collect::<Vec<_>>(),
                "ks": grid.ks, "pss": grid.pss, "config": base,
                "out": args.out.as_ref().map(|p| p.display().to_string()) }),
    );
    let corpus = load_corpus_checked(&args.corpus)?;
    let rows = ablation_sweep(&corpus, &base, &grid.ablations, &grid.ks, &grid.pss)?;
    let mut report = String::new();
    for row in &rows {
        report.push_str(&serde_json::to_string(row).expect("serializable row"));
        report.push('\n');
    }
    match &args.out {
        Some(path) => {
            write_atomic(path, &report)?;
            println!("{}", json!({ "written": path.display().to_string(), "rows": rows.len() }));
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::exit(EXIT_OK),
        Err(e) => {
            eprintln!("{}", json!({ "error": e.msg, "code": e.code }));
            std::process::exit(e.code);
        }
    }
}
